import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mde.config import format_config, load_config, parse_bool, parse_config_text
from mde.models import ConfigError
from mde.trainer import TrainConfig


def test_parses_types_and_comments():
    text = """
    # a comment line
    task = re        # trailing comment
    s = 0.25
    steps=300
    use_hns = off
    perceptual_weights = 1,0,0,0,0
    """
    values = parse_config_text(text)
    assert values == {"task": "re", "s": 0.25, "steps": 300, "use_hns": False,
                      "perceptual_weights": "1,0,0,0,0"}


@pytest.mark.parametrize("text,needle", [
    ("bogus = 1", "bogus"),
    ("steps = many", "steps"),
    ("use_hns = maybe", "use_hns"),
    ("just words", "key = value"),
    ("s = 0.1\ns = 0.2", "duplicate"),
])
def test_errors_are_named(text, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config_text(text)


def test_error_reports_line_number(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("task = re\n\nsteps = x\n")
    with pytest.raises(ConfigError, match=r"run.cfg:3"):
        load_config(path)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")


def test_bool_spellings():
    assert parse_bool("Yes") and parse_bool("1") and not parse_bool("OFF")


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["re", "rec", "i", "col1"]), st.floats(0.05, 0.9),
       st.integers(1, 10**6), st.floats(1e-6, 1.0), st.booleans())
def test_format_roundtrip(task, s, steps, lr, coords):
    cfg = TrainConfig(task=task, s=s, steps=steps, lr_gen=lr, coord_channels=coords)
    assert TrainConfig.from_dict(parse_config_text(format_config(cfg))) == cfg
