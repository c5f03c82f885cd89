import numpy as np
import pytest

from mde.diff import DimensionError, GradTape, Tensor, backward
from mde.models import (
    FULL_SCALE,
    ConfigError,
    Discriminator,
    Generator,
    ModelConfig,
    add_coord_channels,
)

SMALL = ModelConfig(width=16, height=16, base_width=4, depth=2, bottleneck=16)


def rng(seed=0):
    return np.random.default_rng(seed)


class TestGenerator:
    def test_output_shape_and_range(self):
        g = Generator(SMALL, rng())
        x = rng(1).random((3, 3, 16, 16)).astype(np.float32)
        y = g(x).data
        assert y.shape == (3, 3, 16, 16)
        assert y.min() > 0 and y.max() < 1

    def test_skip_wiring_pairs_equal_resolutions(self):
        g = Generator(ModelConfig(width=32, height=32, base_width=4, depth=3, bottleneck=8), rng())
        sizes = g.spatial_sizes()
        assert sizes == [32, 16, 8, 4, 8, 16, 32]
        for dec_level, enc_level in g.skip_wiring.items():
            assert dec_level == enc_level

    def test_inventory_names_and_shapes(self):
        g = Generator(SMALL, rng())
        inv = dict(g.parameter_inventory())
        assert inv["enc0.conv.weight"] == (4, 3, 3, 3)
        assert inv["enc1.down.weight"] == (8, 8, 3, 3)
        assert inv["bottleneck.encode.weight"] == (8 * 4 * 4, 16)
        assert inv["dec1.up.weight"] == (8, 8, 3, 3)
        assert inv["dec0.conv.weight"] == (4, 8, 3, 3)
        assert inv["out.conv.weight"] == (3, 7, 3, 3)
        assert "enc0.conv.bias" not in inv

    def test_he_initialization_scale(self):
        g = Generator(ModelConfig(width=16, height=16, base_width=32, depth=1, bottleneck=8), rng())
        w = g.params["enc0.down.weight"].data
        assert w.std() == pytest.approx(np.sqrt(2 / (32 * 9)), rel=0.05)
        assert np.all(g.params["enc0.bn.gamma"].data == 1)

    def test_rejects_wrong_input(self):
        with pytest.raises(DimensionError):
            Generator(SMALL, rng())(np.zeros((1, 3, 8, 8), dtype=np.float32))

    def test_indivisible_size_rejected(self):
        with pytest.raises(ConfigError):
            Generator(ModelConfig(width=20, height=20, depth=3), rng())

    def test_eval_mode_is_per_sample(self):
        g = Generator(SMALL, rng())
        x = rng(2).random((4, 3, 16, 16)).astype(np.float32)
        full = g.forward(x, training=False).data
        one = g.forward(x[1:2], training=False).data
        np.testing.assert_allclose(full[1:2], one, atol=1e-6)

    def test_training_updates_running_stats(self):
        g = Generator(SMALL, rng())
        before = g.buffers["enc0.bn.running_mean"].copy()
        g.forward(rng(3).random((2, 3, 16, 16)).astype(np.float32), training=True)
        assert not np.array_equal(before, g.buffers["enc0.bn.running_mean"])

    def test_same_seed_same_weights(self):
        assert Generator(SMALL, rng(5)).checksum() == Generator(SMALL, rng(5)).checksum()
        assert Generator(SMALL, rng(5)).checksum() != Generator(SMALL, rng(6)).checksum()

    def test_every_parameter_gets_gradient(self):
        g = Generator(SMALL, rng()).astype(np.float64)
        x = rng(4).random((2, 3, 16, 16))
        with GradTape() as tape:
            loss = g(x).sum()
        grads = backward(loss, tape, g.params)
        assert all(np.abs(v).sum() > 0 for k, v in grads.items() if not k.endswith(".beta")), \
            [k for k, v in grads.items() if np.abs(v).sum() == 0]

    def test_full_scale_config_is_valid(self):
        FULL_SCALE.validate()
        assert FULL_SCALE.width == 96


class TestDiscriminator:
    def test_heads(self):
        d = Discriminator(SMALL, rng())
        real, boxes = d(rng(1).random((5, 3, 16, 16)).astype(np.float32))
        assert real.shape == (5,) and boxes.shape == (5, 3, 4)
        assert 0 < real.data.min() and real.data.max() < 1
        assert 0 < boxes.data.min() and boxes.data.max() < 1

    def test_coord_channels_widen_first_conv(self):
        with_c = Discriminator(SMALL, rng())
        without = Discriminator(ModelConfig(**{**SMALL.as_dict(), "coord_channels": False}), rng())
        assert with_c.params["d0.conv.weight"].shape[1] == 5
        assert without.params["d0.conv.weight"].shape[1] == 3

    def test_coord_channel_values(self):
        x = add_coord_channels(np.zeros((1, 3, 3, 5))).data
        np.testing.assert_allclose(x[0, 3, 0], [0, 0.25, 0.5, 0.75, 1])
        np.testing.assert_allclose(x[0, 4, :, 0], [0, 0.5, 1])

    def test_no_batchnorm(self):
        d = Discriminator(SMALL, rng())
        assert d.buffers == {}
