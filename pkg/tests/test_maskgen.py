import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mde.maskgen import (
    CHANNELS,
    OCCLUSIONS,
    ChannelBox,
    NormalizedBox,
    ParameterError,
    analytic_stats,
    box_sidecar,
    centered_box,
    corruption_stats,
    denormalize_box,
    export_mask,
    make_mask,
    mask_statistics,
    normalize_box,
    occlusion_region,
    occlusion_template,
    parse_sidecar,
    sample_box_arrays,
)


def coverage_probability(S, W, H):
    """Exact per-pixel probability that one sampled box covers the pixel.

    Enumerates the rounded heights with their interval lengths, then counts
    the corner positions that cover each row and column.
    """
    lo, hi = S * H, H
    prob = np.zeros((H, W))
    for k in range(1, H + 1):
        a, b = max(lo, k - 0.5), min(hi, k + 0.5)
        if b <= a:
            continue
        pk = (b - a) / (hi - lo)
        w = int(min(W, max(1, np.rint(S * W * H / k))))
        rows = np.array([min(r, H - k) - max(0, r - k + 1) + 1 for r in range(H)]) / (H - k + 1)
        cols = np.array([min(c, W - w) - max(0, c - w + 1) + 1 for c in range(W)]) / (W - w + 1)
        prob += pk * np.outer(rows, cols)
    return prob


class TestBoxSampling:
    def test_area_within_one_side_of_target(self):
        rng = np.random.default_rng(0)
        for S in (0.1, 0.25, 0.5):
            x, y, w, h = sample_box_arrays(rng, S, 96, 96, 5000)
            assert np.all(np.abs(w * h - S * 96 * 96) <= np.maximum(w, h))

    def test_boxes_fit_inside_image(self):
        x, y, w, h = sample_box_arrays(np.random.default_rng(1), 0.1, 40, 24, 5000)
        assert np.all((x >= 0) & (y >= 0) & (x + w <= 40) & (y + h <= 24))
        assert np.all((w >= 1) & (h >= 1))

    def test_extreme_ratio_rejected(self):
        with pytest.raises(ParameterError):
            sample_box_arrays(np.random.default_rng(0), 1e-6, 8, 8, 1)
        with pytest.raises(ParameterError):
            make_mask("rec", np.random.default_rng(0), 1.0, 8, 8)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.07, 0.9), st.integers(16, 64), st.integers(16, 64), st.integers(0, 2**32 - 1))
    def test_area_invariant_property(self, S, W, H, seed):
        x, y, w, h = sample_box_arrays(np.random.default_rng(seed), S, W, H, 64)
        assert np.all(np.abs(w * h - S * W * H) <= np.maximum(w, h))
        assert np.all((x + w <= W) & (y + h <= H))


class TestMaskFamilies:
    def test_inpainting_complements_reverse_inpainting(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            i = make_mask("i", rng, 0.3, 32, 32, 2).mask
            ri = make_mask("ri", rng, 0.3, 32, 32, 2).mask
            np.testing.assert_array_equal(i, 1 - ri)

    def test_ri_box_is_centered_with_ratio_area(self):
        b = centered_box(0.25, 96, 96)
        assert (b.x, b.y, b.w, b.h) == (24, 24, 48, 48)

    def test_re_shares_box_across_channels(self):
        batch = make_mask("re", np.random.default_rng(3), 0.25, 32, 32, 16)
        for row in batch.boxes:
            assert len({(b.x, b.y, b.w, b.h) for b in row}) == 1
        np.testing.assert_array_equal(batch.mask[:, 0], batch.mask[:, 2])

    def test_rec_channels_are_independent(self):
        batch = make_mask("rec", np.random.default_rng(4), 0.25, 32, 32, 50)
        differ = [len({(b.x, b.y, b.w, b.h) for b in row}) > 1 for row in batch.boxes]
        assert sum(differ) > 40

    @pytest.mark.parametrize("task,k", [("col1", 1), ("col2", 2)])
    def test_colorization_keeps_k_channels(self, task, k):
        m = make_mask(task, np.random.default_rng(5), 0.1, 16, 16, 30).mask
        per_channel = m.reshape(30, CHANNELS, -1)
        assert np.all((per_channel.min(axis=2) == per_channel.max(axis=2)))
        np.testing.assert_array_equal(per_channel[:, :, 0].sum(axis=1), k)

    def test_col_draws_both_counts(self):
        m = make_mask("col", np.random.default_rng(6), 0.1, 8, 8, 200).mask
        counts = set(m[:, :, 0, 0].sum(axis=1).astype(int).tolist())
        assert counts == {1, 2}

    def test_masks_are_binary(self):
        for task in ("i", "ri", "col", "re", "rec"):
            m = make_mask(task, np.random.default_rng(7), 0.2, 24, 24, 4).mask
            assert set(np.unique(m).tolist()) <= {0.0, 1.0}
            assert m.shape == (4, 3, 24, 24)

    def test_mask_matches_its_boxes(self):
        batch = make_mask("rec", np.random.default_rng(8), 0.2, 20, 30, 5)
        for i, row in enumerate(batch.boxes):
            for b in row:
                ones = np.argwhere(batch.mask[i, b.channel] == 1)
                assert ones[:, 0].min() == b.y and ones[:, 0].max() == b.y + b.h - 1
                assert ones[:, 1].min() == b.x and ones[:, 1].max() == b.x + b.w - 1

    def test_unknown_task(self):
        with pytest.raises(ParameterError):
            make_mask("outpaint", np.random.default_rng(0), 0.1, 8, 8)

    def test_same_seed_same_masks(self):
        a = make_mask("rec", np.random.default_rng(9), 0.1, 16, 16, 4).mask
        b = make_mask("rec", np.random.default_rng(9), 0.1, 16, 16, 4).mask
        np.testing.assert_array_equal(a, b)


class TestStatistics:
    def test_single_mask_hand_count(self):
        m = np.ones((1, 3, 2, 2), dtype=np.float32)
        m[0, :, 0, 0] = 0  # dropped
        m[0, 1, 1, 1] = 0  # corrupted only
        assert corruption_stats(m) == (0.25, 0.5)

    def test_rec_matches_exact_coverage_oracle(self):
        S, W = 0.1, 32
        p = coverage_probability(S, W, W)
        want_dropped = float(((1 - p) ** 3).mean())
        want_corrupted = float(1 - (p ** 3).mean())
        got = mask_statistics("rec", np.random.default_rng(0), S, W, W, 20000)
        assert got.dropped == pytest.approx(want_dropped, abs=0.004)
        assert got.corrupted == pytest.approx(want_corrupted, abs=0.001)

    def test_oracle_coverage_averages_to_ratio_in_expectation(self):
        p = coverage_probability(0.25, 24, 24)
        assert p.mean() == pytest.approx(0.25, abs=0.01)

    def test_re_dropped_is_one_minus_ratio(self):
        st_ = mask_statistics("re", np.random.default_rng(1), 0.5, 32, 32, 2000)
        assert st_.dropped == pytest.approx(0.5, abs=0.01)
        assert st_.dropped == st_.corrupted

    def test_col1_fractions(self):
        st_ = mask_statistics("col1", np.random.default_rng(2), 0.1, 8, 8, 10)
        assert st_.dropped == 0.0 and st_.corrupted == 1.0
        assert st_.masked_entries == pytest.approx(2 / 3)

    @settings(max_examples=40, deadline=None)
    @given(st.sampled_from(["re", "rec"]), st.floats(0.1, 0.9), st.integers(10, 40),
           st.integers(10, 40), st.integers(1, 30), st.integers(0, 2**32 - 1))
    def test_box_counting_equals_realized_masks(self, task, S, W, H, n, seed):
        got = mask_statistics(task, np.random.default_rng(seed), S, W, H, n, chunk=7)
        visible = np.concatenate([make_mask(task, rng, S, W, H, m).mask > 0.5
                                  for rng in [np.random.default_rng(seed)]
                                  for m in [7] * (n // 7) + [n % 7] if m])
        assert got.dropped == (~visible.any(axis=1)).mean()
        assert got.corrupted == (~visible.all(axis=1)).mean()
        assert got.masked_entries == (~visible).mean()

    def test_statistics_deterministic_per_seed(self):
        a = mask_statistics("rec", np.random.default_rng(3), 0.2, 16, 16, 300, chunk=128)
        b = mask_statistics("rec", np.random.default_rng(3), 0.2, 16, 16, 300, chunk=128)
        assert a == b

    def test_analytic_values(self):
        assert analytic_stats("rec", 0.1) == pytest.approx((0.729, 0.999))
        assert analytic_stats("re", 0.25) == (0.75, 0.75)


class TestBoxesAndTemplates:
    def test_normalize_roundtrip(self):
        b = ChannelBox(3, 5, 10, 7, 2)
        nb = normalize_box(b, 32, 16)
        assert nb == NormalizedBox(3 / 32, 5 / 16, 13 / 32, 12 / 16)
        assert denormalize_box(nb, 32, 16, channel=2) == b

    def test_normalized_boxes_nan_for_hidden_channel(self):
        batch = make_mask("col1", np.random.default_rng(0), 0.1, 8, 8, 3)
        nb = batch.normalized_boxes()
        assert nb.shape == (3, 3, 4)
        assert np.isnan(nb).any(axis=2).sum(axis=1).tolist() == [2, 2, 2]

    @pytest.mark.parametrize("name", OCCLUSIONS)
    def test_occlusion_templates_hide_a_proper_region(self, name):
        batch = occlusion_template(name, 96, 96, N=2)
        hidden = 1 - batch.mask[0, 0]
        assert 0 < hidden.mean() < 1
        r = occlusion_region(name, 96, 96)
        assert hidden.sum() == r.w * r.h
        np.testing.assert_array_equal(batch.mask[:, 0], batch.mask[:, 1])

    def test_halves_partition_the_image(self):
        a = occlusion_template("left_half", 32, 32).mask
        b = occlusion_template("right_half", 32, 32).mask
        np.testing.assert_array_equal((1 - a) + (1 - b), np.ones_like(a))

    def test_both_eyes_covers_each_eye(self):
        both = 1 - occlusion_template("both_eyes", 48, 48).mask
        for eye in ("left_eye", "right_eye"):
            one = 1 - occlusion_template(eye, 48, 48).mask
            assert np.all(both >= one)

    def test_sidecar_roundtrip(self, tmp_path):
        batch = make_mask("rec", np.random.default_rng(1), 0.2, 16, 16, 2)
        side = export_mask(batch, 1, tmp_path / "m.png")
        assert parse_sidecar(side.read_text()) == batch.boxes[1]
        assert (tmp_path / "m.png").exists()
        assert box_sidecar([None]) == ""
