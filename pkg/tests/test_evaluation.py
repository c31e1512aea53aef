import hashlib
import math

import matplotlib.image as mpimg
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfdiff.dataset import generate_eval_samples
from sfdiff.evaluation import (
    NMSE_FLOOR_DB,
    EvalRecord,
    aggregate,
    error_ratio,
    evaluate,
    format_sweep_csv,
    nmse,
    read_sweep_csv,
    render_heatmap,
    render_panel,
    sweep,
    write_sweep_csv,
)
from sfdiff.kernel_baseline import reconstruct_slice

from .conftest import GOLDEN

VIRIDIS_LOW = np.array([68, 1, 84])


def field_pixels(path):
    """RGB array of the heatmap area (colour bar cropped off)."""
    img = (mpimg.imread(path)[..., :3] * 255).round().astype(int)
    return img[:, : int(img.shape[1] * 0.75)]


def two_ratio_pair(r1, r2):
    truths = [np.ones((4, 4)), np.ones((4, 4))]
    # a uniform offset of sqrt(r) gives squared-error ratio r
    return [t + math.sqrt(r) for t, r in zip(truths, (r1, r2))], truths


class TestNmse:
    def test_exact_match_floor(self, rng):
        t = [rng.uniform(size=(32, 32))]
        assert nmse(t, t) == NMSE_FLOOR_DB

    def test_zero_estimate(self, rng):
        t = rng.uniform(0.1, 1, (32, 32))
        assert nmse([np.zeros_like(t)], [t]) == pytest.approx(0.0, abs=1e-12)

    def test_two_sample_example(self):
        est, truth = two_ratio_pair(0.1, 0.001)
        # 10*log10(0.0505)
        assert nmse(est, truth) == pytest.approx(-12.967086218813385, abs=1e-9)

    @settings(max_examples=50)
    @given(st.floats(1e-6, 1e6))
    def test_scale_invariance(self, c):
        rng = np.random.default_rng(3)
        t = [rng.uniform(0.1, 1, (32, 32)) for _ in range(3)]
        e = [x + rng.normal(0, 0.1, x.shape) for x in t]
        base = nmse(e, t)
        assert nmse([c * x for x in e], [c * x for x in t]) == pytest.approx(base, abs=1e-12)

    def test_zero_norm_names_sample(self):
        with pytest.raises(ValueError, match="sample 1"):
            nmse([np.ones(4), np.ones(4)], [np.ones(4), np.zeros(4)])

    def test_bad_lists(self):
        with pytest.raises(ValueError):
            nmse([], [])
        with pytest.raises(ValueError):
            nmse([np.ones(3)], [np.ones(3), np.ones(3)])

    def test_regions(self, rng):
        t = rng.uniform(0.5, 1, (32, 32))
        mask = rng.uniform(size=(32, 32)) < 0.25
        e = t + 0.1
        e[mask] = t[mask]  # pass-through observed cells
        full = nmse([e], [t], region="full")
        unknown = nmse([e], [t], region="unknown-only", masks=[mask])
        assert full < unknown
        # with observed cells also in error the full-region value can only grow
        assert full <= nmse([t + 0.1], [t])
        with pytest.raises(ValueError):
            nmse([e], [t], region="unknown-only")
        with pytest.raises(ValueError):
            nmse([e], [t], region="bogus")

    def test_error_ratio_shape(self):
        with pytest.raises(ValueError):
            error_ratio(np.ones(3), np.ones(4))


@pytest.fixture(scope="module")
def shards():
    return generate_eval_samples(3, 2, 3)


class TestSweep:
    def test_rows(self, shards):
        rows = sweep(shards, lambda ss: [reconstruct_slice(s) for s in ss])
        assert len(rows) == 3 * 4
        keys = [(f, m) for f, m, _, _ in rows]
        assert keys == sorted(keys)
        assert all(n == 2 for *_, n in rows)
        by = {(f, m): db for f, m, db, _ in rows}
        for f in {f for f, _ in keys}:
            assert by[(f, 512)] <= by[(f, 64)]

    def test_empty_density_list(self, shards):
        rows = sweep(shards, lambda ss: [s.magnitude for s in ss], densities=())
        assert rows == []
        assert format_sweep_csv(rows) == "frequency_hz,m,nmse_db,n_samples\n"

    def test_missing_shard(self, shards):
        with pytest.raises(KeyError):
            sweep({64: shards[64]}, lambda ss: [x.magnitude for x in ss], densities=(64, 128))

    def test_csv_round_trip(self, tmp_path):
        rows = [(30.0, 64, -3.21234, 5), (36.923076923, 128, -120.0, 5)]
        p = tmp_path / "s.csv"
        write_sweep_csv(p, rows)
        raw = p.read_bytes()
        assert b"\r" not in raw
        assert raw.decode().splitlines()[1] == "30,64,-3.2123,5"
        back = read_sweep_csv(p)
        assert [(m, n) for _, m, _, n in back] == [(64, 5), (128, 5)]

    def test_aggregate(self):
        recs = [EvalRecord(0, "k", 64, 100.0, 0.1), EvalRecord(1, "k", 64, 100.0, 0.001),
                EvalRecord(2, "k", 128, 50.0, 1.0)]
        rows = aggregate(recs)
        assert rows[0] == (50.0, 128, 0.0, 1)
        assert rows[1][2] == pytest.approx(-12.967086218813385)

    def test_evaluate_length_mismatch(self, shards):
        with pytest.raises(ValueError):
            evaluate(shards[64], [], "kernel")


class TestHeatmap:
    def test_constant_field_single_colour(self, tmp_path):
        p = tmp_path / "c.png"
        render_heatmap(np.full((32, 32), 0.7), p)
        px = field_pixels(p)
        dark = np.all(np.abs(px - VIRIDIS_LOW) <= 2, axis=-1)
        ys, xs = np.nonzero(dark)
        region = px[ys.min():ys.max() + 1, xs.min():xs.max() + 1].reshape(-1, 3)
        assert len(np.unique(region, axis=0)) == 1

    def test_deterministic_bytes(self, tmp_path, rng):
        f = rng.uniform(size=(32, 32))
        render_heatmap(f, tmp_path / "a.png")
        render_heatmap(f, tmp_path / "b.png")
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()

    def test_upscaled_size(self, tmp_path):
        checker = (np.indices((32, 32)).sum(0) % 2).astype(float)
        p = tmp_path / "k.png"
        render_heatmap(checker, p)
        dark = np.all(np.abs(field_pixels(p) - VIRIDIS_LOW) <= 2, axis=-1)
        ys, xs = np.nonzero(dark)
        assert ys.max() - ys.min() + 1 >= 256 and xs.max() - xs.min() + 1 >= 256

    def test_non_finite(self, tmp_path):
        f = np.ones((32, 32))
        f[3, 3] = np.nan
        with pytest.raises(ValueError):
            render_heatmap(f, tmp_path / "x.png")

    def test_unwritable(self, tmp_path):
        with pytest.raises(OSError):
            render_heatmap(np.ones((32, 32)), tmp_path / "missing" / "x.png")

    def test_golden_digest(self, tmp_path):
        field = np.abs(np.load(GOLDEN / "fig2_98hz_margin4.npy"))
        p = tmp_path / "g.png"
        render_heatmap(field, p)
        expected = (GOLDEN / "fig2_98hz_margin4.png.sha256").read_text().strip()
        assert hashlib.sha256(p.read_bytes()).hexdigest() == expected

    def test_panel(self, tmp_path, rng):
        truth = rng.uniform(size=(32, 32))
        mask = rng.uniform(size=(32, 32)) < 0.1
        p = tmp_path / "panel.png"
        render_panel(mask, truth, {"kernel": truth * 0.9, "sf-diff": truth}, p, {"kernel": -20.0, "sf-diff": -120.0})
        img = mpimg.imread(p)
        assert img.shape[1] > img.shape[0] * 2
