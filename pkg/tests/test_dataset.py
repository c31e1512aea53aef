import hashlib

import numpy as np
import pytest

from sfdiff.dataset import (
    CorpusManifest,
    DatasetConfig,
    ObservationMask,
    build_test_corpus,
    build_training_corpus,
    denormalize,
    evaluation_frequencies,
    generate_eval_samples,
    generate_training_samples,
    make_sample,
    normalize,
    read_corpus,
    sample_mask,
    sample_room,
    sample_stream,
    write_corpus,
)
from sfdiff.room_acoustics import RoomSpec


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestSampleRoom:
    def test_area_statistics(self):
        rng = np.random.default_rng(0)
        rooms = [sample_room(rng) for _ in range(10_000)]
        areas = np.array([r.floor_area for r in rooms])
        assert areas.min() >= 20 and areas.max() <= 60
        assert abs(areas.mean() - 40) <= 1
        assert all(r.t60 == 0.6 for r in rooms)
        for r in rooms[:500]:
            assert 0.5 <= r.lx / r.ly <= 2.0
            assert 2.5 <= r.lz <= 4.0
            assert all(0.1 <= s <= d - 0.1 for s, d in zip(r.source, (r.lx, r.ly, r.lz)))

    def test_point_mass(self):
        cfg = DatasetConfig(area_range=(30, 30), aspect_range=(1, 1))
        r = sample_room(np.random.default_rng(1), cfg)
        assert r.lx == pytest.approx(np.sqrt(30)) and r.ly == pytest.approx(np.sqrt(30))


class TestSampleMask:
    def test_full(self):
        m = sample_mask(np.random.default_rng(0), 1024)
        assert m.bits.all() and m.m == 1024

    def test_count(self):
        m = sample_mask(np.random.default_rng(0), 64)
        assert m.m == 64 and m.coverage == 0.0625

    @pytest.mark.parametrize("m", [0, 1025, -3])
    def test_out_of_range(self, m):
        with pytest.raises(ValueError):
            sample_mask(np.random.default_rng(0), m)

    def test_uniformity(self):
        rng = np.random.default_rng(5)
        n = 100_000
        hits = np.zeros(1024)
        for _ in range(n):
            hits += sample_mask(rng, 64).bits.ravel()
        p = 64 / 1024
        sigma = np.sqrt(n * p * (1 - p))
        assert np.all(np.abs(hits - n * p) <= 5 * sigma)


class TestNormalize:
    def test_constant(self):
        x = np.full((32, 32), 2.5)
        n, s = normalize(x)
        assert s == 2.5 and np.all(n == 1.0)

    def test_round_trip(self, rng):
        x = rng.uniform(0.1, 3.0, (32, 32))
        n, s = normalize(x)
        np.testing.assert_allclose(denormalize(n, s), x, rtol=1e-15)

    def test_zero_field(self):
        with pytest.raises(ValueError):
            normalize(np.zeros((4, 4)))

    def test_inference_headroom(self, rng):
        x = rng.uniform(0.1, 1.0, (32, 32))
        mask = np.zeros((32, 32), bool)
        mask[:, :16] = True
        x[mask] = np.minimum(x[mask], 1.0)
        x[~mask] = np.minimum(x[~mask], 1.1)
        x[0, 0] = 1.0
        x[0, 20] = 1.1
        n, s = normalize(x, mask)
        assert s == pytest.approx(1.2)
        assert n.max() < 1.0
        np.testing.assert_allclose(n * s, x, rtol=1e-15)

    def test_denormalize(self, rng):
        assert np.all(denormalize(np.zeros((3, 3)), 2.0) == 0)
        x = rng.uniform(size=(5, 5))
        np.testing.assert_array_equal(denormalize(x, 1.0), x)
        np.testing.assert_allclose(denormalize(x, 3.5), x * 3.5, rtol=0)
        with pytest.raises(ValueError):
            denormalize(x, 0.0)


class TestCorpus:
    def test_frequency_grid(self):
        f = evaluation_frequencies(40)
        assert f[0] == 30 and f[-1] == 300
        np.testing.assert_allclose(np.diff(f), 270 / 39, rtol=1e-12)

    def test_training_invariants(self):
        samples = generate_training_samples(11, 64)
        for s in samples:
            assert s.scale > 0
            assert s.normalized.min() >= 0 and s.normalized.max() <= 1
            np.testing.assert_allclose(s.normalized * s.scale, s.magnitude, rtol=1e-12)
            assert 30 <= s.frequency <= 300
            assert 20 <= s.room.floor_area <= 60
            assert s.mask.m in (64, 128, 256, 512)
            assert s.mask.bits.sum() == s.mask.m

    def test_threads_match_serial(self):
        a = generate_training_samples(3, 6)
        b = generate_training_samples(3, 6, threads=3)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.magnitude, y.magnitude)
            np.testing.assert_array_equal(x.mask.bits, y.mask.bits)

    def test_training_corpus_deterministic(self, tmp_path):
        build_training_corpus(9, 4, tmp_path / "a")
        build_training_corpus(9, 4, tmp_path / "b")
        assert sha(tmp_path / "a" / "train.sfd") == sha(tmp_path / "b" / "train.sfd")
        assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
        man = CorpusManifest.read(tmp_path / "a" / "manifest.json")
        assert man.sample_count == 4 and man.seed == 9

    def test_single_test_sample(self, tmp_path):
        man = build_test_corpus(2, 1, 1, tmp_path)
        assert man.sample_count == 1
        shards = {m: read_corpus(tmp_path / name) for m, name in man.files.items()}
        assert sorted(int(m) for m in shards) == [64, 128, 256, 512]
        for m, s in shards.items():
            assert len(s) == 1 and s[0].mask.m == int(m)

    def test_eval_masks_shared_per_room(self):
        shards = generate_eval_samples(4, 2, 3)
        s64 = shards[64]
        assert len(s64) == 6
        np.testing.assert_array_equal(s64[0].mask.bits, s64[2].mask.bits)
        np.testing.assert_array_equal(s64[0].magnitude, shards[512][0].magnitude)

    def test_round_trip_bit_exact(self, tmp_path):
        samples = generate_training_samples(21, 8)
        write_corpus(tmp_path / "x.sfd", samples)
        back = read_corpus(tmp_path / "x.sfd")
        write_corpus(tmp_path / "y.sfd", back)
        assert sha(tmp_path / "x.sfd") == sha(tmp_path / "y.sfd")
        for a, b in zip(samples, back):
            np.testing.assert_array_equal(a.magnitude, b.magnitude)
            np.testing.assert_array_equal(a.normalized.astype(np.float32), b.normalized)
            np.testing.assert_array_equal(a.mask.bits, b.mask.bits)
            assert a.room == b.room and a.frequency == b.frequency and a.scale == b.scale
            assert a.grid.z_o == b.grid.z_o

    def test_header_layout(self, tmp_path):
        samples = generate_training_samples(1, 2)
        write_corpus(tmp_path / "c.sfd", samples)
        raw = (tmp_path / "c.sfd").read_bytes()
        assert raw[:4] == b"SFD1"
        assert int.from_bytes(raw[4:8], "little") == 1
        assert int.from_bytes(raw[8:12], "little") == 32
        assert int.from_bytes(raw[16:24], "little") == 2
        assert len(raw) == 24 + 2 * (88 + 128 + 4096 + 4096)

    def test_rejects_garbage(self, tmp_path):
        p = tmp_path / "bad.sfd"
        p.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(ValueError):
            read_corpus(p)

    def test_config_rejects_unknown(self):
        with pytest.raises(ValueError):
            DatasetConfig.from_dict({"bogus": 1})

    def test_make_sample_mask(self):
        room = RoomSpec(5, 4, 3, 0.6, (1, 1, 1))
        mask = ObservationMask(np.ones((32, 32), bool))
        s = make_sample(room, 1.2, 100.0, mask)
        assert s.normalized.max() == 1.0

    def test_streams_independent(self):
        a = sample_stream(1, 0).random()
        b = sample_stream(1, 1).random()
        assert a != b and sample_stream(1, 0).random() == a
