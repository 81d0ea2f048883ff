"""Corpus: PNM codec, clip loading, synthetic generation, frame distances."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from order_verify.corpus import (
    SynthConfig,
    assign_splits,
    decode_pnm,
    downsample,
    encode_pnm,
    frame_filename,
    frame_ssd,
    gen_clip,
    gen_corpus,
    load_clip,
    load_manifest,
)
from order_verify.errors import ConfigError, FormatError, GapError


def _write_gray_clip(tmp_path, name, frames):
    d = tmp_path / name
    d.mkdir()
    for i, pix in enumerate(frames):
        (d / frame_filename(i)).write_bytes(encode_pnm(pix))
    return d


class TestPnmCodec:
    def test_roundtrip_bit_exact_8bit(self):
        rng = np.random.default_rng(0)
        raw = rng.integers(0, 256, size=(16, 16, 1), dtype=np.uint8)
        pixels = raw.astype(np.float64) / 255.0
        again = decode_pnm(encode_pnm(pixels))
        assert np.array_equal(again, pixels)
        # byte-level: encode(decode(bytes)) == bytes
        data = encode_pnm(pixels)
        assert encode_pnm(decode_pnm(data)) == data

    def test_rgb_roundtrip(self):
        rng = np.random.default_rng(1)
        pixels = rng.integers(0, 256, size=(8, 12, 3), dtype=np.uint8) / 255.0
        out = decode_pnm(encode_pnm(pixels))
        assert out.shape == (8, 12, 3)
        assert np.array_equal(out, pixels)

    def test_comment_in_header(self):
        pixels = np.full((8, 8, 1), 0.5)
        data = encode_pnm(pixels)
        commented = data[:2] + b"\n# a comment\n" + data[3:]
        assert np.allclose(decode_pnm(commented), decode_pnm(data))

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            decode_pnm(b"P3\n2 2\n255\n" + bytes(4))

    def test_truncated_payload(self):
        pixels = np.full((8, 8, 1), 0.25)
        data = encode_pnm(pixels)
        with pytest.raises(FormatError):
            decode_pnm(data[:-5])


class TestLoadClip:
    def test_loads_frames_in_order(self, tmp_path):
        rng = np.random.default_rng(2)
        frames = [rng.random((16, 16, 1)) for _ in range(3)]
        _write_gray_clip(tmp_path, "c0", frames)
        entry = {"id": "c0", "path": "c0", "n_frames": 3, "fps": 10.0}
        clip = load_clip(tmp_path, entry)
        assert len(clip) == 3
        assert clip.frames[0].pixels.shape == (16, 16, 1)
        for i, f in enumerate(clip.frames):
            assert f.index == i

    def test_missing_frame_is_gap_error(self, tmp_path):
        frames = [np.full((16, 16, 1), 0.5)] * 3
        d = _write_gray_clip(tmp_path, "c1", frames)
        (d / frame_filename(1)).unlink()
        entry = {"id": "c1", "path": "c1", "n_frames": 3}
        with pytest.raises(GapError, match="index 1"):
            load_clip(tmp_path, entry)

    def test_all_zero_bytes_decode_to_zero(self, tmp_path):
        d = tmp_path / "c2"
        d.mkdir()
        header = b"P5\n16 16\n255\n"
        (d / frame_filename(0)).write_bytes(header + bytes(256))
        clip = load_clip(tmp_path, {"id": "c2", "path": "c2", "n_frames": 1})
        assert np.all(clip.frames[0].pixels == 0.0)

    def test_dimension_mismatch(self, tmp_path):
        d = tmp_path / "c3"
        d.mkdir()
        (d / frame_filename(0)).write_bytes(encode_pnm(np.full((16, 16, 1), 0.5)))
        (d / frame_filename(1)).write_bytes(encode_pnm(np.full((8, 8, 1), 0.5)))
        with pytest.raises(FormatError):
            load_clip(tmp_path, {"id": "c3", "path": "c3", "n_frames": 2})


class TestFrameSsd:
    def test_identity_is_zero(self):
        a = np.random.default_rng(0).random((8, 8, 1))
        assert frame_ssd(a, a) == 0.0

    def test_single_pixel_difference(self):
        a = np.zeros((8, 8, 1))
        b = a.copy()
        b[3, 4, 0] = 0.5
        assert frame_ssd(a, b) == pytest.approx(0.25)

    def test_matches_bruteforce_loop(self):
        rng = np.random.default_rng(3)
        a, b = rng.random((8, 8, 1)), rng.random((8, 8, 1))
        expected = 0.0
        for r in range(8):
            for c in range(8):
                expected += (a[r, c, 0] - b[r, c, 0]) ** 2
        assert frame_ssd(a, b) == pytest.approx(expected, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            frame_ssd(np.zeros((8, 8, 1)), np.zeros((8, 9, 1)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_symmetry_and_zero_iff_identical(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.random((6, 5, 1))
        b = rng.random((6, 5, 1))
        assert frame_ssd(a, b) == pytest.approx(frame_ssd(b, a), rel=1e-12)
        assert (frame_ssd(a, b) == 0.0) == bool(np.array_equal(a, b))


class TestDownsample:
    def test_block_mean(self):
        x = np.arange(16, dtype=np.float64).reshape(4, 4, 1)
        d = downsample(x, 2)
        assert d.shape == (2, 2, 1)
        assert d[0, 0, 0] == pytest.approx(np.mean([0, 1, 4, 5]))

    def test_factor_one_is_identity(self):
        x = np.random.default_rng(0).random((5, 5, 1))
        assert downsample(x, 1) is x


class TestGenClip:
    def test_same_seed_bit_identical(self):
        cfg = SynthConfig(kind="pendulum", n_frames=20, seed=11)
        a, b = gen_clip(cfg), gen_clip(cfg)
        for fa, fb in zip(a.frames, b.frames):
            assert np.array_equal(fa.pixels, fb.pixels)

    def test_static_frames_identical(self):
        clip = gen_clip(SynthConfig(kind="static", n_frames=6, seed=2))
        base = clip.frames[0].pixels
        for f in clip.frames[1:]:
            assert np.array_equal(f.pixels, base)

    def test_object_too_large(self):
        with pytest.raises(ConfigError, match="object_size"):
            gen_clip(SynthConfig(kind="linear", object_size=32, size=32))

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            gen_clip(SynthConfig(kind="zigzag"))

    def test_pixels_in_range_with_keypoints_in_bounds(self):
        for kind in ("linear", "pendulum", "bounce", "static"):
            clip = gen_clip(SynthConfig(kind=kind, n_frames=30, seed=5))
            stack = clip.pixel_stack()
            assert stack.min() >= 0.0 and stack.max() <= 1.0
            assert len(clip.keypoints) == len(clip)
            for kp in clip.keypoints:
                assert kp.ref_length > 0
                for _, x, y in kp.points:
                    assert 0 <= x < 32 and 0 <= y < 32

    def test_pendulum_injective_over_monotone_halfswing(self):
        clip = gen_clip(SynthConfig(kind="pendulum", n_frames=60, seed=4))
        xs = [kp.points[0][1] for kp in clip.keypoints]
        # find the longest monotone run of bob x positions
        best_lo, best_hi, lo = 0, 0, 0
        for i in range(1, len(xs)):
            if (xs[i] - xs[i - 1]) * (xs[lo + 1] - xs[lo] if lo + 1 < len(xs) else 1) <= 0:
                lo = i - 1
            if i - lo > best_hi - best_lo:
                best_lo, best_hi = lo, i
        run = range(best_lo, best_hi + 1)
        assert len(run) >= 8
        for i in run:
            for j in run:
                if i < j:
                    assert frame_ssd(clip.frames[i], clip.frames[j]) > 0.0

    def test_pendulum_direction_ambiguity_at_two_frames(self):
        # the same unordered pose pair occurs on both sweeps of the cycle
        clip = gen_clip(SynthConfig(kind="pendulum", n_frames=60, seed=4))
        xs = np.array([kp.points[0][1] for kp in clip.keypoints])
        diffs = np.sign(np.diff(xs))
        assert (diffs > 0).any() and (diffs < 0).any()


class TestGenCorpus:
    def test_counts_and_manifest(self, tmp_path):
        entries = gen_corpus(tmp_path, 10, {"pendulum": 1.0}, seed=1)
        assert len(entries) == 10
        manifest = load_manifest(tmp_path / "manifest.jsonl")
        assert len(manifest) == 10
        for e in manifest:
            assert e["label"] == "pendulum"
            clip = load_clip(tmp_path, e)
            assert len(clip) == e["n_frames"]

    def test_exact_mix(self, tmp_path):
        entries = gen_corpus(tmp_path, 4, {"linear": 0.5, "pendulum": 0.5}, seed=0)
        kinds = sorted(e["label"] for e in entries)
        assert kinds == ["linear", "linear", "pendulum", "pendulum"]

    def test_split_fractions(self, tmp_path):
        entries = gen_corpus(tmp_path, 10, {"static": 1.0}, seed=3)
        splits = [e["split"] for e in entries]
        assert splits.count("train") == 8
        assert splits.count("heldout") == 1
        assert splits.count("test") == 1

    def test_regenerate_same_seed_identical_manifest(self, tmp_path):
        gen_corpus(tmp_path / "a", 6, {"bounce": 0.5, "static": 0.5}, seed=9)
        gen_corpus(tmp_path / "b", 6, {"bounce": 0.5, "static": 0.5}, seed=9)
        a = (tmp_path / "a" / "manifest.jsonl").read_bytes()
        b = (tmp_path / "b" / "manifest.jsonl").read_bytes()
        assert a == b

    def test_bad_mix_fractions(self, tmp_path):
        with pytest.raises(ConfigError, match="mix"):
            gen_corpus(tmp_path, 4, {"linear": 0.7}, seed=0)

    def test_assign_splits_deterministic(self):
        assert assign_splits(20, 5) == assign_splits(20, 5)
        assert assign_splits(20, 5) != assign_splits(20, 6)
