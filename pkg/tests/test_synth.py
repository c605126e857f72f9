"""Synthetic clip generation, dataset round-trips and chunking."""

import json

import numpy as np
import pytest

from pulsemamba.errors import ConfigError, FormatError
from pulsemamba.signal import PulseTrace, diff_normalize, estimate_hr, pearson
from pulsemamba.synth import (ClipRecord, SynthConfig, bilinear_resize,
                              chunk_and_resize, generate_clip, read_dataset,
                              write_dataset)


def small_cfg(**kw):
    base = dict(seed=3, duration_s=4.0, resolution=(24, 24), hr_start_bpm=90.0)
    base.update(kw)
    return SynthConfig(**base)


def test_generate_clip_determinism():
    a = generate_clip(small_cfg())
    b = generate_clip(small_cfg())
    assert np.array_equal(a.frames, b.frames)
    assert np.array_equal(a.label, b.label)


def test_distinct_seeds_distinct_frames():
    a = generate_clip(small_cfg(seed=1, noise_sigma=0.01))
    b = generate_clip(small_cfg(seed=2, noise_sigma=0.01))
    assert not np.array_equal(a.frames, b.frames)


def test_null_signal_clip_is_temporally_constant():
    clip = generate_clip(small_cfg(pulse_amplitude=0.0))
    assert np.abs(np.diff(clip.frames, axis=1)).max() == 0.0
    np.testing.assert_array_equal(diff_normalize(clip.frames), 0.0)


def test_label_recovers_configured_hr():
    clip = generate_clip(small_cfg(duration_s=10.0, hr_start_bpm=90.0))
    hr = estimate_hr(PulseTrace(clip.label, clip.fs))
    assert abs(hr - 90.0) <= 1.0


def test_frames_stay_in_unit_interval():
    clip = generate_clip(small_cfg(noise_sigma=0.1, pulse_amplitude=0.05))
    assert clip.frames.min() >= 0.0 and clip.frames.max() <= 1.0


def test_label_pixel_coherence():
    """Masked green diff trace correlates > 0.9 with the diff label."""
    clip = generate_clip(small_cfg(duration_s=8.0))
    green = clip.frames[1]
    mask = np.abs(green[0] - np.median(green[0])) > 1e-12
    # fall back to center block if the first frame catches pulse = 0
    if mask.sum() < 4:
        h, w = green.shape[1:]
        mask = np.zeros_like(green[0], dtype=bool)
        mask[h // 3:-h // 3, w // 3:-w // 3] = True
    trace = green[:, mask].mean(axis=1)
    rho = pearson(np.diff(trace), np.diff(clip.label))
    assert rho > 0.9


def test_resolution_floor():
    with pytest.raises(ConfigError):
        SynthConfig(resolution=(8, 8))


def test_hr_band_enforced():
    with pytest.raises(ConfigError):
        SynthConfig(hr_start_bpm=30.0)


def test_motion_moves_the_mask():
    still = generate_clip(small_cfg())
    moving = generate_clip(small_cfg(motion_amplitude_px=3.0))
    assert not np.array_equal(still.frames, moving.frames)


# ---------------------------------------------------------------------------
# dataset round trip

def test_dataset_round_trip(tmp_path):
    records = [generate_clip(small_cfg(seed=i)) for i in range(3)]
    write_dataset(tmp_path / "ds", records)
    back = read_dataset(tmp_path / "ds")
    assert len(back) == 3
    for orig, loaded in zip(records, back):
        np.testing.assert_array_equal(orig.frames.astype(np.float32),
                                      loaded.frames.astype(np.float32))
        np.testing.assert_array_equal(orig.label.astype(np.float32),
                                      loaded.label.astype(np.float32))
        assert loaded.fs == orig.fs


def test_dataset_write_is_byte_stable(tmp_path):
    records = [generate_clip(small_cfg())]
    write_dataset(tmp_path / "a", records)
    write_dataset(tmp_path / "b", records)
    for name in ("meta.json", "frames.f32", "label.f32"):
        assert (tmp_path / "a" / "clip_0000" / name).read_bytes() == \
               (tmp_path / "b" / "clip_0000" / name).read_bytes()


def test_truncated_tensor_file_is_format_error(tmp_path):
    write_dataset(tmp_path / "ds", [generate_clip(small_cfg())])
    blob_path = tmp_path / "ds" / "clip_0000" / "frames.f32"
    blob_path.write_bytes(blob_path.read_bytes()[:-8])
    with pytest.raises(FormatError, match="frames.f32"):
        read_dataset(tmp_path / "ds")


def test_checksum_mismatch_is_format_error(tmp_path):
    write_dataset(tmp_path / "ds", [generate_clip(small_cfg())])
    blob_path = tmp_path / "ds" / "clip_0000" / "label.f32"
    raw = bytearray(blob_path.read_bytes())
    raw[0] ^= 0xFF
    blob_path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="checksum"):
        read_dataset(tmp_path / "ds")


def test_corrupt_header_is_format_error(tmp_path):
    write_dataset(tmp_path / "ds", [generate_clip(small_cfg())])
    (tmp_path / "ds" / "clip_0000" / "meta.json").write_text("{not json")
    with pytest.raises(FormatError, match="meta.json"):
        read_dataset(tmp_path / "ds")


def test_empty_dataset_directory(tmp_path):
    (tmp_path / "empty").mkdir()
    assert read_dataset(tmp_path / "empty") == []


def test_missing_dataset_directory(tmp_path):
    with pytest.raises(FormatError):
        read_dataset(tmp_path / "nope")


def test_meta_json_lists_required_keys(tmp_path):
    write_dataset(tmp_path / "ds", [generate_clip(small_cfg())])
    meta = json.loads((tmp_path / "ds" / "clip_0000" / "meta.json").read_text())
    for key in ("dtype", "fs", "frames_shape", "label_shape",
                "frames_crc32", "label_crc32", "seed"):
        assert key in meta


# ---------------------------------------------------------------------------
# chunking and resizing

def test_eval_tiling_drops_tail():
    clip = generate_clip(small_cfg(duration_s=10.0))  # 300 frames
    chunks = chunk_and_resize(clip, chunk_len=128, out_hw=(16, 16), mode="eval")
    assert len(chunks) == 2
    assert chunks[0].meta["window_start"] == 0
    assert chunks[1].meta["window_start"] == 128
    assert chunks[0].frames.shape == (3, 128, 16, 16)
    np.testing.assert_array_equal(chunks[0].label, clip.label[:128])


def test_resize_preserves_constants():
    frames = np.full((3, 4, 20, 20), 0.37)
    out = bilinear_resize(frames, (16, 16))
    np.testing.assert_allclose(out, 0.37, rtol=1e-12)


def test_train_mode_window_is_seeded():
    clip = generate_clip(small_cfg(duration_s=8.0))
    a = chunk_and_resize(clip, 64, (16, 16), mode="train",
                         rng=np.random.default_rng(9))
    b = chunk_and_resize(clip, 64, (16, 16), mode="train",
                         rng=np.random.default_rng(9))
    assert a[0].meta["window_start"] == b[0].meta["window_start"]
    np.testing.assert_array_equal(a[0].frames, b[0].frames)


def test_short_clip_skipped_with_warning():
    clip = generate_clip(small_cfg(duration_s=2.0))  # 60 frames
    with pytest.warns(RuntimeWarning):
        chunks = chunk_and_resize(clip, chunk_len=128, mode="eval")
    assert chunks == []


def test_clip_record_label_alignment():
    with pytest.raises(FormatError):
        ClipRecord(frames=np.zeros((3, 5, 4, 4)), label=np.zeros(4), fs=30.0)
