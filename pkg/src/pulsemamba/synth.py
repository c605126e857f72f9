"""Deterministic synthetic pulse-video generator and the on-disk dataset.

Each clip embeds a known waveform (fundamental plus a 0.3-amplitude second
harmonic, so HR estimators must lock to the fundamental) into an
elliptical skin region with a green-dominant channel mix, optional
Gaussian noise and slow sinusoidal mask motion. Everything is a pure
function of the seed.

On disk, a clip is a directory holding ``meta.json`` (shape, dtype tag,
fs, seed, checksums) plus ``frames.f32`` and ``label.f32`` as raw
little-endian float32 arrays in row-major order.
"""

from __future__ import annotations

import hashlib
import json
import warnings
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .errors import ConfigError, FormatError

__all__ = [
    "SynthConfig", "ClipRecord", "generate_clip", "write_dataset",
    "read_dataset", "chunk_and_resize", "bilinear_resize",
]

CHANNEL_MIX = (0.5, 1.0, 0.3)  # R, G, B pulse weights; green dominates
SECOND_HARMONIC = 0.3
MOTION_FREQ_HZ = 0.2
HR_BAND_BPM = (48.0, 144.0)


@dataclass
class SynthConfig:
    seed: int = 0
    fs: float = 30.0
    duration_s: float = 10.0
    resolution: Tuple[int, int] = (64, 64)
    base_color: Tuple[float, float, float] = (0.70, 0.55, 0.45)
    pulse_amplitude: float = 0.02
    hr_start_bpm: float = 72.0
    hr_end_bpm: Optional[float] = None  # None keeps the rate constant
    noise_sigma: float = 0.0
    motion_amplitude_px: float = 0.0
    skin_mask: float = 0.6  # elliptical region fraction of each half-extent

    def __post_init__(self):
        h, w = self.resolution
        if h < 16 or w < 16:
            raise ConfigError(f"resolution {self.resolution} below 16x16")
        if self.pulse_amplitude < 0 or self.noise_sigma < 0 or self.motion_amplitude_px < 0:
            raise ConfigError("amplitudes must be >= 0")
        for bpm in (self.hr_start_bpm, self.hr_end_bpm or self.hr_start_bpm):
            if not HR_BAND_BPM[0] <= bpm <= HR_BAND_BPM[1]:
                raise ConfigError(f"hr {bpm} outside band {HR_BAND_BPM}")
        if not 0.0 < self.skin_mask <= 1.0:
            raise ConfigError("skin_mask fraction must be in (0, 1]")

    def content_hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


@dataclass
class ClipRecord:
    frames: np.ndarray  # (3, T, H, W) in [0, 1]
    label: np.ndarray   # (T,)
    fs: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.frames.shape[1] != self.label.shape[0]:
            raise FormatError(
                f"label length {self.label.shape[0]} != frame count {self.frames.shape[1]}")


def _pulse_waveform(cfg: SynthConfig, t: np.ndarray) -> np.ndarray:
    f0 = cfg.hr_start_bpm / 60.0
    if cfg.hr_end_bpm is None:
        phase = 2.0 * np.pi * f0 * t
    else:
        f1 = cfg.hr_end_bpm / 60.0
        # linear drift: phase is the integral of f(t) = f0 + (f1-f0) t / T
        total = t[-1] if t[-1] > 0 else 1.0
        phase = 2.0 * np.pi * (f0 * t + 0.5 * (f1 - f0) * t * t / total)
    return np.sin(phase) + SECOND_HARMONIC * np.sin(2.0 * phase)


def _ellipse_mask(h: int, w: int, frac: float, dy: float, dx: float) -> np.ndarray:
    cy, cx = (h - 1) / 2.0 + dy, (w - 1) / 2.0 + dx
    ry, rx = frac * h / 2.0, frac * w / 2.0
    yy, xx = np.mgrid[0:h, 0:w]
    return (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2) <= 1.0


def generate_clip(cfg: SynthConfig) -> ClipRecord:
    """Render one synthetic clip; same seed, same bits."""
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.resolution
    n = int(round(cfg.duration_s * cfg.fs))
    t = np.arange(n) / cfg.fs
    pulse = _pulse_waveform(cfg, t)

    frames = np.empty((3, n, h, w), dtype=np.float64)
    base = np.asarray(cfg.base_color, dtype=np.float64)
    static_mask = cfg.motion_amplitude_px == 0.0
    mask = _ellipse_mask(h, w, cfg.skin_mask, 0.0, 0.0) if static_mask else None
    for i in range(n):
        if not static_mask:
            dx = cfg.motion_amplitude_px * np.sin(2.0 * np.pi * MOTION_FREQ_HZ * t[i])
            mask = _ellipse_mask(h, w, cfg.skin_mask, 0.0, dx)
        for ch in range(3):
            level = base[ch] * (1.0 + cfg.pulse_amplitude * CHANNEL_MIX[ch] * pulse[i])
            frame = np.full((h, w), base[ch])
            frame[mask] = level
            frames[ch, i] = frame
    if cfg.noise_sigma > 0.0:
        frames += rng.normal(0.0, cfg.noise_sigma, frames.shape)
    np.clip(frames, 0.0, 1.0, out=frames)

    gt_mean_bpm = cfg.hr_start_bpm if cfg.hr_end_bpm is None \
        else 0.5 * (cfg.hr_start_bpm + cfg.hr_end_bpm)
    meta = {"seed": cfg.seed, "config_hash": cfg.content_hash(),
            "gt_mean_bpm": gt_mean_bpm}
    return ClipRecord(frames=frames, label=pulse, fs=cfg.fs, meta=meta)


# ---------------------------------------------------------------------------
# on-disk format

def _write_blob(path: Path, arr: np.ndarray) -> str:
    blob = arr.astype("<f4").tobytes()
    path.write_bytes(blob)
    return f"{zlib.crc32(blob):08x}"


def _read_blob(path: Path, shape, checksum: str) -> np.ndarray:
    if not path.exists():
        raise FormatError(f"missing tensor file {path}")
    blob = path.read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(blob) != expected:
        raise FormatError(f"{path}: {len(blob)} bytes, expected {expected}")
    if f"{zlib.crc32(blob):08x}" != checksum:
        raise FormatError(f"{path}: checksum mismatch")
    return np.frombuffer(blob, dtype="<f4").reshape(shape).astype(np.float64)


def write_dataset(root, records: List[ClipRecord]) -> List[Path]:
    """One directory per clip: meta.json + frames.f32 + label.f32."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, rec in enumerate(records):
        clip_dir = root / f"clip_{i:04d}"
        clip_dir.mkdir(exist_ok=True)
        frames_crc = _write_blob(clip_dir / "frames.f32", rec.frames)
        label_crc = _write_blob(clip_dir / "label.f32", rec.label)
        meta = {
            "format_version": 1,
            "dtype": "<f4",
            "fs": rec.fs,
            "frames_shape": list(rec.frames.shape),
            "label_shape": list(rec.label.shape),
            "frames_crc32": frames_crc,
            "label_crc32": label_crc,
            **rec.meta,
        }
        (clip_dir / "meta.json").write_text(
            json.dumps(meta, sort_keys=True, indent=1) + "\n")
        paths.append(clip_dir)
    return paths


def read_dataset(root) -> List[ClipRecord]:
    """Load every clip directory under root; empty directory, empty list."""
    root = Path(root)
    if not root.exists():
        raise FormatError(f"dataset directory {root} does not exist")
    records = []
    for clip_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        meta_path = clip_dir / "meta.json"
        if not meta_path.exists():
            continue
        try:
            meta = json.loads(meta_path.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{meta_path}: corrupt header ({exc})") from exc
        for key in ("dtype", "fs", "frames_shape", "label_shape",
                    "frames_crc32", "label_crc32"):
            if key not in meta:
                raise FormatError(f"{meta_path}: missing key '{key}'")
        if meta["dtype"] != "<f4":
            raise FormatError(f"{meta_path}: unsupported dtype {meta['dtype']}")
        frames = _read_blob(clip_dir / "frames.f32", meta["frames_shape"],
                            meta["frames_crc32"])
        label = _read_blob(clip_dir / "label.f32", meta["label_shape"],
                           meta["label_crc32"])
        extra = {k: v for k, v in meta.items()
                 if k not in {"format_version", "dtype", "fs", "frames_shape",
                              "label_shape", "frames_crc32", "label_crc32"}}
        records.append(ClipRecord(frames=frames, label=label,
                                  fs=float(meta["fs"]), meta=extra))
    return records


# ---------------------------------------------------------------------------
# chunking / resizing

def bilinear_resize(frames: np.ndarray, out_hw: Tuple[int, int]) -> np.ndarray:
    """Bilinear spatial resize of (..., H, W) with aligned corners."""
    *lead, h, w = frames.shape
    oh, ow = out_hw
    if (h, w) == (oh, ow):
        return frames.copy()
    ys = np.linspace(0.0, h - 1.0, oh)
    xs = np.linspace(0.0, w - 1.0, ow)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 2)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 2)
    wy = (ys - y0).reshape(-1, 1)
    wx = (xs - x0).reshape(1, -1)
    flat = frames.reshape(-1, h, w)
    top = flat[:, y0][:, :, x0] * (1 - wx) + flat[:, y0][:, :, x0 + 1] * wx
    bot = flat[:, y0 + 1][:, :, x0] * (1 - wx) + flat[:, y0 + 1][:, :, x0 + 1] * wx
    out = top * (1 - wy) + bot * wy
    return out.reshape(*lead, oh, ow)


def chunk_and_resize(record: ClipRecord, chunk_len: int = 128,
                     out_hw: Tuple[int, int] = (128, 128), mode: str = "eval",
                     rng: Optional[np.random.Generator] = None) -> List[ClipRecord]:
    """Cut a clip into fixed-length windows and resize spatially.

    ``train`` samples one random window (seeded rng); ``eval`` tiles
    non-overlapping windows and drops the tail. Labels are sliced to the
    same window. Clips shorter than chunk_len are skipped with a warning.
    """
    n = record.frames.shape[1]
    if n < chunk_len:
        warnings.warn(f"clip of {n} frames shorter than chunk {chunk_len}, skipping",
                      RuntimeWarning, stacklevel=2)
        return []
    if mode == "train":
        rng = rng if rng is not None else np.random.default_rng(0)
        starts = [int(rng.integers(0, n - chunk_len + 1))]
    elif mode == "eval":
        starts = list(range(0, n - chunk_len + 1, chunk_len))
    else:
        raise ConfigError(f"mode must be train or eval, got {mode!r}")
    chunks = []
    for s in starts:
        frames = bilinear_resize(record.frames[:, s:s + chunk_len], out_hw)
        label = record.label[s:s + chunk_len].copy()
        meta = dict(record.meta, window_start=s)
        chunks.append(ClipRecord(frames=frames, label=label, fs=record.fs,
                                 meta=meta))
    return chunks
