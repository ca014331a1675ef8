"""Dataset ingestion, optical flow, synthetic sequences, and split protocol.

Every frame carries five channels: RGB in [0, 1] plus a two-channel optical
flow field estimated between consecutive frames, normalized by frame width
and clamped to [-1, 1].  The synthetic generator renders per-identity blob
layouts with identity-specific motion under per-camera color shifts, giving a
desk-scale stand-in for multi-camera pedestrian footage.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .autodiff import Tensor

FRAME_SUFFIXES = (".png", ".ppm")
GRAY_WEIGHTS = (0.299, 0.587, 0.114)


class DataError(ValueError):
    """Raised for malformed dataset layouts or unreadable frames."""


@dataclass
class SequenceSample:
    """One person-camera clip: ordered frames of [H, W, 5] maps."""

    person_id: int
    camera_id: int
    frames: list

    def __post_init__(self):
        if not self.frames:
            raise DataError("a sequence needs at least one frame")
        shape = self.frames[0].shape
        for i, f in enumerate(self.frames):
            if f.shape != shape:
                raise DataError(
                    f"frame {i} shape {list(f.shape)} differs from frame 0 shape {list(shape)}"
                )
        if len(shape) != 3 or shape[2] != 5:
            raise DataError(f"frames must be [H, W, 5], got shape {list(shape)}")

    @property
    def num_frames(self) -> int:
        return len(self.frames)


@dataclass
class DatasetSplit:
    """Identity-disjoint train/test halves plus the seed that produced them."""

    train: list
    test: list
    seed: int

    def __post_init__(self):
        train_ids = {s.person_id for s in self.train}
        test_ids = {s.person_id for s in self.test}
        overlap = train_ids & test_ids
        if overlap:
            raise DataError(f"train and test share identities: {sorted(overlap)}")


# ---------------------------------------------------------------------------
# Optical flow
# ---------------------------------------------------------------------------

def rgb_to_gray(rgb: np.ndarray) -> np.ndarray:
    r, g, b = GRAY_WEIGHTS
    return r * rgb[..., 0] + g * rgb[..., 1] + b * rgb[..., 2]


def _window_sum_3x3(a: np.ndarray) -> np.ndarray:
    p = np.pad(a, 1)
    out = np.zeros_like(a)
    for dy in range(3):
        for dx in range(3):
            out += p[dy:dy + a.shape[0], dx:dx + a.shape[1]]
    return out


def compute_flow(prev: np.ndarray, nxt: np.ndarray) -> np.ndarray:
    """Single-level Lucas-Kanade flow over a 3x3 window on grayscale frames.

    Local systems with determinant below 1e-8 yield zero flow.  The estimate
    is in pixels, then divided by frame width and clamped to [-1, 1].
    """
    prev = np.asarray(prev, dtype=np.float64)
    nxt = np.asarray(nxt, dtype=np.float64)
    if prev.shape != nxt.shape or prev.ndim != 3 or prev.shape[2] != 3:
        raise DataError(
            f"flow expects two [H, W, 3] frames of equal shape, got {list(prev.shape)} and {list(nxt.shape)}"
        )
    g0, g1 = rgb_to_gray(prev), rgb_to_gray(nxt)
    iy0, ix0 = np.gradient(g0)
    iy1, ix1 = np.gradient(g1)
    ix, iy = 0.5 * (ix0 + ix1), 0.5 * (iy0 + iy1)
    it = g1 - g0
    sxx = _window_sum_3x3(ix * ix)
    sxy = _window_sum_3x3(ix * iy)
    syy = _window_sum_3x3(iy * iy)
    sxt = _window_sum_3x3(ix * it)
    syt = _window_sum_3x3(iy * it)
    det = sxx * syy - sxy * sxy
    ok = det >= 1e-8
    safe = np.where(ok, det, 1.0)
    u = np.where(ok, (-syy * sxt + sxy * syt) / safe, 0.0)
    v = np.where(ok, (sxy * sxt - sxx * syt) / safe, 0.0)
    width = prev.shape[1]
    flow = np.stack([u, v], axis=-1) / width
    return np.clip(flow, -1.0, 1.0)


def _attach_flow(rgb_frames: list[np.ndarray]) -> list[Tensor]:
    """RGB frame list -> 5-channel Tensors; frame 0 gets zero flow."""
    out = []
    for i, rgb in enumerate(rgb_frames):
        if i == 0:
            flow = np.zeros(rgb.shape[:2] + (2,))
        else:
            flow = compute_flow(rgb_frames[i - 1], rgb)
        out.append(Tensor(np.concatenate([rgb, flow], axis=-1)))
    return out


# ---------------------------------------------------------------------------
# Directory-of-frames ingestion
# ---------------------------------------------------------------------------

def load_dataset(root_path) -> list[SequenceSample]:
    """Read root/<person>/<camera>/<frame>.png|.ppm into sequence samples.

    Persons and cameras are indexed by the lexicographic order of their
    directory names; frames are ordered by zero-padded file name.  Flow is
    computed once here so training can slice windows cheaply.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    samples = []
    person_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    for pid, pdir in enumerate(person_dirs):
        cam_dirs = sorted(c for c in pdir.iterdir() if c.is_dir())
        if not cam_dirs:
            raise DataError(f"person directory {pdir} has no camera directories")
        for cam, cdir in enumerate(cam_dirs):
            files = sorted(f for f in cdir.iterdir() if f.suffix.lower() in FRAME_SUFFIXES)
            if not files:
                raise DataError(f"camera directory {cdir} has no frames")
            rgbs = []
            for f in files:
                try:
                    with Image.open(f) as im:
                        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
                except OSError as e:
                    raise DataError(f"unreadable frame {f}: {e}") from e
                if rgbs and arr.shape != rgbs[0].shape:
                    raise DataError(
                        f"frame {f} shape {list(arr.shape)} differs from first frame "
                        f"shape {list(rgbs[0].shape)} in {cdir}"
                    )
                rgbs.append(arr)
            samples.append(SequenceSample(pid, cam, _attach_flow(rgbs)))
    return samples


def export_dataset(samples: list[SequenceSample], root_path) -> None:
    """Write RGB channels back out in the load_dataset layout (8-bit PNG)."""
    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)
    for s in samples:
        cdir = root / f"person_{s.person_id:03d}" / f"cam_{s.camera_id}"
        cdir.mkdir(parents=True, exist_ok=True)
        for t, frame in enumerate(s.frames):
            rgb = np.clip(frame.data[..., :3], 0.0, 1.0)
            img = Image.fromarray(np.round(rgb * 255.0).astype(np.uint8))
            img.save(cdir / f"{t:04d}.png")


# ---------------------------------------------------------------------------
# Synthetic sequences
# ---------------------------------------------------------------------------

def _hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.select(
        [i == 0, i == 1, i == 2, i == 3, i == 4, i == 5],
        [np.stack([v, t, p], -1), np.stack([q, v, p], -1), np.stack([p, v, t], -1),
         np.stack([p, q, v], -1), np.stack([t, p, v], -1), np.stack([v, p, q], -1)])


def _identity_signature(seed: int, pid: int) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101, pid]))
    num_blobs = 3
    return {
        # saturated hues separate identities far better than uniform RGB draws
        "colors": _hsv_to_rgb(rng.uniform(0.0, 1.0, size=num_blobs),
                              rng.uniform(0.7, 1.0, size=num_blobs),
                              rng.uniform(0.7, 1.0, size=num_blobs)),
        "radii": rng.uniform(2.0, 3.6, size=num_blobs),
        "offsets": rng.uniform(-6.0, 6.0, size=(num_blobs, 2)),
        "angle": rng.uniform(0.0, 2.0 * np.pi),
        "speed": rng.uniform(0.8, 2.2),
        # stripe texture near the stride-2 Nyquist limit; it rides along with
        # the blob so its phase shifts as the identity moves
        "tex_freq": rng.uniform(0.35, 0.48),
        "tex_angle": rng.uniform(0.0, np.pi),
        "tex_depth": rng.uniform(0.5, 0.8),
    }


def _camera_profile(seed: int, cam: int) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 202, cam]))
    return {
        "gain": rng.uniform(0.8, 1.1, size=3),
        "bias": rng.uniform(0.0, 0.1, size=3),
        "background": rng.uniform(0.05, 0.2, size=3),
        "grad": rng.uniform(-0.08, 0.08, size=3),
    }


def _reflect(p: np.ndarray, extent: float) -> np.ndarray:
    period = 2.0 * extent
    q = np.mod(p, period)
    return np.where(q > extent, period - q, q)


def _render_frames(sig: dict, cam_prof: dict, start: np.ndarray, num_frames: int,
                   extent: int) -> list[np.ndarray]:
    ys, xs = np.mgrid[0:extent, 0:extent].astype(np.float64)
    v = sig["speed"] * np.array([np.cos(sig["angle"]), np.sin(sig["angle"])])
    ramp = (xs / max(extent - 1, 1))[..., None]
    tex_dir = np.array([np.cos(sig["tex_angle"]), np.sin(sig["tex_angle"])])
    frames = []
    for t in range(num_frames):
        center = _reflect(start + v * t, extent - 1)
        img = np.tile(cam_prof["background"], (extent, extent, 1)) + cam_prof["grad"] * ramp
        phase = xs * tex_dir[0] + ys * tex_dir[1] - (center[0] * tex_dir[0] + center[1] * tex_dir[1])
        stripes = 1.0 - sig["tex_depth"] * 0.5 * (1.0 + np.sin(2.0 * np.pi * sig["tex_freq"] * phase))
        for color, radius, off in zip(sig["colors"], sig["radii"], sig["offsets"]):
            c = _reflect(center + off, extent - 1)
            d2 = (xs - c[0]) ** 2 + (ys - c[1]) ** 2
            img = img + color * (stripes * np.exp(-d2 / (2.0 * radius ** 2)))[..., None]
        img = np.clip(img, 0.0, 1.0)
        img = np.clip(img * cam_prof["gain"] + cam_prof["bias"], 0.0, 1.0)
        frames.append(img)
    return frames


def synth_generate(num_ids: int, cams: int = 2, frames_per_seq: int = 20,
                   extent: int = 32, seed: int = 0) -> list[SequenceSample]:
    """Render deterministic multi-camera blob sequences.

    Each identity keeps its blob colors, layout, and motion direction/speed in
    every camera; cameras differ in start position, global color gain/bias,
    and background, so matching requires appearance over raw pixels.
    """
    if num_ids < 2:
        raise DataError(f"need at least 2 identities, got {num_ids}")
    if cams < 1 or frames_per_seq < 1 or extent < 8:
        raise DataError("cams and frames_per_seq must be positive, extent >= 8")
    samples = []
    for pid in range(num_ids):
        sig = _identity_signature(seed, pid)
        for cam in range(cams):
            prof = _camera_profile(seed, cam)
            rng = np.random.default_rng(np.random.SeedSequence([seed, 303, pid, cam]))
            start = rng.uniform(0.2 * extent, 0.8 * extent, size=2)
            rgbs = _render_frames(sig, prof, start, frames_per_seq, extent)
            samples.append(SequenceSample(pid, cam, _attach_flow(rgbs)))
    return samples


# ---------------------------------------------------------------------------
# Split protocol
# ---------------------------------------------------------------------------

def split(samples: list[SequenceSample], seed: int) -> DatasetSplit:
    """Shuffle identities with the seed; first half trains, second half tests."""
    ids = sorted({s.person_id for s in samples})
    if len(ids) < 2:
        raise DataError(f"need at least 2 identities to split, got {len(ids)}")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    train_ids = set(order[:len(ids) // 2])
    train = [s for s in samples if s.person_id in train_ids]
    test = [s for s in samples if s.person_id not in train_ids]
    return DatasetSplit(train=train, test=test, seed=seed)
