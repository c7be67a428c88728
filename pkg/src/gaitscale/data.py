"""Skeleton sequences: filtering, normalization, augmentation, synthetic walkers, GSK1 files."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal

import numpy as np

N_JOINTS = 17

# COCO-17 keypoint order
JOINT_NAMES = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)
LEFT_RIGHT_PAIRS = ((1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12), (13, 14), (15, 16))
FLIP_PERMUTATION = np.arange(N_JOINTS)
for _l, _r in LEFT_RIGHT_PAIRS:
    FLIP_PERMUTATION[_l], FLIP_PERMUTATION[_r] = _r, _l

MIN_FRAMES = 48
MIN_CONFIDENCE = 0.6
DEFAULT_FPS = 24.0

AUGMENTATIONS = ("crop", "flip", "mirror", "noise", "pace", "smooth")
AugmentKind = Literal["crop", "flip", "mirror", "noise", "pace", "smooth"]


class DataError(ValueError):
    pass


class DegenerateSkeletonError(DataError):
    pass


class TooShortError(DataError):
    pass


class FormatError(DataError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class SkeletonSequence:
    """T frames of 17 COCO joints; ``frames[t, j] = (x, y, confidence)``."""

    frames: np.ndarray
    fps: float = DEFAULT_FPS
    subject_id: int | None = None
    view_id: int = 0
    variation_id: int = 0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[2] != 3:
            raise DataError(f"frames must be (T, J, 3), got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise DataError("a sequence needs at least one frame")
        if not np.all(np.isfinite(self.frames)):
            raise DataError("non-finite joint values")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def coords(self) -> np.ndarray:
        return self.frames[..., :2]

    @property
    def confidence(self) -> np.ndarray:
        return self.frames[..., 2]

    def with_frames(self, frames: np.ndarray) -> "SkeletonSequence":
        return replace(self, frames=frames)


@dataclass
class GaitDataset:
    sequences: list[SkeletonSequence]
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.sequences)

    def __getitem__(self, i):
        return self.sequences[i]

    def subset(self, indices) -> "GaitDataset":
        prov = dict(self.provenance)
        prov["parent_size"] = len(self.sequences)
        return GaitDataset([self.sequences[int(i)] for i in indices], prov)

    @property
    def subject_ids(self) -> np.ndarray:
        return np.array([-1 if s.subject_id is None else s.subject_id for s in self.sequences])


@dataclass(frozen=True)
class AugmentationConfig:
    crop_length: int = 48
    flip_prob: float = 0.5
    mirror_prob: float = 0.5
    noise_prob: float = 0.5
    pace_prob: float = 0.5
    smooth_prob: float = 0.5
    noise_sigma: float = 0.01
    pace_range: tuple[float, float] = (0.8, 1.25)
    smooth_window: int = 5

    def __post_init__(self):
        for name in ("flip_prob", "mirror_prob", "noise_prob", "pace_prob", "smooth_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if self.crop_length < 1:
            raise ValueError("crop_length must be >= 1")
        lo, hi = self.pace_range
        if not (0 < lo <= hi):
            raise ValueError(f"pace_range must satisfy 0 < min <= max, got {self.pace_range}")
        if self.smooth_window < 1 or self.smooth_window % 2 == 0:
            raise ValueError("smooth_window must be a positive odd frame count")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


# -- filtering and normalization ----------------------------------------------
def filter_sequence(
    seq: SkeletonSequence, min_frames: int = MIN_FRAMES, min_conf: float = MIN_CONFIDENCE
) -> tuple[bool, str | None]:
    """Return ``(True, None)`` or ``(False, reason)``; both bounds are inclusive."""
    if seq.n_frames < min_frames:
        return False, "too_short"
    # the mean of many values equal to the threshold can round just below it
    if float(np.mean(seq.confidence)) < min_conf - 1e-9:
        return False, "low_confidence"
    return True, None


def torso_height(frame: np.ndarray) -> float:
    shoulders = 0.5 * (frame[5, :2] + frame[6, :2])
    hips = 0.5 * (frame[11, :2] + frame[12, :2])
    return float(np.linalg.norm(shoulders - hips))


def normalize_sequence(seq: SkeletonSequence) -> SkeletonSequence:
    """Translate/scale all frames so the middle frame has centroid 0 and torso height 1."""
    mid = seq.frames[seq.n_frames // 2]
    scale = torso_height(mid)
    if not np.isfinite(scale) or scale <= 1e-12:
        raise DegenerateSkeletonError("middle frame has zero torso height")
    centroid = mid[:, :2].mean(axis=0)
    out = seq.frames.copy()
    out[..., :2] = (out[..., :2] - centroid) / scale
    return seq.with_frames(out)


# -- augmentations -------------------------------------------------------------
def _resample(frames: np.ndarray, n_out: int) -> np.ndarray:
    """Linear interpolation of every channel onto n_out evenly spaced frames."""
    t_in = frames.shape[0]
    if t_in == 1:
        return np.repeat(frames, n_out, axis=0)
    pos = np.linspace(0.0, t_in - 1, n_out)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, t_in - 1)
    w = (pos - lo)[:, None, None]
    return frames[lo] * (1.0 - w) + frames[hi] * w


def _fit_length(frames: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    t = frames.shape[0]
    if t >= length:
        start = int(rng.integers(0, t - length + 1))
        return frames[start : start + length]
    # edge padding keeps the pose physically plausible
    return np.concatenate([frames, np.repeat(frames[-1:], length - t, axis=0)], axis=0)


def augment(
    seq: SkeletonSequence, kind: AugmentKind, cfg: AugmentationConfig, rng: np.random.Generator
) -> SkeletonSequence:
    f = seq.frames
    if kind == "crop":
        if seq.n_frames < cfg.crop_length:
            raise TooShortError(f"cannot crop {cfg.crop_length} frames from {seq.n_frames}")
        start = int(rng.integers(0, seq.n_frames - cfg.crop_length + 1))
        return seq.with_frames(f[start : start + cfg.crop_length].copy())
    if kind == "flip":
        out = f[:, FLIP_PERMUTATION].copy()
        out[..., 0] = -out[..., 0]
        return seq.with_frames(out)
    if kind == "mirror":
        return seq.with_frames(f[::-1].copy())
    if kind == "noise":
        out = f.copy()
        if cfg.noise_sigma > 0:
            out[..., :2] += rng.normal(0.0, cfg.noise_sigma, size=out[..., :2].shape)
        return seq.with_frames(out)
    if kind == "pace":
        factor = float(rng.uniform(*cfg.pace_range))
        n_out = max(1, int(round(seq.n_frames / factor)))
        out = _resample(f, n_out) if n_out != seq.n_frames else f.copy()
        return seq.with_frames(_fit_length(out, cfg.crop_length, rng))
    if kind == "smooth":
        w = cfg.smooth_window
        if w == 1:
            return seq.with_frames(f.copy())
        half = w // 2
        padded = np.concatenate([np.repeat(f[:1], half, 0), f, np.repeat(f[-1:], half, 0)], axis=0)
        csum = np.cumsum(np.concatenate([np.zeros_like(f[:1]), padded], axis=0), axis=0)
        out = f.copy()
        out[..., :2] = ((csum[w:] - csum[:-w]) / w)[..., :2]
        return seq.with_frames(out)
    raise ValueError(f"unknown augmentation {kind!r}")


def make_views(
    seq: SkeletonSequence, cfg: AugmentationConfig, rng: np.random.Generator
) -> tuple[SkeletonSequence, SkeletonSequence]:
    """Two independently augmented views of the normalized sequence, each crop_length long.

    Each view is re-anchored on its own middle frame after augmentation; a
    shared anchor would let the encoder match views by their common offset.
    """
    base = normalize_sequence(seq)
    return (
        normalize_sequence(_augment_chain(base, cfg, rng)),
        normalize_sequence(_augment_chain(base, cfg, rng)),
    )


def _augment_chain(seq: SkeletonSequence, cfg: AugmentationConfig, rng) -> SkeletonSequence:
    out = None
    # pace resamples the full sequence and crops to crop_length itself
    if rng.random() < cfg.pace_prob:
        out = augment(seq, "pace", cfg, rng)
    out = augment(out if out is not None else seq, "crop", cfg, rng)
    probs = {
        "flip": cfg.flip_prob,
        "mirror": cfg.mirror_prob,
        "noise": cfg.noise_prob,
        "smooth": cfg.smooth_prob,
    }
    for kind, p in probs.items():
        if rng.random() < p:
            out = augment(out, kind, cfg, rng)
    return out


def center_crop(seq: SkeletonSequence, length: int) -> SkeletonSequence:
    if seq.n_frames < length:
        raise TooShortError(f"cannot crop {length} frames from {seq.n_frames}")
    start = (seq.n_frames - length) // 2
    return seq.with_frames(seq.frames[start : start + length].copy())


def stack_frames(seqs: list[SkeletonSequence]) -> np.ndarray:
    return np.stack([s.frames for s in seqs], axis=0)


# -- synthetic walkers ---------------------------------------------------------
VIEW_ANGLES_DEG = (0.0, 45.0, 90.0)
N_VARIATIONS = 2

# body-frame template (metres): x lateral (left +), y up, z forward
_BASE_SEGMENTS = {
    "hip_half": 0.10,
    "shoulder_half": 0.19,
    "torso": 0.52,
    "neck": 0.12,
    "head": 0.10,
    "thigh": 0.44,
    "shin": 0.42,
    "upper_arm": 0.30,
    "forearm": 0.27,
}


@dataclass(frozen=True)
class WalkerParams:
    """Per-identity gait parameters; sampled once per subject."""

    stride_hz: float
    limb_scale: dict
    hip_amp: float
    knee_amp: float
    knee_lag: float
    arm_amp: float
    elbow_amp: float
    bob_amp: float
    sway_amp: float
    torso_lean: float
    arm_phase: float


def sample_walker(rng: np.random.Generator) -> WalkerParams:
    return WalkerParams(
        stride_hz=float(rng.uniform(0.7, 1.3)),
        limb_scale={k: float(rng.uniform(0.9, 1.1)) for k in _BASE_SEGMENTS},
        hip_amp=float(rng.uniform(0.30, 0.50)),
        knee_amp=float(rng.uniform(0.40, 0.80)),
        knee_lag=float(rng.uniform(0.6, 1.8)),
        arm_amp=float(rng.uniform(0.15, 0.55)),
        elbow_amp=float(rng.uniform(0.10, 0.50)),
        bob_amp=float(rng.uniform(0.01, 0.04)),
        sway_amp=float(rng.uniform(0.005, 0.03)),
        torso_lean=float(rng.uniform(-0.05, 0.15)),
        arm_phase=float(rng.uniform(-0.5, 0.5)),
    )


def _walker_pose_3d(p: WalkerParams, t: np.ndarray, phase0: float, variation: int) -> np.ndarray:
    """3-D joint positions (T, 17, 3) for one walker over times t (seconds)."""
    seg = {k: v * p.limb_scale[k] for k, v in _BASE_SEGMENTS.items()}
    w = 2.0 * np.pi * p.stride_hz * t + phase0
    n = t.shape[0]
    pose = np.zeros((n, N_JOINTS, 3))

    arm_amp = p.arm_amp * (0.35 if variation == 1 else 1.0)
    shoulder_half = seg["shoulder_half"] * (1.12 if variation == 1 else 1.0)

    bob = p.bob_amp * np.cos(2.0 * w)
    sway = p.sway_amp * np.sin(w)
    pelvis = np.stack([sway, bob, np.zeros(n)], axis=-1)

    lean = p.torso_lean
    torso_dir = np.array([0.0, np.cos(lean), np.sin(lean)])
    neck = pelvis + seg["torso"] * torso_dir
    head_c = neck + (seg["neck"] + seg["head"] * 0.5) * torso_dir

    for side, sgn, ph in (("left", 1.0, 0.0), ("right", -1.0, np.pi)):
        hip = pelvis + np.array([sgn * seg["hip_half"], 0.0, 0.0])
        a_hip = p.hip_amp * np.sin(w + ph)
        a_knee = a_hip - p.knee_amp * np.clip(np.sin(w + ph - p.knee_lag), 0.0, None)
        knee = hip + seg["thigh"] * np.stack([np.zeros(n), -np.cos(a_hip), np.sin(a_hip)], -1)
        ankle = knee + seg["shin"] * np.stack([np.zeros(n), -np.cos(a_knee), np.sin(a_knee)], -1)

        shoulder = neck + np.array([sgn * shoulder_half, -0.03, 0.0])
        a_sh = -arm_amp * np.sin(w + ph + p.arm_phase)
        a_el = a_sh + p.elbow_amp * (0.6 + 0.4 * np.sin(w + ph + p.arm_phase + 0.5))
        elbow = shoulder + seg["upper_arm"] * np.stack([np.zeros(n), -np.cos(a_sh), np.sin(a_sh)], -1)
        wrist = elbow + seg["forearm"] * np.stack([np.zeros(n), -np.cos(a_el), np.sin(a_el)], -1)

        j = {"left": (5, 7, 9, 11, 13, 15), "right": (6, 8, 10, 12, 14, 16)}[side]
        pose[:, j[0]] = shoulder
        pose[:, j[1]] = elbow
        pose[:, j[2]] = wrist
        pose[:, j[3]] = hip
        pose[:, j[4]] = knee
        pose[:, j[5]] = ankle

    fwd = np.array([0.0, 0.0, 1.0])
    lat = np.array([1.0, 0.0, 0.0])
    pose[:, 0] = head_c + 0.09 * fwd
    pose[:, 1] = head_c + 0.07 * fwd + 0.03 * lat + np.array([0, 0.03, 0])
    pose[:, 2] = head_c + 0.07 * fwd - 0.03 * lat + np.array([0, 0.03, 0])
    pose[:, 3] = head_c + 0.075 * lat
    pose[:, 4] = head_c - 0.075 * lat
    return pose


def _project(pose: np.ndarray, angle_deg) -> np.ndarray:
    """Rotate about the vertical axis then drop depth (orthographic).

    ``angle_deg`` is a scalar or one angle per frame.
    """
    a = np.deg2rad(np.asarray(angle_deg, dtype=np.float64))
    if a.ndim == 1:
        a = a[:, None]
    # angle 0 is a side view: image x follows the walking direction
    img_x = np.cos(a) * pose[..., 2] + np.sin(a) * pose[..., 0]
    img_y = -pose[..., 1]
    return np.stack([img_x, img_y], axis=-1)


def render_walker(
    p: WalkerParams,
    n_frames: int,
    view_id: int,
    variation_id: int,
    rng: np.random.Generator,
    fps: float = DEFAULT_FPS,
    pixel_noise: float = 0.004,
    heading_sweep_deg: float = 0.0,
) -> np.ndarray:
    """(T, 17, 3) pixel coordinates plus confidences.

    A nonzero ``heading_sweep_deg`` makes the walker turn steadily through that
    many degrees over the sequence, centred on the nominal view angle.
    """
    speed = float(rng.uniform(0.97, 1.03))
    phase0 = float(rng.uniform(0.0, 2.0 * np.pi))
    t = np.arange(n_frames) / fps * speed
    pose = _walker_pose_3d(p, t, phase0, variation_id)
    angle = VIEW_ANGLES_DEG[view_id]
    if heading_sweep_deg:
        turn = heading_sweep_deg * (rng.choice([-1.0, 1.0]))
        angle = angle + turn * (np.linspace(0.0, 1.0, n_frames) - 0.5)
    xy = _project(pose, angle)
    xy += rng.normal(0.0, pixel_noise, size=xy.shape)
    # random image placement: person height ~ 120-260 px anywhere in a 1280x720 frame
    px_per_m = float(rng.uniform(70.0, 150.0))
    offset = rng.uniform([200.0, 250.0], [1080.0, 500.0])
    xy = xy * px_per_m + offset
    conf = rng.uniform(0.7, 1.0, size=(n_frames, N_JOINTS, 1))
    # stored precision is float32; keep generated values exactly representable
    return np.concatenate([xy, conf], axis=-1).astype(np.float32).astype(np.float64)


def generate_synthetic_dataset(
    n_ids: int,
    seqs_per_id: int,
    rng: np.random.Generator | int,
    frames_range: tuple[int, int] = (60, 110),
    heading_sweep_deg: float = 0.0,
) -> GaitDataset:
    """Parametric walkers with per-identity proportions, stride frequency and phases.

    Each sequence gets a view (rotation about the vertical axis) and a
    variation (1 = bag-like: damped arm swing, wider shoulders). With
    ``heading_sweep_deg`` > 0 walkers turn while walking, as in unconstrained
    footage, so the viewpoint drifts within a sequence.
    """
    if n_ids < 2 or seqs_per_id < 2:
        raise ValueError("need n_ids >= 2 and seqs_per_id >= 2")
    if frames_range[0] < MIN_FRAMES:
        raise ValueError(f"frames_range must start at >= {MIN_FRAMES}")
    seed_info = rng if isinstance(rng, int) else None
    rng = np.random.default_rng(rng)
    walkers = [sample_walker(rng) for _ in range(n_ids)]
    seqs = []
    for sid, w in enumerate(walkers):
        for k in range(seqs_per_id):
            view = k % len(VIEW_ANGLES_DEG)
            variation = (k // len(VIEW_ANGLES_DEG)) % N_VARIATIONS
            n = int(rng.integers(frames_range[0], frames_range[1] + 1))
            frames = render_walker(w, n, view, variation, rng, heading_sweep_deg=heading_sweep_deg)
            seqs.append(SkeletonSequence(frames, DEFAULT_FPS, sid, view, variation))
    prov = {
        "source": "synthetic_walkers",
        "n_ids": n_ids,
        "seqs_per_id": seqs_per_id,
        "seed": seed_info,
        "heading_sweep_deg": heading_sweep_deg,
        "curated": True,
    }
    return GaitDataset(seqs, prov)


def nested_subset_indices(n: int, fraction: float, seed: int) -> np.ndarray:
    """First ceil(fraction*n) entries of a seeded permutation, so smaller fractions nest."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    perm = np.random.default_rng(seed).permutation(n)
    k = max(1, int(np.ceil(fraction * n - 1e-9)))
    return np.sort(perm[:k])


# -- GSK1 binary format --------------------------------------------------------
MAGIC = b"GSK1"
VERSION = 1
_HEADER = struct.Struct("<4sHQ")
_RECORD = struct.Struct("<QHHHH")
_NO_SUBJECT = 2**64 - 1


def dataset_to_bytes(ds: GaitDataset) -> bytes:
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, VERSION, len(ds.sequences)))
    for s in ds.sequences:
        sid = _NO_SUBJECT if s.subject_id is None else int(s.subject_id)
        t, j, _ = s.frames.shape
        buf.write(_RECORD.pack(sid, s.view_id, s.variation_id, t, j))
        buf.write(s.frames.astype("<f4").tobytes())
    return buf.getvalue()


def dataset_from_bytes(raw: bytes) -> GaitDataset:
    if len(raw) < _HEADER.size:
        raise FormatError("truncated header", len(raw))
    magic, version, count = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    off = _HEADER.size
    seqs = []
    for _ in range(count):
        if off + _RECORD.size > len(raw):
            raise FormatError("truncated record header", off)
        sid, view, var, t, j = _RECORD.unpack_from(raw, off)
        off += _RECORD.size
        nbytes = t * j * 3 * 4
        if off + nbytes > len(raw):
            raise FormatError("truncated joint data", off)
        frames = np.frombuffer(raw, dtype="<f4", count=t * j * 3, offset=off).reshape(t, j, 3)
        off += nbytes
        seqs.append(
            SkeletonSequence(
                frames.astype(np.float64), DEFAULT_FPS, None if sid == _NO_SUBJECT else sid, view, var
            )
        )
    if off != len(raw):
        raise FormatError("trailing bytes after last record", off)
    return GaitDataset(seqs, {"source": "gsk1"})


def write_dataset(ds: GaitDataset, path: str | Path) -> None:
    """Write GSK1 binary, or the line-delimited JSON variant for ``.jsonl`` paths."""
    path = Path(path)
    if path.suffix == ".jsonl":
        with path.open("w") as fh:
            fh.write(json.dumps({"magic": "GSK1", "version": VERSION, "count": len(ds)}) + "\n")
            for s in ds.sequences:
                rec = {
                    "subject_id": s.subject_id,
                    "view_id": s.view_id,
                    "variation_id": s.variation_id,
                    "frames": s.frames.astype(np.float32).tolist(),
                }
                fh.write(json.dumps(rec) + "\n")
        return
    path.write_bytes(dataset_to_bytes(ds))


def read_dataset(path: str | Path) -> GaitDataset:
    path = Path(path)
    if path.suffix == ".jsonl":
        lines = path.read_text().splitlines()
        if not lines:
            raise FormatError("empty file", 0)
        head = json.loads(lines[0])
        if head.get("magic") != "GSK1":
            raise FormatError("bad magic", 0)
        if head.get("version") != VERSION:
            raise FormatError(f"unsupported version {head.get('version')}", 0)
        if len(lines) - 1 != head["count"]:
            raise FormatError("record count mismatch", len(lines[0]) + 1)
        seqs = []
        for line in lines[1:]:
            rec = json.loads(line)
            frames = np.asarray(rec["frames"], dtype=np.float32).astype(np.float64)
            seqs.append(
                SkeletonSequence(frames, DEFAULT_FPS, rec["subject_id"], rec["view_id"], rec["variation_id"])
            )
        return GaitDataset(seqs, {"source": "gsk1-text"})
    ds = dataset_from_bytes(path.read_bytes())
    ds.provenance["path"] = str(path)
    return ds


def curate(ds: GaitDataset, min_frames: int = MIN_FRAMES, min_conf: float = MIN_CONFIDENCE) -> GaitDataset:
    kept = [s for s in ds.sequences if filter_sequence(s, min_frames, min_conf)[0]]
    prov = dict(ds.provenance, curated=True, rejected=len(ds) - len(kept))
    return GaitDataset(kept, prov)
