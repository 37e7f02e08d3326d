"""Datasets, normalisation, padded batching, augmentation and the
user-dependent split protocol.

Dataset files are JSON Lines, one sample per line::

    {"id": "s0", "label": "circle", "subject": "p3", "frames": [[x0, x1, ...], ...]}

``frames`` is time-major (``L`` rows of ``N`` features). ``subject`` is
optional.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from grurec.errors import AugmentationError, ConfigError, DataError, EmptyDatasetError, ProtocolError, ShapeError
from grurec.tensor import SeededRng

# incremented on every augmentation call; lets tests assert that evaluation
# never touches augmented data
AUGMENT_CALLS = Counter()


@dataclass
class GestureSample:
    id: str
    label: str | None
    frames: np.ndarray  # (L, N)
    subject: str | None = None

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    def to_json(self) -> dict:
        d = {"id": self.id, "label": self.label}
        if self.subject is not None:
            d["subject"] = self.subject
        d["frames"] = self.frames.tolist()
        return d


@dataclass
class Batch:
    """Zero-padded mini-batch: ``data`` is ``(B, N, L~)``."""

    data: np.ndarray
    lengths: np.ndarray
    labels: np.ndarray | None = None

    @property
    def time_major(self) -> np.ndarray:
        return np.ascontiguousarray(self.data.transpose(2, 0, 1))

    def unpad(self) -> list:
        return [self.data[i, :, : self.lengths[i]].T.copy() for i in range(len(self.lengths))]


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray


@dataclass
class AugmentSpec:
    scale_factor: float = 0.3
    translate_factor: float = 1.0
    rotate_factor: float = 0.0
    gpsr: bool = True
    gpsr_n_factor: float = 0.1
    gpsr_r_factor: float = 0.05
    point_layout: bool = False

    def validate(self, dim: int | None = None):
        for name in ("scale_factor", "translate_factor", "rotate_factor", "gpsr_n_factor", "gpsr_r_factor"):
            if getattr(self, name) < 0:
                raise AugmentationError(f"{name} must be non-negative")
        if self.scale_factor >= 1:
            raise AugmentationError("scale_factor must be below 1 so scales stay positive")
        if self.rotate_factor > 0 and not self.point_layout:
            raise AugmentationError("rotation needs a declared 3-D point layout")
        if self.point_layout and dim is not None and dim % 3:
            raise AugmentationError(f"point layout needs a feature dim divisible by 3, got {dim}")

    @classmethod
    def none(cls) -> "AugmentSpec":
        return cls(scale_factor=0.0, translate_factor=0.0, rotate_factor=0.0, gpsr=False)

    @property
    def active(self) -> bool:
        return self.gpsr or self.scale_factor > 0 or self.translate_factor > 0 or self.rotate_factor > 0


# --------------------------------------------------------------------------
# IO


def _parse_line(obj, lineno: int, require_label: bool) -> GestureSample:
    if not isinstance(obj, dict):
        raise DataError(f"line {lineno}: expected a JSON object")
    frames = obj.get("frames")
    if not isinstance(frames, list) or not frames:
        raise DataError(f"line {lineno}: 'frames' must be a non-empty list of frames")
    if not all(isinstance(f, list) for f in frames):
        raise DataError(f"line {lineno}: every frame must be a list of numbers")
    widths = {len(f) for f in frames}
    if len(widths) != 1:
        raise DataError(f"line {lineno}: ragged frames (lengths {sorted(widths)})")
    if widths == {0}:
        raise DataError(f"line {lineno}: frames have no features")
    try:
        arr = np.asarray(frames, dtype=np.float64)
    except (TypeError, ValueError):
        raise DataError(f"line {lineno}: non-numeric frame entries") from None
    if not np.all(np.isfinite(arr)):
        raise DataError(f"line {lineno}: non-finite frame entries")
    label = obj.get("label")
    if label is None and require_label:
        raise DataError(f"line {lineno}: missing 'label'")
    subject = obj.get("subject")
    return GestureSample(
        id=str(obj.get("id", f"line{lineno}")),
        label=None if label is None else str(label),
        frames=arr,
        subject=None if subject is None else str(subject),
    )


def load_dataset(path, require_label: bool = True) -> list:
    """Parse and validate a JSONL dataset.

    The feature dimension is taken from the first sample and enforced on
    the rest. Raises :class:`DataError` (with the line number) on bad input.
    """
    samples = []
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"line {lineno}: malformed JSON ({e.msg})") from None
            s = _parse_line(obj, lineno, require_label)
            if dim is None:
                dim = s.dim
            elif s.dim != dim:
                raise ShapeError(f"line {lineno}: feature dim {s.dim}, expected {dim}")
            samples.append(s)
    if not samples:
        raise EmptyDatasetError(f"{path}: no samples")
    return samples


def save_dataset(samples, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json()) + "\n")


def label_vocabulary(samples) -> list:
    """Distinct labels in first-seen order."""
    return list(dict.fromkeys(s.label for s in samples))


def check_dims(samples, dim: int | None = None) -> int:
    if not samples:
        raise EmptyDatasetError("empty dataset")
    dim = samples[0].dim if dim is None else dim
    for s in samples:
        if s.dim != dim:
            raise ShapeError(f"sample {s.id}: feature dim {s.dim}, expected {dim}")
    return dim


# --------------------------------------------------------------------------
# normalisation and batching


def zscore_fit(samples) -> NormStats:
    frames = [s.frames for s in samples]
    if not frames or sum(f.shape[0] for f in frames) == 0:
        raise EmptyDatasetError("cannot fit normalisation on an empty training pool")
    pool = np.concatenate(frames, axis=0)
    return NormStats(mean=pool.mean(axis=0), std=pool.std(axis=0))


def zscore_apply(sample: GestureSample, stats: NormStats) -> GestureSample:
    if sample.dim != stats.mean.shape[0]:
        raise ShapeError(f"sample {sample.id}: feature dim {sample.dim}, normaliser expects {stats.mean.shape[0]}")
    frames = (sample.frames - stats.mean) / np.maximum(stats.std, 1e-8)
    return replace(sample, frames=frames)


def pad_batch(samples, label_index: dict | None = None, dtype=np.float64) -> Batch:
    """Stack samples into a zero-padded ``(B, N, L~)`` batch."""
    if not samples:
        raise EmptyDatasetError("cannot batch zero samples")
    dim = check_dims(samples)
    lengths = np.array([s.length for s in samples], dtype=np.int64)
    if np.any(lengths < 1):
        raise DataError("empty sequence in batch")
    data = np.zeros((len(samples), dim, int(lengths.max())), dtype=dtype)
    for i, s in enumerate(samples):
        data[i, :, : s.length] = s.frames.T
    labels = None
    if label_index is not None:
        try:
            labels = np.array([label_index[s.label] for s in samples], dtype=np.int64)
        except KeyError as e:
            raise DataError(f"unknown label {e.args[0]!r}") from None
    return Batch(data=data, lengths=lengths, labels=labels)


# --------------------------------------------------------------------------
# augmentation


@dataclass
class AffineDraw:
    scale: np.ndarray  # per feature
    shift: np.ndarray  # per feature
    angle: float = 0.0


def draw_affine(spec: AugmentSpec, dim: int, rng) -> AffineDraw:
    """Random per-axis scale, per-feature translation and optional yaw."""
    spec.validate(dim)
    f, g, th = spec.scale_factor, spec.translate_factor, spec.rotate_factor
    if spec.point_layout:
        scale = np.tile(rng.uniform(1 - f, 1 + f, 3), dim // 3)
    else:
        scale = rng.uniform(1 - f, 1 + f, dim)
    shift = rng.uniform(-g, g, dim)
    angle = float(rng.uniform(-th, th)) if th > 0 else 0.0
    return AffineDraw(scale=scale, shift=shift, angle=angle)


def yaw_rotate(frames: np.ndarray, angle: float) -> np.ndarray:
    """Rotate every (x, y, z) point about the third (up) axis."""
    L, N = frames.shape
    if N % 3:
        raise AugmentationError(f"rotation needs a feature dim divisible by 3, got {N}")
    pts = frames.reshape(L, N // 3, 3)
    c, s = np.cos(angle), np.sin(angle)
    out = pts.copy()
    out[..., 0] = c * pts[..., 0] - s * pts[..., 1]
    out[..., 1] = s * pts[..., 0] + c * pts[..., 1]
    return out.reshape(L, N)


def apply_affine(frames: np.ndarray, draw: AffineDraw) -> np.ndarray:
    out = frames * draw.scale
    if draw.angle:
        out = yaw_rotate(out, draw.angle)
    return out + draw.shift


def augment_affine(sample: GestureSample, spec: AugmentSpec, rng) -> GestureSample:
    AUGMENT_CALLS["affine"] += 1
    draw = draw_affine(spec, sample.dim, rng)
    return replace(sample, frames=apply_affine(sample.frames, draw))


def resample_path(frames: np.ndarray, fractions: np.ndarray) -> np.ndarray:
    """Points at cumulative arc-length positions given by interval ``fractions``.

    ``len(fractions) + 1`` points are returned; the first and last are the
    path's endpoints. A path of zero length is parametrised by time instead.
    """
    fractions = np.asarray(fractions, dtype=np.float64)
    seg = np.linalg.norm(np.diff(frames, axis=0), axis=1)
    if seg.sum() > 0:
        keep = np.concatenate([[True], seg > 0])
        pts = frames[keep]
        s = np.concatenate([[0.0], np.cumsum(seg[seg > 0])])
    else:
        pts = frames
        s = np.linspace(0.0, 1.0, len(frames))
    pos = np.concatenate([[0.0], np.cumsum(fractions / fractions.sum())]) * s[-1]
    pos[-1] = s[-1]
    return np.stack([np.interp(pos, s, pts[:, d]) for d in range(pts.shape[1])], axis=1)


def gpsr(sample: GestureSample, n: int, r: int, rng, fractions=None) -> GestureSample:
    """Gesture path stochastic resampling.

    Resamples ``n + r`` points at random arc-length intervals along the
    trajectory, then drops ``r`` of them (never the first) to leave ``n``.
    ``fractions`` overrides the ``n + r - 1`` random interval lengths.
    """
    if n < 2 or not 0 <= r < n:
        raise AugmentationError(f"GPSR needs n >= 2 and 0 <= r < n (n={n}, r={r})")
    if sample.length < 2:
        raise AugmentationError(f"GPSR needs at least 2 frames, sample {sample.id} has {sample.length}")
    AUGMENT_CALLS["gpsr"] += 1
    m = n + r
    if fractions is None:
        fractions = rng.uniform(1.0, 2.0, m - 1)
    elif len(fractions) != m - 1:
        raise AugmentationError(f"expected {m - 1} interval fractions, got {len(fractions)}")
    pts = resample_path(sample.frames, fractions)
    if r:
        drop = rng.choice(np.arange(1, m), size=r, replace=False)
        pts = np.delete(pts, drop, axis=0)
    return replace(sample, frames=pts)


def draw_gpsr_counts(spec: AugmentSpec, padded_len: int, rng) -> tuple:
    """Resample count ``n ~ U[(1-a)L~, (1+a)L~]`` and remove count ``r ~ U{0..b L~}``."""
    a, b = spec.gpsr_n_factor, spec.gpsr_r_factor
    n = int(round(rng.uniform((1 - a) * padded_len, (1 + a) * padded_len)))
    n = max(n, 2)
    r = int(rng.integers(0, int(b * padded_len) + 1))
    return n, min(r, n - 1)


def augment_sample(sample: GestureSample, spec: AugmentSpec, padded_len: int, rng) -> GestureSample:
    """Training-time augmentation: GPSR (if enabled) followed by the affine jitter."""
    AUGMENT_CALLS["sample"] += 1
    if spec.gpsr and sample.length >= 2:
        n, r = draw_gpsr_counts(spec, padded_len, rng)
        sample = gpsr(sample, n, r, rng)
    if spec.scale_factor or spec.translate_factor or spec.rotate_factor:
        sample = augment_affine(sample, spec, rng)
    return sample


# --------------------------------------------------------------------------
# splits


def stratified_split(samples, fraction: float, seed: int):
    """Hold out ``floor(fraction * count)`` samples of every class."""
    by_class = {}
    for i, s in enumerate(samples):
        by_class.setdefault(s.label, []).append(i)
    held = set()
    for label, idx in by_class.items():
        k = int(np.floor(fraction * len(idx)))
        if k == 0 or k == len(idx):
            continue
        perm = SeededRng(seed, "val-split", label).permutation(len(idx))
        held.update(idx[j] for j in perm[:k])
    train = [s for i, s in enumerate(samples) if i not in held]
    val = [s for i, s in enumerate(samples) if i in held]
    return train, val


@dataclass
class ParticipantSplit:
    subject: str
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)


def split_user_dependent(samples, T: int, seed: int) -> list:
    """Per participant, ``T`` random training samples per class; the rest test."""
    if T < 1:
        raise ConfigError("T must be at least 1")
    if any(s.subject is None for s in samples):
        raise ProtocolError("user-dependent protocol needs a subject id on every sample")
    labels = label_vocabulary(samples)
    subjects = list(dict.fromkeys(s.subject for s in samples))
    splits = []
    for subj in subjects:
        split = ParticipantSplit(subj)
        mine = [s for s in samples if s.subject == subj]
        for label in labels:
            group = [s for s in mine if s.label == label]
            if len(group) <= T:
                raise ProtocolError(f"participant {subj!r}, class {label!r}: {len(group)} samples, need more than T={T}")
            perm = SeededRng(seed, "user-split", subj, label).permutation(len(group))
            split.train.extend(group[j] for j in perm[:T])
            split.test.extend(group[j] for j in perm[T:])
        splits.append(split)
    return splits


# --------------------------------------------------------------------------
# synthetic data


def _prototype(rng, dim: int):
    return {
        "amp": rng.uniform(0.5, 1.5, (dim, 2)),
        "freq": rng.uniform(0.5, 2.5, (dim, 2)),
        "phase": rng.uniform(0, 2 * np.pi, (dim, 2)),
    }


def _render(proto, tau):
    arg = 2 * np.pi * proto["freq"][None] * tau[:, None, None] + proto["phase"][None]
    return np.sum(proto["amp"][None] * np.sin(arg), axis=2)


def _synth_sample(proto, rng, style, ident, label, subject):
    L = int(rng.integers(30, 81))
    gamma = float(np.exp(rng.uniform(np.log(0.8), np.log(1.25))))
    tau = np.linspace(0.0, 1.0, L) ** gamma
    frames = _render(proto, tau) * style["gain"] + style["offset"]
    frames += rng.uniform(-0.1, 0.1, frames.shape[1])
    frames += rng.normal(0.0, 0.05, frames.shape)
    return GestureSample(id=ident, label=label, frames=frames, subject=subject)


def synth_generate(num_classes: int, per_class_train: int, per_class_test: int, dim: int, rng, subjects: int | None = None):
    """Separable synthetic gestures: one smooth sinusoid-mixture prototype per
    class, with per-sample time warp, offset and noise.

    With ``subjects`` set, counts are per (subject, class) and each subject
    gets a mild personal gain/offset. Returns ``(train, test)``.
    """
    if num_classes < 2:
        raise ConfigError("need at least 2 classes")
    if dim < 2:
        raise ConfigError("need at least 2 feature dimensions")
    if per_class_train < 0 or per_class_test < 0:
        raise ConfigError("sample counts must be non-negative")
    if not isinstance(rng, SeededRng):
        rng = SeededRng(int(rng))
    protos = [_prototype(rng.child("proto", k), dim) for k in range(num_classes)]
    subj_ids = [None] if not subjects else [f"p{j:02d}" for j in range(subjects)]
    train, test = [], []
    for j, subj in enumerate(subj_ids):
        srng = rng.child("subject", j)
        style = {"gain": srng.uniform(0.9, 1.1, dim), "offset": srng.normal(0.0, 0.1, dim)}
        for k in range(num_classes):
            label = f"g{k}"
            for split, count, out in (("train", per_class_train, train), ("test", per_class_test, test)):
                for i in range(count):
                    ident = f"{split}-{'' if subj is None else subj + '-'}{label}-{i}"
                    out.append(_synth_sample(protos[k], rng.child(split, j, k, i), style, ident, label, subj))
    return train, test
