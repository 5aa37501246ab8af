"""Feature datasets: the SNFR1 binary format, stratified folds, synthesis.

The on-disk format (all integers little-endian):

    header (24 bytes): magic "SNFR" | version u32 (=1) | n_records u64
                       | dim u32 (=768) | T_a u16 | T_b u16
    per record:        clip_id u64 | label u8 | 3 zero pad bytes
                       | audio f32[T_a*768] | video f32[T_b*768]

T_a / T_b are the audio / video token counts shared by every record in
the file (T_b is the video slot). Feature payloads are 32-bit floats;
model math upcasts to float64 later. Files round-trip bit for bit.

All randomness here flows through numpy's PCG64 generator, so results
are reproducible for a fixed seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from fractions import Fraction

import numpy as np

MAGIC = b"SNFR"
FORMAT_VERSION = 1
FEATURE_DIM = 768
HEADER = struct.Struct("<4sIQIHH")
RECORD_PREFIX = struct.Struct("<QB3x")


class Label(IntEnum):
    SAFE = 0
    SEXUAL = 1
    VIOLENT = 2
    BOTH = 3


class DatasetFormatError(ValueError):
    """Base for malformed SNFR1 input."""


class BadMagicError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedPayloadError(DatasetFormatError):
    pass


class NonFiniteFeaturesError(DatasetFormatError):
    pass


@dataclass
class ClipRecord:
    """One one-second clip: id, class label, per-modality feature tokens."""

    clip_id: int
    label: Label
    audio: np.ndarray  # [T_a, 768] float32
    video: np.ndarray  # [T_v, 768] float32

    def validate(self) -> None:
        for name, feats in (("audio", self.audio), ("video", self.video)):
            if feats.ndim != 2 or feats.shape[1] != FEATURE_DIM:
                raise ValueError(f"{name} features must be [T, {FEATURE_DIM}], got {feats.shape}")
            if feats.shape[0] < 1:
                raise ValueError(f"{name} needs at least one token")
            if not np.all(np.isfinite(feats)):
                raise ValueError(f"{name} features contain NaN/Inf")
        if not 0 <= self.clip_id < 2**64:
            raise ValueError(f"clip_id out of u64 range: {self.clip_id}")
        if int(self.label) not in (0, 1, 2, 3):
            raise ValueError(f"bad label code: {self.label}")


@dataclass
class Dataset:
    """Immutable-by-convention collection of clips sharing T_a and T_v."""

    records: list[ClipRecord]
    t_audio: int = 1
    t_video: int = 1

    def __len__(self) -> int:
        return len(self.records)

    def validate(self) -> None:
        for rec in self.records:
            rec.validate()
            if rec.audio.shape[0] != self.t_audio or rec.video.shape[0] != self.t_video:
                raise ValueError(
                    f"clip {rec.clip_id}: token counts {rec.audio.shape[0]}/{rec.video.shape[0]} "
                    f"differ from dataset header {self.t_audio}/{self.t_video}")

    def labels(self) -> np.ndarray:
        return np.array([int(r.label) for r in self.records], dtype=np.int64)

    def clip_ids(self) -> np.ndarray:
        return np.array([r.clip_id for r in self.records], dtype=np.uint64)


def write_dataset(dataset: Dataset, path: str) -> None:
    """Serialize to the SNFR1 layout, rejecting invalid datasets outright."""
    dataset.validate()
    header = HEADER.pack(MAGIC, FORMAT_VERSION, len(dataset.records),
                         FEATURE_DIM, dataset.t_audio, dataset.t_video)
    with open(path, "wb") as f:
        f.write(header)
        for rec in dataset.records:
            f.write(RECORD_PREFIX.pack(rec.clip_id, int(rec.label)))
            f.write(np.ascontiguousarray(rec.audio, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(rec.video, dtype="<f4").tobytes())


def read_dataset(path: str) -> Dataset:
    """Parse and validate an SNFR1 file; every failure mode is distinct."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < HEADER.size:
        raise TruncatedPayloadError(f"file too short for header: {len(blob)} bytes")
    magic, version, n_records, dim, t_a, t_b = HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"unsupported format version {version}")
    if dim != FEATURE_DIM:
        raise DatasetFormatError(f"feature dim {dim} != {FEATURE_DIM}")
    if t_a < 1 or t_b < 1:
        raise DatasetFormatError(f"token counts must be >= 1, got T_a={t_a} T_b={t_b}")

    audio_bytes = 4 * t_a * FEATURE_DIM
    video_bytes = 4 * t_b * FEATURE_DIM
    record_bytes = RECORD_PREFIX.size + audio_bytes + video_bytes
    expected = HEADER.size + n_records * record_bytes
    if len(blob) < expected:
        raise TruncatedPayloadError(
            f"payload truncated: {len(blob)} bytes, need {expected}")
    if len(blob) > expected:
        raise DatasetFormatError(f"{len(blob) - expected} trailing bytes after payload")

    records: list[ClipRecord] = []
    off = HEADER.size
    for _ in range(n_records):
        clip_id, label_code = RECORD_PREFIX.unpack_from(blob, off)
        off += RECORD_PREFIX.size
        if label_code > 3:
            raise DatasetFormatError(f"clip {clip_id}: label code {label_code} out of range")
        audio = np.frombuffer(blob, dtype="<f4", count=t_a * FEATURE_DIM,
                              offset=off).reshape(t_a, FEATURE_DIM)
        off += audio_bytes
        video = np.frombuffer(blob, dtype="<f4", count=t_b * FEATURE_DIM,
                              offset=off).reshape(t_b, FEATURE_DIM)
        off += video_bytes
        if not (np.all(np.isfinite(audio)) and np.all(np.isfinite(video))):
            raise NonFiniteFeaturesError(f"clip {clip_id}: non-finite feature values")
        records.append(ClipRecord(clip_id, Label(label_code), audio.copy(), video.copy()))
    return Dataset(records, t_audio=t_a, t_video=t_b)


@dataclass
class FoldPlan:
    """Disjoint, exhaustive clip->fold assignment, class-stratified."""

    k: int
    assignment: dict[int, int] = field(default_factory=dict)

    def fold_of(self, clip_id: int) -> int:
        return self.assignment[clip_id]

    def eval_ids(self, fold: int) -> list[int]:
        return [cid for cid, f in self.assignment.items() if f == fold]

    def train_ids(self, fold: int) -> list[int]:
        return [cid for cid, f in self.assignment.items() if f != fold]


def stratified_kfold(dataset: Dataset, k: int, seed: int) -> FoldPlan:
    """Assign clips to k folds so per-class counts differ by at most 1.

    Classes are processed in label order; each class's members are
    shuffled, then dealt round-robin starting at a rotating offset so the
    leftover members of successive classes spill onto different folds.
    """
    if k < 2:
        raise ValueError(f"need k >= 2 folds, got {k}")
    labels = dataset.labels()
    ids = dataset.clip_ids()
    rng = np.random.Generator(np.random.PCG64(seed))
    assignment: dict[int, int] = {}
    spill = 0
    for label in sorted({int(v) for v in labels}):
        members = ids[labels == label]
        if len(members) < k:
            raise ValueError(
                f"class {Label(label).name} has {len(members)} members, fewer than k={k}")
        members = members[rng.permutation(len(members))]
        for i, cid in enumerate(members):
            assignment[int(cid)] = (i + spill) % k
        spill = (spill + len(members)) % k
    return FoldPlan(k=k, assignment=assignment)


def random_kfold(dataset: Dataset, k: int, seed: int) -> FoldPlan:
    """Unstratified variant: a plain shuffled deal into k folds."""
    if k < 2:
        raise ValueError(f"need k >= 2 folds, got {k}")
    if len(dataset) < k:
        raise ValueError(f"{len(dataset)} records cannot fill {k} folds")
    rng = np.random.Generator(np.random.PCG64(seed))
    ids = dataset.clip_ids()
    order = rng.permutation(len(ids))
    return FoldPlan(k=k, assignment={int(ids[j]): i % k for i, j in enumerate(order)})


def split_by_fold(dataset: Dataset, plan: FoldPlan, fold: int) -> tuple[list[ClipRecord], list[ClipRecord]]:
    """(train records, eval records) for one held-out fold."""
    train = [r for r in dataset.records if plan.fold_of(r.clip_id) != fold]
    evals = [r for r in dataset.records if plan.fold_of(r.clip_id) == fold]
    return train, evals


def synth_complementary(n: int, noise_sigma: float, seed: int) -> Dataset:
    """Complementary-modality dataset where neither modality suffices alone.

    Two latent bits (b_a, b_v) are drawn uniformly per clip and the label
    is 2*b_a + b_v. Audio features carry only b_a: the first basis vector
    of the audio space scaled +-1, plus isotropic Gaussian noise of scale
    noise_sigma; video likewise carries only b_v. A single modality can
    at best resolve its own bit (50% on four classes), while the joint
    Bayes rule (sign of each modality's first coordinate) approaches 100%
    as the noise shrinks.
    """
    if n < 40:
        raise ValueError(f"need n >= 40, got {n}")
    if noise_sigma <= 0:
        raise ValueError(f"noise_sigma must be positive, got {noise_sigma}")
    rng = np.random.Generator(np.random.PCG64(seed))
    bits_a = rng.integers(0, 2, size=n)
    bits_v = rng.integers(0, 2, size=n)
    audio = noise_sigma * rng.standard_normal((n, FEATURE_DIM))
    video = noise_sigma * rng.standard_normal((n, FEATURE_DIM))
    audio[:, 0] += 2.0 * bits_a - 1.0
    video[:, 0] += 2.0 * bits_v - 1.0
    audio32 = audio.astype(np.float32)
    video32 = video.astype(np.float32)
    records = [
        ClipRecord(clip_id=i,
                   label=Label(int(2 * bits_a[i] + bits_v[i])),
                   audio=audio32[i:i + 1].copy(),
                   video=video32[i:i + 1].copy())
        for i in range(n)
    ]
    return Dataset(records, t_audio=1, t_video=1)


# Class counts of the 107907-clip reference corpus the synthetic
# generator stands in for (that corpus itself is access-restricted).
_REFERENCE_COUNTS = {
    Label.SAFE: 70741,
    Label.SEXUAL: 9335,
    Label.VIOLENT: 19658,
    Label.BOTH: 8173,
}


def reference_class_proportions() -> dict[Label, Fraction]:
    """Exact class proportions of the reference corpus; they sum to 1."""
    total = sum(_REFERENCE_COUNTS.values())
    return {label: Fraction(count, total) for label, count in _REFERENCE_COUNTS.items()}
