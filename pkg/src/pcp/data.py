"""Synthetic ECG cohorts, framing/normalization, patient-level splits and
the binary dataset format.

Binary layout (little-endian)::

    header  magic "PCPD" | version u16 | num_frames u32 | num_classes u16 | frame_len u16
    frame   patient_id u32 | lead_id u8 | label u16 | frame_len x f32
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from pcp.errors import DataError, FormatError, ValidationError

FRAME_LEN = 2500
SAMPLING_RATE = 250.0
SPLITS = ("train", "validation", "test", "unsplit")

MAGIC = b"PCPD"
VERSION = 1
_HEADER = struct.Struct("<4sHIHH")


def _record_dtype(frame_len: int) -> np.dtype:
    return np.dtype([("patient_id", "<u4"), ("lead_id", "u1"), ("label", "<u2"), ("samples", "<f4", (frame_len,))])


@dataclass(frozen=True)
class EcgFrame:
    samples: np.ndarray
    patient_id: int
    lead_id: int
    label: int


@dataclass(frozen=True, eq=False)
class EcgDataset:
    """Columnar store of frames; row ``i`` of each array describes frame ``i``."""

    samples: np.ndarray  # (n, FRAME_LEN) float32 in [0, 1]
    patient_ids: np.ndarray  # (n,) uint32
    lead_ids: np.ndarray  # (n,) uint8
    labels: np.ndarray  # (n,) int64
    num_classes: int
    split_tag: str = "unsplit"

    def __post_init__(self):
        n = len(self.samples)
        if self.samples.ndim != 2 or not (len(self.patient_ids) == len(self.lead_ids) == len(self.labels) == n):
            raise DataError("dataset arrays have inconsistent lengths")
        if self.split_tag not in SPLITS:
            raise DataError(f"unknown split tag {self.split_tag!r}")
        if self.num_classes < 1:
            raise DataError("num_classes must be positive")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.samples)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EcgDataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.split_tag == other.split_tag
            and self.samples.dtype == other.samples.dtype
            and self.samples.shape == other.samples.shape
            and self.samples.tobytes() == other.samples.tobytes()
            and np.array_equal(self.patient_ids, other.patient_ids)
            and np.array_equal(self.lead_ids, other.lead_ids)
            and np.array_equal(self.labels, other.labels)
        )

    __hash__ = None

    @property
    def patients(self) -> np.ndarray:
        return np.unique(self.patient_ids)

    def frame(self, i: int) -> EcgFrame:
        return EcgFrame(self.samples[i], int(self.patient_ids[i]), int(self.lead_ids[i]), int(self.labels[i]))

    @property
    def frames(self) -> list[EcgFrame]:
        return [self.frame(i) for i in range(len(self))]

    def __iter__(self) -> Iterator[EcgFrame]:
        return (self.frame(i) for i in range(len(self)))

    def patient_labels(self) -> dict[int, int]:
        """Patient id -> label (first frame of the patient)."""
        out: dict[int, int] = {}
        for pid, lab in zip(self.patient_ids.tolist(), self.labels.tolist()):
            out.setdefault(pid, lab)
        return out

    def subset(self, mask: np.ndarray, split_tag: str | None = None) -> EcgDataset:
        return EcgDataset(
            self.samples[mask],
            self.patient_ids[mask],
            self.lead_ids[mask],
            self.labels[mask],
            self.num_classes,
            self.split_tag if split_tag is None else split_tag,
        )


# -- framing --------------------------------------------------------------


def normalize_frame(frame: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant frame maps to all zeros."""
    frame = np.asarray(frame, dtype=np.float64)
    lo, hi = frame.min(), frame.max()
    if hi == lo:
        return np.zeros_like(frame)
    out = (frame - lo) / (hi - lo)
    # division can land a hair off the bounds
    return np.clip(out, 0.0, 1.0)


def frame_and_normalize(raw: Sequence[float], frame_len: int = FRAME_LEN) -> list[np.ndarray]:
    """Cut ``raw`` into consecutive non-overlapping frames, each scaled to [0, 1].

    The trailing remainder shorter than ``frame_len`` is discarded.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 1 or len(raw) < frame_len:
        raise DataError(f"need at least {frame_len} samples to form a frame, got {raw.size}")
    count = len(raw) // frame_len
    return [normalize_frame(raw[i * frame_len : (i + 1) * frame_len]) for i in range(count)]


# -- synthetic cohort ------------------------------------------------------

# heart-rate range (bpm), relative RR jitter, P wave present, T-wave scale,
# S-wave depth range, fibrillatory baseline amplitude
RHYTHM_FAMILIES = (
    ((60.0, 90.0), 0.02, True, 1.0, (0.1, 0.25), 0.0),  # normal sinus
    ((38.0, 52.0), 0.02, True, 1.6, (0.3, 0.5), 0.0),  # slow regular
    ((110.0, 150.0), 0.02, True, 0.5, (0.55, 0.8), 0.0),  # fast regular
    ((70.0, 110.0), 0.22, False, 0.8, (0.85, 1.1), 0.06),  # irregular, no P wave
)


@dataclass(frozen=True)
class CohortConfig:
    num_patients: int = 40
    frames_per_patient: int = 20
    num_classes: int = 4
    leads: tuple[int, ...] = (0,)
    noise_level: float = 0.03
    seed: int = 7

    def validate(self) -> None:
        if self.num_classes < 1:
            raise DataError("num_classes must be >= 1")
        if self.num_patients < self.num_classes:
            raise DataError(f"num_patients ({self.num_patients}) must be >= num_classes ({self.num_classes})")
        if self.frames_per_patient < 1:
            raise DataError("frames_per_patient must be >= 1")
        if not self.leads or len(set(self.leads)) != len(self.leads) or not all(0 <= l <= 11 for l in self.leads):
            raise DataError(f"leads must be distinct integers in 0..11, got {self.leads}")
        if not self.noise_level >= 0:
            raise DataError("noise_level must be >= 0")
        if self.num_patients >= 2**32:
            raise DataError("too many patients for the u32 patient id")


@dataclass
class _Patient:
    label: int
    rate: float
    jitter: float
    fib: float
    waves: list[tuple[float, float, float]]  # (offset s, width s, amplitude) around R
    lead_gain: np.ndarray = field(default_factory=lambda: np.ones((12, 3)))


def _draw_patient(rng: np.random.Generator, label: int) -> _Patient:
    (lo, hi), jitter, has_p, t_scale, s_depth, fib = RHYTHM_FAMILIES[label % len(RHYTHM_FAMILIES)]
    widen = 1.0 + 0.35 * (label // len(RHYTHM_FAMILIES))
    rate = rng.uniform(lo, hi)
    qrs_w = rng.uniform(0.008, 0.016) * widen
    waves = [
        (rng.uniform(-0.05, -0.03), rng.uniform(0.006, 0.012), -rng.uniform(0.05, 0.2)),  # Q
        (0.0, qrs_w, rng.uniform(0.9, 1.4)),  # R
        (rng.uniform(0.025, 0.05), rng.uniform(0.008, 0.016), -rng.uniform(*s_depth)),  # S
        (rng.uniform(0.2, 0.32), rng.uniform(0.035, 0.075), t_scale * rng.uniform(0.2, 0.4)),  # T
    ]
    if has_p:
        waves.append((-rng.uniform(0.14, 0.22), rng.uniform(0.015, 0.035), rng.uniform(0.08, 0.25)))
    # per-lead gains for (P, QRS, T) groups; aVR (index 3) is inverted
    gain = rng.normal(1.0, 0.2, size=(12, 3))
    gain[3] *= -1.0
    return _Patient(label, rate, jitter, fib * rng.uniform(0.7, 1.3), waves, gain)


def _render_stream(p: _Patient, lead: int, n_samples: int, noise: float, rng: np.random.Generator) -> np.ndarray:
    fs = SAMPLING_RATE
    half = int(0.5 * fs)
    tt = np.arange(-half, half + 1) / fs
    group = {0: 1, 1: 1, 2: 1, 3: 2, 4: 0}  # wave index -> gain column (P=0, QRS=1, T=2)
    template = np.zeros_like(tt)
    for i, (off, width, amp) in enumerate(p.waves):
        template += p.lead_gain[lead, group[i]] * amp * np.exp(-0.5 * ((tt - off) / width) ** 2)

    pad = 2 * half
    signal = np.zeros(n_samples + 2 * pad + 1)
    rr_mean = 60.0 / p.rate
    t = rng.uniform(0.0, rr_mean) - rr_mean  # beat phase offset
    while t * fs < n_samples + half:
        k = int(round(t * fs))  # R-peak position in output samples
        if k >= -half:
            start = k - half + pad
            signal[start : start + 2 * half + 1] += template
        t += rr_mean * max(0.3, 1.0 + p.jitter * rng.standard_normal())
    signal = signal[pad : pad + n_samples]

    time = np.arange(n_samples) / fs
    wander = 0.05 * np.sin(2 * np.pi * rng.uniform(0.05, 0.3) * time + rng.uniform(0, 2 * np.pi))
    if p.fib:
        signal += p.fib * np.sin(2 * np.pi * rng.uniform(5.0, 8.0) * time + rng.uniform(0, 2 * np.pi))
    return signal + wander + noise * rng.standard_normal(n_samples)


def generate_synthetic_cohort(config: CohortConfig) -> EcgDataset:
    """Deterministic synthetic cohort: one rhythm class per patient.

    Every (patient, lead) pair is rendered as one continuous recording that is
    then framed and normalized, so frames of a patient differ by beat phase,
    rhythm jitter, baseline wander and noise.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    labels = rng.permutation(np.arange(config.num_patients) % config.num_classes)
    patients = [_draw_patient(rng, int(c)) for c in labels]

    n_stream = config.frames_per_patient * FRAME_LEN
    samples, pids, leads, labs = [], [], [], []
    for pid, patient in enumerate(patients):
        for lead in config.leads:
            stream = _render_stream(patient, lead, n_stream, config.noise_level, rng)
            frames = frame_and_normalize(stream)
            samples.extend(frames)
            pids += [pid] * len(frames)
            leads += [lead] * len(frames)
            labs += [patient.label] * len(frames)
    return EcgDataset(
        np.asarray(samples, dtype=np.float32),
        np.asarray(pids, dtype=np.uint32),
        np.asarray(leads, dtype=np.uint8),
        np.asarray(labs, dtype=np.int64),
        config.num_classes,
    )


# -- splits ----------------------------------------------------------------


def split_counts(num_patients: int, ratios=(0.6, 0.2, 0.2)) -> tuple[int, int, int]:
    n_val = int(np.floor(ratios[1] * num_patients + 0.5))
    n_test = int(np.floor(ratios[2] * num_patients + 0.5))
    return num_patients - n_val - n_test, n_val, n_test


def patient_split(
    dataset: EcgDataset, ratios: tuple[float, float, float] = (0.6, 0.2, 0.2), seed: int = 0
) -> tuple[EcgDataset, EcgDataset, EcgDataset]:
    """Shuffle patients by seed and partition them; frames follow their patient."""
    if dataset.split_tag != "unsplit":
        raise DataError(f"dataset is already split ({dataset.split_tag})")
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    patients = dataset.patients
    if len(patients) < 3:
        raise DataError(f"need at least 3 patients to split, got {len(patients)}")
    order = np.random.default_rng(seed).permutation(patients)
    n_train, n_val, _ = split_counts(len(patients), ratios)
    groups = (order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :])
    return tuple(
        dataset.subset(np.isin(dataset.patient_ids, g), tag)
        for g, tag in zip(groups, ("train", "validation", "test"))
    )


# -- serialization ---------------------------------------------------------


def dataset_to_bytes(dataset: EcgDataset) -> bytes:
    n, frame_len = dataset.samples.shape
    if frame_len >= 2**16 or dataset.num_classes >= 2**16:
        raise DataError("frame length and class count must fit in u16")
    records = np.zeros(n, dtype=_record_dtype(frame_len))
    records["patient_id"] = dataset.patient_ids
    records["lead_id"] = dataset.lead_ids
    records["label"] = dataset.labels
    records["samples"] = dataset.samples
    return _HEADER.pack(MAGIC, VERSION, n, dataset.num_classes, frame_len) + records.tobytes()


def dataset_from_bytes(buf: bytes, split_tag: str = "unsplit") -> EcgDataset:
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} of {_HEADER.size} bytes", len(buf))
    magic, version, n, num_classes, frame_len = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if num_classes < 1:
        raise FormatError("num_classes must be >= 1", 10)
    dtype = _record_dtype(frame_len)
    expected = _HEADER.size + n * dtype.itemsize
    if len(buf) < expected:
        complete = (len(buf) - _HEADER.size) // dtype.itemsize
        raise FormatError(
            f"truncated file: record {complete} of {n} incomplete", _HEADER.size + complete * dtype.itemsize
        )
    if len(buf) > expected:
        raise FormatError(f"{len(buf) - expected} trailing bytes after {n} records", expected)
    if n and frame_len != FRAME_LEN:
        raise ValidationError(f"record 0: frame length {frame_len} != {FRAME_LEN}")
    records = np.frombuffer(buf, dtype=dtype, count=n, offset=_HEADER.size)
    samples = np.array(records["samples"], dtype=np.float32).reshape(n, frame_len)
    labels = records["label"].astype(np.int64)
    bad_label = np.flatnonzero(labels >= num_classes)
    if bad_label.size:
        i = int(bad_label[0])
        raise ValidationError(f"record {i}: label {labels[i]} outside [0, {num_classes})")
    bad = np.flatnonzero(~np.all(np.isfinite(samples) & (samples >= 0) & (samples <= 1), axis=1))
    if bad.size:
        raise ValidationError(f"record {int(bad[0])}: samples outside [0, 1]")
    return EcgDataset(
        samples,
        records["patient_id"].astype(np.uint32),
        records["lead_id"].astype(np.uint8),
        labels,
        int(num_classes),
        split_tag,
    )


def save_dataset(dataset: EcgDataset, path: str | Path) -> None:
    Path(path).write_bytes(dataset_to_bytes(dataset))


def load_dataset(path: str | Path, split_tag: str = "unsplit") -> EcgDataset:
    return dataset_from_bytes(Path(path).read_bytes(), split_tag)


def export_csv(dataset: EcgDataset, path: str | Path) -> None:
    """One row per frame: patient_id, lead_id, label, s0 ... s{L-1}."""
    frame_len = dataset.samples.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "lead_id", "label"] + [f"s{i}" for i in range(frame_len)])
        for fr in dataset:
            w.writerow([fr.patient_id, fr.lead_id, fr.label] + [format(float(v), ".9g") for v in fr.samples])
