"""Domain types shared across the pipeline.

All containers are frozen dataclasses; numpy payloads are made read-only on
construction so they can be shared between workers without copying.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

NUM_FEATURES = 125
SEGMENT_FRAMES = 500
FRAME_HOP_MS = 10
NUM_CLASSES = 4


class SceneLabel(enum.IntEnum):
    """Acoustic scene classes, in canonical index order."""

    NS = 0
    PAT = 1
    MED = 2
    LOUNGE = 3

    @property
    def code(self) -> str:
        return self.name.lower()

    @classmethod
    def from_code(cls, code: str) -> "SceneLabel":
        try:
            return cls[code.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown scene label {code!r}") from None


class Shift(str, enum.Enum):
    DAY = "day"
    NIGHT = "night"


class Role(str, enum.Enum):
    NURSING = "nursing"
    NON_NURSING = "non_nursing"


def _frozen_array(values, shape=None, dtype=None) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    if shape is not None and arr.shape != shape:
        raise ValueError(f"expected shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class FeatureFrame:
    ts_ms: int
    values: np.ndarray

    def __post_init__(self):
        values = _frozen_array(self.values, dtype=np.float64)
        if values.shape != (NUM_FEATURES,):
            raise ValueError(f"feature frame must have {NUM_FEATURES} values, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError(f"non-finite feature value at ts={self.ts_ms}")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True, eq=False)
class FeatureStream:
    """Time-ordered feature frames of one participant-shift.

    Frames are held as a ``(n, F)`` matrix plus a parallel timestamp vector
    rather than a list of ``FeatureFrame`` objects; ``frames()`` materializes
    the per-frame view when needed.
    """

    participant_id: str
    shift_id: str
    ts_ms: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        ts = _frozen_array(self.ts_ms, dtype=np.int64)
        values = np.asarray(self.values)
        if values.dtype not in (np.float32, np.float64):
            values = values.astype(np.float64)
        values = _frozen_array(values)
        if ts.ndim != 1 or values.ndim != 2 or values.shape != (ts.shape[0], NUM_FEATURES):
            raise ValueError(
                f"stream needs ts shape (n,) and values shape (n, {NUM_FEATURES}); "
                f"got {ts.shape} and {values.shape}"
            )
        if ts.size > 1 and np.any(np.diff(ts) <= 0):
            bad = int(np.argmax(np.diff(ts) <= 0)) + 1
            raise ValueError(f"frame timestamps not strictly increasing at index {bad}")
        if not np.all(np.isfinite(values)):
            raise ValueError("non-finite feature values in stream")
        object.__setattr__(self, "ts_ms", ts)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return int(self.ts_ms.shape[0])

    def frames(self) -> list[FeatureFrame]:
        return [FeatureFrame(int(t), v) for t, v in zip(self.ts_ms, self.values)]

    def __eq__(self, other):
        if not isinstance(other, FeatureStream):
            return NotImplemented
        return (
            self.participant_id == other.participant_id
            and self.shift_id == other.shift_id
            and np.array_equal(self.ts_ms, other.ts_ms)
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True, eq=False)
class Segment:
    """One ``L x F`` training unit with its provenance."""

    participant_id: str
    start_ts_ms: int
    matrix: np.ndarray
    label: SceneLabel | None = None
    fg_active: bool = False
    shift_id: str = ""
    end_ts_ms: int | None = None

    def __post_init__(self):
        matrix = np.asarray(self.matrix)
        if matrix.dtype not in (np.float32, np.float64):
            matrix = matrix.astype(np.float64)
        matrix = _frozen_array(matrix)
        if matrix.ndim != 2 or matrix.shape[1] != NUM_FEATURES:
            raise ValueError(f"segment matrix must be (L, {NUM_FEATURES}), got {matrix.shape}")
        object.__setattr__(self, "matrix", matrix)
        if self.label is not None:
            object.__setattr__(self, "label", SceneLabel(self.label))
        if self.end_ts_ms is None:
            object.__setattr__(self, "end_ts_ms", self.start_ts_ms + matrix.shape[0] * FRAME_HOP_MS)

    def __eq__(self, other):
        if not isinstance(other, Segment):
            return NotImplemented
        return (
            self.participant_id == other.participant_id
            and self.shift_id == other.shift_id
            and self.start_ts_ms == other.start_ts_ms
            and self.end_ts_ms == other.end_ts_ms
            and self.label == other.label
            and self.fg_active == other.fg_active
            and self.matrix.dtype == other.matrix.dtype
            and np.array_equal(self.matrix, other.matrix)
        )

    @property
    def duration_ms(self) -> int:
        return int(self.end_ts_ms - self.start_ts_ms)


@dataclass(frozen=True)
class SceneSequence:
    participant_id: str
    entries: tuple[tuple[int, SceneLabel], ...]
    shift_id: str = ""

    def __post_init__(self):
        entries = tuple((int(ts), SceneLabel(lab)) for ts, lab in self.entries)
        if not entries:
            raise ValueError("scene sequence must have at least one entry")
        for (a, _), (b, _) in zip(entries, entries[1:]):
            if b <= a:
                raise ValueError(f"scene sequence timestamps not strictly increasing ({a} -> {b})")
        object.__setattr__(self, "entries", entries)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labels(self) -> list[SceneLabel]:
        return [lab for _, lab in self.entries]

    @property
    def timestamps(self) -> list[int]:
        return [ts for ts, _ in self.entries]


@dataclass(frozen=True)
class ParticipantMeta:
    participant_id: str
    shift: Shift
    role: Role

    def __post_init__(self):
        object.__setattr__(self, "shift", Shift(self.shift))
        object.__setattr__(self, "role", Role(self.role))


@dataclass(frozen=True)
class ParticipantRecord:
    meta: ParticipantMeta
    segments: tuple[Segment, ...] = ()
    sequences: tuple[SceneSequence, ...] = ()


@dataclass(frozen=True)
class Corpus:
    participants: tuple[ParticipantRecord, ...] = field(default_factory=tuple)
    require_labels: bool = False

    def __post_init__(self):
        records = tuple(self.participants)
        if not records:
            raise ValueError("corpus needs at least one participant")
        ids = [r.meta.participant_id for r in records]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate participant ids: {dupes}")
        known = set(ids)
        for rec in records:
            for seg in rec.segments:
                if seg.participant_id not in known:
                    raise ValueError(f"segment references unknown participant {seg.participant_id!r}")
                if seg.participant_id != rec.meta.participant_id:
                    raise ValueError(
                        f"segment of {seg.participant_id!r} filed under {rec.meta.participant_id!r}"
                    )
                if self.require_labels and seg.label is None:
                    raise ValueError(
                        f"unlabeled segment ({seg.participant_id}, {seg.start_ts_ms}) in training corpus"
                    )
        object.__setattr__(self, "participants", records)

    @property
    def participant_ids(self) -> list[str]:
        return [r.meta.participant_id for r in self.participants]

    @property
    def meta(self) -> dict[str, ParticipantMeta]:
        return {r.meta.participant_id: r.meta for r in self.participants}

    def segments(self, participant_ids: Iterable[str] | None = None) -> list[Segment]:
        wanted = None if participant_ids is None else set(participant_ids)
        out: list[Segment] = []
        for rec in self.participants:
            if wanted is None or rec.meta.participant_id in wanted:
                out.extend(rec.segments)
        return out

    @classmethod
    def from_segments(
        cls, segments: Sequence[Segment], meta: dict[str, ParticipantMeta], require_labels: bool = False
    ) -> "Corpus":
        grouped: dict[str, list[Segment]] = {pid: [] for pid in meta}
        for seg in segments:
            if seg.participant_id not in grouped:
                raise ValueError(f"segment references unknown participant {seg.participant_id!r}")
            grouped[seg.participant_id].append(seg)
        return cls(
            tuple(ParticipantRecord(meta[pid], tuple(segs)) for pid, segs in grouped.items()),
            require_labels=require_labels,
        )


def label_histogram(labels: Iterable[SceneLabel | int | None]) -> dict[SceneLabel, int]:
    counts = Counter(SceneLabel(lab) for lab in labels if lab is not None)
    if not counts:
        raise ValueError("no labeled segments to histogram")
    return {lab: counts.get(lab, 0) for lab in SceneLabel}


def class_histogram(corpus: Corpus) -> dict[SceneLabel, int]:
    """Count labeled segments per scene class (all classes present as keys)."""
    return label_histogram(seg.label for seg in corpus.segments())


def majority_fraction(hist: dict[SceneLabel, int]) -> float:
    total = sum(hist.values())
    return max(hist.values()) / total
