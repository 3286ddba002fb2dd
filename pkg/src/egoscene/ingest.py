"""Reading raw per-shift streams and turning them into normalized segments.

Covers feature/RSSI/room-map/mask CSV I/O, strongest-beacon localization,
segment mining, per-participant mean normalization, and foreground masking.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .datamodel import (
    FRAME_HOP_MS,
    NUM_FEATURES,
    SEGMENT_FRAMES,
    FeatureStream,
    ParticipantMeta,
    SceneLabel,
    SceneSequence,
    Segment,
)

log = logging.getLogger(__name__)

DEFAULT_BUCKET_MS = 60_000
IGNORE = "ignore"
FEATURE_HEADER = ["ts_ms"] + [f"f{i:03d}" for i in range(NUM_FEATURES)]


class IngestError(ValueError):
    """Malformed or inconsistent input data."""


class RoomMapError(IngestError):
    pass


@dataclass(frozen=True)
class RssiRecord:
    ts_ms: int
    room_id: str
    rssi_dbm: float

    def __post_init__(self):
        if not self.room_id:
            raise IngestError("RSSI record with empty room_id")
        if not math.isfinite(self.rssi_dbm):
            raise IngestError(f"non-finite RSSI at ts={self.ts_ms}")


@dataclass(frozen=True)
class RoomMap:
    """room_id -> scene, or ``None`` for rooms explicitly marked ignore."""

    entries: dict[str, SceneLabel | None]

    def scene_of(self, room_id: str) -> SceneLabel | None:
        return self.entries[room_id]


@dataclass(frozen=True)
class FgMask:
    intervals: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        ivs = tuple((int(a), int(b)) for a, b in self.intervals)
        prev_end = None
        for a, b in ivs:
            if b <= a:
                raise IngestError(f"empty or reversed mask interval [{a}, {b})")
            if prev_end is not None and a < prev_end:
                raise IngestError(f"mask intervals overlap or are unordered at [{a}, {b})")
            prev_end = b
        object.__setattr__(self, "intervals", ivs)

    def overlap_ms(self, start: int, end: int) -> int:
        total = 0
        for a, b in self.intervals:
            if a >= end:
                break
            total += max(0, min(b, end) - max(a, start))
        return total


@dataclass
class MiningReport:
    emitted: int = 0
    skipped: int = 0
    per_class: dict[str, int] = field(default_factory=lambda: {s.code: 0 for s in SceneLabel})

    def merge(self, other: "MiningReport") -> None:
        self.emitted += other.emitted
        self.skipped += other.skipped
        for k, v in other.per_class.items():
            self.per_class[k] += v


# ---------------------------------------------------------------- CSV readers


def _open_csv(path: Path):
    path = Path(path)
    if not path.exists():
        raise IngestError(f"{path}: file not found")
    return path.open("r", encoding="utf-8", newline="")


def _check_header(path, header, expected):
    if header != expected:
        raise IngestError(f"{path}: expected header {','.join(expected[:4])}..., got {header[:4]}")


def read_feature_stream(path, participant_id: str | None = None, shift_id: str | None = None) -> FeatureStream:
    """Parse a feature CSV (``ts_ms,f000..f124``) into a validated stream.

    Participant and shift default to the ``<participant>/<shift>/features.csv``
    directory names.
    """
    path = Path(path)
    participant_id = participant_id or path.parent.parent.name
    shift_id = shift_id or path.parent.name
    with _open_csv(path) as fh:
        text = fh.read()
    lines = text.split("\n")
    header = lines[0].rstrip("\r").split(",")
    _check_header(path, header, FEATURE_HEADER)
    body = [ln for ln in lines[1:] if ln.strip()]
    ts = np.empty(len(body), dtype=np.int64)
    values = np.empty((len(body), NUM_FEATURES), dtype=np.float64)
    for i, line in enumerate(body):
        lineno = i + 2
        cells = line.rstrip("\r").split(",")
        if len(cells) != NUM_FEATURES + 1:
            raise IngestError(f"{path}:{lineno}: expected {NUM_FEATURES + 1} columns, got {len(cells)}")
        try:
            ts[i] = int(cells[0])
            row = np.array(cells[1:], dtype=np.float64)
        except ValueError as exc:
            raise IngestError(f"{path}:{lineno}: unparseable value ({exc})") from None
        if not np.all(np.isfinite(row)):
            raise IngestError(f"{path}:{lineno}: non-finite feature value")
        values[i] = row
        if i and ts[i] <= ts[i - 1]:
            raise IngestError(f"{path}:{lineno}: timestamps not strictly increasing ({ts[i - 1]} -> {ts[i]})")
    stream = FeatureStream(participant_id, shift_id, ts, values)
    _warn_on_hop(stream, path)
    return stream


def _warn_on_hop(stream: FeatureStream, path) -> None:
    if len(stream) < 2:
        return
    gap = float(np.median(np.diff(stream.ts_ms)))
    if abs(gap - FRAME_HOP_MS) > 0.2 * FRAME_HOP_MS:
        log.warning("%s: median frame gap %.1f ms deviates from %d ms hop", path, gap, FRAME_HOP_MS)


def write_feature_stream(stream: FeatureStream, path, fmt: str = "%.6g") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    buf.write(",".join(FEATURE_HEADER) + "\n")
    row_fmt = "%d," + ",".join([fmt] * NUM_FEATURES) + "\n"
    for t, row in zip(stream.ts_ms, stream.values):
        buf.write(row_fmt % (t, *row))
    _atomic_write(path, buf.getvalue())


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    tmp.replace(path)


def _read_rows(path, expected_header):
    with _open_csv(path) as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError(f"{path}: empty file") from None
        _check_header(path, header, expected_header)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected_header):
                raise IngestError(f"{path}:{lineno}: expected {len(expected_header)} columns, got {len(row)}")
            yield lineno, row


def read_rssi(path) -> list[RssiRecord]:
    out = []
    for lineno, (ts, room, rssi) in _read_rows(path, ["ts_ms", "room_id", "rssi_dbm"]):
        try:
            out.append(RssiRecord(int(ts), room, float(rssi)))
        except ValueError as exc:
            raise IngestError(f"{path}:{lineno}: {exc}") from None
    return out


def write_rssi(records: Iterable[RssiRecord], path) -> None:
    lines = ["ts_ms,room_id,rssi_dbm"] + [f"{r.ts_ms},{r.room_id},{r.rssi_dbm!r}" for r in records]
    _atomic_write(Path(path), "\n".join(lines) + "\n")


def read_room_map(path) -> RoomMap:
    entries: dict[str, SceneLabel | None] = {}
    for lineno, (room, scene) in _read_rows(path, ["room_id", "scene"]):
        if room in entries:
            raise RoomMapError(f"{path}:{lineno}: duplicate room {room!r}")
        try:
            entries[room] = None if scene == IGNORE else SceneLabel.from_code(scene)
        except ValueError as exc:
            raise RoomMapError(f"{path}:{lineno}: {exc}") from None
    return RoomMap(entries)


def write_room_map(room_map: RoomMap, path) -> None:
    lines = ["room_id,scene"] + [
        f"{room},{IGNORE if scene is None else scene.code}" for room, scene in room_map.entries.items()
    ]
    _atomic_write(Path(path), "\n".join(lines) + "\n")


def read_fg_mask(path) -> FgMask:
    ivs = []
    for lineno, (a, b) in _read_rows(path, ["start_ms", "end_ms"]):
        try:
            ivs.append((int(a), int(b)))
        except ValueError as exc:
            raise IngestError(f"{path}:{lineno}: {exc}") from None
    return FgMask(tuple(ivs))


def write_fg_mask(mask: FgMask, path) -> None:
    lines = ["start_ms,end_ms"] + [f"{a},{b}" for a, b in mask.intervals]
    _atomic_write(Path(path), "\n".join(lines) + "\n")


def read_participants(path) -> dict[str, ParticipantMeta]:
    meta: dict[str, ParticipantMeta] = {}
    for lineno, (pid, shift, role) in _read_rows(path, ["participant_id", "shift", "role"]):
        if pid in meta:
            raise IngestError(f"{path}:{lineno}: duplicate participant {pid!r}")
        try:
            meta[pid] = ParticipantMeta(pid, shift, role)
        except ValueError as exc:
            raise IngestError(f"{path}:{lineno}: {exc}") from None
    return meta


def write_participants(meta: Iterable[ParticipantMeta], path) -> None:
    lines = ["participant_id,shift,role"] + [f"{m.participant_id},{m.shift.value},{m.role.value}" for m in meta]
    _atomic_write(Path(path), "\n".join(lines) + "\n")


def write_scene_sequence(seq: SceneSequence, path) -> None:
    lines = ["ts_ms,scene"] + [f"{ts},{lab.code}" for ts, lab in seq.entries]
    _atomic_write(Path(path), "\n".join(lines) + "\n")


def read_scene_sequence(path, participant_id: str, shift_id: str = "") -> SceneSequence:
    entries = [(int(ts), SceneLabel.from_code(s)) for _, (ts, s) in _read_rows(path, ["ts_ms", "scene"])]
    return SceneSequence(participant_id, tuple(entries), shift_id)


# ---------------------------------------------------------------- localization


def localize(
    records: Sequence[RssiRecord],
    room_map: RoomMap,
    bucket_ms: int = DEFAULT_BUCKET_MS,
    participant_id: str = "",
    shift_id: str = "",
) -> SceneSequence:
    """Assign each time bucket the scene of its strongest beacon.

    Ties on RSSI go to the earlier record, then to the smaller room_id, so the
    result does not depend on record order. Buckets won by an ignored room are
    dropped.
    """
    if not records:
        raise IngestError("no RSSI records to localize")
    if bucket_ms <= 0:
        raise IngestError("bucket_ms must be positive")
    unknown = sorted({r.room_id for r in records} - set(room_map.entries))
    if unknown:
        raise RoomMapError(f"rooms missing from room map: {', '.join(unknown)}")
    best: dict[int, RssiRecord] = {}
    for rec in records:
        bucket = (rec.ts_ms // bucket_ms) * bucket_ms
        cur = best.get(bucket)
        if cur is None or (-rec.rssi_dbm, rec.ts_ms, rec.room_id) < (-cur.rssi_dbm, cur.ts_ms, cur.room_id):
            best[bucket] = rec
    entries = []
    for bucket in sorted(best):
        scene = room_map.scene_of(best[bucket].room_id)
        if scene is not None:
            entries.append((bucket, scene))
    if not entries:
        raise IngestError("every bucket was won by an ignored room")
    return SceneSequence(participant_id, tuple(entries), shift_id)


# ---------------------------------------------------------------- mining


def mine_segments(
    features: FeatureStream,
    labels: SceneSequence,
    L: int = SEGMENT_FRAMES,
    bucket_ms: int = DEFAULT_BUCKET_MS,
    report: MiningReport | None = None,
) -> list[Segment]:
    """Cut one ``L``-frame window per label entry, starting at the label time.

    Frames are taken from ``[t, t + bucket_ms)``; an entry whose bucket holds
    fewer than ``L`` frames is skipped and counted in ``report``.
    """
    if features.participant_id != labels.participant_id and labels.participant_id:
        raise IngestError(
            f"features of {features.participant_id!r} paired with labels of {labels.participant_id!r}"
        )
    report = report if report is not None else MiningReport()
    ts = features.ts_ms
    out = []
    last_end_idx = 0
    for t, scene in labels.entries:
        lo = int(np.searchsorted(ts, t, side="left"))
        hi = int(np.searchsorted(ts, t + bucket_ms, side="left"))
        lo = max(lo, last_end_idx)
        if hi - lo < L:
            report.skipped += 1
            continue
        window = features.values[lo : lo + L]
        end_ts = int(ts[lo + L - 1]) + FRAME_HOP_MS
        out.append(
            Segment(
                participant_id=features.participant_id,
                start_ts_ms=int(ts[lo]),
                matrix=window,
                label=scene,
                shift_id=features.shift_id,
                end_ts_ms=end_ts,
            )
        )
        last_end_idx = lo + L
        report.emitted += 1
        report.per_class[scene.code] += 1
    return out


def participant_mean(streams: Sequence[FeatureStream]) -> np.ndarray:
    """Per-dimension mean over every frame of every stream."""
    total = sum(len(s) for s in streams)
    if total == 0:
        raise IngestError("participant has no feature frames")
    acc = np.zeros(NUM_FEATURES, dtype=np.float64)
    for s in streams:
        acc += s.values.sum(axis=0, dtype=np.float64)
    return acc / total


def normalize_segments(segments: Sequence[Segment], mean: np.ndarray) -> list[Segment]:
    mean = np.asarray(mean, dtype=np.float64)
    if mean.shape != (NUM_FEATURES,):
        raise IngestError(f"mean vector must have length {NUM_FEATURES}, got {mean.shape}")
    return [replace(seg, matrix=(seg.matrix - mean).astype(seg.matrix.dtype)) for seg in segments]


def apply_fg_mask(segments: Sequence[Segment], mask: FgMask, mode: str = "full") -> list[Segment]:
    """Flag foreground-active segments; in ``fg_active`` mode keep only those.

    A segment counts as foreground-active when mask intervals cover at least
    half of its time span.
    """
    if mode not in ("full", "fg_active"):
        raise ValueError(f"unknown mode {mode!r}")
    out = []
    for seg in segments:
        active = 2 * mask.overlap_ms(seg.start_ts_ms, seg.end_ts_ms) >= seg.duration_ms
        if mode == "full" or active:
            out.append(replace(seg, fg_active=active))
    return out


# ---------------------------------------------------------------- dataset layout


@dataclass
class MinedParticipant:
    meta: ParticipantMeta
    segments: list[Segment]
    sequences: list[SceneSequence]


def discover_participants(data_root) -> dict[str, ParticipantMeta]:
    data_root = Path(data_root)
    meta_path = data_root / "participants.csv"
    if not meta_path.exists():
        raise IngestError(f"no participants found in {data_root} (participants.csv missing)")
    meta = read_participants(meta_path)
    if not meta:
        raise IngestError(f"{data_root}: no participants found")
    return meta


def mine_participant(
    data_root,
    meta: ParticipantMeta,
    room_map: RoomMap,
    mode: str = "full",
    L: int = SEGMENT_FRAMES,
    bucket_ms: int = DEFAULT_BUCKET_MS,
    report: MiningReport | None = None,
) -> MinedParticipant:
    """Run the full ingestion chain for one participant's shift directories."""
    pdir = Path(data_root) / meta.participant_id
    if not pdir.is_dir():
        raise IngestError(f"{pdir}: participant directory missing")
    shift_dirs = sorted(p for p in pdir.iterdir() if p.is_dir())
    streams, sequences, masks = [], [], []
    for sdir in shift_dirs:
        stream = read_feature_stream(sdir / "features.csv", meta.participant_id, sdir.name)
        seq = localize(read_rssi(sdir / "rssi.csv"), room_map, bucket_ms, meta.participant_id, sdir.name)
        mask_path = sdir / "fgmask.csv"
        masks.append(read_fg_mask(mask_path) if mask_path.exists() else FgMask())
        streams.append(stream)
        sequences.append(seq)
    mean = participant_mean(streams)
    segments: list[Segment] = []
    for stream, seq, mask in zip(streams, sequences, masks):
        local = MiningReport()
        raw = mine_segments(stream, seq, L, bucket_ms, local)
        kept = apply_fg_mask(normalize_segments(raw, mean), mask, mode)
        if report is not None:
            report.skipped += local.skipped
            report.emitted += len(kept)
            for seg in kept:
                report.per_class[seg.label.code] += 1
        segments.extend(kept)
    return MinedParticipant(meta, segments, sequences)
