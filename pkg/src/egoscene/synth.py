"""Synthetic corpora with known ground truth.

Each participant-shift is a Markov walk over scenes at one-minute steps.
Every step yields RSSI pings (the occupied room strongest), a burst of
feature frames and, sometimes, a foreground-speech interval. Two feature
models are available:

* ``stationary``: frames are class mean + participant offset + white noise,
  so segment means separate the classes.
* ``temporal``: every class has the same (zero) mean; a subset of features
  carries a sinusoid whose period depends on the class and whose phase
  (shared by those features) is random per step. Only frame order distinguishes the classes.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ingest
from .datamodel import (
    FRAME_HOP_MS,
    NUM_CLASSES,
    NUM_FEATURES,
    SEGMENT_FRAMES,
    FeatureStream,
    ParticipantMeta,
    Role,
    SceneLabel,
    Shift,
)
from .kernels import make_rng

PAPER_PRIORS = (0.46, 0.40, 0.04, 0.10)
UNIFORM_PRIORS = (0.25, 0.25, 0.25, 0.25)
STEP_MS = 60_000
BASE_TS_MS = 1_546_300_800_000  # 2019-01-01T00:00:00Z


@dataclass(frozen=True)
class SynthSpec:
    num_participants: int = 12
    shifts_per_participant: int = 1
    steps_per_shift: int = 20
    priors: tuple[float, ...] = PAPER_PRIORS
    pattern: str = "stationary"
    class_mean_scale: float = 1.0
    noise_std: float = 1.0
    offset_scale: float = 0.5
    mobility: dict = field(default_factory=lambda: {"nursing": 0.5, "non_nursing": 0.1})
    nursing_fraction: float = 0.5
    night_fraction: float = 0.5
    fg_active_fraction: float = 0.35
    frames_per_step: int = SEGMENT_FRAMES
    short_step_prob: float = 0.0
    rooms_per_scene: int = 2
    pings_per_step: int = 3
    rssi_margin_db: float = 10.0
    noisy_rssi: bool = False
    temporal_periods: tuple[int, ...] = (3, 5, 8, 13)
    temporal_amplitude: float = 1.5
    temporal_features: int = 24
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "priors", tuple(float(p) for p in self.priors))
        object.__setattr__(self, "temporal_periods", tuple(int(p) for p in self.temporal_periods))
        object.__setattr__(self, "mobility", dict(self.mobility))
        if len(self.priors) != NUM_CLASSES or abs(sum(self.priors) - 1.0) > 1e-9 or min(self.priors) < 0:
            raise ValueError(f"priors must be {NUM_CLASSES} non-negative values summing to 1")
        if self.pattern not in ("stationary", "temporal"):
            raise ValueError(f"unknown pattern {self.pattern!r}")
        for name in ("noise_std",):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.class_mean_scale < 0 or self.offset_scale < 0:
            raise ValueError("scales must be non-negative")
        if set(self.mobility) != {r.value for r in Role}:
            raise ValueError(f"mobility needs rates for {[r.value for r in Role]}")
        for role, rate in self.mobility.items():
            leave = _leave_rates(self.priors, rate)
            if np.any(leave > 1):
                raise ValueError(f"mobility {rate} for {role} too high for these priors")
        if self.num_participants < 1 or self.steps_per_shift < 1 or self.shifts_per_participant < 1:
            raise ValueError("participant, shift and step counts must be positive")
        if self.frames_per_step * FRAME_HOP_MS > STEP_MS:
            raise ValueError("frames_per_step does not fit in one step")
        if self.pattern == "temporal" and len(self.temporal_periods) != NUM_CLASSES:
            raise ValueError("temporal pattern needs one period per class")

    def to_json(self) -> dict:
        d = asdict(self)
        d["priors"] = list(self.priors)
        d["temporal_periods"] = list(self.temporal_periods)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SynthSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synth spec keys: {sorted(unknown)}")
        return cls(**d)


def temporal_spec(**overrides) -> SynthSpec:
    base = dict(pattern="temporal", priors=UNIFORM_PRIORS, class_mean_scale=0.0)
    return SynthSpec(**{**base, **overrides})


def _leave_rates(priors, rate) -> np.ndarray:
    """Per-scene leave probabilities giving mean change rate ``rate``.

    Leaving scene ``i`` with probability ``rate * (1 - p_i) / S`` and moving to
    ``j != i`` with probability ``p_j / (1 - p_i)`` (``S = 1 - sum p^2``) has the
    priors as stationary distribution and changes scene with probability
    ``rate`` per step on average.
    """
    p = np.asarray(priors, dtype=np.float64)
    s = 1.0 - float(np.sum(p * p))
    if s <= 0 or rate == 0:
        return np.zeros_like(p)
    return rate * (1.0 - p) / s


@dataclass
class ShiftData:
    meta: ParticipantMeta
    shift_id: str
    stream: FeatureStream
    rssi: list[ingest.RssiRecord]
    mask: ingest.FgMask
    ledger: list[tuple[int, SceneLabel]]


@dataclass
class SynthCorpus:
    spec: SynthSpec
    meta: dict[str, ParticipantMeta]
    shifts: list[ShiftData]
    room_map: ingest.RoomMap
    class_means: np.ndarray

    def ledger_rows(self):
        for sd in self.shifts:
            for ts, scene in sd.ledger:
                yield sd.meta.participant_id, sd.shift_id, ts, scene


def room_map_for(spec: SynthSpec) -> ingest.RoomMap:
    entries: dict[str, SceneLabel | None] = {}
    for scene in SceneLabel:
        for r in range(spec.rooms_per_scene):
            entries[f"{scene.code}_{r}"] = scene
    entries["hall_0"] = None
    return ingest.RoomMap(entries)


def _trajectory(rng, priors, rate, steps) -> list[SceneLabel]:
    p = np.asarray(priors)
    leave = _leave_rates(priors, rate)
    state = int(rng.choice(NUM_CLASSES, p=p))
    out = [SceneLabel(state)]
    for _ in range(steps - 1):
        if rng.random() < leave[state]:
            q = p.copy()
            q[state] = 0.0
            state = int(rng.choice(NUM_CLASSES, p=q / q.sum()))
        out.append(SceneLabel(state))
    return out


def _rssi_for_step(rng, spec, rooms_by_scene, all_rooms, scene, t0):
    room = rooms_by_scene[scene][int(rng.integers(len(rooms_by_scene[scene])))]
    records = []
    for _ in range(spec.pings_per_step):
        ts = t0 + int(rng.integers(0, STEP_MS // 1000)) * 1000
        if spec.noisy_rssi:
            strong = float(rng.integers(-55, -44))
            records.append(ingest.RssiRecord(ts, room, strong))
            for other in all_rooms:
                if other != room:
                    # integer readings tie often among rivals, never with the trajectory room
                    records.append(ingest.RssiRecord(ts, other, float(rng.integers(int(strong) - 4, int(strong)))))
        else:
            strong = round(float(rng.uniform(-55.0, -45.0)), 1)
            records.append(ingest.RssiRecord(ts, room, strong))
            for other in all_rooms:
                if other != room:
                    weak = round(float(rng.uniform(-90.0, strong - spec.rssi_margin_db)), 1)
                    records.append(ingest.RssiRecord(ts, other, min(weak, strong - spec.rssi_margin_db)))
    records.sort(key=lambda r: (r.ts_ms, r.room_id))
    return records


def _step_frames(rng, spec, class_means, offset, scene, n):
    noise = rng.standard_normal((n, NUM_FEATURES)) * spec.noise_std
    frames = class_means[scene] + offset + noise
    if spec.pattern == "temporal":
        period = spec.temporal_periods[scene]
        k = np.arange(n)[:, None]
        phase = rng.uniform(0, 2 * np.pi)
        frames[:, : spec.temporal_features] += spec.temporal_amplitude * np.sin(2 * np.pi * k / period + phase)
    return frames


def synthesize(spec: SynthSpec) -> SynthCorpus:
    """Build the whole synthetic corpus in memory."""
    rng_means = make_rng(spec.seed, "class_means")
    class_means = rng_means.standard_normal((NUM_CLASSES, NUM_FEATURES)) * spec.class_mean_scale
    room_map = room_map_for(spec)
    rooms_by_scene = {s: [r for r, v in room_map.entries.items() if v == s] for s in SceneLabel}
    all_rooms = list(room_map.entries)
    meta: dict[str, ParticipantMeta] = {}
    shifts: list[ShiftData] = []
    n_nursing = int(round(spec.nursing_fraction * spec.num_participants))
    n_night = int(round(spec.night_fraction * spec.num_participants))
    for i in range(spec.num_participants):
        pid = f"p{i:03d}"
        rng = make_rng(spec.seed, "participant", i)
        role = Role.NURSING if i % spec.num_participants < n_nursing else Role.NON_NURSING
        # interleave shifts so both roles are spread over day and night
        shift = Shift.NIGHT if (i * 7919) % spec.num_participants < n_night else Shift.DAY
        meta[pid] = ParticipantMeta(pid, shift, role)
        offset = rng.standard_normal(NUM_FEATURES) * spec.offset_scale
        rate = spec.mobility[role.value]
        for s in range(spec.shifts_per_participant):
            shift_id = f"s{s:02d}"
            t_shift = BASE_TS_MS + (i * spec.shifts_per_participant + s) * 86_400_000
            scenes = _trajectory(rng, spec.priors, rate, spec.steps_per_shift)
            ts_parts, val_parts, rssi, ivs, ledger = [], [], [], [], []
            for step, scene in enumerate(scenes):
                t0 = t_shift + step * STEP_MS
                ledger.append((t0, scene))
                rssi += _rssi_for_step(rng, spec, rooms_by_scene, all_rooms, scene, t0)
                n = spec.frames_per_step
                if spec.short_step_prob and rng.random() < spec.short_step_prob:
                    n = int(rng.integers(1, spec.frames_per_step))
                slack = (STEP_MS // FRAME_HOP_MS) - n
                start = t0 + int(rng.integers(0, slack + 1)) * FRAME_HOP_MS
                ts_parts.append(start + FRAME_HOP_MS * np.arange(n, dtype=np.int64))
                val_parts.append(_step_frames(rng, spec, class_means, offset, scene, n).astype(np.float32))
                if rng.random() < spec.fg_active_fraction:
                    ivs.append((start, start + n * FRAME_HOP_MS))
            stream = FeatureStream(pid, shift_id, np.concatenate(ts_parts), np.concatenate(val_parts))
            shifts.append(ShiftData(meta[pid], shift_id, stream, rssi, ingest.FgMask(tuple(ivs)), ledger))
    return SynthCorpus(spec, meta, shifts, room_map, class_means)


def write_corpus(corpus: SynthCorpus, out_dir) -> Path:
    """Write the ingest directory layout plus ``ledger.csv`` and ``synthspec.json``."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    ingest.write_room_map(corpus.room_map, root / "rooms.csv")
    ingest.write_participants(corpus.meta.values(), root / "participants.csv")
    for sd in corpus.shifts:
        sdir = root / sd.meta.participant_id / sd.shift_id
        sdir.mkdir(parents=True, exist_ok=True)
        ingest.write_feature_stream(sd.stream, sdir / "features.csv")
        ingest.write_rssi(sd.rssi, sdir / "rssi.csv")
        ingest.write_fg_mask(sd.mask, sdir / "fgmask.csv")
    lines = ["participant_id,shift_id,ts_ms,scene"] + [
        f"{pid},{sid},{ts},{scene.code}" for pid, sid, ts, scene in corpus.ledger_rows()
    ]
    ingest._atomic_write(root / "ledger.csv", "\n".join(lines) + "\n")
    ingest._atomic_write(root / "synthspec.json", json.dumps(corpus.spec.to_json(), indent=2, sort_keys=True) + "\n")
    return root


def generate_corpus(spec: SynthSpec, out_dir) -> SynthCorpus:
    corpus = synthesize(spec)
    write_corpus(corpus, out_dir)
    return corpus


def generate_temporal_corpus(spec: SynthSpec | None = None, out_dir=None) -> SynthCorpus:
    spec = spec if spec is not None else temporal_spec()
    if spec.pattern != "temporal":
        raise ValueError("generate_temporal_corpus needs pattern='temporal'")
    corpus = synthesize(spec)
    if out_dir is not None:
        write_corpus(corpus, out_dir)
    return corpus


def read_ledger(path) -> list[tuple[str, str, int, SceneLabel]]:
    rows = ingest._read_rows(path, ["participant_id", "shift_id", "ts_ms", "scene"])
    return [(pid, sid, int(ts), SceneLabel.from_code(s)) for _, (pid, sid, ts, s) in rows]


def mine_in_memory(corpus: SynthCorpus, mode: str = "full", L: int = SEGMENT_FRAMES):
    """The ingest chain applied directly to in-memory streams (no CSV round trip)."""
    from .ingest import MinedParticipant

    by_pid: dict[str, list[ShiftData]] = {}
    for sd in corpus.shifts:
        by_pid.setdefault(sd.meta.participant_id, []).append(sd)
    out = []
    for pid, shift_list in by_pid.items():
        mean = ingest.participant_mean([sd.stream for sd in shift_list])
        segments, sequences = [], []
        for sd in shift_list:
            seq = ingest.localize(sd.rssi, corpus.room_map, ingest.DEFAULT_BUCKET_MS, pid, sd.shift_id)
            raw = ingest.mine_segments(sd.stream, seq, L)
            segments += ingest.apply_fg_mask(ingest.normalize_segments(raw, mean), sd.mask, mode)
            sequences.append(seq)
        out.append(MinedParticipant(corpus.meta[pid], segments, sequences))
    return out
