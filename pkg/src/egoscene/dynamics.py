"""Scene-change statistics over true and predicted scene sequences."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .datamodel import ParticipantMeta, SceneLabel, SceneSequence, Segment

SOURCES = ("true_labels", "predicted")
GROUPINGS = ("shift", "role")


class MetadataError(KeyError):
    pass


@dataclass(frozen=True)
class ChangeStats:
    participant_id: str
    shift_id: str
    delta: float
    length: int
    source: str


@dataclass(frozen=True)
class GroupSummary:
    grouping: str
    source: str
    means: dict[str, float]
    counts: dict[str, int]


def predict_sequence(model, segments: Sequence[Segment]) -> SceneSequence:
    """One prediction per segment, in input order (which must be time order)."""
    if not segments:
        raise ValueError("no segments to predict")
    starts = [s.start_ts_ms for s in segments]
    if any(b <= a for a, b in zip(starts, starts[1:])):
        raise ValueError("segments must be sorted by start time")
    x = np.stack([s.matrix for s in segments])
    pred = model.predict_batch(x)
    first = segments[0]
    return SceneSequence(first.participant_id, tuple(zip(starts, (SceneLabel(int(c)) for c in pred))), first.shift_id)


def diff_signal(seq: SceneSequence | Sequence[int]) -> list[int]:
    labels = [int(v) for v in (seq.labels if isinstance(seq, SceneSequence) else seq)]
    return [b - a for a, b in zip(labels, labels[1:])]


def normalized_changes(seq: SceneSequence | Sequence[int]) -> float:
    """Nonzero adjacent differences divided by the sequence length T.

    A length-T sequence has T-1 differences, so the maximum is (T-1)/T.
    """
    labels = seq.labels if isinstance(seq, SceneSequence) else list(seq)
    if not labels:
        raise ValueError("empty sequence")
    return sum(1 for d in diff_signal(labels) if d != 0) / len(labels)


def change_stats(seq: SceneSequence, source: str) -> ChangeStats:
    return ChangeStats(seq.participant_id, seq.shift_id, normalized_changes(seq), len(seq), source)


def _group_key(meta: ParticipantMeta, grouping: str) -> str:
    if grouping == "shift":
        return meta.shift.value
    if grouping == "role":
        return meta.role.value
    raise ValueError(f"unknown grouping {grouping!r}")


def group_means(stats: Iterable[ChangeStats], meta: dict[str, ParticipantMeta], grouping: str) -> list[GroupSummary]:
    """Per-group mean delta, one summary per source present in ``stats``.

    A participant with several shifts is first reduced to the mean of their
    shift deltas, so each participant weighs once in the group mean.
    """
    per_participant: dict[tuple[str, str], list[float]] = defaultdict(list)
    for st in stats:
        if st.participant_id not in meta:
            raise MetadataError(f"no metadata for participant {st.participant_id!r}")
        per_participant[(st.source, st.participant_id)].append(st.delta)
    out = []
    for source in sorted({src for src, _ in per_participant}, key=lambda s: SOURCES.index(s) if s in SOURCES else 99):
        members: dict[str, list[float]] = defaultdict(list)
        for (src, pid), deltas in sorted(per_participant.items()):
            if src == source:
                members[_group_key(meta[pid], grouping)].append(float(np.mean(deltas)))
        out.append(
            GroupSummary(
                grouping,
                source,
                {g: float(np.mean(v)) for g, v in sorted(members.items())},
                {g: len(v) for g, v in sorted(members.items())},
            )
        )
    return out


def histogram_deltas(deltas: Sequence[float], bins: int = 10):
    """Equal-width bins on [0, 1] (last bin closed); returns (edges, counts, mean)."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    d = np.asarray(deltas, dtype=np.float64)
    if d.size and (d.min() < 0 or d.max() > 1):
        raise ValueError("deltas must lie in [0, 1]")
    counts, edges = np.histogram(d, bins=bins, range=(0.0, 1.0))
    mean = float(d.mean()) if d.size else float("nan")
    return edges, counts, mean


def true_sequences_from_segments(segments: Sequence[Segment]) -> list[SceneSequence]:
    """Group labeled segments into per participant-shift sequences."""
    grouped: dict[tuple[str, str], list[Segment]] = defaultdict(list)
    for s in segments:
        grouped[(s.participant_id, s.shift_id)].append(s)
    out = []
    for (pid, sid), segs in sorted(grouped.items()):
        segs.sort(key=lambda s: s.start_ts_ms)
        out.append(SceneSequence(pid, tuple((s.start_ts_ms, s.label) for s in segs), sid))
    return out


def predicted_sequences(predictions: dict[tuple[str, str, int], SceneLabel]) -> list[SceneSequence]:
    grouped: dict[tuple[str, str], list[tuple[int, SceneLabel]]] = defaultdict(list)
    for (pid, sid, ts), lab in predictions.items():
        grouped[(pid, sid)].append((ts, lab))
    return [SceneSequence(pid, tuple(sorted(v)), sid) for (pid, sid), v in sorted(grouped.items())]


# ---------------------------------------------------------------- report files


def write_dynamics_csv(stats: Sequence[ChangeStats], meta: dict[str, ParticipantMeta], path) -> None:
    lines = ["participant_id,shift_id,shift,role,source,T,delta"]
    for st in sorted(stats, key=lambda s: (s.participant_id, s.shift_id, s.source)):
        m = meta.get(st.participant_id)
        if m is None:
            raise MetadataError(f"no metadata for participant {st.participant_id!r}")
        lines.append(f"{st.participant_id},{st.shift_id},{m.shift.value},{m.role.value},{st.source},{st.length},{st.delta:.6f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_groups_csv(summaries: Sequence[GroupSummary], path) -> None:
    lines = ["grouping,group,source,n,mean_delta"]
    for s in summaries:
        for g, mean in s.means.items():
            lines.append(f"{s.grouping},{g},{s.source},{s.counts[g]},{mean:.6f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_histogram_csv(deltas: Sequence[float], path, bins: int = 10) -> None:
    edges, counts, mean = histogram_deltas(deltas, bins)
    lines = ["bin_lo,bin_hi,count"]
    lines += [f"{lo:.6f},{hi:.6f},{c}" for lo, hi, c in zip(edges[:-1], edges[1:], counts)]
    lines.append(f"mean={mean:.6f},,")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_dynamics_reports(
    true_seqs: Sequence[SceneSequence],
    pred_seqs: Sequence[SceneSequence],
    meta: dict[str, ParticipantMeta],
    out_dir,
    bins: int = 10,
) -> list[GroupSummary]:
    """Write dynamics.csv, groups.csv and per-group histograms for both sources.

    Histograms come in two views: ``hist_<group>_<source>.csv`` with one entry
    per participant-shift and ``hist_<group>_<source>_participant.csv`` with
    one (shift-averaged) entry per participant.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stats = [change_stats(s, "true_labels") for s in true_seqs] + [change_stats(s, "predicted") for s in pred_seqs]
    write_dynamics_csv(stats, meta, out / "dynamics.csv")
    summaries = [g for grouping in GROUPINGS for g in group_means(stats, meta, grouping)]
    write_groups_csv(summaries, out / "groups.csv")
    for grouping in GROUPINGS:
        for source in SOURCES:
            chosen = [s for s in stats if s.source == source]
            groups = sorted({_group_key(meta[s.participant_id], grouping) for s in chosen})
            for g in groups:
                members = [s for s in chosen if _group_key(meta[s.participant_id], grouping) == g]
                write_histogram_csv([s.delta for s in members], out / f"hist_{g}_{source}.csv", bins)
                per_pid: dict[str, list[float]] = defaultdict(list)
                for s in members:
                    per_pid[s.participant_id].append(s.delta)
                write_histogram_csv(
                    [float(np.mean(v)) for _, v in sorted(per_pid.items())],
                    out / f"hist_{g}_{source}_participant.csv",
                    bins,
                )
    return summaries
