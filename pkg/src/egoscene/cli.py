"""Command-line entry point: ``egoscene <synth|mine|train-cv|dynamics|report>``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import dynamics as D
from . import experiment as E
from . import ingest, models, store, synth
from .datamodel import SceneLabel

log = logging.getLogger("egoscene")

MODEL_CHOICES = ("mlp", "tdnn-small", "tdnn-big")
STORE_NAME = "segments.egsg"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    data_root: str = "data"
    output_dir: str = "out"
    mode: str = "full"
    models: list = field(default_factory=lambda: list(MODEL_CHOICES))
    folds: int = 10
    train: dict = field(default_factory=dict)
    seed: int = 0
    jobs: int = 1
    bins: int = 10

    @classmethod
    def from_json(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown run config keys: {', '.join(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.mode not in ("full", "fg_active"):
            raise ConfigError(f"mode must be full or fg_active, got {self.mode!r}")
        bad = [m for m in self.models if m not in MODEL_CHOICES]
        if bad or not self.models:
            raise ConfigError(f"models must be drawn from {MODEL_CHOICES}, got {self.models}")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.jobs < 1 or self.bins < 1:
            raise ConfigError("jobs and bins must be >= 1")
        try:
            self.train_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self) -> E.TrainConfig:
        overrides = dict(self.train)
        if "seed" in overrides:
            raise ValueError("set the seed at top level, not under train")
        return E.TrainConfig.from_overrides({**overrides, "seed": self.seed})


def load_run_config(args) -> RunConfig:
    raw = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    cfg = RunConfig.from_json(raw)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.jobs is not None:
        cfg.jobs = args.jobs
    if args.mode is not None:
        cfg.mode = args.mode
    if args.model:
        cfg.models = list(args.model)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    if args.spec:
        path = Path(args.spec)
        if not path.exists():
            raise ConfigError(f"spec file {path} not found")
        try:
            spec_dict = json.loads(path.read_text(encoding="utf-8"))
            spec = synth.SynthSpec.from_json(spec_dict)
        except (json.JSONDecodeError, TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: {exc}") from None
    else:
        spec = synth.SynthSpec()
    if args.seed is not None:
        spec = synth.SynthSpec.from_json({**spec.to_json(), "seed": args.seed})
    corpus = synth.generate_corpus(spec, args.out)
    print(f"wrote {len(corpus.meta)} participants, {len(corpus.shifts)} shifts to {args.out}")
    return 0


def _mine_all(cfg: RunConfig):
    root = Path(cfg.data_root)
    if not root.is_dir():
        raise ConfigError(f"data_root {root} is not a directory")
    meta = ingest.discover_participants(root)
    room_map = ingest.read_room_map(root / "rooms.csv")
    report = ingest.MiningReport()
    segments = []
    for pid in sorted(meta):
        mined = ingest.mine_participant(root, meta[pid], room_map, cfg.mode, report=report)
        segments += mined.segments
    return meta, segments, report


def cmd_mine(args) -> int:
    cfg = load_run_config(args)
    _, segments, report = _mine_all(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    store.write_store(segments, out / STORE_NAME)
    lines = ["key,value", f"mode,{cfg.mode}", f"emitted,{report.emitted}", f"skipped,{report.skipped}"]
    lines += [f"class_{k},{v}" for k, v in report.per_class.items()]
    (out / "mining_report.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"mined {report.emitted} segments ({report.skipped} labels skipped) -> {out / STORE_NAME}")
    return 0


def _load_store(cfg: RunConfig):
    path = Path(cfg.output_dir) / STORE_NAME
    if not path.exists():
        raise ConfigError(f"{path} missing; run `mine` first")
    return store.read_store(path)


def cmd_train_cv(args) -> int:
    cfg = load_run_config(args)
    out = Path(cfg.output_dir)
    segments = _load_store(cfg)
    incomplete = out / "INCOMPLETE"
    incomplete.write_text("train-cv started\n", encoding="utf-8")
    specs = [models.preset(m) for m in cfg.models]
    result = E.cross_validate(segments, specs, cfg.mode, cfg.train_config(), k=cfg.folds, jobs=cfg.jobs)
    E.write_report_csv(result.reports, out / "report.csv")
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    for rep in result.reports:
        E.write_confusion_csv(rep, out / f"confusion_{rep.model}_{rep.mode}.csv")
        for o in result.outcomes[rep.model]:
            E.write_curves_csv(o.train.curves, out / f"curves_{rep.model}_{o.fold}.csv")
            (ckpt_dir / f"{rep.model}_fold{o.fold}.egsc").write_bytes(o.train.checkpoint_bytes)
        pred_lines = ["participant_id,shift_id,start_ts_ms,predicted"]
        for (pid, sid, ts), lab in sorted(result.predictions(rep.model).items()):
            pred_lines.append(f"{pid},{sid},{ts},{lab.code}")
        (out / f"predictions_{rep.model}_{rep.mode}.csv").write_text("\n".join(pred_lines) + "\n", encoding="utf-8")
    incomplete.unlink()
    _print_report(result.reports)
    return 0


def _print_report(reports):
    print(f"{'model':<14}{'mode':<11}{'params':>10}{'mean acc':>10}")
    for r in reports:
        print(f"{r.model:<14}{r.mode:<11}{r.params:>10}{100 * r.mean_accuracy:>9.2f}%")


def _read_predictions(path):
    rows = ingest._read_rows(path, ["participant_id", "shift_id", "start_ts_ms", "predicted"])
    return {(p, s, int(t)): SceneLabel.from_code(c) for _, (p, s, t, c) in rows}


def cmd_dynamics(args) -> int:
    cfg = load_run_config(args)
    root = Path(cfg.data_root)
    meta_path = root / "participants.csv"
    if not meta_path.exists():
        raise ConfigError(f"{meta_path} missing; dynamics needs participant metadata")
    meta = ingest.read_participants(meta_path)
    segments = [s for s in _load_store(cfg) if s.label is not None]
    missing = sorted({s.participant_id for s in segments} - set(meta))
    if missing:
        raise ConfigError(f"participants without metadata: {', '.join(missing)}")
    true_seqs = D.true_sequences_from_segments(segments)
    if args.checkpoint:
        model = models.load_checkpoint(args.checkpoint).model
        by_shift: dict = {}
        for s in sorted(segments, key=lambda s: (s.participant_id, s.shift_id, s.start_ts_ms)):
            by_shift.setdefault((s.participant_id, s.shift_id), []).append(s)
        pred_seqs = [D.predict_sequence(model, segs) for _, segs in sorted(by_shift.items())]
    else:
        kind = models.preset(cfg.models[0]).kind
        path = Path(cfg.output_dir) / f"predictions_{kind}_{cfg.mode}.csv"
        if not path.exists():
            raise ConfigError(f"{path} missing; pass --checkpoint or run train-cv first")
        pred_seqs = D.predicted_sequences(_read_predictions(path))
    summaries = D.write_dynamics_reports(true_seqs, pred_seqs, meta, cfg.output_dir, cfg.bins)
    for s in summaries:
        means = ", ".join(f"{g}={m:.3f} (n={s.counts[g]})" for g, m in s.means.items())
        print(f"{s.grouping:<6}{s.source:<12}{means}")
    return 0


def cmd_report(args) -> int:
    cfg = load_run_config(args)
    path = Path(cfg.output_dir) / "report.csv"
    if not path.exists():
        raise ConfigError(f"{path} missing; run train-cv first")
    print(path.read_text(encoding="utf-8"), end="")
    for conf in sorted(Path(cfg.output_dir).glob("confusion_*.csv")):
        print(f"\n{conf.name}")
        print(conf.read_text(encoding="utf-8"), end="")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (keys: %s)" % ", ".join(f.name for f in fields(RunConfig)))
    common.add_argument("--seed", type=int, help="master seed (default 0)")
    common.add_argument("--jobs", type=int, help="parallel fold workers (default 1)")
    common.add_argument("--mode", choices=("full", "fg_active"), help="data subset (default full)")
    common.add_argument("--model", action="append", choices=MODEL_CHOICES,
                        help="model to run; repeatable (default: all three)")

    parser = argparse.ArgumentParser(prog="egoscene", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synth", help="generate a synthetic dataset", parents=[common])
    p.add_argument("--spec", help="synthetic spec JSON (defaults used when omitted)")
    p.add_argument("--out", required=True, help="output data root")
    p.set_defaults(func=cmd_synth)
    sub.add_parser("mine", help="mine normalized segments into a store", parents=[common]).set_defaults(func=cmd_mine)
    sub.add_parser("train-cv", help="speaker-disjoint cross-validation", parents=[common]).set_defaults(func=cmd_train_cv)
    p = sub.add_parser("dynamics", help="scene-change statistics", parents=[common])
    p.add_argument("--checkpoint", help="model used to predict every segment (default: out-of-fold predictions)")
    p.set_defaults(func=cmd_dynamics)
    sub.add_parser("report", help="print report.csv and confusion matrices", parents=[common]).set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("EGOSCENE_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"egoscene: configuration error: {exc}", file=sys.stderr)
        return 2
    except (ingest.IngestError, store.StoreError, models.CheckpointError, E.TrainingDiverged, D.MetadataError,
            ValueError, OSError) as exc:
        print(f"egoscene: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
