import hashlib
import json
from pathlib import Path

import pytest

from egoscene import cli, store, synth


def digest(root: Path) -> dict[str, str]:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*")) if p.is_file()
    }


def write_config(path, **kw):
    path.write_text(json.dumps(kw))
    return str(path)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.json"
    spec.write_text(json.dumps({"num_participants": 4, "shifts_per_participant": 2, "steps_per_shift": 5, "seed": 3}))
    assert cli.main(["synth", "--spec", str(spec), "--out", str(root / "data")]) == 0
    return root


def test_synth_seed_is_deterministic(tmp_path):
    spec = write_config(tmp_path / "s.json", num_participants=2, steps_per_shift=3)
    assert cli.main(["synth", "--spec", spec, "--out", str(tmp_path / "a"), "--seed", "7"]) == 0
    assert cli.main(["synth", "--spec", spec, "--out", str(tmp_path / "b"), "--seed", "7"]) == 0
    assert cli.main(["synth", "--spec", spec, "--out", str(tmp_path / "c"), "--seed", "8"]) == 0
    assert digest(tmp_path / "a") == digest(tmp_path / "b") != digest(tmp_path / "c")


def test_synth_missing_spec_exits_2(tmp_path, capsys):
    assert cli.main(["synth", "--spec", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2
    assert "not found" in capsys.readouterr().err


def test_synth_bad_spec_key_exits_2(tmp_path):
    spec = write_config(tmp_path / "s.json", bogus=1)
    assert cli.main(["synth", "--spec", spec, "--out", str(tmp_path / "o")]) == 2


def test_unknown_config_key_exits_2(tmp_path, dataset):
    cfg = write_config(tmp_path / "c.json", data_root=str(dataset / "data"), learning_rate=1)
    assert cli.main(["mine", "--config", cfg]) == 2
    cfg = write_config(tmp_path / "c.json", train={"seed": 3})
    assert cli.main(["mine", "--config", cfg]) == 2


def test_bad_subcommand_exits_2():
    with pytest.raises(SystemExit) as exc:
        cli.main(["explode"])
    assert exc.value.code == 2


def test_empty_data_root_names_problem(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    cfg = write_config(tmp_path / "c.json", data_root=str(tmp_path / "empty"), output_dir=str(tmp_path / "o"))
    assert cli.main(["mine", "--config", cfg]) == 1
    assert "no participants found" in capsys.readouterr().err


def test_mine_counts_match_ledger_and_fg_subset(tmp_path, dataset):
    data = dataset / "data"
    full = write_config(tmp_path / "f.json", data_root=str(data), output_dir=str(tmp_path / "full"))
    assert cli.main(["mine", "--config", full]) == 0
    assert cli.main(["mine", "--config", full, "--mode", "fg_active"]) == 0
    fg_count = len(store.read_store(tmp_path / "full" / "segments.egsg"))
    assert cli.main(["mine", "--config", full]) == 0
    segs = store.read_store(tmp_path / "full" / "segments.egsg")
    assert fg_count <= len(segs)
    ledger = synth.read_ledger(data / "ledger.csv")
    report = dict(line.split(",") for line in (tmp_path / "full" / "mining_report.csv").read_text().split())
    for code in ("ns", "pat", "med", "lounge"):
        assert int(report[f"class_{code}"]) == sum(lab.code == code for *_, lab in ledger)
    assert [(s.participant_id, s.shift_id, s.label) for s in segs] == [(p, sid, lab) for p, sid, _, lab in ledger]


def run_pipeline(dataset, out, jobs=1, mode="full"):
    cfg = write_config(
        out.parent / f"{out.name}.json", data_root=str(dataset / "data"), output_dir=str(out),
        models=["mlp"], folds=2, train={"max_epochs": 1}, seed=5, jobs=jobs, mode=mode,
    )
    for cmd in ("mine", "train-cv", "dynamics", "report"):
        assert cli.main([cmd, "--config", cfg]) == 0, cmd
    return cfg


def test_pipeline_outputs_and_determinism(tmp_path, dataset):
    run_pipeline(dataset, tmp_path / "r1")
    run_pipeline(dataset, tmp_path / "r2")
    out = tmp_path / "r1"
    for name in ("report.csv", "confusion_mlp_baseline_full.csv", "curves_mlp_baseline_0.csv",
                 "checkpoints/mlp_baseline_fold1.egsc", "dynamics.csv", "groups.csv", "hist_nursing_predicted.csv"):
        assert (out / name).exists(), name
    assert not (out / "INCOMPLETE").exists()
    rows = (out / "report.csv").read_text().splitlines()
    assert rows[0] == "model,mode,params,mean_acc,fold0,fold1" and len(rows) == 2
    assert rows[1].startswith("mlp_baseline,full,1116676,")
    assert digest(tmp_path / "r1") == digest(tmp_path / "r2")


def test_parallel_folds_match_serial(tmp_path, dataset):
    run_pipeline(dataset, tmp_path / "serial")
    run_pipeline(dataset, tmp_path / "par", jobs=2)
    assert digest(tmp_path / "serial") == digest(tmp_path / "par")


def test_dynamics_with_checkpoint(tmp_path, dataset):
    cfg = run_pipeline(dataset, tmp_path / "r")
    ckpt = tmp_path / "r" / "checkpoints" / "mlp_baseline_fold0.egsc"
    assert cli.main(["dynamics", "--config", cfg, "--checkpoint", str(ckpt)]) == 0
    assert "predicted" in (tmp_path / "r" / "groups.csv").read_text()


def test_dynamics_missing_participants_is_config_error(tmp_path, dataset, capsys):
    run_pipeline(dataset, tmp_path / "r")
    (tmp_path / "bare").mkdir()
    cfg2 = write_config(tmp_path / "c2.json", data_root=str(tmp_path / "bare"), output_dir=str(tmp_path / "r"), models=["mlp"])
    assert cli.main(["dynamics", "--config", cfg2]) == 2
    assert "participants.csv" in capsys.readouterr().err


def test_zero_mobility_dynamics_all_zero(tmp_path):
    spec = write_config(tmp_path / "s.json", num_participants=4, steps_per_shift=4,
                        mobility={"nursing": 0.0, "non_nursing": 0.0})
    assert cli.main(["synth", "--spec", spec, "--out", str(tmp_path / "data")]) == 0
    cfg = write_config(tmp_path / "c.json", data_root=str(tmp_path / "data"), output_dir=str(tmp_path / "o"),
                       models=["mlp"], folds=2, train={"max_epochs": 1})
    for cmd in ("mine", "train-cv", "dynamics"):
        assert cli.main([cmd, "--config", cfg]) == 0
    lines = (tmp_path / "o" / "dynamics.csv").read_text().splitlines()[1:]
    assert all(l.endswith(",0.000000") for l in lines if ",true_labels," in l)


def test_train_cv_without_store_exits_2(tmp_path):
    cfg = write_config(tmp_path / "c.json", output_dir=str(tmp_path / "nothing"))
    assert cli.main(["train-cv", "--config", cfg]) == 2
