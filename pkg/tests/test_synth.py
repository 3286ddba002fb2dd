import json

import numpy as np
import pytest

from egoscene import dynamics as D
from egoscene import ingest, synth
from egoscene.datamodel import Role, SceneLabel
from egoscene.kernels import make_rng


def labels_of(corpus):
    return [lab for _, _, _, lab in corpus.ledger_rows()]


def test_zero_mobility_gives_constant_trajectories():
    corpus = synth.synthesize(synth.SynthSpec(num_participants=6, mobility={"nursing": 0.0, "non_nursing": 0.0}))
    for sd in corpus.shifts:
        assert len({lab for _, lab in sd.ledger}) == 1
        assert D.normalized_changes([lab for _, lab in sd.ledger]) == 0.0


def test_degenerate_prior_gives_all_ns():
    corpus = synth.synthesize(synth.SynthSpec(num_participants=3, priors=(1, 0, 0, 0)))
    assert set(labels_of(corpus)) == {SceneLabel.NS}


def test_ns_fraction_over_ten_thousand_draws():
    spec = synth.SynthSpec(num_participants=100, shifts_per_participant=100, steps_per_shift=1, frames_per_step=1)
    labels = labels_of(synth.synthesize(spec))
    assert len(labels) == 10_000
    assert abs(np.mean([lab == SceneLabel.NS for lab in labels]) - 0.46) <= 0.01


def test_chain_keeps_priors_and_change_rate():
    rng = make_rng(5, "chain")
    traj = np.array(synth._trajectory(rng, synth.PAPER_PRIORS, 0.5, 200_000))
    freq = np.bincount(traj, minlength=4) / len(traj)
    np.testing.assert_allclose(freq, synth.PAPER_PRIORS, atol=0.01)
    rate = np.mean(traj[1:] != traj[:-1])
    assert abs(rate - 0.5) < 3 * np.sqrt(0.25 / len(traj))


def test_nursing_moves_more_over_seeds():
    for seed in range(5):
        corpus = synth.synthesize(synth.SynthSpec(num_participants=10, steps_per_shift=40, seed=seed, frames_per_step=1))
        by_role = {r: [] for r in Role}
        for sd in corpus.shifts:
            by_role[sd.meta.role].append(D.normalized_changes([lab for _, lab in sd.ledger]))
        assert np.mean(by_role[Role.NURSING]) > np.mean(by_role[Role.NON_NURSING])


def test_determinism():
    spec = synth.SynthSpec(num_participants=2, steps_per_shift=3, seed=9)
    a, b = synth.synthesize(spec), synth.synthesize(spec)
    assert all(x.stream == y.stream and x.rssi == y.rssi and x.ledger == y.ledger for x, y in zip(a.shifts, b.shifts))
    c = synth.synthesize(synth.SynthSpec(num_participants=2, steps_per_shift=3, seed=10))
    assert a.shifts[0].stream != c.shifts[0].stream


def test_written_layout(small_corpus_dir):
    root, corpus = small_corpus_dir
    assert (root / "rooms.csv").exists() and (root / "participants.csv").exists()
    assert json.loads((root / "synthspec.json").read_text())["seed"] == corpus.spec.seed
    assert synth.read_ledger(root / "ledger.csv") == list(corpus.ledger_rows())
    assert sorted(p.name for p in (root / "p000").iterdir()) == ["s00", "s01"]


def test_rssi_margin_holds():
    corpus = synth.synthesize(synth.SynthSpec(num_participants=2, steps_per_shift=5))
    for sd in corpus.shifts:
        for t0, scene in sd.ledger:
            pings = [r for r in sd.rssi if t0 <= r.ts_ms < t0 + synth.STEP_MS]
            for ts in {r.ts_ms for r in pings}:
                at = sorted((r for r in pings if r.ts_ms == ts), key=lambda r: -r.rssi_dbm)
                assert corpus.room_map.scene_of(at[0].room_id) == scene
                rival = next(r for r in at if r.room_id != at[0].room_id)
                assert at[0].rssi_dbm - rival.rssi_dbm >= 10 - 1e-9


def test_fg_fraction_roughly_respected():
    corpus = synth.synthesize(synth.SynthSpec(num_participants=20, steps_per_shift=50, frames_per_step=1))
    n_active = sum(len(sd.mask.intervals) for sd in corpus.shifts)
    assert abs(n_active / 1000 - 0.35) < 0.05


def test_spec_validation():
    with pytest.raises(ValueError):
        synth.SynthSpec(priors=(0.5, 0.5, 0.5, 0.0))
    with pytest.raises(ValueError):
        synth.SynthSpec(noise_std=0)
    with pytest.raises(ValueError):
        synth.SynthSpec(mobility={"nursing": 0.99, "non_nursing": 0.1})
    with pytest.raises(ValueError, match="unknown"):
        synth.SynthSpec.from_json({"bogus": 1})
    spec = synth.SynthSpec(seed=3)
    assert synth.SynthSpec.from_json(json.loads(json.dumps(spec.to_json()))) == spec


def test_temporal_corpus_has_equal_class_means():
    spec = synth.temporal_spec(num_participants=8, steps_per_shift=40, offset_scale=0.0, seed=2)
    mined = synth.mine_in_memory(synth.generate_temporal_corpus(spec))
    segs = [s for m in mined for s in m.segments]
    means = {c: np.stack([s.matrix.mean(0) for s in segs if s.label == c]) for c in SceneLabel}
    for a in SceneLabel:
        for b in SceneLabel:
            if a < b:
                ma, mb = means[a], means[b]
                se2 = ma.var(0, ddof=1) / len(ma) + mb.var(0, ddof=1) / len(mb)
                chi2 = float(np.sum((ma.mean(0) - mb.mean(0)) ** 2 / se2))
                # chi-square with 125 dof: mean 125, sd ~15.8
                assert chi2 < 125 + 4 * 15.8


def test_temporal_corpus_frames_are_periodic():
    spec = synth.temporal_spec(num_participants=1, steps_per_shift=8, noise_std=1e-3, offset_scale=0.0)
    corpus = synth.generate_temporal_corpus(spec)
    sd = corpus.shifts[0]
    for i, (_, scene) in enumerate(sd.ledger):
        x = sd.stream.values[i * 500 : (i + 1) * 500, 0]
        p = spec.temporal_periods[scene]
        np.testing.assert_allclose(x[p:], x[:-p], atol=0.02)


@pytest.mark.parametrize("noisy", [False, True])
def test_pipeline_reproduces_ledger_in_memory(noisy):
    corpus = synth.synthesize(synth.SynthSpec(num_participants=3, shifts_per_participant=2, steps_per_shift=8, noisy_rssi=noisy))
    mined = synth.mine_in_memory(corpus)
    got = [(m.meta.participant_id, s.shift_id, s.label) for m in mined for s in m.segments]
    assert got == [(p, sid, lab) for p, sid, _, lab in corpus.ledger_rows()]
    assert ingest.DEFAULT_BUCKET_MS == synth.STEP_MS
