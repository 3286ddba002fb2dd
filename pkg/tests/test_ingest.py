import itertools
import logging
import math

import numpy as np
import pytest

from egoscene import ingest, synth
from egoscene.datamodel import FeatureStream, SceneLabel, SceneSequence, Segment
from egoscene.ingest import FgMask, IngestError, RoomMap, RoomMapError, RssiRecord

ROOMS = RoomMap({"roomA": SceneLabel.NS, "roomB": SceneLabel.PAT, "hall": None})


def stream(n, start=0, hop=10, pid="p1", sid="s00", rng=None):
    rng = rng or np.random.default_rng(0)
    return FeatureStream(pid, sid, start + hop * np.arange(n), rng.standard_normal((n, 125)))


# ---------------------------------------------------------------- CSV parsing


def test_feature_csv_round_trip(tmp_path):
    s = stream(30)
    path = tmp_path / "p1" / "s00" / "features.csv"
    ingest.write_feature_stream(s, path, fmt="%.17g")
    back = ingest.read_feature_stream(path)
    assert back == s


def test_feature_csv_errors_carry_line_numbers(tmp_path):
    path = tmp_path / "features.csv"
    ingest.write_feature_stream(stream(3), path)
    lines = path.read_text().splitlines()
    lines[2] = lines[2].replace(",", ",x", 1)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(IngestError, match=r"features.csv:3"):
        ingest.read_feature_stream(path, "p", "s")


def test_feature_csv_rejects_nonmonotonic_and_short_rows(tmp_path):
    path = tmp_path / "f.csv"
    ingest.write_feature_stream(stream(3), path)
    lines = path.read_text().splitlines()
    bad = lines[:2] + [lines[1]]
    path.write_text("\n".join(bad) + "\n")
    with pytest.raises(IngestError, match="strictly increasing"):
        ingest.read_feature_stream(path, "p", "s")
    path.write_text("\n".join([lines[0], "0,1,2"]) + "\n")
    with pytest.raises(IngestError, match="columns"):
        ingest.read_feature_stream(path, "p", "s")


def test_feature_csv_warns_on_hop(tmp_path, caplog):
    path = tmp_path / "f.csv"
    ingest.write_feature_stream(stream(5, hop=25), path)
    with caplog.at_level(logging.WARNING, logger="egoscene"):
        ingest.read_feature_stream(path, "p", "s")
    assert "frame gap" in caplog.text


def test_missing_file_and_bad_header(tmp_path):
    with pytest.raises(IngestError, match="not found"):
        ingest.read_rssi(tmp_path / "nope.csv")
    (tmp_path / "r.csv").write_text("a,b,c\n")
    with pytest.raises(IngestError, match="header"):
        ingest.read_rssi(tmp_path / "r.csv")


def test_small_files_round_trip(tmp_path):
    recs = [RssiRecord(5, "roomA", -40.5), RssiRecord(9, "roomB", -61.0)]
    ingest.write_rssi(recs, tmp_path / "r.csv")
    assert ingest.read_rssi(tmp_path / "r.csv") == recs
    ingest.write_room_map(ROOMS, tmp_path / "m.csv")
    assert ingest.read_room_map(tmp_path / "m.csv") == ROOMS
    mask = FgMask(((0, 10), (20, 30)))
    ingest.write_fg_mask(mask, tmp_path / "g.csv")
    assert ingest.read_fg_mask(tmp_path / "g.csv") == mask
    seq = SceneSequence("p", ((0, SceneLabel.NS), (60000, SceneLabel.LOUNGE)), "s00")
    ingest.write_scene_sequence(seq, tmp_path / "q.csv")
    assert ingest.read_scene_sequence(tmp_path / "q.csv", "p", "s00") == seq


def test_room_map_rejects_unknown_scene(tmp_path):
    (tmp_path / "m.csv").write_text("room_id,scene\nx,kitchen\n")
    with pytest.raises(RoomMapError):
        ingest.read_room_map(tmp_path / "m.csv")


# ---------------------------------------------------------------- localization


def test_localize_strongest_wins():
    seq = ingest.localize([RssiRecord(0, "roomA", -40), RssiRecord(10, "roomB", -60)], ROOMS)
    assert seq.labels == [SceneLabel.NS]


def test_localize_tie_break_all_permutations():
    # equal RSSI: earlier timestamp wins, then the smaller room id
    cases = [
        ([RssiRecord(5, "roomB", -50), RssiRecord(7, "roomA", -50)], SceneLabel.PAT),
        ([RssiRecord(7, "roomB", -50), RssiRecord(5, "roomA", -50)], SceneLabel.NS),
        ([RssiRecord(5, "roomB", -50), RssiRecord(5, "roomA", -50)], SceneLabel.NS),
    ]
    for records, expected in cases:
        for perm in itertools.permutations(records):
            assert ingest.localize(list(perm), ROOMS).labels == [expected]


def test_localize_buckets_and_ignore():
    recs = [
        RssiRecord(1000, "roomA", -50),
        RssiRecord(61_000, "hall", -30),
        RssiRecord(61_500, "roomB", -70),
        RssiRecord(125_000, "roomB", -40),
    ]
    seq = ingest.localize(recs, ROOMS)
    assert seq.entries == ((0, SceneLabel.NS), (120_000, SceneLabel.PAT))


def test_localize_unknown_room():
    with pytest.raises(RoomMapError, match="roomZ"):
        ingest.localize([RssiRecord(0, "roomZ", -40)], ROOMS)


def test_localize_all_ignored():
    with pytest.raises(IngestError):
        ingest.localize([RssiRecord(0, "hall", -40)], ROOMS)


# ---------------------------------------------------------------- mining


def test_mine_one_segment_per_label_and_skips_short_buckets():
    ts = np.concatenate([np.arange(600) * 10, 60_000 + np.arange(100) * 10, 120_000 + np.arange(500) * 10])
    s = FeatureStream("p1", "s00", ts, np.zeros((len(ts), 125)))
    labels = SceneSequence("p1", ((0, 1), (60_000, 2), (120_000, 3)), "s00")
    report = ingest.MiningReport()
    segs = ingest.mine_segments(s, labels, report=report)
    assert [x.label for x in segs] == [SceneLabel.PAT, SceneLabel.LOUNGE]
    assert [x.start_ts_ms for x in segs] == [0, 120_000]
    assert all(x.matrix.shape == (500, 125) for x in segs)
    assert (report.emitted, report.skipped) == (2, 1)
    assert report.per_class == {"ns": 0, "pat": 1, "med": 0, "lounge": 1}


def test_mine_matches_generator_ledger():
    corpus = synth.synthesize(synth.SynthSpec(num_participants=1, steps_per_shift=10, seed=4))
    sd = corpus.shifts[0]
    labels = ingest.localize(sd.rssi, corpus.room_map, participant_id="p000", shift_id=sd.shift_id)
    segs = ingest.mine_segments(sd.stream, labels)
    assert len(segs) == 10
    assert [s.label for s in segs] == [lab for _, lab in sd.ledger]


def test_mine_rejects_mismatched_participant():
    with pytest.raises(IngestError):
        ingest.mine_segments(stream(600), SceneSequence("other", ((0, 0),)))


def test_participant_mean_matches_compensated_sum(rng):
    values = rng.standard_normal((1000, 125)) * 1e3 + 1e6
    s1 = FeatureStream("p", "a", np.arange(600) * 10, values[:600])
    s2 = FeatureStream("p", "b", np.arange(400) * 10, values[600:])
    mean = ingest.participant_mean([s1, s2])
    oracle = np.array([math.fsum(values[:, j]) / 1000 for j in range(125)])
    np.testing.assert_allclose(mean, oracle, rtol=1e-9)


def test_normalization_zeroes_grand_mean(rng):
    s = FeatureStream("p", "a", np.arange(1500) * 10, rng.standard_normal((1500, 125)) + 5)
    labels = SceneSequence("p", ((0, 0),))
    segs = [Segment("p", i * 5000, s.values[i * 500 : (i + 1) * 500], SceneLabel.NS) for i in range(3)]
    normed = ingest.normalize_segments(segs, ingest.participant_mean([s]))
    grand = np.concatenate([x.matrix for x in normed]).mean(axis=0)
    assert np.max(np.abs(grand)) < 1e-6
    assert normed[0].matrix.dtype == segs[0].matrix.dtype
    assert labels.labels == [SceneLabel.NS]


# ---------------------------------------------------------------- foreground mask


def test_fg_overlap_sixty_percent_is_active():
    segment = Segment("p", 0, np.zeros((500, 125)), SceneLabel.NS)
    assert segment.end_ts_ms == 5000
    mask = FgMask(((2000, 7000),))
    assert mask.overlap_ms(0, 5000) == 3000
    (kept,) = ingest.apply_fg_mask([segment], mask, "fg_active")
    assert kept.fg_active


def test_fg_modes():
    segs = [Segment("p", i * 5000, np.zeros((500, 125)), SceneLabel.NS) for i in range(4)]
    mask = FgMask(((0, 2500), (10_000, 12_000), (12_000, 14_000)))
    full = ingest.apply_fg_mask(segs, mask, "full")
    assert len(full) == 4
    assert [s.fg_active for s in full] == [True, False, True, False]
    assert len(ingest.apply_fg_mask(segs, mask, "fg_active")) == 2
    assert len(ingest.apply_fg_mask(segs, FgMask(), "full")) == 4
    with pytest.raises(ValueError):
        ingest.apply_fg_mask(segs, mask, "bogus")


def test_fg_mask_rejects_overlapping_intervals():
    with pytest.raises(IngestError):
        FgMask(((0, 10), (5, 20)))


# ---------------------------------------------------------------- dataset layout


def test_discover_participants_missing(tmp_path):
    with pytest.raises(IngestError, match="participants.csv missing"):
        ingest.discover_participants(tmp_path)


def test_mine_participant_from_disk(small_corpus_dir):
    root, corpus = small_corpus_dir
    meta = ingest.discover_participants(root)
    room_map = ingest.read_room_map(root / "rooms.csv")
    mined = ingest.mine_participant(root, meta["p000"], room_map)
    expected = [(sid, ts, lab) for pid, sid, ts, lab in corpus.ledger_rows() if pid == "p000"]
    got = [(s.shift_id, s.start_ts_ms // 60_000 * 60_000, s.label) for s in mined.segments]
    assert got == expected
