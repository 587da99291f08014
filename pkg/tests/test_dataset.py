import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from midi2drum.dataset import (
    BARS,
    SPLITS,
    Manifest,
    PairRecord,
    SplitPolicy,
    ToyCorpus,
    TrackRecord,
    build_pairs,
    build_toy_corpus,
    generate_pattern,
    read_manifest,
    record_key,
    segment_two_bars,
    split_key,
    stem_records,
    verify_splits,
    write_manifest,
)
from midi2drum.midi_core import DrumEvent, DrumGroup, TempoMap, binarize
from midi2drum.signals import LATENT_DIM, frames_for_duration


def _record(midi, kit, bpm=100.0, parent=None, events=()):
    return TrackRecord(midi, kit, "Beat", bpm, {16: binarize(list(events), bpm, 16, BARS)}, {}, tuple(events), parent)


@pytest.fixture(scope="module")
def small_corpus():
    return build_toy_corpus(n_kits=4, n_patterns=12, seed=3, midi_split=(6, 3, 3))


# --------------------------------------------------------------------------
# Records and keys


def test_keys_roundtrip():
    assert split_key(record_key("a|b", "kit")) == ("a|b", "kit")
    with pytest.raises(ValueError):
        split_key("nokit")


def test_record_validation():
    with pytest.raises(ValueError):
        TrackRecord("m", "k", "Groove", 100.0, {16: binarize([], 100, 16, 2)}, {})
    with pytest.raises(ValueError):
        TrackRecord("m", "k", "Beat", 100.0, {16: binarize([], 100, 16, 1)}, {})
    with pytest.raises(ValueError):
        TrackRecord("m", "k", "Beat", 100.0, {32: binarize([], 100, 16, 2)}, {})
    with pytest.raises(ValueError):
        PairRecord("a|k", "b|k", "k", "dev")


def test_record_json_roundtrip():
    ev = (DrumEvent(0.0, DrumGroup.KICK, 90), DrumEvent(0.3, DrumGroup.SNARE))
    r = _record("m", "k", events=ev)
    assert TrackRecord.from_json(r.to_json()) == r
    assert r.duration == pytest.approx(8 * 60 / 100)


def test_stem_records_share_parent():
    ev = (DrumEvent(0.0, DrumGroup.KICK), DrumEvent(0.5, DrumGroup.SNARE), DrumEvent(1.0, DrumGroup.KICK))
    stems = stem_records(_record("m", "k", events=ev))
    assert [s.midi_id for s in stems] == ["m#kick", "m#snare"]
    assert all(s.parent == "m" for s in stems)
    assert stems[0].grids[16].steps[:, 0].sum() == 2


# --------------------------------------------------------------------------
# Segmentation


def test_segmentation_into_two_bar_windows():
    ev = [DrumEvent(t, DrumGroup.KICK) for t in (0.0, 1.0, 4.0, 5.5, 8.1)]
    seg = segment_two_bars(ev, 120.0, length_seconds=12.0)
    assert len(seg.windows) == 3 and not seg.rejected
    assert [e.onset_time for e in seg.windows[1]] == pytest.approx([0.0, 1.5])
    assert [e.onset_time for e in seg.windows[2]] == pytest.approx([0.1])


def test_partial_window_dropped_and_default_length():
    ev = [DrumEvent(t, DrumGroup.KICK) for t in (0.0, 4.5)]
    assert len(segment_two_bars(ev, 120.0).windows) == 1
    assert segment_two_bars([], 120.0).windows == []


def test_tempo_change_windows_rejected():
    tm = TempoMap(120.0, changes=((0.0, 120.0), (6.0, 90.0)))
    ev = [DrumEvent(t, DrumGroup.KICK) for t in np.arange(0, 16, 1.0)]
    seg = segment_two_bars(ev, tm, length_seconds=16.0)
    assert len(seg.windows) == 1
    assert [w for w, _ in seg.rejected] == [1, 2, 3]
    assert "inside" in seg.rejected[0][1]


# --------------------------------------------------------------------------
# Splits and pairing


def test_policy_rejects_overlap_and_bad_mode():
    with pytest.raises(ValueError):
        SplitPolicy({"train": {"k1"}, "test": {"k1"}}, {})
    with pytest.raises(ValueError):
        SplitPolicy({}, {}, mode="all")
    p = SplitPolicy({"train": {"k"}}, {"train": {"m"}, "test": {"n"}})
    assert p.split_for("k", "m") == "train" and p.split_for("k", "n") is None
    assert SplitPolicy.from_json(p.to_json()) == p


def test_pair_rules_example():
    recs = [_record("m1", "k"), _record("m2", "k"), _record("m1", "j"), _record("m3", "j")]
    policy = SplitPolicy({"train": {"k", "j"}}, {"train": {"m1", "m2", "m3"}}, mode="enumerate")
    pairs = build_pairs(recs, policy).pairs
    assert {(p.target, p.reference) for p in pairs} == {
        ("m1|k", "m2|k"), ("m2|k", "m1|k"), ("m1|j", "m3|j"), ("m3|j", "m1|j")
    }
    assert verify_splits(pairs, recs) == []


def test_lonely_target_reported():
    recs = [_record("m1", "k"), _record("m1#kick", "k", parent="m1")]
    policy = SplitPolicy({"train": {"k"}}, {"train": {"m1"}}, mode="enumerate")
    res = build_pairs(recs, policy)
    assert res.pairs == [] and len(res.unpaired) == 2


def test_sample_mode_needs_rng_and_draws_k():
    recs = [_record(f"m{i}", "k") for i in range(5)]
    policy = SplitPolicy({"train": {"k"}}, {"train": {f"m{i}" for i in range(5)}}, k=2)
    with pytest.raises(ValueError):
        build_pairs(recs, policy)
    pairs = build_pairs(recs, policy, np.random.default_rng(0)).pairs
    assert len(pairs) == 10


def test_verify_detects_violations():
    recs = [_record("m1", "k"), _record("m2", "k"), _record("m2", "j"), _record("m1#snare", "k", parent="m1")]
    bad = [
        PairRecord("m1|k", "m2|j", "k", "train"),
        PairRecord("m1|k", "m1#snare|k", "k", "train"),
        PairRecord("m1|k", "m2|k", "k", "test"),
        PairRecord("m1|k", "zz|k", "k", "train"),
    ]
    msgs = verify_splits(bad, recs)
    text = "\n".join(msgs)
    assert "different kit_ids" in text
    assert "share MIDI m1" in text
    assert "kit k appears in several splits" in text
    assert "midi m1 appears in several splits" in text
    assert "unknown record" in text


@st.composite
def manifests(draw):
    n_kits = draw(st.integers(3, 6))
    n_midis = draw(st.integers(3, 10))
    seed = draw(st.integers(0, 2**32 - 1))
    mode = draw(st.sampled_from(["sample", "enumerate"]))
    k = draw(st.integers(1, 3))
    kits = [f"k{i}" for i in range(n_kits)]
    midis = [f"m{i}" for i in range(n_midis)]
    policy = SplitPolicy.random(kits, midis, seed=seed, mode=mode, k=k)
    density = draw(st.floats(0.3, 1.0))
    rng = np.random.default_rng(seed)
    records = [_record(m, kk) for m in midis for kk in kits if rng.random() < density]
    return policy, records, seed


@settings(max_examples=100, deadline=None)
@given(manifests())
def test_random_policies_give_clean_pairs(case):
    policy, records, seed = case
    pairs, unpaired = build_pairs(records, policy, np.random.default_rng(seed))
    assert verify_splits(pairs, records) == []
    lookup = {r.key: r for r in records}
    for p in pairs:
        t, r = lookup[p.target], lookup[p.reference]
        assert t.kit_id == r.kit_id == p.kit_id
        assert t.parent != r.parent
        assert policy.split_of(t) == policy.split_of(r) == p.split
    if policy.mode == "sample":
        per_target = {}
        for p in pairs:
            per_target[p.target] = per_target.get(p.target, 0) + 1
        assert max(per_target.values(), default=0) <= policy.k
    paired = {p.target for p in pairs} | {k for k, _ in unpaired}
    assert paired == {r.key for r in records if policy.split_of(r) is not None}


# --------------------------------------------------------------------------
# Manifests and the toy corpus


def test_manifest_roundtrip(tmp_path, small_corpus):
    m = small_corpus.manifest
    write_manifest(tmp_path / "m.jsonl", m)
    back = read_manifest(tmp_path / "m.jsonl")
    assert back.records == sorted(m.records, key=lambda r: r.key)
    assert sorted(back.pairs, key=lambda p: (p.target, p.reference)) == sorted(
        m.pairs, key=lambda p: (p.target, p.reference))
    assert back.policy == m.policy
    assert back.header["schema_version"] == 1
    # writing is deterministic
    write_manifest(tmp_path / "n.jsonl", back)
    assert (tmp_path / "n.jsonl").read_text() == (tmp_path / "m.jsonl").read_text()


def test_manifest_rejects_bad_lines(tmp_path):
    (tmp_path / "a.jsonl").write_text('{"type": "header", "schema_version": 1}\n{"type": "what"}\n')
    with pytest.raises(ValueError):
        read_manifest(tmp_path / "a.jsonl")
    (tmp_path / "b.jsonl").write_text('{"type": "header", "schema_version": 99}\n')
    with pytest.raises(ValueError):
        read_manifest(tmp_path / "b.jsonl")


def test_toy_corpus_integrity(small_corpus):
    m = small_corpus.manifest
    assert verify_splits(m.pairs, m.records) == []
    assert all(m.policy.split_of(r) is not None for r in m.records)
    for s in SPLITS:
        assert m.split_pairs(s)
    test_kits = {r.kit_id for r in m.split_records("test")}
    assert not test_kits & {r.kit_id for r in m.split_records("train")}
    for r in m.records:
        assert set(r.grids) == {16, 32, 64}
        assert all(g.is_valid() for g in r.grids.values())
        assert 60 <= r.tempo <= 70


def test_default_toy_corpus_shape():
    c = build_toy_corpus()
    counts = {s: len(c.manifest.split_pairs(s)) for s in SPLITS}
    assert len(c.records) == 2 * 48 + 8 + 8
    assert counts == {"train": 2 * 48 * 47, "validation": 56, "test": 56}
    assert verify_splits(c.manifest.pairs, c.records) == []


def test_toy_corpus_deterministic_and_save_load(tmp_path, small_corpus):
    again = build_toy_corpus(n_kits=4, n_patterns=12, seed=3, midi_split=(6, 3, 3))
    assert again.records == small_corpus.records
    key = small_corpus.records[0].key
    z = small_corpus.latent(key)
    assert z.shape == (frames_for_duration(small_corpus.records[0].duration), LATENT_DIM)
    small_corpus.save(tmp_path / "c")
    loaded = ToyCorpus.load(tmp_path / "c")
    assert loaded.kits == small_corpus.kits
    np.testing.assert_array_equal(loaded.latent(key), z)


def test_generated_patterns_fit_two_bars():
    rng = np.random.default_rng(0)
    for style in ("Beat", "Fill"):
        for _ in range(20):
            bpm = float(rng.uniform(60, 70))
            ev = generate_pattern(rng, style, bpm)
            assert ev and all(0 <= e.onset_time < 8 * 60 / bpm for e in ev)
    with pytest.raises(ValueError):
        generate_pattern(rng, "Solo", 60.0)


def test_split_records_without_policy():
    recs = [_record("m1", "k"), _record("m2", "k")]
    pairs = [PairRecord("m1|k", "m2|k", "k", "test")]
    m = Manifest({}, recs, pairs)
    assert [r.key for r in m.split_records("test")] == ["m1|k"]
