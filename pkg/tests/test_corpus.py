from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spoofqa.audio import read_wav
from spoofqa.corpus import (
    DuplicateUtteranceError,
    InsufficientSpoofError,
    Manifest,
    ManifestParseError,
    SubsetManifest,
    SynthConfig,
    UtteranceRecord,
    build_balanced_subset,
    gen_synthetic_corpus,
    load_manifest,
    load_subset,
    make_asv19_like_manifest,
    save_manifest,
    save_subset,
)


def _rec(uid, label="bonafide", attack="-", split="train"):
    return UtteranceRecord(uid, f"clips/{uid}.wav", label, attack, split)


# --- pitch-track oracle: autocorrelation with parabolic peak interpolation ---

def _pitch_track_hz(samples: np.ndarray, fs: int = 16000) -> np.ndarray:
    frame, hop = 1024, 512
    lo, hi = int(fs / 320), int(fs / 70)
    pitches = []
    for start in range(0, samples.size - frame, hop):
        x = samples[start : start + frame]
        x = x - x.mean()
        ac = np.correlate(x, x, "full")[frame - 1 :]
        if ac[0] <= 0:
            continue
        lag = lo + int(np.argmax(ac[lo:hi]))
        if 0 < lag < ac.size - 1:
            alpha, beta, gamma = ac[lag - 1], ac[lag], ac[lag + 1]
            denom = alpha - 2 * beta + gamma
            if denom != 0:
                lag = lag + 0.5 * (alpha - gamma) / denom
        pitches.append(fs / lag)
    return np.asarray(pitches)


def test_load_manifest_empty(tmp_path):
    p = tmp_path / "m.tsv"
    p.write_text("")
    assert len(load_manifest(p)) == 0


def test_load_manifest_two_lines(tmp_path):
    p = tmp_path / "m.tsv"
    p.write_text("u1\ta/u1.wav\tbonafide\t-\ttrain\nu2\ta/u2.wav\tspoof\tA01\ttrain\n")
    m = load_manifest(p)
    assert len(m) == 2
    assert m.entries[0] == UtteranceRecord("u1", "a/u1.wav", "bonafide", "-", "train")
    assert m.entries[1].attack_id == "A01"


def test_load_manifest_bad_label_names_line(tmp_path):
    p = tmp_path / "m.tsv"
    p.write_text("u1\ta/u1.wav\tfake\t-\ttrain\n")
    with pytest.raises(ManifestParseError, match="line 1"):
        load_manifest(p)


def test_load_manifest_duplicate_id(tmp_path):
    p = tmp_path / "m.tsv"
    p.write_text("u1\ta\tbonafide\t-\ttrain\nu1\tb\tbonafide\t-\ttrain\n")
    with pytest.raises(DuplicateUtteranceError):
        load_manifest(p)


def test_manifest_round_trip(tmp_path):
    m = Manifest([_rec("u1"), _rec("u2", "spoof", "A03", "dev")])
    p = tmp_path / "m.tsv"
    save_manifest(m, p)
    back = load_manifest(p)
    assert back.entries == m.entries


def test_record_invariants():
    with pytest.raises(ValueError):
        UtteranceRecord("u", "p", "spoof", "-", "train")
    with pytest.raises(ValueError):
        UtteranceRecord("u", "p", "bonafide", "A01", "train")
    with pytest.raises(ValueError):
        UtteranceRecord("u", "p", "bonafide", "-", "test")


def test_balanced_subset_small_even_split():
    entries = [_rec(f"b{i}") for i in range(4)]
    entries += [_rec(f"sA{i}", "spoof", "A", "train") for i in range(10)]
    entries += [_rec(f"sB{i}", "spoof", "B", "train") for i in range(10)]
    sub = build_balanced_subset(Manifest(entries), "train", seed=0)
    chosen = [u for u in sub.selected if u.startswith("s")]
    assert len([u for u in sub.selected if u.startswith("b")]) == 4
    assert len([u for u in chosen if u.startswith("sA")]) == 2
    assert len([u for u in chosen if u.startswith("sB")]) == 2


def test_balanced_subset_deterministic():
    entries = [_rec(f"b{i}") for i in range(6)]
    entries += [_rec(f"s{a}{i}", "spoof", a, "train") for a in "ABC" for i in range(9)]
    m = Manifest(entries)
    s1 = build_balanced_subset(m, "train", seed=42)
    s2 = build_balanced_subset(m, "train", seed=42)
    assert s1.selected == s2.selected
    s3 = build_balanced_subset(m, "train", seed=43)
    assert s3.selected != s1.selected
    assert len(s3.selected) == len(s1.selected)


def test_balanced_subset_insufficient_spoof():
    entries = [_rec(f"b{i}") for i in range(5)]
    entries += [_rec(f"s{i}", "spoof", "A", "train") for i in range(3)]
    with pytest.raises(InsufficientSpoofError) as err:
        build_balanced_subset(Manifest(entries), "train", seed=0)
    assert err.value.deficit == 2


def test_balanced_subset_asv19_train_counts():
    m = make_asv19_like_manifest()
    sub = build_balanced_subset(m, "train", seed=1)
    picked = [u for u in sub.selected]
    bona = [u for u in picked if "_bona_" in u]
    spoof = [u for u in picked if "_bona_" not in u]
    assert len(bona) == 2580
    assert len(spoof) == 2580
    per_attack = {}
    for u in spoof:
        per_attack[u.split("_")[1]] = per_attack.get(u.split("_")[1], 0) + 1
    assert per_attack == {f"A{i:02d}": 430 for i in range(1, 7)}


def test_balanced_subset_remainder_lexicographic():
    # 7 bonafide over 3 attacks -> quotas 3,2,2 with the extra on attack "A"
    entries = [_rec(f"b{i}") for i in range(7)]
    entries += [_rec(f"s{a}{i}", "spoof", a, "train") for a in "CAB" for i in range(5)]
    sub = build_balanced_subset(Manifest(entries), "train", seed=9)
    counts = {}
    for u in sub.selected:
        if u.startswith("s"):
            counts[u[1]] = counts.get(u[1], 0) + 1
    assert counts == {"A": 3, "B": 2, "C": 2}


def test_subset_serialization_round_trip(tmp_path):
    entries = [_rec("b0"), _rec("sA0", "spoof", "A", "train")]
    m = Manifest(entries, name="mini", source_path="mini.tsv")
    sub = build_balanced_subset(m, "train", seed=5)
    p = tmp_path / "sub.txt"
    save_subset(sub, p)
    back = load_subset(p)
    assert back.selected == sub.selected
    assert back.seed == 5
    assert back.base_path == "mini.tsv"


def test_subset_to_manifest():
    entries = [_rec("b0"), _rec("b1"), _rec("sA0", "spoof", "A", "train"), _rec("sA1", "spoof", "A", "train")]
    m = Manifest(entries)
    sub = build_balanced_subset(m, "train", seed=5)
    sel = sub.to_manifest(m)
    assert len(sel) == 4
    labels = [e.label for e in sel.entries]
    assert labels.count("bonafide") == labels.count("spoof") == 2


def test_gen_corpus_counts_and_families(tmp_path):
    cfg = SynthConfig(n_bonafide=6, n_spoof=6, duration_s=0.5, artifact_families=("glitch", "monotone"), seed=7)
    m = gen_synthetic_corpus(cfg, tmp_path / "c")
    assert len(m) == 12
    spoof = [e for e in m.entries if e.label == "spoof"]
    assert len(spoof) == 6
    fams = sorted(e.attack_id for e in spoof)
    assert fams.count("glitch") == 3 and fams.count("monotone") == 3
    wavs = list((tmp_path / "c").glob("*.wav"))
    assert len(wavs) == 12
    assert (tmp_path / "c" / "manifest.tsv").exists()


def test_gen_corpus_glitch_first_difference_oracle(tmp_path):
    cfg = SynthConfig(n_bonafide=4, n_spoof=8, duration_s=0.5, artifact_families=("glitch",), seed=3)
    m = gen_synthetic_corpus(cfg, tmp_path / "c")
    for e in m.entries:
        w = read_wav(e.path)
        jumps = int(np.sum(np.abs(np.diff(w.samples)) > 0.4))
        if e.attack_id == "glitch":
            assert jumps >= 5, e.utt_id
        else:
            assert jumps == 0, e.utt_id


def test_gen_corpus_monotone_pitch_oracle(tmp_path):
    cfg = SynthConfig(n_bonafide=5, n_spoof=5, duration_s=1.0, artifact_families=("monotone",), seed=11)
    m = gen_synthetic_corpus(cfg, tmp_path / "c")
    bona_stds, mono_stds = [], []
    for e in m.entries:
        track = _pitch_track_hz(read_wav(e.path).samples)
        assert track.size > 4
        (bona_stds if e.label == "bonafide" else mono_stds).append(float(np.std(track)))
    for mono in mono_stds:
        assert mono < 1.0
        for bona in bona_stds:
            assert mono < bona


def test_gen_corpus_reproducible(tmp_path):
    cfg = SynthConfig(n_bonafide=3, n_spoof=3, duration_s=0.5, seed=21)
    m1 = gen_synthetic_corpus(cfg, tmp_path / "a")
    m2 = gen_synthetic_corpus(cfg, tmp_path / "b")
    for e1, e2 in zip(m1.entries, m2.entries):
        assert e1.utt_id == e2.utt_id
        b1 = hashlib.sha256(Path(e1.path).read_bytes()).hexdigest()
        b2 = hashlib.sha256(Path(e2.path).read_bytes()).hexdigest()
        assert b1 == b2


def test_gen_corpus_threshold_detector_separates_glitch(tmp_path):
    cfg = SynthConfig(n_bonafide=10, n_spoof=10, duration_s=0.5, artifact_families=("glitch",), seed=13)
    m = gen_synthetic_corpus(cfg, tmp_path / "c")
    for e in m.entries:
        jumps = int(np.sum(np.abs(np.diff(read_wav(e.path).samples)) > 0.4))
        predicted = "spoof" if jumps >= 5 else "bonafide"
        assert predicted == e.label


def test_synth_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(n_bonafide=-1, n_spoof=0)
    with pytest.raises(ValueError):
        SynthConfig(n_bonafide=1, n_spoof=1, duration_s=0.2)
    with pytest.raises(ValueError):
        SynthConfig(n_bonafide=1, n_spoof=1, artifact_families=("sparkle",))
    with pytest.raises(ValueError):
        SynthConfig(n_bonafide=1, n_spoof=1, artifact_families=())


@settings(max_examples=60, deadline=None)
@given(
    n_bona=st.integers(1, 40),
    attack_pools=st.lists(st.integers(0, 25), min_size=1, max_size=6),
    seed=st.integers(0, 2**31),
)
def test_balanced_subset_properties(n_bona, attack_pools, seed):
    entries = [_rec(f"b{i:03d}") for i in range(n_bona)]
    for a, pool in enumerate(attack_pools):
        entries += [_rec(f"s{a}{i:03d}", "spoof", f"T{a}", "train") for i in range(pool)]
    m = Manifest(entries)
    if sum(attack_pools) == 0:
        with pytest.raises(ValueError):
            build_balanced_subset(m, "train", seed)
        return
    try:
        sub = build_balanced_subset(m, "train", seed)
    except InsufficientSpoofError:
        # legal whenever the total pool or one attack's pool cannot cover the
        # even quota; evenness is never traded away for coverage
        return
    chosen = sub.to_manifest(m)
    bona = [e for e in chosen.entries if e.label == "bonafide"]
    spoof = [e for e in chosen.entries if e.label == "spoof"]
    assert len(bona) == n_bona
    assert len(spoof) == n_bona
    per_attack: dict[str, int] = {}
    for e in spoof:
        per_attack[e.attack_id] = per_attack.get(e.attack_id, 0) + 1
    counts = sorted(per_attack.values())
    assert counts[-1] - counts[0] <= 1
    assert len(set(u.utt_id for u in chosen.entries)) == len(chosen.entries)


def test_asv19_like_manifest_shape():
    m = make_asv19_like_manifest()
    train = m.for_split("train")
    dev = m.for_split("dev")
    ev = m.for_split("eval")
    assert sum(1 for e in train if e.label == "bonafide") == 2580
    assert sum(1 for e in dev if e.label == "bonafide") == 2548
    assert sum(1 for e in ev if e.label == "bonafide") == 7355
    assert {e.attack_id for e in train if e.label == "spoof"} == {f"A{i:02d}" for i in range(1, 7)}
    assert {e.attack_id for e in ev if e.label == "spoof"} == {f"A{i:02d}" for i in range(7, 20)}
