from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from codecdenoise.audio_io import Waveform, resample, synth_tone_mix, write_wav
from codecdenoise.degrade import DegradationKind, DegradationRecord, ManifestEntry, mix_at_snr, white_noise
from codecdenoise.metrics import MetricReport, evaluate, select_subset, si_sdr, snr_db, stoi

# Reference STOI values from an independent implementation (pystoi 0.4.1),
# computed once on 10 kHz signals and frozen here.  Key: (tone seed, SNR dB).
STOI_REFERENCE = {
    (0, 20): 0.4712, (0, 0): 0.3328, (0, -10): 0.2127,
    (1, 20): 0.5484, (1, 0): 0.3529, (1, -10): 0.1342,
    (2, 20): 0.4724, (2, 0): 0.3218, (2, -10): 0.1679,
}


@dataclass
class _Entry:
    id: str


def _noisy(seed, snr, seconds=2.0):
    c = synth_tone_mix(seed, seconds)
    return c, mix_at_snr(c, white_noise(7, len(c)), snr)


def test_snr_examples():
    c = np.random.default_rng(0).standard_normal(1000)
    assert snr_db(c, c) == 60.0
    assert abs(snr_db([1.0, 0.0], [1.0, 1.0])) < 1e-9
    clean, mix = _noisy(1, 0.0)
    assert abs(snr_db(clean, mix)) < 1e-6
    with pytest.raises(ValueError):
        snr_db([1.0, 0.0], [1.0])
    with pytest.raises(ValueError):
        snr_db([0.0, 0.0], [1.0, 0.0])


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), snr=st.floats(-10, 30))
def test_snr_inverts_mixing(seed, snr):
    clean, mix = _noisy(seed, snr, 0.2)
    assert abs(snr_db(clean, mix) - snr) < 1e-6


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 1000))
def test_time_reversal_invariance(seed):
    rng = np.random.default_rng(seed)
    c = rng.standard_normal(500)
    t = c + 0.3 * rng.standard_normal(500)
    assert abs(snr_db(c, t) - snr_db(c[::-1], t[::-1])) < 1e-9
    assert abs(si_sdr(c, t) - si_sdr(c[::-1], t[::-1])) < 1e-9


def test_stoi_self_and_sign_flip():
    c = synth_tone_mix(3, 2.0)
    assert stoi(c, c) >= 0.99
    # band envelopes are magnitudes, so a sign flip changes nothing
    assert stoi(c, Waveform(-c.samples, c.sample_rate)) <= stoi(c, c)


@pytest.mark.parametrize("key", sorted(STOI_REFERENCE))
def test_stoi_matches_reference(key):
    seed, snr = key
    clean, mix = _noisy(seed, snr)
    got = stoi(resample(clean, 10000).samples, resample(mix, 10000).samples, 10000)
    assert abs(got - STOI_REFERENCE[key]) < 2e-3


def test_stoi_monotone_in_snr():
    scores = [stoi(*_noisy(3, s)) for s in (20, 10, 0, -10)]
    assert all(a >= b for a, b in zip(scores, scores[1:]))


def test_stoi_too_short():
    c = np.ones(1000)
    with pytest.raises(ValueError):
        stoi(c, c, 10000)


def test_select_subset():
    entries = [_Entry(f"{i:05d}") for i in range(5000)]
    rng = np.random.default_rng(0)
    shuffled = [entries[i] for i in rng.permutation(5000)]
    a = select_subset(shuffled, 1000, 7)
    assert len({e.id for e in a}) == 1000
    assert [e.id for e in a] == sorted(e.id for e in a)
    # input order does not matter, only the seed
    assert [e.id for e in select_subset(entries, 1000, 7)] == [e.id for e in a]
    assert [e.id for e in select_subset(entries, 1000, 8)] != [e.id for e in a]
    assert len(select_subset(entries[:10], 1000, 0)) == 10
    with pytest.raises(ValueError):
        select_subset(entries, 0, 0)


def _dataset(tmp_path, n, snr=10.0):
    entries = []
    for i in range(n):
        clean, mix = _noisy(50 + i, snr, 0.5)
        write_wav(tmp_path / f"c{i}.wav", clean)
        write_wav(tmp_path / f"n{i}.wav", mix)
        rec = DegradationRecord(DegradationKind.WhiteNoise, {"seed": 7})
        entries.append(ManifestEntry(f"e{i:02d}", f"c{i}.wav", f"n{i}.wav", "test", [rec], snr, i, 44100, len(clean)))
    return entries


def test_evaluate_means_and_errors(tmp_path):
    entries = _dataset(tmp_path, 6)
    (tmp_path / "n3.wav").unlink()
    rep = evaluate(entries, tmp_path, n=1000, seed=0)
    assert rep.n_files == 5 and [e["id"] for e in rep.errors] == ["e03"]
    assert [r["id"] for r in rep.rows] == sorted(r["id"] for r in rep.rows)
    assert abs(rep.means["noisy"]["snr_db"] - 10.0) < 0.1
    for m in ("snr_db", "stoi", "si_sdr_db"):
        assert rep.means["noisy"][m] == pytest.approx(np.mean([r["noisy"][m] for r in rep.rows]), abs=1e-12)
    again = evaluate(entries, tmp_path, n=1000, seed=0)
    assert again.to_json() == rep.to_json()
    assert evaluate(entries, tmp_path, n=2, seed=1).n_files <= 2


def test_table_layout():
    means = {c: {"si_sdr_db": 4.5, "stoi": 0.59, "snr_db": 4.52} for c in ("noisy", "denoised")}
    text = MetricReport([], means, 1000, 0, 1000).table()
    lines = text.splitlines()
    assert lines[0].split()[0] == "Condition" and "STOI" in lines[0] and "SNR (dB)" in lines[0]
    assert lines[2].startswith("Noisy Input") and lines[3].startswith("Proposed")
    assert "replaces PESQ" in lines[-1]
