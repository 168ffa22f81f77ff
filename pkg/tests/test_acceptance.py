"""Acceptance suite: one test per criterion, each printing a pass/fail line.

The lines are also repeated in the terminal summary (see conftest.py).
Criteria 5 and 6 share one full-size training run through the CLI, so this
module takes roughly half an hour on one CPU core.
"""

import json
import time

import numpy as np
import pytest

from codecdenoise import autodiff as ad
from codecdenoise.audio_io import Waveform, read_wav, synth_tone_mix, write_wav
from codecdenoise.cli import main
from codecdenoise.codec import (
    CodecSpec,
    RvqSpec,
    ToyCodecTrainConfig,
    build_codec,
    pretrain_toy_codec,
    roundtrip_si_sdr,
    rvq_quantize_frames,
    train_rvq,
)
from codecdenoise.config import codec_spec, load_config, unet_config
from codecdenoise.degrade import (
    DatasetConfig,
    DegradationKind,
    DegradationRecord,
    ManifestEntry,
    build_dataset,
    mix_at_snr,
    white_noise,
)
from codecdenoise.denoiser import UNetConfig, build_unet, unet_forward
from codecdenoise.gradcheck import run_suite
from codecdenoise.losses import CurriculumSchedule, si_sdr_db
from codecdenoise.metrics import evaluate, file_metrics, si_sdr, snr_db, stoi
from codecdenoise.trainer import PairSet, TrainConfig, train

E2E_CONFIG = {
    "dataset": {"kinds": ["WhiteNoise", "NcArtifact", "SyntheticReverb"], "variants_per_chunk": 1},
    "trainer": {"epochs": 30, "batch_size": 16, "lr": 1e-4},
    "codec": {"kind": "IdentityFrame"},
}


# ------------------------------------------------------------------ 1


def test_c1_gradient_correctness(criterion):
    t0 = time.perf_counter()
    results = run_suite(h=1e-4, tol=1e-4)
    seconds = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.max_rel_error)
    ok = all(r.passed for r in results) and "unet_tiny" in {r.name for r in results} and seconds < 120
    criterion(1, ok, f"{len(results)} cases, worst {worst.name} rel {worst.max_rel_error:.2e}, {seconds:.1f} s")
    assert ok, [r for r in results if not r.passed]


# ------------------------------------------------------------------ 2


def test_c2_snr_mixing(criterion):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for i in range(1000):
        n = int(rng.integers(100, 20_000))
        clean = Waveform(rng.standard_normal(n) * rng.uniform(0.01, 1.0), 44100)
        noise = Waveform(rng.standard_normal(n) * rng.uniform(0.01, 1.0), 44100)
        target = float(rng.uniform(0.0, 15.0))
        worst = max(worst, abs(snr_db(clean, mix_at_snr(clean, noise, target)) - target))
    ok = worst < 1e-6
    criterion(2, ok, f"1000 triples, max |measured - target| = {worst:.2e} dB")
    assert ok


# ------------------------------------------------------------------ 3


def test_c3_si_sdr(criterion):
    hand = float(si_sdr_db(np.array([1.0, 1.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0, 0.0]), eps=0.0).data)
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(20):
        y = synth_tone_mix(int(rng.integers(1 << 30)), 2.0).samples.astype(np.float64)
        y_hat = y + 0.3 * rng.standard_normal(len(y))
        base = float(si_sdr_db(y_hat, y).data)
        for alpha in (0.1, 1.0, 10.0):
            worst = max(worst, abs(float(si_sdr_db(alpha * y_hat, y).data) - base))
            worst = max(worst, abs(si_sdr(y, alpha * y_hat) - si_sdr(y, y_hat)))
    ok = hand == 0.0 and worst < 1e-9
    criterion(3, ok, f"hand example {hand!r} dB, max scale drift {worst:.2e} dB")
    assert ok


# ------------------------------------------------------------------ 4


def test_c4_architecture(criterion):
    cfg = load_config()
    ucfg = unet_config(cfg, codec_spec(cfg).c_lat)
    params = build_unet(ucfg)
    trace = {}
    shapes = {}
    with ad.no_grad():
        for f in (32, 100, 172, 4096):
            x = np.random.default_rng(f).standard_normal((1, ucfg.in_channels, f)).astype(np.float32)
            shapes[f] = unet_forward(x, params, ucfg, trace if f == 32 else None).shape
    ok = (
        trace["enc_channels"] == [64, 128, 256, 512, 512]
        and trace["bottleneck_channels"] == 512
        and all(s == (1, ucfg.in_channels, f) for f, s in shapes.items())
    )
    criterion(4, ok, f"trace {trace['enc_channels']} bottleneck {trace['bottleneck_channels']}, shapes kept for {sorted(shapes)}")
    assert ok


# ------------------------------------------------------------- 5 and 6


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    cfg_path = root / "e2e.json"
    cfg_path.write_text(json.dumps(E2E_CONFIG))
    data, run = root / "data", root / "run"
    common = ["--config", str(cfg_path), "--log-level", "WARNING"]
    t0 = time.perf_counter()
    assert main(["synth-data", "--tones", "300", "--out", str(data), *common]) == 0
    assert main(["train", "--data", str(data), "--out", str(run), "--deterministic", *common]) == 0
    report = root / "report.json"
    assert main(["evaluate", "--data", str(data), "--checkpoint", str(run / "last.adnc"), "--json", str(report), *common]) == 0
    seconds = time.perf_counter() - t0
    log = [json.loads(line) for line in (run / "train_log.jsonl").read_text().splitlines()]
    return log, json.loads(report.read_text()), seconds


@pytest.mark.slow
def test_c5_curriculum(criterion, e2e):
    log, _, _ = e2e
    weights = [r["w_sisdr"] for r in log]
    ok = len(weights) == 30 and all(w == 0.0 for w in weights[:5]) and all(w > 0.0 for w in weights[5:])
    criterion(5, ok, f"SI-SDR weight by epoch {weights[:7]} ...")
    assert ok


@pytest.mark.slow
def test_c6_end_to_end(criterion, e2e):
    log, report, seconds = e2e
    val_first, val_last = log[0]["val_total"], log[-1]["val_total"]
    noisy = report["means"]["noisy"]["si_sdr_db"]
    denoised = report["means"]["denoised"]["si_sdr_db"]
    ok = len(log) == 30 and val_last < val_first and denoised >= noisy + 3.0 and seconds < 45 * 60
    criterion(
        6,
        ok,
        f"val {val_first:.4f} -> {val_last:.4f}; test SI-SDR noisy {noisy:.2f} dB, denoised {denoised:.2f} dB "
        f"({report['n_files']} files); {seconds / 60:.1f} min",
    )
    assert ok


# ------------------------------------------------------------------ 7


def test_c7_codec_contracts(criterion):
    ident = build_codec(CodecSpec("IdentityFrame", hop=256))
    rng = np.random.default_rng(7)
    signal = rng.uniform(-1, 1, 10_000).astype(np.float32)
    lossless = all(
        ident.decode(ident.encode(Waveform(signal[:n], 44100))).samples.tobytes() == signal[:n].tobytes()
        for n in range(1, 10_001)
    )

    corpus = [synth_tone_mix(i, 2.0) for i in range(100)]
    toy, rep = pretrain_toy_codec(corpus, ToyCodecTrainConfig())
    held_out = [synth_tone_mix(10_000 + i, 2.0) for i in range(10)]
    rt = roundtrip_si_sdr(toy, held_out)

    frames = rng.standard_normal((2000, 16))
    books = train_rvq(frames, RvqSpec(stages=4, codebook_size=32), seed=7)
    _, _, norms = rvq_quantize_frames(frames, books)
    monotone = bool(np.all(np.diff(norms, axis=1) <= 0.0))
    _, _, exact = rvq_quantize_frames(books[0][1:], books)
    zero = bool(np.all(exact[:, -1] == 0.0))

    ok = lossless and rep.l1_after < rep.l1_before and rt >= 15.0 and monotone and zero
    criterion(
        7,
        ok,
        f"identity lossless {lossless}; toy L1 {rep.l1_before:.4f} -> {rep.l1_after:.4f}, held-out round trip "
        f"{rt:.2f} dB; RVQ monotone {monotone}, codeword residual zero {zero}",
    )
    assert ok


# ------------------------------------------------------------------ 8


def _tone_dir(path, n):
    path.mkdir(parents=True)
    for i in range(n):
        write_wav(path / f"t{i:02d}.wav", synth_tone_mix(500 + i, 2.0))
    return path


def _small_run(out, **kw):
    rng_pairs = lambda n, off: PairSet(  # noqa: E731
        [f"{off + i}" for i in range(n)],
        np.stack([(synth_tone_mix(off + i, 0.1).samples + 0.1 * white_noise(off + i, 4410).samples) for i in range(n)]),
        np.stack([synth_tone_mix(off + i, 0.1).samples for i in range(n)]),
    )
    cfg = TrainConfig(epochs=4, batch_size=4, lr=1e-3, mel_n_fft=256, mel_hop=64, n_mels=20,
                      schedule=CurriculumSchedule(2))
    ucfg = UNetConfig(in_channels=32, base_channels=8, levels=2, max_channels=16, norm_groups=2)
    return train(rng_pairs(10, 0), rng_pairs(4, 100), build_codec(CodecSpec("IdentityFrame", hop=32)), ucfg, cfg, out, **kw)


def test_c8_determinism_and_resume(criterion, tmp_path):
    from threadpoolctl import threadpool_limits

    tones = _tone_dir(tmp_path / "tones", 6)
    cfg = DatasetConfig(clean_dirs=[str(tones)], variants_per_chunk=2, global_seed=11)
    build_dataset(cfg, tmp_path / "d1")
    build_dataset(cfg, tmp_path / "d2", threads=3)
    manifest_same = (tmp_path / "d1/manifest.jsonl").read_bytes() == (tmp_path / "d2/manifest.jsonl").read_bytes()
    wavs_same = all(
        p.read_bytes() == (tmp_path / "d2" / p.relative_to(tmp_path / "d1")).read_bytes()
        for p in sorted((tmp_path / "d1").rglob("*.wav"))
    )

    with threadpool_limits(limits=1):
        full = _small_run(tmp_path / "a")
        _small_run(tmp_path / "b")
        _small_run(tmp_path / "c", stop_after_epoch=1)
        resumed = _small_run(tmp_path / "c", resume=tmp_path / "c/last.adnc")
    ckpt_same = (tmp_path / "a/last.adnc").read_bytes() == (tmp_path / "b/last.adnc").read_bytes()
    resume_same = (tmp_path / "a/last.adnc").read_bytes() == (tmp_path / "c/last.adnc").read_bytes() and all(
        resumed.model.params[k].data.tobytes() == v.data.tobytes() for k, v in full.model.params.items()
    )
    ok = manifest_same and wavs_same and ckpt_same and resume_same
    criterion(8, ok, f"manifest {manifest_same}, wavs {wavs_same}, checkpoints {ckpt_same}, resume {resume_same}")
    assert ok


# ------------------------------------------------------------------ 9


def test_c9_stoi_sanity(criterion, tmp_path):
    selfs = []
    for i in range(50):
        write_wav(tmp_path / f"c{i}.wav", synth_tone_mix(900 + i, 1.0))
        y = read_wav(tmp_path / f"c{i}.wav")
        selfs.append(stoi(y, y))
    probe = synth_tone_mix(3, 2.0)
    noise = white_noise(7, len(probe))
    grid = [stoi(probe, mix_at_snr(probe, noise, s)) for s in (20, 10, 0, -10)]
    monotone = all(a >= b for a, b in zip(grid, grid[1:]))
    ok = min(selfs) >= 0.99 and monotone
    criterion(9, ok, f"min self-score {min(selfs):.4f} over 50 files; STOI at 20/10/0/-10 dB {[round(g, 4) for g in grid]}")
    assert ok


# ----------------------------------------------------------------- 10


def test_c10_evaluation_protocol(criterion, tmp_path):
    # 5000 entries over 100 distinct wav pairs keep the fixture small; ids are unique
    pairs = []
    for j in range(100):
        clean = synth_tone_mix(2000 + j, 0.5)
        noisy = mix_at_snr(clean, white_noise(3000 + j, len(clean)), float(j % 16))
        write_wav(tmp_path / f"c{j}.wav", clean)
        write_wav(tmp_path / f"n{j}.wav", noisy)
        pairs.append(file_metrics(read_wav(tmp_path / f"c{j}.wav"), read_wav(tmp_path / f"n{j}.wav")))
    rec = [DegradationRecord(DegradationKind.WhiteNoise, {})]
    entries = [
        ManifestEntry(f"e{i:05d}", f"c{i % 100}.wav", f"n{i % 100}.wav", "test", rec, float(i % 16), 0, 44100, 22050)
        for i in range(5000)
    ]
    a = evaluate(entries, tmp_path, n=1000, seed=0)
    b = evaluate(list(reversed(entries)), tmp_path, n=1000, seed=0)
    c = evaluate(entries, tmp_path, n=1000, seed=1)
    ids = [r["id"] for r in a.rows]
    distinct = len(ids) == 1000 == len(set(ids)) and a.n_files == 1000
    deterministic = a.to_json() == b.to_json() and ids != [r["id"] for r in c.rows]
    expected = {
        m: float(np.mean([pairs[int(i[1:]) % 100][m] for i in ids])) for m in ("si_sdr_db", "stoi", "snr_db")
    }
    means_ok = all(abs(a.means["noisy"][m] - v) < 1e-9 for m, v in expected.items())
    ok = distinct and deterministic and means_ok
    criterion(10, ok, f"{len(set(ids))} distinct of 5000, deterministic {deterministic}, arithmetic means {means_ok}")
    assert ok
