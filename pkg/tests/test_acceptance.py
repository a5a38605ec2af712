"""Acceptance criteria 1 to 8, each reported as one pass/fail line in the terminal summary.

Thresholds are fixed here and never tuned to the outcome. The learning probe
runs for real (2000 steps on four one-second clips, twice for the determinism
check), so this module takes about an hour on a single CPU.
"""
import math
import time

import numpy as np
import pytest
import torch
from scipy import stats

from sdnet.config import ModelConfig
from sdnet.data import SNR_RANGE_DB, build_manifest, measured_snr_db, mix_at_snr, rms
from sdnet.dsp import HR_STFT, Waveform, istft, read_wav, resample_down, stft, upsample_spectral, write_wav
from sdnet.gradsuite import grad_check_all
from sdnet.metrics import lsd, si_sdr, stoi
from sdnet.model import LatticeBlock, param_count
from sdnet.train import ABLATION_GRID, TrainConfig, overfit_probe, run_ablations
from tests.oracles.lattice_reference import lattice_block as lattice_oracle
from tests.oracles.param_audit import gate_total, hand_count, lb_total
from tests.oracles.stoi_reference import stoi_reference

PROBE_STEPS = 2000
PROBE_PAIRS = 4


@pytest.fixture(scope="module")
def probe_runs(tmp_path_factory):
    """Two identical-seed runs of the learning probe, each with its final checkpoint bytes."""
    root = tmp_path_factory.mktemp("probe")
    runs = []
    for k in range(2):
        start = time.perf_counter()
        trainers = []
        report = overfit_probe(PROBE_PAIRS, PROBE_STEPS, train_cfg=TrainConfig(steps=PROBE_STEPS, batch_size=PROBE_PAIRS,
                                                                               seed=0), trainer_out=trainers)
        elapsed = time.perf_counter() - start
        path = root / f"run{k}.ckpt"
        trainers[0].save_checkpoint(path)
        runs.append((report, path.read_bytes(), elapsed))
    return runs


def test_criterion_1_lattice_block_matches_scalar_oracle(verdict):
    start = time.perf_counter()
    worst = 0.0
    shapes = [(2, 3, 3, 3), (3, 2, 4, 2), (2, 4, 2, 5), (4, 3, 3, 4), (1, 2, 5, 3)]
    for seed, (c, hidden, h, w) in enumerate(shapes):
        torch.manual_seed(seed)
        block = LatticeBlock(c, hidden).double()
        x = torch.randn(1, c, h, w, dtype=torch.float64)
        with torch.no_grad():
            ours = block(x)[0].numpy()
        params = {k: v.detach().double().numpy().tolist() for k, v in block.state_dict().items()}
        worst = max(worst, float(np.max(np.abs(ours - np.array(lattice_oracle(x[0].numpy().tolist(), params))))))
    elapsed = time.perf_counter() - start
    verdict(1, "lattice block vs scalar-loop oracle", worst < 1e-6 and elapsed < 5.0,
            f"max abs diff {worst:.2e} over {len(shapes)} tensors (< 1e-6), {elapsed:.1f} s (< 5 s)")


def test_criterion_2_gradient_suite(verdict):
    start = time.perf_counter()
    results = grad_check_all()
    elapsed = time.perf_counter() - start
    failed = [f"{g}/{r.op_name} {r.max_rel_error:.2e}" for g, r in results if not r.passed]
    worst = max(r.max_rel_error for _, r in results)
    groups = sorted({g for g, _ in results})
    verdict(2, "finite-difference gradient suite", not failed and elapsed < 300.0,
            f"{len(results) - len(failed)}/{len(results)} checks in {', '.join(groups)} at tol 1e-4, eps 1e-5, "
            f"worst {worst:.2e}, {elapsed:.0f} s (< 300 s)" + (f"; failed: {', '.join(failed)}" if failed else ""))


def test_criterion_3_dsp(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    x = Waveform(rng.standard_normal(80000), 16000)
    round_trip = float(np.max(np.abs(istft(stft(x, HR_STFT), HR_STFT, len(x)).samples - x.samples)))
    up = tuple(upsample_spectral(Waveform(rng.standard_normal(40000), 8000), 2, HR_STFT).data.shape)
    hr = tuple(stft(Waveform(rng.standard_normal(80000), 16000), HR_STFT).data.shape)
    n = np.arange(32000)
    tone = np.cos(2 * np.pi * 7000 * n / 16000)
    out = resample_down(Waveform(tone, 16000), 2).samples
    attenuation = -20 * math.log10(rms(out) / rms(tone))
    elapsed = time.perf_counter() - start
    passed = round_trip < 1e-6 and up == hr == (2, 257, 1251) and attenuation >= 40.0 and elapsed < 30.0
    verdict(3, "STFT round trip, spectral upsampling, decimation", passed,
            f"round trip {round_trip:.1e} (< 1e-6), shapes {list(up)} vs {list(hr)}, "
            f"7 kHz attenuation {attenuation:.1f} dB (>= 40), {elapsed:.1f} s (< 30 s)")


def test_criterion_4_mixing_fidelity(verdict, tmp_path):
    # 1000 manifest records of 0.05 s drawn from one minute of clean speech and noise
    rng = np.random.default_rng(1)
    for name, seed in (("clean", 2), ("noise", 3)):
        (tmp_path / name).mkdir()
        sig = rng.standard_normal(60 * 16000) * (0.1 if seed == 2 else 0.3)
        write_wav(tmp_path / name / f"{name}.wav", Waveform(sig, 16000))
    clip = 0.05
    manifest = build_manifest(tmp_path / "clean", tmp_path / "noise", 1000 * clip / 3600, seed=4, duration_s=clip)
    records = manifest.train + manifest.valid
    sources = {}
    worst = 0.0
    n = int(round(clip * 16000))
    for rec in records:
        for p in (rec.clean_path, rec.noise_path):
            if p not in sources:
                sources[p] = read_wav(p).samples
        clean = Waveform(sources[rec.clean_path][rec.clean_offset_samples:rec.clean_offset_samples + n], 16000)
        noise = Waveform(sources[rec.noise_path][rec.noise_offset_samples:rec.noise_offset_samples + n], 16000)
        mix = mix_at_snr(clean, noise, rec.snr_db)
        worst = max(worst, abs(measured_snr_db(mix.clean, mix.scaled_noise) - rec.snr_db))
    lo, hi = SNR_RANGE_DB
    ks = stats.kstest([r.snr_db for r in records], "uniform", args=(lo, hi - lo))
    passed = len(records) == 1000 and worst < 1e-6 and ks.pvalue > 0.01
    verdict(4, "mixing SNR fidelity and uniformity", passed,
            f"{len(records)} pairs, max |measured - requested| {worst:.1e} dB (< 1e-6), "
            f"KS vs U[{lo:g}, {hi:g}] p = {ks.pvalue:.3f} (> 0.01)")


def test_criterion_5_learning_probe(verdict, probe_runs):
    report, _, elapsed = probe_runs[0]
    ratio, gain = report.l_mstft_ratio, report.si_sdr_gain_db
    verdict(5, "overfit probe, 4 one-second pairs, 2000 steps, seed 0", ratio <= 0.2 and gain >= 3.0,
            f"final/initial l_mstft {ratio:.3f} (<= 0.2), si_sdr gain {gain:+.1f} dB (>= +3) "
            f"[enhanced {report.si_sdr_enhanced_db:+.1f}, upsampled noisy {report.si_sdr_baseline_db:+.1f}], "
            f"{elapsed / 60:.1f} min (target < 30 min)")


def test_criterion_6_ablation_plumbing(verdict):
    rows = run_ablations(steps=10)
    tiny = ModelConfig.tiny()
    counts = {r["config"]: r["params"] for r in rows}
    trained = all(r["steps"] == 10 and math.isfinite(r["final_total"]) for r in rows)
    audit = all(counts[name] == hand_count(tiny.with_ablation(g, lb)) for name, g, lb in ABLATION_GRID)
    deltas = {
        "+GConv - base": (counts["+GConv"] - counts["base"], gate_total(tiny)),
        "+LBs - base": (counts["+LBs"] - counts["base"], lb_total(tiny)),
        "+Both - +LBs": (counts["+Both"] - counts["+LBs"], gate_total(tiny)),
        "+Both - +GConv": (counts["+Both"] - counts["+GConv"], lb_total(tiny)),
    }
    exact = all(got == want for got, want in deltas.values())
    passed = [r["config"] for r in rows] == [g[0] for g in ABLATION_GRID] and trained and audit and exact
    verdict(6, "ablation grid builds, trains 10 steps, param deltas", passed,
            ", ".join(f"{k} {got} (expected {want})" for k, (got, want) in deltas.items())
            + f"; counts {counts}; base..+Both trained 10 finite steps: {trained}")
    assert counts["+Both"] == param_count(tiny)


def test_criterion_7_metric_sanity(verdict, stoi_fixture):
    rng = np.random.default_rng(5)
    x = stoi_fixture[0][1]
    identity = stoi(x, x)
    oracle_gap = max(abs(stoi(est, ref) - stoi_reference(ref.samples, est.samples, 16000)) for est, ref in stoi_fixture)
    ref, est = rng.standard_normal(16000), rng.standard_normal(16000)
    est += ref
    invariance = max(abs(si_sdr(a * est, ref) - si_sdr(est, ref)) for a in (1e-3, 0.5, 7.0, 1e3))
    lsd_gap = abs(lsd(Waveform(10 * x.samples, 16000), x) - 20.0)
    passed = abs(identity - 1) <= 1e-6 and oracle_gap < 0.01 and invariance < 1e-9 and lsd_gap < 1e-9
    verdict(7, "STOI, SI-SDR and LSD sanity", passed,
            f"stoi(x, x) = {identity:.9f}, max |stoi - oracle| over {len(stoi_fixture)} files {oracle_gap:.1e} (< 0.01), "
            f"si_sdr gain sweep spread {invariance:.1e} (< 1e-9), |lsd(10x, x) - 20| {lsd_gap:.1e}")


def test_criterion_8_determinism(verdict, probe_runs):
    (_, first, _), (_, second, _) = probe_runs
    verdict(8, "two identical-seed probe runs give identical checkpoints", first == second,
            f"final checkpoints {len(first)} and {len(second)} bytes, bytewise equal: {first == second}")
