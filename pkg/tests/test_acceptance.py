"""
Acceptance suite: one PASS/FAIL line per headline criterion.

Run ``python tests/test_acceptance.py`` for the report alone. Under pytest the
same lines are repeated in the terminal summary. The training criteria
(marked ``slow``) need about 20 minutes on one CPU core; skip them with
``-m "not slow"``.
"""
from __future__ import annotations

import functools
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from sslsv import losses as L
from sslsv.audio_io import AudioStore, Waveform, load_wav, save_wav
from sslsv.augment import mix_at_snr, power, reverberate
from sslsv.eval import compute_eer, compute_min_dcf, extract_embedding, fine_tune, linear_probe, run_trials
from sslsv.features import stft_power
from sslsv.gradcheck import run_all
from sslsv.nn import deserialize, serialize
from sslsv.synth import make_corpus
from sslsv.trainer import apply_overrides, build_policy, fit, load_config

from oracles import dft_power, direct_convolution, oracle_dcf, oracle_eer

DESK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.cfg"
SEEDS = (0, 1, 2)
REPORT: list[str] = []


def record(name: str, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    REPORT.append(line)
    print(line, flush=True)
    return ok


# --- shared desk-scale experiments --------------------------------------------


@functools.lru_cache(maxsize=None)
def workdir() -> Path:
    return Path(tempfile.mkdtemp(prefix="sslsv-acceptance-"))


@functools.lru_cache(maxsize=None)
def corpus():
    """The 10-speaker, 200-utterance synthetic corpus with its 200-trial list."""
    return make_corpus(workdir() / "corpus", speakers=10, utts_per_speaker=20, n_trials=200, seed=7)


@functools.lru_cache(maxsize=None)
def audio() -> AudioStore:
    return AudioStore()


def desk_config(mu: float = 1.0, augment: bool = True, seed: int = 0):
    c = corpus()
    return apply_overrides(load_config(DESK_CONFIG), {
        "seed": str(seed), "model.seed": str(seed), "loss.vicreg.mu": str(mu),
        "augment.enabled": str(augment), "augment.noise_dir": str(c.noise_dir), "augment.rir_dir": str(c.rir_dir),
    })


@functools.lru_cache(maxsize=None)
def experiment(mu: float = 1.0, augment: bool = True, seed: int = 0) -> dict:
    """Train VICReg on the corpus; EERs are evaluated on the trial list after every epoch."""
    c = corpus()
    cfg = desk_config(mu, augment, seed)
    t0 = time.perf_counter()
    result = fit(c.train, cfg, trials=c.trials, audio=audio())
    wall = time.perf_counter() - t0
    eers = [r["eval_eer"] for r in result.metrics]
    return {
        "eers": eers,
        "best_eer": min(eers),
        "stds": [r["emb_std"] for r in result.metrics],
        "elapsed": np.cumsum([r["seconds"] for r in result.metrics]),
        "wall": wall,
        "best_model": result.best,
        "epochs": len(result.metrics),
    }


# --- criteria -------------------------------------------------------------------


def criterion_gradients() -> bool:
    results = run_all(seed=0)
    worst = max(results, key=lambda r: r.error)
    kinds = {r.name.split()[0].split("[")[0] for r in results}
    return record(
        "gradient correctness",
        all(r.error < 1e-5 for r in results),
        f"{len(results)} checks ({', '.join(sorted(kinds))}); worst {worst.name} {worst.error:.2e} < 1e-5",
    )


def criterion_metric_oracle() -> bool:
    mismatches = 0
    for seed in range(100):
        r = np.random.default_rng(seed)
        labels = r.integers(0, 2, 1000)
        scores = r.normal(size=1000) + labels * r.uniform(0, 2)
        if seed % 3 == 0:
            scores = np.round(scores, 1)
        s, lab = scores.tolist(), labels.tolist()
        mismatches += compute_eer(scores, labels)[0] != oracle_eer(s, lab)
        mismatches += compute_min_dcf(scores, labels)[2] != oracle_dcf(s, lab)
    return record("metric oracle equivalence", mismatches == 0,
                  f"EER and minDCF equal to brute-force sweeps on 100 seeds x 1000 scores ({mismatches} mismatches)")


def criterion_dsp() -> bool:
    rng = np.random.default_rng(0)
    x = rng.normal(size=8000)
    ref = dft_power(x)
    stft_err = np.max(np.abs(stft_power(x) - ref)) / np.max(ref)

    sig = rng.uniform(-0.5, 0.5, 2000)
    h = rng.normal(size=300) * np.exp(-np.arange(300) / 50)
    peak = int(np.argmax(np.abs(h)))
    conv = direct_convolution(sig, h)[peak : peak + sig.size]
    conv *= np.max(np.abs(sig)) / np.max(np.abs(conv))
    rev_err = np.max(np.abs(reverberate(Waveform(sig), Waveform(h)).samples - conv))

    snr_err = 0.0
    for snr in np.linspace(-5, 30, 36):
        clean = Waveform(rng.normal(scale=0.05, size=16000))
        trace = {}
        mix_at_snr(clean, Waveform(rng.normal(size=5000)), snr, rng, trace)
        measured = 10 * np.log10(power(clean.samples) / power(trace["gain"] * trace["noise"]))
        snr_err = max(snr_err, abs(measured - snr))

    frames = stft_power(np.zeros(32000)).shape[0]
    ok = stft_err < 1e-8 and rev_err < 1e-10 and snr_err < 1e-3 and frames == 198
    return record("DSP correctness", ok,
                  f"STFT vs DFT {stft_err:.1e} (<1e-8), reverb vs direct {rev_err:.1e} (<1e-10), "
                  f"SNR error {snr_err:.1e} dB (<1e-3), T={frames} (=198)")


def criterion_collapse() -> bool:
    off, on = experiment(mu=0.0), experiment(mu=1.0)
    first = next((i for i, s in enumerate(off["stds"]) if s < 0.1), None)
    collapsed = first is not None and first < 50
    kept = min(on["stds"]) > 0.5
    better = on["best_eer"] < off["best_eer"]
    return record(
        "collapse ablation", collapsed and kept and better,
        f"mu=0 emb_std {off['stds'][-1]:.3f} (<0.1 from epoch {first}); "
        f"mu=1 min emb_std {min(on['stds']):.3f} (>0.5); EER mu=1 {on['best_eer']:.1f}% < mu=0 {off['best_eer']:.1f}%",
    )


def _fmt(xs) -> str:
    return "[" + ", ".join(f"{x:.1f}" for x in xs) + "]"


def criterion_augmentation() -> bool:
    with_aug = [experiment(augment=True, seed=s)["best_eer"] for s in SEEDS]
    without = [experiment(augment=False, seed=s)["best_eer"] for s in SEEDS]
    gap = float(np.median(without) - np.median(with_aug))
    return record(
        "augmentation ablation", gap >= 5.0,
        f"median EER {np.median(with_aug):.1f}% with vs {np.median(without):.1f}% without "
        f"(gap {gap:.1f} >= 5 points; per seed {_fmt(with_aug)} vs {_fmt(without)})",
    )


def criterion_end_to_end() -> bool:
    run = experiment()
    hit = next((i for i, e in enumerate(run["eers"]) if e < 20.0), None)
    at = float(run["elapsed"][hit]) if hit is not None else float("inf")
    return record(
        "end-to-end desk-scale learning", at <= 600.0,
        f"EER {run['eers'][hit] if hit is not None else float('nan'):.1f}% < 20% after {at:.0f} s (<= 600 s); "
        f"best {run['best_eer']:.1f}% over {run['epochs']} epochs in {run['wall']:.0f} s",
    )


def criterion_composite_additivity() -> bool:
    rng = np.random.default_rng(0)
    worst = 0.0
    exact_alpha0 = True
    for _ in range(20):
        y, y2 = rng.normal(size=(2, 8, 16))
        z, z2 = rng.normal(size=(2, 8, 32))
        cfg = L.CompositeConfig()
        worst = max(
            worst,
            abs(L.comp1(y, y2, z, z2, cfg).value - (L.vicreg(y, y2).value + L.info_nce(z, z2).value)),
            abs(L.comp2(y, y2, z, z2, cfg).value - (L.info_nce(y, y2).value + L.vicreg(z, z2).value)),
            abs(L.reg_y(y, y2, cfg).value - (L.info_nce(y, y2).value + 0.1 * L.vicreg(y, y2).value)),
            abs(L.reg_z(z, z2, cfg).value - (L.info_nce(z, z2).value + 0.1 * L.vicreg(z, z2).value)),
        )
        zero = L.CompositeConfig(alpha=0.0)
        for reg, a, b in ((L.reg_y, y, y2), (L.reg_z, z, z2)):
            r, c = reg(a, b, zero), L.info_nce(a, b)
            exact_alpha0 &= r.value == c.value and np.array_equal(r.grad_a, c.grad_a) and np.array_equal(r.grad_b, c.grad_b)
    return record("composite additivity", worst < 1e-10 and exact_alpha0,
                  f"max deviation {worst:.1e} (<1e-10); alpha=0 equals InfoNCE bit-exactly: {exact_alpha0}")


def criterion_label_efficiency() -> bool:
    c = corpus()
    model = experiment()["best_model"]
    policy = build_policy(desk_config().augment)
    eers = {}
    for fraction in (0.1, 0.5, 1.0):
        tuned = fine_tune(model, c.train, fraction, seed=0, policy=policy, audio=audio())
        eers[fraction] = run_trials(tuned, c.trials, audio=audio())[1].eer
    store = audio()
    reps = np.stack([extract_embedding(model, store.get(c.train.resolve(e))) for e in c.train])
    probe = linear_probe(reps, [e.speaker_id for e in c.train], 1.0)
    emb = {p: extract_embedding(model, store.get(c.trials.resolve(p))) for t in c.trials for p in (t.enroll, t.test)}
    probe_eer = probe.evaluate(np.stack([emb[t.enroll] for t in c.trials]),
                               np.stack([emb[t.test] for t in c.trials]), c.trials.labels).eer
    e = [eers[f] for f in (0.1, 0.5, 1.0)]
    monotone = e[1] <= e[0] + 1.0 and e[2] <= e[1] + 1.0
    beats = eers[1.0] < probe_eer
    return record(
        "label-efficiency mechanism", monotone and beats,
        "fine-tune EER " + ", ".join(f"{f}: {v:.1f}%" for f, v in eers.items())
        + f" (non-increasing, 1 point slack); frozen probe {probe_eer:.1f}% > fine-tune@1.0",
    )


def criterion_determinism() -> bool:
    root = workdir() / "small"
    small = make_corpus(root, speakers=3, utts_per_speaker=4, test_utts_per_speaker=2, n_trials=12,
                        seed=3, min_seconds=4.2, max_seconds=4.6, n_noise=2, n_rirs=2)
    cfg = apply_overrides(load_config(DESK_CONFIG), {
        "batch_size": "4", "epochs": "4", "n_crops": "2", "model.proj_dim": "16",
        "augment.noise_dir": str(small.noise_dir), "augment.rir_dir": str(small.rir_dir)})

    def state(model):
        return [v.copy() for v in model.state().values()]

    def same(a, b):
        return all(np.array_equal(x, y) for x, y in zip(state(a), state(b)))

    a = fit(small.train, cfg, trials=small.trials)
    b = fit(small.train, cfg, trials=small.trials)
    out = root / "run"
    fit(small.train, cfg, trials=small.trials, out_dir=out, max_epochs=2)
    resumed = fit(small.train, cfg, trials=small.trials, out_dir=out, resume=out / "last.ckpt")
    repeat = same(a.model, b.model) and [r["loss"] for r in a.metrics] == [r["loss"] for r in b.metrics]
    resume_ok = same(a.model, resumed.model) and same(a.best, resumed.best)

    x = np.random.default_rng(0).uniform(-1, 1, 16000)
    save_wav(Waveform(x), root / "rt.wav")
    wav_err = np.max(np.abs(load_wav(root / "rt.wav").samples - x))
    ckpt_ok = same(a.model, deserialize(serialize(a.model)))
    ok = repeat and resume_ok and wav_err <= 1 / 32768 and ckpt_ok
    return record("determinism & persistence", ok,
                  f"repeat run identical: {repeat}; 2+2 resume == 4 epochs: {resume_ok}; "
                  f"WAV error {wav_err:.1e} (<= 1/32768); model round-trip bit-exact: {ckpt_ok}")


CRITERIA = [
    ("gradients", criterion_gradients, False),
    ("metric_oracle", criterion_metric_oracle, False),
    ("dsp", criterion_dsp, False),
    ("collapse", criterion_collapse, True),
    ("augmentation", criterion_augmentation, True),
    ("end_to_end", criterion_end_to_end, True),
    ("composite_additivity", criterion_composite_additivity, False),
    ("label_efficiency", criterion_label_efficiency, True),
    ("determinism", criterion_determinism, False),
]


@pytest.mark.parametrize(
    "check",
    [pytest.param(fn, id=name, marks=[pytest.mark.slow] if slow else []) for name, fn, slow in CRITERIA],
)
def test_criterion(check):
    assert check(), REPORT[-1]


if __name__ == "__main__":
    passed = [fn() for _, fn, _ in CRITERIA]
    print(f"\n{sum(passed)}/{len(passed)} criteria passed")
    sys.exit(0 if all(passed) else 1)
