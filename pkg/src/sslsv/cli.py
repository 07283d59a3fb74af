"""Command-line front end: ``sslsv <command> [flags]``.

Exit codes: 0 success, 1 validation or runtime failure (one-line message on
stderr), 2 bad usage.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .audio_io import AudioStore, load_wav, read_manifest, save_wav
from .augment import AugmentPolicy, NoiseCorpus, RirCorpus, apply_policy
from .eval import (
    extract_embedding,
    fine_tune,
    linear_probe,
    read_trials,
    run_trials,
    write_scores,
)
from .exceptions import AudioFormatError, ConfigError, FormatError, ShapeError
from .nn import MAGIC, Model, ModelConfig, deserialize, serialize
from .optim import LrSchedule
from .trainer import CKPT_MAGIC, TrainConfig, apply_overrides, build_policy, fit, load_checkpoint, load_config

log = logging.getLogger("sslsv")

SEED_ENV = "SSLSV_SEED"


class UsageError(Exception):
    pass


def _seed(value: int | None, default: int) -> int:
    """Flag wins, then ``$SSLSV_SEED``, then the command's default."""
    if value is not None:
        return value
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return default
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None


def _fraction(text: str) -> float:
    try:
        f = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 < f <= 1.0:
        raise argparse.ArgumentTypeError("label fraction must lie in (0, 1]")
    return f


def _positive(text: str) -> int:
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return n


def _override(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def _load_model(path: str, expect: ModelConfig | None = None) -> Model:
    """Accept either a bare model file or a training checkpoint (its best model if present)."""
    data = Path(path).read_bytes()
    if data[:8] == CKPT_MAGIC:
        state = load_checkpoint(path)
        model = state.best_model or state.model
        if expect is not None:
            model = deserialize(serialize(model), expect)
        return model
    if data[:8] != MAGIC:
        raise FormatError(f"{path}: neither a model file nor a training checkpoint")
    return deserialize(data, expect)


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    return apply_overrides(cfg, dict(getattr(args, "set", None) or []))


def _data_paths(data: str):
    root = Path(data)
    manifest = root / "train.tsv"
    if not manifest.is_file():
        raise FileNotFoundError(f"{root}: no train.tsv manifest")
    return root, manifest


# --- commands ---------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _config(args)
    root, manifest_path = _data_paths(args.data)
    extra = {"seed": str(_seed(args.seed, cfg.seed))}
    if args.workers is not None:
        extra["workers"] = str(args.workers)
    if args.epochs is not None:
        extra["epochs"] = str(args.epochs)
    # fall back to the corpus' own augmentation sources
    if cfg.augment.enabled and not cfg.augment.noise_dir and (root / "noise").is_dir():
        extra["augment.noise_dir"] = str(root / "noise")
    if cfg.augment.enabled and not cfg.augment.rir_dir and (root / "rirs").is_dir():
        extra["augment.rir_dir"] = str(root / "rirs")
    cfg = apply_overrides(cfg, extra)

    manifest = read_manifest(manifest_path)
    trials = None
    trials_path = Path(args.trials) if args.trials else root / "trials.txt"
    if not args.no_eval:
        if args.trials or trials_path.is_file():
            trials = read_trials(trials_path)
    result = fit(manifest, cfg, trials=trials, out_dir=args.out, resume=args.resume)
    final = result.metrics[-1] if result.metrics else None
    if final is not None:
        print(f"epochs {len(result.metrics)}  loss {final['loss']:.4f}  emb_std {final['emb_std']:.3f}"
              + (f"  best EER {min(r['eval_eer'] for r in result.metrics):.2f}%" if trials else ""))
    if result.stopped_early:
        print("early stop: EER did not improve within patience")
    print(f"outputs in {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    expect = _config(args).model if args.config else None
    model = _load_model(args.checkpoint, expect)
    trials = read_trials(args.trials)
    scores, res = run_trials(model, trials, n_crops=args.n_crops)
    if args.scores:
        write_scores(scores, args.scores)
    print(f"EER {res.eer:.2f}%  threshold {res.eer_threshold:.4f}")
    print(f"minDCF {res.min_dcf:.4f} (raw {res.min_dcf_raw:.6f}, p_target 0.01)  threshold {res.dcf_threshold:.4f}")
    return 0


def cmd_extract(args) -> int:
    model = _load_model(args.checkpoint)
    vec = extract_embedding(model, load_wav(args.wav), n_crops=args.n_crops)
    print(" ".join(f"{v:.8g}" for v in vec))
    return 0


def _labeled(args):
    _, manifest_path = _data_paths(args.data)
    manifest = read_manifest(manifest_path)
    if not manifest.labeled:
        raise ValueError(f"{manifest_path}: every entry needs a speaker label")
    return manifest


def cmd_probe(args) -> int:
    model = _load_model(args.checkpoint)
    manifest = _labeled(args)
    audio = AudioStore()
    seed = _seed(args.seed, 0)
    reps = np.stack([extract_embedding(model, audio.get(manifest.resolve(e)), args.n_crops) for e in manifest])
    probe = linear_probe(reps, [e.speaker_id for e in manifest], args.label_fraction,
                         epochs=args.epochs, lr=args.lr, seed=seed)
    print(f"probe: {probe.classes.size} speakers, training accuracy {probe.accuracy:.3f}")
    if args.trials:
        trials = read_trials(args.trials)
        emb = {}
        for t in trials:
            for p in (t.enroll, t.test):
                if p not in emb:
                    emb[p] = extract_embedding(model, audio.get(trials.resolve(p)), args.n_crops)
        res = probe.evaluate(np.stack([emb[t.enroll] for t in trials]),
                             np.stack([emb[t.test] for t in trials]), trials.labels)
        print(f"probe EER {res.eer:.2f}%  minDCF {res.min_dcf:.4f}")
    return 0


def cmd_finetune(args) -> int:
    model = _load_model(args.checkpoint)
    manifest = _labeled(args)
    policy = None
    if not args.no_augment:
        root = Path(args.data)
        noise = args.noise_dir or (root / "noise" if (root / "noise").is_dir() else "")
        rirs = args.rir_dir or (root / "rirs" if (root / "rirs").is_dir() else "")
        policy = build_policy(apply_overrides(TrainConfig(), {
            "augment.noise_dir": str(noise), "augment.rir_dir": str(rirs)}).augment)
    audio = AudioStore()
    tuned = fine_tune(model, manifest, args.label_fraction, epochs=args.epochs,
                      batch_size=args.batch_size, schedule=LrSchedule(args.lr),
                      seed=_seed(args.seed, 0), policy=policy, audio=audio)
    Path(args.out).write_bytes(serialize(tuned))
    print(f"fine-tuned on fraction {args.label_fraction} -> {args.out}")
    if args.trials:
        _, res = run_trials(tuned, read_trials(args.trials), audio=audio)
        print(f"EER {res.eer:.2f}%  minDCF {res.min_dcf:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_all

    results = run_all(_seed(args.seed, 0))
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  {r.error:.3e}  {'ok' if r.ok else 'FAIL'}")
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks below {TOLERANCE:g}")
    return 1 if failed else 0


def cmd_augment_preview(args) -> int:
    noise = NoiseCorpus.from_directory(args.noise_dir) if args.noise_dir else None
    rir = RirCorpus.from_directory(args.rir_dir) if args.rir_dir else None
    if noise is None and rir is None:
        raise ValueError("give --noise-dir and/or --rir-dir")
    policy = AugmentPolicy(noise, rir,
                           args.p_noise if noise is not None else 0.0,
                           args.p_reverb if rir is not None else 0.0)
    trace: dict = {}
    out = apply_policy(load_wav(args.input), policy, np.random.default_rng(_seed(args.seed, 0)), trace)
    save_wav(out, args.output)
    applied = []
    if "category" in trace:
        applied.append(f"{trace['category']} noise at {trace['snr_db']:.2f} dB")
    if "rir" in trace:
        applied.append("reverberation")
    print(f"wrote {args.output}: " + (", ".join(applied) if applied else "unchanged"))
    return 0


def cmd_synth_data(args) -> int:
    from .synth import make_corpus

    corpus = make_corpus(args.out, speakers=args.speakers, utts_per_speaker=args.utts_per_speaker,
                         test_utts_per_speaker=args.test_utts_per_speaker, n_trials=args.trials,
                         seed=_seed(args.seed, 7))
    print(f"{len(corpus.train)} train / {len(corpus.test)} test utterances, "
          f"{len(corpus.trials)} trials in {corpus.root}")
    return 0


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sslsv", description="Self-supervised speaker verification toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    seed_help = f"random seed (default: ${SEED_ENV} or %s)"

    p = sub.add_parser("train", help="self-supervised training")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--data", required=True, help="corpus directory with train.tsv (and trials.txt, noise/, rirs/)")
    p.add_argument("--out", required=True, help="output directory for last.ckpt, best.model, metrics.tsv")
    p.add_argument("--trials", help="trial list for per-epoch evaluation (default: DATA/trials.txt if present)")
    p.add_argument("--no-eval", action="store_true", help="skip per-epoch evaluation and early stopping")
    p.add_argument("--resume", help="training checkpoint to continue from")
    p.add_argument("--epochs", type=_positive, help="maximum epochs (overrides the config)")
    p.add_argument("--seed", type=int, help=seed_help % "the config's seed, 0")
    p.add_argument("--workers", type=_positive, help="threads for batch assembly (default 1)")
    p.add_argument("--set", type=_override, action="append", metavar="KEY=VALUE",
                   help="config override, repeatable (e.g. loss.vicreg.mu=0)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a trial list and report EER/minDCF")
    p.add_argument("--checkpoint", required=True, help="model file or training checkpoint")
    p.add_argument("--trials", required=True, help="trial list: 'label path1 path2' per line")
    p.add_argument("--config", help="config the checkpoint must match (shape check)")
    p.add_argument("--set", type=_override, action="append", metavar="KEY=VALUE", help="config override")
    p.add_argument("--n-crops", type=_positive, default=5, help="evenly spaced 2 s crops per utterance (default 5)")
    p.add_argument("--scores", help="write per-trial scores TSV here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("extract", help="print the representation of one WAV file")
    p.add_argument("--checkpoint", required=True, help="model file or training checkpoint")
    p.add_argument("--wav", required=True, help="16 kHz 16-bit mono WAV")
    p.add_argument("--n-crops", type=_positive, default=5, help="crops to average (default 5)")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("probe", help="linear classifier on frozen representations")
    p.add_argument("--checkpoint", required=True, help="model file or training checkpoint")
    p.add_argument("--data", required=True, help="corpus directory with a labeled train.tsv")
    p.add_argument("--label-fraction", type=_fraction, default=1.0, help="fraction of labeled utterances (default 1)")
    p.add_argument("--trials", help="trial list for probe-based EER")
    p.add_argument("--epochs", type=_positive, default=100, help="full-batch Adam epochs (default 100)")
    p.add_argument("--lr", type=float, default=1e-3, help="learning rate (default 0.001)")
    p.add_argument("--n-crops", type=_positive, default=5, help="crops per utterance (default 5)")
    p.add_argument("--seed", type=int, help=seed_help % "0")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("finetune", help="supervised fine-tuning of the whole encoder")
    p.add_argument("--checkpoint", required=True, help="pre-trained model file or training checkpoint")
    p.add_argument("--data", required=True, help="corpus directory with a labeled train.tsv")
    p.add_argument("--out", required=True, help="where to write the fine-tuned model")
    p.add_argument("--label-fraction", type=_fraction, default=1.0, help="fraction of labeled utterances (default 1)")
    p.add_argument("--trials", help="trial list to evaluate the result on")
    p.add_argument("--epochs", type=_positive, default=60, help="epochs (default 60)")
    p.add_argument("--batch-size", type=_positive, default=32, help="batch size (default 32)")
    p.add_argument("--lr", type=float, default=1e-3, help="initial learning rate (default 0.001)")
    p.add_argument("--noise-dir", help="noise corpus (default: DATA/noise if present)")
    p.add_argument("--rir-dir", help="impulse responses (default: DATA/rirs if present)")
    p.add_argument("--no-augment", action="store_true", help="disable augmentation")
    p.add_argument("--seed", type=int, help=seed_help % "0")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss and layer")
    p.add_argument("--seed", type=int, help=seed_help % "0")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("augment-preview", help="write one augmented copy of a WAV file")
    p.add_argument("--in", dest="input", required=True, help="input WAV")
    p.add_argument("--out", dest="output", required=True, help="output WAV")
    p.add_argument("--noise-dir", help="directory with speech/, music/, noise/ subdirectories")
    p.add_argument("--rir-dir", help="directory of impulse-response WAVs")
    p.add_argument("--p-noise", type=float, default=0.75, help="probability of additive noise (default 0.75)")
    p.add_argument("--p-reverb", type=float, default=0.5, help="probability of reverberation (default 0.5)")
    p.add_argument("--seed", type=int, help=seed_help % "0")
    p.set_defaults(func=cmd_augment_preview)

    p = sub.add_parser("synth-data", help="generate the deterministic synthetic corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--speakers", type=_positive, default=10, help="number of speakers (default 10)")
    p.add_argument("--utts-per-speaker", type=_positive, default=20, help="training utterances per speaker (default 20)")
    p.add_argument("--test-utts-per-speaker", type=_positive, default=4,
                   help="held-out utterances per speaker for trials (default 4)")
    p.add_argument("--trials", type=_positive, default=200, help="number of trials, half target (default 200)")
    p.add_argument("--seed", type=int, help=seed_help % "7")
    p.set_defaults(func=cmd_synth_data)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help/--version, 2 for bad usage
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, FormatError, ShapeError, AudioFormatError, FileNotFoundError,
            ValueError, FloatingPointError, OSError) as exc:
        message = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"sslsv {args.command}: error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
