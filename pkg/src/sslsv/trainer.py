"""
Self-supervised training loop.

Each step samples two disjoint chunks per utterance, distorts them
independently, pushes both views through the same model and applies one
Adam update. Randomness for an utterance comes from its own stream derived
from ``(seed, epoch, utterance_id)``, so batch assembly gives the same
result regardless of worker count or resumption point.
"""
from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import struct
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audio_io import AudioStore, Manifest, crop, sample_disjoint_starts
from .augment import AugmentPolicy, NoiseCorpus, RirCorpus, apply_policy
from .eval import TrialList, run_trials
from .exceptions import ConfigError, FormatError
from .features import SpectrogramConfig, extract_features
from .losses import LOSSES, BarlowConfig, CompositeConfig, InfoNceConfig, VicregWeights, compute_loss
from .nn import Model, ModelConfig, deserialize, serialize
from .optim import AdamState, EarlyStop, LrSchedule, adam_step

log = logging.getLogger(__name__)

__all__ = [
    "AugmentConfig",
    "LossConfig",
    "TrainConfig",
    "load_config",
    "apply_overrides",
    "config_hash",
    "build_policy",
    "item_rng",
    "build_batch",
    "train_step",
    "TrainState",
    "TrainResult",
    "fit",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass
class AugmentConfig:
    enabled: bool = True
    p_noise: float = 0.75
    p_reverb: float = 0.5
    noise_dir: str = ""
    rir_dir: str = ""


@dataclass
class LossConfig(CompositeConfig):
    name: str = "vicreg"

    def __post_init__(self):
        super().__post_init__()
        if self.name not in LOSSES:
            raise ConfigError(f"unknown loss {self.name!r}; choose from {', '.join(LOSSES)}")


@dataclass
class TrainConfig:
    batch_size: int = 64
    chunk_seconds: float = 2.0
    epochs: int = 500
    seed: int = 0
    eval_every: int = 1
    n_crops: int = 5
    patience: int = 50
    workers: int = 1
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    spectrogram: SpectrogramConfig = field(default_factory=SpectrogramConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: LrSchedule = field(default_factory=LrSchedule)

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.chunk_seconds <= 0:
            raise ConfigError("chunk_seconds must be positive")

    @property
    def chunk_samples(self) -> int:
        return int(round(self.chunk_seconds * self.spectrogram.sample_rate))


# --- config files -----------------------------------------------------------


def _coerce(raw: str, current, key: str):
    try:
        if isinstance(current, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            return tuple(int(v) for v in raw.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(current).__name__}") from exc
    return raw


def _set_path(obj, keys: list[str], raw, full_key: str):
    name = keys[0]
    names = {f.name for f in dataclasses.fields(obj)}
    if name not in names:
        raise ConfigError(f"unknown config key {full_key!r}")
    current = getattr(obj, name)
    if len(keys) == 1:
        if dataclasses.is_dataclass(current):
            raise ConfigError(f"{full_key!r} is a section, not a value")
        value = _coerce(raw, current, full_key) if isinstance(raw, str) else raw
    else:
        if not dataclasses.is_dataclass(current):
            raise ConfigError(f"unknown config key {full_key!r}")
        value = _set_path(current, keys[1:], raw, full_key)
    try:
        return dataclasses.replace(obj, **{name: value})
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{full_key}: {exc}") from exc


def apply_overrides(cfg: TrainConfig, overrides: dict) -> TrainConfig:
    """Return a copy with dotted keys (``loss.vicreg.nu``) replaced."""
    for key, value in overrides.items():
        cfg = _set_path(cfg, key.split("."), value, key)
    return cfg


def load_config(path: str | os.PathLike, base: TrainConfig | None = None) -> TrainConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    overrides = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        overrides[key] = value
    return apply_overrides(base or TrainConfig(), overrides)


def config_dict(cfg: TrainConfig) -> dict:
    return json.loads(json.dumps(asdict(cfg)))


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(json.dumps(config_dict(cfg), sort_keys=True).encode()).hexdigest()[:16]


def config_from_dict(d: dict) -> TrainConfig:
    sections = {
        "loss": lambda v: LossConfig(
            alpha=v["alpha"], name=v["name"],
            info_nce=InfoNceConfig(**v["info_nce"]),
            vicreg=VicregWeights(**v["vicreg"]),
            barlow=BarlowConfig(**v["barlow"]),
        ),
        "augment": lambda v: AugmentConfig(**v),
        "spectrogram": lambda v: SpectrogramConfig(**v),
        "model": lambda v: ModelConfig(**v),
        "schedule": lambda v: LrSchedule(**v),
    }
    kwargs = {k: sections[k](v) if k in sections else v for k, v in d.items()}
    return TrainConfig(**kwargs)


# --- batches ----------------------------------------------------------------


def build_policy(cfg: AugmentConfig) -> AugmentPolicy | None:
    if not cfg.enabled:
        return None
    noise = NoiseCorpus.from_directory(cfg.noise_dir) if cfg.noise_dir else None
    rir = RirCorpus.from_directory(cfg.rir_dir) if cfg.rir_dir else None
    return AugmentPolicy(
        noise=noise,
        rir=rir,
        p_noise=cfg.p_noise if noise is not None else 0.0,
        p_reverb=cfg.p_reverb if rir is not None else 0.0,
    )


def item_rng(seed: int, epoch: int, utterance_id: str) -> np.random.Generator:
    key = int.from_bytes(hashlib.sha256(utterance_id.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng([seed, epoch, 1, key])


def _views(entry, manifest, cfg, epoch, policy, audio):
    w = audio.get(manifest.resolve(entry))
    rng = item_rng(cfg.seed, epoch, entry.utterance_id)
    chunk = cfg.chunk_samples
    a, b = sample_disjoint_starts(len(w), chunk, rng)
    views = []
    for start in (a, b):
        v = crop(w, start, chunk)
        if policy is not None:
            v = apply_policy(v, policy, rng)
        views.append(extract_features(v, cfg.spectrogram))
    return views


def build_batch(
    manifest: Manifest,
    indices,
    cfg: TrainConfig,
    epoch: int,
    policy: AugmentPolicy | None = None,
    audio: AudioStore | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Feature batches ``(X, X')``, each (N, frames, n_mels), aligned by utterance."""
    audio = audio or AudioStore()
    entries = [manifest[i] for i in indices]
    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            views = list(pool.map(lambda e: _views(e, manifest, cfg, epoch, policy, audio), entries))
    else:
        views = [_views(e, manifest, cfg, epoch, policy, audio) for e in entries]
    return np.stack([v[0] for v in views]), np.stack([v[1] for v in views])


def train_step(model: Model, x, x2, loss_cfg: LossConfig, state: AdamState, lr: float) -> dict:
    """One Siamese update; returns the step's loss, weighted terms and embedding std."""
    model.zero_grad()
    y, z, c1 = model.forward(x, train=True)
    y2, z2, c2 = model.forward(x2, train=True)
    out = compute_loss(loss_cfg.name, y, y2, z, z2, loss_cfg)
    if not math.isfinite(out.value):
        raise FloatingPointError(
            f"non-finite {loss_cfg.name} loss; terms={out.diagnostics.get('terms')}, "
            f"|Y|max={np.abs(y).max():.3g}, |Z|max={np.abs(z).max():.3g}"
        )
    model.backward(out.grad_y, out.grad_z, c1)
    model.backward(out.grad_y2, out.grad_z2, c2)
    params = [p for _, p, _ in model.parameters()]
    grads = [g for _, _, g in model.parameters()]
    adam_step(params, grads, state, lr)
    return {
        "loss": out.value,
        "terms": dict(out.diagnostics.get("terms", {})),
        "emb_std": float(np.concatenate([z, z2]).std(axis=0, ddof=1).mean()),
    }


# --- state & checkpoints ----------------------------------------------------


@dataclass
class TrainState:
    model: Model
    adam: AdamState
    epoch: int = 0  # next epoch to run
    early_stop: EarlyStop = field(default_factory=EarlyStop)
    best_model: Model | None = None
    metrics: list[dict] = field(default_factory=list)
    config: TrainConfig | None = None


@dataclass
class TrainResult:
    model: Model
    best_model: Model | None
    metrics: list[dict]
    stopped_early: bool = False
    steps: int = 0

    @property
    def best(self) -> Model:
        return self.best_model if self.best_model is not None else self.model


CKPT_MAGIC = b"SSLSVCKP"
CKPT_VERSION = 1


def save_checkpoint(state: TrainState, path: str | os.PathLike) -> None:
    """Layout: magic | u32 version | u32 header len | JSON header |
    u64 len + model blob | u64 len + best-model blob (0 if none) |
    Adam m then v arrays as float64 LE in model parameter order."""
    header = {
        "config": config_dict(state.config),
        "config_hash": config_hash(state.config),
        "epoch": state.epoch,
        "adam": {"t": state.adam.t, "beta1": state.adam.beta1, "beta2": state.adam.beta2, "eps": state.adam.eps},
        "early_stop": {
            "patience": state.early_stop.patience,
            "best_metric": state.early_stop.best_metric if math.isfinite(state.early_stop.best_metric) else None,
            "epochs_since_best": state.early_stop.epochs_since_best,
            "history": state.early_stop.history,
        },
        "metrics": state.metrics,
    }
    blob = json.dumps(header).encode("utf-8")
    model_blob = serialize(state.model)
    best_blob = serialize(state.best_model) if state.best_model is not None else b""
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(blob)))
    buf.write(blob)
    for b in (model_blob, best_blob):
        buf.write(struct.pack("<Q", len(b)))
        buf.write(b)
    for arr in state.adam.m + state.adam.v:
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike, expect: TrainConfig | None = None) -> TrainState:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a training checkpoint (bad magic bytes)")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(data[16 : 16 + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    cfg = config_from_dict(header["config"])
    if expect is not None and config_hash(expect) != header["config_hash"]:
        changed = _diff(config_dict(expect), header["config"])
        warnings.warn(f"resuming with a different configuration: {', '.join(changed)}", stacklevel=2)
    pos = 16 + hlen
    blobs = []
    for _ in range(2):
        if pos + 8 > len(data):
            raise FormatError(f"{path}: truncated checkpoint")
        (n,) = struct.unpack("<Q", data[pos : pos + 8])
        blobs.append(data[pos + 8 : pos + 8 + n])
        if len(blobs[-1]) != n:
            raise FormatError(f"{path}: truncated checkpoint")
        pos += 8 + n
    model = deserialize(blobs[0])
    best = deserialize(blobs[1]) if blobs[1] else None
    adam = AdamState.zeros_like([p for _, p, _ in model.parameters()], **{k: v for k, v in header["adam"].items() if k != "t"})
    adam.t = header["adam"]["t"]
    for arr in adam.m + adam.v:
        nbytes = 8 * arr.size
        if pos + nbytes > len(data):
            raise FormatError(f"{path}: truncated optimizer state")
        arr[...] = np.frombuffer(data, "<f8", arr.size, pos).reshape(arr.shape)
        pos += nbytes
    if pos != len(data):
        raise FormatError(f"{path}: trailing bytes in checkpoint")
    es = header["early_stop"]
    early = EarlyStop(
        es["patience"],
        math.inf if es["best_metric"] is None else es["best_metric"],
        es["epochs_since_best"],
        list(es["history"]),
    )
    return TrainState(model, adam, header["epoch"], early, best, header["metrics"], cfg)


def _diff(a: dict, b: dict, prefix="") -> list[str]:
    out = []
    for k in sorted(set(a) | set(b)):
        va, vb = a.get(k), b.get(k)
        if isinstance(va, dict) and isinstance(vb, dict):
            out += _diff(va, vb, f"{prefix}{k}.")
        elif va != vb:
            out.append(f"{prefix}{k}: {vb!r} -> {va!r}")
    return out


# --- metrics log ------------------------------------------------------------


def _fmt(v) -> str:
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6g}"


def write_metrics(metrics: list[dict], path: str | os.PathLike) -> None:
    """TSV: ``epoch loss term:* emb_std eval_eer eval_mindcf lr seconds``."""
    terms = sorted({t for row in metrics for t in row["terms"]})
    cols = ["epoch", "loss", *(f"term:{t}" for t in terms), "emb_std", "eval_eer", "eval_mindcf", "lr", "seconds"]
    lines = ["\t".join(cols)]
    for row in metrics:
        vals = [str(row["epoch"]), _fmt(row["loss"]), *(_fmt(row["terms"].get(t)) for t in terms),
                _fmt(row["emb_std"]), _fmt(row["eval_eer"]), _fmt(row["eval_mindcf"]),
                _fmt(row["lr"]), f"{row['seconds']:.3f}"]
        lines.append("\t".join(vals))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --- training loop ----------------------------------------------------------


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled partition of ``range(n)``; a final batch of fewer than 2 is dropped."""
    order = np.random.default_rng([seed, epoch, 0]).permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    return [b for b in batches if b.size >= 2]


def fit(
    manifest: Manifest,
    cfg: TrainConfig,
    trials: TrialList | None = None,
    out_dir: str | os.PathLike | None = None,
    resume: str | os.PathLike | TrainState | None = None,
    audio: AudioStore | None = None,
    policy: AugmentPolicy | None = None,
    max_epochs: int | None = None,
) -> TrainResult:
    """Train until ``cfg.epochs`` (or ``max_epochs`` more epochs) or early stop.

    With ``trials`` the model is evaluated every ``cfg.eval_every`` epochs and
    the best-EER copy is retained. With ``out_dir`` the files ``last.ckpt``,
    ``best.model`` and ``metrics.tsv`` are rewritten after each epoch.
    ``policy`` overrides the augmentation built from ``cfg.augment``.
    """
    if len(manifest) < cfg.batch_size:
        raise ValueError(f"manifest has {len(manifest)} entries, fewer than batch_size={cfg.batch_size}")
    audio = audio or AudioStore()
    if policy is None:
        policy = build_policy(cfg.augment)
    elif not cfg.augment.enabled:
        policy = None

    if isinstance(resume, TrainState):
        state = resume
    elif resume is not None:
        state = load_checkpoint(resume, expect=cfg)
    else:
        model = Model(cfg.model)
        state = TrainState(model, AdamState.zeros_like([p for _, p, _ in model.parameters()]),
                           early_stop=EarlyStop(cfg.patience))
    state.config = cfg
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    last_epoch = cfg.epochs if max_epochs is None else min(cfg.epochs, state.epoch + max_epochs)
    stopped = False
    steps = 0
    while state.epoch < last_epoch:
        epoch = state.epoch
        t0 = time.perf_counter()
        lr = state.config.schedule(epoch)
        rows = []
        for idx in epoch_batches(len(manifest), cfg.batch_size, cfg.seed, epoch):
            x, x2 = build_batch(manifest, idx, cfg, epoch, policy, audio)
            rows.append(train_step(state.model, x, x2, cfg.loss, state.adam, lr))
            steps += 1
        terms = {k: float(np.mean([r["terms"][k] for r in rows])) for k in rows[0]["terms"]}
        record = {
            "epoch": epoch,
            "loss": float(np.mean([r["loss"] for r in rows])),
            "terms": terms,
            "emb_std": float(np.mean([r["emb_std"] for r in rows])),
            "eval_eer": float("nan"),
            "eval_mindcf": float("nan"),
            "lr": lr,
        }
        keep_going = True
        if trials is not None and (epoch + 1) % cfg.eval_every == 0:
            _, res = run_trials(state.model, trials, cfg.n_crops, cfg.spectrogram, cfg.chunk_seconds, audio)
            record["eval_eer"], record["eval_mindcf"] = res.eer, res.min_dcf
            keep_going = state.early_stop.update(res.eer)
            if state.early_stop.improved:
                state.best_model = state.model.copy()
        record["seconds"] = time.perf_counter() - t0
        state.metrics.append(record)
        state.epoch += 1
        log.info("epoch %d loss %.4f emb_std %.3f eer %.2f", epoch, record["loss"], record["emb_std"], record["eval_eer"])
        if out is not None:
            save_checkpoint(state, out / "last.ckpt")
            write_metrics(state.metrics, out / "metrics.tsv")
            if state.best_model is not None and state.early_stop.improved:
                (out / "best.model").write_bytes(serialize(state.best_model))
        if not keep_going:
            stopped = True
            break
    return TrainResult(state.model, state.best_model, state.metrics, stopped, steps)
