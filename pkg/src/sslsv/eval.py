"""
Speaker-verification evaluation: embedding extraction, cosine scoring, EER
and minDCF, plus the label-efficient linear probe and fine-tuning.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio_io import AudioStore, Manifest, Waveform, crop, sample_disjoint_starts
from .augment import AugmentPolicy, apply_policy
from .features import SpectrogramConfig, extract_features
from .nn import Linear, Model, l2_normalize, softmax_cross_entropy
from .optim import AdamState, LrSchedule, adam_step

__all__ = [
    "DcfConfig",
    "EvalResult",
    "Trial",
    "TrialList",
    "ScoreSet",
    "read_trials",
    "write_trials",
    "write_scores",
    "extract_embedding",
    "cosine_score",
    "compute_eer",
    "compute_min_dcf",
    "evaluate_scores",
    "run_trials",
    "select_fraction",
    "LinearProbe",
    "linear_probe",
    "fine_tune",
]


@dataclass(frozen=True)
class DcfConfig:
    p_target: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self):
        if not 0 < self.p_target < 1 or self.c_miss <= 0 or self.c_fa <= 0:
            raise ValueError("invalid DCF configuration")

    @property
    def normalizer(self) -> float:
        return min(self.c_miss * self.p_target, self.c_fa * (1.0 - self.p_target))


@dataclass
class EvalResult:
    eer: float  # percent
    eer_threshold: float
    min_dcf: float  # normalized by DcfConfig.normalizer
    dcf_threshold: float
    min_dcf_raw: float = float("nan")


@dataclass(frozen=True)
class Trial:
    label: int  # 1 = target
    enroll: str
    test: str


class TrialList(list):
    """Trials with paths resolved against ``root``."""

    def __init__(self, trials=(), root: str | os.PathLike = "."):
        super().__init__(trials)
        self.root = Path(root)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.root / p

    @property
    def labels(self) -> np.ndarray:
        return np.array([t.label for t in self], dtype=int)


def read_trials(path: str | os.PathLike, root: str | os.PathLike | None = None) -> TrialList:
    """Read ``label path1 path2`` lines; relative paths resolve against the file's directory."""
    path = Path(path)
    trials = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3 or parts[0] not in ("0", "1"):
            raise ValueError(f"{path}:{lineno}: expected 'label path1 path2' with label 0 or 1")
        trials.append(Trial(int(parts[0]), parts[1], parts[2]))
    return TrialList(trials, root=path.parent if root is None else root)


def write_trials(trials, path: str | os.PathLike) -> None:
    Path(path).write_text("".join(f"{t.label} {t.enroll} {t.test}\n" for t in trials), encoding="utf-8")


def cosine_score(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine score of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _split(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    tar, non = np.sort(scores[labels]), np.sort(scores[~labels])
    if tar.size == 0 or non.size == 0:
        raise ValueError("need at least one target and one non-target trial")
    return scores, tar, non


def _rates(scores, tar, non):
    """FAR/FRR at every unique score and at +inf (accept iff score >= t)."""
    thresholds = np.append(np.unique(scores), np.inf)
    far = (non.size - np.searchsorted(non, thresholds, side="left")) / non.size
    frr = np.searchsorted(tar, thresholds, side="left") / tar.size
    return thresholds, far, frr


def compute_eer(scores, labels) -> tuple[float, float]:
    """Equal error rate in percent and its threshold.

    Thresholds sweep the sorted unique scores; where FAR and FRR swap order
    between two adjacent operating points the crossing is interpolated
    linearly.
    """
    scores, tar, non = _split(scores, labels)
    t, far, frr = _rates(scores, tar, non)
    diff = frr - far
    k = int(np.argmax(diff >= 0))  # diff is non-decreasing and ends at +1
    if diff[k] == 0 or k == 0:
        return 100.0 * far[k], float(t[k])
    frac = -diff[k - 1] / (diff[k] - diff[k - 1])
    eer = far[k - 1] + frac * (far[k] - far[k - 1])
    thr = t[k - 1] + frac * (t[k] - t[k - 1]) if np.isfinite(t[k]) else t[k - 1]
    return 100.0 * eer, float(thr)


def compute_min_dcf(scores, labels, cfg: DcfConfig = DcfConfig()) -> tuple[float, float, float]:
    """Minimum detection cost over all thresholds including both endpoints.

    Returns ``(normalized, threshold, raw)`` where normalized = raw / min(c_miss
    p_target, c_fa (1 - p_target)).
    """
    scores, tar, non = _split(scores, labels)
    t, far, frr = _rates(scores, tar, non)
    t = np.concatenate([[-np.inf], t])
    far = np.concatenate([[1.0], far])
    frr = np.concatenate([[0.0], frr])
    dcf = cfg.c_miss * cfg.p_target * frr + cfg.c_fa * (1.0 - cfg.p_target) * far
    k = int(np.argmin(dcf))
    return float(dcf[k] / cfg.normalizer), float(t[k]), float(dcf[k])


def evaluate_scores(scores, labels, dcf: DcfConfig = DcfConfig()) -> EvalResult:
    eer, eer_t = compute_eer(scores, labels)
    norm, dcf_t, raw = compute_min_dcf(scores, labels, dcf)
    return EvalResult(eer, eer_t, norm, dcf_t, raw)


def _crop_starts(n_samples: int, chunk: int, n_crops: int) -> np.ndarray:
    last = max(n_samples - chunk, 0)
    return np.round(np.linspace(0, last, n_crops)).astype(int)


def crop_features(w: Waveform, chunk: int, starts, spec: SpectrogramConfig) -> np.ndarray:
    return np.stack([extract_features(crop(w, int(s), chunk), spec) for s in starts])


def extract_embedding(
    model: Model,
    w: Waveform,
    n_crops: int = 5,
    spec: SpectrogramConfig = SpectrogramConfig(),
    chunk_seconds: float = 2.0,
) -> np.ndarray:
    """Mean encoder representation over ``n_crops`` evenly spaced chunks.

    Uses the representation Y (encoder output), never the projector output.
    """
    if len(w) == 0:
        raise ValueError("cannot embed an empty waveform")
    if n_crops < 1:
        raise ValueError("n_crops must be at least 1")
    chunk = int(round(chunk_seconds * w.sample_rate))
    feats = crop_features(w, chunk, _crop_starts(len(w), chunk, n_crops), spec)
    return model.encode(feats).mean(axis=0)


@dataclass
class ScoreSet:
    pairs: list[tuple[str, str]]
    scores: np.ndarray
    labels: np.ndarray
    embeddings: dict[str, np.ndarray] = field(default_factory=dict)
    cache_hits: int = 0


def write_scores(score_set: ScoreSet, path: str | os.PathLike) -> None:
    lines = [
        f"{a}\t{b}\t{s:.8f}\t{label}\n"
        for (a, b), s, label in zip(score_set.pairs, score_set.scores, score_set.labels)
    ]
    Path(path).write_text("".join(lines), encoding="utf-8")


def run_trials(
    model: Model,
    trials: TrialList,
    n_crops: int = 5,
    spec: SpectrogramConfig = SpectrogramConfig(),
    chunk_seconds: float = 2.0,
    audio: AudioStore | None = None,
    dcf: DcfConfig = DcfConfig(),
) -> tuple[ScoreSet, EvalResult]:
    """Embed every distinct utterance once, score all trials, compute metrics."""
    audio = audio or AudioStore()
    paths = {trials.resolve(p) for t in trials for p in (t.enroll, t.test)}
    missing = sorted(str(p) for p in paths if p not in audio and not p.is_file())
    if missing:
        raise FileNotFoundError(f"{len(missing)} trial file(s) missing: " + ", ".join(missing[:5]))
    embeddings: dict[str, np.ndarray] = {}
    hits = 0
    scores = np.empty(len(trials))
    for i, t in enumerate(trials):
        vecs = []
        for p in (t.enroll, t.test):
            if p in embeddings:
                hits += 1
            else:
                w = audio.get(trials.resolve(p))
                embeddings[p] = extract_embedding(model, w, n_crops, spec, chunk_seconds)
            vecs.append(embeddings[p])
        scores[i] = cosine_score(*vecs)
    labels = trials.labels
    result = evaluate_scores(scores, labels, dcf)
    pairs = [(t.enroll, t.test) for t in trials]
    return ScoreSet(pairs, scores, labels, embeddings, hits), result


def select_fraction(speakers, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``round(fraction * n)`` items (at least 1), balanced across speakers.

    Items are shuffled within each speaker and taken round-robin.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    speakers = np.asarray(speakers)
    n = speakers.size
    k = max(1, int(round(fraction * n)))
    rank = np.empty(n, dtype=int)
    for spk in np.unique(speakers):
        idx = np.flatnonzero(speakers == spk)
        rank[rng.permutation(idx)] = np.arange(idx.size)
    tie = rng.permutation(n)
    order = np.lexsort((tie, rank))
    return np.sort(order[:k])


@dataclass
class LinearProbe:
    """Softmax classifier on frozen representations."""

    weight: np.ndarray
    bias: np.ndarray
    classes: np.ndarray
    accuracy: float = float("nan")
    losses: list[float] = field(default_factory=list)

    def logits(self, reps) -> np.ndarray:
        return np.asarray(reps) @ self.weight.T + self.bias

    def predict(self, reps) -> np.ndarray:
        return self.classes[np.argmax(self.logits(reps), axis=1)]

    def evaluate(self, enroll, test, labels, dcf: DcfConfig = DcfConfig()) -> EvalResult:
        """Verification metrics from cosine similarity of the probe's logits."""
        a, _ = l2_normalize(self.logits(enroll))
        b, _ = l2_normalize(self.logits(test))
        return evaluate_scores(np.sum(a * b, axis=1), labels, dcf)


def _head(n_classes: int, dim: int, seed: int) -> Linear:
    return Linear(dim, n_classes, np.random.default_rng([seed, 1]))


def _subset(labels, fraction, seed):
    labels = np.asarray(labels)
    idx = select_fraction(labels, fraction, np.random.default_rng([seed, 0]))
    classes = np.unique(labels[idx])
    if classes.size < 2:
        raise ValueError("labeled subset contains a single speaker")
    return idx, classes


def linear_probe(
    reps,
    labels,
    fraction: float = 1.0,
    *,
    epochs: int = 100,
    lr: float = 1e-3,
    seed: int = 0,
) -> LinearProbe:
    """Full-batch Adam on a linear softmax layer; ``reps`` are never updated."""
    reps = np.asarray(reps, dtype=np.float64)
    labels = np.asarray(labels)
    idx, classes = _subset(labels, fraction, seed)
    x = reps[idx]
    y = np.searchsorted(classes, labels[idx])
    head = _head(classes.size, reps.shape[1], seed)
    params = list(head.params.values())
    state = AdamState.zeros_like(params)
    history = []
    for _ in range(epochs):
        head.zero_grad()
        logits, cache = head.forward(x)
        loss, dlogits = softmax_cross_entropy(logits, y)
        head.backward(dlogits, cache)
        adam_step(params, list(head.grads.values()), state, lr)
        history.append(loss)
    probe = LinearProbe(head.params["weight"], head.params["bias"], classes, losses=history)
    probe.accuracy = float(np.mean(probe.predict(x) == labels[idx]))
    return probe


def fine_tune(
    model: Model,
    manifest: Manifest,
    fraction: float = 1.0,
    *,
    epochs: int = 60,
    batch_size: int | None = 32,
    schedule: LrSchedule = LrSchedule(),
    seed: int = 0,
    policy: AugmentPolicy | None = None,
    freeze_encoder: bool = False,
    random_crops: bool = True,
    n_crops: int = 5,
    spec: SpectrogramConfig = SpectrogramConfig(),
    chunk_seconds: float = 2.0,
    audio: AudioStore | None = None,
    return_head: bool = False,
):
    """Supervised training of a softmax head attached to the representation Y.

    The whole encoder is updated unless ``freeze_encoder``. With
    ``random_crops`` each utterance contributes one random (optionally
    augmented) chunk per epoch; otherwise the evenly spaced crops used at
    evaluation time are averaged, so a frozen encoder with
    ``batch_size=None`` reproduces :func:`linear_probe` on extracted
    representations.
    """
    if not manifest.labeled:
        raise ValueError("fine-tuning needs speaker labels for every manifest entry")
    audio = audio or AudioStore()
    model = model.copy()
    labels = np.array([e.speaker_id for e in manifest])
    idx, classes = _subset(labels, fraction, seed)
    targets = np.searchsorted(classes, labels[idx])
    head = _head(classes.size, model.config.rep_dim, seed)
    enc_params = [p for name, p, _ in model.parameters() if not name.startswith("projector")]
    enc_grads = [g for name, _, g in model.parameters() if not name.startswith("projector")]
    params = list(head.params.values()) + ([] if freeze_encoder else enc_params)
    grads = list(head.grads.values()) + ([] if freeze_encoder else enc_grads)
    state = AdamState.zeros_like(params)
    chunk = int(round(chunk_seconds * spec.sample_rate))
    waves = [audio.get(manifest.resolve(manifest[i])) for i in idx]

    fixed = None
    if not random_crops:
        fixed = [crop_features(w, chunk, _crop_starts(len(w), chunk, n_crops), spec) for w in waves]

    for epoch in range(epochs):
        lr = schedule(epoch)
        order = np.random.default_rng([seed, 2, epoch]).permutation(idx.size)
        step = idx.size if batch_size is None else batch_size
        for start in range(0, idx.size, step):
            b = order[start : start + step]
            if random_crops:
                feats = []
                for j in b:
                    rng = np.random.default_rng([seed, 3, epoch, int(idx[j])])
                    s, _ = sample_disjoint_starts(len(waves[j]), chunk, rng)
                    w = crop(waves[j], s, chunk)
                    if policy is not None:
                        w = apply_policy(w, policy, rng)
                    feats.append(extract_features(w, spec))
                x = np.stack(feats)
                per_item = 1
            else:
                x = np.concatenate([fixed[j] for j in b])
                per_item = n_crops
            model.zero_grad()
            head.zero_grad()
            y_crops, cache = model.encoder.forward(x)
            y = y_crops.reshape(len(b), per_item, -1).mean(axis=1)
            logits, head_cache = head.forward(y)
            _, dlogits = softmax_cross_entropy(logits, targets[b])
            dy = head.backward(dlogits, head_cache)
            if not freeze_encoder:
                dy_crops = np.repeat(dy / per_item, per_item, axis=0)
                model.encoder.backward(dy_crops, cache)
            adam_step(params, grads, state, lr)

    if return_head:
        return model, LinearProbe(head.params["weight"], head.params["bias"], classes)
    return model
