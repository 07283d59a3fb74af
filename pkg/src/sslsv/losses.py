"""
Self-supervised objectives with analytic gradients.

Each loss takes two N x D batches (two views of the same N utterances) and
returns a :class:`LossOutput` holding the value and the gradient with
respect to both inputs. The composite objectives act on the representation
pair (Y, Y') and the embedding pair (Z, Z') at once.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import l2_normalize, l2_normalize_backward, softmax

__all__ = [
    "InfoNceConfig",
    "VicregWeights",
    "BarlowConfig",
    "CompositeConfig",
    "LossOutput",
    "StagedLossOutput",
    "info_nce",
    "barlow_twins",
    "vicreg_variance",
    "vicreg_invariance",
    "vicreg_covariance",
    "vicreg",
    "comp1",
    "comp2",
    "reg_y",
    "reg_z",
    "LOSSES",
    "compute_loss",
]


@dataclass
class InfoNceConfig:
    tau: float = 0.07
    # "cross_view": sum_j exp(a_i . b_j / tau); "literal_within_view": sum_j exp(a_i . a_j / tau)
    denominator: str = "cross_view"

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.denominator not in ("cross_view", "literal_within_view"):
            raise ValueError(f"unknown InfoNCE denominator {self.denominator!r}")


@dataclass
class VicregWeights:
    lam: float = 1.0
    mu: float = 1.0
    nu: float = 0.04
    eps_var: float = 1e-4
    # "mean": squared distance averaged over N*D, so lam:mu:nu = 1:1:0.04 is
    # balanced at any width. "sum": literal (1/N) sum of squared l2 distances.
    invariance: str = "mean"

    def __post_init__(self):
        if min(self.lam, self.mu, self.nu) < 0:
            raise ValueError("VICReg weights must be non-negative")
        if self.invariance not in ("mean", "sum"):
            raise ValueError(f"invariance reduction must be 'mean' or 'sum', got {self.invariance!r}")


@dataclass
class BarlowConfig:
    lam: float = 0.05
    eps_std: float = 1e-8

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("Barlow Twins lambda must be non-negative")


@dataclass
class CompositeConfig:
    alpha: float = 0.1
    info_nce: InfoNceConfig = field(default_factory=InfoNceConfig)
    vicreg: VicregWeights = field(default_factory=VicregWeights)
    barlow: BarlowConfig = field(default_factory=BarlowConfig)

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")


@dataclass
class LossOutput:
    value: float
    grad_a: np.ndarray
    grad_b: np.ndarray
    diagnostics: dict = field(default_factory=dict)


@dataclass
class StagedLossOutput:
    """Loss over representations (Y, Y') and/or embeddings (Z, Z').

    Gradients are None for a stage the loss does not touch.
    """

    value: float
    grad_y: np.ndarray | None = None
    grad_y2: np.ndarray | None = None
    grad_z: np.ndarray | None = None
    grad_z2: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)


def _check_pair(a, b, min_rows=2):
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"batches must be 2-D and equal in shape, got {a.shape} and {b.shape}")
    if a.shape[0] < min_rows:
        raise ValueError(f"loss needs at least {min_rows} rows, got {a.shape[0]}")


def info_nce(a, b, cfg: InfoNceConfig = InfoNceConfig()) -> LossOutput:
    """Temperature-scaled contrastive loss on l2-normalized rows.

    Row i of ``b`` is the positive for row i of ``a``; the positive stays in
    the denominator.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_pair(a, b)
    n = a.shape[0]
    ua, na = l2_normalize(a)
    ub, nb = l2_normalize(b)
    tau = cfg.tau
    positive = np.sum(ua * ub, axis=1) / tau

    if cfg.denominator == "cross_view":
        logits = ua @ ub.T / tau
        mx = logits.max(axis=1)
        lse = mx + np.log(np.exp(logits - mx[:, None]).sum(axis=1))
        per_row = lse - positive
        dlogits = softmax(logits, axis=1) / n
        dlogits[np.diag_indices(n)] -= 1.0 / n
        dua = dlogits @ ub / tau
        dub = dlogits.T @ ua / tau
    else:
        logits = ua @ ua.T / tau
        mx = logits.max(axis=1)
        lse = mx + np.log(np.exp(logits - mx[:, None]).sum(axis=1))
        per_row = lse - positive
        dlogits = softmax(logits, axis=1) / n
        dua = (dlogits + dlogits.T) @ ua / tau - ub / (n * tau)
        dub = -ua / (n * tau)

    value = float(per_row.mean())
    return LossOutput(
        value,
        l2_normalize_backward(dua, ua, na),
        l2_normalize_backward(dub, ub, nb),
        {"info_nce": value, "per_row": per_row},
    )


def _standardize(x, eps):
    centered = x - x.mean(axis=0)
    std = np.sqrt(np.mean(centered**2, axis=0))
    return centered / (std + eps), (centered, std, eps)


def _standardize_backward(dxhat, cache):
    centered, std, eps = cache
    n = centered.shape[0]
    s = std + eps
    # d std / d centered_k = centered_k / (n * std)
    safe_std = np.where(std > 0, std, 1.0)
    dstd = -np.sum(dxhat * centered, axis=0) / s**2
    dcentered = dxhat / s + dstd * centered / (n * safe_std)
    return dcentered - dcentered.mean(axis=0)


def barlow_twins(a, b, cfg: BarlowConfig = BarlowConfig()) -> LossOutput:
    """Drive the cross-view correlation matrix toward the identity.

    Columns are standardized over the batch with the population std; the
    correlation is ``C = A_std.T @ B_std / N``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_pair(a, b)
    n = a.shape[0]
    sa, cache_a = _standardize(a, cfg.eps_std)
    sb, cache_b = _standardize(b, cfg.eps_std)
    c = sa.T @ sb / n
    diag = np.diag(c)
    off = c - np.diag(diag)
    on_term = float(np.sum((1.0 - diag) ** 2))
    off_term = float(np.sum(off**2))
    value = on_term + cfg.lam * off_term

    dc = 2.0 * cfg.lam * off
    dc[np.diag_indices_from(dc)] = -2.0 * (1.0 - diag)
    dsa = sb @ dc.T / n
    dsb = sa @ dc / n
    return LossOutput(
        value,
        _standardize_backward(dsa, cache_a),
        _standardize_backward(dsb, cache_b),
        {"on_diagonal": on_term, "off_diagonal": off_term, "C": c},
    )


def vicreg_variance(a, eps_var: float = 1e-4) -> tuple[float, np.ndarray]:
    """Mean hinge ``max(0, 1 - sqrt(var + eps))`` over dimensions (unbiased var)."""
    a = np.asarray(a, dtype=np.float64)
    n, d = a.shape
    if n < 2:
        raise ValueError("variance term needs at least 2 rows")
    centered = a - a.mean(axis=0)
    std = np.sqrt(np.sum(centered**2, axis=0) / (n - 1) + eps_var)
    hinge = 1.0 - std
    value = float(np.mean(np.maximum(hinge, 0.0)))
    dstd = np.where(hinge > 0.0, -1.0 / d, 0.0)
    grad = centered * (dstd / (std * (n - 1)))
    return value, grad


def vicreg_invariance(a, b, reduction: str = "sum") -> tuple[float, np.ndarray, np.ndarray]:
    """Mean squared l2 distance between paired rows.

    With ``reduction="mean"`` the distance is also averaged over dimensions.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_pair(a, b, min_rows=1)
    diff = a - b
    n = a.shape[0] * (a.shape[1] if reduction == "mean" else 1)
    value = float(np.sum(diff**2) / n)
    grad = 2.0 * diff / n
    return value, grad, -grad


def vicreg_covariance(a) -> tuple[float, np.ndarray, np.ndarray]:
    """Sum of squared off-diagonal covariances divided by D.

    Returns ``(value, grad, C)``.
    """
    a = np.asarray(a, dtype=np.float64)
    n, d = a.shape
    if n < 2:
        raise ValueError("covariance term needs at least 2 rows")
    centered = a - a.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    off = cov - np.diag(np.diag(cov))
    value = float(np.sum(off**2) / d)
    grad = centered @ (4.0 * off / (d * (n - 1)))
    return value, grad, cov


def vicreg(a, b, w: VicregWeights = VicregWeights()) -> LossOutput:
    """Weighted invariance + variance + covariance; inputs are not normalized."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_pair(a, b)
    s, ds_a, ds_b = vicreg_invariance(a, b, w.invariance)
    va, dva = vicreg_variance(a, w.eps_var)
    vb, dvb = vicreg_variance(b, w.eps_var)
    ca, dca, cov_a = vicreg_covariance(a)
    cb, dcb, _ = vicreg_covariance(b)
    value = w.lam * s + w.mu * (va + vb) + w.nu * (ca + cb)
    std = np.concatenate([a, b]).std(axis=0, ddof=1).mean()
    return LossOutput(
        value,
        w.lam * ds_a + w.mu * dva + w.nu * dca,
        w.lam * ds_b + w.mu * dvb + w.nu * dcb,
        {
            "invariance": s,
            "variance": va + vb,
            "covariance": ca + cb,
            "weights": (w.lam, w.mu, w.nu),
            "std": float(std),
            "C": cov_a,
        },
    )


def _weighted_terms(prefix, out, weight=1.0):
    """Flatten a component's scalar terms into ``{prefix:term: weight * w_term * value}``."""
    d = out.diagnostics
    if "invariance" in d:
        lam, mu, nu = d["weights"]
        return {
            f"{prefix}:invariance": weight * lam * d["invariance"],
            f"{prefix}:variance": weight * mu * d["variance"],
            f"{prefix}:covariance": weight * nu * d["covariance"],
        }
    return {f"{prefix}": weight * out.value}


def comp1(y, y2, z, z2, cfg: CompositeConfig = CompositeConfig()) -> StagedLossOutput:
    """VICReg on representations plus InfoNCE on embeddings."""
    v = vicreg(y, y2, cfg.vicreg)
    c = info_nce(z, z2, cfg.info_nce)
    return StagedLossOutput(
        v.value + c.value,
        v.grad_a, v.grad_b, c.grad_a, c.grad_b,
        {"vicreg_y": v.value, "info_nce_z": c.value,
         "terms": {**_weighted_terms("vicreg_y", v), **_weighted_terms("info_nce_z", c)}},
    )


def comp2(y, y2, z, z2, cfg: CompositeConfig = CompositeConfig()) -> StagedLossOutput:
    """InfoNCE on representations plus VICReg on embeddings."""
    c = info_nce(y, y2, cfg.info_nce)
    v = vicreg(z, z2, cfg.vicreg)
    return StagedLossOutput(
        c.value + v.value,
        c.grad_a, c.grad_b, v.grad_a, v.grad_b,
        {"info_nce_y": c.value, "vicreg_z": v.value,
         "terms": {**_weighted_terms("info_nce_y", c), **_weighted_terms("vicreg_z", v)}},
    )


def _regularized(a, b, cfg: CompositeConfig, stage: str) -> LossOutput:
    c = info_nce(a, b, cfg.info_nce)
    if cfg.alpha == 0.0:
        return LossOutput(c.value, c.grad_a, c.grad_b,
                          {"info_nce": c.value, "vicreg": 0.0,
                           "terms": {f"info_nce_{stage}": c.value}})
    v = vicreg(a, b, cfg.vicreg)
    return LossOutput(
        c.value + cfg.alpha * v.value,
        c.grad_a + cfg.alpha * v.grad_a,
        c.grad_b + cfg.alpha * v.grad_b,
        {"info_nce": c.value, "vicreg": v.value,
         "terms": {f"info_nce_{stage}": c.value,
                   **_weighted_terms(f"vicreg_{stage}", v, cfg.alpha)}},
    )


def reg_y(y, y2, cfg: CompositeConfig = CompositeConfig()) -> LossOutput:
    """InfoNCE + alpha * VICReg, both on the representation pair."""
    return _regularized(y, y2, cfg, "y")


def reg_z(z, z2, cfg: CompositeConfig = CompositeConfig()) -> LossOutput:
    """InfoNCE + alpha * VICReg, both on the embedding pair."""
    return _regularized(z, z2, cfg, "z")


LOSSES = ("infonce", "barlow", "vicreg", "comp1", "comp2", "reg_y", "reg_z")


def compute_loss(name: str, y, y2, z, z2, cfg: CompositeConfig = CompositeConfig()) -> StagedLossOutput:
    """Dispatch a loss selector to its stage(s).

    The single objectives act on the embeddings (Z, Z'); ``reg_y`` acts on
    the representations only.
    """
    if name == "comp1":
        return comp1(y, y2, z, z2, cfg)
    if name == "comp2":
        return comp2(y, y2, z, z2, cfg)
    if name == "reg_y":
        out = reg_y(y, y2, cfg)
        return StagedLossOutput(out.value, grad_y=out.grad_a, grad_y2=out.grad_b,
                                diagnostics=out.diagnostics)
    if name == "reg_z":
        out = reg_z(z, z2, cfg)
    elif name == "infonce":
        out = info_nce(z, z2, cfg.info_nce)
        out.diagnostics["terms"] = {"info_nce": out.value}
    elif name == "barlow":
        out = barlow_twins(z, z2, cfg.barlow)
        out.diagnostics["terms"] = {
            "on_diagonal": out.diagnostics["on_diagonal"],
            "off_diagonal": cfg.barlow.lam * out.diagnostics["off_diagonal"],
        }
    elif name == "vicreg":
        out = vicreg(z, z2, cfg.vicreg)
        out.diagnostics["terms"] = _weighted_terms("vicreg", out)
    else:
        raise ValueError(f"unknown loss {name!r}; choose from {', '.join(LOSSES)}")
    return StagedLossOutput(out.value, grad_z=out.grad_a, grad_z2=out.grad_b,
                            diagnostics=out.diagnostics)
