"""
Frame encoder, self-attentive pooling and projector with hand-written backprop.

Every ``forward`` returns ``(output, cache)`` and the matching ``backward``
takes that cache explicitly, so the two Siamese views can be pushed through
the same layers before either is differentiated. Parameter gradients
accumulate into ``layer.grads`` until :meth:`Model.zero_grad`.

All arithmetic is float64.
"""
from __future__ import annotations

import copy
import io
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .exceptions import FormatError, ShapeError

__all__ = [
    "Linear",
    "BatchNorm",
    "SelfAttentivePooling",
    "Encoder",
    "Projector",
    "ModelConfig",
    "Model",
    "relu",
    "relu_backward",
    "l2_normalize",
    "l2_normalize_backward",
    "softmax",
    "softmax_cross_entropy",
    "serialize",
    "deserialize",
]

MAGIC = b"SSLSVMDL"
VERSION = 1


def glorot(rng: np.random.Generator, n_out: int, n_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_out, n_in))


class Layer:
    params: dict[str, np.ndarray]
    grads: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]

    def _init_grads(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)


class Linear(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.params = {"weight": glorot(rng, n_out, n_in), "bias": np.zeros(n_out)}
        self.buffers = {}
        self._init_grads()

    def forward(self, x):
        return x @ self.params["weight"].T + self.params["bias"], x

    def backward(self, dy, x):
        self.grads["weight"] += dy.T @ x
        self.grads["bias"] += dy.sum(axis=0)
        return dy @ self.params["weight"]


class BatchNorm(Layer):
    """Batch normalization over rows.

    Training mode uses the biased batch variance for normalization and folds
    the unbiased estimate into ``running_var`` with the given momentum.
    """

    def __init__(self, n: int, momentum: float = 0.1, eps: float = 1e-5):
        self.params = {"gamma": np.ones(n), "beta": np.zeros(n)}
        self.buffers = {"running_mean": np.zeros(n), "running_var": np.ones(n)}
        self.momentum = momentum
        self.eps = eps
        self._init_grads()

    def forward(self, x, train: bool = True, update_stats: bool = True):
        if train:
            n = x.shape[0]
            if n < 2:
                raise ValueError("batch norm in training mode needs at least 2 rows")
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            if update_stats:
                m = self.momentum
                self.buffers["running_mean"] *= 1.0 - m
                self.buffers["running_mean"] += m * mean
                self.buffers["running_var"] *= 1.0 - m
                self.buffers["running_var"] += m * var * n / (n - 1)
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        y = self.params["gamma"] * xhat + self.params["beta"]
        return y, (xhat, inv_std, train)

    def backward(self, dy, cache):
        xhat, inv_std, train = cache
        gamma = self.params["gamma"]
        self.grads["gamma"] += (dy * xhat).sum(axis=0)
        self.grads["beta"] += dy.sum(axis=0)
        dxhat = dy * gamma
        if not train:
            return dxhat * inv_std
        return inv_std * (
            dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0)
        )


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dy, x):
    return dy * (x > 0.0)


class SelfAttentivePooling(Layer):
    """Attention-weighted mean over frames.

    ``e_t = context . tanh(W h_t + b)``, ``a = softmax_t(e)``,
    ``pooled = sum_t a_t h_t``.
    """

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.params = {
            "attn_weight": glorot(rng, hidden, dim),
            "attn_bias": np.zeros(hidden),
            # context vector initialized like a hidden x 1 layer
            "context": glorot(rng, 1, hidden)[0],
        }
        self.buffers = {}
        self._init_grads()

    def forward(self, h):
        """``h`` is (N, T, dim); returns ``(pooled (N, dim), weights (N, T)), cache``."""
        u = np.tanh(h @ self.params["attn_weight"].T + self.params["attn_bias"])
        scores = u @ self.params["context"]
        a = softmax(scores, axis=1)
        pooled = np.einsum("nt,ntd->nd", a, h)
        return (pooled, a), (h, u, a)

    def backward(self, dpooled, cache):
        h, u, a = cache
        dh = a[:, :, None] * dpooled[:, None, :]
        da = np.einsum("ntd,nd->nt", h, dpooled)
        de = a * (da - (a * da).sum(axis=1, keepdims=True))
        self.grads["context"] += np.einsum("nt,nth->h", de, u)
        dpre = de[:, :, None] * self.params["context"] * (1.0 - u**2)
        self.grads["attn_weight"] += np.einsum("nth,ntd->hd", dpre, h)
        self.grads["attn_bias"] += dpre.sum(axis=(0, 1))
        dh += dpre @ self.params["attn_weight"]
        return dh


class Encoder:
    """Per-frame MLP (ReLU between layers, linear output) followed by SAP."""

    def __init__(self, n_in: int, hidden: tuple[int, ...], rep_dim: int, rng):
        dims = (n_in, *hidden, rep_dim)
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.pool = SelfAttentivePooling(rep_dim, rep_dim, rng)

    def named_layers(self):
        for i, layer in enumerate(self.layers):
            yield f"encoder.{i}", layer
        yield "sap", self.pool

    def forward(self, x):
        """``x`` is (N, T, n_mels) -> ``Y`` (N, rep_dim)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[2] != self.layers[0].params["weight"].shape[1]:
            raise ShapeError(f"encoder expects (N, T, {self.layers[0].params['weight'].shape[1]}), got {x.shape}")
        n, t, f = x.shape
        h = x.reshape(n * t, f)
        caches = []
        for i, layer in enumerate(self.layers):
            pre, c = layer.forward(h)
            caches.append((c, pre))
            h = relu(pre) if i < len(self.layers) - 1 else pre
        (y, attn), pool_cache = self.pool.forward(h.reshape(n, t, -1))
        return y, {"layers": caches, "pool": pool_cache, "shape": (n, t), "attn": attn}

    def backward(self, dy, cache):
        n, t = cache["shape"]
        dh = self.pool.backward(dy, cache["pool"]).reshape(n * t, -1)
        for i in reversed(range(len(self.layers))):
            c, pre = cache["layers"][i]
            if i < len(self.layers) - 1:
                dh = relu_backward(dh, pre)
            dh = self.layers[i].backward(dh, c)
        return dh.reshape(n, t, -1)


class Projector:
    """Linear-BN-ReLU-Linear-BN-ReLU-Linear; ``dim = 0`` means identity."""

    def __init__(self, rep_dim: int, dim: int, rng, momentum=0.1, eps=1e-5):
        self.dim = dim
        if dim == 0:
            self.linears, self.norms = [], []
            return
        self.linears = [Linear(rep_dim, dim, rng), Linear(dim, dim, rng), Linear(dim, dim, rng)]
        self.norms = [BatchNorm(dim, momentum, eps), BatchNorm(dim, momentum, eps)]

    def named_layers(self):
        for i in range(len(self.norms)):
            yield f"projector.{i}", self.linears[i]
            yield f"projector.bn{i}", self.norms[i]
        if self.linears:
            yield "projector.2", self.linears[2]

    def forward(self, y, train: bool = True, update_stats: bool = True):
        if self.dim == 0:
            return y, None
        if train and y.shape[0] < 2:
            raise ValueError("projector in training mode needs a batch of at least 2")
        caches = []
        h = y
        for lin, bn in zip(self.linears, self.norms):
            h, c_lin = lin.forward(h)
            h, c_bn = bn.forward(h, train, update_stats)
            caches.append((c_lin, c_bn, h))
            h = relu(h)
        z, c_last = self.linears[2].forward(h)
        return z, (caches, c_last)

    def backward(self, dz, cache):
        if self.dim == 0:
            return dz
        caches, c_last = cache
        dh = self.linears[2].backward(dz, c_last)
        for lin, bn, (c_lin, c_bn, pre) in reversed(list(zip(self.linears, self.norms, caches))):
            dh = relu_backward(dh, pre)
            dh = bn.backward(dh, c_bn)
            dh = lin.backward(dh, c_lin)
        return dh


@dataclass
class ModelConfig:
    n_mels: int = 40
    hidden: tuple[int, ...] = (128, 128)
    rep_dim: int = 64
    proj_dim: int = 2048
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)

    def param_count(self) -> int:
        """Number of trainable scalars.

        encoder: sum over per-frame layers of ``in * out + out``;
        SAP: ``rep_dim**2 + 2 * rep_dim``;
        projector (P = proj_dim > 0): ``rep_dim*P + P + 2*(P*P + P) + 2*(2*P)``.
        """
        dims = (self.n_mels, *self.hidden, self.rep_dim)
        count = sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
        count += self.rep_dim**2 + 2 * self.rep_dim
        p = self.proj_dim
        if p:
            count += self.rep_dim * p + p + 2 * (p * p + p) + 4 * p
        return count


class Model:
    """Shared-weight Siamese network: encoder (-> Y) and projector (-> Z)."""

    def __init__(self, config: ModelConfig | None = None):
        self.config = config or ModelConfig()
        rng = np.random.default_rng(self.config.seed)
        c = self.config
        self.encoder = Encoder(c.n_mels, c.hidden, c.rep_dim, rng)
        self.projector = Projector(c.rep_dim, c.proj_dim, rng, c.bn_momentum, c.bn_eps)

    def named_layers(self):
        yield from self.encoder.named_layers()
        yield from self.projector.named_layers()

    def parameters(self) -> list[tuple[str, np.ndarray, np.ndarray]]:
        """``(name, value, grad)`` triples in serialization order."""
        out = []
        for prefix, layer in self.named_layers():
            for k, v in layer.params.items():
                out.append((f"{prefix}.{k}", v, layer.grads[k]))
        return out

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return [
            (f"{prefix}.{k}", v)
            for prefix, layer in self.named_layers()
            for k, v in layer.buffers.items()
        ]

    def state(self) -> dict[str, np.ndarray]:
        d = {name: v for name, v, _ in self.parameters()}
        d.update(self.buffers())
        return d

    def zero_grad(self):
        for _, layer in self.named_layers():
            layer.zero_grad()

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def encode(self, x) -> np.ndarray:
        return self.encoder.forward(x)[0]

    def forward(self, x, train: bool = True):
        y, enc_cache = self.encoder.forward(x)
        z, proj_cache = self.projector.forward(y, train)
        return y, z, (enc_cache, proj_cache)

    def backward(self, dy, dz, cache):
        """Accumulate parameter gradients; ``dy``/``dz`` may be None."""
        enc_cache, proj_cache = cache
        if dy is None and dz is None:
            return
        total = 0.0 if dy is None else dy
        if dz is not None:
            total = total + self.projector.backward(dz, proj_cache)
        self.encoder.backward(total, enc_cache)


def l2_normalize(v):
    """Row-normalize; returns ``(u, norms)``."""
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("cannot l2-normalize an all-zero row")
    return v / norms, norms


def l2_normalize_backward(du, u, norms):
    return (du - u * np.sum(u * du, axis=1, keepdims=True)) / norms


def softmax(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over rows and its gradient w.r.t. ``logits``."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_z - shifted[np.arange(n), labels]))
    grad = np.exp(shifted - log_z[:, None])
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


# --- checkpoint format ------------------------------------------------------
#
#   MAGIC (8 bytes) | version u32 LE | header length u32 LE | header JSON utf-8
#   | float64 LE data for every array listed in header["arrays"], in order
#
# Array order: parameters (encoder layers, SAP, projector) then BN buffers,
# as returned by Model.parameters() and Model.buffers().


def serialize(model: Model) -> bytes:
    state = model.state()
    header = {
        "config": asdict(model.config),
        "arrays": [[name, list(v.shape)] for name, v in state.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<II", VERSION, len(blob)))
    out.write(blob)
    for v in state.values():
        out.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return out.getvalue()


def deserialize(data: bytes, config: ModelConfig | None = None) -> Model:
    """Rebuild a model; with ``config`` given, shapes must match it exactly."""
    if len(data) < 16 or data[:8] != MAGIC:
        raise FormatError("not a model checkpoint (bad magic bytes)")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if len(data) < 16 + hlen:
        raise FormatError("truncated checkpoint header")
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from exc
    stored_cfg = ModelConfig(**header["config"])
    model = Model(config if config is not None else stored_cfg)
    state = model.state()
    names = [n for n, _ in header["arrays"]]
    if names != list(state):
        raise ShapeError("checkpoint layer layout does not match the model configuration")
    offset = 16 + hlen
    for name, shape in header["arrays"]:
        target = state[name]
        if tuple(shape) != target.shape:
            raise ShapeError(f"{name}: checkpoint shape {tuple(shape)} != model shape {target.shape}")
        nbytes = 8 * target.size
        if offset + nbytes > len(data):
            raise FormatError("truncated checkpoint data")
        target[...] = np.frombuffer(data, dtype="<f8", count=target.size, offset=offset).reshape(target.shape)
        offset += nbytes
    if offset != len(data):
        raise FormatError("trailing bytes after checkpoint data")
    return model
