"""GELAE network: bond embedding, graph-masked multi-head encoders, mask pooling, heads."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NEG = -1000.0


@dataclass
class ModelConfig:
    r: int = 64
    n_heads: int = 4
    h: int = 32
    n_encoders: int = 6
    ff_dim: int = 128
    fc_hidden: list[int] = field(default_factory=lambda: [128, 256])
    score_fn: str = "dpa"
    attention_scope: str = "local"
    head: str = "classification"
    n_classes: int = 2000
    bin_width: float = 0.01
    y_min: float = -2.99
    y_max: float = 17.00
    dihedral_mode: str = "per_slot"
    n_features: int = 8

    def __post_init__(self):
        self.fc_hidden = list(self.fc_hidden)
        if self.r % self.n_heads:
            raise ValueError(f"r={self.r} is not divisible by n_heads={self.n_heads}")
        for name, allowed in (("score_fn", ("dpa", "mpa")), ("attention_scope", ("local", "global")),
                              ("head", ("classification", "regression")),
                              ("dihedral_mode", ("per_slot", "central"))):
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.head == "classification" and abs(self.class_to_scc(self.n_classes - 1) - self.y_max) > 1e-9:
            raise ValueError("top class does not decode to y_max")

    @property
    def d(self) -> int:
        return self.r // self.n_heads

    @classmethod
    def paper_scale(cls, **overrides) -> "ModelConfig":
        base = dict(r=512, h=64, ff_dim=2048, fc_hidden=[1024, 1024])
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    # class <-> Hz

    def class_to_scc(self, c: int) -> float:
        if not 0 <= c < self.n_classes:
            raise ValueError(f"class {c} outside [0, {self.n_classes - 1}]")
        return round(c * self.bin_width + self.y_min, 10)

    def scc_to_class(self, scc: float) -> int:
        c = math.ceil(round((scc - self.y_min) / self.bin_width, 9))
        return int(min(max(c, 0), self.n_classes - 1))


def class_to_scc(c, config: ModelConfig | None = None):
    """Decode a class index (or array of them) to Hz: c * 0.01 - 2.99 by default."""
    config = config or ModelConfig()
    if np.ndim(c):
        c = np.asarray(c)
        if c.size and (c.min() < 0 or c.max() >= config.n_classes):
            raise ValueError(f"classes must lie in [0, {config.n_classes - 1}]")
        return np.round(c * config.bin_width + config.y_min, 10)
    return config.class_to_scc(int(c))


def scc_to_class(scc, config: ModelConfig | None = None):
    """Half-open binning ``(lower, upper]``; ``y_min`` itself maps to class 0."""
    config = config or ModelConfig()
    if np.ndim(scc):
        scc = np.asarray(scc, dtype=np.float64)
        c = np.ceil(np.round((scc - config.y_min) / config.bin_width, 9))
        return np.clip(c, 0, config.n_classes - 1).astype(np.int64)
    return config.scc_to_class(float(scc))


# --- parameters -------------------------------------------------------------

def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def init_params(config: ModelConfig, rng: np.random.Generator | int = 0) -> dict[str, Tensor]:
    """Named parameter tensors, Glorot-uniform weights and zero biases."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    r, d, h = config.r, config.d, config.h
    p: dict[str, np.ndarray] = {
        "embed.weight": _glorot(rng, config.n_features, r),
        "embed.bias": np.zeros(r),
    }
    for layer in range(config.n_encoders):
        pre = f"enc{layer}"
        for head in range(config.n_heads):
            hp = f"{pre}.head{head}"
            p[f"{hp}.W_Q"] = _glorot(rng, r, d)
            p[f"{hp}.W_K"] = _glorot(rng, r, d)
            p[f"{hp}.W_V"] = _glorot(rng, r, d)
            if config.score_fn == "mpa":
                p[f"{hp}.W_a1"] = _glorot(rng, 2 * d, h)
                p[f"{hp}.W_a2"] = _glorot(rng, h, 1)
        p[f"{pre}.norm1.gain"] = np.ones(r)
        p[f"{pre}.norm1.bias"] = np.zeros(r)
        p[f"{pre}.ff.w1"] = _glorot(rng, r, config.ff_dim)
        p[f"{pre}.ff.b1"] = np.zeros(config.ff_dim)
        p[f"{pre}.ff.w2"] = _glorot(rng, config.ff_dim, r)
        p[f"{pre}.ff.b2"] = np.zeros(r)
        p[f"{pre}.norm2.gain"] = np.ones(r)
        p[f"{pre}.norm2.bias"] = np.zeros(r)
    widths = [r, *config.fc_hidden, config.n_classes if config.head == "classification" else 1]
    for k in range(len(widths) - 1):
        p[f"out{k}.weight"] = _glorot(rng, widths[k], widths[k + 1])
        p[f"out{k}.bias"] = np.zeros(widths[k + 1])
    return {name: Tensor(v, requires_grad=True, name=name) for name, v in p.items()}


def n_weights(params: dict[str, Tensor]) -> int:
    return int(sum(t.data.size for t in params.values()))


# --- building blocks --------------------------------------------------------

def _batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    return (x[None], True) if x.ndim == 2 else (x, False)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.affine(x, w, b)


def embed_bonds(X, params: dict[str, Tensor]) -> Tensor:
    """Per-row affine map of the 8 bond features (a 1x1 conv over bonds) + ReLU."""
    X = ad.as_tensor(X)
    if X.shape[-1] != params["embed.weight"].shape[0]:
        raise ValueError(f"expected {params['embed.weight'].shape[0]} features per bond, got {X.shape[-1]}")
    return ad.relu(linear(X, params["embed.weight"], params["embed.bias"]))


def score_dpa(Q: Tensor, K: Tensor) -> Tensor:
    return ad.scale(ad.matmul(Q, ad.transpose(K)), 1.0 / math.sqrt(Q.shape[-1]))


def score_mpa(Q: Tensor, K: Tensor, W_a1: Tensor, W_a2: Tensor) -> Tensor:
    """S_ij = (tanh(q_i || k_j) W_a1) W_a2, evaluated without materializing pairs.

    tanh acts elementwise, so tanh(q || k) = tanh(q) || tanh(k), and the two
    linear maps split over the halves of W_a1: S_ij = u_i + w_j.
    """
    d = Q.shape[-1]
    u = ad.matmul(ad.matmul(ad.tanh(Q), ad.slice_rows(W_a1, 0, d)), W_a2)
    w = ad.matmul(ad.matmul(ad.tanh(K), ad.slice_rows(W_a1, d, 2 * d)), W_a2)
    return ad.add(u, ad.transpose(w))


def score_mask(A: np.ndarray, scope: str) -> np.ndarray:
    """Binary matrix of pairs whose scores survive masking."""
    A = np.asarray(A, dtype=np.float64)
    if scope == "local":
        return A
    occ = np.diagonal(A, axis1=-2, axis2=-1)
    return occ[..., :, None] * occ[..., None, :]


def mask_scores(S, A, scope: str = "local") -> Tensor:
    """A (.) S + (Ones - A) (.) Neg, with the pair mask chosen by ``scope``."""
    S = ad.as_tensor(S)
    return ad.masked_fill(S, score_mask(A, scope), NEG)


def attention_apply(S_A, V) -> tuple[Tensor, Tensor]:
    alpha = ad.softmax_rows(ad.as_tensor(S_A))
    return ad.matmul(alpha, ad.as_tensor(V)), alpha


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """(B, 8, r) -> (B, n_heads, 8, r / n_heads); head k owns columns k*d:(k+1)*d."""
    b, n, r = x.shape
    return ad.permute(ad.reshape(x, (b, n, n_heads, r // n_heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, nh, n, d = x.shape
    return ad.reshape(ad.permute(x, (0, 2, 1, 3)), (b, n, nh * d))


def _mpa_scores(Qh: Tensor, Kh: Tensor, params, pre: str, config: ModelConfig) -> Tensor:
    """All heads of :func:`score_mpa` at once, shape (B, H, 8, 8)."""
    d, heads = config.d, range(config.n_heads)
    # (H, 2d, 1): W_a1 W_a2 per head; top half scores queries, bottom half keys
    V = ad.matmul(ad.stack([params[f"{pre}.head{hd}.W_a1"] for hd in heads]),
                  ad.stack([params[f"{pre}.head{hd}.W_a2"] for hd in heads]))
    u = ad.matmul(ad.tanh(Qh), ad.narrow(V, 1, 0, d))
    w = ad.matmul(ad.tanh(Kh), ad.narrow(V, 1, d, 2 * d))
    return ad.add(u, ad.transpose(w))


def encoder_forward(H_in: Tensor, params: dict[str, Tensor], layer: int, A: np.ndarray,
                    config: ModelConfig, attn_out: list | None = None) -> Tensor:
    """One encoder block: multi-head masked attention and a feed-forward net,
    each wrapped in skip connection + LayerNorm. Heads are concatenated with
    no output projection.

    The per-head projection matrices are concatenated so all heads run as
    one batched product. Rows of padded slots have every score masked; their
    attention rows are zeroed so padding neither attends nor is attended to.
    """
    pre = f"enc{layer}"
    nh = config.n_heads

    def project(kind):
        W = ad.concat_cols([params[f"{pre}.head{hd}.{kind}"] for hd in range(nh)])
        return split_heads(ad.matmul(H_in, W), nh)

    Qh, Kh, Vh = project("W_Q"), project("W_K"), project("W_V")
    if config.score_fn == "dpa":
        S = score_dpa(Qh, Kh)
    else:
        S = _mpa_scores(Qh, Kh, params, pre, config)
    A4 = A[:, None]
    alpha = ad.softmax_rows(mask_scores(S, A4, config.attention_scope))
    occ = np.diagonal(A4, axis1=-2, axis2=-1)[..., :, None]
    alpha = ad.masked_fill(alpha, occ, 0.0)
    if attn_out is not None:
        attn_out.append(alpha.data.copy())
    mha = merge_heads(ad.matmul(alpha, Vh))
    H1 = ad.layer_norm(ad.add(H_in, mha), params[f"{pre}.norm1.gain"], params[f"{pre}.norm1.bias"])
    F = ad.relu(linear(H1, params[f"{pre}.ff.w1"], params[f"{pre}.ff.b1"]))
    F = linear(F, params[f"{pre}.ff.w2"], params[f"{pre}.ff.b2"])
    return ad.layer_norm(ad.add(H1, F), params[f"{pre}.norm2.gain"], params[f"{pre}.norm2.bias"])


def masked_pool(H: Tensor, mask) -> Tensor:
    """Sum of the bond rows selected by ``mask``: (B, 8, r) -> (B, r)."""
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == 1:
        m = m[None]
    if np.any(m.sum(axis=-1) == 0):
        raise ValueError("mask selects no bonds")
    H = ad.as_tensor(H)
    squeeze = H.data.ndim == 2
    if squeeze:
        H = ad.reshape(H, (1, *H.shape))
    pooled = ad.matmul(Tensor(m[:, None, :]), H)
    return ad.reshape(pooled, (pooled.shape[0], pooled.shape[-1]))


def _fc_stack(pooled: Tensor, params: dict[str, Tensor], config: ModelConfig) -> Tensor:
    n = len(config.fc_hidden) + 1
    x = pooled
    for k in range(n):
        x = linear(x, params[f"out{k}.weight"], params[f"out{k}.bias"])
        if k < n - 1:
            x = ad.relu(x)
    return x


def head_classification(pooled: Tensor, params, config: ModelConfig) -> tuple[Tensor, Tensor]:
    logits = _fc_stack(pooled, params, config)
    return logits, ad.softmax_rows(logits)


def head_regression(pooled: Tensor, params, config: ModelConfig) -> Tensor:
    """scc_hat = sigmoid(y) * (y_max - y_min) + y_min, shape (B,)."""
    y = _fc_stack(pooled, params, config)
    y = ad.sigmoid(ad.reshape(y, (y.shape[0],)))
    return ad.add(ad.scale(y, config.y_max - config.y_min), config.y_min)


@dataclass
class Output:
    """Forward result. ``probabilities`` for classification, ``scc`` always."""

    scc: np.ndarray
    probabilities: Tensor | None = None
    logits: Tensor | None = None
    scc_hat: Tensor | None = None
    attention: np.ndarray | None = None

    @property
    def classes(self) -> np.ndarray:
        return np.argmax(self.probabilities.data, axis=-1)


def forward(X, A, mask, params: dict[str, Tensor], config: ModelConfig,
            return_attention: bool = False) -> Output:
    """Run the network on one system (8x8) or a batch (B, 8, 8).

    With ``return_attention`` the output carries alpha with shape
    (B, n_encoders, n_heads, 8, 8).
    """
    X, _ = _batch(X)
    A, _ = _batch(A)
    mask = np.asarray(mask, dtype=np.float64).reshape(-1, 8)
    attn: list | None = [] if return_attention else None
    H = embed_bonds(Tensor(X), params)
    for layer in range(config.n_encoders):
        H = encoder_forward(H, params, layer, A, config, attn)
    pooled = masked_pool(H, mask)
    attention = None
    if attn is not None:
        attention = np.stack(attn, axis=1)
    if config.head == "classification":
        logits, probs = head_classification(pooled, params, config)
        classes = np.argmax(probs.data, axis=-1)
        return Output(class_to_scc(classes, config), probs, logits, None, attention)
    scc_hat = head_regression(pooled, params, config)
    return Output(scc_hat.data.copy(), None, None, scc_hat, attention)


# --- losses -----------------------------------------------------------------

def one_hot(classes, n_classes: int) -> np.ndarray:
    classes = np.asarray(classes, dtype=np.int64).reshape(-1)
    out = np.zeros((classes.size, n_classes))
    out[np.arange(classes.size), classes] = 1.0
    return out


def loss_classification(probabilities: Tensor, labels: np.ndarray, floor: float = 1e-12) -> Tensor:
    """Cross entropy summed over the batch: -sum_i sum_c y_ic log p_ic."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != probabilities.shape:
        raise ValueError(f"labels {labels.shape} vs probabilities {probabilities.shape}")
    if not (np.all((labels == 0) | (labels == 1)) and np.all(labels.sum(axis=-1) == 1)):
        raise ValueError("each label row must be one-hot")
    # only the true-class entry of each row contributes
    picked = ad.pick(probabilities, labels.argmax(axis=-1))
    return ad.scale(ad.sum_all(ad.log(picked, floor)), -1.0)


def loss_regression(scc_hat: Tensor, scc) -> Tensor:
    """Mean absolute error over the batch."""
    scc = np.asarray(scc, dtype=np.float64).reshape(-1)
    if scc.size == 0:
        raise ValueError("empty batch")
    if scc_hat.shape != scc.shape:
        raise ValueError(f"prediction shape {scc_hat.shape} vs labels {scc.shape}")
    return ad.mean_all(ad.absolute(ad.sub(scc_hat, Tensor(scc))))


def batch_loss(out: Output, labels: np.ndarray, config: ModelConfig) -> Tensor:
    if config.head == "classification":
        return loss_classification(out.probabilities, one_hot(scc_to_class(labels, config), config.n_classes))
    return loss_regression(out.scc_hat, labels)


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(path: str | Path, params: dict[str, Tensor], config: ModelConfig, extra: dict | None = None):
    meta = {"model_config": config.to_dict(), **(extra or {})}
    ad.save_tensors(path, {k: v.data for k, v in params.items()}, meta)


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], ModelConfig, dict]:
    arrays, meta = ad.load_tensors(path)
    if "model_config" not in meta:
        raise ValueError(f"{path}: checkpoint has no model config")
    config = ModelConfig.from_dict(meta["model_config"])
    expected = init_params(config, 0)
    if set(expected) != set(arrays):
        raise ValueError(f"{path}: tensors do not match the embedded config")
    for name, t in expected.items():
        if t.shape != arrays[name].shape:
            raise ValueError(f"{path}: {name} has shape {arrays[name].shape}, config implies {t.shape}")
    params = {name: Tensor(arrays[name], requires_grad=True, name=name) for name in expected}
    return params, config, meta
