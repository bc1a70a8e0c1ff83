"""Feature-extraction layers: decorrelated gradient steps, neighbor-restricted
attention, graph transformer blocks, and plain graph convolutions."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ShapeError
from .tensor import (
    BatchNormState,
    Tensor,
    add,
    batch_norm,
    constant,
    hadamard,
    matmul,
    param,
    relu,
    smul,
    softmax_rows,
    subtract,
    transpose,
)


@dataclass
class DecorrConfig:
    """Hyperparameters of the decorrelated feature-extraction stack."""

    lambda1: float = 100.0
    lambda2: float = 0.001
    gamma: float = 0.01
    num_layers: int = 3

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or self.gamma < 0:
            raise ValueError("decorr: lambda1, lambda2 and gamma must be >= 0")
        if self.num_layers < 1:
            raise ValueError("decorr: num_layers must be >= 1")


def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class Dense:
    """Weight + optional bias, applied as x @ w + b."""

    w: Tensor
    b: Optional[Tensor] = None

    @classmethod
    def init(cls, fan_in: int, fan_out: int, rng: np.random.Generator,
             bias: bool = True) -> "Dense":
        w = param(glorot_uniform(fan_in, fan_out, rng))
        b = param(np.zeros((1, fan_out))) if bias else None
        return cls(w, b)

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.w)
        return add(y, self.b) if self.b is not None else y


@dataclass
class BatchNorm:
    """Learnable scale/shift around the batch_norm op, with running stats."""

    gamma: Tensor
    beta: Tensor
    state: BatchNormState

    @classmethod
    def init(cls, dim: int, momentum: float = 0.1) -> "BatchNorm":
        return cls(param(np.ones((1, dim))), param(np.zeros((1, dim))),
                   BatchNormState(dim, momentum=momentum))

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.state, training=training)


def decorr_gradient(h: Tensor, x: Tensor, laplacian: Tensor,
                    cfg: DecorrConfig) -> Tensor:
    """Gradient of the decorrelating denoising objective at h.

    G(h) = (h - x) + lambda1 * L h + lambda2 * (h h^T - I) h, where the
    last term pushes node representations toward pairwise orthogonality.
    """
    if h.shape != x.shape:
        raise ShapeError(f"decorr_gradient: h {h.shape} vs x {x.shape}")
    n = h.shape[0]
    if laplacian.shape != (n, n):
        raise ShapeError(
            f"decorr_gradient: laplacian {laplacian.shape} for {n} nodes"
        )
    g = subtract(h, x)
    if cfg.lambda1 != 0.0:
        g = add(g, smul(matmul(laplacian, h), cfg.lambda1))
    if cfg.lambda2 != 0.0:
        gram = matmul(h, transpose(h))
        centered = subtract(gram, constant(np.eye(n)))
        g = add(g, smul(matmul(centered, h), cfg.lambda2))
    return g


def decorr_objective(h: np.ndarray, x: np.ndarray, laplacian: np.ndarray,
                     cfg: DecorrConfig) -> float:
    """Scalar objective whose gradient decorr_gradient computes (for checks)."""
    n = h.shape[0]
    fit = 0.5 * float(np.sum((h - x) ** 2))
    smooth = 0.5 * cfg.lambda1 * float(np.trace(h.T @ laplacian @ h))
    gram = h @ h.T - np.eye(n)
    decorr = 0.25 * cfg.lambda2 * float(np.sum(gram * gram))
    return fit + smooth + decorr


def decorr_stack(x: Tensor, laplacian: Tensor, cfg: DecorrConfig,
                 h0: Optional[Tensor] = None) -> Tensor:
    """num_layers explicit gradient steps h <- h - gamma * G(h), from h0 = x."""
    h = x if h0 is None else h0
    for _ in range(cfg.num_layers):
        h = subtract(h, smul(decorr_gradient(h, x, laplacian, cfg), cfg.gamma))
    return h


def sparse_attention(q: Tensor, k: Tensor, v: Tensor, adj: np.ndarray,
                     literal_hadamard: bool = False) -> Tensor:
    """Scaled dot-product attention restricted to graph neighbors.

    Scores (q k^T)/sqrt(d) are softmax-normalized per row over the
    neighbor set only; a self-loop is always injected so every row is a
    valid distribution. `literal_hadamard` instead multiplies the scores
    by the adjacency and softmaxes over all entries (debug mode: it
    assigns weight e^0 to every non-neighbor).
    """
    d = q.shape[1]
    scores = smul(matmul(q, transpose(k)), 1.0 / math.sqrt(d))
    mask = np.asarray(adj, dtype=bool) | np.eye(adj.shape[0], dtype=bool)
    if literal_hadamard:
        weights = softmax_rows(hadamard(scores, constant(mask.astype(float))))
    else:
        weights = softmax_rows(scores, mask=mask)
    return matmul(weights, v)


@dataclass
class TransformerLayerParams:
    """One graph transformer block; Q/K/V are shared across domains."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    ffn1: Dense
    ffn2: Dense
    bn1: BatchNorm
    bn2: BatchNorm

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator) -> "TransformerLayerParams":
        return cls(
            wq=param(glorot_uniform(dim, dim, rng)),
            wk=param(glorot_uniform(dim, dim, rng)),
            wv=param(glorot_uniform(dim, dim, rng)),
            ffn1=Dense.init(dim, dim, rng),
            ffn2=Dense.init(dim, dim, rng),
            bn1=BatchNorm.init(dim),
            bn2=BatchNorm.init(dim),
        )


def transformer_layer(h: Tensor, pos_enc: Optional[Tensor], adj: np.ndarray,
                      lp: TransformerLayerParams, pe_dense: Optional[Dense],
                      first_layer: bool, training: bool = True,
                      literal_hadamard: bool = False) -> Tensor:
    """Residual attention + feed-forward block with batch normalization.

    The positional encoding is projected and added once, on the first
    layer only.
    """
    if first_layer and pos_enc is not None:
        h = add(h, pe_dense(pos_enc))
    sa = sparse_attention(matmul(h, lp.wq), matmul(h, lp.wk), matmul(h, lp.wv),
                          adj, literal_hadamard=literal_hadamard)
    h2 = lp.bn1(add(h, sa), training)
    hidden = relu(lp.ffn1(h2))
    return lp.bn2(add(h2, lp.ffn2(hidden)), training)


def gcn_layer(h: Tensor, a_norm: Tensor, w: Tensor,
              activation: str = "relu") -> Tensor:
    """sigma(a_norm @ h @ w); identity activation for analysis runs."""
    out = matmul(matmul(a_norm, h), w)
    if activation == "relu":
        return relu(out)
    if activation == "identity":
        return out
    raise ValueError(f"gcn_layer: unknown activation {activation!r}")
