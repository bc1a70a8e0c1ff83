"""Loss functions, the adversarial min-max schedule, and the full-graph
training loop.

Each epoch runs both domain forward passes, then an inner loop of critic
ascent steps on (critic loss - lambda_gp * gradient penalty) over frozen
representations, then one descent step each for the feature-extractor and
classifier groups on (source loss + lambda_t * target entropy +
lambda_critic * critic loss).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from .errors import ConfigError, ContractError, NumericalError
from .graph import Graph, build_operators, drop_edge, normalized_operators
from .model import (
    ModelParams,
    PreparedGraph,
    build_model,
    criticize,
    critic_input_gradient,
    forward,
    prepare_graph,
)
from .tensor import (
    Adam,
    Tensor,
    add,
    backward,
    constant,
    exp,
    hadamard,
    log,
    matmul,
    mean,
    row_norm,
    slice_cols,
    smul,
    subtract,
    transpose,
    zero_grads,
)

VARIANT_CHOICES = ("dft", "dft_gcn", "dft_not", "dft_puret", "dft_mmd",
                   "dft_dropedge")


@dataclass
class TrainConfig:
    """Every knob of the training algorithm plus the variant switches."""

    epochs: int = 500
    lr: float = 0.003
    n_critic: int = 5
    lambda_critic: float = 1.0
    lambda_gp: float = 10.0
    lambda1: float = 100.0
    lambda2: float = 0.001
    gamma: float = 0.01
    num_decorr_layers: int = 3
    num_transformer_layers: int = 4
    dropout: float = 0.1
    hidden_dim: int = 128
    pe_dim: int = 2
    variant: str = "dft"
    dropedge_rate: float = 0.2
    ppmi_walk_len: int = 40
    ppmi_walks_per_node: int = 10
    ppmi_window: int = 5
    gp_interpolate: bool = False
    sa_literal: bool = False
    seed: Optional[int] = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.n_critic < 1:
            raise ConfigError("n_critic must be >= 1")
        for name in ("lambda_critic", "lambda_gp", "lambda1", "lambda2", "gamma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.variant not in VARIANT_CHOICES:
            raise ConfigError(
                f"unknown variant {self.variant!r}; choose from {VARIANT_CHOICES}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if not 0.0 <= self.dropedge_rate < 1.0:
            raise ConfigError("dropedge_rate must be in [0, 1)")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**values)


@dataclass
class EpochRecord:
    epoch: int
    loss_source: float
    loss_target: float
    loss_critic: float
    loss_gp: float
    seconds: float
    objective: float = field(default=0.0)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def loss_source(y_hat_s: Tensor, labels) -> Tensor:
    """Cross-entropy of the labeled source nodes (mean over nodes)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = y_hat_s.shape
    if labels.shape != (n,) or (labels.size and
                                (labels.min() < 0 or labels.max() >= c)):
        raise ContractError(f"loss_source: labels incompatible with shape {n}x{c}")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    return smul(mean(hadamard(constant(onehot), log(y_hat_s))), -float(c))


def loss_target_entropy(y_hat_t: Tensor) -> Tensor:
    """Mean Shannon entropy of the unlabeled-domain predictions."""
    c = y_hat_t.shape[1]
    return smul(mean(hadamard(y_hat_t, log(y_hat_t))), -float(c))


def loss_critic(q_s: Tensor, q_t: Tensor) -> Tensor:
    """mean(source scores) - mean(target scores)."""
    return subtract(mean(q_s), mean(q_t))


def _penalty_at(critic, z: Tensor) -> Tensor:
    g = critic_input_gradient(z, critic)
    delta = subtract(row_norm(g), constant(np.ones((z.shape[0], 1))))
    return mean(hadamard(delta, delta))


def _head_rows(t: Tensor, m: int) -> Tensor:
    return transpose(slice_cols(transpose(t), 0, m))


def gradient_penalty(critic, z_s: Tensor, z_t: Tensor,
                     interpolate: bool = False, rng=None) -> Tensor:
    """Squared deviation of per-node critic gradient norms from 1.

    Evaluated at the representations themselves, averaged per domain and
    summed over both domains. `interpolate=True` instead evaluates at
    random convex combinations of paired source/target rows (classic
    WGAN-GP behavior, kept behind a flag).
    """
    if not interpolate:
        return add(_penalty_at(critic, z_s), _penalty_at(critic, z_t))
    if rng is None:
        raise ContractError("gradient_penalty: interpolate mode needs an rng")
    m = min(z_s.shape[0], z_t.shape[0])
    eps = rng.random((m, 1))
    mix = add(hadamard(constant(eps), _head_rows(z_s, m)),
              hadamard(constant(1.0 - eps), _head_rows(z_t, m)))
    return _penalty_at(critic, mix)


def _row_sq_sums(z: Tensor) -> Tensor:
    d = z.shape[1]
    return smul(mean(hadamard(z, z), axis=1), float(d))


def loss_mmd(z_s: Tensor, z_t: Tensor) -> Tensor:
    """Biased squared MMD with a Gaussian kernel (median-heuristic width)."""
    pooled = np.vstack([z_s.data, z_t.data])
    sq = (pooled * pooled).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * pooled @ pooled.T, 0.0)
    iu = np.triu_indices(len(pooled), k=1)
    median = float(np.median(np.sqrt(d2[iu]))) if len(iu[0]) else 1.0
    denom = 2.0 * max(median, 1e-12) ** 2

    def kernel(a: Tensor, b: Tensor) -> Tensor:
        dist2 = subtract(add(_row_sq_sums(a), transpose(_row_sq_sums(b))),
                         smul(matmul(a, transpose(b)), 2.0))
        return exp(smul(dist2, -1.0 / denom))

    return add(subtract(mean(kernel(z_s, z_s)),
                        smul(mean(kernel(z_s, z_t)), 2.0)),
               mean(kernel(z_t, z_t)))


def lambda_t_schedule(epoch: int, epochs: int) -> float:
    """Linear ramp of the target-entropy weight: epoch / (epochs * 100)."""
    if not 0 <= epoch <= epochs:
        raise ContractError(f"schedule: epoch {epoch} outside [0, {epochs}]")
    return epoch / (epochs * 100.0)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _check_finite(name: str, value: float, epoch: int) -> float:
    if not np.isfinite(value):
        raise NumericalError(f"non-finite {name} ({value}) at epoch {epoch}")
    return float(value)


def graph_operators(g: Graph, cfg: TrainConfig):
    """Derived operators seeded by (config seed, graph size): training and
    later evaluation of the same graph reproduce the identical PPMI sample."""
    rng = np.random.default_rng(
        np.random.SeedSequence([cfg.seed or 0, g.n, g.num_edges]))
    return build_operators(g, pe_dim=cfg.pe_dim, walk_len=cfg.ppmi_walk_len,
                           walks_per_node=cfg.ppmi_walks_per_node,
                           window=cfg.ppmi_window, rng=rng)


def train(g_s: Graph, g_t: Graph, cfg: TrainConfig,
          on_epoch=None) -> tuple[ModelParams, list[EpochRecord]]:
    """Run the full adversarial training loop on a source/target graph pair.

    The target graph's labels, if present, are never read here: only its
    features and structure enter the loop. `on_epoch(record, params)` is
    invoked after every epoch when given.
    """
    if g_s.labels is None:
        raise ContractError("train: source graph must be labeled")
    if g_s.feature_dim != g_t.feature_dim:
        raise ContractError(
            f"train: feature dims differ ({g_s.feature_dim} vs {g_t.feature_dim})"
        )
    if cfg.seed is None:
        raise ConfigError("train: seed is required")

    ss = np.random.SeedSequence(cfg.seed)
    init_rng, run_rng, edge_rng = [
        np.random.default_rng(child) for child in ss.spawn(3)
    ]

    ops_s = graph_operators(g_s, cfg)
    ops_t = graph_operators(g_t, cfg)
    prep_s = prepare_graph(g_s, ops_s)
    prep_t = prepare_graph(g_t, ops_t)

    num_classes = g_s.num_classes
    params = build_model(g_s.feature_dim, num_classes, cfg, init_rng)

    opt_feat = Adam(params.theta_feat())
    opt_clf = Adam(params.theta_clf())
    opt_critic = Adam(params.theta_critic()) if params.critic is not None else None
    everything = list(params.all_trainable().values())

    history: list[EpochRecord] = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()

        step_s = prep_s
        if cfg.variant == "dft_dropedge":
            g_drop = drop_edge(g_s, cfg.dropedge_rate, edge_rng)
            base = normalized_operators(g_drop)
            step_s = PreparedGraph(g_drop, base.a_norm, base.laplacian,
                                   prep_s.ppmi, prep_s.lap_p, prep_s.pos_enc,
                                   g_drop.adjacency().astype(bool))

        zero_grads(everything)
        fwd_s = forward(step_s, params, training=True, rng=run_rng,
                        dropout_rate=cfg.dropout,
                        literal_hadamard=cfg.sa_literal)
        fwd_t = forward(prep_t, params, training=True, rng=run_rng,
                        dropout_rate=cfg.dropout,
                        literal_hadamard=cfg.sa_literal)
        lam_t = lambda_t_schedule(epoch, cfg.epochs)

        gp_value = 0.0
        if params.critic is not None:
            z_s_frozen = fwd_s.z.detach()
            z_t_frozen = fwd_t.z.detach()
            for _ in range(cfg.n_critic):
                zero_grads(opt_critic.params.values())
                q_s = criticize(z_s_frozen, params.critic)
                q_t = criticize(z_t_frozen, params.critic)
                gp = gradient_penalty(params.critic, z_s_frozen, z_t_frozen,
                                      interpolate=cfg.gp_interpolate,
                                      rng=run_rng)
                critic_obj = subtract(loss_critic(q_s, q_t),
                                      smul(gp, cfg.lambda_gp))
                _check_finite("critic objective", float(critic_obj.data[0]),
                              epoch)
                backward(critic_obj)
                opt_critic.step(-cfg.lr)
                gp_value = float(gp.data[0])

            zero_grads(everything)
            q_s = criticize(fwd_s.z, params.critic)
            q_t = criticize(fwd_t.z, params.critic)
            l_align = loss_critic(q_s, q_t)
        else:
            l_align = loss_mmd(fwd_s.z, fwd_t.z)

        l_s = loss_source(fwd_s.y_hat, g_s.labels)
        l_t = loss_target_entropy(fwd_t.y_hat)
        total = add(add(l_s, smul(l_t, lam_t)), smul(l_align, cfg.lambda_critic))

        ls_val = _check_finite("source loss", float(l_s.data[0]), epoch)
        lt_val = _check_finite("target loss", float(l_t.data[0]), epoch)
        la_val = _check_finite("critic loss", float(l_align.data[0]), epoch)
        gp_val = _check_finite("gradient penalty", gp_value, epoch)
        obj_val = _check_finite("objective", float(total.data[0]), epoch)

        backward(total)
        opt_feat.step(cfg.lr)
        opt_clf.step(cfg.lr)

        history.append(EpochRecord(epoch, ls_val, lt_val, la_val, gp_val,
                                   time.perf_counter() - t0, obj_val))
        if on_epoch is not None:
            on_epoch(history[-1], params)
    return params, history


def write_history_csv(history: list[EpochRecord], path) -> None:
    """Loss history as CSV: epoch, the four losses, wall seconds."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("epoch,loss_source,loss_target,loss_critic,loss_gp,seconds\n")
        for rec in history:
            f.write(f"{rec.epoch},{rec.loss_source:.9g},{rec.loss_target:.9g},"
                    f"{rec.loss_critic:.9g},{rec.loss_gp:.9g},"
                    f"{rec.seconds:.6f}\n")
