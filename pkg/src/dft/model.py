"""Dual-branch network assembly: decorrelated extraction over the adjacency
and PPMI operators, attention aggregation, transformer stack, classifier
head, and domain critic. Also owns the checkpoint format ("dft-ckpt-1")."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ContractError, DataError, ShapeError
from .graph import Graph, GraphOperators
from .layers import (
    DecorrConfig,
    Dense,
    TransformerLayerParams,
    decorr_stack,
    gcn_layer,
    glorot_uniform,
    transformer_layer,
)
from .tensor import (
    Tensor,
    add,
    concat_cols,
    constant,
    dropout,
    hadamard,
    matmul,
    param,
    relu,
    slice_cols,
    softmax_rows,
    step,
    transpose,
)

CHECKPOINT_VERSION = "dft-ckpt-1"

VARIANTS = ("dft", "dft_gcn", "dft_not", "dft_puret", "dft_mmd", "dft_dropedge")

# Variants whose feature extractor uses plain graph convolutions instead of
# the decorrelating gradient steps.
GCN_VARIANTS = ("dft_gcn", "dft_dropedge")


@dataclass
class ModelParams:
    """All trainable tensors, grouped by optimizer role."""

    variant: str
    proj: Dense
    attn: Dense
    decorr: DecorrConfig
    pe_dense: Optional[Dense] = None
    tlayers: list[TransformerLayerParams] = field(default_factory=list)
    gcn_ws: list[Tensor] = field(default_factory=list)
    clf: Optional[Dense] = None
    critic: Optional[list[Dense]] = None

    def _dense_entries(self, prefix: str, d: Dense):
        out = {f"{prefix}.w": d.w}
        if d.b is not None:
            out[f"{prefix}.b"] = d.b
        return out

    def theta_feat(self) -> dict[str, Tensor]:
        out = {}
        out.update(self._dense_entries("proj", self.proj))
        out.update(self._dense_entries("attn", self.attn))
        if self.pe_dense is not None:
            out.update(self._dense_entries("pe", self.pe_dense))
        for i, lp in enumerate(self.tlayers):
            out[f"t{i}.wq"] = lp.wq
            out[f"t{i}.wk"] = lp.wk
            out[f"t{i}.wv"] = lp.wv
            out.update(self._dense_entries(f"t{i}.ffn1", lp.ffn1))
            out.update(self._dense_entries(f"t{i}.ffn2", lp.ffn2))
            out[f"t{i}.bn1.gamma"] = lp.bn1.gamma
            out[f"t{i}.bn1.beta"] = lp.bn1.beta
            out[f"t{i}.bn2.gamma"] = lp.bn2.gamma
            out[f"t{i}.bn2.beta"] = lp.bn2.beta
        for i, w in enumerate(self.gcn_ws):
            out[f"gcn{i}.w"] = w
        return out

    def theta_clf(self) -> dict[str, Tensor]:
        return self._dense_entries("clf", self.clf)

    def theta_critic(self) -> dict[str, Tensor]:
        out = {}
        if self.critic is not None:
            for i, d in enumerate(self.critic):
                out.update(self._dense_entries(f"critic{i}", d))
        return out

    def bn_state(self) -> dict[str, np.ndarray]:
        out = {}
        for i, lp in enumerate(self.tlayers):
            for j, bn in ((1, lp.bn1), (2, lp.bn2)):
                out[f"t{i}.bn{j}.running_mean"] = bn.state.running_mean
                out[f"t{i}.bn{j}.running_var"] = bn.state.running_var
        return out

    def all_trainable(self) -> dict[str, Tensor]:
        out = self.theta_feat()
        out.update(self.theta_clf())
        out.update(self.theta_critic())
        return out


@dataclass
class DomainForward:
    """Result of one domain pass: representations, predictions, critic scores."""

    z: Tensor
    y_hat: Tensor
    q: Optional[Tensor]
    alpha: Tensor


def build_model(input_dim: int, num_classes: int, cfg, rng) -> ModelParams:
    """Fresh Glorot-initialized parameters for the configured variant."""
    rng = np.random.default_rng(rng)
    if cfg.variant not in VARIANTS:
        raise ContractError(f"unknown variant {cfg.variant!r}")
    dim = cfg.hidden_dim
    decorr = DecorrConfig(cfg.lambda1, cfg.lambda2, cfg.gamma, cfg.num_decorr_layers)
    params = ModelParams(
        variant=cfg.variant,
        proj=Dense.init(input_dim, dim, rng),
        attn=Dense.init(2 * dim, 2, rng),
        decorr=decorr,
    )
    if cfg.variant in GCN_VARIANTS:
        params.gcn_ws = [param(glorot_uniform(dim, dim, rng))
                         for _ in range(cfg.num_decorr_layers)]
    if cfg.variant != "dft_not":
        params.pe_dense = Dense.init(cfg.pe_dim, dim, rng)
        params.tlayers = [TransformerLayerParams.init(dim, rng)
                          for _ in range(cfg.num_transformer_layers)]
    params.clf = Dense.init(dim, num_classes, rng)
    if cfg.variant != "dft_mmd":
        params.critic = [Dense.init(dim, dim, rng), Dense.init(dim, 1, rng)]
    return params


@dataclass
class PreparedGraph:
    """One graph with every derived operator the forward pass needs."""

    graph: Graph
    a_norm: Tensor
    lap_a: Tensor
    ppmi: Tensor
    lap_p: Tensor
    pos_enc: Tensor
    attn_mask: np.ndarray


def prepare_graph(g: Graph, ops: GraphOperators) -> PreparedGraph:
    if ops.ppmi is None or ops.pos_enc is None:
        raise ContractError("prepare_graph requires ppmi and pos_enc operators")
    lap_p = constant(np.eye(g.n) - ops.ppmi.data)
    mask = g.adjacency().astype(bool)
    return PreparedGraph(g, ops.a_norm, ops.laplacian, ops.ppmi, lap_p,
                         ops.pos_enc, mask)


def extract_features(prepared: PreparedGraph, params: ModelParams, *,
                     training: bool, rng, dropout_rate: float = 0.0,
                     literal_hadamard: bool = False) -> tuple[Tensor, Tensor]:
    """Aggregated dual-branch representations Z plus the per-node branch
    attention coefficients."""
    h0 = params.proj(prepared.graph.features)
    if params.variant in GCN_VARIANTS:
        ha, hp = h0, h0
        for w in params.gcn_ws:
            ha = gcn_layer(ha, prepared.a_norm, w)
            hp = gcn_layer(hp, prepared.ppmi, w)
    else:
        ha = decorr_stack(h0, prepared.lap_a, params.decorr)
        hp = decorr_stack(h0, prepared.lap_p, params.decorr)

    logits = params.attn(concat_cols(ha, hp))
    alpha = softmax_rows(logits)
    h = add(hadamard(slice_cols(alpha, 0, 1), ha),
            hadamard(slice_cols(alpha, 1, 2), hp))

    if params.variant != "dft_not":
        n = prepared.graph.n
        mask = (np.ones((n, n), dtype=bool) if params.variant == "dft_puret"
                else prepared.attn_mask)
        for i, lp in enumerate(params.tlayers):
            h = transformer_layer(h, prepared.pos_enc if i == 0 else None,
                                  mask, lp, params.pe_dense, first_layer=i == 0,
                                  training=training,
                                  literal_hadamard=literal_hadamard)
            h = dropout(h, dropout_rate, rng, training=training)
    return h, alpha


def classify(z: Tensor, clf: Dense) -> Tensor:
    """Row-softmax class probabilities."""
    return softmax_rows(clf(z))


def criticize(z: Tensor, critic: list[Dense]) -> Tensor:
    """Unbounded per-node critic score, shape (n, 1)."""
    h = z
    for layer in critic[:-1]:
        h = relu(layer(h))
    return critic[-1](h)


def critic_input_gradient(z: Tensor, critic: list[Dense]) -> Tensor:
    """Per-node gradient of the critic output w.r.t. its input rows.

    Built from tape ops via the chain rule (ReLU gates enter as
    piecewise-constant step factors), so the result stays differentiable
    with respect to the critic weights — exactly what the gradient
    penalty needs.
    """
    preacts = []
    h = z
    for layer in critic[:-1]:
        a = layer(h)
        preacts.append(a)
        h = relu(a)
    n = z.shape[0]
    g = matmul(constant(np.ones((n, 1))), transpose(critic[-1].w))
    for layer, a in zip(reversed(critic[:-1]), reversed(preacts)):
        g = matmul(hadamard(g, step(a)), transpose(layer.w))
    return g


def forward(prepared: PreparedGraph, params: ModelParams, *, training: bool,
            rng, dropout_rate: float = 0.0,
            literal_hadamard: bool = False) -> DomainForward:
    z, alpha = extract_features(prepared, params, training=training, rng=rng,
                                dropout_rate=dropout_rate,
                                literal_hadamard=literal_hadamard)
    y_hat = classify(z, params.clf)
    q = criticize(z, params.critic) if params.critic is not None else None
    return DomainForward(z=z, y_hat=y_hat, q=q, alpha=alpha)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _named_arrays(params: ModelParams) -> list[tuple[str, str, np.ndarray]]:
    entries = []
    for name, t in params.theta_feat().items():
        entries.append((name, "feat", t.data))
    for name, t in params.theta_clf().items():
        entries.append((name, "clf", t.data))
    for name, t in params.theta_critic().items():
        entries.append((name, "critic", t.data))
    for name, arr in params.bn_state().items():
        entries.append((name, "state", arr))
    return entries


def save_checkpoint(path, params: ModelParams, config: dict) -> None:
    """Single-file layout: u32 manifest length, manifest JSON, raw f64 data."""
    entries = _named_arrays(params)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": config,
        "tensors": [
            {"name": name, "group": group, "shape": list(arr.shape),
             "dtype": "f64"}
            for name, group, arr in entries
        ],
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, _, arr in entries:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_manifest(path) -> dict:
    with open(path, "rb") as f:
        (length,) = struct.unpack("<I", f.read(4))
        return json.loads(f.read(length).decode("utf-8"))


def load_checkpoint(path, cfg_factory) -> tuple[ModelParams, dict]:
    """Rebuild a model from a checkpoint file.

    `cfg_factory` maps the stored config dict to the config object
    build_model expects (kept as a callable to avoid a circular import
    with the training module).
    """
    with open(path, "rb") as f:
        (length,) = struct.unpack("<I", f.read(4))
        manifest = json.loads(f.read(length).decode("utf-8"))
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise DataError(
                f"checkpoint {path}: unsupported version {manifest.get('version')!r}"
            )
        config = manifest["config"]
        cfg = cfg_factory(config)
        params = build_model(config["input_dim"], config["num_classes"], cfg,
                             rng=0)
        targets: dict[str, np.ndarray] = {}
        for name, t in params.all_trainable().items():
            targets[name] = t.data
        targets.update(params.bn_state())
        seen = set()
        for entry in manifest["tensors"]:
            name = entry["name"]
            shape = tuple(entry["shape"])
            if name not in targets:
                raise DataError(f"checkpoint {path}: unexpected tensor {name!r}")
            expected = targets[name].shape
            if shape != expected:
                raise ShapeError(
                    f"checkpoint {path}: tensor {name!r} has shape {shape}, "
                    f"expected {expected}"
                )
            raw = f.read(8 * int(np.prod(shape)) if shape else 8)
            arr = np.frombuffer(raw, dtype="<f8").reshape(shape)
            targets[name][...] = arr
            seen.add(name)
        missing = sorted(set(targets) - seen)
        if missing:
            raise DataError(f"checkpoint {path}: missing tensors {missing}")
    return params, config
