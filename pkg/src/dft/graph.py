"""Graph containers, derived propagation operators, and synthetic generators.

All derived matrices are dense float64: the graphs in scope stay small
enough (<= 10k nodes) that dense linear algebra is the simpler, testable
choice.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor, constant

# Eigenvalues below this are treated as the trivial (constant-signal) part
# of the spectrum and skipped by the positional encoding.
TRIVIAL_EIG = 1e-8


class Graph:
    """Undirected graph with dense node features and optional labels.

    Edges are stored as a canonical (E, 2) int array with u < v, sorted
    lexicographically; self-loops are never stored (normalization adds
    them back).
    """

    def __init__(self, n: int, edges, features, labels=None,
                 num_classes: Optional[int] = None):
        self.n = int(n)
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if edges.size:
            lo = edges.min(axis=1)
            hi = edges.max(axis=1)
            if (lo == hi).any():
                raise ContractError("graph: self-loops are not stored")
            edges = np.unique(np.stack([lo, hi], axis=1), axis=0)
            if edges.max() >= self.n or edges.min() < 0:
                raise ContractError(
                    f"graph: edge endpoint out of range for n={self.n}"
                )
        self.edges = edges
        feats = features if isinstance(features, Tensor) else constant(features)
        if feats.data.ndim != 2 or feats.shape[0] != self.n:
            raise ShapeError(
                f"graph: features shape {feats.shape} does not match n={self.n}"
            )
        self.features = feats
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (self.n,):
                raise ShapeError(
                    f"graph: labels shape {labels.shape} does not match n={self.n}"
                )
            if num_classes is None:
                num_classes = int(labels.max()) + 1 if labels.size else 0
            if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
                raise ContractError(
                    f"graph: labels must lie in [0, {num_classes})"
                )
        self.labels = labels
        self.num_classes = num_classes

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        if self.edges.size:
            a[self.edges[:, 0], self.edges[:, 1]] = 1.0
            a[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return a

    def degrees(self) -> np.ndarray:
        d = np.zeros(self.n)
        if self.edges.size:
            np.add.at(d, self.edges[:, 0], 1.0)
            np.add.at(d, self.edges[:, 1], 1.0)
        return d

    def neighbor_lists(self) -> tuple[np.ndarray, np.ndarray]:
        """CSR-style (indptr, targets) over the undirected edge set."""
        deg = self.degrees().astype(np.int64)
        indptr = np.zeros(self.n + 1, dtype=np.int64)
        np.cumsum(deg, out=indptr[1:])
        targets = np.zeros(indptr[-1], dtype=np.int64)
        fill = indptr[:-1].copy()
        for u, v in self.edges:
            targets[fill[u]] = v
            fill[u] += 1
            targets[fill[v]] = u
            fill[v] += 1
        return indptr, targets

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        same_labels = (
            (self.labels is None and other.labels is None)
            or (self.labels is not None and other.labels is not None
                and np.array_equal(self.labels, other.labels))
        )
        return (
            self.n == other.n
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.features.data, other.features.data)
            and same_labels
            and self.num_classes == other.num_classes
        )


@dataclass
class GraphOperators:
    """Propagation operators derived from one graph."""

    a_norm: Tensor
    laplacian: Tensor
    ppmi: Optional[Tensor] = None
    pos_enc: Optional[Tensor] = None


def sym_normalize(weights: np.ndarray) -> np.ndarray:
    """(D+I)^{-1/2} (W+I) (D+I)^{-1/2} for a nonnegative weight matrix.

    Scaling by the outer product keeps the result exactly symmetric for
    symmetric input (no association-order rounding asymmetry).
    """
    d = weights.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(d + 1.0)
    return (weights + np.eye(len(weights))) * np.outer(inv_sqrt, inv_sqrt)


def normalized_operators(g: Graph) -> GraphOperators:
    """Self-loop-augmented normalized adjacency and its Laplacian."""
    a_norm = sym_normalize(g.adjacency())
    laplacian = np.eye(g.n) - a_norm
    return GraphOperators(a_norm=constant(a_norm), laplacian=constant(laplacian))


def _random_walks(g: Graph, walk_len: int, walks_per_node: int,
                  rng: np.random.Generator) -> np.ndarray:
    """Uniform random walks, one row per walk, walk_len nodes each.

    Nodes without neighbors stay in place (self-only walks).
    """
    indptr, targets = g.neighbor_lists()
    deg = np.diff(indptr)
    starts = np.repeat(np.arange(g.n, dtype=np.int64), walks_per_node)
    walks = np.empty((len(starts), walk_len), dtype=np.int64)
    walks[:, 0] = starts
    cur = starts
    for t in range(1, walk_len):
        u = rng.random(len(cur))
        d = deg[cur]
        offset = np.floor(u * np.maximum(d, 1)).astype(np.int64)
        nxt = np.where(d > 0, targets[np.minimum(indptr[cur] + offset,
                                                 len(targets) - 1)], cur)
        walks[:, t] = nxt
        cur = nxt
    return walks


def ppmi_matrix(g: Graph, walk_len: int = 40, walks_per_node: int = 10,
                window: int = 5, rng=0) -> Tensor:
    """Positive PMI of random-walk co-occurrence, normalized like a_norm.

    Counts forward pairs (w_i, w_j) for 0 < j - i <= window over all
    sampled walks, skipping pairs that land on the same node. The PPMI
    matrix is then symmetrized and degree-normalized so it can drop in
    for the adjacency operator in message passing.
    """
    if not walk_len >= window >= 1:
        raise ContractError(
            f"ppmi: need walk_len >= window >= 1, got {walk_len}, {window}"
        )
    if g.num_edges == 0:
        return constant(np.zeros((g.n, g.n)))
    rng = np.random.default_rng(rng)
    walks = _random_walks(g, walk_len, walks_per_node, rng)
    counts = np.zeros((g.n, g.n))
    for delta in range(1, window + 1):
        left = walks[:, :-delta].ravel()
        right = walks[:, delta:].ravel()
        keep = left != right
        np.add.at(counts, (left[keep], right[keep]), 1.0)

    total = counts.sum()
    row = counts.sum(axis=1)
    col = counts.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = counts * total / np.outer(row, col)
        pmi = np.where(counts > 0, np.log(ratio, where=counts > 0), 0.0)
    ppmi = np.maximum(pmi, 0.0)
    ppmi = 0.5 * (ppmi + ppmi.T)
    return constant(sym_normalize(ppmi))


def laplacian_positional_encoding(g: Graph, k: int = 2) -> Tensor:
    """Eigenvectors of the k smallest non-trivial Laplacian eigenvalues.

    Columns are unit-norm with the first nonzero entry made positive.
    Extra zero eigenvalues (disconnected graphs) are skipped with a
    warning; if fewer than k non-trivial columns exist the result is
    zero-padded.
    """
    if not k < g.n:
        raise ContractError(f"positional encoding: need k < n, got k={k}, n={g.n}")
    lap = normalized_operators(g).laplacian.data
    vals, vecs = np.linalg.eigh(lap)
    nontrivial = vals >= TRIVIAL_EIG
    skipped = int((~nontrivial).sum())
    if skipped > 1:
        warnings.warn(
            f"positional encoding: {skipped} near-zero eigenvalues skipped "
            "(graph appears disconnected)"
        )
    cols = vecs[:, nontrivial][:, :k]
    for j in range(cols.shape[1]):
        nz = np.flatnonzero(np.abs(cols[:, j]) > 1e-12)
        if nz.size and cols[nz[0], j] < 0:
            cols[:, j] = -cols[:, j]
    if cols.shape[1] < k:
        warnings.warn(
            f"positional encoding: only {cols.shape[1]} non-trivial "
            f"eigenvectors available, zero-padding to k={k}"
        )
        cols = np.hstack([cols, np.zeros((g.n, k - cols.shape[1]))])
    return constant(cols)


def build_operators(g: Graph, *, pe_dim: int = 2, walk_len: int = 40,
                    walks_per_node: int = 10, window: int = 5,
                    rng=0) -> GraphOperators:
    """All derived operators for one graph in a single pass."""
    ops = normalized_operators(g)
    ops.ppmi = ppmi_matrix(g, walk_len, walks_per_node, window, rng)
    ops.pos_enc = laplacian_positional_encoding(g, pe_dim)
    return ops


def sbm_generate(block_sizes, p_in: float, p_out: float, feat_means,
                 feat_std: float, rng=0) -> Graph:
    """Stochastic block model with Gaussian features around class means."""
    if not 0.0 <= p_out <= p_in <= 1.0:
        raise ContractError(
            f"sbm: need 0 <= p_out <= p_in <= 1, got p_in={p_in}, p_out={p_out}"
        )
    rng = np.random.default_rng(rng)
    block_sizes = [int(s) for s in block_sizes]
    n = sum(block_sizes)
    labels = np.repeat(np.arange(len(block_sizes)), block_sizes)
    means = np.asarray(feat_means, dtype=np.float64)
    if means.shape[0] != len(block_sizes):
        raise ShapeError(
            f"sbm: {means.shape[0]} mean vectors for {len(block_sizes)} blocks"
        )

    iu, ju = np.triu_indices(n, k=1)
    p = np.where(labels[iu] == labels[ju], p_in, p_out)
    chosen = rng.random(len(iu)) < p
    edges = np.stack([iu[chosen], ju[chosen]], axis=1)

    features = means[labels] + feat_std * rng.standard_normal((n, means.shape[1]))
    return Graph(n, edges, features, labels=labels, num_classes=len(block_sizes))


def drop_edge(g: Graph, rate: float, rng=0) -> Graph:
    """Remove each edge independently with probability `rate`."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"drop_edge: rate must be in [0, 1), got {rate}")
    rng = np.random.default_rng(rng)
    keep = rng.random(g.num_edges) >= rate
    return Graph(g.n, g.edges[keep], g.features, labels=g.labels,
                 num_classes=g.num_classes)


def random_graph(n: int, p: float, rng=0) -> Graph:
    """Erdős–Rényi graph with standard-normal features (analysis helper)."""
    rng = np.random.default_rng(rng)
    iu, ju = np.triu_indices(n, k=1)
    chosen = rng.random(len(iu)) < p
    edges = np.stack([iu[chosen], ju[chosen]], axis=1)
    return Graph(n, edges, rng.standard_normal((n, 1)))
