"""Evaluation metrics, the covariate-shift probe, and the feature-correlation
analysis (closed form plus Monte Carlo estimators).

All metric functions are pure numpy over immutable inputs. Pairwise
distance work is blocked so memory stays bounded at 10k nodes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

BLOCK = 1024


@dataclass
class MetricsReport:
    """Per-run evaluation summary (serialized as JSON by the CLI)."""

    micro_f1: float
    macro_f1: float
    icdr: float
    silhouette: float
    per_class: list[dict]

    def to_dict(self) -> dict:
        return {
            "micro_f1": self.micro_f1,
            "macro_f1": self.macro_f1,
            "icdr": self.icdr,
            "silhouette": self.silhouette,
            "per_class": self.per_class,
        }


def _confusion_counts(pred, truth, num_classes):
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ContractError(
            f"f1: pred/truth shapes differ ({pred.shape} vs {truth.shape})"
        )
    if pred.size == 0:
        raise ContractError("f1: empty input")
    for name, arr in (("pred", pred), ("truth", truth)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ContractError(f"f1: {name} values outside [0, {num_classes})")
    tp = np.zeros(num_classes)
    fp = np.zeros(num_classes)
    fn = np.zeros(num_classes)
    hit = pred == truth
    np.add.at(tp, pred[hit], 1.0)
    np.add.at(fp, pred[~hit], 1.0)
    np.add.at(fn, truth[~hit], 1.0)
    return tp, fp, fn


def f1_scores(pred, truth, num_classes: int) -> tuple[float, float]:
    """(micro, macro) F1.

    Micro pools counts globally, which reduces to accuracy for
    single-label multiclass input. Macro averages per-class F1 over the
    classes present in either prediction or truth; a class present but
    never predicted correctly contributes 0.
    """
    tp, fp, fn = _confusion_counts(pred, truth, num_classes)
    micro = tp.sum() / (tp.sum() + 0.5 * (fp.sum() + fn.sum()))
    present = (tp + fp + fn) > 0
    denom = 2 * tp + fp + fn
    f1 = np.divide(2 * tp, denom, out=np.zeros(num_classes), where=denom > 0)
    macro = float(f1[present].mean())
    return float(micro), macro


def per_class_stats(pred, truth, num_classes: int) -> list[dict]:
    tp, fp, fn = _confusion_counts(pred, truth, num_classes)
    stats = []
    for c in range(num_classes):
        support = int(tp[c] + fn[c])
        precision = tp[c] / (tp[c] + fp[c]) if tp[c] + fp[c] > 0 else 0.0
        recall = tp[c] / (tp[c] + fn[c]) if tp[c] + fn[c] > 0 else 0.0
        denom = 2 * tp[c] + fp[c] + fn[c]
        f1 = 2 * tp[c] / denom if denom > 0 else 0.0
        stats.append({"class": c, "precision": float(precision),
                      "recall": float(recall), "f1": float(f1),
                      "support": support})
    return stats


def _block_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    sq_a = (a * a).sum(axis=1)[:, None]
    sq_b = (b * b).sum(axis=1)[None, :]
    return np.sqrt(np.maximum(sq_a + sq_b - 2.0 * a @ b.T, 0.0))


def icdr(z, labels) -> float:
    """Intra-class distance ratio: mean within-class pairwise distance over
    the sum of mean within- and between-class distances, across i < j pairs."""
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(z)
    if n < 2 or len(np.unique(labels)) < 2:
        raise ContractError("icdr: need >= 2 nodes and >= 2 classes present")
    intra_sum = inter_sum = 0.0
    intra_cnt = inter_cnt = 0
    for i0 in range(0, n, BLOCK):
        i1 = min(i0 + BLOCK, n)
        for j0 in range(i0, n, BLOCK):
            j1 = min(j0 + BLOCK, n)
            d = _block_distances(z[i0:i1], z[j0:j1])
            same = labels[i0:i1, None] == labels[None, j0:j1]
            if i0 == j0:
                upper = np.triu(np.ones_like(d, dtype=bool), k=1)
            else:
                upper = np.ones_like(d, dtype=bool)
            intra = upper & same
            inter = upper & ~same
            intra_sum += d[intra].sum()
            inter_sum += d[inter].sum()
            intra_cnt += int(intra.sum())
            inter_cnt += int(inter.sum())
    if intra_cnt == 0:
        raise ContractError("icdr: no intra-class pairs")
    if inter_cnt == 0:
        raise ContractError("icdr: no inter-class pairs")
    mean_intra = intra_sum / intra_cnt
    mean_inter = inter_sum / inter_cnt
    return float(mean_intra / (mean_intra + mean_inter))


def silhouette(z, labels) -> float:
    """Mean silhouette coefficient (b - a) / max(a, b) over all points.

    a is the mean distance to the point's own cluster, b the smallest
    mean distance to any other cluster; singleton-cluster points score 0.
    """
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ContractError("silhouette: need >= 2 classes present")
    n = len(z)
    counts = {c: int((labels == c).sum()) for c in classes}
    # per-point summed distance to each class, accumulated block-wise
    sums = np.zeros((n, len(classes)))
    col = {c: j for j, c in enumerate(classes)}
    for i0 in range(0, n, BLOCK):
        i1 = min(i0 + BLOCK, n)
        d = _block_distances(z[i0:i1], z)
        for c in classes:
            sums[i0:i1, col[c]] = d[:, labels == c].sum(axis=1)
    scores = np.zeros(n)
    for i in range(n):
        c = labels[i]
        if counts[c] <= 1:
            continue
        a = sums[i, col[c]] / (counts[c] - 1)
        b = min(sums[i, col[other]] / counts[other]
                for other in classes if other != c)
        m = max(a, b)
        scores[i] = 0.0 if m == 0 else (b - a) / m
    return float(scores.mean())


def _knn_majority(queries: np.ndarray, ref_x: np.ndarray, ref_y: np.ndarray,
                  k: int, num_classes: int) -> np.ndarray:
    out = np.empty(len(queries), dtype=np.int64)
    for i0 in range(0, len(queries), BLOCK):
        i1 = min(i0 + BLOCK, len(queries))
        d = _block_distances(queries[i0:i1], ref_x)
        nearest = np.argpartition(d, k - 1, axis=1)[:, :k]
        for r, idx in enumerate(nearest):
            votes = np.bincount(ref_y[idx], minlength=num_classes)
            out[i0 + r] = int(votes.argmax())  # argmax breaks ties low
    return out


def covariate_shift_probe(x_s, y_s, x_t, y_t, k: int = 128) -> float:
    """Fraction of pooled samples whose k-NN majority label agrees between
    the source and target reference sets."""
    x_s = np.asarray(x_s, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    y_s = np.asarray(y_s, dtype=np.int64)
    y_t = np.asarray(y_t, dtype=np.int64)
    if k > min(len(x_s), len(x_t)):
        raise ContractError(
            f"probe: k={k} exceeds smallest domain size "
            f"{min(len(x_s), len(x_t))}"
        )
    num_classes = int(max(y_s.max(), y_t.max())) + 1
    pooled = np.vstack([x_s, x_t])
    from_s = _knn_majority(pooled, x_s, y_s, k, num_classes)
    from_t = _knn_majority(pooled, x_t, y_t, k, num_classes)
    return float((from_s == from_t).mean())


# ---------------------------------------------------------------------------
# feature-correlation analysis
# ---------------------------------------------------------------------------


def expected_correlation(a_tilde, k: int, feat_dim: int) -> float:
    """Closed-form E||H H^T||_F^2 after k propagation steps with identity
    weights on i.i.d. standard-normal inputs.

    With B = a_tilde^(2k): D * ((D+1) * sum(B_ij^2) + trace(B)^2).
    Expects the self-loop-augmented, unnormalized adjacency A + I.
    """
    a_tilde = np.asarray(a_tilde, dtype=np.float64)
    if k < 0:
        raise ContractError(f"expected_correlation: k must be >= 0, got {k}")
    b = np.linalg.matrix_power(a_tilde, 2 * k)
    return float(feat_dim * ((feat_dim + 1) * np.sum(b * b) + np.trace(b) ** 2))


def _gram_sq_norms(h: np.ndarray) -> np.ndarray:
    # ||H H^T||_F^2 == ||H^T H||_F^2; the (D, D) Gram matrix is cheaper
    gram = np.matmul(np.swapaxes(h, 1, 2), h)
    return (gram * gram).sum(axis=(1, 2))


def monte_carlo_correlation(a_tilde, k: int, feat_dim: int, samples: int,
                            rng=0) -> tuple[float, float]:
    """Sample estimate of E||H H^T||_F^2 with identity weights.

    Returns (mean, standard error).
    """
    if samples < 1:
        raise ContractError("monte_carlo_correlation: samples must be >= 1")
    a_tilde = np.asarray(a_tilde, dtype=np.float64)
    rng = np.random.default_rng(rng)
    n = a_tilde.shape[0]
    propagate = np.linalg.matrix_power(a_tilde, k)
    values = np.empty(samples)
    done = 0
    while done < samples:
        batch = min(4096, samples - done)
        x = rng.standard_normal((batch, n, feat_dim))
        h = np.matmul(propagate, x)
        values[done:done + batch] = _gram_sq_norms(h)
        done += batch
    stderr = values.std(ddof=1) / np.sqrt(samples) if samples > 1 else 0.0
    return float(values.mean()), float(stderr)


def glorot_correlation_curve(a_tilde, depth_max: int, feat_dim: int,
                             samples: int, rng=0) -> tuple[np.ndarray, np.ndarray]:
    """Monte Carlo E||H H^T||_F^2 per depth 0..depth_max, drawing a fresh
    Glorot-uniform weight matrix per layer per sample (identity activation).

    Returns (means, standard errors), both of length depth_max + 1.
    """
    a_tilde = np.asarray(a_tilde, dtype=np.float64)
    rng = np.random.default_rng(rng)
    n = a_tilde.shape[0]
    limit = np.sqrt(6.0 / (feat_dim + feat_dim))
    values = np.empty((depth_max + 1, samples))
    done = 0
    while done < samples:
        batch = min(1024, samples - done)
        h = rng.standard_normal((batch, n, feat_dim))
        values[0, done:done + batch] = _gram_sq_norms(h)
        for depth in range(1, depth_max + 1):
            w = rng.uniform(-limit, limit, size=(batch, feat_dim, feat_dim))
            h = np.matmul(np.matmul(a_tilde, h), w)
            values[depth, done:done + batch] = _gram_sq_norms(h)
        done += batch
    means = values.mean(axis=1)
    stderr = (values.std(axis=1, ddof=1) / np.sqrt(samples)
              if samples > 1 else np.zeros(depth_max + 1))
    return means, stderr


def evaluate_representations(z, pred, truth, num_classes: int) -> MetricsReport:
    """Bundle every evaluation metric for one set of representations."""
    micro, macro = f1_scores(pred, truth, num_classes)
    return MetricsReport(
        micro_f1=micro,
        macro_f1=macro,
        icdr=icdr(z, truth),
        silhouette=silhouette(z, truth),
        per_class=per_class_stats(pred, truth, num_classes),
    )
