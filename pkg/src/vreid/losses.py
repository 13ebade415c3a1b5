"""Training objective: identity cross-entropy plus soft-margin batch-hard
triplet loss, with closed-form gradients and a finite-difference checker.

Batches follow the P x K convention (P identities, K instances each).  For
every anchor the triplet term takes its farthest same-identity sample and
its nearest other-identity sample, and wraps the margin in a softplus;
both losses are means over the P*K rows, and the overall objective is
their unweighted sum.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import DegenerateBatchError, ShapeMismatchError

TIE_TOLERANCE = 1e-7


@dataclass(frozen=True)
class EmbeddingBatch:
    """P x K structured batch of feature vectors with identity labels."""

    features: np.ndarray
    labels: np.ndarray
    P: int
    K: int

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels)
        if feats.ndim != 2 or labels.ndim != 1 or feats.shape[0] != labels.shape[0]:
            raise ShapeMismatchError(
                f"features {feats.shape} and labels {labels.shape} disagree"
            )
        if feats.shape[1] < 1:
            raise ShapeMismatchError("feature dimension must be >= 1")
        if not np.all(np.isfinite(feats)):
            raise ValueError("features must be finite")
        uniq, counts = np.unique(labels, return_counts=True)
        if uniq.size != self.P or not np.all(counts == self.K):
            raise DegenerateBatchError(
                f"batch must hold exactly P={self.P} identities with K={self.K} "
                f"instances each; got counts {dict(zip(uniq.tolist(), counts.tolist()))}"
            )
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_labels(cls, features, labels) -> "EmbeddingBatch":
        """Infer P and K from the label multiset."""
        labels = np.asarray(labels)
        uniq, counts = np.unique(labels, return_counts=True)
        if uniq.size == 0 or not np.all(counts == counts[0]):
            raise DegenerateBatchError("labels are not a balanced P x K batch")
        return cls(features=features, labels=labels, P=int(uniq.size), K=int(counts[0]))


@dataclass(frozen=True)
class LogitBatch:
    """Classifier outputs with integer class labels."""

    logits: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if logits.ndim != 2 or labels.ndim != 1 or logits.shape[0] != labels.shape[0]:
            raise ShapeMismatchError(
                f"logits {logits.shape} and labels {labels.shape} disagree"
            )
        if not np.all(np.isfinite(logits)):
            raise ValueError("logits must be finite")
        if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
            raise ValueError("labels must index into the class axis")
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "labels", labels)


def squared_euclidean_matrix(features: np.ndarray) -> np.ndarray:
    """All-pairs squared Euclidean distances, exactly symmetric.

    Tiny negatives from floating point are clamped to zero and the
    diagonal is exactly zero.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise ShapeMismatchError(f"features must be (N, d), got {feats.shape}")
    if not np.all(np.isfinite(feats)):
        raise ValueError("features must be finite")
    sq = np.sum(feats**2, axis=1)
    dist = sq[:, None] + sq[None, :] - 2.0 * feats @ feats.T
    dist = 0.5 * (dist + dist.T)
    np.maximum(dist, 0.0, out=dist)
    np.fill_diagonal(dist, 0.0)
    return dist


def softplus(z):
    """log(1 + exp(z)), stable for large |z|."""
    z = np.asarray(z, dtype=np.float64)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def id_loss(batch: LogitBatch) -> float:
    """Mean cross-entropy over the batch, no label smoothing."""
    log_probs = _log_softmax(batch.logits)
    n = batch.logits.shape[0]
    return float(-log_probs[np.arange(n), batch.labels].mean())


def id_loss_gradient(batch: LogitBatch) -> np.ndarray:
    """d(id_loss)/d(logits): (softmax - onehot) / N."""
    log_probs = _log_softmax(batch.logits)
    probs = np.exp(log_probs)
    n = batch.logits.shape[0]
    grad = probs
    grad[np.arange(n), batch.labels] -= 1.0
    return grad / n


def _hard_pairs(batch: EmbeddingBatch):
    """Hardest positive / negative indices and margins per anchor.

    The anchor itself is excluded from the positive pool, so even an
    all-identical identity still selects a genuine positive.
    """
    if batch.K < 2:
        raise DegenerateBatchError(f"triplet loss needs K >= 2, got K={batch.K}")
    if batch.P < 2:
        raise DegenerateBatchError(f"triplet loss needs P >= 2, got P={batch.P}")
    dist = squared_euclidean_matrix(batch.features)
    same = batch.labels[:, None] == batch.labels[None, :]
    pos_mask = same & ~np.eye(len(batch.labels), dtype=bool)
    neg_mask = ~same
    hardest_pos = np.argmax(np.where(pos_mask, dist, -np.inf), axis=1)
    hardest_neg = np.argmin(np.where(neg_mask, dist, np.inf), axis=1)
    n = np.arange(len(batch.labels))
    margins = dist[n, hardest_pos] - dist[n, hardest_neg]
    return dist, pos_mask, neg_mask, hardest_pos, hardest_neg, margins


def triplet_loss(batch: EmbeddingBatch) -> float:
    """Soft-margin batch-hard triplet loss.

    mean over anchors of softplus(max positive distance - min negative
    distance), distances squared Euclidean.
    """
    _, _, _, _, _, margins = _hard_pairs(batch)
    return float(softplus(margins).mean())


def triplet_loss_gradient(batch: EmbeddingBatch) -> np.ndarray:
    """d(triplet_loss)/d(features), subgradient through the hard picks."""
    _, _, _, hardest_pos, hardest_neg, margins = _hard_pairs(batch)
    n = len(batch.labels)
    coeff = expit(margins) / n
    # Weight matrix over squared-distance terms: +coeff on (a, pos),
    # -coeff on (a, neg); then dD(i,j)/df uses D = ||f_i - f_j||^2.
    w = np.zeros((n, n))
    rows = np.arange(n)
    np.add.at(w, (rows, hardest_pos), coeff)
    np.add.at(w, (rows, hardest_neg), -coeff)
    w_sym = w + w.T
    row_sum = w_sym.sum(axis=1)
    return 2.0 * (row_sum[:, None] * batch.features - w_sym @ batch.features)


def triplet_selection_gap(batch: EmbeddingBatch) -> float:
    """Smallest margin by which any anchor's hard picks beat the runner-up.

    A gap below TIE_TOLERANCE means the argmax/argmin selection is at a
    tie, where the loss is non-differentiable.
    """
    dist, pos_mask, neg_mask, hardest_pos, hardest_neg, _ = _hard_pairs(batch)
    n = len(batch.labels)
    rows = np.arange(n)
    gap = np.inf
    pos_vals = np.where(pos_mask, dist, -np.inf)
    neg_vals = np.where(neg_mask, dist, np.inf)
    if batch.K > 2:
        runner = pos_vals.copy()
        runner[rows, hardest_pos] = -np.inf
        gap = min(gap, float(np.min(pos_vals[rows, hardest_pos] - runner.max(axis=1))))
    if (batch.P - 1) * batch.K > 1:
        runner = neg_vals.copy()
        runner[rows, hardest_neg] = np.inf
        gap = min(gap, float(np.min(runner.min(axis=1) - neg_vals[rows, hardest_neg])))
    return gap


def overall_loss(id_value: float, triplet_value: float) -> float:
    """Total objective: equal-weight sum of the two losses."""
    total = float(id_value) + float(triplet_value)
    if not np.isfinite(total):
        raise ValueError(f"loss terms must be finite, got {id_value} + {triplet_value}")
    return total


@dataclass(frozen=True)
class FDCheckReport:
    """Outcome of comparing an analytic gradient against central differences."""

    max_rel_error: float
    passed: bool
    rel_errors: np.ndarray
    skipped: tuple[int, ...]
    epsilon: float
    tolerance: float

    @property
    def n_checked(self) -> int:
        return int(np.sum(np.isfinite(self.rel_errors)))

    def to_dict(self) -> dict:
        return {
            "max_rel_error": self.max_rel_error,
            "passed": self.passed,
            "skipped": list(self.skipped),
            "n_checked": self.n_checked,
            "epsilon": self.epsilon,
            "tolerance": self.tolerance,
        }


def finite_difference_check(
    loss_fn,
    params: np.ndarray,
    epsilon: float = 1e-4,
    tolerance: float = 1e-4,
    signature=None,
    coords=None,
) -> FDCheckReport:
    """Compare ``loss_fn``'s gradient against central finite differences.

    ``loss_fn(params)`` must return ``(value, gradient)`` for a flat
    float64 parameter vector.  Relative error per coordinate is
    ``|g_fd - g| / max(1, |g_fd|, |g|)``.

    ``signature(params)``, when given, fingerprints any discrete choices
    inside the loss (e.g. which samples win an argmax).  A coordinate whose
    two evaluation points disagree on the signature straddles a kink; it is
    skipped with a warning rather than reported as a gradient error.

    ``coords`` restricts the check to a subset of coordinates.
    """
    params = np.asarray(params, dtype=np.float64)
    _, grad = loss_fn(params)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape:
        raise ShapeMismatchError(
            f"gradient shape {grad.shape} does not match params {params.shape}"
        )
    if coords is None:
        coords = range(params.size)
    rel_errors = np.full(params.size, np.nan)
    skipped = []
    for i in coords:
        step = np.zeros_like(params)
        step[i] = epsilon
        plus, minus = params + step, params - step
        if signature is not None and signature(plus) != signature(minus):
            warnings.warn(
                f"coordinate {i}: loss is at a kink (discrete selection flips "
                f"within +/-epsilon); finite-difference check inconclusive",
                stacklevel=2,
            )
            skipped.append(i)
            continue
        g_fd = (loss_fn(plus)[0] - loss_fn(minus)[0]) / (2.0 * epsilon)
        denom = max(1.0, abs(g_fd), abs(grad[i]))
        rel_errors[i] = abs(g_fd - grad[i]) / denom
    checked = rel_errors[np.isfinite(rel_errors)]
    max_rel = float(checked.max()) if checked.size else 0.0
    return FDCheckReport(
        max_rel_error=max_rel,
        passed=bool(max_rel < tolerance),
        rel_errors=rel_errors,
        skipped=tuple(skipped),
        epsilon=epsilon,
        tolerance=tolerance,
    )


def triplet_signature(labels, P: int, K: int):
    """Signature factory for FD-checking the triplet loss.

    Fingerprints the hard positive/negative picks and flags near-ties
    (runner-up within TIE_TOLERANCE) so kink-straddling coordinates are
    skipped.
    """
    labels = np.asarray(labels)

    def _sig(flat_features):
        feats = flat_features.reshape(labels.size, -1)
        batch = EmbeddingBatch(features=feats, labels=labels, P=P, K=K)
        _, _, _, hp, hn, _ = _hard_pairs(batch)
        if triplet_selection_gap(batch) < TIE_TOLERANCE:
            # Never compares equal, so a near-tie at either evaluation
            # point forces the coordinate to be skipped.
            return object()
        return (tuple(hp.tolist()), tuple(hn.tolist()))

    return _sig
