"""Inference-time dynamic feature fusion.

At query time every model (each trained at its own input aspect ratio)
produces a feature vector; the fused descriptor is their weighted sum,
where each weight depends on how close the model's training aspect ratio
sits to the query image's.  The weight rule is a step function of the
absolute ratio difference and is data, not code: thresholds load from
config since the best values vary per dataset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyInputError, ShapeMismatchError


@dataclass(frozen=True)
class TaggedFeature:
    """A feature vector tagged with its model's training aspect ratio."""

    vector: np.ndarray
    model_ar: float

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=np.float64)
        if vec.ndim != 1:
            raise ShapeMismatchError(f"vector must be 1-D, got shape {vec.shape}")
        if not np.all(np.isfinite(vec)):
            raise ValueError("feature vector must be finite")
        if self.model_ar <= 0:
            raise ValueError(f"model_ar must be > 0, got {self.model_ar}")
        object.__setattr__(self, "vector", vec)


@dataclass(frozen=True)
class FusionPolicy:
    """Piecewise weight rule over |model_ar - image_ar|.

    The first threshold whose (inclusive) bound covers the difference
    supplies the weight; past the last bound the default applies.
    """

    thresholds: tuple[tuple[float, float], ...] = ((0.3, 1.3), (0.6, 1.0))
    default_weight: float = 0.9

    def __post_init__(self):
        bounds = [b for b, _ in self.thresholds]
        if any(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])):
            raise ValueError(f"threshold bounds must be strictly increasing: {bounds}")
        if any(w <= 0 for _, w in self.thresholds) or self.default_weight <= 0:
            raise ValueError("all weights must be > 0")
        object.__setattr__(
            self,
            "thresholds",
            tuple((float(b), float(w)) for b, w in self.thresholds),
        )

    def to_dict(self) -> dict:
        return {
            "thresholds": [
                {"upper_bound": b, "weight": w} for b, w in self.thresholds
            ],
            "default_weight": self.default_weight,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FusionPolicy":
        return cls(
            thresholds=tuple(
                (float(t["upper_bound"]), float(t["weight"])) for t in d["thresholds"]
            ),
            default_weight=float(d["default_weight"]),
        )


def adaptive_weight(
    model_ar: float, image_ar: float, policy: FusionPolicy | None = None
) -> float:
    """Weight for one model given the query image's aspect ratio."""
    if model_ar <= 0 or image_ar <= 0:
        raise ValueError("aspect ratios must be > 0")
    if policy is None:
        policy = FusionPolicy()
    delta = abs(model_ar - image_ar)
    for bound, weight in policy.thresholds:
        if delta <= bound:
            return weight
    return policy.default_weight


def fuse_features(
    features, image_ar: float, policy: FusionPolicy | None = None
) -> np.ndarray:
    """Weighted sum of per-model features (raw, not normalized).

    The sum is deliberately not divided by the total weight; cosine-based
    ranking absorbs the global scale.
    """
    features = list(features)
    if not features:
        raise EmptyInputError("fuse_features needs at least one feature")
    dim = features[0].vector.shape[0]
    fused = np.zeros(dim)
    for feat in features:
        if feat.vector.shape[0] != dim:
            raise ShapeMismatchError(
                f"feature dimensions disagree: {feat.vector.shape[0]} vs {dim}"
            )
        fused += adaptive_weight(feat.model_ar, image_ar, policy) * feat.vector
    return fused


def l2_normalize(vectors: np.ndarray, axis: int = -1) -> np.ndarray:
    """Scale vectors to unit L2 norm (zero vectors pass through unscaled)."""
    vectors = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=axis, keepdims=True)
    return vectors / np.maximum(norms, 1e-12)
