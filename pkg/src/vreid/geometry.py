"""Patch-grid geometry, aspect-ratio statistics, and input-size planning.

Transformer pipelines decompose an image into fixed-size patches taken at
(possibly uneven) strides.  This module computes that grid, summarizes the
aspect-ratio distribution of a dataset (including a deterministic 1-D
k-means over the ratios), and turns the dominant ratios into concrete
resize targets, one per model.

Aspect ratio is always width divided by height.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyDatasetError, GeometryError, InfeasibleClusterCountError

DEFAULT_PATCH_SIZE = 16

KMEANS_TOL = 1e-9
KMEANS_MAX_ITER = 300


@dataclass(frozen=True)
class ImageShape:
    """Height and width of an image in whole pixels."""

    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise GeometryError(
                f"image dimensions must be >= 1, got {self.height}x{self.width}"
            )

    def aspect_ratio(self) -> float:
        """Width-to-height ratio."""
        return self.width / self.height


@dataclass(frozen=True)
class PatchSpec:
    """Patch extents and strides, all in pixels.

    Strides may be smaller than the patch (overlapping windows) or larger
    (gaps between windows); both are valid grids.
    """

    patch_h: int = DEFAULT_PATCH_SIZE
    patch_w: int = DEFAULT_PATCH_SIZE
    stride_h: int = DEFAULT_PATCH_SIZE
    stride_w: int = DEFAULT_PATCH_SIZE

    def __post_init__(self):
        for name in ("patch_h", "patch_w", "stride_h", "stride_w"):
            value = getattr(self, name)
            if value < 1:
                raise GeometryError(f"{name} must be >= 1, got {value}")

    @property
    def overlapping(self) -> bool:
        """True when neighbouring patches share pixels."""
        return self.stride_h < self.patch_h or self.stride_w < self.patch_w


@dataclass(frozen=True)
class PatchGrid:
    """Realized patch decomposition of one image.

    ``positions`` is an ``(n, 4)`` int array with row-major rows of
    ``(row_index, col_index, pixel_y_origin, pixel_x_origin)``.
    """

    n_y: int
    n_x: int
    n: int
    positions: np.ndarray
    spec: PatchSpec

    def __post_init__(self):
        if self.n != self.n_y * self.n_x:
            raise GeometryError(f"n={self.n} must equal n_y*n_x={self.n_y * self.n_x}")
        pos = np.asarray(self.positions, dtype=np.int64)
        pos.flags.writeable = False
        object.__setattr__(self, "positions", pos)


def compute_patch_grid(shape: ImageShape, spec: PatchSpec) -> PatchGrid:
    """Lay out a strided patch grid over an image.

    Patch counts per axis follow the strided-window rule
    ``floor((dim - patch) / stride) + 1``, so every patch fits inside the
    image and trailing pixels that cannot host a full patch are dropped.

    Raises:
        GeometryError: patch or stride exceeds the image along some axis.
    """
    if spec.patch_h > shape.height:
        raise GeometryError(
            f"patch_h={spec.patch_h} exceeds image height {shape.height}"
        )
    if spec.patch_w > shape.width:
        raise GeometryError(f"patch_w={spec.patch_w} exceeds image width {shape.width}")
    if spec.stride_h > shape.height:
        raise GeometryError(
            f"stride_h={spec.stride_h} exceeds image height {shape.height}"
        )
    if spec.stride_w > shape.width:
        raise GeometryError(
            f"stride_w={spec.stride_w} exceeds image width {shape.width}"
        )

    n_y = (shape.height - spec.patch_h) // spec.stride_h + 1
    n_x = (shape.width - spec.patch_w) // spec.stride_w + 1

    rows = np.repeat(np.arange(n_y, dtype=np.int64), n_x)
    cols = np.tile(np.arange(n_x, dtype=np.int64), n_y)
    positions = np.stack(
        [rows, cols, rows * spec.stride_h, cols * spec.stride_w], axis=1
    )
    return PatchGrid(n_y=n_y, n_x=n_x, n=n_y * n_x, positions=positions, spec=spec)


@dataclass(frozen=True)
class AspectRatioStats:
    """Summary of the size/aspect-ratio distribution of a dataset.

    ``histogram`` holds ``(bin_lower, bin_upper, count)`` triples with
    right-open bins except the last.  ``cluster_centers`` are 1-D k-means
    centers over the aspect ratios, sorted ascending.
    """

    count: int
    mean_ar: float
    median_ar: float
    mean_size: tuple[float, float]
    median_size: tuple[float, float]
    histogram: tuple[tuple[float, float, int], ...]
    cluster_centers: tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "mean_ar": self.mean_ar,
            "median_ar": self.median_ar,
            "mean_size": list(self.mean_size),
            "median_size": list(self.median_size),
            "histogram": [list(b) for b in self.histogram],
            "cluster_centers": list(self.cluster_centers),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AspectRatioStats":
        return cls(
            count=int(d["count"]),
            mean_ar=float(d["mean_ar"]),
            median_ar=float(d["median_ar"]),
            mean_size=(float(d["mean_size"][0]), float(d["mean_size"][1])),
            median_size=(float(d["median_size"][0]), float(d["median_size"][1])),
            histogram=tuple(
                (float(lo), float(hi), int(c)) for lo, hi, c in d["histogram"]
            ),
            cluster_centers=tuple(float(c) for c in d["cluster_centers"]),
        )


@dataclass(frozen=True)
class ResizeTarget:
    """One model input geometry: fixed size plus the ratio it represents."""

    height: int
    width: int
    model_ar: float

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise GeometryError(
                f"resize target must be >= 1 px, got {self.height}x{self.width}"
            )
        if abs(self.width / self.height - self.model_ar) > 1e-2:
            raise GeometryError(
                f"target {self.height}x{self.width} is not within 0.01 of "
                f"model_ar={self.model_ar}"
            )


@dataclass(frozen=True)
class ResizePlan:
    """Resize targets, one per aspect-ratio cluster."""

    targets: tuple[ResizeTarget, ...]

    def to_dict(self) -> dict:
        return {
            "targets": [
                {"height": t.height, "width": t.width, "model_ar": t.model_ar}
                for t in self.targets
            ]
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ResizePlan":
        return cls(
            targets=tuple(
                ResizeTarget(int(t["height"]), int(t["width"]), float(t["model_ar"]))
                for t in d["targets"]
            )
        )


def round_half_away(x: float) -> int:
    """Round to the nearest integer, halves away from zero."""
    if x < 0:
        return -int(math.floor(-x + 0.5))
    return int(math.floor(x + 0.5))


def _farthest_point_seeds(distinct: np.ndarray, k: int, rng) -> np.ndarray:
    """Deterministic seeding: start from the smallest value, then repeatedly
    take the point farthest from the chosen set.  RNG is used only to break
    exact ties."""
    seeds = [distinct[0]]
    chosen = np.zeros(distinct.size, dtype=bool)
    chosen[0] = True
    for _ in range(1, k):
        dist = np.min(
            np.abs(distinct[:, None] - np.asarray(seeds)[None, :]), axis=1
        )
        dist[chosen] = -1.0
        best = dist.max()
        candidates = np.flatnonzero(dist == best)
        pick = candidates[0] if candidates.size == 1 else rng.choice(candidates)
        seeds.append(distinct[pick])
        chosen[pick] = True
    return np.asarray(seeds)


def _sse(values: np.ndarray, centers: np.ndarray, assign: np.ndarray) -> float:
    return float(np.sum((values - centers[assign]) ** 2))


def kmeans_1d(
    values,
    k: int,
    seed: int = 0,
    max_iter: int = KMEANS_MAX_ITER,
    tol: float = KMEANS_TOL,
    return_history: bool = False,
):
    """1-D k-means with deterministic farthest-point seeding.

    Runs Lloyd iterations until the largest center shift drops below
    ``tol`` (or ``max_iter``), then applies single-point improvement moves
    until no reassignment of one value lowers the within-cluster SSE, so
    the result is a genuine local optimum.

    Returns the centers sorted ascending; with ``return_history=True`` also
    returns the SSE recorded after every update (non-increasing).
    """
    values = np.sort(np.asarray(values, dtype=float))
    if values.size == 0:
        raise EmptyDatasetError("k-means over zero values")
    distinct = np.unique(values)
    if k < 1:
        raise InfeasibleClusterCountError(f"k must be >= 1, got {k}")
    if k > distinct.size:
        raise InfeasibleClusterCountError(
            f"k={k} exceeds the {distinct.size} distinct value(s)"
        )

    rng = np.random.default_rng(seed)
    centers = _farthest_point_seeds(distinct, k, rng)
    history = []

    assign = np.argmin(np.abs(values[:, None] - centers[None, :]), axis=1)
    history.append(_sse(values, centers, assign))
    for _ in range(max_iter):
        new_centers = centers.copy()
        for c in range(k):
            members = values[assign == c]
            if members.size:
                new_centers[c] = members.mean()
            else:
                # Re-seed an emptied cluster at the point farthest from its
                # old center (keeps k clusters alive, deterministic).
                new_centers[c] = values[np.argmax(np.abs(values - centers[c]))]
        shift = float(np.max(np.abs(new_centers - centers)))
        centers = new_centers
        assign = np.argmin(np.abs(values[:, None] - centers[None, :]), axis=1)
        history.append(_sse(values, centers, assign))
        if shift < tol:
            break

    # Single-point polish: Lloyd fixed points are not always single-move
    # optimal (cluster sizes weight the SSE change), so sweep for improving
    # moves explicitly.
    for _ in range(100):
        sizes = np.bincount(assign, minlength=k)
        for c in range(k):
            if sizes[c]:
                centers[c] = values[assign == c].mean()
        best_gain, best_move = -1e-15, None
        for i in range(values.size):
            a = assign[i]
            if sizes[a] < 2:
                continue
            da = sizes[a] / (sizes[a] - 1) * (values[i] - centers[a]) ** 2
            for b in range(k):
                if b == a:
                    continue
                db = sizes[b] / (sizes[b] + 1) * (values[i] - centers[b]) ** 2
                gain = db - da
                if gain < best_gain:
                    best_gain, best_move = gain, (i, b)
        if best_move is None:
            break
        i, b = best_move
        assign[i] = b
        sizes = np.bincount(assign, minlength=k)
        for c in range(k):
            centers[c] = values[assign == c].mean()
        history.append(_sse(values, centers, assign))

    centers = np.sort(centers)
    if return_history:
        return centers, np.asarray(history)
    return centers


def aspect_ratio_stats(
    shapes, k: int, bins: int = 10, seed: int = 0
) -> AspectRatioStats:
    """Summarize sizes and aspect ratios of a dataset.

    Values are sorted before reduction so the result is exactly
    permutation-invariant.  Histogram bins are equal-width over
    ``[min_ar, max_ar]``, right-open except the last.

    Raises:
        EmptyDatasetError: no shapes given.
        InfeasibleClusterCountError: k exceeds the distinct ratio count.
    """
    shapes = list(shapes)
    if not shapes:
        raise EmptyDatasetError("aspect_ratio_stats over an empty dataset")
    ars = np.sort(np.asarray([s.aspect_ratio() for s in shapes], dtype=float))
    heights = np.sort(np.asarray([s.height for s in shapes], dtype=float))
    widths = np.sort(np.asarray([s.width for s in shapes], dtype=float))

    counts, edges = np.histogram(ars, bins=bins)
    histogram = tuple(
        (float(edges[i]), float(edges[i + 1]), int(counts[i]))
        for i in range(len(counts))
    )
    centers = kmeans_1d(ars, k, seed=seed)
    return AspectRatioStats(
        count=len(shapes),
        mean_ar=float(ars.mean()),
        median_ar=float(np.median(ars)),
        mean_size=(float(heights.mean()), float(widths.mean())),
        median_size=(float(np.median(heights)), float(np.median(widths))),
        histogram=histogram,
        cluster_centers=tuple(float(c) for c in centers),
    )


def plan_input_sizes(stats: AspectRatioStats, base_height: int) -> ResizePlan:
    """Derive one fixed input size per aspect-ratio cluster.

    Every target keeps ``base_height`` and rounds the width to
    ``base_height * center`` (half away from zero).
    """
    if base_height < 1:
        raise GeometryError(f"base_height must be >= 1, got {base_height}")
    targets = tuple(
        ResizeTarget(
            height=base_height,
            width=round_half_away(base_height * center),
            model_ar=center,
        )
        for center in stats.cluster_centers
    )
    return ResizePlan(targets=targets)
