"""Intra-image patch mixup augmentation.

Each image selected for augmentation has a random subset of its patches
shuffled; every selected patch is then blended with its shuffle partner,
``out = (1 - a) * patch + a * partner``, where the weight ``a`` is the
attention score ``1 / (1 + scale * d)`` of the pair's grid distance ``d``.
Nearby partners therefore dominate the blend and a patch paired with
itself is a no-op.  All randomness flows through explicit seeds: the plan
for image ``i`` of a batch comes from an RNG stream spawned
deterministically for that index, so serial and parallel execution agree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import GeometryError, OverlappingGridError, ShapeMismatchError
from .geometry import ImageShape, PatchGrid, PatchSpec, compute_patch_grid

DEFAULT_DISTANCE_SCALE = 16.0


@dataclass(frozen=True)
class Image:
    """Pixel image with values in [0, 1], stored as (H, W, C) float64."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3:
            raise ShapeMismatchError(f"pixels must be (H, W, C), got shape {px.shape}")
        if px.size == 0:
            raise ShapeMismatchError("image has zero pixels")
        if float(px.min()) < 0.0 or float(px.max()) > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        px = np.ascontiguousarray(px)
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self) -> ImageShape:
        return ImageShape(height=self.pixels.shape[0], width=self.pixels.shape[1])

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def aspect_ratio(self) -> float:
        return self.shape.aspect_ratio()


@dataclass(frozen=True)
class MixupConfig:
    """Knobs of the augmentation.

    ``ar_range`` bounds (inclusive) the aspect ratios eligible for mixup,
    ``image_fraction`` is the share of eligible images to augment,
    ``patch_fraction`` the share of patches shuffled within each of them.
    """

    ar_range: tuple[float, float] = (0.0, math.inf)
    image_fraction: float = 0.75
    patch_fraction: float = 0.25
    distance_scale: float = DEFAULT_DISTANCE_SCALE
    seed: int = 0

    def __post_init__(self):
        low, high = self.ar_range
        if low > high:
            raise ValueError(f"ar_range low {low} exceeds high {high}")
        for name in ("image_fraction", "patch_fraction"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        if self.distance_scale <= 0:
            raise ValueError(f"distance_scale must be > 0, got {self.distance_scale}")
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")

    def to_dict(self) -> dict:
        return {
            "ar_range": [self.ar_range[0], self.ar_range[1]],
            "image_fraction": self.image_fraction,
            "patch_fraction": self.patch_fraction,
            "distance_scale": self.distance_scale,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MixupConfig":
        return cls(
            ar_range=(float(d["ar_range"][0]), float(d["ar_range"][1])),
            image_fraction=float(d["image_fraction"]),
            patch_fraction=float(d["patch_fraction"]),
            distance_scale=float(d.get("distance_scale", DEFAULT_DISTANCE_SCALE)),
            seed=int(d.get("seed", 0)),
        )


@dataclass(frozen=True)
class MixupPlan:
    """A realized shuffle: which patches move where, and the blend weights.

    ``partners`` is a permutation of ``selected`` (fixed points allowed);
    ``weights[k]`` blends patch ``selected[k]`` with ``partners[k]`` and is
    exactly 1 for a fixed point (zero self-distance).
    """

    selected: np.ndarray
    partners: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        sel = np.asarray(self.selected, dtype=np.int64)
        par = np.asarray(self.partners, dtype=np.int64)
        wts = np.asarray(self.weights, dtype=np.float64)
        if not (sel.shape == par.shape == wts.shape) or sel.ndim != 1:
            raise ShapeMismatchError("selected/partners/weights must be equal-length 1-D")
        if sel.size and not np.array_equal(np.sort(sel), np.sort(par)):
            raise ValueError("partners must be a permutation of selected")
        if sel.size and (wts.min() <= 0.0 or wts.max() > 1.0):
            raise ValueError("weights must lie in (0, 1]")
        if sel.size:
            fixed = sel == par
            if not np.all(wts[fixed] == 1.0):
                raise ValueError("fixed points must carry weight exactly 1")
        for name, arr in (("selected", sel), ("partners", par), ("weights", wts)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def size(self) -> int:
        return int(self.selected.size)

    def to_dict(self) -> dict:
        return {
            "selected": self.selected.tolist(),
            "partners": self.partners.tolist(),
            "weights": self.weights.tolist(),
        }


def pairwise_patch_distances(grid: PatchGrid, unit: str = "grid") -> np.ndarray:
    """Euclidean distance between every pair of patch positions.

    ``unit="grid"`` measures in (row, col) grid indices, ``unit="pixel"``
    in pixel origins.  The result is symmetric with a zero diagonal.
    """
    if unit == "grid":
        coords = grid.positions[:, :2].astype(np.float64)
    elif unit == "pixel":
        coords = grid.positions[:, 2:].astype(np.float64)
    else:
        raise ValueError(f"unit must be 'grid' or 'pixel', got {unit!r}")
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt((diff**2).sum(axis=2))


def attention_scores(
    distances: np.ndarray, distance_scale: float = DEFAULT_DISTANCE_SCALE
) -> np.ndarray:
    """Map distances to blend weights ``1 / (1 + scale * d)``.

    Scores lie in (0, 1], equal 1 at zero distance, and decrease strictly
    with distance.
    """
    distances = np.asarray(distances, dtype=np.float64)
    if distances.size and distances.min() < 0:
        raise ValueError("distances must be non-negative")
    if distance_scale <= 0:
        raise ValueError(f"distance_scale must be > 0, got {distance_scale}")
    return 1.0 / (1.0 + distance_scale * distances)


def build_mixup_plan(
    grid: PatchGrid, config: MixupConfig, rng: np.random.Generator
) -> MixupPlan:
    """Draw the random part of the augmentation for one image.

    Selects ``ceil(patch_fraction * n)`` patches uniformly without
    replacement, permutes them uniformly, and records the attention score
    of each (patch, partner) pair as its blend weight.
    """
    if grid.n < 1:
        raise GeometryError("grid has no patches")
    count = math.ceil(config.patch_fraction * grid.n)
    if count == 0:
        empty = np.empty(0, dtype=np.int64)
        return MixupPlan(selected=empty, partners=empty.copy(), weights=np.empty(0))
    selected = np.sort(rng.choice(grid.n, size=count, replace=False))
    partners = rng.permutation(selected)
    scores = attention_scores(
        pairwise_patch_distances(grid, unit="grid"), config.distance_scale
    )
    weights = scores[selected, partners]
    return MixupPlan(selected=selected, partners=partners, weights=weights)


def _check_grid_matches(image: Image, grid: PatchGrid) -> None:
    expected = compute_patch_grid(image.shape, grid.spec)
    if expected.n_y != grid.n_y or expected.n_x != grid.n_x:
        raise ShapeMismatchError(
            f"grid {grid.n_y}x{grid.n_x} does not match image "
            f"{image.shape.height}x{image.shape.width} under its spec"
        )


def apply_patch_mixup(image: Image, grid: PatchGrid, plan: MixupPlan) -> Image:
    """Blend the planned patch pairs into a new image.

    Every selected patch is rewritten as a convex combination of itself and
    its partner, both read from the pristine input, so blend order cannot
    cascade.  Unselected pixels are copied through unchanged.

    Raises:
        OverlappingGridError: grid stride is smaller than the patch, so
            blended regions would collide.
    """
    if grid.spec.overlapping:
        raise OverlappingGridError(
            f"patch mixup needs non-overlapping patches; stride "
            f"({grid.spec.stride_h}, {grid.spec.stride_w}) < patch "
            f"({grid.spec.patch_h}, {grid.spec.patch_w})"
        )
    _check_grid_matches(image, grid)
    source = image.pixels
    out = source.copy()
    ph, pw = grid.spec.patch_h, grid.spec.patch_w
    for c, partner, a in zip(plan.selected, plan.partners, plan.weights):
        y, x = grid.positions[c, 2], grid.positions[c, 3]
        py, px = grid.positions[partner, 2], grid.positions[partner, 3]
        out[y : y + ph, x : x + pw] = (1.0 - a) * source[
            y : y + ph, x : x + pw
        ] + a * source[py : py + ph, px : px + pw]
    # Safety clamp; a convex combination of in-range values is already
    # in range, so this never alters well-formed blends.
    np.clip(out, 0.0, 1.0, out=out)
    return Image(pixels=out)


def augment_batch_with_plans(
    images,
    config: MixupConfig,
    seed=None,
    patch: PatchSpec | None = None,
):
    """Augment a batch and also return the realized per-image plans.

    Images whose aspect ratio falls inside ``config.ar_range`` (inclusive)
    are eligible; ``ceil(image_fraction * |eligible|)`` of them are mixed,
    the rest pass through untouched.  ``seed`` overrides ``config.seed``
    and may be an int or a sequence of ints.  Plans are drawn from RNG
    streams spawned per image index, so results do not depend on execution
    order.

    Returns:
        (augmented images, plans) where ``plans[i]`` is the MixupPlan used
        for image ``i`` or None if it was untouched.
    """
    images = list(images)
    if patch is None:
        patch = PatchSpec()
    entropy = config.seed if seed is None else seed
    root = np.random.SeedSequence(entropy)
    streams = root.spawn(len(images) + 1)
    select_rng = np.random.default_rng(streams[0])

    low, high = config.ar_range
    eligible = [i for i, im in enumerate(images) if low <= im.aspect_ratio() <= high]
    count = math.ceil(config.image_fraction * len(eligible))
    chosen = set()
    if count:
        chosen = set(select_rng.choice(eligible, size=count, replace=False).tolist())

    out, plans = [], []
    for i, im in enumerate(images):
        if i not in chosen:
            out.append(im)
            plans.append(None)
            continue
        grid = compute_patch_grid(im.shape, patch)
        plan = build_mixup_plan(grid, config, np.random.default_rng(streams[i + 1]))
        out.append(apply_patch_mixup(im, grid, plan))
        plans.append(plan)
    return out, plans


def augment_batch(
    images,
    config: MixupConfig,
    seed=None,
    patch: PatchSpec | None = None,
):
    """Apply intra-image patch mixup to the eligible share of a batch."""
    out, _ = augment_batch_with_plans(images, config, seed=seed, patch=patch)
    return out
