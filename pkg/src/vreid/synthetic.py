"""Synthetic labeled image generator.

Stands in for a real vehicle dataset at desk scale.  Every identity owns a
fixed (silhouette, body color, texture frequency) triple; every instance
renders that identity at a randomized position, scale, and background, and
gets a camera id.  All randomness derives from (seed, vehicle, instance),
never from the canvas, so the same logical instance can be rendered at any
size or aspect ratio and still depict the same object.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np

from .geometry import ImageShape
from .mixup import Image

N_CAMERAS = 4
_ID_STREAM = 11
_INSTANCE_STREAM = 13
_GOLDEN = 0.6180339887498949

KINDS = ("box", "ellipse", "diamond")


@dataclass(frozen=True)
class SyntheticSample:
    image: Image
    vehicle_id: int
    camera_id: int
    instance: int


def identity_attributes(vehicle_id: int, seed: int = 0) -> dict:
    """The fixed appearance of one identity.

    Hues step around the color wheel by the golden ratio so any number of
    identities stay well separated; saturation/value and the remaining
    attributes are drawn from the identity's own seed stream.
    """
    rng = np.random.default_rng([seed, _ID_STREAM, vehicle_id])
    hue = (vehicle_id * _GOLDEN + rng.random() * 0.05) % 1.0
    sat = 0.55 + 0.40 * rng.random()
    val = 0.55 + 0.35 * rng.random()
    return {
        "color": np.asarray(colorsys.hsv_to_rgb(hue, sat, val)),
        "kind": KINDS[int(rng.integers(0, len(KINDS)))],
        "texture_freq": 2.0 + 4.0 * rng.random(),
        "texture_angle": float(rng.random() * np.pi),
    }


def render_instance(
    vehicle_id: int, instance: int, shape: ImageShape, seed: int = 0
) -> Image:
    """Render one instance of an identity onto a canvas of the given shape."""
    attrs = identity_attributes(vehicle_id, seed)
    rng = np.random.default_rng([seed, _INSTANCE_STREAM, vehicle_id, instance])

    background = 0.05 + 0.25 * rng.random(3)
    cx = 0.5 + 0.30 * (rng.random() - 0.5)
    cy = 0.5 + 0.30 * (rng.random() - 0.5)
    half = 0.22 + 0.16 * rng.random()
    phase = rng.random() * 2.0 * np.pi
    tint = 1.0 + 0.10 * (rng.random(3) - 0.5)

    h, w = shape.height, shape.width
    v = (np.arange(h) + 0.5) / h
    u = (np.arange(w) + 0.5) / w
    uu, vv = np.meshgrid(u, v)
    du = (uu - cx) / (1.25 * half)
    dv = (vv - cy) / (0.8 * half)

    kind = attrs["kind"]
    if kind == "box":
        mask = (np.abs(du) <= 1.0) & (np.abs(dv) <= 1.0)
    elif kind == "ellipse":
        mask = du**2 + dv**2 <= 1.0
    else:  # diamond
        mask = np.abs(du) + np.abs(dv) <= 1.0

    angle = attrs["texture_angle"]
    wave = np.sin(
        2.0 * np.pi * attrs["texture_freq"] * (uu * np.cos(angle) + vv * np.sin(angle))
        + phase
    )
    texture = 0.82 + 0.18 * wave

    pixels = np.broadcast_to(background, (h, w, 3)).copy()
    body = np.clip(attrs["color"] * tint, 0.0, 1.0)
    pixels[mask] = (texture[mask, None] * body).clip(0.0, 1.0)
    return Image(pixels=pixels)


def synthesize_dataset(
    num_ids: int, instances_per_id: int, shape: ImageShape, seed: int = 0
) -> list[SyntheticSample]:
    """Render a full labeled dataset at one canvas shape.

    Camera ids cycle over the instance index so every identity appears
    under several cameras.
    """
    if num_ids < 1 or instances_per_id < 1:
        raise ValueError("num_ids and instances_per_id must be >= 1")
    samples = []
    for vid in range(num_ids):
        for inst in range(instances_per_id):
            samples.append(
                SyntheticSample(
                    image=render_instance(vid, inst, shape, seed),
                    vehicle_id=vid,
                    camera_id=inst % N_CAMERAS,
                    instance=inst,
                )
            )
    return samples
