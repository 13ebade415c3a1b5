"""Persistence formats and image ingestion.

Three formats are normative for the pipeline:

* Dataset manifest — JSON Lines, UTF-8, one entry per line with keys
  ``path, vehicle_id, camera_id, width, height``; paths must be unique.
* Feature store — little-endian binary carrying tagged feature vectors:
  header ``magic "RFV1" | u32 version=1 | u32 dim | u64 count |
  f32 model_ar`` (24 bytes) followed by ``count`` records of
  ``u64 vehicle_id | u32 camera_id | dim x f32``.  File size is exactly
  ``24 + count * (12 + 4 * dim)``.
* Run config — JSON object bundling every sub-config; round-trips
  losslessly.

Images decode to [0, 1] float RGB; grayscale inputs replicate to three
channels.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL.PngImagePlugin import PngInfo

from .errors import ManifestError, ShapeMismatchError, StoreFormatError
from .evaluation import EvalProtocol, FeatureSet
from .fusion import FusionPolicy
from .geometry import ImageShape, ResizePlan
from .mixup import Image, MixupConfig
from .vit import BlockParams, ModelParams, ToyViTConfig

STORE_MAGIC = b"RFV1"
STORE_VERSION = 1
STORE_HEADER = struct.Struct("<4sIIQf")  # magic, version, dim, count, model_ar


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    vehicle_id: int
    camera_id: int
    width: int
    height: int

    def shape(self) -> ImageShape:
        return ImageShape(height=self.height, width=self.width)

    def aspect_ratio(self) -> float:
        return self.width / self.height

    def to_dict(self) -> dict:
        return {
            "path": self.path,
            "vehicle_id": self.vehicle_id,
            "camera_id": self.camera_id,
            "width": self.width,
            "height": self.height,
        }


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def shapes(self) -> list[ImageShape]:
        return [e.shape() for e in self.entries]


def load_manifest(path) -> DatasetManifest:
    """Parse and validate a JSON Lines manifest.

    Raises ManifestError naming the first offending line (1-based) for
    malformed JSON, missing keys, non-positive dimensions, or duplicate
    paths.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    entries = []
    seen = set()
    required = ("path", "vehicle_id", "camera_id", "width", "height")
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            for key in required:
                if key not in obj:
                    raise ManifestError(f"line {lineno}: missing key {key!r}")
            if int(obj["width"]) < 1 or int(obj["height"]) < 1:
                raise ManifestError(
                    f"line {lineno}: non-positive dimensions "
                    f"{obj['width']}x{obj['height']}"
                )
            if obj["path"] in seen:
                raise ManifestError(f"line {lineno}: duplicate path {obj['path']!r}")
            seen.add(obj["path"])
            entries.append(
                ManifestEntry(
                    path=str(obj["path"]),
                    vehicle_id=int(obj["vehicle_id"]),
                    camera_id=int(obj["camera_id"]),
                    width=int(obj["width"]),
                    height=int(obj["height"]),
                )
            )
    return DatasetManifest(entries=tuple(entries))


def write_manifest(path, entries) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(json.dumps(entry.to_dict()) + "\n")


# ---------------------------------------------------------------------------
# Feature store
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureStore:
    """In-memory image of one feature-store file."""

    model_ar: float
    vehicle_ids: np.ndarray  # (N,) uint64
    camera_ids: np.ndarray  # (N,) uint32
    features: np.ndarray  # (N, dim) float32

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float32)
        vids = np.asarray(self.vehicle_ids, dtype=np.uint64)
        cams = np.asarray(self.camera_ids, dtype=np.uint32)
        if feats.ndim != 2 or feats.shape[1] < 1:
            raise StoreFormatError(f"features must be (N, dim>=1), got {feats.shape}")
        if not (feats.shape[0] == vids.shape[0] == cams.shape[0]):
            raise StoreFormatError("vehicle/camera/feature row counts disagree")
        if not np.all(np.isfinite(feats)):
            raise StoreFormatError("features must be finite")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "vehicle_ids", vids)
        object.__setattr__(self, "camera_ids", cams)
        # the header stores f32; quantize now so write/read is the identity
        object.__setattr__(self, "model_ar", float(np.float32(self.model_ar)))

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def count(self) -> int:
        return self.features.shape[0]

    def to_feature_set(self) -> FeatureSet:
        return FeatureSet(
            features=self.features.astype(np.float64),
            vehicle_ids=self.vehicle_ids.astype(np.int64),
            camera_ids=self.camera_ids.astype(np.int64),
        )


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype(
        [("vehicle_id", "<u8"), ("camera_id", "<u4"), ("feature", "<f4", (dim,))]
    )


def write_feature_store(path, store: FeatureStore) -> None:
    """Serialize a store; re-reading yields byte-identical content."""
    records = np.empty(store.count, dtype=_record_dtype(store.dim))
    records["vehicle_id"] = store.vehicle_ids
    records["camera_id"] = store.camera_ids
    records["feature"] = store.features
    header = STORE_HEADER.pack(
        STORE_MAGIC, STORE_VERSION, store.dim, store.count, store.model_ar
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(records.tobytes())


def read_feature_store(path) -> FeatureStore:
    """Parse a feature-store file, rejecting malformed headers or sizes."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < STORE_HEADER.size:
        raise StoreFormatError(f"{path}: shorter than the 24-byte header")
    magic, version, dim, count, model_ar = STORE_HEADER.unpack(
        raw[: STORE_HEADER.size]
    )
    if magic != STORE_MAGIC:
        raise StoreFormatError(f"{path}: bad magic {magic!r}")
    if version != STORE_VERSION:
        raise StoreFormatError(f"{path}: unsupported version {version}")
    if dim == 0:
        raise StoreFormatError(f"{path}: dim must be >= 1")
    expected = STORE_HEADER.size + count * (12 + 4 * dim)
    if len(raw) != expected:
        raise StoreFormatError(
            f"{path}: size {len(raw)} does not match formula {expected} "
            f"(count={count}, dim={dim})"
        )
    records = np.frombuffer(raw[STORE_HEADER.size :], dtype=_record_dtype(dim))
    return FeatureStore(
        model_ar=model_ar,
        vehicle_ids=records["vehicle_id"].copy(),
        camera_ids=records["camera_id"].copy(),
        features=records["feature"].copy().reshape(count, dim),
    )


# ---------------------------------------------------------------------------
# Run config
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """Bundle of every knob a pipeline run depends on."""

    seed: int = 0
    mixup: MixupConfig = MixupConfig()
    policy: FusionPolicy = FusionPolicy()
    protocol: EvalProtocol = EvalProtocol()
    toy_vit: ToyViTConfig = ToyViTConfig()
    resize: ResizePlan = ResizePlan(targets=())

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "mixup": self.mixup.to_dict(),
            "policy": self.policy.to_dict(),
            "protocol": self.protocol.to_dict(),
            "toy_vit": self.toy_vit.to_dict(),
            "resize": self.resize.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(
            seed=int(d["seed"]),
            mixup=MixupConfig.from_dict(d["mixup"]),
            policy=FusionPolicy.from_dict(d["policy"]),
            protocol=EvalProtocol.from_dict(d["protocol"]),
            toy_vit=ToyViTConfig.from_dict(d["toy_vit"]),
            resize=ResizePlan.from_dict(d["resize"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))


def config_hash(config_dict: dict) -> str:
    """Stable hash of a JSON-serializable config."""
    canon = json.dumps(config_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class TrainToySpec:
    """Everything one ``train-toy`` run needs, JSON-serializable."""

    seed: int = 0
    ids: int = 8
    instances_per_id: int = 8
    height: int = 64
    width: int = 64
    model_ar: float = 1.0
    steps: int = 300
    lr: float = 0.1
    momentum: float = 0.1
    weight_decay: float = 1e-4
    batch_p: int = 4
    batch_k: int = 4
    encoder: ToyViTConfig = ToyViTConfig()
    mixup: MixupConfig | None = None

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "ids": self.ids,
            "instances_per_id": self.instances_per_id,
            "height": self.height,
            "width": self.width,
            "model_ar": self.model_ar,
            "steps": self.steps,
            "lr": self.lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "batch_p": self.batch_p,
            "batch_k": self.batch_k,
            "encoder": self.encoder.to_dict(),
            "mixup": None if self.mixup is None else self.mixup.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainToySpec":
        return cls(
            seed=int(d.get("seed", 0)),
            ids=int(d.get("ids", 8)),
            instances_per_id=int(d.get("instances_per_id", 8)),
            height=int(d.get("height", 64)),
            width=int(d.get("width", 64)),
            model_ar=float(d.get("model_ar", 1.0)),
            steps=int(d.get("steps", 300)),
            lr=float(d.get("lr", 0.1)),
            momentum=float(d.get("momentum", 0.1)),
            weight_decay=float(d.get("weight_decay", 1e-4)),
            batch_p=int(d.get("batch_p", 4)),
            batch_k=int(d.get("batch_k", 4)),
            encoder=ToyViTConfig.from_dict(d.get("encoder", {})),
            mixup=(
                None if d.get("mixup") is None else MixupConfig.from_dict(d["mixup"])
            ),
        )


# ---------------------------------------------------------------------------
# Model parameters (npz container)
# ---------------------------------------------------------------------------


def save_params(path, params: ModelParams, meta: dict) -> None:
    """Persist model parameters plus a JSON metadata blob to one npz file."""
    arrays = {name: arr for name, arr in params.named_arrays()}
    payload = dict(meta, heads=params.heads)
    arrays["__meta__"] = np.frombuffer(
        json.dumps(payload, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    np.savez(path, **arrays)


def load_params(path) -> tuple[ModelParams, dict]:
    """Inverse of :func:`save_params`."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"].tobytes()).decode("utf-8"))
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    n_blocks = 1 + max(
        int(k.split(".")[0][len("block") :]) for k in arrays if k.startswith("block")
    )
    blocks = [
        BlockParams(
            **{
                k.split(".")[1]: arrays[k]
                for k in arrays
                if k.startswith(f"block{i}.")
            }
        )
        for i in range(n_blocks)
    ]
    params = ModelParams(
        patch_projection=arrays["patch_projection"],
        patch_bias=arrays["patch_bias"],
        class_token=arrays["class_token"],
        positional=arrays["positional"],
        blocks=blocks,
        final_gamma=arrays["final_gamma"],
        final_beta=arrays["final_beta"],
        head_weight=arrays["head_weight"],
        head_bias=arrays["head_bias"],
        heads=int(meta["heads"]),
    )
    return params, meta


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------


def read_image(path) -> Image:
    """Decode an image file to [0, 1] RGB floats."""
    with PILImage.open(path) as img:
        rgb = img.convert("RGB")
        arr = np.asarray(rgb, dtype=np.float64) / 255.0
    return Image(pixels=arr)


def write_image_png(path, image: Image, metadata: dict | None = None) -> None:
    """Quantize to 8-bit and write a PNG; metadata lands in tEXt chunks."""
    arr = np.round(image.pixels * 255.0).astype(np.uint8)
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    pil = PILImage.fromarray(arr, mode="RGB")
    info = None
    if metadata:
        info = PngInfo()
        for key, value in metadata.items():
            info.add_text(str(key), str(value))
    pil.save(path, format="PNG", pnginfo=info)


def resize_bilinear(image: Image, height: int, width: int) -> Image:
    """Deterministic bilinear resize with half-pixel-centered sampling."""
    if height < 1 or width < 1:
        raise ShapeMismatchError(f"target size must be >= 1, got {height}x{width}")
    src = image.pixels
    h, w = src.shape[:2]
    ys = np.clip((np.arange(height) + 0.5) * h / height - 0.5, 0, h - 1)
    xs = np.clip((np.arange(width) + 0.5) * w / width - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = src[y0][:, x0] * (1 - wx) + src[y0][:, x1] * wx
    bottom = src[y1][:, x0] * (1 - wx) + src[y1][:, x1] * wx
    out = top * (1 - wy) + bottom * wy
    return Image(pixels=np.clip(out, 0.0, 1.0))
