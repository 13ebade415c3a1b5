"""Desk-scale vision-transformer encoder with hand-written backprop.

A small pre-norm transformer runs the full pipeline end to end: strided
patchify, linear patch projection, class token, learned positional table,
a stack of attention/MLP blocks, and a final layer norm whose class-token
row is the image feature.  Training optimizes identity cross-entropy plus
the batch-hard triplet loss with plain SGD; gradients are written out
analytically (no autodiff), which keeps runs bitwise reproducible and lets
finite differences verify every layer.

Everything is float64 numpy.  Shapes in comments use B = batch, T = tokens
(patches + class token), d = embed dim, h = heads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf, ndtri

from .errors import DegenerateDatasetError, ShapeMismatchError
from .geometry import ImageShape, PatchGrid, PatchSpec, compute_patch_grid
from .losses import (
    EmbeddingBatch,
    LogitBatch,
    id_loss,
    id_loss_gradient,
    overall_loss,
    triplet_loss,
    triplet_loss_gradient,
)
from .mixup import Image, MixupConfig, augment_batch_with_plans

LN_EPS = 1e-6
INIT_STD = 0.02


@dataclass(frozen=True)
class ToyViTConfig:
    """Encoder hyper-parameters, sized for desk-scale experiments."""

    patch: PatchSpec = PatchSpec()
    embed_dim: int = 64
    layers: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError(f"layers must be >= 1, got {self.layers}")
        if self.embed_dim % self.heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} must be divisible by heads {self.heads}"
            )

    def to_dict(self) -> dict:
        return {
            "patch": {
                "patch_h": self.patch.patch_h,
                "patch_w": self.patch.patch_w,
                "stride_h": self.patch.stride_h,
                "stride_w": self.patch.stride_w,
            },
            "embed_dim": self.embed_dim,
            "layers": self.layers,
            "heads": self.heads,
            "mlp_ratio": self.mlp_ratio,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToyViTConfig":
        p = d.get("patch", {})
        return cls(
            patch=PatchSpec(
                patch_h=int(p.get("patch_h", 16)),
                patch_w=int(p.get("patch_w", 16)),
                stride_h=int(p.get("stride_h", 16)),
                stride_w=int(p.get("stride_w", 16)),
            ),
            embed_dim=int(d.get("embed_dim", 64)),
            layers=int(d.get("layers", 2)),
            heads=int(d.get("heads", 4)),
            mlp_ratio=float(d.get("mlp_ratio", 4.0)),
            seed=int(d.get("seed", 0)),
        )


@dataclass
class BlockParams:
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    qkv_weight: np.ndarray  # (d, 3d)
    qkv_bias: np.ndarray
    out_weight: np.ndarray  # (d, d)
    out_bias: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    fc1_weight: np.ndarray  # (d, hidden)
    fc1_bias: np.ndarray
    fc2_weight: np.ndarray  # (hidden, d)
    fc2_bias: np.ndarray


@dataclass
class ModelParams:
    """All trainable state of one encoder plus its identity classifier."""

    patch_projection: np.ndarray  # (patch_pixels, d)
    patch_bias: np.ndarray
    class_token: np.ndarray  # (d,)
    positional: np.ndarray  # (n + 1, d)
    blocks: list[BlockParams]
    final_gamma: np.ndarray
    final_beta: np.ndarray
    head_weight: np.ndarray  # (d, num_classes)
    head_bias: np.ndarray
    heads: int

    def named_arrays(self):
        """(name, array) pairs in a fixed order."""
        yield "patch_projection", self.patch_projection
        yield "patch_bias", self.patch_bias
        yield "class_token", self.class_token
        yield "positional", self.positional
        for i, blk in enumerate(self.blocks):
            for fname in (
                "ln1_gamma",
                "ln1_beta",
                "qkv_weight",
                "qkv_bias",
                "out_weight",
                "out_bias",
                "ln2_gamma",
                "ln2_beta",
                "fc1_weight",
                "fc1_bias",
                "fc2_weight",
                "fc2_bias",
            ):
                yield f"block{i}.{fname}", getattr(blk, fname)
        yield "final_gamma", self.final_gamma
        yield "final_beta", self.final_beta
        yield "head_weight", self.head_weight
        yield "head_bias", self.head_bias

    def n_parameters(self) -> int:
        return sum(arr.size for _, arr in self.named_arrays())

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(arr)) for _, arr in self.named_arrays())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([arr.ravel() for _, arr in self.named_arrays()])

    def from_vector(self, vec: np.ndarray) -> "ModelParams":
        """New ModelParams with the same structure but values from ``vec``."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_parameters():
            raise ShapeMismatchError(
                f"vector has {vec.size} entries, model needs {self.n_parameters()}"
            )
        out = _empty_like(self)
        offset = 0
        for (name, arr), (_, dst) in zip(self.named_arrays(), out.named_arrays()):
            dst[...] = vec[offset : offset + arr.size].reshape(arr.shape)
            offset += arr.size
        return out


def _empty_like(params: ModelParams) -> ModelParams:
    blocks = [
        BlockParams(**{k: np.empty_like(v) for k, v in vars(blk).items()})
        for blk in params.blocks
    ]
    return ModelParams(
        patch_projection=np.empty_like(params.patch_projection),
        patch_bias=np.empty_like(params.patch_bias),
        class_token=np.empty_like(params.class_token),
        positional=np.empty_like(params.positional),
        blocks=blocks,
        final_gamma=np.empty_like(params.final_gamma),
        final_beta=np.empty_like(params.final_beta),
        head_weight=np.empty_like(params.head_weight),
        head_bias=np.empty_like(params.head_bias),
        heads=params.heads,
    )


def _truncated_normal(rng: np.random.Generator, shape, std=INIT_STD) -> np.ndarray:
    """Normal(0, std) truncated at +/- 2 std, via the inverse CDF."""
    lo, hi = 0.5 * (1.0 + erf(-2.0 / np.sqrt(2.0))), 0.5 * (1.0 + erf(2.0 / np.sqrt(2.0)))
    u = rng.uniform(lo, hi, size=shape)
    return ndtri(u) * std


def init_params(
    config: ToyViTConfig, grid: PatchGrid, num_classes: int, channels: int = 3
) -> ModelParams:
    """Fresh truncated-normal parameters for one patch geometry.

    Every array draws from its own seed stream, so models built for
    different grids share identical initial weights wherever shapes agree
    (only the positional table depends on the geometry).  Models destined
    for fusion therefore start from one common "backbone", which keeps
    their learned feature spaces roughly aligned.
    """
    d = config.embed_dim
    hidden = int(round(config.mlp_ratio * d))
    patch_pixels = config.patch.patch_h * config.patch.patch_w * channels

    def tn(stream, *shape):
        rng = np.random.default_rng([config.seed, 101, stream])
        return _truncated_normal(rng, shape)

    blocks = [
        BlockParams(
            ln1_gamma=np.ones(d),
            ln1_beta=np.zeros(d),
            qkv_weight=tn(10 + 4 * i, d, 3 * d),
            qkv_bias=np.zeros(3 * d),
            out_weight=tn(11 + 4 * i, d, d),
            out_bias=np.zeros(d),
            ln2_gamma=np.ones(d),
            ln2_beta=np.zeros(d),
            fc1_weight=tn(12 + 4 * i, d, hidden),
            fc1_bias=np.zeros(hidden),
            fc2_weight=tn(13 + 4 * i, hidden, d),
            fc2_bias=np.zeros(d),
        )
        for i in range(config.layers)
    ]
    return ModelParams(
        patch_projection=tn(0, patch_pixels, d),
        patch_bias=np.zeros(d),
        class_token=tn(1, d),
        positional=tn(2, grid.n + 1, d),
        blocks=blocks,
        final_gamma=np.ones(d),
        final_beta=np.zeros(d),
        head_weight=tn(3, d, num_classes),
        head_bias=np.zeros(num_classes),
        heads=config.heads,
    )


def extract_patches(image: Image, spec: PatchSpec) -> np.ndarray:
    """Flatten every grid patch into a row, row-major and channel-last."""
    grid = compute_patch_grid(image.shape, spec)
    windows = np.lib.stride_tricks.sliding_window_view(
        image.pixels, (spec.patch_h, spec.patch_w), axis=(0, 1)
    )  # (H - ph + 1, W - pw + 1, C, ph, pw)
    windows = windows[:: spec.stride_h, :: spec.stride_w]
    windows = windows.transpose(0, 1, 3, 4, 2)  # (n_y, n_x, ph, pw, C)
    return np.ascontiguousarray(windows).reshape(grid.n, -1).astype(np.float64)


# ---------------------------------------------------------------------------
# Layer forward/backward primitives.  Caches are plain tuples.
# ---------------------------------------------------------------------------


def _layernorm_forward(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return gamma * xhat + beta, (xhat, inv, gamma)


def _layernorm_backward(dy, cache):
    xhat, inv, gamma = cache
    lead = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=lead)
    dbeta = dy.sum(axis=lead)
    dxhat = dy * gamma
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def _linear_forward(x, w, b):
    return x @ w + b, (x, w)


def _linear_backward(dy, cache):
    x, w = cache
    dx = dy @ w.T
    dw = x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dx, dw, db


def _gelu_forward(x):
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    return x * cdf, (x, cdf)


def _gelu_backward(dy, cache):
    x, cdf = cache
    pdf = np.exp(-0.5 * x**2) / np.sqrt(2.0 * np.pi)
    return dy * (cdf + x * pdf)


def _attention_forward(x, blk: BlockParams, heads: int):
    b, t, d = x.shape
    hd = d // heads
    qkv, qkv_cache = _linear_forward(x, blk.qkv_weight, blk.qkv_bias)  # (B, T, 3d)
    q, k, v = np.split(qkv, 3, axis=-1)
    # (B, h, T, hd)
    q = q.reshape(b, t, heads, hd).transpose(0, 2, 1, 3)
    k = k.reshape(b, t, heads, hd).transpose(0, 2, 1, 3)
    v = v.reshape(b, t, heads, hd).transpose(0, 2, 1, 3)
    scale = 1.0 / np.sqrt(hd)
    scores = q @ k.transpose(0, 1, 3, 2) * scale  # (B, h, T, T)
    scores -= scores.max(axis=-1, keepdims=True)
    exps = np.exp(scores)
    attn = exps / exps.sum(axis=-1, keepdims=True)
    ctx = attn @ v  # (B, h, T, hd)
    merged = ctx.transpose(0, 2, 1, 3).reshape(b, t, d)
    out, out_cache = _linear_forward(merged, blk.out_weight, blk.out_bias)
    return out, (qkv_cache, q, k, v, attn, merged, out_cache, scale, heads)


def _attention_backward(dout, cache):
    qkv_cache, q, k, v, attn, merged, out_cache, scale, heads = cache
    b, t, d = merged.shape
    hd = d // heads
    dmerged, dw_out, db_out = _linear_backward(dout, out_cache)
    dctx = dmerged.reshape(b, t, heads, hd).transpose(0, 2, 1, 3)
    dattn = dctx @ v.transpose(0, 1, 3, 2)  # (B, h, T, T)
    dv = attn.transpose(0, 1, 3, 2) @ dctx
    dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dscores *= scale
    dq = dscores @ k
    dk = dscores.transpose(0, 1, 3, 2) @ q
    dqkv = np.concatenate(
        [
            dq.transpose(0, 2, 1, 3).reshape(b, t, d),
            dk.transpose(0, 2, 1, 3).reshape(b, t, d),
            dv.transpose(0, 2, 1, 3).reshape(b, t, d),
        ],
        axis=-1,
    )
    dx, dw_qkv, db_qkv = _linear_backward(dqkv, qkv_cache)
    return dx, {
        "qkv_weight": dw_qkv,
        "qkv_bias": db_qkv,
        "out_weight": dw_out,
        "out_bias": db_out,
    }


def _block_forward(x, blk: BlockParams, heads: int):
    a_in, ln1_cache = _layernorm_forward(x, blk.ln1_gamma, blk.ln1_beta)
    attn_out, attn_cache = _attention_forward(a_in, blk, heads)
    r = x + attn_out
    m_in, ln2_cache = _layernorm_forward(r, blk.ln2_gamma, blk.ln2_beta)
    h1, fc1_cache = _linear_forward(m_in, blk.fc1_weight, blk.fc1_bias)
    g, gelu_cache = _gelu_forward(h1)
    mlp_out, fc2_cache = _linear_forward(g, blk.fc2_weight, blk.fc2_bias)
    y = r + mlp_out
    return y, (ln1_cache, attn_cache, ln2_cache, fc1_cache, gelu_cache, fc2_cache)


def _block_backward(dy, cache):
    ln1_cache, attn_cache, ln2_cache, fc1_cache, gelu_cache, fc2_cache = cache
    dg, dw_fc2, db_fc2 = _linear_backward(dy, fc2_cache)
    dh1 = _gelu_backward(dg, gelu_cache)
    dm_in, dw_fc1, db_fc1 = _linear_backward(dh1, fc1_cache)
    dln2, dg2, db2 = _layernorm_backward(dm_in, ln2_cache)
    dr = dy + dln2
    da_in, attn_grads = _attention_backward(dr, attn_cache)
    dln1, dg1, db1 = _layernorm_backward(da_in, ln1_cache)
    dx = dr + dln1
    grads = {
        "ln1_gamma": dg1,
        "ln1_beta": db1,
        "ln2_gamma": dg2,
        "ln2_beta": db2,
        "fc1_weight": dw_fc1,
        "fc1_bias": db_fc1,
        "fc2_weight": dw_fc2,
        "fc2_bias": db_fc2,
    }
    grads.update(attn_grads)
    return dx, grads


def _encoder_forward(params: ModelParams, patch_rows: np.ndarray):
    """patch_rows: (B, n, patch_pixels) -> features (B, d) plus caches.

    Pixel rows are centered around mid-gray before projection; this is
    representationally a bias shift but conditions SGD far better than
    raw [0, 1] inputs.
    """
    b, n, _ = patch_rows.shape
    if params.positional.shape[0] != n + 1:
        raise ShapeMismatchError(
            f"positional table holds {params.positional.shape[0]} rows, "
            f"but the grid yields {n} patches (+1 class token)"
        )
    tok, proj_cache = _linear_forward(
        patch_rows - 0.5, params.patch_projection, params.patch_bias
    )
    cls = np.broadcast_to(params.class_token, (b, 1, tok.shape[-1]))
    x = np.concatenate([cls, tok], axis=1) + params.positional[None]
    block_caches = []
    for blk in params.blocks:
        x, cache = _block_forward(x, blk, params.heads)
        block_caches.append(cache)
    out, final_cache = _layernorm_forward(x, params.final_gamma, params.final_beta)
    features = out[:, 0]
    return features, (proj_cache, block_caches, final_cache, b, n)


def _encoder_backward(params: ModelParams, dfeatures: np.ndarray, cache) -> dict:
    proj_cache, block_caches, final_cache, b, n = cache
    d = dfeatures.shape[-1]
    dout = np.zeros((b, n + 1, d))
    dout[:, 0] = dfeatures
    dx, dgf, dbf = _layernorm_backward(dout, final_cache)
    grads = {"final_gamma": dgf, "final_beta": dbf}
    for i in reversed(range(len(params.blocks))):
        dx, blk_grads = _block_backward(dx, block_caches[i])
        for key, val in blk_grads.items():
            grads[f"block{i}.{key}"] = val
    grads["positional"] = dx.sum(axis=0)
    grads["class_token"] = dx[:, 0].sum(axis=0)
    dtok = dx[:, 1:]
    _, dw_proj, db_proj = _linear_backward(dtok, proj_cache)
    grads["patch_projection"] = dw_proj
    grads["patch_bias"] = db_proj
    return grads


def forward(params: ModelParams, image: Image, spec: PatchSpec) -> np.ndarray:
    """Class-token feature of one image."""
    rows = extract_patches(image, spec)[None]
    features, _ = _encoder_forward(params, rows)
    return features[0]


def forward_batch(params: ModelParams, images, spec: PatchSpec) -> np.ndarray:
    """Class-token features of a batch that shares one geometry."""
    rows = np.stack([extract_patches(im, spec) for im in images])
    features, _ = _encoder_forward(params, rows)
    return features


def batch_loss_and_gradients(
    params: ModelParams,
    patch_rows: np.ndarray,
    class_indices: np.ndarray,
    P: int,
    K: int,
):
    """Overall loss (id + triplet) and gradients for every parameter.

    ``patch_rows`` is the pre-extracted (B, n, patch_pixels) batch;
    ``class_indices`` maps each row to its identity class.  Returns
    ``(total, id term, triplet term, grads dict keyed like named_arrays)``.
    """
    features, cache = _encoder_forward(params, patch_rows)
    logits = features @ params.head_weight + params.head_bias
    logit_batch = LogitBatch(logits=logits, labels=class_indices)
    emb_batch = EmbeddingBatch(features=features, labels=class_indices, P=P, K=K)

    id_value = id_loss(logit_batch)
    tri_value = triplet_loss(emb_batch)
    total = overall_loss(id_value, tri_value)

    dlogits = id_loss_gradient(logit_batch)
    dfeatures = dlogits @ params.head_weight.T + triplet_loss_gradient(emb_batch)
    grads = _encoder_backward(params, dfeatures, cache)
    grads["head_weight"] = features.T @ dlogits
    grads["head_bias"] = dlogits.sum(axis=0)
    return total, id_value, tri_value, grads


@dataclass(frozen=True)
class SGDConfig:
    """Plain SGD with momentum and decoupled-from-nothing weight decay."""

    lr: float
    momentum: float = 0.1
    weight_decay: float = 1e-4


@dataclass
class TrainResult:
    losses: np.ndarray
    id_losses: np.ndarray
    triplet_losses: np.ndarray
    params: ModelParams
    class_ids: np.ndarray  # vehicle id per class index


def _sample_pk_batch(by_id: dict, p: int, k: int, rng: np.random.Generator):
    ids = sorted(by_id)
    chosen_ids = rng.choice(len(ids), size=p, replace=False)
    picks = []
    for idx in chosen_ids:
        members = by_id[ids[idx]]
        picks.extend(
            members[j] for j in rng.choice(len(members), size=k, replace=False)
        )
    return picks


def train_steps(
    config: ToyViTConfig,
    dataset,
    steps: int,
    optimizer: SGDConfig,
    batch_p: int = 4,
    batch_k: int = 4,
    mixup: MixupConfig | None = None,
) -> TrainResult:
    """Train from scratch on labeled images sharing one shape.

    Each step draws a P x K batch, optionally applies patch mixup, and
    updates all parameters with analytic gradients.  Identical
    (config, dataset, steps, optimizer) always produce identical traces.

    Raises:
        DegenerateDatasetError: fewer than ``batch_p`` identities with
            ``batch_k`` instances each.
    """
    samples = list(dataset)
    if not samples:
        raise DegenerateDatasetError("empty dataset")
    shape0 = samples[0].image.shape
    if any(s.image.shape != shape0 for s in samples):
        raise ShapeMismatchError("all training images must share one shape")

    by_id: dict = {}
    for i, s in enumerate(samples):
        by_id.setdefault(s.vehicle_id, []).append(i)
    eligible = {vid: idxs for vid, idxs in by_id.items() if len(idxs) >= batch_k}
    if len(eligible) < batch_p:
        raise DegenerateDatasetError(
            f"need {batch_p} identities with >= {batch_k} instances, "
            f"have {len(eligible)}"
        )

    class_ids = np.asarray(sorted(by_id))
    class_index = {vid: i for i, vid in enumerate(class_ids)}
    grid = compute_patch_grid(shape0, config.patch)
    channels = samples[0].image.channels
    params = init_params(config, grid, num_classes=len(class_ids), channels=channels)

    base_rows = np.stack([extract_patches(s.image, config.patch) for s in samples])
    velocity = {name: np.zeros_like(arr) for name, arr in params.named_arrays()}
    sampler = np.random.default_rng([config.seed, 1])
    losses = np.zeros(steps)
    id_losses = np.zeros(steps)
    tri_losses = np.zeros(steps)

    for step in range(steps):
        picks = _sample_pk_batch(eligible, batch_p, batch_k, sampler)
        labels = np.asarray([class_index[samples[i].vehicle_id] for i in picks])
        rows = base_rows[picks]
        if mixup is not None:
            images = [samples[i].image for i in picks]
            augmented, plans = augment_batch_with_plans(
                images, mixup, seed=[mixup.seed, step]
            )
            rows = rows.copy()
            for j, (im, plan) in enumerate(zip(augmented, plans)):
                if plan is not None:
                    rows[j] = extract_patches(im, config.patch)
        total, id_value, tri_value, grads = batch_loss_and_gradients(
            params, rows, labels, P=batch_p, K=batch_k
        )
        losses[step] = total
        id_losses[step] = id_value
        tri_losses[step] = tri_value
        for name, arr in params.named_arrays():
            g = grads[name] + optimizer.weight_decay * arr
            velocity[name] = optimizer.momentum * velocity[name] + g
            arr -= optimizer.lr * velocity[name]

    if not params.all_finite():
        raise FloatingPointError("training diverged to non-finite parameters")
    return TrainResult(
        losses=losses,
        id_losses=id_losses,
        triplet_losses=tri_losses,
        params=params,
        class_ids=class_ids,
    )
