"""Command-line pipeline.

Subcommands chain into a reproducible experiment on synthetic data:

    synth -> stats -> plan -> train-toy (per plan target) -> extract
          -> fuse -> eval

plus ``augment`` (write augmented PNGs with plan sidecars) and
``losses-demo`` (print loss values and gradient-check reports, used in CI).
Every artifact records the config hash and seed that produced it: JSON
artifacts embed a ``_provenance`` object, binary/CSV/PNG artifacts get a
``<name>.meta.json`` sidecar.  Errors leave a machine-readable JSON object
on stderr and a nonzero exit status.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .evaluation import EvalProtocol, evaluate
from .fusion import FusionPolicy, TaggedFeature, fuse_features, l2_normalize
from .geometry import (
    AspectRatioStats,
    ImageShape,
    ResizePlan,
    aspect_ratio_stats,
    plan_input_sizes,
    round_half_away,
)
from .io import (
    DatasetManifest,
    FeatureStore,
    ManifestEntry,
    TrainToySpec,
    config_hash,
    load_manifest,
    load_params,
    read_feature_store,
    read_image,
    resize_bilinear,
    save_params,
    write_feature_store,
    write_image_png,
    write_manifest,
)
from .losses import (
    EmbeddingBatch,
    LogitBatch,
    finite_difference_check,
    id_loss,
    id_loss_gradient,
    overall_loss,
    triplet_loss,
    triplet_loss_gradient,
    triplet_signature,
)
from .mixup import MixupConfig, augment_batch_with_plans
from .synthetic import N_CAMERAS, render_instance, synthesize_dataset
from .vit import SGDConfig, ToyViTConfig, forward_batch, train_steps

DEFAULT_AR_MODES = (0.75, 1.0, 1.3)


def _provenance(config_dict: dict, seed: int) -> dict:
    return {"config_hash": config_hash(config_dict), "seed": seed}


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def _write_meta(artifact: Path, provenance: dict) -> None:
    _write_json(artifact.with_name(artifact.name + ".meta.json"), provenance)


def _read_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _save_plot(path: Path, draw) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    draw(ax)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_synth(args) -> int:
    out = _out_dir(args)
    images_dir = out / "images"
    images_dir.mkdir(exist_ok=True)
    cfg = {
        "ids": args.ids,
        "instances": args.instances,
        "height": args.height,
        "ar_modes": list(args.ar_modes),
        "query_per_id": args.query_per_id,
    }
    prov = _provenance(cfg, args.seed)
    rng = np.random.default_rng([args.seed, 29])
    entries, query, gallery = [], [], []
    for vid in range(args.ids):
        for inst in range(args.instances):
            mode = args.ar_modes[int(rng.integers(len(args.ar_modes)))]
            ar = mode + (rng.random() - 0.5) * 0.1
            width = max(round_half_away(args.height * ar), 16)
            shape = ImageShape(height=args.height, width=width)
            image = render_instance(vid, inst, shape, seed=args.seed)
            rel = f"images/veh{vid:03d}_inst{inst:02d}.png"
            write_image_png(out / rel, image, metadata=prov)
            entry = ManifestEntry(
                path=str(out / rel),
                vehicle_id=vid,
                camera_id=inst % N_CAMERAS,
                width=width,
                height=args.height,
            )
            entries.append(entry)
            (query if inst < args.query_per_id else gallery).append(entry)
    write_manifest(out / "manifest.jsonl", entries)
    write_manifest(out / "query.jsonl", query)
    write_manifest(out / "gallery.jsonl", gallery)
    for name in ("manifest.jsonl", "query.jsonl", "gallery.jsonl"):
        _write_meta(out / name, prov)
    print(f"wrote {len(entries)} images under {out}")
    return 0


def _cmd_stats(args) -> int:
    out = _out_dir(args)
    manifest = load_manifest(args.manifest)
    stats = aspect_ratio_stats(manifest.shapes(), k=args.k, bins=args.bins, seed=args.seed)
    cfg = {"manifest": str(args.manifest), "k": args.k, "bins": args.bins}
    prov = _provenance(cfg, args.seed)

    payload = stats.to_dict()
    payload["_provenance"] = prov
    _write_json(out / "stats.json", payload)

    csv_path = out / "histogram.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lower", "bin_upper", "count"])
        for lo, hi, count in stats.histogram:
            writer.writerow([repr(lo), repr(hi), count])
    _write_meta(csv_path, prov)

    def draw(ax):
        lows = [b[0] for b in stats.histogram]
        widths = [b[1] - b[0] for b in stats.histogram]
        counts = [b[2] for b in stats.histogram]
        ax.bar(lows, counts, width=widths, align="edge", edgecolor="black")
        for center in stats.cluster_centers:
            ax.axvline(center, color="crimson", linestyle="--")
        ax.set_xlabel("aspect ratio (w/h)")
        ax.set_ylabel("images")
        ax.set_title(f"aspect ratios of {stats.count} images; k-means centers dashed")

    _save_plot(out / "histogram.png", draw)
    _write_meta(out / "histogram.png", prov)
    print(json.dumps({"count": stats.count, "centers": list(stats.cluster_centers)}))
    return 0


def _cmd_plan(args) -> int:
    out = _out_dir(args)
    stats = AspectRatioStats.from_dict(_read_json(args.stats))
    plan = plan_input_sizes(stats, base_height=args.base_height)
    cfg = {"stats": str(args.stats), "base_height": args.base_height}
    payload = plan.to_dict()
    payload["_provenance"] = _provenance(cfg, args.seed)
    _write_json(out / "plan.json", payload)
    print(json.dumps(payload["targets"]))
    return 0


def _cmd_augment(args) -> int:
    out = _out_dir(args)
    config = MixupConfig.from_dict(_read_json(args.config))
    seed = args.seed if args.seed is not None else config.seed
    manifest = load_manifest(args.manifest)
    images = [read_image(e.path) for e in manifest.entries]
    augmented, plans = augment_batch_with_plans(images, config, seed=seed)
    prov = _provenance(config.to_dict(), seed)
    low, high = config.ar_range
    for entry, image, plan in zip(manifest.entries, augmented, plans):
        name = Path(entry.path).stem
        png_path = out / f"{name}.png"
        write_image_png(png_path, image, metadata=prov)
        sidecar = {
            "source": entry.path,
            "eligible": low <= entry.aspect_ratio() <= high,
            "augmented": plan is not None,
            "plan": None if plan is None else plan.to_dict(),
            "_provenance": prov,
        }
        _write_json(out / f"{name}.plan.json", sidecar)
    n_aug = sum(p is not None for p in plans)
    print(f"augmented {n_aug}/{len(images)} images into {out}")
    return 0


def _cmd_train_toy(args) -> int:
    out = _out_dir(args)
    spec = TrainToySpec.from_dict(_read_json(args.config))
    if args.seed is not None:
        spec = TrainToySpec.from_dict(dict(spec.to_dict(), seed=args.seed))
    prov = _provenance(spec.to_dict(), spec.seed)

    shape = ImageShape(height=spec.height, width=spec.width)
    dataset = synthesize_dataset(spec.ids, spec.instances_per_id, shape, seed=spec.seed)
    # The run seed governs everything, including parameter init.
    encoder = ToyViTConfig.from_dict(dict(spec.encoder.to_dict(), seed=spec.seed))
    result = train_steps(
        encoder,
        dataset,
        steps=spec.steps,
        optimizer=SGDConfig(
            lr=spec.lr, momentum=spec.momentum, weight_decay=spec.weight_decay
        ),
        batch_p=spec.batch_p,
        batch_k=spec.batch_k,
        mixup=spec.mixup,
    )

    loss_path = out / "loss.csv"
    with open(loss_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "total", "id_loss", "triplet_loss"])
        for i in range(spec.steps):
            writer.writerow(
                [
                    i,
                    repr(float(result.losses[i])),
                    repr(float(result.id_losses[i])),
                    repr(float(result.triplet_losses[i])),
                ]
            )
    _write_meta(loss_path, prov)

    meta = {
        "model_ar": spec.model_ar,
        "height": spec.height,
        "width": spec.width,
        "channels": 3,
        "encoder": encoder.to_dict(),
        "class_ids": result.class_ids.tolist(),
        "provenance": prov,
    }
    params_path = out / "params.npz"
    save_params(params_path, result.params, meta)
    _write_meta(params_path, prov)

    features = forward_batch(
        result.params, [s.image for s in dataset], encoder.patch
    )
    store = FeatureStore(
        model_ar=spec.model_ar,
        vehicle_ids=np.asarray([s.vehicle_id for s in dataset], dtype=np.uint64),
        camera_ids=np.asarray([s.camera_id for s in dataset], dtype=np.uint32),
        features=features.astype(np.float32),
    )
    store_path = out / "features.rfv"
    write_feature_store(store_path, store)
    _write_meta(store_path, prov)
    print(
        json.dumps(
            {
                "first20_mean": float(result.losses[:20].mean()),
                "last20_mean": float(result.losses[-20:].mean()),
                "params": result.params.n_parameters(),
            }
        )
    )
    return 0


def _cmd_extract(args) -> int:
    out = _out_dir(args)
    params, meta = load_params(args.params)
    manifest = load_manifest(args.manifest)
    encoder = ToyViTConfig.from_dict(meta["encoder"])
    images = [
        resize_bilinear(read_image(e.path), meta["height"], meta["width"])
        for e in manifest.entries
    ]
    features = forward_batch(params, images, encoder.patch)
    store = FeatureStore(
        model_ar=float(meta["model_ar"]),
        vehicle_ids=np.asarray([e.vehicle_id for e in manifest.entries], dtype=np.uint64),
        camera_ids=np.asarray([e.camera_id for e in manifest.entries], dtype=np.uint32),
        features=features.astype(np.float32),
    )
    cfg = {"params": str(args.params), "manifest": str(args.manifest)}
    prov = _provenance(cfg, int(meta.get("provenance", {}).get("seed", 0)))
    store_path = out / args.out
    write_feature_store(store_path, store)
    _write_meta(store_path, prov)
    print(f"extracted {store.count} features (dim {store.dim}) -> {store_path}")
    return 0


def _cmd_fuse(args) -> int:
    out = _out_dir(args)
    if len(args.stores) < 1:
        raise ValueError("fuse needs at least one --stores entry")
    stores = [read_feature_store(p) for p in args.stores]
    manifest = load_manifest(args.manifest)
    policy = FusionPolicy.from_dict(_read_json(args.policy))
    first = stores[0]
    for s in stores[1:]:
        if s.count != first.count or s.dim != first.dim:
            raise ValueError("stores disagree on count or dim")
        if not (
            np.array_equal(s.vehicle_ids, first.vehicle_ids)
            and np.array_equal(s.camera_ids, first.camera_ids)
        ):
            raise ValueError("stores disagree on record identities")
    if len(manifest) != first.count:
        raise ValueError(
            f"manifest has {len(manifest)} entries, stores have {first.count}"
        )
    fused = np.empty((first.count, first.dim))
    for i, entry in enumerate(manifest.entries):
        tagged = [
            TaggedFeature(vector=s.features[i].astype(np.float64), model_ar=s.model_ar)
            for s in stores
        ]
        fused[i] = fuse_features(tagged, image_ar=entry.aspect_ratio(), policy=policy)
    if not args.no_normalize:
        fused = l2_normalize(fused)
    fused_store = FeatureStore(
        model_ar=0.0,  # fused across models; not tied to one training ratio
        vehicle_ids=first.vehicle_ids,
        camera_ids=first.camera_ids,
        features=fused.astype(np.float32),
    )
    cfg = {
        "stores": [str(p) for p in args.stores],
        "policy": policy.to_dict(),
        "normalize": not args.no_normalize,
    }
    prov = _provenance(cfg, args.seed)
    store_path = out / args.out
    write_feature_store(store_path, fused_store)
    _write_meta(store_path, prov)
    print(f"fused {len(stores)} stores -> {store_path}")
    return 0


def _cmd_eval(args) -> int:
    out = _out_dir(args)
    if len(args.stores) != 2:
        raise ValueError("eval needs exactly two --stores entries: query gallery")
    query = read_feature_store(args.stores[0])
    gallery = read_feature_store(args.stores[1])
    protocol = (
        EvalProtocol.from_dict(_read_json(args.protocol))
        if args.protocol
        else EvalProtocol()
    )
    max_rank = max(protocol.cmc_ranks)
    full = EvalProtocol(
        distance=protocol.distance,
        exclude_same_camera=protocol.exclude_same_camera,
        cmc_ranks=tuple(range(1, max_rank + 1)),
    )
    report = evaluate(query.to_feature_set(), gallery.to_feature_set(), full)
    curve = dict(report.cmc)
    cfg = {"stores": [str(p) for p in args.stores], "protocol": protocol.to_dict()}
    prov = _provenance(cfg, args.seed)

    payload = {
        "mAP": report.mAP,
        "cmc": [[r, curve[r]] for r in protocol.cmc_ranks],
        "per_query_ap": list(report.per_query_ap),
        "skipped_queries": report.skipped_queries,
        "_provenance": prov,
    }
    _write_json(out / "report.json", payload)

    csv_path = out / "cmc.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "accuracy"])
        for r in range(1, max_rank + 1):
            writer.writerow([r, repr(curve[r])])
    _write_meta(csv_path, prov)

    def draw(ax):
        ranks = list(range(1, max_rank + 1))
        ax.plot(ranks, [curve[r] for r in ranks], marker="o")
        ax.set_xlabel("rank")
        ax.set_ylabel("matching rate")
        ax.set_ylim(0.0, 1.05)
        ax.set_title(f"CMC (mAP {report.mAP:.3f})")
        ax.grid(True, alpha=0.3)

    _save_plot(out / "cmc.png", draw)
    _write_meta(out / "cmc.png", prov)
    print(json.dumps({"mAP": report.mAP, "cmc": payload["cmc"]}))
    return 0


def _cmd_losses_demo(args) -> int:
    rng = np.random.default_rng(args.seed)
    n_classes, p, k, dim = 5, 3, 3, 8
    logits = rng.normal(size=(p * k, n_classes))
    class_labels = rng.integers(0, n_classes, size=p * k)
    logit_batch = LogitBatch(logits=logits, labels=class_labels)

    features = rng.normal(size=(p * k, dim))
    labels = np.repeat(np.arange(p), k)
    emb_batch = EmbeddingBatch(features=features, labels=labels, P=p, K=k)

    id_value = id_loss(logit_batch)
    tri_value = triplet_loss(emb_batch)

    def id_fn(flat):
        b = LogitBatch(logits=flat.reshape(p * k, n_classes), labels=class_labels)
        return id_loss(b), id_loss_gradient(b).ravel()

    def tri_fn(flat):
        b = EmbeddingBatch(
            features=flat.reshape(p * k, dim), labels=labels, P=p, K=k
        )
        return triplet_loss(b), triplet_loss_gradient(b).ravel()

    fd_id = finite_difference_check(id_fn, logits.ravel())
    fd_tri = finite_difference_check(
        tri_fn, features.ravel(), signature=triplet_signature(labels, p, k)
    )
    payload = {
        "seed": args.seed,
        "id_loss": id_value,
        "triplet_loss": tri_value,
        "overall_loss": overall_loss(id_value, tri_value),
        "fd_id": fd_id.to_dict(),
        "fd_triplet": fd_tri.to_dict(),
    }
    print(json.dumps(payload, indent=2))
    if args.out_dir:
        _write_json(_out_dir(args) / "losses_demo.json", payload)
    return 0 if (fd_id.passed and fd_tri.passed) else 1


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vreid", description="aspect-ratio aware re-identification pipeline"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic labeled dataset to PNG files")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--ids", type=int, default=8)
    p.add_argument("--instances", type=int, default=8)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--ar-modes", type=float, nargs="+", default=list(DEFAULT_AR_MODES))
    p.add_argument("--query-per-id", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("stats", help="aspect-ratio statistics of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=3, help="aspect-ratio cluster count")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("plan", help="resize plan from aspect-ratio stats")
    p.add_argument("--stats", required=True, help="stats.json from the stats command")
    p.add_argument("--base-height", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_plan)

    p = sub.add_parser("augment", help="patch-mixup a manifest of images")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", required=True, help="MixupConfig JSON")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_augment)

    p = sub.add_parser("train-toy", help="train the toy encoder on synthetic data")
    p.add_argument("--config", required=True, help="TrainToySpec JSON")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_train_toy)

    p = sub.add_parser("extract", help="embed manifest images with trained params")
    p.add_argument("--params", required=True, help="params.npz from train-toy")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default="features.rfv", help="store filename")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("fuse", help="adaptive-weight fusion of feature stores")
    p.add_argument("--stores", nargs="+", required=True)
    p.add_argument("--manifest", required=True, help="supplies per-image aspect ratio")
    p.add_argument("--policy", required=True, help="FusionPolicy JSON")
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--out", default="fused.rfv")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_fuse)

    p = sub.add_parser("eval", help="mAP/CMC of query store vs gallery store")
    p.add_argument(
        "--stores", nargs=2, required=True, metavar=("QUERY", "GALLERY")
    )
    p.add_argument("--protocol", default=None, help="EvalProtocol JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("losses-demo", help="loss values + gradient checks (CI probe)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=_cmd_losses_demo)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports all failures
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
