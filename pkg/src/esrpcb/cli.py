"""Batch command line: ``esrpcb <command> [options]``.

Exit status is 0 on success, 1 on invalid input data, 2 on usage errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import edges as edge_ops
from .dataset import (CLASS_NAMES, DatasetManifest, crop_augment, defect_type, load_voc_dir,
                      split_manifest)
from .fusion import DetectionFormatError, nms, read_detections, soft_nms, wbf, write_detections
from .imaging import atomic_write, degrade, load_image, sample_patch_pairs, save_image, to_gray
from .metrics import evaluate_detections, format_ci, mean_ci95, psnr, ssim
from .nn.gradcheck import gradcheck
from .nn.network import NetworkConfig, build_network, count_macs, count_params
from .nn.train import PRESETS, AdamState, fit
from .nn.weights import load_weights, save_weights
from .pipeline import crop_to_multiple, load_config, super_resolve
from .synthetic import pcb_image

log = logging.getLogger("esrpcb")

DEFAULT_PAIRS = ((100, 200), (100, 220), (80, 200), (80, 220))


class UsageError(Exception):
    pass


def _config_args(p: argparse.ArgumentParser, network: bool = True) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int, help="RNG seed (default: $ESRPCB_SEED or 0)")
    if network:
        p.add_argument("--edge-mode", choices=["none", "canny", "sobel"],
                       help="edge channels fed to the network (default: canny)")
        p.add_argument("--blocks", type=int, dest="n_blocks", help="ResCat blocks (default: 16)")
        p.add_argument("--filters", type=int, help="feature width (default: 64)")
        p.add_argument("--variant", choices=["esrpcb", "edsr"], help="block type (default: esrpcb)")


def _resolved(args, **extra):
    overrides = {k: getattr(args, k, None) for k in
                 ("seed", "edge_mode", "n_blocks", "filters", "variant")}
    overrides.update(extra)
    return load_config(getattr(args, "config", None), overrides)


def _write_json(path, obj) -> None:
    atomic_write(Path(path), (json.dumps(obj, indent=2) + "\n").encode("utf-8"))


def _map_jobs(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- commands

def cmd_edges(args) -> int:
    params = edge_ops.CannyParams(sigma=args.sigma, ksize=args.ksize, low=args.low, high=args.high)
    gray = to_gray(load_image(args.input))
    edge = edge_ops.canny(gray, params) if args.mode == "canny" else edge_ops.sobel_edges(gray)
    save_image(edge_ops.edge_map_to_image(edge), args.output)
    return 0


def cmd_degrade(args) -> int:
    if len(args.inputs) > 1 and not args.out_dir:
        raise UsageError("several inputs need --out-dir")
    if len(args.inputs) == 1 and not (args.output or args.out_dir):
        raise UsageError("give an output path or --out-dir")

    def one(path):
        hr = load_image(path)
        target = Path(args.out_dir) / Path(path).name if args.out_dir else Path(args.output)
        save_image(degrade(hr), target)
        return str(target)

    for t in _map_jobs(one, args.inputs, args.jobs):
        print(t)
    return 0


def cmd_crop_dataset(args) -> int:
    manifest = load_voc_dir(args.voc_dir)
    crops = []
    images_dir = Path(args.images_dir) if args.images_dir else None
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for img in manifest.images:
        pieces = crop_augment(img, args.crop, args.stride, args.min_box_frac,
                              defect_centered=not args.grid_only)
        if images_dir is not None:
            src = images_dir / Path(img.path).name
            pixels = load_image(src)
            for p in pieces:
                x0, y0 = p.origin
                p.path = str(Path(p.path).with_suffix(".png"))
                save_image(pixels[y0:y0 + args.crop, x0:x0 + args.crop], out_dir / p.path)
        crops.extend(pieces)
    full = DatasetManifest(crops)
    train, val, test = split_manifest(full, args.split, args.seed)
    for part in (train, val, test):
        part.save(out_dir / f"{part.split}.json")
    counts = full.class_counts()
    print(f"source images {len(manifest.images)}  defects {sum(manifest.class_counts().values())}")
    print(f"crops {len(crops)}  defects {sum(counts.values())}")
    for name in CLASS_NAMES:
        print(f"  {name:<16} {counts.get(name, 0)}")
    return 0


def _training_pairs(args, cfg):
    preset = PRESETS[cfg.preset]
    patch = args.patch or preset.lr_patch
    images = []
    if args.synthetic:
        size = 4 * max(patch, args.synthetic_size // 4)
        images = [(f"synthetic{i}", pcb_image(size, size, seed=cfg.seed + i)) for i in range(args.synthetic)]
    for path in args.hr or []:
        images.append((Path(path).stem, load_image(path)))
    if args.manifest:
        m = DatasetManifest.load(args.manifest)
        base = Path(args.manifest).parent
        images += [(img.source, load_image(base / img.path)) for img in m.images]
    if not images:
        raise UsageError("no training images: pass --hr, --manifest or --synthetic")
    pairs = []
    for k, (name, hr) in enumerate(images):
        hr = crop_to_multiple(hr)
        lr = degrade(hr)
        x = edge_ops.build_sr_input(lr, cfg.edge_mode, cfg.canny)
        pairs += sample_patch_pairs(hr, x, patch, args.patches_per_image, cfg.seed + k, name)
    return pairs


def cmd_train(args) -> int:
    cfg = _resolved(args, preset=args.preset)
    preset = PRESETS[cfg.preset]
    pairs = _training_pairs(args, cfg)
    net = build_network(cfg.network, seed=cfg.seed)
    adam = AdamState(lr=args.lr if args.lr is not None else preset.lr,
                     halve_every=args.halve_every or preset.halve_every)
    steps = args.steps if args.steps is not None else preset.steps
    batch = args.batch or preset.batch_size
    history = fit(net, pairs, steps, batch, adam, seed=cfg.seed, log_every=args.log_every)
    save_weights(net, args.output)
    report = {
        "config": cfg.to_dict(), "steps": steps, "batch_size": batch, "lr": adam.lr,
        "patches": len(pairs), "initial_loss": history[0] if history else None,
        "final_loss": history[-1] if history else None, "loss": history,
    }
    _write_json(str(args.output) + ".json", report)
    if history:
        print(f"loss {history[0]:.6f} -> {history[-1]:.6f} over {steps} steps")
    return 0


def cmd_sr(args) -> int:
    cfg = _resolved(args)
    net = load_weights(args.weights)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def one(path):
        target = out_dir / (Path(path).stem + ".png")
        save_image(super_resolve(net, load_image(path), cfg.canny), target)
        return str(target)

    for t in _map_jobs(one, args.inputs, args.jobs):
        print(t)
    return 0


def cmd_psnr(args) -> int:
    value = psnr(load_image(args.a), load_image(args.b), y_channel=args.y_channel, crop=args.crop)
    print("inf" if math.isinf(value) else f"{value:.4f}")
    return 0


def cmd_ssim(args) -> int:
    print(f"{ssim(load_image(args.a), load_image(args.b)):.6f}")
    return 0


def cmd_fuse(args) -> int:
    cfg = _resolved(args, fusion_method=args.method, iou_thr=args.iou, conf_mode=args.conf_mode,
                    soft_sigma=args.sigma, soft_mode=args.soft_mode, score_floor=args.score_floor)
    models = [read_detections(p) for p in args.inputs]
    if cfg.fusion_method == "wbf":
        fused = wbf(models, cfg.iou_thr, cfg.conf_mode)
    else:
        merged = [d for m in models for d in m]
        if cfg.fusion_method == "nms":
            fused = nms(merged, cfg.iou_thr)
        else:
            fused = soft_nms(merged, cfg.iou_thr, cfg.soft_sigma, cfg.soft_mode, cfg.score_floor)
    write_detections(fused, args.output)
    print(f"{sum(len(m) for m in models)} detections from {len(models)} model(s) -> {len(fused)}")
    return 0


def _class_name(c: int) -> str:
    return CLASS_NAMES[c] if c < len(CLASS_NAMES) else f"class{c}"


def evaluate_report(pred_paths, gt_path, iou_min: float = 0.5, config: dict | None = None) -> dict:
    gts = read_detections(gt_path, require_score=False)
    classes = sorted(set(range(len(CLASS_NAMES))) | {g.class_id for g in gts})
    runs = []
    for path in pred_paths:
        res = evaluate_detections(read_detections(path), gts, classes, iou_min)
        runs.append(res)
    report = {
        "config": config or {},
        "iou": iou_min,
        "predictions": [str(p) for p in pred_paths],
        "per_class": {_class_name(c): [r.per_class[c] for r in runs] for c in classes},
        "n_gt": {_class_name(c): runs[0].n_gt[c] if runs else 0 for c in classes},
        "map50": [r.map50 for r in runs],
    }
    if len(runs) >= 2:
        mean, lo, hi = mean_ci95(report["map50"])
        report["ci95"] = {"mean": mean, "lo": lo, "hi": hi, "text": format_ci(mean, lo, hi)}
    return report


def format_evaluate_text(report: dict) -> str:
    names = [Path(p).stem for p in report["predictions"]]
    width = max([16] + [len(n) for n in names]) + 2
    lines = ["Type of defect".ljust(18) + "".join(n.rjust(width) for n in names)]
    for cls, aps in report["per_class"].items():
        cells = "".join(("-" if a is None else f"{a:.3f}").rjust(width) for a in aps)
        lines.append(cls.replace("_", " ").ljust(18) + cells)
    lines.append("Average".ljust(18) + "".join(f"{m:.3f}".rjust(width) for m in report["map50"]))
    if "ci95" in report:
        lines.append(report["ci95"]["text"])
    return "\n".join(lines) + "\n"


def cmd_evaluate(args) -> int:
    cfg = _resolved(args)
    report = evaluate_report(args.predictions, args.gt, args.iou, cfg.to_dict())
    text = format_evaluate_text(report)
    sys.stdout.write(text)
    if args.json:
        _write_json(args.json, report)
    if args.text:
        atomic_write(Path(args.text), text.encode("utf-8"))
    return 0


def _parse_pair(s: str) -> tuple[float, float]:
    try:
        lo, hi = s.replace("-", "/").split("/")
        return float(lo), float(hi)
    except ValueError:
        raise argparse.ArgumentTypeError(f"threshold pair must look like 100/200, got {s!r}") from None


def sweep_report(manifest_path, weights, pairs, cfg, jobs: int = 1) -> dict:
    """Per-defect-type PSNR/SSIM of the Canny-guided model for each threshold pair."""
    if len(weights) not in (1, len(pairs)):
        raise UsageError(f"give one weights file or one per pair ({len(pairs)})")
    manifest = DatasetManifest.load(manifest_path)
    base = Path(manifest_path).parent
    samples = []
    for img in manifest.images:
        hr = crop_to_multiple(load_image(base / img.path))
        samples.append((defect_type(img), hr, degrade(hr)))

    columns = []
    for k, (lo, hi) in enumerate(pairs):
        net = load_weights(weights[k if len(weights) > 1 else 0])
        if net.config.edge_mode != "canny":
            raise ValueError("threshold sweep needs a canny-mode network")
        params = edge_ops.CannyParams(sigma=cfg.canny_sigma, ksize=cfg.canny_ksize, low=lo, high=hi)

        def score(sample, net=net, params=params):
            cls, hr, lr = sample
            sr = super_resolve(net, lr, params)
            return cls, psnr(sr, hr), ssim(sr, hr)

        per_class = {c: [] for c in CLASS_NAMES}
        for cls, p, s in _map_jobs(score, samples, jobs):
            if cls is not None:
                per_class[cls].append((p, s))
        cells = {c: ({"psnr": float(np.mean([v[0] for v in vals])),
                      "ssim": float(np.mean([v[1] for v in vals]))} if vals else None)
                 for c, vals in per_class.items()}
        present = [v for v in cells.values() if v]
        avg = ({"psnr": float(np.mean([v["psnr"] for v in present])),
                "ssim": float(np.mean([v["ssim"] for v in present]))} if present else None)
        columns.append({"pair": f"{lo:g}/{hi:g}", "rows": cells, "average": avg})
    return {"config": cfg.to_dict(), "manifest": str(manifest_path),
            "weights": [str(w) for w in weights], "columns": columns}


def format_sweep_text(report: dict) -> str:
    cols = report["columns"]
    lines = ["Type of defect".ljust(18) + "".join(c["pair"].rjust(18) for c in cols)]

    def cell(v):
        return ("-" if v is None else f"{v['psnr']:.2f} / {v['ssim']:.4f}").rjust(18)

    for name in CLASS_NAMES:
        lines.append(name.replace("_", " ").ljust(18) + "".join(cell(c["rows"][name]) for c in cols))
    lines.append("Average".ljust(18) + "".join(cell(c["average"]) for c in cols))
    return "\n".join(lines) + "\n"


def cmd_sweep(args) -> int:
    cfg = _resolved(args)
    pairs = args.pairs or list(DEFAULT_PAIRS)
    report = sweep_report(args.manifest, args.weights, pairs, cfg, args.jobs)
    text = format_sweep_text(report)
    sys.stdout.write(text)
    if args.json:
        _write_json(args.json, report)
    return 0


def cmd_param_count(args) -> int:
    print(count_params(_resolved(args).network))
    return 0


def cmd_macs(args) -> int:
    macs = count_macs(_resolved(args).network, args.height, args.width)
    print(f"{macs}  ({macs / 1e9:.2f} GMACs)" if args.human else macs)
    return 0


def cmd_gradcheck(args) -> int:
    config = NetworkConfig(n_blocks=args.blocks, filters=args.filters, edge_mode=args.edge_mode or "canny")
    res = gradcheck(config, size=args.size, step=args.step, per_tensor=args.per_tensor, seed=args.seed or 0)
    print(f"max relative error {res.max_rel_error:.3e} over {res.n_checked} probes "
          f"(worst {res.worst}, kink crossings {res.kink_crossings}, seed {res.seed})")
    return 0 if res.ok else 1


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="esrpcb", description=__doc__,
                                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("edges", help="write a Canny or Sobel edge image", formatter_class=fmt)
    p.add_argument("--mode", choices=["canny", "sobel"], default="canny")
    p.add_argument("--low", type=float, default=100.0, help="Canny low threshold")
    p.add_argument("--high", type=float, default=200.0, help="Canny high threshold")
    p.add_argument("--sigma", type=float, default=1.4, help="Gaussian sigma")
    p.add_argument("--ksize", type=int, default=5, help="Gaussian kernel size")
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_edges)

    p = sub.add_parser("degrade", help="bicubic x1/4 downscale (LR synthesis)", formatter_class=fmt)
    p.add_argument("inputs", nargs="+")
    p.add_argument("-o", "--output", help="output path (single input)")
    p.add_argument("--out-dir", help="output directory (several inputs)")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers")
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("crop-dataset", help="600x600 crop augmentation + split manifests",
                       formatter_class=fmt)
    p.add_argument("--voc-dir", required=True, help="directory of VOC XML annotations")
    p.add_argument("--images-dir", help="source images; crops are written when given")
    p.add_argument("--out", required=True, help="output directory for manifests/crops")
    p.add_argument("--crop", type=int, default=600)
    p.add_argument("--stride", type=int, default=600)
    p.add_argument("--min-box-frac", type=float, default=0.25)
    p.add_argument("--grid-only", action="store_true", help="skip defect-centred crops")
    p.add_argument("--split", type=float, nargs=3, default=(0.8, 0.1, 0.1),
                   metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_crop_dataset)

    p = sub.add_parser("train", help="train the SR network with ADAM + MSE", formatter_class=fmt)
    _config_args(p)
    p.add_argument("--preset", choices=sorted(PRESETS), help="training preset (default: toy)")
    p.add_argument("--hr", nargs="*", help="HR training images")
    p.add_argument("--manifest", help="dataset manifest of HR crops")
    p.add_argument("--synthetic", type=int, default=0, help="number of synthetic PCB images")
    p.add_argument("--synthetic-size", type=int, default=192, help="synthetic image side")
    p.add_argument("--patch", type=int, help="LR patch size (default: from preset)")
    p.add_argument("--patches-per-image", type=int, default=4)
    p.add_argument("--steps", type=int, help="update steps (default: from preset)")
    p.add_argument("--batch", type=int, help="mini-batch size (default: from preset)")
    p.add_argument("--lr", type=float, help="initial learning rate (default: from preset)")
    p.add_argument("--halve-every", type=int, help="halve the LR every N steps")
    p.add_argument("--log-every", type=int, default=0)
    p.add_argument("-o", "--output", required=True, help="weights file to write")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sr", help="super-resolve LR images with trained weights", formatter_class=fmt)
    _config_args(p, network=False)
    p.add_argument("--weights", required=True)
    p.add_argument("--low", type=float, dest="canny_low", help="Canny low threshold (default: 100)")
    p.add_argument("--high", type=float, dest="canny_high", help="Canny high threshold (default: 200)")
    p.add_argument("inputs", nargs="+")
    p.add_argument("-o", "--out-dir", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sr)

    p = sub.add_parser("psnr", help="PSNR between two images", formatter_class=fmt)
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--y-channel", action="store_true", help="compare studio-range luma only")
    p.add_argument("--crop", type=int, default=0, help="border pixels to ignore")
    p.set_defaults(func=cmd_psnr)

    p = sub.add_parser("ssim", help="SSIM between two images", formatter_class=fmt)
    p.add_argument("a")
    p.add_argument("b")
    p.set_defaults(func=cmd_ssim)

    p = sub.add_parser("fuse", help="ensemble detection files", formatter_class=fmt)
    _config_args(p, network=False)
    p.add_argument("--method", choices=["nms", "soft_nms", "wbf"], help="(default: wbf)")
    p.add_argument("--iou", type=float, help="IoU threshold (default: 0.55)")
    p.add_argument("--conf-mode", choices=["avg_min", "avg_t"], help="WBF rescale (default: avg_min)")
    p.add_argument("--sigma", type=float, help="Soft-NMS gaussian sigma (default: 0.5)")
    p.add_argument("--soft-mode", choices=["gaussian", "linear"], help="(default: gaussian)")
    p.add_argument("--score-floor", type=float, help="Soft-NMS drop threshold (default: 0.001)")
    p.add_argument("inputs", nargs="+", help="JSONL detections, one file per model")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("evaluate", help="per-class AP and mAP50", formatter_class=fmt)
    _config_args(p, network=False)
    p.add_argument("--gt", required=True, help="ground-truth JSONL (no scores)")
    p.add_argument("predictions", nargs="+", help="prediction JSONL file(s)")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--json", help="write the JSON report here")
    p.add_argument("--text", help="write the text report here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="Canny threshold-pair PSNR/SSIM table", formatter_class=fmt)
    _config_args(p, network=False)
    p.add_argument("--manifest", required=True, help="evaluation manifest of HR images")
    p.add_argument("--weights", nargs="+", required=True, help="one file, or one per pair")
    p.add_argument("--pairs", nargs="+", type=_parse_pair,
                   help="threshold pairs like 100/200 (default: 100/200 100/220 80/200 80/220)")
    p.add_argument("--json", help="write the JSON report here")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("param-count", help="print the parameter total", formatter_class=fmt)
    _config_args(p)
    p.set_defaults(func=cmd_param_count)

    p = sub.add_parser("macs", help="print multiply-accumulates for one LR input", formatter_class=fmt)
    _config_args(p)
    p.add_argument("--height", type=int, default=150)
    p.add_argument("--width", type=int, default=150)
    p.add_argument("--human", action="store_true", help="also print GMACs")
    p.set_defaults(func=cmd_macs)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check", formatter_class=fmt)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--filters", type=int, default=8)
    p.add_argument("--edge-mode", choices=["none", "canny", "sobel"], default="canny")
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--step", type=float, default=1e-3)
    p.add_argument("--per-tensor", type=int, default=None, help="probe only N entries per tensor")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"esrpcb: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError, DetectionFormatError) as exc:
        print(f"esrpcb: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
