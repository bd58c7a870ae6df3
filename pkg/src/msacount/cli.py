"""Command line entry point: ``msacount <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .annotations import DatasetError, ImageRecord, apply_sizes, load_dataset, save_sizes
from .headsize import BinEdges, SizeEstimatorConfig, estimate_sizes

log = logging.getLogger("msacount")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int)
    p.add_argument("--config", type=Path, help="JSON config file; flags override its values")
    p.add_argument("--out-dir", type=Path, default=Path("out"))
    p.add_argument("--deterministic", action="store_true", help="force deterministic kernels")
    p.add_argument("--viz", action="store_true", help="also write PNG visualisations")
    p.add_argument("--csv", action="store_true", help="also write CSV reports")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="msacount", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("estimate-sizes", parents=[common], help="estimate head sizes and bins")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--C", type=int, default=3)
    p.add_argument("--default-eta", type=float, default=15.0)
    p.add_argument("--half-factor", action="store_true", help="halve the neighbour-distance estimate")
    p.add_argument("--bin-edges", type=Path, help="reuse bin edges (JSON list) instead of fitting")

    p = sub.add_parser("render", parents=[common], help="render GT density maps and scale masks")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--sizes", type=Path, help="size sidecar; estimated on the fly when omitted")
    p.add_argument("--sigma", type=float, default=15.0)
    p.add_argument("--C", type=int, default=3)

    p = sub.add_parser("train", parents=[common], help="train a model")
    _train_flags(p)

    p = sub.add_parser("eval", parents=[common], help="evaluate counts (MAE / MSE)")
    p.add_argument("--manifest", type=Path, required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--oracle", action="store_true", help="score rendered GT maps (sanity check)")
    p.add_argument("--sigma", type=float, default=15.0, help="GT sigma for --oracle")
    p.add_argument("--cap-resolution", dest="cap", action="store_true", default=True)
    p.add_argument("--no-cap-resolution", dest="cap", action="store_false")

    p = sub.add_parser("ablate", parents=[common], help="compare aggregation strategies")
    _train_flags(p)
    p.add_argument("--test-manifest", type=Path, required=True)
    p.add_argument("--strategies", default="average,max,concat,attention")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--spec", type=Path, required=True)
    p.add_argument("--out", type=Path, help="output directory (defaults to --out-dir)")
    return parser


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--val-manifest", type=Path)
    p.add_argument("--val-split", action="store_true", help="hold out 20%% of --manifest for validation")
    p.add_argument("--sizes", type=Path)
    p.add_argument("--profile", choices=["paper", "desk"], default="desk")
    for name, typ in [("epochs", int), ("batch-size", int), ("lr-initial", float),
                      ("lr-after-drop", float), ("drop-epoch", int), ("lam", float), ("sigma", float),
                      ("crop-size", int), ("samples-per-image", int), ("max-steps", int),
                      ("preset", str), ("aggregation", str), ("loss-scale", float)]:
        p.add_argument(f"--{name}", type=typ)


# ---------------------------------------------------------------------------

def _load(manifest: Path, sizes: Optional[Path] = None) -> list[ImageRecord]:
    records = load_dataset(manifest)
    if sizes is not None:
        records = apply_sizes(records, sizes)
    return records


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=1), encoding="utf-8")


def cmd_estimate_sizes(args) -> str:
    records = _load(args.manifest)
    cfg = SizeEstimatorConfig(k=args.k, default_eta=args.default_eta,
                              ga_half_factor=args.half_factor, num_bins=args.C)
    edges = None
    if args.bin_edges is not None:
        edges = BinEdges(tuple(json.loads(args.bin_edges.read_text())))
    sized, edges = estimate_sizes(records, cfg, edges)
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    save_sizes(sized, out / "sizes.json")
    _write_json(out / "bin_edges.json", list(edges.edges))
    if args.viz:
        from .viz import plot_head_sizes
        (out / "viz").mkdir(exist_ok=True)
        for r in sized:
            plot_head_sizes(r, out / "viz" / (Path(r.image_id).stem + "_sizes.png"))
    counts = np.bincount([h.bin for r in sized for h in r.heads], minlength=edges.num_bins)
    return f"sized {sum(r.count for r in sized)} heads in {len(sized)} images; bin populations {counts.tolist()}"


def _sized(records, C) -> list[ImageRecord]:
    if all(h.bin is not None for r in records for h in r.heads):
        return records
    sized, _ = estimate_sizes(records, SizeEstimatorConfig(num_bins=C))
    return sized


def cmd_render(args) -> str:
    from .densitymaps import render_density, render_scale_masks, save_array, save_heatmap

    records = _sized(_load(args.manifest, args.sizes), args.C)
    out = args.out_dir
    (out / "density").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    total = 0.0
    for r in records:
        stem = Path(r.image_id).with_suffix("").as_posix().replace("/", "__")
        gt = render_density(r, args.sigma)
        masks = render_scale_masks(r, args.sigma, args.C)
        save_array(gt.values, out / "density" / f"{stem}.f32")
        save_array(masks.masks, out / "masks" / f"{stem}.u8")
        total += gt.count
        if args.viz:
            save_heatmap(gt.values, out / "density" / f"{stem}.png")
            for c in range(args.C):
                save_heatmap(masks.masks[c], out / "masks" / f"{stem}_bin{c}.png", cmap="gray")
    return f"rendered {len(records)} density maps (total mass {total:.3f}) into {out}"


def _train_config(args):
    from .trainer import TrainConfig

    overrides = {k: getattr(args, k) for k in
                 ["epochs", "batch_size", "lr_initial", "lr_after_drop", "drop_epoch", "lam", "sigma",
                  "crop_size", "samples_per_image", "max_steps", "preset", "aggregation", "loss_scale"]}
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.deterministic:
        overrides["deterministic"] = True
    base = TrainConfig.paper() if args.profile == "paper" else TrainConfig.desk()
    d = base.to_dict()
    if args.config is not None:
        d.update(json.loads(args.config.read_text(encoding="utf-8")))
    d.update(overrides)
    return TrainConfig.from_dict(d)


def _train_data(args):
    from .pipeline import split_train_val

    train = _load(args.manifest, args.sizes)
    val = []
    if args.val_manifest is not None:
        val = _load(args.val_manifest)
    elif args.val_split:
        train, val = split_train_val(train, 0.8, args.seed or 0)
    return train, val


def cmd_train(args) -> str:
    from .trainer import fit

    cfg = _train_config(args)
    train, val = _train_data(args)
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_dict())
    model, hist = fit(None, train, val, cfg, out)
    last = hist.steps[-1]["loss_total"] if hist.steps else float("nan")
    return f"trained {len(hist.steps)} steps over {len(hist.epochs)} epochs; final loss {last:.4g}; checkpoints in {out}"


def cmd_eval(args) -> str:
    from .metrics import evaluate

    records = _load(args.manifest)
    if args.oracle:
        from .densitymaps import render_density
        sigma = args.sigma
        model = lambda img, rec: render_density(rec, sigma).values
    else:
        from .network import load_checkpoint
        if not (args.checkpoint / "topology.json").is_file():
            raise DatasetError([f"checkpoint not found: {args.checkpoint}"])
        model = load_checkpoint(args.checkpoint)
    res = evaluate(model, records, resolution_cap=args.cap)
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    res.write_json(out / "eval.json")
    if args.csv:
        res.write_csv(out / "eval.csv")
    return f"MAE {res.mae:.4f} MSE {res.mse:.4f} over {res.n_images} images"


def cmd_ablate(args) -> str:
    from .metrics import evaluate
    from .network import AGGREGATIONS
    from .trainer import fit

    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    bad = [s for s in strategies if s not in AGGREGATIONS]
    if bad:
        raise UsageError(f"unknown strategies {bad}; choose from {list(AGGREGATIONS)}")
    cfg = _train_config(args)
    train, val = _train_data(args)
    test = _load(args.test_manifest)
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for strat in strategies:
        scfg = replace(cfg, aggregation=strat)
        model, hist = fit(None, train, val, scfg, out / strat)
        res = evaluate(model, test, resolution_cap=scfg.resolution_cap)
        res.write_json(out / strat / "eval.json")
        rows.append({"aggregation": strat, "mae": res.mae, "mse": res.mse,
                     "final_loss": hist.steps[-1]["loss_total"] if hist.steps else None})
    _write_json(out / "ablation.json", {"config": cfg.to_dict(), "rows": rows})
    lines = [f"{'Aggregation':<14}{'MAE':>10}{'MSE':>10}"]
    lines += [f"{r['aggregation']:<14}{r['mae']:>10.3f}{r['mse']:>10.3f}" for r in rows]
    table = "\n".join(lines)
    (out / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    if args.csv:
        import csv
        with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=["aggregation", "mae", "mse", "final_loss"])
            w.writeheader()
            w.writerows(rows)
    print(table)
    best = min(rows, key=lambda r: r["mae"])
    return f"ablated {len(rows)} strategies; best {best['aggregation']} (MAE {best['mae']:.3f})"


def cmd_synth(args) -> str:
    from .pipeline import SyntheticSceneSpec, write_synthetic_dataset

    try:
        raw = json.loads(args.spec.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DatasetError([f"spec not found: {args.spec}"]) from None
    except json.JSONDecodeError as exc:
        raise DatasetError([f"cannot parse spec {args.spec}: {exc}"]) from None
    n_images = int(raw.pop("n_images", 1))
    n_range = raw.pop("n_heads_range", None)
    if args.seed is not None:
        raw["rng_seed"] = args.seed
    try:
        spec = SyntheticSceneSpec.from_dict(raw)
    except TypeError as exc:
        raise DatasetError([f"bad synthetic spec: {exc}"]) from None
    out = args.out or args.out_dir
    records = write_synthetic_dataset(out, spec, n_images, tuple(n_range) if n_range else None)
    return f"wrote {len(records)} synthetic images ({sum(r.count for r in records)} heads) to {out}"


COMMANDS = {
    "estimate-sizes": cmd_estimate_sizes,
    "render": cmd_render,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "synth": cmd_synth,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.deterministic:
        import torch
        torch.use_deterministic_algorithms(True)
    try:
        summary = COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"msacount {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"msacount {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - reported with the runtime exit code
        log.debug("failure", exc_info=True)
        print(f"msacount {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(summary)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
