"""Command line entry points: generate-data, train, evaluate, ablate, gradcheck."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import PROFILES, RunConfig, dump_config, load_config

log = logging.getLogger("handgcat")


def _kv(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    p.add_argument("--config", type=Path, help="key = value file applied over the profile")
    p.add_argument("--set", dest="overrides", type=_kv, action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. --set kgc.depth=3 (repeatable)")
    # the most common keys also get dedicated flags
    for key in RunConfig().items():
        if key in ("seed", "optimizer.lr", "optimizer.batch", "optimizer.epochs", "optimizer.max_steps",
                   "data.n_train", "data.n_test", "data.occlusion_level", "precision"):
            p.add_argument("--" + key.replace(".", "-").replace("_", "-"), dest="flag:" + key, default=None)


def build_config(args) -> RunConfig:
    cfg = PROFILES[args.profile]()
    if args.config:
        cfg = load_config(args.config, cfg)
    for k, v in vars(args).items():
        if k.startswith("flag:") and v is not None:
            cfg.set(k[5:], v)
    for k, v in args.overrides:
        cfg.set(k, v)
    cfg.validate()
    return cfg


def _dataset(path, cfg: RunConfig, split: str):
    from .synth import generate_dataset, load_dataset
    if path:
        if not Path(path, "manifest.json").exists():
            raise FileNotFoundError(f"dataset not found: {path}")
        return load_dataset(path)
    n = cfg.data.n_train if split == "train" else cfg.data.n_test
    level = cfg.data.occlusion_level if split == "train" else cfg.data.test_occlusion_level
    return generate_dataset(cfg.seed, n, level, split, hand_seed=cfg.data.hand_seed)


def cmd_generate_data(args) -> int:
    from .synth import generate_dataset, save_dataset
    ds = generate_dataset(args.seed, args.n, args.occlusion_level, args.split, hand_seed=args.hand_seed,
                          workers=args.workers)
    save_dataset(ds, args.out, export_ppm=args.ppm)
    mean_occ = sum(s.occlusion_ratio for s in ds.samples) / len(ds)
    print(f"wrote {len(ds)} samples to {args.out} (mean occlusion {mean_occ:.3f})")
    return 0


def cmd_train(args) -> int:
    from .train import train
    cfg = build_config(args)
    train_set = _dataset(args.train_data, cfg, "train")
    test_set = _dataset(args.test_data, cfg, "test") if (args.test_data or args.eval_each_epoch) else None
    res = train(cfg, train_set, args.out, test_set=test_set)
    (Path(args.out) / "config.txt").write_text(dump_config(cfg))
    with open(Path(args.out) / "loss_curve.csv", "w") as fh:
        fh.write("step,loss\n")
        fh.writelines(f"{i},{v!r}\n" for i, v in enumerate(res.step_losses))
    print(f"{len(res.step_losses)} steps, loss {res.step_losses[0]:.4g} -> {res.step_losses[-1]:.4g}; "
          f"checkpoint {res.checkpoint}")
    return 0


def cmd_evaluate(args) -> int:
    from .train import evaluate, load_checkpoint
    _, cfg = load_checkpoint(args.checkpoint)
    ds = _dataset(args.data, cfg, args.split)
    report, bins = evaluate(args.checkpoint, ds, args.out)
    print(report.to_json())
    for row in bins:
        print(f"{row['bin']}: n={row['sample_count']} mpjpe={row['mpjpe_mm']:.2f} pa_mpjpe={row['pa_mpjpe_mm']:.2f}")
    return 0


def cmd_ablate(args) -> int:
    from .train import PRESETS, ablate, expand_grid
    cfg = build_config(args)
    if args.preset:
        variants = PRESETS[args.preset]
    else:
        grid = {}
        for k, v in args.grid:
            grid[k] = [x.strip() for x in v.split("|")]
        if not grid:
            raise ValueError("give --preset or at least one --grid key=v1|v2")
        variants = expand_grid(grid)
    rows = ablate(cfg, variants, args.out)
    for r in rows:
        print(f"{r['config']:<40} PA-MPJPE {r['pa_mpjpe_mm']:7.2f}  PA-MPVPE {r['pa_mpvpe_mm']:7.2f}  "
              f"F@5 {r['f_at_5']:.3f}  F@15 {r['f_at_15']:.3f}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite
    results = run_suite(seeds=args.seeds, rtol=args.rtol, only=args.only)
    failed = [r for r in results if not r.ok]
    for r in results:
        if args.verbose or not r.ok:
            print(f"{'ok  ' if r.ok else 'FAIL'} {r.name} seed={r.seed} max_rel={r.max_rel:.2e}")
    print(json.dumps({"checks": len(results), "failed": len(failed)}))
    return 1 if failed else 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="handgcat", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="render a synthetic split to disk")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--occlusion-level", type=float, default=0.5)
    p.add_argument("--split", choices=["train", "test"], default="train")
    p.add_argument("--hand-seed", type=int, default=20230714)
    p.add_argument("--ppm", action="store_true", help="also export images as PPM")
    p.add_argument("--workers", type=int, default=1, help="processes used for rendering")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train a model and write checkpoints")
    _add_config_args(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--train-data", type=Path, help="dataset directory (generated from the config if omitted)")
    p.add_argument("--test-data", type=Path)
    p.add_argument("--eval-each-epoch", action="store_true", help="add test metrics to the epoch log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--data", type=Path, help="dataset directory (test split regenerated from the config if omitted)")
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and evaluate a grid of configs")
    _add_config_args(p)
    p.add_argument("--out", type=Path, required=True, help="CSV path")
    p.add_argument("--preset", choices=["kgc", "cat"])
    p.add_argument("--grid", type=_kv, action="append", default=[], metavar="KEY=V1|V2")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--rtol", type=float, default=1e-4)
    p.add_argument("--only", help="substring filter on check names")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
