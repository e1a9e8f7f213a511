"""Command-line front end.

    dscnet synth     --config c.json
    dscnet train     --config c.json
    dscnet eval      --config c.json --ckpt path
    dscnet gradcheck [--module ops|dmsk|ttt|unet|all] [--tol 1e-4]
    dscnet ablate    --config c.json

Exit codes: 0 success, 1 verification failure, 2 config error, 3 I/O error.
Set DSCNET_THREADS to cap BLAS threads (applied before numpy loads).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


def _apply_thread_cap() -> None:
    cap = os.environ.get("DSCNET_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_manifest(out_dir: Path, command: str, outputs: list[str]) -> None:
    _write_json(out_dir / "manifest.json", {"command": command, "outputs": sorted(outputs)})


def _dataset(cfg):
    from .dataio import synth_dataset

    d = cfg.data
    return synth_dataset(d.seed, d.n, d.H, d.W, d.K, d.scale_mix)


def cmd_synth(cfg) -> int:
    from .dataio import save_dataset

    out_dir = Path(cfg.out_dir)
    samples = _dataset(cfg)
    d = cfg.data
    meta = {"n": d.n, "H": d.H, "W": d.W, "K": d.K, "seed": d.seed, "scale_mix": d.scale_mix}
    save_dataset(out_dir / "dataset", samples, meta)
    names = [f"dataset/samples/{i:04d}.{kind}.dsct" for i in range(d.n) for kind in ("img", "msk")]
    _write_manifest(out_dir, "synth", names + ["dataset/meta.json"])
    return 0


def cmd_train(cfg) -> int:
    from .dataio import save_checkpoint
    from .traineval import train

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = train(cfg, _dataset(cfg), diagnostics_dir=out_dir / "diagnostics")
    save_checkpoint(out_dir / "checkpoint.dsck", result.params.named_parameters(), result.meta)
    _write_json(out_dir / "metrics.json", result.report.to_dict())
    lines = ["step,loss,dice"]
    lines += [f"{s},{loss!r},{dice!r}" for s, loss, dice in result.report.loss_curve]
    (out_dir / "loss_curve.csv").write_text("\n".join(lines) + "\n")
    _write_manifest(out_dir, "train", ["checkpoint.dsck", "metrics.json", "loss_curve.csv"])
    return 0


def cmd_eval(cfg, ckpt_path: str) -> int:
    from .traineval import evaluate_checkpoint

    report = evaluate_checkpoint(ckpt_path, cfg, _dataset(cfg))
    out_dir = Path(cfg.out_dir)
    _write_json(out_dir / "eval_metrics.json", report.to_dict())
    _write_manifest(out_dir, "eval", ["eval_metrics.json"])
    return 0


def cmd_gradcheck(module: str, tol: float, eps: float, out: str | None) -> int:
    from .verify import run_suite

    summary = run_suite(module, tol=tol, eps=eps)
    text = json.dumps(summary, indent=2, sort_keys=True)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    print(text)
    return 0 if summary["passed"] else 1


ABLATION_SKIP_MODES = ("plain", "dmsk", "ttt", "dsc")


def cmd_ablate(cfg) -> int:
    """Train and evaluate the 4x3 grid of skip mode x kernel strategy on one
    shared dataset, each cell with its own training seed."""
    import dataclasses

    from .config import KERNEL_STRATEGIES
    from .traineval import train

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = _dataset(cfg)
    rows = []
    cell = 0
    for skip_mode in ABLATION_SKIP_MODES:
        for strategy in KERNEL_STRATEGIES:
            cell_cfg = dataclasses.replace(
                cfg,
                model=dataclasses.replace(cfg.model, skip_mode=skip_mode, kernel_strategy=strategy),
                train=dataclasses.replace(cfg.train, seed=cfg.train.seed + cell),
            )
            result = train(cell_cfg, dataset)
            rows.append(
                {
                    "skip_mode": skip_mode,
                    "kernel_strategy": strategy,
                    "dice": result.report.dice,
                    "miou": result.report.miou,
                    "nsd": result.report.nsd,
                }
            )
            cell += 1
    _write_json(out_dir / "ablation.json", {"rows": rows})
    lines = ["skip_mode,kernel_strategy,dice,miou,nsd"]
    lines += [
        f"{r['skip_mode']},{r['kernel_strategy']},{r['dice']!r},{r['miou']!r},{r['nsd']!r}"
        for r in rows
    ]
    (out_dir / "ablation.csv").write_text("\n".join(lines) + "\n")
    _write_manifest(out_dir, "ablate", ["ablation.json", "ablation.csv"])
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dscnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("synth", "train", "ablate"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)

    p = sub.add_parser("eval")
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt", required=True)

    p = sub.add_parser("gradcheck")
    p.add_argument("--module", default="all", choices=["ops", "dmsk", "ttt", "unet", "all"])
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--out", default=None)
    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    args = _build_parser().parse_args(argv)

    from .errors import ConfigError, DscError, ManifestMismatch, TensorFileError

    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args.module, args.tol, args.eps, args.out)
        from .config import load_config

        cfg = load_config(args.config)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.ckpt)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        raise AssertionError(f"unhandled command {args.command}")
    except (ConfigError, ManifestMismatch) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (OSError, TensorFileError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3
    except DscError as e:
        print(f"verification failure: {e}", file=sys.stderr)
        return 1


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
