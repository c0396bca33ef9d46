"""``sacreg`` command-line entry point."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .ablate import ablate
from .config import load_config
from .evaluate import IDENTITY, evaluate, format_table
from .tensor import ContractError
from .train import DataError, format_diagnostics, load_model, register, train
from .volume_io import read_volume, save_case, synth_pair, write_flow


def _cmd_synth(args) -> None:
    case = synth_pair(args.seed, args.size, args.max_disp, args.sigma)
    save_case(case, args.out)
    print(f"wrote synthetic case to {args.out} ({args.size}^3, max |gt| = {case.gt_flow.norm().max():.3f})")


def _cmd_train(args) -> None:
    cfg = load_config(args.config)
    overrides = {}
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if args.checkpoint is not None:
        overrides["checkpoint_path"] = args.checkpoint
    if args.trace is not None:
        overrides["trace_path"] = args.trace
    cfg = cfg.replace(**overrides)
    result = train(cfg, resume=args.resume, log=print)
    print(f"finished {len(result.trace)} iterations in {result.seconds:.1f}s; checkpoint {result.checkpoint}")


def _cmd_register(args) -> None:
    moving = read_volume(args.moving, kind="intensity")
    fixed = read_volume(args.fixed, kind="intensity")
    with threadpool_limits(limits=args.threads):
        net = None if args.ckpt == IDENTITY else load_model(args.ckpt)[0]
        flow, diags = register(net, moving, fixed)
    write_flow(flow, args.out_flow, fixed.spacing)
    print(f"wrote {args.out_flow}")
    if args.diagnostics:
        report = format_diagnostics(diags)
        path = Path(str(args.out_flow) + ".diag.txt")
        path.write_text(report, encoding="utf-8")
        print(report, end="")
        print(f"wrote {path}")


def _cmd_eval(args) -> None:
    results = evaluate(args.ckpt, args.cases, args.csv, threads=args.threads)
    print(format_table(results), end="")
    if args.csv:
        print(f"wrote {args.csv}")


def _cmd_ablate(args) -> None:
    cfg = load_config(args.config)
    spec_path = Path(args.sweep)
    spec = spec_path.read_text(encoding="utf-8") if spec_path.is_file() else args.sweep
    ablate(cfg, spec, args.out, log=print)
    print(Path(args.out).read_text(encoding="utf-8"), end="")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sacreg", description="Deformable registration with spatial-awareness convolution blocks.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic moving/fixed pair with labels and ground-truth flow")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=48)
    s.add_argument("--max-disp", type=float, default=4.0)
    s.add_argument("--sigma", type=float, default=6.0, help="smoothing of the random displacement field")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_synth)

    s = sub.add_parser("train", help="train from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--iterations", type=int, help="override the configured iteration count")
    s.add_argument("--checkpoint", help="override checkpoint.path")
    s.add_argument("--trace", help="override log.trace")
    s.set_defaults(func=_cmd_train)

    s = sub.add_parser("register", help="register one pair with a checkpoint")
    s.add_argument("--ckpt", required=True, help=f"checkpoint path or '{IDENTITY}'")
    s.add_argument("--moving", required=True)
    s.add_argument("--fixed", required=True)
    s.add_argument("--out-flow", required=True)
    s.add_argument("--diagnostics", action="store_true", help="write per-scale flow statistics next to the flow")
    s.add_argument("--threads", type=int, default=1)
    s.set_defaults(func=_cmd_register)

    s = sub.add_parser("eval", help="score a checkpoint over case directories")
    s.add_argument("--ckpt", required=True, help=f"checkpoint path or '{IDENTITY}'")
    s.add_argument("--cases", required=True)
    s.add_argument("--csv")
    s.add_argument("--threads", type=int, default=1)
    s.set_defaults(func=_cmd_eval)

    s = sub.add_parser("ablate", help="run a configuration sweep and write a markdown table")
    s.add_argument("--config", required=True)
    s.add_argument("--sweep", default="", help="sweep spec string or file (e.g. 'grid')")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ContractError, DataError, OSError, FloatingPointError) as exc:
        print(f"sacreg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
