"""Command-line experiment runner: ``pyranet {gen-data,train,eval,probe,count}``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("pyranet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# shared flag groups


def _add_model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--prm", choices=["none", "A", "B", "Bstar", "C", "D"], help="block type (none = residual)")
    g.add_argument("--levels", type=int, help="pyramid levels C")
    g.add_argument("--decay", type=int, help="scale decay M (lowest level 2^-M)")
    g.add_argument("--branch-ch", type=int, help="channels of the pyramid branches")
    g.add_argument("--channels", type=int, help="feature width of the hourglass")
    g.add_argument("--stacks", type=int)
    g.add_argument("--depth", type=int, help="hourglass depth (chain length for probes)")
    g.add_argument("--variance-fix", action="store_true", default=None,
                   help="BN-ReLU-conv1x1 instead of identity on the upper skip branch")


def _add_init_flags(p):
    p.add_argument("--init", choices=["fixed", "xavier", "msr", "branch"])
    p.add_argument("--init-compromise", choices=["paper", "balanced", "forward", "backward"])
    p.add_argument("--alpha", type=float, choices=[0.5, 1.0], help="E[f'] of the activation")


def _model_from_flags(args, base):
    from .hourglass import HourglassConfig
    from .prm import PRMConfig

    d = base.to_dict()
    for flag, key in (("channels", "channels"), ("stacks", "stacks"), ("depth", "depth")):
        if getattr(args, flag, None) is not None:
            d[key] = getattr(args, flag)
    if getattr(args, "variance_fix", None):
        d["variance_fix"] = True
    model = HourglassConfig.from_dict(d)
    prm = getattr(args, "prm", None)
    block = model.block
    if prm == "none":
        block = None
    elif prm is not None:
        block = PRMConfig(variant=prm, branch_channels=max(1, model.channels // 4)) if block is None \
            else replace(block, variant=prm, weight_shared=prm == "Bstar")
    if block is not None:
        upd = {}
        if args.levels is not None:
            upd["levels"] = args.levels
        if args.decay is not None:
            upd["decay"] = args.decay
        if args.branch_ch is not None:
            upd["branch_channels"] = args.branch_ch
        block = replace(block, **upd)
    return replace(model, block=block)


def _init_from_flags(args, base):
    from .init import InitScheme

    kw = {"kind": base.kind, "alpha": base.alpha, "fixed_std": base.fixed_std, "compromise": base.compromise}
    if args.init is not None:
        kw["kind"] = args.init
    if args.init_compromise is not None:
        kw["compromise"] = args.init_compromise
    if args.alpha is not None:
        kw["alpha"] = args.alpha
    return InitScheme(**kw)


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1))


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    from .seeds import derive_seed
    from .synth import FigureSpec, generate, save_dataset

    if args.count < 1:
        raise UsageError("--count must be >= 1")
    if args.val_count < 0:
        raise UsageError("--val-count must be >= 0")
    spec = FigureSpec(foreshortening=(args.min_foreshortening, 1.0)) if args.min_foreshortening else FigureSpec()
    seed = derive_seed(args.seed, "data")
    splits = {"train": generate(args.count, spec, seed, start=0)}
    if args.val_count:
        splits["val"] = generate(args.val_count, spec, seed, start=args.count)
    save_dataset(args.out, splits)
    print(f"wrote {args.count} train + {args.val_count} val samples to {args.out}")
    return EXIT_OK


def _experiment_from_args(args):
    from .experiment import ExperimentConfig

    base = ExperimentConfig()
    if args.config:
        cfg_path = Path(args.config)
        if not cfg_path.is_file():
            raise UsageError(f"config file {cfg_path} does not exist")
        base = ExperimentConfig.from_dict(json.loads(cfg_path.read_text()))
    model = _model_from_flags(args, base.model)
    init = _init_from_flags(args, base.init)
    opt = base.optimization
    upd = {}
    for flag, key in (("epochs", "epochs"), ("batch", "batch_size"), ("lr", "lr")):
        if getattr(args, flag) is not None:
            upd[key] = getattr(args, flag)
    if args.lr_drops is not None:
        upd["lr_drops"] = tuple(int(v) for v in args.lr_drops.split(",") if v)
    if args.no_augment:
        upd["augment"] = False
    opt = replace(opt, **upd)
    data = base.data
    if args.data is not None:
        data = replace(data, path=args.data)
    if args.train_count is not None:
        data = replace(data, train_count=args.train_count)
    if args.val_count is not None:
        data = replace(data, val_count=args.val_count)
    seed = base.seed if args.seed is None else args.seed
    out = args.out or base.out or "runs/latest"
    return replace(base, model=model, init=init, optimization=opt, data=data, out=out).with_seed(seed)


def cmd_train(args) -> int:
    from .experiment import run_experiment

    cfg = _experiment_from_args(args)
    if cfg.data.path is not None and not (Path(cfg.data.path) / "index.json").is_file():
        print(f"error: dataset path {cfg.data.path} does not exist or has no index.json", file=sys.stderr)
        return EXIT_RUNTIME
    res = run_experiment(cfg, progress=lambda r: print(
        f"epoch {r['epoch']:3d}  lr {r['lr']:.1e}  val PCK {r['val_pck_mean']:.4f}", flush=True))
    print(f"final val PCK@{cfg.optimization.pck_threshold} {res.final_pck:.4f}; "
          f"run directory {cfg.out} ({res.seconds:.0f} s)")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .experiment import ExperimentConfig, make_datasets
    from .synth import JOINT_NAMES, load_dataset
    from .train import evaluate, load_checkpoint

    graph, params, state, meta = load_checkpoint(args.checkpoint)
    if args.data is not None:
        root = Path(args.data)
        if not (root / "index.json").is_file():
            print(f"error: dataset path {root} does not exist or has no index.json", file=sys.stderr)
            return EXIT_RUNTIME
        splits = load_dataset(root)
        if args.split not in splits:
            raise UsageError(f"dataset has no split {args.split!r}; available: {sorted(splits)}")
        data = splits[args.split]
    else:
        cfg_file = Path(args.checkpoint) / "config.json"
        if not cfg_file.is_file():
            raise UsageError("--data is required when the checkpoint directory has no config.json")
        cfg = ExperimentConfig.from_dict(json.loads(cfg_file.read_text()))
        tr, va = make_datasets(cfg.data, cfg.seed)
        data = {"train": tr, "val": va}.get(args.split)
        if data is None:
            raise UsageError("--split must be train or val when the data come from the run config")
    per_joint, mean = evaluate(graph, params, state, data, args.threshold)
    names = JOINT_NAMES if len(per_joint) == len(JOINT_NAMES) else [f"j{k}" for k in range(len(per_joint))]
    rep = {"split": args.split, "samples": len(data), "threshold": args.threshold,
           "pck": {n: float(v) for n, v in zip(names, per_joint)}, "mean_pck": mean}
    text = json.dumps(rep, indent=1)
    print(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    return EXIT_OK


def cmd_probe(args) -> int:
    from .experiment import versions
    from .hourglass import HourglassConfig
    from .init import InitScheme
    from .variance import (build_branch_chain, hourglass_skipsum_variance, probe_forward_variance, report,
                           simulate_residual_chain)

    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    default_kind = "branch" if args.scenario == "chain" else "msr"
    scheme = _init_from_flags(args, InitScheme(default_kind))
    if args.scenario == "chain":
        depth = args.depth or 16
        g = build_branch_chain(depth, args.width, args.branches)
        sums = [n.id for n in g.nodes if n.name.endswith(".sum")]
        tr = probe_forward_variance(g, scheme, args.trials, args.seed, batch=args.batch, nodes=sums)
        tr = tr.select(sums, depths=range(1, depth + 1))
    elif args.scenario == "residual":
        depth = args.depth or 20
        resets = [int(v) for v in args.reset_at.split(",") if v] if args.reset_at else []
        tr = simulate_residual_chain(depth, resets, args.trials, args.seed, channels=args.width, scheme=scheme)
    else:
        model = _model_from_flags(args, HourglassConfig(channels=16))
        tr = hourglass_skipsum_variance(model, args.trials, args.seed, scheme=scheme)
    csv_text = report(tr, "csv")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "variance.csv").write_text(csv_text)
        (out / "variance.json").write_text(report(tr, "json"))
        _write_json(out / "config.json", {"command": "probe", **{k: v for k, v in vars(args).items()
                                                                  if k != "func"},
                                          "init_resolved": scheme.__dict__, "versions": versions()})
    sys.stdout.write(csv_text)
    return EXIT_OK


def count_table(channels: int = 256, branch: int = 28, levels: int = 4, decay: int = 1, size: int = 64):
    """Rows (name, params, params/residual - 1, MACs, MACs/residual - 1) for residual and every variant."""
    from .prm import VARIANTS, PRMConfig, ResidualUnitConfig, build_prm, build_residual_unit, flop_count, param_count

    shape = (1, channels, size, size)
    base = build_residual_unit(ResidualUnitConfig(channels, channels, channels // 2))
    bp, bf = param_count(base), flop_count(base, shape)
    rows = [("residual", bp, 0.0, bf, 0.0)]
    for v in VARIANTS:
        g = build_prm(PRMConfig(v, levels, decay, branch, channels, channels))
        p, f = param_count(g), flop_count(g, shape)
        rows.append((v, p, p / bp - 1, f, f / bf - 1))
    return rows


def cmd_count(args) -> int:
    rows = count_table(args.channels or 256, args.branch_ch or 28, args.levels or 4, args.decay or 1, args.size)
    lines = [f"{'module':<10}{'params':>12}{'param_ratio-1':>15}{'MACs':>16}{'MAC_ratio-1':>13}"]
    for name, p, pr, f, fr in rows:
        lines.append(f"{name:<10}{p:>12d}{pr:>15.4f}{f:>16d}{fr:>13.4f}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "counts.txt").write_text(text)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pyranet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render a synthetic stick-figure dataset")
    g.add_argument("--count", type=int, required=True, help="training samples")
    g.add_argument("--val-count", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--min-foreshortening", type=float, help="lower end of the limb scale range (default 0.4)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a stacked hourglass")
    t.add_argument("--config", help="JSON experiment config; flags override it")
    _add_model_flags(t)
    _add_init_flags(t)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-drops", help="comma-separated epochs where the rate drops x10")
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--data", help="dataset directory from gen-data (default: generate from --seed)")
    t.add_argument("--train-count", type=int)
    t.add_argument("--val-count", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="run directory (default runs/latest)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="PCK of a checkpoint")
    e.add_argument("--checkpoint", required=True, help="run directory")
    e.add_argument("--data", help="dataset directory (default: regenerate from the run config)")
    e.add_argument("--split", default="val")
    e.add_argument("--threshold", type=float, default=0.2)
    e.add_argument("--out", help="write the JSON report here")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("probe", help="Monte-Carlo variance probes")
    pr.add_argument("--scenario", required=True, choices=["chain", "residual", "hourglass-sum"])
    _add_model_flags(pr)
    _add_init_flags(pr)
    pr.add_argument("--trials", type=int, default=100)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--width", type=int, default=None, help="chain width / residual channels")
    pr.add_argument("--branches", type=int, default=2)
    pr.add_argument("--batch", type=int, default=16)
    pr.add_argument("--reset-at", help="comma-separated unit positions with a reset skip")
    pr.add_argument("--out", help="directory for variance.csv and variance.json")
    pr.set_defaults(func=cmd_probe)

    c = sub.add_parser("count", help="parameter and MAC table of residual unit vs PRM variants")
    c.add_argument("--channels", type=int)
    c.add_argument("--branch-ch", type=int)
    c.add_argument("--levels", type=int)
    c.add_argument("--decay", type=int)
    c.add_argument("--size", type=int, default=64)
    c.add_argument("--out", help="directory for counts.txt")
    c.set_defaults(func=cmd_count)
    return p


def _limit_threads():
    n = os.environ.get("PYRANET_THREADS")
    if not n:
        return None
    try:
        k = int(n)
    except ValueError:
        raise UsageError(f"PYRANET_THREADS must be an integer, got {n!r}") from None
    if k < 1:
        raise UsageError("PYRANET_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=k)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command == "probe" and args.width is None:
            args.width = 64 if args.scenario == "chain" else 16
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        limiter = _limit_threads()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.unregister()
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as e:  # runtime failures map to exit code 2
        log.debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
