"""Command-line surface: ``micod generate|train|eval|report``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 runtime error.
Config files are line-oriented ``key = value`` with ``#`` comments.
"""

from __future__ import annotations

import argparse
import glob
import os
import sys

from .harness import DataError, EvalPlan, UsageError, cmd_eval, cmd_generate, cmd_report, parse_policy_id
from .scenario import DatasetParseError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


def parse_config_file(path: str) -> dict[str, str]:
    if not os.path.exists(path):
        raise DataError(f"config file not found: {path}")
    out: dict[str, str] = {}
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{line_no}: expected key = value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="micod", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesize benchmark datasets")
    g.add_argument("--config", default=None,
                   help="key = value file supplying defaults for the flags below")
    g.add_argument("--level", choices=["L1", "L2", "L3", "L4"])
    g.add_argument("--bin", type=int, choices=[400, 550, 800])
    g.add_argument("--count", type=int, default=None)
    g.add_argument("--scale", type=float, default=None)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", default=None)

    e = sub.add_parser("eval", help="evaluate policies over datasets and seeds")
    e.add_argument("--config", default=None,
                   help="key = value file supplying defaults for the flags below")
    e.add_argument("--policy", action="append", default=None,
                   help="policy id; repeatable (greedy, km, gs, fixed_delay(k), "
                        "d2sn(ckpt), d2sn_h-(ckpt))")
    e.add_argument("--dataset", action="append", default=None,
                   help="dataset file or glob; repeatable")
    e.add_argument("--seeds", type=int, default=None, help="number of seeds")
    e.add_argument("--seed", type=int, default=None, help="first seed")
    e.add_argument("--mode", choices=["APD", "TDI"], default=None)
    e.add_argument("--out", default=None, help="results CSV path")

    r = sub.add_parser("report", help="render tables from a results CSV")
    r.add_argument("--results", required=True)
    r.add_argument("--out", default=None)

    t = sub.add_parser("train", help="train the dispatch policy")
    t.add_argument("--config", required=True, help="key = value training config")
    t.add_argument("--out", required=True, help="checkpoint/curves directory")
    t.add_argument("--resume", action="store_true")
    return parser


def _run_train(args) -> int:
    from .scenario import load
    from .trainer import TrainConfig, train

    raw = parse_config_file(args.config)
    dataset_field = raw.pop("datasets", None)
    if not dataset_field:
        raise DataError(f"{args.config}: missing 'datasets' entry")
    paths: list[str] = []
    for pattern in dataset_field.split(","):
        hits = sorted(glob.glob(pattern.strip()))
        if not hits:
            raise DataError(f"no datasets match {pattern.strip()!r}")
        paths.extend(hits)
    reward_mode = raw.pop("reward_mode", None)

    kwargs = {}
    types = {
        "gamma": float, "lam": float, "clip_eps": float, "lr": float,
        "epochs": int, "minibatch_size": int, "iterations": int,
        "episodes_per_iter": int, "entropy_coef": float, "grad_clip": float,
        "normalize_adv": lambda v: v.lower() in ("1", "true", "yes"),
        "critic_target": str, "update_sample_size": int,
        "force_exhaustive": lambda v: v.lower() in ("1", "true", "yes"),
        "seed": int,
    }
    for key, value in raw.items():
        if key not in types:
            raise DataError(f"{args.config}: unknown key {key!r}")
        try:
            kwargs[key] = types[key](value)
        except ValueError as exc:
            raise DataError(f"{args.config}: bad value for {key}: {exc}") from exc

    cfg = TrainConfig(**kwargs)
    datasets = [load(p) for p in paths]

    from .d2sn import D2snConfig, init_params
    from .env import global_info_dim
    net = D2snConfig(g_dim=global_info_dim(datasets[0].config))
    params = init_params(net, seed=cfg.seed)
    print(f"model parameters: {params.param_count}")

    def progress(row, diag):
        print(f"iter {row['iteration']:4d}  episodes {row['episodes']:5d}  "
              f"mean_reward {row['mean_reward']:10.3f}  cr {row['cr']:.3f}  "
              f"ratio {diag.get('mean_ratio', 1.0):.3f}  "
              f"clip {diag.get('clip_fraction', 0.0):.2f}")

    result = train(cfg, datasets, out_dir=args.out, reward_mode=reward_mode,
                   net_config=net, params=params, resume=args.resume,
                   progress=progress)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"curves: {os.path.join(args.out, 'curves.csv')}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK

    try:
        if args.command == "generate":
            cfgd = parse_config_file(args.config) if args.config else {}
            level = args.level or cfgd.get("level")
            cap = args.bin if args.bin is not None else int(cfgd.get("bin", 0))
            count = args.count if args.count is not None else int(cfgd.get("count", 1))
            scale = args.scale if args.scale is not None else float(cfgd.get("scale", 1.0))
            seed = args.seed if args.seed is not None else int(cfgd.get("seed", 0))
            out = args.out or cfgd.get("out")
            if not level or not cap or not out:
                raise UsageError("generate needs --level, --bin and --out "
                                 "(flags or config entries)")
            if scale <= 0 or scale > 1:
                raise UsageError(f"--scale must be in (0, 1], got {scale}")
            paths = cmd_generate(level, cap, count, scale, seed, out)
            from .scenario import classify, load
            for path in paths:
                ds = load(path)
                cell = classify(ds)
                print(f"{path}: drivers={len(ds.drivers)} orders={len(ds.orders)} "
                      f"ratio={ds.ds_ratio():.3f} cell={cell or 'unclassified'}")
        elif args.command == "eval":
            cfgd = parse_config_file(args.config) if args.config else {}
            policy_ids = args.policy or [p.strip() for p in
                                         cfgd.get("policies", "").split(",") if p.strip()]
            dataset_args = args.dataset or [p.strip() for p in
                                            cfgd.get("datasets", "").split(",") if p.strip()]
            n_seeds = args.seeds if args.seeds is not None else int(cfgd.get("seeds", 30))
            first_seed = args.seed if args.seed is not None else int(cfgd.get("seed", 0))
            mode = args.mode or cfgd.get("mode", "TDI")
            out = args.out or cfgd.get("out")
            if not policy_ids or not dataset_args or not out:
                raise UsageError("eval needs --policy, --dataset and --out "
                                 "(flags or config entries)")
            policies = [parse_policy_id(p) for p in policy_ids]
            paths: list[str] = []
            for pattern in dataset_args:
                hits = sorted(glob.glob(pattern))
                if hits:
                    paths.extend(hits)
                else:
                    paths.append(pattern)  # surfaced as DataError by cmd_eval
            plan = EvalPlan(policies=policies, dataset_paths=paths,
                            seeds=list(range(first_seed, first_seed + n_seeds)),
                            reward_mode=mode)
            rows = cmd_eval(plan, out)
            n_runs = sum(1 for r in rows if r["kind"] == "run")
            print(f"wrote {n_runs} runs (+aggregates) to {out}")
        elif args.command == "report":
            text = cmd_report(args.results, args.out)
            print(text, end="")
        elif args.command == "train":
            return _run_train(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DatasetParseError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
