"""Command-line surface: data generation, training, oracles, benchmarks.

Subcommands: gen-data, train, eval, bench, oracle-check, align-grid,
dump-rpb. JSON config files carry the full run description; flags override
file values.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import bench as bench_mod
from . import checks
from .errors import ConfigError, ParseError, SpanError
from .model import ABLATIONS, load_checkpoint
from .sparse import Rect, align_rect, patchify_rect
from .synth import SyntheticTaskSpec, write_dataset
from .train import RunConfig, build_identifier, evaluate, load_split, run_training


def _load_json(path):
    with open(path) as fh:
        return json.load(fh)


def cmd_gen_data(args) -> int:
    spec_dict = _load_json(args.config) if args.config else {}
    if args.task:
        spec_dict["task"] = args.task
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    spec = SyntheticTaskSpec.from_dict(spec_dict)
    manifest = write_dataset(spec, args.out)
    print(f"wrote {manifest}")
    return 0


def _run_config_from_args(args) -> RunConfig:
    doc = _load_json(args.config) if args.config else {}
    if args.data:
        doc["data_dir"] = args.data
    if args.out:
        doc["out_dir"] = args.out
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.precision:
        doc["precision"] = args.precision
    if "data_dir" not in doc or "out_dir" not in doc:
        raise ConfigError("data_dir and out_dir are required (config file or flags)")
    if "model" not in doc:
        raise ConfigError("model config is required")
    run = RunConfig.from_dict(doc)
    if args.ablation:
        for name in args.ablation:
            run.model = run.model.with_ablation(name)
    return run


def cmd_train(args) -> int:
    run = _run_config_from_args(args)
    results = run_training(run)
    for k, v in results["metrics"].items():
        print(f"{k}={v:.6f}")
    print(f"wrote {Path(run.out_dir) / 'metrics.txt'}")
    return 0


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    run = RunConfig.from_dict(_load_json(run_dir / "config.json"))
    values = load_checkpoint(run_dir / "checkpoint.spnc")
    from .model import init_params

    store = init_params(run.model, seed=run.seed, dtype=run.dtype)
    store.load_values({k: v.astype(store.dtype) for k, v in values.items()})
    split = args.split or run.eval_split
    task, samples, _ = load_split(args.data or run.data_dir, split)
    metrics = evaluate(task, samples, run.model, store)
    doc = {"config": run.to_dict(), "build": build_identifier(),
           "split": split, "metrics": metrics}
    lines = [f"{k}={v:.6f}" for k, v in metrics.items()]
    body = "\n".join(lines) + "\n\n" + json.dumps(doc, indent=2, sort_keys=True) + "\n"
    print(body, end="")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / f"eval_{split}.txt").write_text(body)
    return 0


def cmd_oracle_check(args) -> int:
    if args.trials == 0:
        print("warning: trials=0, all checks pass vacuously")
    results = checks.run_all(seed=args.seed or 0, trials=args.trials,
                             inject_fault=args.inject_fault)
    failed = False
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name}: max_error={r.max_error:.3e} tolerance={r.tolerance:.0e}")
        failed |= not r.passed
    return 1 if failed else 0


def cmd_bench(args) -> int:
    occupancies = [float(x) for x in args.occupancies.split(",")]
    sizes = [int(x) for x in args.sizes.split(",")]
    rows = bench_mod.run_bench(occupancies, sizes, repeats=args.repeats,
                               seed=args.seed or 0, dim=args.dim)
    out = Path(args.out or "bench.csv")
    bench_mod.write_csv(out, rows)
    for r in rows:
        print(f"occ={r.occupancy:.2f} size={r.size} n={r.n} "
              f"sparse={r.sparse_forward_ms:.2f}ms dense={r.dense_oracle_ms:.2f}ms "
              f"sparse_peak={r.sparse_peak_bytes}B dense_embed={r.dense_embed_bytes}B")
    print(f"wrote {out}")
    return 0


def cmd_align_grid(args) -> int:
    out_lines = []
    with open(args.rects) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 4:
                raise ParseError(f"line {lineno}: expected 4 fields, got {len(parts)}")
            try:
                sx, sy, w, h = (int(p) for p in parts)
            except ValueError as exc:
                raise ParseError(f"line {lineno}: {exc}") from exc
            rect = align_rect(Rect(sx, sy, w, h), args.step)
            for x, y in patchify_rect(rect, args.step):
                out_lines.append(f"{x} {y}")
    text = "\n".join(out_lines) + ("\n" if out_lines else "")
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out} ({len(out_lines)} coords)")
    else:
        print(text, end="")
    return 0


def cmd_dump_rpb(args) -> int:
    run_dir = Path(args.run)
    values = load_checkpoint(run_dir / "checkpoint.spnc")
    rpb_names = [n for n in values if n.endswith(".rpb")]
    if args.list:
        for n in rpb_names:
            print(n)
        return 0
    if args.param not in values:
        print(f"error: no parameter {args.param!r}; available: {rpb_names}",
              file=sys.stderr)
        return 1
    table = values[args.param]
    side = (table.shape[0] + 1) // 2
    out = Path(args.out or "rpb.csv")
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dx", "dy", "head", "value"])
        for ix in range(table.shape[0]):
            for iy in range(table.shape[1]):
                for h in range(table.shape[2]):
                    writer.writerow([ix - (side - 1), iy - (side - 1), h,
                                     f"{table[ix, iy, h]:.8g}"])
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="span",
        description="sparse rulebook conv/attention engine and SPAN models")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config", help="SyntheticTaskSpec JSON")
    p.add_argument("--task", choices=["classification", "segmentation"])
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train SPAN-MIL or SPAN-UNet")
    p.add_argument("--config", help="RunConfig JSON")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--precision", choices=["f32", "f64"])
    p.add_argument("--ablation", action="append", choices=list(ABLATIONS))
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a finished run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--data")
    p.add_argument("--split")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("oracle-check", help="oracle equivalence + gradient checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--inject-fault", action="store_true")
    p.set_defaults(fn=cmd_oracle_check)

    p = sub.add_parser("bench", help="sparse vs dense occupancy benchmark")
    p.add_argument("--occupancies", default="0.05,0.2,1.0")
    p.add_argument("--sizes", default="128")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("align-grid", help="align pixel rects and emit grid coords")
    p.add_argument("rects", help="text file: start_x start_y w h per line")
    p.add_argument("--step", type=int, default=224)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_align_grid)

    p = sub.add_parser("dump-rpb", help="export a block's RPB table as CSV")
    p.add_argument("--run", required=True)
    p.add_argument("--param")
    p.add_argument("--list", action="store_true")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_dump_rpb)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except SpanError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
