"""Command-line front-end: ingest, train, generate, evaluate, make-constraints."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from collections import Counter
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import figures, io, metrics
from .config import RunConfig, load_config
from .core import TrajectoryDataset
from .encode import build_vocabulary
from .generate import (
    EmpiricalDurations,
    GenConfig,
    RetriesExhausted,
    forcible_insert,
    generate_trajectory,
    make_constraints,
)
from .ingest import IngestStats, build_dataset
from .model import init_lora, init_model
from .train import TrainConfig, train


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_ingest(args, cfg: RunConfig) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stats = IngestStats()
    with open(args.gps_csv, "r", encoding="utf-8") as f:
        ds = build_dataset(
            f,
            cfg.grid,
            cfg.timespec,
            radius_km=cfg.ingest.radius_km,
            min_minutes=cfg.ingest.min_minutes,
            min_visits=cfg.ingest.min_visits,
            stats=stats,
        )
    io.write_dataset(ds, out_dir / "trajectories.jsonl")
    _write_json(out_dir / "stats.json", {"stats": stats.as_dict(), "config": cfg.echo()})
    print(f"wrote {len(ds)} trajectories to {out_dir / 'trajectories.jsonl'}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    ds = io.read_dataset(args.data)
    vocab = build_vocabulary(ds.grid, ds.timespec)
    model_config = cfg.model_config(vocab.size)
    tc = TrainConfig(
        epochs=args.epochs if args.epochs is not None else cfg.train.epochs,
        batch_size=cfg.train.batch_size,
        learning_rate=args.learning_rate
        if args.learning_rate is not None
        else cfg.train.learning_rate,
        seed=args.seed if args.seed is not None else cfg.seed,
        permute_mode=args.permute,
        mode=args.mode,
    )
    params = init_model(model_config, seed=tc.seed)
    adapter = None
    if args.init_checkpoint:
        params, model_config, vocab2, adapter, _ = ckpt.load_checkpoint(
            Path(args.init_checkpoint).read_bytes()
        )
        if (vocab2.slots, vocab2.n_cells) != (vocab.slots, vocab.n_cells):
            print("error: init checkpoint vocabulary does not match the dataset", file=sys.stderr)
            return 2
    if tc.mode == "lora-only" and adapter is None:
        adapter = init_lora(
            model_config,
            rank=cfg.lora.rank,
            alpha=cfg.lora.alpha,
            dropout=cfg.lora.dropout,
            seed=tc.seed,
        )

    params, adapter, history = train(params, model_config, ds, vocab, tc, adapter=adapter)

    durations = EmpiricalDurations.from_dataset(ds)
    train_meta = {
        "train_config": asdict(tc),
        "duration_marginal": {str(k): v for k, v in durations.counts.items()},
        "config_echo": cfg.echo(),
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(ckpt.save_checkpoint(params, model_config, vocab, adapter, train_meta))

    loss_csv = Path(args.loss_csv) if args.loss_csv else out.with_suffix(out.suffix + ".loss.csv")
    with loss_csv.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "loss_nats_per_token"])
        for i, loss in enumerate(history, start=1):
            w.writerow([i, f"{loss:.6f}"])
    final = history[-1] if history else float("nan")
    print(f"trained {tc.epochs} epochs, final loss {final:.4f} nats/token -> {out}")
    return 0


def _load_checkpoint_for_generation(path: str, cfg: RunConfig):
    params, model_config, vocab, adapter, train_meta = ckpt.load_checkpoint(
        Path(path).read_bytes()
    )
    grid, ts = cfg.grid, cfg.timespec
    if vocab.n_cells != grid.n_cells or vocab.slots != ts.slots_per_day:
        raise ValueError(
            "checkpoint vocabulary does not match the configured grid/timespec"
        )
    marginal = (train_meta or {}).get("duration_marginal", {})
    durations = EmpiricalDurations({int(k): v for k, v in marginal.items()})
    return params, model_config, vocab, adapter, durations


def cmd_generate(args, cfg: RunConfig) -> int:
    gc = GenConfig(
        temperature=args.temperature if args.temperature is not None else cfg.generate.temperature,
        max_new_tokens=cfg.generate.max_new_tokens,
        max_retries=args.max_retries if args.max_retries is not None else cfg.generate.max_retries,
        seed=args.seed if args.seed is not None else cfg.seed,
    )
    out = Path(args.out)
    retries = Counter()
    failures = 0
    trajectories = []

    if args.fi:
        base = io.read_dataset(args.fi)
        sets = io.read_constraints(args.constraints)
        durations = EmpiricalDurations.from_dataset(base)
        for i, cs in enumerate(sets):
            rng = np.random.default_rng([gc.seed, 4, i])
            src = base.trajectories[i % len(base.trajectories)]
            trajectories.append(forcible_insert(src, cs, durations, rng, cfg.timespec))
        satisfaction = 1.0
    else:
        params, model_config, vocab, adapter, durations = _load_checkpoint_for_generation(
            args.checkpoint, cfg
        )
        if args.constraints:
            jobs = [(i, cs) for i, cs in enumerate(io.read_constraints(args.constraints))]
        else:
            jobs = [(i, None) for i in range(args.n)]
        satisfied = 0
        for i, cs in jobs:
            rng = np.random.default_rng([gc.seed, 2, i])
            try:
                outcome = generate_trajectory(
                    params, model_config, vocab, gc, rng, cfg.grid, cfg.timespec,
                    adapter=adapter, constraints=cs, durations=durations,
                )
            except RetriesExhausted as e:
                failures += 1
                retries.update(e.reasons)
                print(f"generation {i} failed: {e}", file=sys.stderr)
                continue
            retries["attempts"] += outcome.attempts
            if cs is not None and all(outcome.constraint_report):
                satisfied += 1
            trajectories.append(outcome.trajectory)
        controlled = args.constraints is not None
        satisfaction = (satisfied / len(trajectories)) if controlled and trajectories else 1.0

    ds = TrajectoryDataset(
        trajectories=tuple(trajectories), grid=cfg.grid, timespec=cfg.timespec
    )
    io.write_dataset(ds, out)
    manifest = {
        "seed": gc.seed,
        "temperature": gc.temperature,
        "max_retries": gc.max_retries,
        "generated": len(trajectories),
        "failed": failures,
        "retries": dict(retries),
        "satisfaction_rate": satisfaction,
        "mode": "fi" if args.fi else ("controlled" if args.constraints else "uncontrolled"),
        "config": cfg.echo(),
    }
    _write_json(out.with_suffix(out.suffix + ".manifest.json"), manifest)
    print(f"wrote {len(trajectories)} trajectories to {out} ({failures} failures)")
    return 0 if failures == 0 else 3


def cmd_evaluate(args, cfg: RunConfig) -> int:
    real = io.read_dataset(args.real)
    gen = io.read_dataset(args.generated)
    constraint_locations = None
    if args.constraints:
        sets = io.read_constraints(args.constraints)
        constraint_locations = {c.location for cs in sets for c in cs.constraints}
    report = metrics.evaluate(real, gen, constraint_locations, cfg.metrics)
    report.meta["seed"] = cfg.seed
    report.meta["binning"] = asdict(cfg.metrics)
    _write_json(Path(args.out), report.as_dict())
    if args.csv:
        keys = list(metrics.MetricsReport.JSD_FIELDS) + ["transition_frob", "topk_transition_frob"]
        path = Path(args.csv)
        new = not path.exists()
        with path.open("a", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            if new:
                w.writerow(["real", "generated"] + keys)
            row = [args.real, args.generated] + [getattr(report, k) for k in keys]
            w.writerow(row)
    if args.figures:
        paths = figures.render_report_figures(real, gen, args.figures, cfg.metrics)
        print(f"rendered {len(paths)} figures to {args.figures}")
    d = report.as_dict()
    d.pop("meta")
    print(json.dumps(d, indent=2, sort_keys=True))
    return 0


def cmd_make_constraints(args, cfg: RunConfig) -> int:
    ds = io.read_dataset(args.data)
    if len(ds) == 0:
        print("error: empty dataset", file=sys.stderr)
        return 2
    seed = args.seed if args.seed is not None else cfg.seed
    rng = np.random.default_rng([seed, 3])
    sets = make_constraints(
        ds, rng, n_min=args.n_min, n_max=args.n_max,
        window_halfwidth=args.window, fraction=args.fraction,
    )
    if args.verify:
        from .core import satisfies_all

        by_id = {t.meta: t for t in ds.trajectories}
        for cs in sets:
            ok, _ = satisfies_all(by_id[cs.source_id], cs)
            if not ok:
                print(f"error: constraint set for {cs.source_id} unsatisfied by source",
                      file=sys.stderr)
                return 4
    io.write_constraints(sets, args.out)
    print(f"wrote {len(sets)} constraint sets to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trajforge",
        description="Controllable synthetic mobility trajectory generation and evaluation",
    )
    parser.add_argument("--config", help="TOML config file")
    parser.add_argument("--seed", type=int, default=None, help="master random seed")
    parser.add_argument("--threads", type=int, default=1, help="worker cap (currently single-threaded)")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="GPS CSV -> staypoint trajectories")
    p.add_argument("gps_csv")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="fit the token model on trajectories")
    p.add_argument("--data", required=True, help="trajectory JSONL (with sidecar header)")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--mode", choices=["full", "lora-only"], default="full")
    p.add_argument("--permute", choices=["per-epoch", "once", "off"], default="per-epoch")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--init-checkpoint", help="start from an existing checkpoint")
    p.add_argument("--loss-csv", help="loss history CSV path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample trajectories from a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("-n", type=int, default=None, help="number of uncontrolled samples")
    p.add_argument("--constraints", help="constraint JSONL for controlled generation")
    p.add_argument("--fi", help="baseline JSONL: forcibly insert constraints instead of sampling")
    p.add_argument("--out", required=True)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--max-retries", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="metric suite between real and generated data")
    p.add_argument("real")
    p.add_argument("generated")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--csv", help="append one table row to this CSV")
    p.add_argument("--constraints", help="constraint JSONL for Top-K Transition")
    p.add_argument("--figures", help="directory for comparison figures")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("make-constraints", help="sample constraints from real trajectories")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-min", type=int, default=1)
    p.add_argument("--n-max", type=int, default=3)
    p.add_argument("--window", type=int, default=1)
    p.add_argument("--fraction", type=float, default=1.0)
    p.add_argument("--verify", action="store_true")
    p.set_defaults(func=cmd_make_constraints)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.command == "generate" and not args.fi:
            if args.checkpoint is None:
                raise ValueError("generate requires --checkpoint unless --fi is used")
            if (args.n is None) == (args.constraints is None):
                raise ValueError("generate requires exactly one of -n or --constraints")
        if args.command == "generate" and args.fi and not args.constraints:
            raise ValueError("--fi requires --constraints")
        return args.func(args, cfg)
    except Exception as e:  # structured nonzero exit for scripting
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
