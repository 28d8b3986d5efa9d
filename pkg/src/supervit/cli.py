"""Command-line entry point: ``supervit {train,eval,profile,cascade,select}``.

Tables go to stdout as CSV unless ``--output`` is given, in which case the
CSV is written there and a PNG figure with the same stem is rendered next
to it.  Failures print one JSON line ``{"error": ..., "message": ...}`` to
stderr and exit with status 1 (2 for usage errors).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import numerics as nx
from . import plotting
from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_datasets, load_run_config
from .model import ConfigError, ModelConfig, SubnetConfig, init_params, predict
from .profiler import cost_table, deit_config, model_macs, throughput_bench
from .scheduler import BudgetPolicy, CascadePolicy, default_cascade, select_for_budget, sweep_threshold
from .training import train

PROFILE_HEADER = ["model", "grid", "rate", "gmacs", "img_per_s", "params", "config_hash"]
EVAL_HEADER = ["grid", "rate", "accuracy", "gmacs", "config_hash"]
SWEEP_HEADER = ["tau", "mean_gmacs", "accuracy", "config_hash"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit(rows: list[dict], header: list[str], output: str | None, figure=None) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: r.get(k, "") for k in header})
    if output is None:
        sys.stdout.write(buf.getvalue())
        return
    Path(output).parent.mkdir(parents=True, exist_ok=True)
    Path(output).write_text(buf.getvalue())
    if figure is not None:
        figure(rows, plotting.figure_path(output))


def _fmt_rate(r: float) -> str:
    return f"{r:.1f}" if round(r, 1) == r else f"{r:g}"


def _parse_grid(text: str, mc: ModelConfig) -> int:
    side = int(text.lower().split("x")[0])
    if side not in mc.grids:
        raise ConfigError(f"grid {text} not among {mc.grids}")
    return mc.grids.index(side) + 1


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


# -- subcommands -----------------------------------------------------------

def cmd_train(args) -> int:
    rc = load_run_config(args.config)
    if args.output_dir:
        rc.output_dir = args.output_dir
    out = Path(rc.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = rc.config_hash()
    (out / "config.json").write_text(json.dumps(rc.to_dict(), indent=2, sort_keys=True))
    train_ds, val_ds = load_datasets(rc)
    metrics = out / "metrics.jsonl"
    metrics.write_text("")
    meta = {"config_hash": chash}

    def on_epoch(epoch, params, records):
        with metrics.open("a") as fh:
            for r in records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
        save_checkpoint(params, out / "last.ckpt", {**meta, "epoch": epoch})

    with nx.precision(rc.train.precision):
        result = train(rc.model, rc.train, train_ds.images, train_ds.labels,
                       val_ds.images, val_ds.labels, on_epoch=on_epoch,
                       extra={"config_hash": chash})
    save_checkpoint(result.params, out / "final.ckpt", {**meta, "epoch": rc.train.epochs})
    if result.records:
        plotting.plot_training(result.records, out / "training.png")
    final = [r for r in result.records if r["epoch"] == rc.train.epochs]
    print(json.dumps({"config_hash": chash, "steps": result.steps, "output_dir": str(out),
                      "final": [{"grid": r["grid"], "rate": r["rate"], "accuracy": r["accuracy"]}
                                for r in final]}))
    return 0


def cmd_eval(args) -> int:
    rc = load_run_config(args.config)
    params = load_checkpoint(args.checkpoint)
    mc = params.config
    if mc.to_dict() != rc.model.to_dict():
        raise ConfigError("checkpoint model config differs from --config model section")
    _, val = load_datasets(rc)
    if args.all or args.grid is None:
        subnets = mc.subnets()
    else:
        if args.rate is None:
            raise UsageError("--grid needs --rate")
        subnets = [SubnetConfig(_parse_grid(args.grid, mc), args.rate)]
        mc.index_of(subnets[0])
    chash = rc.config_hash()
    rows = []
    for sc in subnets:
        acc = float(np.mean(predict(val.images, sc, params).argmax(1) == val.labels))
        rows.append({"grid": f"{mc.grids[sc.grid_index - 1]}x{mc.grids[sc.grid_index - 1]}",
                     "rate": _fmt_rate(sc.keep_rate), "accuracy": f"{acc:.4f}",
                     "gmacs": f"{model_macs(mc, sc).gmacs:.6f}", "config_hash": chash})
    _emit(rows, EVAL_HEADER, args.output, plotting.plot_accuracy_cost)
    return 0


def cmd_profile(args) -> int:
    drops = tuple(int(b) for b in args.drop_blocks.split(",")) if args.drop_blocks else None
    override = {"drop_blocks": drops} if drops else {}
    rc = load_run_config(args.config) if args.config else None
    chash = rc.config_hash() if rc else ""
    rows, reports = [], []
    if args.paper_dims:
        for name, variant in (("deit_s", "small"), ("deit_t", "tiny")):
            mc = deit_config(variant, **override)
            for rep in cost_table(mc).values():
                rows.append(_profile_row(name, rep, None, chash))
                reports.append({"model": name, **rep.to_dict()})
    else:
        if rc is None:
            raise UsageError("profile needs --config unless --paper-dims is given")
        mc = ModelConfig(**{**rc.model.to_dict(), **override}).validate()
        params = load_checkpoint(args.checkpoint) if args.checkpoint else init_params(mc, rc.train.seed)
        params.config = mc
        x = np.random.default_rng(0).random((args.bench_batch, mc.image_side, mc.image_side,
                                             mc.channels)).astype(np.float32)
        for sc, rep in cost_table(mc).items():
            ips = None
            if args.bench_repeats > 0:
                tr = throughput_bench(lambda: predict(x, sc, params, args.bench_batch),
                                      args.bench_batch, args.bench_repeats)
                ips = tr.images_per_second
            rows.append(_profile_row("config", rep, ips, chash))
            reports.append({"model": "config", **rep.to_dict(),
                            "images_per_second": ips})
    if args.json:
        for r in reports:
            sys.stdout.write(json.dumps({**r, "config_hash": chash}, sort_keys=True) + "\n")
        if args.output:
            _emit(rows, PROFILE_HEADER, args.output, plotting.plot_cost_table)
    else:
        _emit(rows, PROFILE_HEADER, args.output, plotting.plot_cost_table)
    return 0


def _profile_row(name, rep, ips, chash):
    return {"model": name, "grid": f"{rep.grid}x{rep.grid}", "rate": _fmt_rate(rep.keep_rate),
            "gmacs": f"{rep.gmacs:.2f}" if rep.gmacs >= 0.1 else f"{rep.gmacs:.4f}",
            "img_per_s": "" if ips is None else f"{ips:.1f}",
            "params": rep.parameters, "config_hash": chash}


def _parse_stages(text: str, mc: ModelConfig) -> list[SubnetConfig]:
    stages = []
    for part in text.split(","):
        grid, rate = part.split("@")
        sc = SubnetConfig(_parse_grid(grid, mc), float(rate))
        mc.index_of(sc)
        stages.append(sc)
    return stages


def cmd_cascade(args) -> int:
    rc = load_run_config(args.config)
    params = load_checkpoint(args.checkpoint)
    mc = params.config
    taus = _floats(args.sweep)
    if args.stages:
        policy = CascadePolicy(_parse_stages(args.stages, mc), 0.0)
    else:
        policy = default_cascade(mc, 0.0)
    policy.validate(mc)
    _, val = load_datasets(rc)
    points = sweep_threshold(val.images, val.labels, policy, taus, params)
    chash = rc.config_hash()
    rows = [{"tau": f"{p.threshold:g}", "mean_gmacs": f"{p.mean_gmacs:.6f}",
             "accuracy": f"{p.accuracy:.4f}", "config_hash": chash} for p in points]
    _emit(rows, SWEEP_HEADER, args.output, plotting.plot_sweep)
    return 0


def read_tables(path) -> tuple[dict, dict]:
    """Accuracy and cost (MACs) tables keyed by (grid side, rate) from a CSV
    with grid, rate, accuracy, gmacs columns."""
    acc, cost = {}, {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"grid", "rate", "accuracy", "gmacs"}
        if not need <= set(reader.fieldnames or ()):
            raise ConfigError(f"tables file needs columns {sorted(need)}")
        for row in reader:
            key = (int(row["grid"].lower().split("x")[0]), float(row["rate"]))
            acc[key] = float(row["accuracy"])
            cost[key] = float(row["gmacs"]) * 1e9
    return acc, cost


def cmd_select(args) -> int:
    acc, cost = read_tables(args.tables)
    sel = select_for_budget(BudgetPolicy(args.budget * 1e9, acc, cost))
    if not sel.feasible:
        out = {"feasible": False, "budget_gmacs": args.budget,
               "min_gmacs": min(cost.values()) / 1e9}
    else:
        side, rate = sel.subnet
        out = {"feasible": True, "grid": f"{side}x{side}", "rate": rate,
               "accuracy": sel.accuracy, "gmacs": sel.macs / 1e9, "budget_gmacs": args.budget}
    print(json.dumps(out, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="supervit", description="Multi-granularity ViT supernet toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train the supernet")
    t.add_argument("--config", required=True)
    t.add_argument("--output-dir", default=None, help="override config output_dir")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="per-subnet validation accuracy")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--grid", default=None, help="grid side, e.g. 8 or 8x8")
    e.add_argument("--rate", type=float, default=None)
    e.add_argument("--all", action="store_true")
    e.add_argument("--output", default=None)
    e.set_defaults(fn=cmd_eval)

    pr = sub.add_parser("profile", help="analytic MACs and measured throughput")
    pr.add_argument("--config", default=None)
    pr.add_argument("--paper-dims", action="store_true", help="DeiT-S and DeiT-T dimensions")
    pr.add_argument("--table", action="store_true", help="CSV table (the default)")
    pr.add_argument("--json", action="store_true", help="CostReport JSON lines instead of CSV")
    pr.add_argument("--drop-blocks", default=None, help="override, e.g. 3,6,9")
    pr.add_argument("--checkpoint", default=None)
    pr.add_argument("--bench-batch", type=int, default=64)
    pr.add_argument("--bench-repeats", type=int, default=5, help="0 skips timing")
    pr.add_argument("--output", default=None)
    pr.set_defaults(fn=cmd_profile)

    c = sub.add_parser("cascade", help="early-exit threshold sweep")
    c.add_argument("--config", required=True)
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--sweep", required=True, help="comma-separated thresholds, ascending")
    c.add_argument("--stages", default=None, help="e.g. 4x4@0.5,8x8@0.7")
    c.add_argument("--output", default=None)
    c.set_defaults(fn=cmd_cascade)

    s = sub.add_parser("select", help="best subnet under a MAC budget")
    s.add_argument("--budget", type=float, required=True, help="GMACs")
    s.add_argument("--tables", required=True, help="CSV with grid,rate,accuracy,gmacs")
    s.set_defaults(fn=cmd_select)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        sys.stderr.write(json.dumps({"error": "UsageError", "message": str(exc)}) + "\n")
        return 2
    except Exception as exc:  # noqa: BLE001 - single-line report for every failure
        msg = " ".join(str(exc).split())
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": msg}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
