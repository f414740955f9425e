"""Command-line front end: run, sweep, compare, dump-features, gradcheck, partition-report."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import gradcheck
from . import learning as L
from . import params as P
from .config import ConfigError, Experiment, ExperimentConfig
from .data import DataError
from .federation import RoundReport, count_comm_params, metrics_csv
from .tensor import NumericError

log = logging.getLogger("fedrir")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

COMPARE_VARIANTS = [
    ("fedrir", {"federation.algorithm": "fedrir", "train.ablation": "none"}),
    ("fedavg", {"federation.algorithm": "fedavg", "train.ablation": "none"}),
    ("local", {"federation.algorithm": "local", "train.ablation": "none"}),
    ("fedrir_r0", {"federation.algorithm": "fedrir", "train.ablation": "r0"}),
    ("fedrir_no_mcsl", {"federation.algorithm": "fedrir", "train.ablation": "no_mcsl"}),
    ("fedrir_no_id", {"federation.algorithm": "fedrir", "train.ablation": "no_id"}),
]


# ---------------------------------------------------------------------------
# helpers


def summary_dict(cfg: ExperimentConfig, exp: Experiment, reports: Sequence[RoundReport], wall: float) -> dict:
    last = reports[-1] if reports else None
    return {
        "config": cfg.as_dict(),
        "comm_params_per_client": count_comm_params(exp.federation.dims, exp.federation.algorithm),
        "rounds": [
            {
                "round": r.round,
                "participants": r.participants,
                "mean_test_acc": r.mean_test_acc,
                "weighted_test_acc": r.weighted_test_acc,
                "uplink": r.uplink,
                "downlink": r.downlink,
            }
            for r in reports
        ],
        "final_weighted_test_acc": last.weighted_test_acc if last else None,
        "final_mean_test_acc": last.mean_test_acc if last else None,
        "wall_clock_sec": wall,
    }


def execute(cfg: ExperimentConfig, out: Path | None = None) -> dict:
    """Run one experiment; write artifacts when ``out`` is given. Returns the summary."""
    t0 = time.perf_counter()
    exp = Experiment.build(cfg)
    result = exp.run()
    summary = summary_dict(cfg, exp, result.reports, time.perf_counter() - t0)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(metrics_csv(result.reports))
        (out / "config.echo").write_text(cfg.echo())
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        ckpt = out / "checkpoints"
        ckpt.mkdir(exist_ok=True)
        for stem, ps in result.federation.checkpoints().items():
            P.save(ps, ckpt / f"{stem}.frir")
    return summary


def _final(cfg_text: str) -> tuple[float, float, int]:
    cfg = ExperimentConfig.from_text(cfg_text)
    s = execute(cfg)
    return s["final_weighted_test_acc"], s["final_mean_test_acc"], s["comm_params_per_client"]


def _map(fn, items: list, jobs: int) -> list:
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def _mean_std(xs: Sequence[float]) -> tuple[float, float]:
    xs = [x for x in xs if x is not None and not math.isnan(x)]
    if not xs:
        return float("nan"), float("nan")
    return statistics.fmean(xs), (statistics.stdev(xs) if len(xs) > 1 else 0.0)


def _base_config(args) -> ExperimentConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"federation.seed={args.seed}")
    return ExperimentConfig.load(args.config, overrides)


# ---------------------------------------------------------------------------
# subcommands


def cmd_run(args) -> int:
    cfg = _base_config(args)
    if args.jobs:
        cfg = cfg.override("federation.workers", str(args.jobs))
    s = execute(cfg, Path(args.out))
    print(f"final weighted test accuracy: {s['final_weighted_test_acc']}")
    return EXIT_OK


SWEEP_COLUMNS = ["row", "param", "value", "seed", "weighted_acc", "mean_acc", "weighted_std", "mean_std"]


def sweep_rows(cfg: ExperimentConfig, param: str, values: Sequence[str], seeds: int, jobs: int = 1) -> list[list]:
    cfg.override(param, values[0])  # validates the path before any work
    tasks, keys = [], []
    for v in values:
        for i in range(seeds):
            seed = cfg.seed + i
            c = cfg.override(param, v).override("federation.seed", str(seed))
            tasks.append(c.echo())
            keys.append((v, seed))
    results = _map(_final, tasks, jobs)
    rows: list[list] = []
    for (v, seed), (w, m, _) in zip(keys, results):
        rows.append(["run", param, v, seed, w, m, "", ""])
    for v in values:
        ws = [r[4] for r in rows if r[0] == "run" and r[2] == v]
        ms = [r[5] for r in rows if r[0] == "run" and r[2] == v]
        (wm, wsd), (mm, msd) = _mean_std(ws), _mean_std(ms)
        rows.append(["summary", param, v, "", wm, mm, wsd, msd])
    return rows


def cmd_sweep(args) -> int:
    cfg = _base_config(args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    for v in values:
        if not math.isfinite(float(v)):
            raise ConfigError(f"sweep value {v!r} is not finite")
    rows = sweep_rows(cfg, args.param, values, args.seeds, args.jobs or 1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "sweep.csv", SWEEP_COLUMNS, rows)
    (out / "config.echo").write_text(cfg.echo())
    for r in rows:
        if r[0] == "summary":
            print(f"{r[1]}={r[2]}: {r[4]:.4f} ± {r[6]:.4f}")
    return EXIT_OK


COMPARE_COLUMNS = ["variant", "algorithm", "ablation", "seeds", "weighted_acc_mean", "weighted_acc_std",
                   "mean_acc_mean", "mean_acc_std", "comm_params"]


def compare_rows(variants: Sequence[tuple[str, ExperimentConfig]], seeds: int, jobs: int = 1) -> list[list]:
    ref = variants[0][1]
    for name, c in variants[1:]:
        for section in ("data", "partition"):
            if c.section(section) != ref.section(section):
                raise ConfigError(f"variant {name!r}: [{section}] differs from {variants[0][0]!r}")
        if c.seed != ref.seed:
            raise ConfigError(f"variant {name!r}: federation.seed differs from {variants[0][0]!r}")
    tasks = [c.override("federation.seed", str(c.seed + i)).echo() for _, c in variants for i in range(seeds)]
    results = _map(_final, tasks, jobs)
    rows = []
    for j, (name, c) in enumerate(variants):
        chunk = results[j * seeds : (j + 1) * seeds]
        (wm, wsd), (mm, msd) = _mean_std([r[0] for r in chunk]), _mean_std([r[1] for r in chunk])
        rows.append([name, c.get("federation.algorithm"), c.get("train.ablation"), seeds, wm, wsd, mm, msd,
                     chunk[0][2]])
    return rows


def cmd_compare(args) -> int:
    configs = args.config or [None]
    if len(configs) == 1:
        base = ExperimentConfig.load(configs[0], args.set or [])
        variants = [(n, base.with_values(ov)) for n, ov in COMPARE_VARIANTS]
    else:
        variants = []
        for path in configs:
            c = ExperimentConfig.load(path, args.set or [])
            variants.append((Path(path).stem, c))
    rows = compare_rows(variants, args.seeds, args.jobs or 1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "compare.csv", COMPARE_COLUMNS, rows)
    for r in rows:
        print(f"{r[0]:<16} {100 * r[4]:6.2f} ± {100 * r[5]:5.2f}   comm={r[8]}")
    return EXIT_OK


def dump_features(run_dir: Path) -> str:
    cfg = ExperimentConfig.load(run_dir / "config.echo")
    exp = Experiment.build(cfg)
    if exp.federation.algorithm == "fedavg":
        raise ConfigError("fedavg runs have no client-specific features to dump")
    dims = exp.federation.dims
    ckpt = run_dir / "checkpoints"
    server = P.load(ckpt / "server.frir") if (ckpt / "server.frir").exists() else None
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["client_id", "label"] + [f"g{i}" for i in range(dims.k_g)] + [f"cs{i}" for i in range(dims.k_cs)])
    for d in exp.clients:
        stored = P.load(ckpt / f"client_{d.client_id:03d}.frir")
        comps = {}
        for comp in (L.CLIENT_ENCODER, L.GLOBAL_ENCODER):
            expected = L.init_component(comp, dims, np.random.default_rng(0))
            source = server if comp == L.GLOBAL_ENCODER and server is not None else stored
            got = source.with_prefix(comp + ".")
            expected.check_manifest(got, f"checkpoint {comp} for client {d.client_id}")
            comps[comp] = got
        idx = d.indices
        f_g, f_cs = L.features(comps, exp.dataset.samples[idx])
        for label, g, cs in zip(exp.dataset.labels[idx], f_g, f_cs):
            w.writerow([d.client_id, int(label)] + [repr(float(v)) for v in g] + [repr(float(v)) for v in cs])
    return buf.getvalue()


def cmd_dump_features(args) -> int:
    text = dump_features(Path(args.run_dir))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    worst = gradcheck.run(args.seed if args.seed is not None else 0, args.instances)
    failed = False
    for kind, err in worst.items():
        ok = err < gradcheck.TOLERANCE
        failed |= not ok
        print(f"{kind:<12} max rel err {err:.3e}  {'PASS' if ok else 'FAIL'}")
    return EXIT_NUMERIC if failed else EXIT_OK


def partition_report(cfg: ExperimentConfig) -> str:
    ds = cfg.build_dataset()
    clients = cfg.build_clients(ds)
    lines = ["client " + " ".join(f"c{c:<4d}" for c in range(ds.num_classes)) + "  train  test"]
    for d in clients:
        lines.append(
            f"{d.client_id:<6d} " + " ".join(f"{int(n):<5d}" for n in d.histogram)
            + f"  {len(d.train_idx):<5d}  {len(d.test_idx)}"
        )
    return "\n".join(lines) + "\n"


def cmd_partition_report(args) -> int:
    sys.stdout.write(partition_report(_base_config(args)))
    return EXIT_OK


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(["" if isinstance(v, float) and math.isnan(v) else (repr(v) if isinstance(v, float) else v)
                        for v in r])


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedrir", description="FedRIR federated learning simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="sectioned key-value config file")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        sp.add_argument("--seed", type=int, help="master seed (overrides federation.seed)")
        sp.add_argument("--jobs", type=int, default=0, help="worker threads (run) or processes (sweep, compare)")
        if out:
            sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("run", help="train one configuration")
    common(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="sweep one config value over seeds")
    common(sp)
    sp.add_argument("--param", required=True, help="config path, e.g. train.mask_ratio")
    sp.add_argument("--values", required=True, help="comma-separated values")
    sp.add_argument("--seeds", type=int, default=3)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("compare", help="compare algorithms and ablations over seeds")
    sp.add_argument("--config", action="append", help="config per variant; one config expands to the default set")
    sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    sp.add_argument("--seeds", type=int, default=3)
    sp.add_argument("--jobs", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("dump-features", help="export f_g and f_cs per sample from a finished run")
    sp.add_argument("--run-dir", required=True, help="output directory of a previous 'run'")
    sp.add_argument("--out", required=True, help="CSV path")
    sp.set_defaults(func=cmd_dump_features)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--instances", type=int, default=20)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("partition-report", help="print per-client class histograms")
    common(sp, out=False)
    sp.set_defaults(func=cmd_partition_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, P.CheckpointError, P.ManifestError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"invalid setup: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
