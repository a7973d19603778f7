"""Command-line front end: config ingestion, experiment orchestration, and
plot-ready CSV reports.

Experiments: ``table5``/``table6`` (per-scenario power and saving
statistics), ``power_fig8`` and ``delay_fig9`` (device-count sweeps),
``dynamic_fig10`` (time-varying event density), and ``train_only``
(fit and checkpoint the forecaster).  All outputs land in the chosen
directory together with the echoed effective configuration and a
machine-readable summary with pass/fail bands; ``--check`` turns band
violations into exit status 2.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from .config import ScenarioConfig, dump_config, load_config
from .errors import WusimError
from .sim import SchemeKind, dynamic_density_run, monte_carlo, resolve_t4, train_predictor

EXPERIMENTS = ("table5", "table6", "delay_fig9", "power_fig8", "dynamic_fig10", "train_only")

REPORT_COLUMNS = [
    "scenario_id",
    "scheme",
    "mean_power_mw",
    "power_std",
    "mean_delay_tti",
    "delay_std",
    "eta_vs_wus",
    "eta_vs_drx",
    "p_md_empirical",
    "p_f_empirical",
    "runs",
    "seed",
]

# Reference operating points checked by --check (mean FWuS power in mW with
# +-25 percent bands; mean saving vs the static scheme as fractions).
POWER_BANDS = {1e-5: (21.423 * 0.75, 21.423 * 1.25), 1e-2: (127.723 * 0.75, 127.723 * 1.25)}
ETA_BANDS = {1e-5: (0.10, 0.26), 1e-2: (0.20, 0.36)}

TABLE_SCENARIOS = [
    (1e-5, (0.0, 1.0 - 1e-9)),
    (1e-2, (0.0, 1.0 - 1e-9)),
    (1e-3, (0.0, 0.3)),
    (1e-3, (0.7, 1.0 - 1e-9)),
]


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        if math.isnan(x):
            return ""
        return f"{x:.10g}"
    return str(x)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _scenario_id(lam: float, q_range, n_dev) -> str:
    return f"lam{lam:g}_q{q_range[0]:g}-{q_range[1]:.2g}_n{n_dev}"


def _schemes(selection: str) -> list[SchemeKind]:
    if selection == "all":
        return [SchemeKind.DRX, SchemeKind.WUS, SchemeKind.FWUS]
    return [SchemeKind(selection)]


def _fwus_confusion(mc) -> tuple[float | None, float | None]:
    tp = fp = fn = tn = 0
    for per_scheme in mc.per_run:
        if "fwus" not in per_scheme:
            return None, None
        c = per_scheme["fwus"].confusion
        tp += c["tp"]
        fp += c["fp"]
        fn += c["fn"]
        tn += c["tn"]
    p_md = fn / (tp + fn) if (tp + fn) else 0.0
    p_f = fp / (fp + tn) if (fp + tn) else 0.0
    return p_md, p_f


def run_table_experiment(cfg: ScenarioConfig, schemes, out: Path, check_bands: bool):
    rows = []
    bands = {}
    for lam, q_range in TABLE_SCENARIOS:
        scen = cfg.replace(lambda_e=lam, q_range=q_range,
                           device_count=cfg.device_count if cfg.device_count is not None else 1)
        scen.validate()
        mc = monte_carlo(scen, schemes)
        sid = _scenario_id(lam, q_range, scen.device_count)
        p_md_emp, p_f_emp = _fwus_confusion(mc)
        for scheme in schemes:
            st = mc.stats(scheme.value)
            eta_w = float(mc.eta_vs_wus.mean()) if (scheme is SchemeKind.FWUS and mc.eta_vs_wus is not None) else None
            eta_d = float(mc.eta_vs_drx.mean()) if (scheme is SchemeKind.FWUS and mc.eta_vs_drx is not None) else None
            rows.append(
                [
                    sid,
                    scheme.value,
                    st["power_mean"],
                    st["power_std"],
                    st["delay_mean"],
                    st["delay_std"],
                    eta_w,
                    eta_d,
                    p_md_emp if scheme is SchemeKind.FWUS else None,
                    p_f_emp if scheme is SchemeKind.FWUS else None,
                    mc.runs,
                    cfg.master_seed,
                ]
            )
            if scheme is SchemeKind.FWUS and lam in POWER_BANDS:
                lo, hi = POWER_BANDS[lam]
                bands[f"fwus_power_{sid}"] = {
                    "value": st["power_mean"], "lo": lo, "hi": hi,
                    "pass": bool(lo <= st["power_mean"] <= hi),
                }
            if scheme is SchemeKind.FWUS and eta_w is not None and lam in ETA_BANDS:
                lo, hi = ETA_BANDS[lam]
                bands[f"eta_vs_wus_{sid}"] = {
                    "value": eta_w, "lo": lo, "hi": hi, "pass": bool(lo <= eta_w <= hi),
                }
    _write_csv(out / "report.csv", REPORT_COLUMNS, rows)
    return rows, bands if check_bands else bands


def run_sweep_experiment(cfg: ScenarioConfig, schemes, out: Path, metric: str):
    """Device-count sweeps for the power and delay figures."""
    if metric == "power":
        combos = [(1e-5, (0.0, 1.0 - 1e-9)), (1e-2, (0.0, 1.0 - 1e-9)),
                  (1e-3, (0.0, 0.3)), (1e-3, (0.7, 1.0 - 1e-9))]
    else:
        combos = [(1e-5, cfg.q_range), (1e-3, cfg.q_range), (1e-2, cfg.q_range)]
    rows = []
    bands = {}
    for lam, q_range in combos:
        header = ["device_count"]
        for s in schemes:
            header += [f"{s.value}_mean", f"{s.value}_std"]
        curve = []
        means = {s.value: [] for s in schemes}
        for n_dev in range(1, 11):
            scen = cfg.replace(lambda_e=lam, q_range=q_range, device_count=n_dev)
            scen.validate()
            mc = monte_carlo(scen, schemes)
            line = [n_dev]
            for s in schemes:
                st = mc.stats(s.value)
                if metric == "power":
                    line += [st["power_mean"], st["power_std"]]
                    means[s.value].append(st["power_mean"])
                else:
                    line += [st["delay_mean"], st["delay_std"]]
                    means[s.value].append(st["delay_mean"])
            curve.append(line)
            rows.append([_scenario_id(lam, q_range, n_dev)] + line[1:])
        tag = f"{metric}_lam{lam:g}"
        _write_csv(out / "curves" / f"{tag}.csv", header, curve)
        if metric == "power":
            for s in schemes:
                seq = means[s.value]
                monotone = all(b >= a - 1e-9 for a, b in zip(seq, seq[1:]))
                bands[f"monotone_{s.value}_lam{lam:g}"] = {
                    "value": float(seq[-1] - seq[0]), "lo": 0.0, "hi": math.inf,
                    "pass": bool(monotone),
                }
    _write_csv(out / "report.csv", ["scenario_id"] + [h for h in
               (f"{s.value}_{x}" for s in schemes for x in ("mean", "std"))], rows)
    return rows, bands


def default_dynamic_schedules(cfg: ScenarioConfig):
    levels = [1e-5, 1e-4, 1e-3, 1e-2, 1e-1]
    seg = cfg.horizon // len(levels)
    inc = [(i * seg, lam) for i, lam in enumerate(levels)]
    dec = [(i * seg, lam) for i, lam in enumerate(reversed(levels))]
    return inc, dec


def run_dynamic_experiment(cfg: ScenarioConfig, schemes, out: Path):
    if cfg.device_count is None:
        cfg = cfg.replace(device_count=50)
    inc, dec = default_dynamic_schedules(cfg)
    if cfg.dynamic_schedule:
        inc = [tuple(x) for x in cfg.dynamic_schedule]
        dec = None
    rows = []
    for name, schedule in (("increasing", inc), ("decreasing", dec)):
        if schedule is None:
            continue
        series = {}
        for s in schemes:
            series[s.value] = dynamic_density_run(cfg, schedule, s)
        starts = series[schemes[0].value][:, 0]
        header = ["window_start"] + [s.value for s in schemes]
        curve = [
            [int(starts[i])] + [series[s.value][i, 1] for s in schemes]
            for i in range(len(starts))
        ]
        _write_csv(out / "curves" / f"dynamic_{name}.csv", header, curve)
        rows.append([name, len(starts)])
    _write_csv(out / "report.csv", ["sweep", "windows"], rows)
    return rows, {}


def run_train_only(cfg: ScenarioConfig, out: Path):
    t4 = resolve_t4(cfg)
    model = train_predictor(cfg, t4)
    out.mkdir(parents=True, exist_ok=True)
    if model.is_fitted_:
        model.save(out / "checkpoint.npz")
        hist_rows = [
            [h["epoch"], h["train_rmse"], h["val_rmse"], h["train_rmse_tti"], h["val_rmse_tti"]]
            for h in model.history_
        ]
        _write_csv(out / "curves" / "training_history.csv",
                   ["epoch", "train_rmse", "val_rmse", "train_rmse_tti", "val_rmse_tti"], hist_rows)
        rows = [["trained", len(model.history_), model.margin_]]
    else:
        rows = [["insufficient_data", 0, ""]]
    _write_csv(out / "report.csv", ["status", "epochs", "margin"], rows)
    return rows, {}


def run_experiment(cfg: ScenarioConfig, experiment: str, check_bands: bool = False):
    """Execute one named experiment; returns (rows, bands)."""
    if experiment not in EXPERIMENTS:
        raise WusimError(f"unknown experiment {experiment!r}; choose from {', '.join(EXPERIMENTS)}")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.txt").write_text(dump_config(cfg), encoding="utf-8")
    schemes = _schemes(cfg._scheme_selection) if hasattr(cfg, "_scheme_selection") else _schemes("all")

    if experiment in ("table5", "table6"):
        rows, bands = run_table_experiment(cfg, schemes, out, check_bands)
    elif experiment == "power_fig8":
        rows, bands = run_sweep_experiment(cfg, schemes, out, "power")
    elif experiment == "delay_fig9":
        rows, bands = run_sweep_experiment(cfg, schemes, out, "delay")
    elif experiment == "dynamic_fig10":
        rows, bands = run_dynamic_experiment(cfg, schemes, out)
    else:
        rows, bands = run_train_only(cfg, out)

    summary = {
        "experiment": experiment,
        "bands": bands,
        "all_pass": all(b["pass"] for b in bands.values()) if bands else True,
    }
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return rows, summary


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wusim",
        description="Wake-up signalling experiments: simulation, analytics, forecasting.",
    )
    parser.add_argument("--config", type=str, default=None, help="key=value config file")
    parser.add_argument("--experiment", type=str, required=True, choices=EXPERIMENTS)
    parser.add_argument("--runs", type=int, default=None, help="Monte Carlo runs per scenario")
    parser.add_argument("--seed", type=int, default=None, help="master seed")
    parser.add_argument("--workers", type=int, default=None, help="parallel worker processes")
    parser.add_argument("--out", type=str, default=None, help="output directory")
    parser.add_argument("--check", action="store_true", help="exit 2 on acceptance-band violation")
    parser.add_argument("--scheme", choices=["drx", "wus", "fwus", "all"], default="all")
    parser.add_argument("--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else ScenarioConfig()
        if args.runs is not None:
            cfg = cfg.replace(runs=args.runs)
        if args.seed is not None:
            cfg = cfg.replace(master_seed=args.seed)
        if args.workers is not None:
            cfg = cfg.replace(workers=args.workers)
        out_dir = args.out or os.environ.get("WUSIM_OUT") or cfg.out_dir
        cfg = cfg.replace(out_dir=out_dir)
        cfg.validate()
        cfg._scheme_selection = args.scheme
        rows, summary = run_experiment(cfg, args.experiment, check_bands=args.check)
    except WusimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.verbose:
        for row in rows:
            print(", ".join(_fmt(v) for v in row))
    print(f"wrote {Path(cfg.out_dir) / 'report.csv'}")
    if args.check and not summary["all_pass"]:
        failing = [k for k, v in summary["bands"].items() if not v["pass"]]
        print("band violations: " + ", ".join(failing), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
