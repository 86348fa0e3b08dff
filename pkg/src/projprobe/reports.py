"""CSV tables and plots from RunRecords.

Table families (``tables/``):

* ``cells.csv``     every aggregated cell, columns ``harness.CSV_COLUMNS``
* ``whitebox.csv``  per target and method: Clean / L_VE / L_VLP with mu and
  sigma, the delta statistic and the security verdict
* ``scenarios.csv`` gray-box (transfer / scratch) cells
* ``sweep_<axis>.csv`` one row per swept value

Plots (``plots/``): accuracy against beta, k and pool factor, and grouped
VE-vs-VLP bars per target.
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .harness import AXES, ReportTable, aggregate_runs, security_verdict  # noqa: E402

log = logging.getLogger(__name__)

WHITEBOX_COLUMNS = ("target", "target_projector", "method", "n_seeds", "clean_mu", "ve_mu",
                    "ve_sigma", "vlp_mu", "vlp_sigma", "delta", "verdict")
SCENARIO_COLUMNS = ("experiment", "target", "target_projector", "scenario", "loss", "method",
                    "n_seeds", "clean_mu", "adv_mu", "adv_sigma", "delta", "flagged")
SWEEP_COLUMNS = ("experiment", "target", "scenario", "loss", "axis", "value", "n_output_tokens",
                 "n_seeds", "clean_mu", "adv_mu", "adv_sigma", "adv_var", "delta", "flagged")


def _write(path, columns, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def whitebox_rows(records, tolerance=1.0):
    """One row per (target, method) having both a VE and a VLP white-box cell."""
    ok = [r for r in records if r.status == "ok" and r.scenario == "white_box" and r.axis is None]
    groups = {}
    for r in ok:
        if r.loss in ("ve", "vlp"):
            groups.setdefault((r.target, r.method), {}).setdefault(r.loss, []).append(r)
    rows = []
    for (target, method), by_loss in groups.items():
        if set(by_loss) != {"ve", "vlp"}:
            continue
        ve_cell = aggregate_runs(by_loss["ve"]).rows
        vlp_cell = aggregate_runs(by_loss["vlp"]).rows
        if len(ve_cell) != 1 or len(vlp_cell) != 1:
            log.warning("white-box %s/%s has several cells per loss; skipped", target, method)
            continue
        verdict = security_verdict(by_loss["ve"], by_loss["vlp"], tolerance)
        ve, vlp = ve_cell[0], vlp_cell[0]
        rows.append(dict(target=target, target_projector=ve.target_projector, method=method,
                         n_seeds=min(ve.n_seeds, vlp.n_seeds), clean_mu=ve.clean_mu,
                         ve_mu=ve.adv_mu, ve_sigma=ve.adv_sigma, vlp_mu=vlp.adv_mu,
                         vlp_sigma=vlp.adv_sigma, delta=verdict.delta, verdict=verdict.label))
    return rows


def _sweep_rows(table: ReportTable, axis):
    return [dict(r.__dict__) for r in table.rows if r.axis == axis]


def write_tables(records, out_dir, tolerance=1.0) -> dict:
    """Write every table family; returns {family: path}. Empty input still
    writes header-only files."""
    out_dir = Path(out_dir)
    table = aggregate_runs([r for r in records if r.status == "ok"])
    paths = {"cells": out_dir / "cells.csv"}
    table.to_csv(paths["cells"])
    paths["whitebox"] = out_dir / "whitebox.csv"
    _write(paths["whitebox"], WHITEBOX_COLUMNS, whitebox_rows(records, tolerance))
    paths["scenarios"] = out_dir / "scenarios.csv"
    _write(paths["scenarios"], SCENARIO_COLUMNS,
           [dict(r.__dict__) for r in table.rows
            if r.scenario in ("transfer", "scratch") and r.axis is None])
    for axis in AXES:
        rows = _sweep_rows(table, axis)
        if rows:
            paths[f"sweep_{axis}"] = out_dir / f"sweep_{axis}.csv"
            _write(paths[f"sweep_{axis}"], SWEEP_COLUMNS, rows)
    return paths


def _numeric(v):
    try:
        return float(v)
    except (TypeError, ValueError):
        return None


def plot_sweep(table: ReportTable, axis, path):
    rows = _sweep_rows(table, axis)
    if not rows:
        return None
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    by_exp = {}
    for r in rows:
        by_exp.setdefault((r["experiment"], r["target"]), []).append(r)
    for (exp, target), group in by_exp.items():
        xs = [_numeric(r["value"]) for r in group]
        labels = [str(r["value"]) for r in group]
        if any(x is None for x in xs):
            xs = list(range(len(group)))
            ax.set_xticks(xs, labels, rotation=30)
        ax.errorbar(xs, [r["adv_mu"] for r in group], yerr=[r["adv_sigma"] for r in group],
                    marker="o", capsize=3, label=f"{exp} ({target})")
        ax.axhline(group[0]["clean_mu"], ls=":", lw=1, color="grey")
    ax.set_xlabel(axis)
    ax.set_ylabel("accuracy under attack (%)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_whitebox(rows, path):
    if not rows:
        return None
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    width = 0.27
    for i, r in enumerate(rows):
        ax.bar(i - width, r["clean_mu"], width, color="#999999", label="clean" if i == 0 else None)
        ax.bar(i, r["ve_mu"], width, yerr=r["ve_sigma"], color="#4c72b0",
               label="VE attack" if i == 0 else None)
        ax.bar(i + width, r["vlp_mu"], width, yerr=r["vlp_sigma"], color="#dd8452",
               label="VLP attack" if i == 0 else None)
    ax.set_xticks(range(len(rows)), [f"{r['target']}\n{r['method']}" for r in rows], fontsize=7)
    ax.set_ylabel("accuracy (%)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def write_plots(records, out_dir, tolerance=1.0) -> dict:
    out_dir = Path(out_dir)
    table = aggregate_runs([r for r in records if r.status == "ok"])
    paths = {}
    for axis in ("beta", "k", "pool_factor", "task_flags"):
        p = plot_sweep(table, axis, out_dir / f"sweep_{axis}.png")
        if p:
            paths[f"sweep_{axis}"] = p
    p = plot_whitebox(whitebox_rows(records, tolerance), out_dir / "whitebox.png")
    if p:
        paths["whitebox"] = p
    return paths


def format_summary(table: ReportTable) -> str:
    """Human-readable mu/sigma line per cell."""
    lines = []
    for r in table.rows:
        tag = f" {r.axis}={r.value}" if r.axis else ""
        flag = "  [sigma>0.25]" if r.flagged else ""
        lines.append(f"{r.experiment}{tag} [{r.scenario}/{r.loss}/{r.method}] target={r.target} "
                     f"clean={r.clean_mu:.2f} adv={r.adv_mu:.2f}+-{r.adv_sigma:.2f} "
                     f"(n={r.n_seeds}){flag}")
    return "\n".join(lines)
