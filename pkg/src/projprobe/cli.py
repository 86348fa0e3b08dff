"""``projprobe`` command line.

    projprobe train  --config world.yaml
    projprobe attack --config whitebox.yaml [--dry-run]
    projprobe sweep  --config sweeps.yaml --jobs 4
    projprobe report --config whitebox.yaml        (or --records path.jsonl)
    projprobe verify [--config ...]

Output root: ``--out``, else ``$PROJPROBE_OUT``, else ``./out``. Each config
owns ``<root>/<name>/{records.jsonl, cells/, tables/, plots/, checkpoints/}``.
Exit codes: 0 success, 2 configuration/validation, 3 runtime/numerical.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import torch

from . import invariants, reports
from .config import EncoderDef, HeadDef, SurrogateDef, TargetDef, load_config
from .errors import (ConfigurationError, NumericalError, ProjProbeError, RegistryLookupError,
                     TrainingError, ValidationError)
from .harness import (aggregate_runs, append_records, load_dataset, read_records,
                      run_attack_experiment)
from .registry import Registry
from .surrogates import train_compressed_surrogate, train_uncompressed_surrogate
from .training import pretrain_encoder, pretrain_head, train_target

log = logging.getLogger("projprobe")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def exit_code_for(exc) -> int:
    if isinstance(exc, (NumericalError, TrainingError)):
        return EXIT_RUNTIME
    if isinstance(exc, (ConfigurationError, ValidationError, RegistryLookupError)):
        return EXIT_CONFIG
    return EXIT_RUNTIME


def out_root(args) -> Path:
    return Path(args.out or os.environ.get("PROJPROBE_OUT") or "out")


class Layout:
    def __init__(self, root: Path, cfg):
        self.dir = root / cfg.name
        reg = cfg.registry
        self.registry = (self.dir / "checkpoints" if reg is None
                         else Path(reg) if Path(reg).is_absolute() else root / reg)
        self.records = self.dir / "records.jsonl"
        self.cells = self.dir / "cells"
        self.tables = self.dir / "tables"
        self.plots = self.dir / "plots"


# --- train --------------------------------------------------------------------

def _model_hash(defn, registry) -> str:
    deps = [getattr(defn, k, None) for k in ("encoder", "head")]
    blob = {"def": defn.model_dump(mode="json"),
            "deps": {d: registry.entry(d)["sha256"] for d in deps if d}}
    return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()[:16]


def train_one(defn, registry, cfg):
    data = load_dataset(cfg.data.train_ref())
    prov = {"config": cfg.name, "definition": defn.model_dump(mode="json"),
            "train_data": cfg.data.train.model_dump()}
    chash = _model_hash(defn, registry)
    if isinstance(defn, EncoderDef):
        module = pretrain_encoder(data, defn.steps, defn.lr, seed=defn.seed)
        return registry.add(defn.id, module, "encoder", provenance=prov, seed=defn.seed,
                            config_hash=chash)
    encoder = registry.encoder(defn.encoder)
    if isinstance(defn, TargetDef):
        model = train_target(encoder, data, defn.projector, defn.head_variant, defn.steps, defn.lr,
                             seed=defn.seed, projector_cfg=defn.projector_config)
        return registry.add(defn.id, model, defn.role, head_variant=defn.head_variant,
                            encoder_id=defn.encoder, provenance=prov, seed=defn.seed,
                            config_hash=chash)
    if isinstance(defn, HeadDef):
        head = pretrain_head(encoder, data, defn.head_variant, defn.steps, defn.lr, seed=defn.seed)
        return registry.add(defn.id, head, "head", head_variant=defn.head_variant,
                            encoder_id=defn.encoder, provenance=prov, seed=defn.seed,
                            config_hash=chash)
    assert isinstance(defn, SurrogateDef)
    head_entry = registry.entry(defn.head)
    head = registry.head(defn.head)
    train_cfg = defn.train_config(head_entry["head_variant"])
    trainer = (train_compressed_surrogate if defn.projector == "compressed"
               else train_uncompressed_surrogate)
    history = {}
    projector = trainer(data, train_cfg, encoder, head, defn.projector_config, history=history)
    prov["final_losses"] = {k: v[-1] for k, v in history.items()
                            if isinstance(v, list) and v}
    if "itm_accuracy" in history:
        prov["itm_accuracy"] = history["itm_accuracy"]
    return registry.add(defn.id, projector, "surrogate", head_variant=head_entry["head_variant"],
                        encoder_id=defn.encoder, provenance=prov, seed=defn.seed,
                        config_hash=chash)


def cmd_train(args, cfg, layout):
    models = cfg.models
    if args.seed is not None:
        models = [m.model_copy(update={"seed": args.seed}) for m in models]
    if args.dry_run:
        for m in models:
            print(json.dumps(m.model_dump(mode="json"), sort_keys=True))
        return EXIT_OK
    registry = Registry(layout.registry)
    for defn in models:
        chash = _model_hash(defn, registry)
        if defn.id in registry and not args.overwrite:
            if registry.entry(defn.id)["config_hash"] == chash:
                print(f"{defn.id}: up to date, skipped")
                continue
            raise ConfigurationError(
                f"{defn.id} exists in {layout.registry} with another configuration; "
                "pass --overwrite to retrain")
        entry = train_one(defn, registry, cfg)
        print(f"{defn.id}: trained ({entry['role']}, sha256 {entry['sha256'][:12]})")
    return EXIT_OK


# --- attack / sweep -----------------------------------------------------------

def _run_cell(spec, registry_root):
    torch.set_num_threads(1)
    registry = Registry(registry_root)
    try:
        return run_attack_experiment(spec, registry), None
    except ProjProbeError as exc:
        return getattr(exc, "records", []), exc


def _drop_cells(path, hashes):
    """Remove the lines of the given cells (used by --overwrite)."""
    if not path.exists():
        return
    keep = [line for line in path.read_text().splitlines()
            if line.strip() and json.loads(line).get("config_hash") not in hashes]
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("".join(line + "\n" for line in keep))
    os.replace(tmp, path)


def run_cells(specs, layout, args):
    """Run (or skip) every cell, appending records as cells finish. Returns
    (records of this invocation, first error)."""
    existing, _ = read_records(layout.records)
    done = {}
    for r in existing:
        if r.status == "ok":
            done.setdefault(r.config_hash, set()).add(r.seed)
    todo, skipped = [], []
    for spec in specs:
        h = spec.cell_hash()
        if not args.overwrite and set(spec.seeds) <= done.get(h, set()):
            skipped.append(spec)
        else:
            todo.append(spec)
    _drop_cells(layout.records, {s.cell_hash() for s in todo})
    for spec in skipped:
        print(f"{spec.name} ({spec.cell_hash()}): records present, skipped")
    results, first_error = [], None

    def finish(spec, records, exc):
        nonlocal first_error
        cell_path = layout.cells / f"{spec.name}-{spec.cell_hash()}.jsonl"
        cell_path.parent.mkdir(parents=True, exist_ok=True)
        cell_path.write_text("".join(r.to_json() + "\n" for r in records))
        append_records(layout.records, records)
        results.extend(records)
        if exc is not None and first_error is None:
            first_error = exc

    if args.jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [(s, pool.submit(_run_cell, s, str(layout.registry))) for s in todo]
            for spec, fut in futures:
                finish(spec, *fut.result())
    else:
        for spec in todo:
            finish(spec, *_run_cell(spec, str(layout.registry)))
    return results, first_error


def _attack_like(specs, layout, args):
    if args.dry_run:
        for spec in specs:
            print(json.dumps(spec.to_dict(), sort_keys=True))
        return EXIT_OK
    records, error = run_cells(specs, layout, args)
    ok = [r for r in records if r.status == "ok"]
    if ok:
        print(reports.format_summary(aggregate_runs(ok)))
    print(f"{len(records)} records appended to {layout.records}")
    if error is not None:
        raise error
    return EXIT_OK


def cmd_attack(args, cfg, layout):
    return _attack_like(cfg.experiment_specs(args.seed), layout, args)


def cmd_sweep(args, cfg, layout):
    specs = [s for _, _, group in cfg.sweep_specs(args.seed) for s in group]
    return _attack_like(specs, layout, args)


# --- report / verify ----------------------------------------------------------

def cmd_report(args, cfg, layout):
    if args.records:
        path = Path(args.records)
        base = Path(args.out) if args.out else path.parent
        tables, plots = base / "tables", base / "plots"
    else:
        path, tables, plots = layout.records, layout.tables, layout.plots
    records, malformed = read_records(path)
    if not records:
        log.warning("no records in %s; writing empty tables", path)
    written = reports.write_tables(records, tables, args.tolerance)
    written.update({f"plot_{k}": v for k, v in reports.write_plots(records, plots,
                                                                   args.tolerance).items()})
    for name, p in sorted(written.items()):
        print(f"{name}: {p}")
    ok = [r for r in records if r.status == "ok"]
    if ok:
        print(reports.format_summary(aggregate_runs(ok)))
    failed = len(records) - len(ok)
    print(f"{len(records)} records read, {failed} failed, {malformed} malformed lines skipped")
    if malformed:
        log.warning("%d malformed lines skipped", malformed)
    return EXIT_OK


def cmd_verify(args, cfg, layout):
    results = invariants.run_all(layout.registry if layout else None,
                                 layout.records if layout else None)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_RUNTIME


COMMANDS = {"train": cmd_train, "attack": cmd_attack, "sweep": cmd_sweep,
            "report": cmd_report, "verify": cmd_verify}


def build_parser():
    parser = argparse.ArgumentParser(prog="projprobe", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=name in ("train", "attack", "sweep"),
                       help="experiment YAML document")
        p.add_argument("--out", help="output root (overrides $PROJPROBE_OUT)")
        p.add_argument("--jobs", type=int, default=1, help="concurrent cells")
        p.add_argument("--seed", type=int, help="root seed override")
        p.add_argument("--dry-run", action="store_true", help="print resolved specs and exit")
        p.add_argument("--overwrite", action="store_true",
                       help="recompute existing outputs instead of skipping them")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "report":
            p.add_argument("--records", help="JSONL file to report on instead of the config's")
            p.add_argument("--tolerance", type=float, default=1.0, help="verdict tolerance")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigurationError("--jobs must be >= 1")
        cfg = load_config(args.config) if args.config else None
        if cfg is None and args.command == "report" and not args.records:
            raise ConfigurationError("report needs --config or --records")
        layout = Layout(out_root(args), cfg) if cfg else None
        torch.set_num_threads(max(1, torch.get_num_threads() // args.jobs))
        return COMMANDS[args.command](args, cfg, layout)
    except ProjProbeError as exc:
        code = exit_code_for(exc)
        print(f"error: {exc}", file=sys.stderr)
        return code
    except (ArithmeticError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
