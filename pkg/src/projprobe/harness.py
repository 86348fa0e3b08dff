"""Clean/attacked evaluation, multi-seed aggregation and the security verdict.

Accuracy here is plain top-1 accuracy on the closed answer vocabulary, in
percent. It is the toy analogue of a VQA score and is not comparable to
published VQA numbers.

Seeds: every random choice of one run derives from the experiment's root seed
through ``derive_seed(root, label, seed)``, the first four bytes
(little-endian) of ``sha256(f"{root}/{label}/{seed}")``. Labels in use are
``attack`` (initial noise), ``order`` (item order) and ``select`` (surrogate
subset when ``surrogate_selection="seeded"``).
"""

from __future__ import annotations

import csv
import dataclasses
import fcntl
import functools
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .attacks import AttackConfig, run_attack
from .data import GENERIC_PROMPT, N_ANSWERS, make_synthetic_vqa
from .errors import ProjProbeError, ValidationError
from .losses import Objective, TCPConfig
from .surrogates import ScenarioSpec, TrainConfig, resolve_scenario
from .training import predict

SCHEMA_VERSION = 1
SIGMA_FLAG = 0.25
LOSSES = ("ve", "vlp", "tcp")
AXES = ("beta", "k", "pool_factor", "task_flags")
VOLATILE_FIELDS = ("wall_time_s",)


def derive_seed(root: int, label: str, seed) -> int:
    digest = hashlib.sha256(f"{root}/{label}/{seed}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass(frozen=True)
class DatasetRef:
    seed: int = 2
    n: int = 2000
    split: str = "eval"


@functools.lru_cache(maxsize=8)
def load_dataset(ref: DatasetRef):
    return make_synthetic_vqa(ref.seed, ref.n, ref.split)


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    target: str
    scenario: ScenarioSpec
    attack: AttackConfig = AttackConfig()
    loss: str = "vlp"
    tcp: TCPConfig | None = None
    dataset: DatasetRef = DatasetRef()
    seeds: tuple = (0, 1, 2, 3, 4)
    root_seed: int = 0
    instruction: str = "question"
    surrogate_selection: str = "first"
    train_data: DatasetRef | None = None
    axis: str | None = None
    value: object = None
    batch_size: int = 500

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(self.seeds))
        if not self.seeds:
            raise ValidationError("an experiment needs at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValidationError(f"seeds must be distinct, got {list(self.seeds)}")
        if self.loss not in LOSSES:
            raise ValidationError(f"unknown loss {self.loss!r}; choose from {LOSSES}")
        if self.instruction not in ("question", "generic"):
            raise ValidationError("instruction must be 'question' or 'generic'")
        if self.surrogate_selection not in ("first", "seeded"):
            raise ValidationError("surrogate_selection must be 'first' or 'seeded'")
        if self.scenario.target != self.target:
            raise ValidationError("scenario target differs from experiment target")

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def cell_hash(self) -> str:
        d = self.to_dict()
        d.pop("seeds")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


@dataclass
class RunRecord:
    experiment: str
    target: str
    target_projector: str
    scenario: str
    sources: list
    loss: str
    beta: float
    k: int
    method: str
    epsilon: float
    step_size: float
    iterations: int
    axis: str | None
    value: object
    seed: int
    attack_seed: int
    n_items: int
    n_output_tokens: int
    clean_acc: float
    adv_acc: float
    linf_mean: float
    linf_max: float
    l2_mean: float
    target_projector_reads: int
    dataset: str
    config_hash: str
    status: str = "ok"
    error: str | None = None
    wall_time_s: float = 0.0
    schema_version: int = SCHEMA_VERSION

    def to_json(self) -> str:
        return json.dumps(_jsonable(asdict(self)), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        names = {f.name for f in dataclasses.fields(cls)}
        missing = names - set(d) - {"status", "error", "wall_time_s", "schema_version"}
        if missing:
            raise ValidationError(f"record lacks fields {sorted(missing)}")
        return cls(**{k: v for k, v in d.items() if k in names})

    def stable(self) -> dict:
        """Record without run-to-run volatile fields (timings)."""
        d = _jsonable(asdict(self))
        for key in VOLATILE_FIELDS:
            d.pop(key, None)
        return d


def evaluate_clean(model, dataset, images=None) -> float:
    """Top-1 accuracy in percent; ``images`` overrides the dataset's pixels."""
    n_answers = model.head.cfg.n_answers
    if n_answers != N_ANSWERS or int(dataset.answers.max()) >= n_answers:
        raise ValidationError(
            f"model answers {n_answers} classes, dataset needs {N_ANSWERS}")
    x = torch.from_numpy(dataset.images) if images is None else images
    pred = predict(model, x, torch.from_numpy(dataset.questions))
    correct = int((pred == torch.from_numpy(dataset.answers)).sum())
    return 100.0 * correct / len(dataset)


def _tcp_for(spec: ExperimentSpec, k: int) -> TCPConfig | None:
    if spec.loss != "tcp":
        return None
    return spec.tcp if spec.tcp is not None else TCPConfig(beta=0.0, k=k)


def craft_adversarial(spec: ExperimentSpec, bundle, dataset, seed: int):
    """Adversarial images for the whole dataset, in dataset order."""
    x_all = torch.from_numpy(dataset.images)
    q_all = torch.from_numpy(dataset.questions)
    if spec.instruction == "generic":
        q_all = torch.from_numpy(np.tile(GENERIC_PROMPT, (len(dataset), 1)))
    order = np.random.default_rng(derive_seed(spec.root_seed, "order", seed)).permutation(len(dataset))
    attack_seed = derive_seed(spec.root_seed, "attack", seed)
    x_adv = torch.empty_like(x_all)
    linf, l2 = [], []
    tcp = _tcp_for(spec, bundle.k)
    for c, start in enumerate(range(0, len(dataset), spec.batch_size)):
        idx = torch.from_numpy(order[start:start + spec.batch_size])
        x, q = x_all[idx], q_all[idx]
        objective = Objective(spec.loss, bundle, x, q, tcp)
        cfg = replace(spec.attack, seed=derive_seed(attack_seed, "chunk", c))
        result = run_attack(objective, x, cfg)
        x_adv[idx] = result.x_adv
        linf.append(result.linf)
        l2.append(result.l2)
    return x_adv, torch.cat(linf), torch.cat(l2), attack_seed


def _select_sources(spec: ExperimentSpec, seed):
    sc = spec.scenario
    if spec.surrogate_selection != "seeded" or sc.k is None or not sc.sources:
        return sc
    rng = np.random.default_rng(derive_seed(spec.root_seed, "select", seed))
    chosen = [sc.sources[i] for i in sorted(rng.choice(len(sc.sources), size=sc.k, replace=False))]
    return replace(sc, sources=tuple(chosen), k=None)


def run_attack_experiment(spec: ExperimentSpec, registry, dataset=None, on_record=None):
    """One RunRecord per seed. A failing seed yields a record with
    ``status="failed"``; the first error is re-raised after all seeds ran."""
    dataset = dataset if dataset is not None else load_dataset(spec.dataset)
    audit = registry.audit
    with audit.during("eval"):
        target = registry.model(spec.target)
        clean = evaluate_clean(target, dataset)
    entry = registry.entry(spec.target)
    n_tokens = target.projector.output_tokens(target.encoder.n_tokens)
    train_data = load_dataset(spec.train_data) if spec.train_data else None
    records, first_error = [], None
    for seed in spec.seeds:
        t0 = time.perf_counter()
        phase = f"attack:{spec.cell_hash()}:{seed}"
        base = dict(experiment=spec.name, target=spec.target,
                    target_projector=entry["projector_kind"], scenario=spec.scenario.scenario,
                    loss=spec.loss, method=spec.attack.method, epsilon=spec.attack.epsilon,
                    step_size=spec.attack.step_size, iterations=spec.attack.iterations,
                    axis=spec.axis, value=spec.value, seed=seed, n_items=len(dataset),
                    n_output_tokens=n_tokens, clean_acc=clean, dataset=dataset.fingerprint(),
                    config_hash=spec.cell_hash())
        try:
            before = audit.count(spec.target, "projector", phase)
            with audit.during(phase):
                audit.watch(target.projector, spec.target)
                try:
                    bundle = resolve_scenario(_select_sources(spec, seed), registry, train_data)
                    x_adv, linf, l2, attack_seed = craft_adversarial(spec, bundle, dataset, seed)
                finally:
                    audit.unwatch()
            # the phase name repeats when a cell is rerun; count this run only
            reads = audit.count(spec.target, "projector", phase) - before
            with audit.during("eval"):
                adv = evaluate_clean(target, dataset, images=x_adv)
            tcp = _tcp_for(spec, bundle.k)
            rec = RunRecord(**base, sources=list(bundle.tags), beta=tcp.beta if tcp else
                            (1.0 if spec.loss == "ve" else 0.0), k=bundle.k,
                            attack_seed=attack_seed, adv_acc=adv,
                            linf_mean=float(linf.mean()), linf_max=float(linf.max()),
                            l2_mean=float(l2.mean()), target_projector_reads=reads,
                            wall_time_s=time.perf_counter() - t0)
        except ProjProbeError as exc:
            first_error = first_error or exc
            rec = RunRecord(**base, sources=list(spec.scenario.sources), beta=float("nan"), k=0,
                            attack_seed=derive_seed(spec.root_seed, "attack", seed),
                            adv_acc=float("nan"), linf_mean=float("nan"), linf_max=float("nan"),
                            l2_mean=float("nan"), target_projector_reads=-1, status="failed",
                            error=f"{type(exc).__name__}: {exc}",
                            wall_time_s=time.perf_counter() - t0)
        records.append(rec)
        if on_record is not None:
            on_record(rec)
    if first_error is not None:
        first_error.records = records
        raise first_error
    return records


# --- aggregation -------------------------------------------------------------

CSV_COLUMNS = ("scenario", "loss", "axis", "value", "clean_mu", "adv_mu", "adv_sigma", "delta",
               "adv_var", "n_seeds", "adv_min", "adv_max", "flagged", "target",
               "target_projector", "method", "experiment", "n_output_tokens", "config_hash")


@dataclass(frozen=True)
class ReportRow:
    scenario: str
    loss: str
    axis: str | None
    value: object
    clean_mu: float
    adv_mu: float
    adv_sigma: float
    delta: float        # clean_mu - adv_mu: accuracy lost to the attack
    adv_var: float
    n_seeds: int
    adv_min: float
    adv_max: float
    flagged: bool       # adv_sigma above the 0.25 visibility threshold
    target: str
    target_projector: str
    method: str
    experiment: str
    n_output_tokens: int
    config_hash: str


@dataclass
class ReportTable:
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def select(self, **where):
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in where.items())]

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for row in self.rows:
                writer.writerow([_csv_cell(getattr(row, c)) for c in CSV_COLUMNS])

    @classmethod
    def from_csv(cls, path) -> "ReportTable":
        with Path(path).open(newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
                raise ValidationError(f"{path}: unexpected CSV header {reader.fieldnames}")
            return cls([_row_from_csv(r) for r in reader])


def _csv_cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple, dict)):
        return json.dumps(v)
    return v


def _row_from_csv(r):
    f = float
    value = json.loads(r["value"]) if r["value"] else None
    return ReportRow(
        scenario=r["scenario"], loss=r["loss"], axis=r["axis"] or None, value=value,
        clean_mu=f(r["clean_mu"]), adv_mu=f(r["adv_mu"]), adv_sigma=f(r["adv_sigma"]),
        delta=f(r["delta"]), adv_var=f(r["adv_var"]), n_seeds=int(r["n_seeds"]),
        adv_min=f(r["adv_min"]), adv_max=f(r["adv_max"]), flagged=r["flagged"] == "True",
        target=r["target"], target_projector=r["target_projector"], method=r["method"],
        experiment=r["experiment"], n_output_tokens=int(r["n_output_tokens"]),
        config_hash=r["config_hash"])


def mean_std(values):
    """Arithmetic mean, population variance and population standard deviation."""
    values = [float(v) for v in values]
    mu = math.fsum(values) / len(values)
    var = math.fsum((v - mu) ** 2 for v in values) / len(values)
    return mu, var, math.sqrt(var)


def aggregate_runs(records) -> ReportTable:
    """Group records by cell (config hash) in first-seen order; failed records
    are dropped, and a cell left without a successful record is an error."""
    cells = {}
    for rec in records:
        cells.setdefault(rec.config_hash, []).append(rec)
    if not cells:
        return ReportTable()
    rows = []
    for key, group in cells.items():
        ok = [r for r in group if r.status == "ok"]
        if not ok:
            raise ValidationError(f"cell {key} ({group[0].experiment}) has no successful runs")
        adv = [r.adv_acc for r in ok]
        mu, var, sigma = mean_std(adv)
        clean = ok[0].clean_acc
        value = ok[0].value
        if isinstance(value, tuple):
            value = list(value)
        rows.append(ReportRow(
            scenario=ok[0].scenario, loss=ok[0].loss, axis=ok[0].axis, value=value,
            clean_mu=clean, adv_mu=mu, adv_sigma=sigma, delta=clean - mu, adv_var=var,
            n_seeds=len(ok), adv_min=min(adv), adv_max=max(adv), flagged=sigma > SIGMA_FLAG,
            target=ok[0].target, target_projector=ok[0].target_projector, method=ok[0].method,
            experiment=ok[0].experiment, n_output_tokens=ok[0].n_output_tokens, config_hash=key))
    return ReportTable(rows)


# --- verdict -------------------------------------------------------------------

VERDICTS = ("vlp_weaker", "comparable", "vlp_stronger")


@dataclass(frozen=True)
class Verdict:
    label: str
    delta: float
    ve_mu: float
    vlp_mu: float
    tolerance: float


def _mu(records_or_values):
    vals = [r.adv_acc if isinstance(r, RunRecord) else float(r) for r in records_or_values]
    if not vals:
        raise ValidationError("verdict needs at least one record per side")
    return math.fsum(vals) / len(vals)


def _check_comparable(a, b):
    keys = ("target", "dataset", "method", "epsilon", "step_size", "iterations", "scenario")
    for side in (a, b):
        if any(r.status != "ok" for r in side):
            raise ValidationError("verdict inputs contain failed runs")
    ref = {k: getattr(a[0], k) for k in keys}
    for r in list(a) + list(b):
        for k in keys:
            if getattr(r, k) != ref[k]:
                raise ValidationError(f"records disagree on {k}: {getattr(r, k)!r} vs {ref[k]!r}")


def security_verdict(ve_records, vlp_records, tolerance: float = 1.0) -> Verdict:
    """Delta = mu(acc | VE attack) - mu(acc | VLP attack). A positive delta means
    attacking the projector hurts more, i.e. the projector adds vulnerability.

    Accepts RunRecords (configs are cross-checked) or plain accuracy values."""
    if ve_records and vlp_records and isinstance(ve_records[0], RunRecord):
        _check_comparable(ve_records, vlp_records)
    ve_mu, vlp_mu = _mu(ve_records), _mu(vlp_records)
    delta = ve_mu - vlp_mu
    if delta > tolerance:
        label = "vlp_weaker"
    elif delta < -tolerance:
        label = "vlp_stronger"
    else:
        label = "comparable"
    return Verdict(label, delta, ve_mu, vlp_mu, tolerance)


# --- sweeps --------------------------------------------------------------------

def _format_value(v):
    if isinstance(v, (list, tuple)):
        return "+".join(str(x) for x in v)
    if isinstance(v, float) and v.is_integer():
        return str(int(v))
    return str(v)


def apply_axis(template: ExperimentSpec, axis: str, value) -> ExperimentSpec:
    if axis not in AXES:
        raise ValidationError(f"unknown sweep axis {axis!r}; choose from {AXES}")
    sc = template.scenario
    if axis == "beta":
        k = template.tcp.k if template.tcp else (sc.k or max(len(sc.sources), 1))
        return replace(template, loss="tcp", tcp=TCPConfig(beta=float(value), k=k),
                       axis=axis, value=float(value))
    if axis == "k":
        beta = template.tcp.beta if template.tcp else 0.0
        return replace(template, loss="tcp", tcp=TCPConfig(beta=beta, k=int(value)),
                       scenario=replace(sc, k=int(value)), axis=axis, value=int(value))
    tag = _format_value(value)
    if axis == "pool_factor":
        if "{value}" not in template.target:
            raise ValidationError("pool_factor sweeps need a target id template containing {value}")
        target = template.target.format(value=tag)
        return replace(template, target=target, scenario=replace(sc, target=target),
                       axis=axis, value=int(value))
    if not any("{value}" in s for s in sc.sources) and sc.train is None:
        raise ValidationError("task_flags sweeps need surrogate id templates containing {value}")
    if sc.train is not None and not sc.sources:
        tasks = tuple(value) if isinstance(value, (list, tuple)) else tuple(str(value).split("+"))
        scenario = replace(sc, train=replace(sc.train, tasks=tasks))
    else:
        scenario = replace(sc, sources=tuple(s.format(value=tag) for s in sc.sources))
    return replace(template, scenario=scenario, axis=axis, value=tag)


def sweep(template: ExperimentSpec, axis: str, values, registry, dataset=None, on_record=None):
    """One aggregated row per value with everything else held fixed.

    Returns ``(table, records)``."""
    records = []
    for value in values:
        spec = apply_axis(template, axis, value)
        records += run_attack_experiment(spec, registry, dataset, on_record)
    return aggregate_runs(records), records


# --- JSONL ---------------------------------------------------------------------

def append_records(path, records):
    """Append under an exclusive lock so concurrent writers never interleave lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            for rec in records:
                fh.write(rec.to_json() + "\n")
            fh.flush()
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def read_records(path):
    """Parse a JSONL file; returns (records, n_malformed_lines)."""
    records, bad = [], 0
    path = Path(path)
    if not path.exists():
        return records, bad
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        try:
            records.append(RunRecord.from_dict(json.loads(line)))
        except (json.JSONDecodeError, TypeError, ValidationError):
            bad += 1
    return records, bad


__all__ = [
    "AXES", "CSV_COLUMNS", "DatasetRef", "ExperimentSpec", "ReportRow", "ReportTable",
    "RunRecord", "TrainConfig", "Verdict", "aggregate_runs", "append_records", "apply_axis",
    "derive_seed", "evaluate_clean", "read_records", "run_attack_experiment",
    "security_verdict", "sweep",
]
