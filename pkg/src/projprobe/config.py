"""Declarative YAML experiment documents.

One document describes a self-contained experiment directory: the models to
train (into the registry), the attack defaults, the experiments and the
sweeps. Validation happens before any compute; unknown keys are rejected and
errors name the offending line. Numeric fields accept fractions such as
``8/255``.

    schema_version: 1
    name: whitebox
    data: {train: {seed: 1, n: 8000}, eval: {seed: 2, n: 2000}}
    models:
      - {id: encoder, role: encoder, steps: 800}
      - {id: qformer-A, role: target, projector: compressed, head_variant: A}
    attack: {method: pgd, epsilon: 8/255, step_size: 2/255, iterations: 20}
    experiments:
      - {name: wb-ve, target: qformer-A, scenario: white_box, loss: ve}
"""

from __future__ import annotations

from dataclasses import replace
from fractions import Fraction
from pathlib import Path
from typing import Annotated, Literal, Union

import yaml
from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, model_validator
from pydantic import ValidationError as PydanticError

from .attacks import AttackConfig
from .errors import ConfigurationError
from .harness import DatasetRef, ExperimentSpec, apply_axis
from .losses import TCPConfig
from .surrogates import ScenarioSpec, TrainConfig

SCHEMA_VERSION = 1


def _number(v):
    if isinstance(v, str) and "/" in v:
        try:
            return float(Fraction(v.replace(" ", "")))
        except (ValueError, ZeroDivisionError):
            raise ValueError(f"cannot parse fraction {v!r}") from None
    return v


Num = Annotated[float, BeforeValidator(_number)]
ModelId = Annotated[str, Field(pattern=r"^[A-Za-z0-9_.{}+-]+$")]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DataSection(_Strict):
    seed: int
    n: int = Field(ge=1)


class DataConfig(_Strict):
    train: DataSection = DataSection(seed=1, n=8000)
    eval: DataSection = DataSection(seed=2, n=2000)

    def train_ref(self):
        return DatasetRef(self.train.seed, self.train.n, "train")

    def eval_ref(self):
        return DatasetRef(self.eval.seed, self.eval.n, "eval")


class EncoderDef(_Strict):
    id: ModelId
    role: Literal["encoder"]
    steps: int = Field(800, ge=0)
    lr: Num = 1e-3
    seed: int = 0


class TargetDef(_Strict):
    """A full model; ``sibling`` models share an architecture with a target
    but use another head, and serve as transfer sources."""
    id: ModelId
    role: Literal["target", "sibling"]
    encoder: ModelId
    projector: Literal["compressed", "uncompressed"]
    head_variant: str
    projector_config: dict[str, int] = {}
    steps: int = Field(2000, ge=0)
    lr: Num = 1e-3
    seed: int = 0


class HeadDef(_Strict):
    id: ModelId
    role: Literal["head"]
    encoder: ModelId
    head_variant: str = "C"
    steps: int = Field(1500, ge=0)
    lr: Num = 1e-3
    seed: int = 0


class SurrogateDef(_Strict):
    id: ModelId
    role: Literal["surrogate"]
    encoder: ModelId
    projector: Literal["compressed", "uncompressed"]
    head: ModelId
    tasks: list[Literal["itc", "itm", "ic"]] = ["itc", "itm", "ic"]
    projector_config: dict[str, int] = {}
    stage1_steps: int = Field(2000, ge=0)
    stage2_steps: int = Field(1000, ge=0)
    lr: Num = 1e-3
    batch_size: int = Field(64, ge=1)
    seed: int = 0

    def train_config(self, head_variant: str) -> TrainConfig:
        return TrainConfig(tasks=tuple(self.tasks), stage1_steps=self.stage1_steps,
                           stage2_steps=self.stage2_steps, lr=self.lr,
                           batch_size=self.batch_size, seed=self.seed, head_variant=head_variant)


ModelDef = Annotated[Union[EncoderDef, TargetDef, HeadDef, SurrogateDef], Field(discriminator="role")]


class AttackSection(_Strict):
    method: Literal["fgsm", "pgd", "cw", "mifgsm"] = "pgd"
    epsilon: Num | None = None
    step_size: Num | None = None
    iterations: int | None = Field(None, ge=0)
    momentum: Num | None = None
    cw_constant: Num | None = None
    cw_confidence: Num | None = None
    random_init: bool | None = None

    def merged(self, other: "AttackSection | None") -> "AttackSection":
        if other is None:
            return self
        mine = self.model_dump(exclude_none=True)
        theirs = other.model_dump(exclude_none=True, exclude_unset=True)
        if theirs.get("method", mine["method"]) != mine["method"]:
            mine = {}  # a different method starts from that method's defaults
        return AttackSection(**{**mine, **theirs})

    def resolve(self) -> AttackConfig:
        return AttackConfig.paper_defaults(self.method, **self.model_dump(exclude_none=True,
                                                                          exclude={"method"}))


class TCPSection(_Strict):
    beta: Num = Field(ge=0, le=1)
    k: int = Field(ge=1)


class TrainSection(_Strict):
    """On-the-fly scratch surrogate training (cached in the registry)."""
    tasks: list[Literal["itc", "itm", "ic"]] = ["itc", "itm", "ic"]
    stage1_steps: int = Field(2000, ge=0)
    stage2_steps: int = Field(1000, ge=0)
    lr: Num = 1e-3
    batch_size: int = Field(64, ge=1)
    seed: int = 0
    head_variant: str = "C"


class ExperimentDef(_Strict):
    name: str = ""  # sweeps take their name from the sweep entry
    target: ModelId
    scenario: Literal["white_box", "transfer", "scratch"]
    sources: list[ModelId] = []
    train: TrainSection | None = None
    public_head: ModelId | None = None
    k: int | None = Field(None, ge=1)
    allow_mixed: bool = False
    surrogate_selection: Literal["first", "seeded"] = "first"
    loss: Literal["ve", "vlp", "tcp"] = "vlp"
    tcp: TCPSection | None = None
    instruction: Literal["question", "generic"] = "question"
    attack: AttackSection | None = None
    seeds: list[int] | None = None
    batch_size: int = Field(500, ge=1)

    @model_validator(mode="after")
    def _check(self):
        if self.seeds is not None and (not self.seeds or len(set(self.seeds)) != len(self.seeds)):
            raise ValueError("seeds must be a nonempty list of distinct integers")
        if self.scenario == "transfer" and not self.sources:
            raise ValueError("transfer experiments need sibling model ids in 'sources'")
        if self.scenario == "scratch" and not self.sources and self.train is None:
            raise ValueError("scratch experiments need 'sources' or a 'train' section")
        return self


class SweepDef(_Strict):
    name: str
    axis: Literal["beta", "k", "pool_factor", "task_flags"]
    values: list[Union[Num, list[str], str]] = Field(min_length=1)
    template: ExperimentDef


class CliConfig(_Strict):
    schema_version: int
    name: Annotated[str, Field(pattern=r"^[A-Za-z0-9_.-]+$")]
    registry: str | None = None
    data: DataConfig = DataConfig()
    root_seed: int = 0
    seeds: list[int] = [0, 1, 2, 3, 4]
    attack: AttackSection = AttackSection()
    models: list[ModelDef] = []
    experiments: list[ExperimentDef] = []
    sweeps: list[SweepDef] = []

    @model_validator(mode="after")
    def _check(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {self.schema_version}; "
                             f"this build reads version {SCHEMA_VERSION}")
        ids = [m.id for m in self.models]
        dup = sorted({i for i in ids if ids.count(i) > 1})
        if dup:
            raise ValueError(f"duplicate model ids {dup}")
        if any(not e.name for e in self.experiments):
            raise ValueError("every experiment needs a name")
        names = [e.name for e in self.experiments] + [s.name for s in self.sweeps]
        dup = sorted({n for n in names if names.count(n) > 1})
        if dup:
            raise ValueError(f"duplicate experiment/sweep names {dup}")
        return self

    # --- resolution into runtime specs ---

    def experiment_spec(self, e: ExperimentDef, root_seed: int | None = None) -> ExperimentSpec:
        train = None
        if e.train is not None:
            t = e.train
            train = TrainConfig(tasks=tuple(t.tasks), stage1_steps=t.stage1_steps,
                                stage2_steps=t.stage2_steps, lr=t.lr, batch_size=t.batch_size,
                                seed=t.seed, head_variant=t.head_variant)
        scenario = ScenarioSpec(e.scenario, e.target, tuple(e.sources), train, e.public_head,
                                e.k, e.allow_mixed)
        return ExperimentSpec(
            name=e.name, target=e.target, scenario=scenario,
            attack=self.attack.merged(e.attack).resolve(), loss=e.loss,
            tcp=TCPConfig(e.tcp.beta, e.tcp.k) if e.tcp else None,
            dataset=self.data.eval_ref(), seeds=tuple(e.seeds or self.seeds),
            root_seed=self.root_seed if root_seed is None else root_seed,
            instruction=e.instruction, surrogate_selection=e.surrogate_selection,
            train_data=self.data.train_ref() if train is not None else None,
            batch_size=e.batch_size)

    def experiment_specs(self, root_seed=None):
        return [self.experiment_spec(e, root_seed) for e in self.experiments]

    def sweep_specs(self, root_seed=None):
        """(sweep name, axis, [ExperimentSpec per value]) for every sweep."""
        out = []
        for s in self.sweeps:
            template = self.experiment_spec(s.template, root_seed)
            specs = [apply_axis(template, s.axis, v) for v in s.values]
            specs = [replace(sp, name=s.name) for sp in specs]
            out.append((s.name, s.axis, specs))
        return out


# --- loading with line-anchored errors ---------------------------------------

def _node_at(node, loc):
    """Deepest YAML node along a pydantic error location, plus the location
    with pydantic's union/discriminator tags dropped."""
    path = []
    for key in loc:
        nxt = None
        if isinstance(node, yaml.MappingNode):
            nxt = next((v for k, v in node.value if k.value == key), None)
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            nxt = node.value[key]
        if nxt is not None:
            path.append(key)
            node = nxt
    return node, path


def _unknown_key_node(node, key):
    if isinstance(node, yaml.MappingNode):
        for k, _ in node.value:
            if k.value == key:
                return k
    return None


def parse_config(text: str, source: str = "<config>") -> CliConfig:
    try:
        root = yaml.compose(text)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark else source
        raise ConfigurationError(f"{where}: invalid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{source}:1: expected a mapping at the top level")
    try:
        return CliConfig.model_validate(raw)
    except PydanticError as exc:
        lines = []
        for err in exc.errors():
            node, path = _node_at(root, err["loc"])
            if err["type"] == "extra_forbidden":
                key = err["loc"][-1]
                node = _unknown_key_node(node, key) or node
                path = path + [key] if not path or path[-1] != key else path
            line = node.start_mark.line + 1 if node is not None else 1
            dotted = ".".join(str(p) for p in path) or "<root>"
            lines.append(f"{source}:{line}: {dotted}: {err['msg']}")
        raise ConfigurationError("\n".join(lines)) from None


def load_config(path) -> CliConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))
