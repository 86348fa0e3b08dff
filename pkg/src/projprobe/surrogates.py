"""Surrogate projectors for the three threat scenarios.

* white_box: the target's own encoder and projector.
* transfer:  the target's encoder with projectors lifted from sibling models
  that share the architecture but were trained with another head.
* scratch:   the target's encoder with projectors trained here, against a
  public head whose variant differs from the target's.

Compressed surrogates follow a two-stage recipe. Stage 1 learns
representations over the frozen encoder with any subset of

    itc  contrastive: pooled text-free query tokens vs. caption text features
    itm  matched/mismatched caption classification on instruction-fused tokens
    ic   next-token caption prediction from the query tokens

and stage 2 trains the projector through a frozen public head on the
question -> answer continuation. Uncompressed surrogates run a projector-only
alignment stage against the frozen head, then fine-tune projector and a copy
of the head together.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from . import data as vocab
from .errors import ConfigurationError, ValidationError
from .losses import SurrogateBundle
from .models import (Block, CompressedConfig, CompressedProjector, UncompressedConfig,
                     UncompressedProjector)
from .training import adam_loop, encode_dataset, frozen_copy, vqa_loss

TASKS = ("itc", "itm", "ic")
SCENARIOS = ("white_box", "transfer", "scratch")


@dataclass(frozen=True)
class TrainConfig:
    tasks: tuple = TASKS
    stage1_steps: int = 2000
    stage2_steps: int = 1000
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0
    head_variant: str = "C"
    temperature: float = 0.1

    def __post_init__(self):
        unknown = set(self.tasks or ()) - set(TASKS)
        if unknown:
            raise ValidationError(f"unknown pre-training tasks {sorted(unknown)}")
        tasks = tuple(sorted(set(self.tasks), key=TASKS.index)) if self.tasks else ()
        object.__setattr__(self, "tasks", tasks)
        if self.stage1_steps < 0 or self.stage2_steps < 0:
            raise ValidationError("stage lengths must be >= 0")

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


class CaptionDecoder(nn.Module):
    """Causal text block reading the query tokens as a prefix (IC task)."""

    def __init__(self, d_vis, d_model=64, n_heads=4, d_ff=128, seed=0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.prefix = nn.Linear(d_vis, d_model)
        self.embed = nn.Embedding(vocab.N_TOKENS, d_model)
        self.pos = nn.Parameter(torch.randn(vocab.CAPTION_LEN, d_model, generator=gen) * 0.02)
        self.block = Block(d_model, n_heads, d_ff)
        self.norm = nn.LayerNorm(d_model)
        self.out = nn.Linear(d_model, vocab.N_TOKENS)

    def forward(self, queries, tokens):
        M, T = queries.shape[1], tokens.shape[1]
        x = torch.cat([self.prefix(queries), self.embed(tokens) + self.pos[:T]], dim=1)
        L = M + T
        mask = torch.ones(L, L, dtype=torch.bool).tril()
        mask[:, :M] = True
        x = self.block(x, mask=mask)
        return self.out(self.norm(x[:, M:]))


def _check_head(head, role):
    if head is None:
        raise ConfigurationError(f"{role} needs a frozen public head")


def train_compressed_surrogate(data, cfg: TrainConfig, encoder, head=None, projector_cfg=None,
                               history=None) -> CompressedProjector:
    """Two-stage query-token surrogate; ``encoder`` and ``head`` stay frozen."""
    if cfg.stage1_steps > 0 and not cfg.tasks:
        raise ValidationError("compressed stage-1 training needs at least one task flag")
    if cfg.stage2_steps > 0:
        _check_head(head, "compressed stage 2")
    projector_cfg = dict(projector_cfg or {})
    projector_cfg.setdefault("d_in", encoder.d_out)
    projector_cfg.setdefault("seed", cfg.seed)
    projector = CompressedProjector(CompressedConfig(**projector_cfg))
    history = {} if history is None else history
    if cfg.stage1_steps == 0 and cfg.stage2_steps == 0:
        return projector.eval()

    visual = encode_dataset(encoder, data.images)
    captions = torch.from_numpy(data.captions)
    questions = torch.from_numpy(data.questions)
    answers = torch.from_numpy(data.answers)
    d_out, d = projector.d_out, projector.cfg.d_model
    aux = nn.ModuleDict()
    gen = torch.Generator().manual_seed(cfg.seed + 7)
    # default layer init draws from the global RNG; pin it so the seed alone decides
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed + 13)
        if "itc" in cfg.tasks:
            aux["itc_img"] = nn.Linear(d_out, d)
            aux["itc_txt"] = nn.Linear(d, d)
        if "itm" in cfg.tasks:
            aux["itm"] = nn.Linear(d_out, 2)
        if "ic" in cfg.tasks:
            aux["ic"] = CaptionDecoder(d_out, seed=cfg.seed + 11)
    for name, p in aux.named_parameters():
        if p.dim() == 2 and not name.endswith("pos"):
            with torch.no_grad():
                p.normal_(0, p.shape[1] ** -0.5, generator=gen)

    metrics = {}

    def stage1_loss(i):
        v, cap = visual[i], captions[i]
        total = 0.0
        if "itc" in cfg.tasks or "ic" in cfg.tasks:
            queries = projector(v, None)
        if "itc" in cfg.tasks:
            img = F.normalize(aux["itc_img"](queries.mean(1)), dim=-1)
            txt = F.normalize(aux["itc_txt"](projector.encode_text(cap)), dim=-1)
            logits = img @ txt.T / cfg.temperature
            same = (cap[:, None, :] == cap[None, :, :]).all(-1).float()
            target = same / same.sum(1, keepdim=True)
            total = total + 0.5 * (torch.sum(-target * logits.log_softmax(1), 1).mean()
                                   + torch.sum(-target.T * logits.log_softmax(0), 0).mean())
        if "itm" in cfg.tasks:
            neg = cap.roll(1, dims=0)
            labels = torch.cat([torch.ones(len(i), dtype=torch.long),
                                (neg == cap).all(-1).long()])
            fused = projector(torch.cat([v, v]), torch.cat([cap, neg]))
            logits = aux["itm"](fused.mean(1))
            total = total + F.cross_entropy(logits, labels)
            metrics["itm_acc"] = float((logits.argmax(1) == labels).float().mean())
        if "ic" in cfg.tasks:
            logits = aux["ic"](queries, cap[:, :-1])
            total = total + F.cross_entropy(logits.flatten(0, 1), cap[:, 1:].flatten(),
                                            ignore_index=vocab.PAD)
        return total

    params = [*projector.parameters(), *aux.parameters()]
    stage = "surrogate/compressed/" + "+".join(cfg.tasks)
    history["stage1"] = adam_loop(params, stage1_loss, cfg.stage1_steps if cfg.tasks else 0,
                                  len(data), cfg.batch_size, cfg.lr, cfg.seed, stage + "/stage1")
    if "itm" in cfg.tasks and cfg.stage1_steps > 0:
        history["itm_accuracy"] = itm_accuracy(projector, aux["itm"], visual, captions)
    history["aux"] = aux

    if cfg.stage2_steps > 0:
        frozen = frozen_copy(head)

        def stage2_loss(i):
            return vqa_loss(projector, frozen, visual[i], questions[i], answers[i])

        history["stage2"] = adam_loop(projector.parameters(), stage2_loss, cfg.stage2_steps,
                                      len(data), cfg.batch_size, cfg.lr, cfg.seed + 1,
                                      stage + "/stage2")
    return projector.eval()


@torch.no_grad()
def itm_accuracy(projector, classifier, visual, captions):
    """Accuracy over every matched pair plus one rolled mismatch per image."""
    neg = captions.roll(1, dims=0)
    labels = torch.cat([torch.ones(len(captions), dtype=torch.long),
                        (neg == captions).all(-1).long()])
    logits = classifier(projector(torch.cat([visual, visual]), torch.cat([captions, neg])).mean(1))
    return float((logits.argmax(1) == labels).float().mean())


def train_uncompressed_surrogate(data, cfg: TrainConfig, encoder, head=None, projector_cfg=None,
                                 history=None) -> UncompressedProjector:
    """Alignment (projector only, frozen head) then joint fine-tuning of the
    projector with a private copy of the head. Only the projector is returned."""
    projector_cfg = dict(projector_cfg or {})
    projector_cfg.setdefault("d_in", encoder.d_out)
    projector_cfg.setdefault("seed", cfg.seed)
    projector = UncompressedProjector(UncompressedConfig(**projector_cfg))
    history = {} if history is None else history
    if cfg.stage1_steps == 0 and cfg.stage2_steps == 0:
        return projector.eval()
    _check_head(head, "uncompressed surrogate training")
    visual = encode_dataset(encoder, data.images)
    questions = torch.from_numpy(data.questions)
    answers = torch.from_numpy(data.answers)
    frozen = frozen_copy(head)

    def align_loss(i):
        return vqa_loss(projector, frozen, visual[i], questions[i], answers[i])

    history["stage1"] = adam_loop(projector.parameters(), align_loss, cfg.stage1_steps, len(data),
                                  cfg.batch_size, cfg.lr, cfg.seed, "surrogate/uncompressed/align")
    if cfg.stage2_steps > 0:
        tuned = frozen_copy(head).train().requires_grad_(True)

        def joint_loss(i):
            return vqa_loss(projector, tuned, visual[i], questions[i], answers[i])

        history["stage2"] = adam_loop([*projector.parameters(), *tuned.parameters()], joint_loss,
                                      cfg.stage2_steps, len(data), cfg.batch_size, cfg.lr,
                                      cfg.seed + 1, "surrogate/uncompressed/joint")
    return projector.eval()


def build_bundle(ve, projectors, tags=None, allow_mixed=False) -> SurrogateBundle:
    return SurrogateBundle(ve, tuple(projectors), tuple(tags or ()), allow_mixed)


@dataclass(frozen=True)
class ScenarioSpec:
    scenario: str
    target: str
    sources: tuple = ()
    train: TrainConfig | None = None
    public_head: str | None = None
    k: int | None = None
    allow_mixed: bool = False
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValidationError(f"unknown scenario {self.scenario!r}; choose from {SCENARIOS}")
        object.__setattr__(self, "sources", tuple(self.sources))
        if self.scenario == "transfer" and not self.sources:
            raise ValidationError("transfer scenario needs at least one sibling model id")
        if self.scenario == "scratch" and not self.sources and self.train is None:
            raise ValidationError("scratch scenario needs surrogate ids or a TrainConfig")
        if self.target in self.sources:
            raise ValidationError("a gray-box surrogate cannot be the target itself")
        if self.k is not None and self.k < 1:
            raise ValidationError("k must be >= 1")


def _surrogate_from_config(spec: ScenarioSpec, registry, data):
    target = registry.entry(spec.target)
    if data is None:
        raise ConfigurationError("training a scratch surrogate on the fly needs a dataset")
    if spec.public_head is None:
        raise ConfigurationError("scratch training needs a public head id")
    head_entry = registry.entry(spec.public_head)
    cfg = spec.train
    model_id = f"scratch-{target['projector_kind']}-{cfg.config_hash()}"
    if model_id not in registry:
        encoder = registry.encoder(spec.target)
        head = registry.head(spec.public_head)
        if head_entry["head_variant"] == target["head_variant"]:
            raise ValidationError("scratch surrogate head variant equals the target's")
        trainer = (train_compressed_surrogate if target["projector_kind"] == "compressed"
                   else train_uncompressed_surrogate)
        projector = trainer(data, cfg, encoder, head)
        registry.add(model_id, projector, "surrogate", head_variant=head_entry["head_variant"],
                     encoder_id=target.get("encoder_id"),
                     provenance={"scenario": "scratch", "train": asdict(cfg),
                                 "public_head": spec.public_head},
                     seed=cfg.seed, config_hash=cfg.config_hash())
    return (model_id,)


def resolve_scenario(spec: ScenarioSpec, registry, data=None) -> SurrogateBundle:
    """Surrogate bundle for ``spec``. Gray-box paths read only the target's
    encoder and index metadata, never its projector."""
    target = registry.entry(spec.target)
    if spec.scenario == "white_box":
        encoder = registry.encoder(spec.target)
        bundle = build_bundle(encoder, [registry.projector(spec.target)], [f"{spec.target}:vlp"])
        return bundle
    sources = spec.sources
    if spec.scenario == "scratch" and not sources:
        sources = _surrogate_from_config(spec, registry, data)
    for sid in sources:
        entry = registry.entry(sid)
        if spec.scenario == "transfer" and entry["kind"] != "lvlm":
            raise ValidationError(f"transfer source {sid!r} must be a full sibling model")
        if spec.scenario == "scratch":
            if entry["role"] != "surrogate":
                raise ValidationError(f"scratch source {sid!r} is not a trained surrogate")
            if entry["head_variant"] == target["head_variant"]:
                raise ValidationError(
                    f"surrogate {sid!r} was trained with head variant {entry['head_variant']!r}, "
                    "the same as the target's; this breaks the gray-box premise")
        if entry["projector_kind"] != target["projector_kind"] and not spec.allow_mixed:
            raise ValidationError(
                f"surrogate {sid!r} is {entry['projector_kind']}, target is {target['projector_kind']}")
    if spec.k is not None:
        if spec.k > len(sources):
            raise ValidationError(f"k={spec.k} but only {len(sources)} surrogates available")
        sources = sources[:spec.k]
    encoder = registry.encoder(spec.target)
    projectors = [registry.projector(sid) for sid in sources]
    return build_bundle(encoder, projectors, [f"{sid}:vlp" for sid in sources], spec.allow_mixed)
