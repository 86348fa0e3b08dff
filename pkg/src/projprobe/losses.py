"""Feature-deviation attack objectives.

``loss_ve`` compares encoder outputs of the clean and adversarial image,
``loss_vlp`` compares projector outputs, and ``loss_tcp`` mixes the encoder
term with the mean over an ensemble of surrogate projectors::

    L_tcp = beta * L_ve + (1 - beta) * mean_j L_vlp^j

Each term is a mean squared difference over all I*J entries of one sample's
token tensor. Clean-side outputs carry no gradient; pass ``clean=`` to reuse
them across attack iterations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .errors import ConfigurationError, ValidationError
from .models import CompressedProjector, parameter_count, project


@dataclass(frozen=True)
class TCPConfig:
    beta: float = 0.0
    k: int = 1

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValidationError(f"beta must lie in [0, 1], got {self.beta}")
        if self.k < 1:
            raise ValidationError(f"K must be >= 1, got {self.k}")


@dataclass(frozen=True)
class SurrogateBundle:
    """Shared visual encoder plus K projector parameter sets."""

    encoder: torch.nn.Module
    projectors: tuple
    tags: tuple = ()
    allow_mixed: bool = False
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        projectors = tuple(self.projectors)
        object.__setattr__(self, "projectors", projectors)
        if not projectors:
            raise ValidationError("surrogate bundle needs at least one projector")
        tags = tuple(self.tags) or tuple(f"vlp{j}" for j in range(len(projectors)))
        if len(tags) != len(projectors):
            raise ValidationError("one provenance tag per projector required")
        object.__setattr__(self, "tags", tags)
        for tag, p in zip(tags, projectors):
            if p.d_in != self.encoder.d_out:
                raise ValidationError(
                    f"projector {tag!r} expects dim {p.d_in}, encoder emits {self.encoder.d_out}")
        kinds = {p.kind for p in projectors}
        if len(kinds) > 1 and not self.allow_mixed:
            raise ValidationError(f"mixed projector kinds {sorted(kinds)} need allow_mixed=True")

    @property
    def k(self) -> int:
        return len(self.projectors)

    def parameter_count(self) -> int:
        return parameter_count(self.encoder) + sum(parameter_count(p) for p in self.projectors)


def _mse(a, b, reduction):
    if a.shape != b.shape:
        raise ConfigurationError(f"output shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    per_sample = ((a - b) ** 2).flatten(1).mean(dim=1)
    return per_sample if reduction == "none" else per_sample.mean()


def _check_pair(x, x_adv):
    if x.shape != x_adv.shape:
        raise ConfigurationError(f"clean/adversarial shapes differ: {tuple(x.shape)} vs {tuple(x_adv.shape)}")


def _needs_instr(vlp, instr):
    if isinstance(vlp, CompressedProjector) and vlp.cfg.instruction_conditioning and instr is None:
        raise ConfigurationError("instruction-conditioned projector needs instruction tokens")


@torch.no_grad()
def clean_outputs(bundle: SurrogateBundle, x, instr=None, with_projectors=True):
    v = bundle.encoder(x)
    ps = tuple(project(p, v, instr) for p in bundle.projectors) if with_projectors else ()
    return v, ps


def loss_ve(ve, x, x_adv, clean=None, reduction="mean"):
    _check_pair(x, x_adv)
    if clean is None:
        with torch.no_grad():
            clean = ve(x)
    return _mse(clean.detach(), ve(x_adv), reduction)


def loss_vlp(ve, vlp, x, x_adv, instr=None, clean=None, reduction="mean", visual_adv=None):
    _check_pair(x, x_adv)
    _needs_instr(vlp, instr)
    if clean is None:
        with torch.no_grad():
            clean = project(vlp, ve(x), instr)
    if visual_adv is None:
        visual_adv = ve(x_adv)
    return _mse(clean.detach(), project(vlp, visual_adv, instr), reduction)


def loss_tcp(bundle: SurrogateBundle, x, x_adv, instr=None, cfg: TCPConfig = TCPConfig(),
             clean=None, reduction="mean"):
    """``clean`` is the (V_out, (P_out^1, ..., P_out^K)) pair from ``clean_outputs``."""
    if cfg.k != bundle.k:
        raise ValidationError(f"TCP config K={cfg.k} but bundle holds {bundle.k} projectors")
    _check_pair(x, x_adv)
    if clean is None:
        clean = clean_outputs(bundle, x, instr, with_projectors=cfg.beta < 1.0)
    v_clean, p_clean = clean
    v_adv = bundle.encoder(x_adv)
    total = 0.0
    if cfg.beta > 0.0:
        total = cfg.beta * _mse(v_clean, v_adv, reduction)
    if cfg.beta < 1.0:
        terms = [loss_vlp(bundle.encoder, p, x, x_adv, instr, clean=pc, reduction=reduction,
                          visual_adv=v_adv)
                 for p, pc in zip(bundle.projectors, p_clean)]
        total = total + (1.0 - cfg.beta) * (sum(terms) / len(terms))
    return total


class Objective:
    """Per-sample attack objective x_adv -> (B,) with clean outputs cached.

    ``kind`` is ``"ve"``, ``"vlp"`` (first projector of the bundle) or ``"tcp"``.
    """

    def __init__(self, kind, bundle: SurrogateBundle, x, instr=None, tcp: TCPConfig | None = None):
        if kind not in ("ve", "vlp", "tcp"):
            raise ValidationError(f"unknown loss selector {kind!r}")
        self.kind, self.bundle, self.x, self.instr = kind, bundle, x, instr
        if kind == "ve":
            self.tcp = TCPConfig(beta=1.0, k=bundle.k)
        elif kind == "vlp":
            self.tcp = TCPConfig(beta=0.0, k=1)
            self.bundle = SurrogateBundle(bundle.encoder, bundle.projectors[:1], bundle.tags[:1],
                                          bundle.allow_mixed)
        else:
            self.tcp = tcp or TCPConfig(beta=0.0, k=bundle.k)
        self.clean = clean_outputs(self.bundle, x, instr, with_projectors=self.tcp.beta < 1.0)

    def __call__(self, x_adv):
        if self.kind == "ve":
            return loss_ve(self.bundle.encoder, self.x, x_adv, clean=self.clean[0], reduction="none")
        return loss_tcp(self.bundle, self.x, x_adv, self.instr, self.tcp, clean=self.clean,
                        reduction="none")
