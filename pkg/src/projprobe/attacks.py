"""Gradient-ascent adversarial attacks in raw [0, 1] pixel space.

``loss_fn`` maps an image batch to a scalar or to per-sample losses; per-sample
values are summed so that every image receives its own gradient.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .errors import NumericalError, ValidationError

METHODS = ("fgsm", "pgd", "cw", "mifgsm")


@dataclass(frozen=True)
class AttackConfig:
    method: str = "pgd"
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    iterations: int = 20
    momentum: float = 0.9
    cw_constant: float = 0.005
    cw_confidence: float = 0.0
    random_init: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown attack method {self.method!r}; choose from {METHODS}")
        if self.epsilon < 0 or self.epsilon > 1:
            raise ValidationError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.iterations < 0:
            raise ValidationError(f"iterations must be >= 0, got {self.iterations}")
        if self.iterations > 0 and self.step_size <= 0:
            raise ValidationError("step_size must be > 0 when iterations > 0")
        if self.momentum < 0:
            raise ValidationError(f"momentum must be >= 0, got {self.momentum}")

    @classmethod
    def paper_defaults(cls, method: str = "pgd", **overrides) -> "AttackConfig":
        base = {
            "fgsm": dict(iterations=1, random_init=True),
            "pgd": dict(step_size=2 / 255, epsilon=8 / 255, iterations=20, random_init=True),
            "cw": dict(step_size=0.01, cw_constant=0.005, cw_confidence=0.0, iterations=100,
                       random_init=True),
            "mifgsm": dict(step_size=2 / 255, epsilon=8 / 255, iterations=20, momentum=0.9,
                           random_init=True),
        }[method]
        # feature-deviation losses have zero gradient at x' = x, hence the random start
        return cls(method=method, **{**base, **overrides})


@dataclass
class AdversarialResult:
    x_adv: torch.Tensor
    loss_trace: list
    linf: torch.Tensor  # per-sample
    l2: torch.Tensor    # per-sample
    config: AttackConfig
    skipped_steps: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def seed(self):
        return self.config.seed

    def save(self, path):
        """Images to ``<path>.npz``; trace, norms and config to ``<path>.json``."""
        from .checkpoint import save_arrays

        path = Path(path)
        save_arrays(path.with_suffix(".npz"), {"x_adv": self.x_adv.detach().cpu().numpy()})
        side = {
            "config": asdict(self.config),
            "loss_trace": self.loss_trace,
            "linf": self.linf.tolist(),
            "l2": self.l2.tolist(),
            "skipped_steps": self.skipped_steps,
            "seed": self.seed,
            "meta": self.meta,
        }
        path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True))


def _grad(loss_fn, x_adv):
    x_adv = x_adv.detach().requires_grad_(True)
    loss = loss_fn(x_adv)
    total = loss.sum()
    (g,) = torch.autograd.grad(total, x_adv)
    if not torch.isfinite(g).all():
        raise NumericalError("non-finite input gradient")
    return float(total.detach()), g


def _value(loss_fn, x_adv):
    with torch.no_grad():
        return float(loss_fn(x_adv).sum())


def _bounds(x, eps):
    """Box [x - eps, x + eps] in x's dtype, rounded inward so the l-inf bound
    holds exactly when measured in double precision."""
    if x.dtype == torch.float64:
        return x - eps, x + eps
    lo, hi = x.double() - eps, x.double() + eps
    lo_c, hi_c = lo.to(x.dtype), hi.to(x.dtype)
    lo_c = torch.where(lo_c.double() < lo, torch.nextafter(lo_c, x), lo_c)
    hi_c = torch.where(hi_c.double() > hi, torch.nextafter(hi_c, x), hi_c)
    return lo_c, hi_c


def _project(x_adv, x, eps):
    lo, hi = _bounds(x, eps)
    return torch.max(torch.min(x_adv, hi), lo).clamp(0.0, 1.0)


def _start(x, cfg: AttackConfig):
    if not cfg.random_init or cfg.epsilon == 0:
        return x.clone()
    gen = torch.Generator().manual_seed(cfg.seed)
    noise = torch.rand(x.shape, generator=gen, dtype=x.dtype) * 2 - 1
    return (x + cfg.epsilon * noise).clamp(0.0, 1.0)


def _flat(t):
    """(B, ...) -> (B, D); tensors of rank <= 1 count as one sample."""
    return t.reshape(t.shape[0], -1) if t.dim() >= 2 else t.reshape(1, -1)


def _shape_for(t):
    return (-1,) + (1,) * (t.dim() - 1) if t.dim() >= 2 else (1,) * max(t.dim(), 1)


def _result(x, x_adv, trace, cfg, skipped=0):
    delta = _flat((x_adv - x).detach())
    return AdversarialResult(x_adv.detach(), trace, delta.abs().max(dim=1).values,
                             delta.norm(dim=1), cfg, skipped)


def fgsm(loss_fn, x, cfg: AttackConfig) -> AdversarialResult:
    x = x.detach()
    x0 = _start(x, cfg)
    if cfg.epsilon == 0:
        return _result(x, x.clone(), [_value(loss_fn, x)] * 2, cfg)
    value, g = _grad(loss_fn, x0)
    x_adv = _project(x0 + cfg.epsilon * g.sign(), x, cfg.epsilon)
    return _result(x, x_adv, [value, _value(loss_fn, x_adv)], cfg)


def pgd_linf(loss_fn, x, cfg: AttackConfig) -> AdversarialResult:
    if cfg.iterations < 1:
        raise ValidationError("PGD needs at least one iteration")
    x = x.detach()
    x_adv = _start(x, cfg)
    trace = []
    for _ in range(cfg.iterations):
        value, g = _grad(loss_fn, x_adv)
        trace.append(value)
        x_adv = _project(x_adv + cfg.step_size * g.sign(), x, cfg.epsilon)
    trace.append(_value(loss_fn, x_adv))
    return _result(x, x_adv, trace, cfg)


def mi_fgsm(loss_fn, x, cfg: AttackConfig) -> AdversarialResult:
    """Momentum-accumulated sign ascent; gradients are L1-normalised per sample."""
    if cfg.iterations < 1:
        raise ValidationError("MI-FGSM needs at least one iteration")
    x = x.detach()
    x_adv = _start(x, cfg)
    velocity = torch.zeros_like(x)
    trace, skipped = [], 0
    for _ in range(cfg.iterations):
        value, g = _grad(loss_fn, x_adv)
        trace.append(value)
        norm = _flat(g).abs().sum(dim=1)
        zero = norm == 0
        skipped += int((zero & (_flat(velocity) == 0).all(dim=1)).sum())
        scale = torch.where(zero, torch.zeros_like(norm), 1.0 / torch.where(zero, torch.ones_like(norm), norm))
        velocity = cfg.momentum * velocity + g * scale.reshape(_shape_for(g))
        x_adv = _project(x_adv + cfg.step_size * velocity.sign(), x, cfg.epsilon)
    trace.append(_value(loss_fn, x_adv))
    return _result(x, x_adv, trace, cfg, skipped)


def cw_l2(loss_fn, x, cfg: AttackConfig) -> AdversarialResult:
    """Maximise L(x') - c * ||x' - x||_2^2 with Adam (lr = step_size), clamping
    every iterate to [0, 1]. No l-inf projection."""
    x = x.detach()
    x_adv = _start(x, cfg).requires_grad_(True)
    opt = torch.optim.Adam([x_adv], lr=cfg.step_size, maximize=True)
    trace = []
    for _ in range(cfg.iterations):
        loss = loss_fn(x_adv)
        penalty = _flat((x_adv - x) ** 2).sum(dim=1)
        objective = (loss - cfg.cw_constant * penalty).sum()
        opt.zero_grad()
        objective.backward()
        if not torch.isfinite(x_adv.grad).all():
            raise NumericalError("non-finite input gradient")
        trace.append(float(objective.detach()))
        opt.step()
        with torch.no_grad():
            x_adv.clamp_(0.0, 1.0)
    x_adv = x_adv.detach()
    with torch.no_grad():
        penalty = _flat((x_adv - x) ** 2).sum(dim=1)
        trace.append(float((loss_fn(x_adv) - cfg.cw_constant * penalty).sum()))
    return _result(x, x_adv, trace, cfg)


ATTACKS = {"fgsm": fgsm, "pgd": pgd_linf, "cw": cw_l2, "mifgsm": mi_fgsm}


def run_attack(loss_fn, x, cfg: AttackConfig) -> AdversarialResult:
    return ATTACKS[cfg.method](loss_fn, x, cfg)


def with_seed(cfg: AttackConfig, seed: int) -> AttackConfig:
    return replace(cfg, seed=int(seed))


def linf_distance(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))
