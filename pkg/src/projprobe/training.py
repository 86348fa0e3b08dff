"""Training loops for the toy world: the frozen visual encoder, target LVLMs
and stand-alone "public" language heads.

Encoders are always frozen after pre-training; their token features are
computed once per dataset and cached, which is what makes CPU training cheap.
"""

from __future__ import annotations

import copy
import logging
import math

import torch
import torch.nn.functional as F

from . import data as vocab
from .errors import TrainingError
from .models import (AnswerHead, EncoderConfig, ToyLVLM, VisualEncoder, build_projector,
                     head_config)

log = logging.getLogger(__name__)


@torch.no_grad()
def encode_dataset(encoder, images, batch_size=500):
    images = torch.as_tensor(images)
    return torch.cat([encoder(images[i:i + batch_size]) for i in range(0, len(images), batch_size)])


def frozen_copy(module):
    clone = copy.deepcopy(module)
    clone.requires_grad_(False)
    return clone.eval()


def adam_loop(params, step_loss, steps, n, batch_size, lr, seed, stage="train"):
    """Minibatch Adam; ``step_loss(index)`` returns the loss of one batch.

    Returns the per-step loss history. Raises ``TrainingError`` on divergence.
    """
    params = [p for p in params if p.requires_grad]
    history = []
    if steps <= 0:
        return history
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(params, lr=lr)
    for step in range(steps):
        index = torch.randint(0, n, (min(batch_size, n),), generator=gen)
        loss = step_loss(index)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingError(f"{stage}: non-finite loss at step {step}", step=step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(value)
        if step % 500 == 0 or step == steps - 1:
            log.info("%s step %d loss %.4f", stage, step, value)
    return history


def pretrain_encoder(dataset, steps=800, lr=1e-3, batch_size=64, seed=0,
                     cfg: EncoderConfig | None = None, history=None):
    """Per-patch colour/shape classification, standing in for a public
    pre-trained visual backbone."""
    cfg = cfg or EncoderConfig(seed=seed)
    encoder = VisualEncoder(cfg)
    gen = torch.Generator().manual_seed(seed + 1)
    colour_head = torch.nn.Linear(cfg.d_model, len(vocab.COLORS) + 1)
    shape_head = torch.nn.Linear(cfg.d_model, len(vocab.SHAPES) + 1)
    for lin in (colour_head, shape_head):
        with torch.no_grad():
            lin.weight.normal_(0, cfg.d_model ** -0.5, generator=gen)
            lin.bias.zero_()
    images = torch.from_numpy(dataset.images)
    cells = torch.from_numpy(dataset.cells)

    def step_loss(i):
        v = encoder(images[i])
        return (F.cross_entropy(colour_head(v).flatten(0, 1), cells[i, :, 0].flatten())
                + F.cross_entropy(shape_head(v).flatten(0, 1), cells[i, :, 1].flatten()))

    params = [*encoder.parameters(), *colour_head.parameters(), *shape_head.parameters()]
    h = adam_loop(params, step_loss, steps, len(dataset), batch_size, lr, seed, "encoder")
    if history is not None:
        history["encoder"] = h
    return encoder.eval()


def vqa_loss(projector, head, visual, questions, answers, instr=None):
    instr = questions if instr is None else instr
    return F.cross_entropy(head(projector(visual, instr), questions), answers)


def train_target(encoder, dataset, projector_kind="compressed", head_variant="A", steps=2000,
                 lr=1e-3, batch_size=64, seed=0, projector_cfg=None, head_overrides=None,
                 history=None):
    """Projector and head trained jointly on VQA over a frozen encoder."""
    projector_cfg = dict(projector_cfg or {})
    projector_cfg.setdefault("d_in", encoder.d_out)
    projector_cfg.setdefault("seed", seed)
    projector = build_projector(projector_kind, **projector_cfg)
    head = AnswerHead(head_config(head_variant, d_vis=projector.d_out, **(head_overrides or {})))
    visual = encode_dataset(encoder, dataset.images)
    questions = torch.from_numpy(dataset.questions)
    answers = torch.from_numpy(dataset.answers)

    def step_loss(i):
        return vqa_loss(projector, head, visual[i], questions[i], answers[i])

    params = [*projector.parameters(), *head.parameters()]
    stage = f"target/{projector_kind}/{head_variant}"
    h = adam_loop(params, step_loss, steps, len(dataset), batch_size, lr, seed, stage)
    if history is not None:
        history["target"] = h
    return ToyLVLM(encoder, projector.eval(), head.eval())


def pretrain_head(encoder, dataset, variant="C", steps=1500, lr=1e-3, batch_size=64, seed=0,
                  history=None):
    """A "public" language head: trained with a throwaway MLP adapter that is
    then discarded, so the head knows the task but no target projector."""
    model = train_target(encoder, dataset, "uncompressed", variant, steps, lr, batch_size, seed,
                         history=history)
    return model.head


@torch.no_grad()
def predict(model, images, questions, batch_size=500):
    images = torch.as_tensor(images)
    questions = torch.as_tensor(questions)
    out = [model(images[i:i + batch_size], questions[i:i + batch_size]).argmax(1)
           for i in range(0, len(images), batch_size)]
    return torch.cat(out)
