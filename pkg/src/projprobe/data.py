"""Synthetic VQA corpus: coloured shapes on a 4x4 cell grid.

Every image is 32x32 RGB and each object fills one 8x8 cell, so a patch-8
encoder sees at most one object per token. Questions are three tokens
``[kind, colour, shape]`` (unused slots are ``PAD``); answers live in a closed
16-word vocabulary::

    0-5   colours  red green blue yellow magenta cyan
    6-9   shapes   square circle triangle cross
    10-13 counts   one two three four
    14-15          yes no

Answer ids are dealt round-robin before shuffling, so the class histogram is
flat to within one item. Captions list the objects in reading order and double
as the image-captioning corpus for surrogate pre-training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ValidationError

COLORS = ("red", "green", "blue", "yellow", "magenta", "cyan")
SHAPES = ("square", "circle", "triangle", "cross")
COUNTS = ("one", "two", "three", "four")
ANSWERS = COLORS + SHAPES + COUNTS + ("yes", "no")
N_ANSWERS = len(ANSWERS)

PAD, BOS, EOS, DESCRIBE, Q_COLOR, Q_SHAPE, Q_COUNT, Q_EXIST = range(8)
COLOR_TOKEN0 = 8
SHAPE_TOKEN0 = COLOR_TOKEN0 + len(COLORS)
N_TOKENS = SHAPE_TOKEN0 + len(SHAPES)
TOKENS = ("<pad>", "<bos>", "<eos>", "describe", "what-color", "what-shape",
          "how-many", "is-there") + COLORS + SHAPES

QUESTION_LEN = 3
MAX_OBJECTS = 5
CAPTION_LEN = 2 + 2 * MAX_OBJECTS

IMAGE_SIZE = 32
CELL = 8
GRID = IMAGE_SIZE // CELL

_RGB = np.array([
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
])


def _shape_masks():
    r, c = np.mgrid[0:CELL, 0:CELL]
    inner = (r >= 1) & (r <= 6) & (c >= 1) & (c <= 6)
    square = inner
    circle = (r - 3.5) ** 2 + (c - 3.5) ** 2 <= 3.2 ** 2
    triangle = inner & (np.abs(c - 3.5) <= (r - 0.5) * 0.6)
    cross = inner & (((r >= 3) & (r <= 4)) | ((c >= 3) & (c <= 4)))
    return np.stack([square, circle, triangle, cross]).astype(np.float64)


_MASKS = _shape_masks()

GENERIC_PROMPT = np.array([DESCRIBE, PAD, PAD], dtype=np.int64)


@dataclass(frozen=True)
class SyntheticVQADataset:
    images: np.ndarray     # (n, 3, 32, 32) float32 in [0, 1]
    questions: np.ndarray  # (n, 3) int64 token ids
    answers: np.ndarray    # (n,) int64 answer ids
    cells: np.ndarray      # (n, 16, 2) int64: colour+1, shape+1 (0 = empty)
    captions: np.ndarray   # (n, CAPTION_LEN) int64 token ids
    seed: int
    split: str = "train"

    def __len__(self):
        return len(self.answers)

    def subset(self, index) -> "SyntheticVQADataset":
        index = np.asarray(index)
        return SyntheticVQADataset(self.images[index], self.questions[index],
                                   self.answers[index], self.cells[index],
                                   self.captions[index], self.seed, self.split)

    def tensors(self, dtype=torch.float32):
        """(images, questions, answers) as torch tensors."""
        return (torch.from_numpy(self.images).to(dtype),
                torch.from_numpy(self.questions),
                torch.from_numpy(self.answers))

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for arr in (self.images, self.questions, self.answers, self.cells, self.captions):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


def _scene_for_answer(answer: int, rng: np.random.Generator):
    """Object list [(colour, shape), ...] and question tokens for one answer id."""
    n_col, n_shp = len(COLORS), len(SHAPES)

    def others(k, exclude, size):
        pool = [i for i in range(size) if i not in exclude]
        return [int(rng.choice(pool)) for _ in range(k)]

    if answer < n_col:
        colour, shape = answer, int(rng.integers(n_shp))
        objs = [(colour, shape)]
        for s in others(int(rng.integers(0, 3)), {shape}, n_shp):
            objs.append((int(rng.integers(n_col)), s))
        question = [Q_COLOR, PAD, SHAPE_TOKEN0 + shape]
    elif answer < n_col + n_shp:
        shape, colour = answer - n_col, int(rng.integers(n_col))
        objs = [(colour, shape)]
        for c in others(int(rng.integers(0, 3)), {colour}, n_col):
            objs.append((c, int(rng.integers(n_shp))))
        question = [Q_SHAPE, COLOR_TOKEN0 + colour, PAD]
    elif answer < n_col + n_shp + len(COUNTS):
        count = answer - n_col - n_shp + 1
        colour = int(rng.integers(n_col))
        objs = [(colour, int(rng.integers(n_shp))) for _ in range(count)]
        extra = int(rng.integers(0, min(2, MAX_OBJECTS - count) + 1))
        for c in others(extra, {colour}, n_col):
            objs.append((c, int(rng.integers(n_shp))))
        question = [Q_COUNT, COLOR_TOKEN0 + colour, PAD]
    else:
        colour, shape = int(rng.integers(n_col)), int(rng.integers(n_shp))
        if ANSWERS[answer] == "yes":
            objs = [(colour, shape)]
            for _ in range(int(rng.integers(0, 3))):
                objs.append((int(rng.integers(n_col)), int(rng.integers(n_shp))))
        else:
            # near misses share the colour or the shape, never both
            objs = []
            for _ in range(int(rng.integers(1, 4))):
                kind = int(rng.integers(3))
                if kind == 0:
                    objs.append((colour, others(1, {shape}, n_shp)[0]))
                elif kind == 1:
                    objs.append((others(1, {colour}, n_col)[0], shape))
                else:
                    objs.append((others(1, {colour}, n_col)[0], others(1, {shape}, n_shp)[0]))
        question = [Q_EXIST, COLOR_TOKEN0 + colour, SHAPE_TOKEN0 + shape]
    return objs, question


def render(cells: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Render a (16, 2) cell table into a (3, 32, 32) image."""
    img = 0.1 + 0.05 * rng.random((3, IMAGE_SIZE, IMAGE_SIZE))
    for idx in range(GRID * GRID):
        colour, shape = cells[idx]
        if colour == 0:
            continue
        r0, c0 = (idx // GRID) * CELL, (idx % GRID) * CELL
        intensity = 0.8 + 0.15 * rng.random()
        rgb = _RGB[colour - 1] * intensity + 0.05
        mask = _MASKS[shape - 1]
        patch = img[:, r0:r0 + CELL, c0:c0 + CELL]
        img[:, r0:r0 + CELL, c0:c0 + CELL] = patch * (1 - mask) + rgb[:, None, None] * mask
    return np.clip(img, 0.0, 1.0)


def caption_tokens(cells: np.ndarray) -> np.ndarray:
    out = [BOS]
    for colour, shape in cells:
        if colour:
            out += [COLOR_TOKEN0 + colour - 1, SHAPE_TOKEN0 + shape - 1]
    out.append(EOS)
    out += [PAD] * (CAPTION_LEN - len(out))
    return np.array(out, dtype=np.int64)


def make_synthetic_vqa(seed: int, n: int = 2000, split: str = "train") -> SyntheticVQADataset:
    if n < 1:
        raise ValidationError(f"dataset size must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    answers = rng.permutation(np.arange(n) % N_ANSWERS).astype(np.int64)
    images = np.empty((n, 3, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    questions = np.empty((n, QUESTION_LEN), dtype=np.int64)
    cells = np.zeros((n, GRID * GRID, 2), dtype=np.int64)
    captions = np.empty((n, CAPTION_LEN), dtype=np.int64)
    for i, answer in enumerate(answers):
        objs, question = _scene_for_answer(int(answer), rng)
        slots = rng.choice(GRID * GRID, size=len(objs), replace=False)
        for slot, (colour, shape) in zip(slots, objs):
            cells[i, slot] = (colour + 1, shape + 1)
        images[i] = render(cells[i], rng)
        questions[i] = question
        captions[i] = caption_tokens(cells[i])
    return SyntheticVQADataset(images, questions, answers, cells, captions, seed, split)


def answer_balance(dataset: SyntheticVQADataset) -> float:
    """Largest relative deviation of any class count from the uniform count."""
    counts = np.bincount(dataset.answers, minlength=N_ANSWERS)
    expected = len(dataset) / N_ANSWERS
    return float(np.max(np.abs(counts - expected)) / expected)
