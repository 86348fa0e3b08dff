import numpy as np
import pytest

from projprobe import data as vocab
from projprobe.data import answer_balance, make_synthetic_vqa
from projprobe.errors import ValidationError


def test_same_seed_same_bytes():
    a, b = make_synthetic_vqa(5, n=64), make_synthetic_vqa(5, n=64)
    for field in ("images", "questions", "answers", "cells", "captions"):
        assert np.array_equal(getattr(a, field), getattr(b, field))
    assert a.fingerprint() == b.fingerprint()
    assert make_synthetic_vqa(6, n=64).fingerprint() != a.fingerprint()


def test_default_size_and_balance():
    ds = make_synthetic_vqa(2)
    assert len(ds) == 2000
    assert answer_balance(ds) <= 0.10
    counts = np.bincount(ds.answers, minlength=vocab.N_ANSWERS)
    assert counts.min() > 0


@pytest.mark.parametrize("n", [0, -3])
def test_empty_dataset_rejected(n):
    with pytest.raises(ValidationError):
        make_synthetic_vqa(0, n=n)


def test_shapes_and_ranges():
    ds = make_synthetic_vqa(1, n=40)
    assert ds.images.shape == (40, 3, 32, 32) and ds.images.dtype == np.float32
    assert ds.images.min() >= 0 and ds.images.max() <= 1
    assert ds.questions.shape == (40, vocab.QUESTION_LEN)
    assert ds.captions.shape == (40, vocab.CAPTION_LEN)
    assert ds.questions.max() < vocab.N_TOKENS and ds.captions.max() < vocab.N_TOKENS
    assert ds.answers.max() < vocab.N_ANSWERS


def test_subset_and_tensors():
    ds = make_synthetic_vqa(1, n=20)
    sub = ds.subset([3, 1])
    assert np.array_equal(sub.images, ds.images[[3, 1]])
    images, questions, answers = sub.tensors()
    assert images.shape == (2, 3, 32, 32) and questions.shape == (2, 3) and answers.shape == (2,)
