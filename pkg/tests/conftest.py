import pytest
import torch

from projprobe.models import (AnswerHead, CompressedConfig, CompressedProjector, EncoderConfig,
                              ToyLVLM, UncompressedConfig, UncompressedProjector, VisualEncoder,
                              head_config)

torch.set_num_threads(1)

# criterion number -> one-line outcome, filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])


def tiny_encoder(seed=0, dtype=torch.float64, **kw):
    cfg = dict(d_model=16, depth=1, n_heads=2, d_ff=32, seed=seed)
    cfg.update(kw)
    return VisualEncoder(EncoderConfig(**cfg)).to(dtype)


def tiny_compressed(seed=1, d_in=16, dtype=torch.float64, **kw):
    cfg = dict(d_in=d_in, n_queries=4, d_model=16, d_out=8, depth=1, n_heads=2, d_ff=32, seed=seed)
    cfg.update(kw)
    return CompressedProjector(CompressedConfig(**cfg)).to(dtype)


def tiny_uncompressed(seed=2, d_in=16, dtype=torch.float64, **kw):
    cfg = dict(d_in=d_in, d_hidden=16, d_out=8, seed=seed)
    cfg.update(kw)
    return UncompressedProjector(UncompressedConfig(**cfg)).to(dtype)


def tiny_lvlm(kind="compressed", dtype=torch.float32):
    enc = tiny_encoder(dtype=dtype)
    proj = tiny_compressed(dtype=dtype) if kind == "compressed" else tiny_uncompressed(dtype=dtype)
    head = AnswerHead(head_config("A", d_vis=8, d_model=16, n_heads=2, d_ff=32)).to(dtype)
    return ToyLVLM(enc, proj, head).eval()


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(1234)


class MiniWorld:
    """A small registry trained for a handful of steps, shared across modules.

    Accuracies are meaningless at this size; it exists to exercise plumbing.
    """

    TRAIN_N, EVAL_N = 256, 64

    def __init__(self, root):
        from projprobe.data import make_synthetic_vqa
        from projprobe.registry import Registry
        from projprobe.surrogates import (TrainConfig, train_compressed_surrogate,
                                          train_uncompressed_surrogate)
        from projprobe.training import pretrain_encoder, pretrain_head, train_target

        self.train = make_synthetic_vqa(1, n=self.TRAIN_N)
        self.eval = make_synthetic_vqa(2, n=self.EVAL_N, split="eval")
        reg = self.registry = Registry(root)
        enc = pretrain_encoder(self.train, steps=20)
        reg.add("enc", enc, "encoder", seed=0)
        for kind, tag in (("compressed", "c"), ("uncompressed", "u")):
            reg.add(f"target-{tag}", train_target(enc, self.train, kind, "A", steps=60),
                    "target", head_variant="A", encoder_id="enc", seed=0)
            for i, seed in enumerate((1, 2, 3)):
                reg.add(f"sib-{tag}{i}", train_target(enc, self.train, kind, "B", steps=20,
                                                      seed=seed),
                        "sibling", head_variant="B", encoder_id="enc", seed=seed)
        head = pretrain_head(enc, self.train, "C", steps=20)
        reg.add("head-C", head, "head", head_variant="C", encoder_id="enc")
        for i, seed in enumerate((4, 5, 6)):
            cfg = TrainConfig(stage1_steps=10, stage2_steps=10, seed=seed)
            reg.add(f"sur-c{i}", train_compressed_surrogate(self.train, cfg, enc, head),
                    "surrogate", head_variant="C", encoder_id="enc", seed=seed)
        cfg = TrainConfig(stage1_steps=10, stage2_steps=10, seed=7)
        reg.add("sur-u0", train_uncompressed_surrogate(self.train, cfg, enc, head),
                "surrogate", head_variant="C", encoder_id="enc", seed=7)
        # a surrogate wrongly trained against the target's own head variant
        bad = train_uncompressed_surrogate(self.train, cfg, enc, reg.head("target-u"))
        reg.add("sur-u-same", bad, "surrogate", head_variant="A", encoder_id="enc", seed=7)
        reg.audit = type(reg.audit)()


@pytest.fixture(scope="session")
def mini_world(tmp_path_factory):
    return MiniWorld(tmp_path_factory.mktemp("mini_registry"))
