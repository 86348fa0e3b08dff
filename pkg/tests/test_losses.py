import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from conftest import tiny_compressed, tiny_encoder, tiny_uncompressed
from oracles import mean_square, mlp_token, tolist
from projprobe.errors import ConfigurationError, ValidationError
from projprobe.losses import (Objective, SurrogateBundle, TCPConfig, loss_tcp, loss_ve,
                              loss_vlp)
from projprobe.models import UncompressedConfig, UncompressedProjector, parameter_count


class FlatEncoder(nn.Module):
    """Stub encoder: a (B, J) input becomes one J-dimensional token."""

    def __init__(self, j):
        super().__init__()
        self.d_out = j

    def forward(self, x):
        return x.reshape(x.shape[0], 1, -1)


class ScaleProjector(nn.Module):
    kind = "uncompressed"

    def __init__(self, j, scale):
        super().__init__()
        self.d_in = self.d_out = j
        self.scale = scale

    def forward(self, v, instr=None):
        return self.scale * v


def test_ve_zero_at_identity():
    enc = tiny_encoder()
    x = torch.rand(2, 3, 32, 32, dtype=torch.float64)
    assert loss_ve(enc, x, x.clone()).item() == 0.0


def test_ve_hand_mse():
    enc = FlatEncoder(2)
    x = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    x_adv = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
    assert loss_ve(enc, x, x_adv).item() == 1.0


def test_ve_uniform_shift():
    enc = FlatEncoder(6)
    x = torch.rand(3, 6, dtype=torch.float64)
    assert loss_ve(enc, x, x + 0.5).item() == pytest.approx(0.25, abs=1e-15)


def test_vlp_zero_at_identity():
    enc, proj = tiny_encoder(), tiny_compressed()
    x = torch.rand(2, 3, 32, 32, dtype=torch.float64)
    q = torch.tensor([[4, 8, 14], [5, 9, 15]])
    assert loss_vlp(enc, proj, x, x.clone(), q).item() == 0.0


def test_vlp_normaliser_uses_m_query_tokens():
    enc, proj = tiny_encoder(), tiny_compressed()
    g = torch.Generator().manual_seed(0)
    x = torch.rand(1, 3, 32, 32, generator=g, dtype=torch.float64)
    x_adv = (x + 0.1 * torch.rand(x.shape, generator=g, dtype=torch.float64)).clamp(0, 1)
    q = torch.tensor([[4, 8, 14]])
    with torch.no_grad():
        p, pa = proj(enc(x), q)[0], proj(enc(x_adv), q)[0]
    assert p.shape == (4, 8)
    expected = mean_square(p.tolist(), pa.tolist())  # 1 / (M * d_out) normaliser
    assert loss_vlp(enc, proj, x, x_adv, q).item() == pytest.approx(expected, rel=1e-12)


def test_vlp_hand_set_projector_on_one_token():
    enc = FlatEncoder(2)
    proj = UncompressedProjector(UncompressedConfig(d_in=2, d_hidden=3, d_out=2)).double()
    with torch.no_grad():
        proj.fc1.weight.copy_(torch.tensor([[0.5, 0.25], [-1.0, 0.5], [0.1, 0.2]]))
        proj.fc1.bias.copy_(torch.tensor([0.1, 0.0, -0.3]))
        proj.fc2.weight.copy_(torch.tensor([[1.0, -1.0, 2.0], [0.5, 0.5, -0.5]]))
        proj.fc2.bias.copy_(torch.tensor([0.5, -0.2]))
    x = torch.tensor([[1.0, -2.0]], dtype=torch.float64)
    x_adv = torch.tensor([[0.3, 0.7]], dtype=torch.float64)
    w1, b1, w2, b2 = (tolist(t) for t in (proj.fc1.weight, proj.fc1.bias, proj.fc2.weight,
                                          proj.fc2.bias))
    ref = mean_square([mlp_token(w1, b1, w2, b2, [1.0, -2.0])],
                      [mlp_token(w1, b1, w2, b2, [0.3, 0.7])])
    assert loss_vlp(enc, proj, x, x_adv).item() == pytest.approx(ref, abs=1e-6)


def test_tcp_stubbed_components():
    # component losses VE = 1, VLP^1 = 2, VLP^2 = 4
    enc = FlatEncoder(4)
    bundle = SurrogateBundle(enc, (ScaleProjector(4, math.sqrt(2.0)), ScaleProjector(4, 2.0)))
    x = torch.zeros(1, 4, dtype=torch.float64)
    x_adv = torch.ones(1, 4, dtype=torch.float64)
    assert loss_ve(enc, x, x_adv).item() == 1.0
    got = loss_tcp(bundle, x, x_adv, cfg=TCPConfig(beta=0.5, k=2)).item()
    assert got == pytest.approx(0.5 * 1.0 + 0.5 * 3.0, abs=1e-12)


def _random_pair(seed, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(2, 3, 32, 32, generator=g, dtype=dtype)
    x_adv = (x + 0.05 * torch.randn(x.shape, generator=g, dtype=dtype)).clamp(0, 1)
    return x, x_adv


@pytest.mark.parametrize("kind", ["compressed", "uncompressed"])
def test_tcp_degenerate_cases(kind):
    enc = tiny_encoder()
    proj = tiny_compressed() if kind == "compressed" else tiny_uncompressed()
    bundle = SurrogateBundle(enc, (proj,))
    q = torch.tensor([[4, 8, 14], [6, 9, 15]])
    for seed in range(5):
        x, x_adv = _random_pair(seed)
        ve, vlp = loss_ve(enc, x, x_adv), loss_vlp(enc, proj, x, x_adv, q)
        assert loss_tcp(bundle, x, x_adv, q, TCPConfig(1.0, 1)).item() == ve.item()
        assert loss_tcp(bundle, x, x_adv, q, TCPConfig(0.0, 1)).item() == vlp.item()


def test_tcp_affine_in_beta():
    enc = tiny_encoder()
    projs = (tiny_uncompressed(seed=3), tiny_uncompressed(seed=4), tiny_uncompressed(seed=5))
    bundle = SurrogateBundle(enc, projs)
    x, x_adv = _random_pair(11)
    ve = loss_ve(enc, x, x_adv).item()
    vlp = sum(loss_vlp(enc, p, x, x_adv).item() for p in projs) / 3
    for beta in (0.0, 0.25, 0.5, 0.75, 1.0):
        got = loss_tcp(bundle, x, x_adv, cfg=TCPConfig(beta, 3)).item()
        assert got == pytest.approx(beta * ve + (1 - beta) * vlp, rel=1e-12)


def test_tcp_permutation_invariant():
    enc = tiny_encoder()
    projs = [tiny_uncompressed(seed=s) for s in (3, 4, 5)]
    x, x_adv = _random_pair(2)
    a = loss_tcp(SurrogateBundle(enc, projs), x, x_adv, cfg=TCPConfig(0.3, 3)).item()
    b = loss_tcp(SurrogateBundle(enc, projs[::-1]), x, x_adv, cfg=TCPConfig(0.3, 3)).item()
    assert a == pytest.approx(b, rel=1e-14)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.0, 0.5))
def test_feature_losses_nonnegative(seed, scale):
    enc, proj = tiny_encoder(), tiny_uncompressed(pool_factor=2)
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(1, 3, 32, 32, generator=g, dtype=torch.float64)
    x_adv = (x + scale * torch.randn(x.shape, generator=g, dtype=torch.float64)).clamp(0, 1)
    assert loss_ve(enc, x, x_adv).item() >= 0
    assert loss_vlp(enc, proj, x, x_adv).item() >= 0


@pytest.mark.parametrize("beta", [-0.1, 1.5, float("nan")])
def test_tcp_beta_out_of_range(beta):
    with pytest.raises(ValidationError):
        TCPConfig(beta=beta, k=1)


def test_empty_bundle_rejected():
    with pytest.raises(ValidationError):
        SurrogateBundle(tiny_encoder(), ())


def test_k_must_match_bundle():
    bundle = SurrogateBundle(tiny_encoder(), (tiny_uncompressed(),))
    x, x_adv = _random_pair(0)
    with pytest.raises(ValidationError):
        loss_tcp(bundle, x, x_adv, cfg=TCPConfig(0.0, 2))


def test_shape_mismatch_is_configuration_error():
    enc = tiny_encoder()
    x = torch.rand(2, 3, 32, 32, dtype=torch.float64)
    with pytest.raises(ConfigurationError):
        loss_ve(enc, x, x[:1])


def test_conditioned_vlp_needs_instruction():
    x, x_adv = _random_pair(0)
    with pytest.raises(ConfigurationError):
        loss_vlp(tiny_encoder(), tiny_compressed(), x, x_adv, None)


def test_mixed_bundle_needs_opt_in():
    enc = tiny_encoder()
    mixed = (tiny_compressed(), tiny_uncompressed())
    with pytest.raises(ValidationError):
        SurrogateBundle(enc, mixed)
    assert SurrogateBundle(enc, mixed, allow_mixed=True).k == 2


def test_incompatible_projector_rejected():
    with pytest.raises(ValidationError):
        SurrogateBundle(tiny_encoder(), (tiny_uncompressed(d_in=12),))


def test_bundle_parameter_count_is_sum():
    enc = tiny_encoder()
    projs = tuple(tiny_compressed(seed=s) for s in (1, 2, 3))
    bundle = SurrogateBundle(enc, projs)
    direct = sum(p.numel() for p in enc.parameters()) + sum(
        p.numel() for m in projs for p in m.parameters())
    assert bundle.k == 3
    assert bundle.parameter_count() == direct == parameter_count(enc) + 3 * parameter_count(projs[0])


def test_clean_side_gets_no_gradient():
    enc = tiny_encoder()
    x = torch.rand(1, 3, 32, 32, dtype=torch.float64, requires_grad=True)
    x_adv = (x.detach() + 0.1).clamp(0, 1).requires_grad_(True)
    loss_ve(enc, x, x_adv).backward()
    assert x.grad is None and x_adv.grad is not None


def _fd_rel_error(fn, x, n_pixels=5, h=1e-4, seed=0):
    g = torch.Generator().manual_seed(seed)
    xg = x.clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(fn(xg).sum(), xg)
    worst = 0.0
    with torch.no_grad():
        for idx in torch.randint(0, x.numel(), (n_pixels,), generator=g).tolist():
            e = torch.zeros(x.numel(), dtype=x.dtype)
            e[idx] = h
            e = e.reshape(x.shape)
            fd = float((fn(x + e).sum() - fn(x - e).sum()) / (2 * h))
            an = float(grad.flatten()[idx])
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-12))
    return worst


@pytest.mark.parametrize("kind", ["ve", "vlp", "tcp"])
def test_loss_gradients_match_finite_differences(kind):
    enc = tiny_encoder()
    bundle = SurrogateBundle(enc, (tiny_compressed(), tiny_compressed(seed=9)))
    x, x_adv = _random_pair(3)
    q = torch.tensor([[4, 8, 14], [6, 9, 15]])
    obj = Objective(kind, bundle, x, q, TCPConfig(0.4, 2) if kind == "tcp" else None)
    assert _fd_rel_error(obj, x_adv.clamp(0.05, 0.95)) < 1e-4


def test_objective_returns_per_sample_losses():
    enc, proj = tiny_encoder(), tiny_uncompressed()
    x, x_adv = _random_pair(5)
    obj = Objective("vlp", SurrogateBundle(enc, (proj,)), x)
    per = obj(x_adv)
    assert per.shape == (2,)
    assert per.mean().item() == pytest.approx(loss_vlp(enc, proj, x, x_adv).item(), rel=1e-12)
