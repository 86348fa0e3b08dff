"""Fast invariant checks behind ``projprobe verify``.

Each check returns ``(name, ok, detail)``. They run on tiny random models in
a few seconds; the full property suites live in the test tree.
"""

from __future__ import annotations

import math
from pathlib import Path

import torch

from .attacks import AttackConfig, run_attack
from .harness import read_records
from .losses import Objective, SurrogateBundle, TCPConfig, loss_tcp, loss_ve, loss_vlp
from .models import (CompressedConfig, CompressedProjector, EncoderConfig, UncompressedConfig,
                     UncompressedProjector, VisualEncoder)
from .registry import Registry, file_sha256


def _toy(dtype=torch.float64):
    enc = VisualEncoder(EncoderConfig(seed=0)).to(dtype)
    q = CompressedProjector(CompressedConfig(d_in=enc.d_out, seed=1, instruction_conditioning=False))
    m = UncompressedProjector(UncompressedConfig(d_in=enc.d_out, seed=2))
    return enc, q.to(dtype), m.to(dtype)


def check_loss_identities(n=10):
    enc, q, _ = _toy()
    bundle = SurrogateBundle(enc, (q,))
    gen = torch.Generator().manual_seed(0)
    worst = 0.0
    for _ in range(n):
        x = torch.rand(2, 3, 32, 32, generator=gen, dtype=torch.float64)
        xa = (x + 0.05 * torch.randn(x.shape, generator=gen, dtype=torch.float64)).clamp(0, 1)
        with torch.no_grad():
            ve, vlp = loss_ve(enc, x, xa), loss_vlp(enc, q, x, xa)
            t1 = loss_tcp(bundle, x, xa, cfg=TCPConfig(1.0, 1))
            t0 = loss_tcp(bundle, x, xa, cfg=TCPConfig(0.0, 1))
        worst = max(worst, float(abs(t1 - ve) / ve), float(abs(t0 - vlp) / vlp))
    return "loss identities", worst < 1e-12, f"max relative error {worst:.2e}"


def check_epsilon_ball(n=12):
    enc, _, m = _toy(torch.float32)
    enc, m = enc.float(), m.float()
    bundle = SurrogateBundle(enc, (m,))
    gen = torch.Generator().manual_seed(1)
    worst = 0.0
    ok = True
    for i in range(n):
        method = ("fgsm", "pgd", "mifgsm")[i % 3]
        eps = float(torch.rand((), generator=gen)) * 0.1
        x = torch.rand(2, 3, 32, 32, generator=gen)
        cfg = AttackConfig(method=method, epsilon=eps, step_size=eps / 3 + 1e-4,
                           iterations=1 if method == "fgsm" else 3, seed=i)
        res = run_attack(Objective("vlp", bundle, x), x, cfg)
        dev = float((res.x_adv.double() - x.double()).abs().max())
        worst = max(worst, dev - eps)
        ok &= dev <= eps + 1e-9 and float(res.x_adv.min()) >= 0 and float(res.x_adv.max()) <= 1
        zero = run_attack(Objective("vlp", bundle, x), x, AttackConfig(method=method, epsilon=0.0,
                                                                        iterations=2, seed=i))
        ok &= torch.equal(zero.x_adv, x)
    return "epsilon ball", ok, f"max excess over epsilon {max(worst, 0.0):.2e}"


def check_token_counts():
    details, ok = [], True
    for n in (16, 64, 576):
        grid = int(math.isqrt(n))
        q = CompressedProjector(CompressedConfig(d_in=8, n_queries=4, d_model=16, d_out=8,
                                                 instruction_conditioning=False))
        out = q(torch.randn(1, n, 8)).shape[1]
        ok &= out == 4
        for p in (1, 2, 4):
            if grid % p:
                continue
            m = UncompressedProjector(UncompressedConfig(d_in=8, d_hidden=8, d_out=8, pool_factor=p))
            got = m(torch.randn(1, n, 8)).shape[1]
            ok &= got == n // p ** 2
            details.append(f"N={n},p={p}->{got}")
    return "token counts", ok, " ".join(details)


def check_forward_determinism():
    enc, q, m = _toy(torch.float32)
    x = torch.rand(2, 3, 32, 32, generator=torch.Generator().manual_seed(3))
    with torch.no_grad():
        a = m.float()(enc.float()(x))
        b = m(enc(x))
    return "forward determinism", torch.equal(a, b), ""


def check_registry(root):
    reg = Registry(root)
    bad = [mid for mid in reg.ids()
           if file_sha256(Path(root) / f"{mid}.npz") != reg.entry(mid)["sha256"]]
    return "registry checksums", not bad, f"{len(reg.ids())} entries, mismatched: {bad}"


def check_records(path):
    records, malformed = read_records(path)
    out_of_range = [r for r in records if r.status == "ok"
                    and not (0 <= r.clean_acc <= 100 and 0 <= r.adv_acc <= 100)]
    ok = malformed == 0 and not out_of_range
    return "records schema", ok, f"{len(records)} records, {malformed} malformed, " \
                                 f"{len(out_of_range)} out of range"


def run_all(registry_root=None, records_path=None):
    torch.set_num_threads(1)
    results = [check_loss_identities(), check_epsilon_ball(), check_token_counts(),
               check_forward_determinism()]
    if registry_root is not None and (Path(registry_root) / "index.json").exists():
        results.append(check_registry(registry_root))
    if records_path is not None and Path(records_path).exists():
        results.append(check_records(records_path))
    return results
