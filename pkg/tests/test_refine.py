import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from gacnet.refine import (Refiner, apply_sparse_constraint, drop_path_mask, fuse_snapshots,
                           normalize_affinity, propagate_step, refine, residual_correct, with_center)
from gradutil import relative_error

T = torch.float64


def test_normalize_examples():
    k, ks = normalize_affinity(torch.zeros(1, 8, 2, 2, dtype=T))
    assert not k.any() and torch.all(ks == 1)
    k, ks = normalize_affinity(torch.ones(1, 8, 1, 1, dtype=T))
    assert torch.all(k == 0.125) and ks.item() == 0
    k, ks = normalize_affinity(torch.tensor([2.0, -2.0], dtype=T).view(1, 2, 1, 1))
    assert k.view(-1).tolist() == [0.5, -0.5] and ks.item() == 1


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([3, 5, 7]))
def test_normalization_identity(seed, ks):
    raw = torch.randn(2, ks * ks - 1, 5, 6, generator=torch.Generator().manual_seed(seed), dtype=T)
    k, kself = normalize_affinity(raw * 10)
    assert torch.all((kself + k.sum(1, keepdim=True) - 1).abs() <= 1e-6)
    assert torch.all(k.abs().sum(1) <= 1 + 1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 100), st.sampled_from([3, 5, 7]), st.integers(0, 1000))
def test_constant_fixed_point_exact(c, ks, seed):
    k, _ = normalize_affinity(torch.randn(1, ks * ks - 1, 6, 5, generator=torch.Generator().manual_seed(seed),
                                          dtype=T))
    d = torch.full((1, 1, 6, 5), c, dtype=T)
    out = d
    for _ in range(4):
        out = propagate_step(out, k)
    assert torch.equal(out, d)


def test_identity_kernel_and_neighbor_mean():
    d = torch.rand(1, 1, 4, 4, dtype=T)
    assert torch.equal(propagate_step(d, torch.zeros(1, 8, 4, 4, dtype=T)), d)
    assert torch.equal(propagate_step(d, with_center(torch.zeros(1, 48, 4, 4, dtype=T))), d)
    d = torch.arange(9, dtype=T).view(1, 1, 3, 3)
    k, ks = normalize_affinity(torch.ones(1, 8, 3, 3, dtype=T))
    out = propagate_step(d, k)
    ref = oracles.propagate_step(d[0, 0].numpy(), k[0].numpy(), ks[0, 0].numpy())
    np.testing.assert_allclose(out[0, 0].numpy(), ref, atol=1e-14)
    assert abs(out[0, 0, 1, 1].item() - np.mean([0, 1, 2, 3, 5, 6, 7, 8])) < 1e-14


def test_max_principle_nonnegative_kernels():
    g = torch.Generator().manual_seed(0)
    for ks in (3, 5, 7):
        k, _ = normalize_affinity(torch.rand(1, ks * ks - 1, 7, 7, generator=g, dtype=T))
        d = torch.rand(1, 1, 7, 7, generator=g, dtype=T) * 10
        out = propagate_step(d, k)
        assert out.min() >= d.min() - 1e-12 and out.max() <= d.max() + 1e-12


def test_sparse_constraint_examples():
    d = torch.tensor([[[[4.0, 1.0]]]], dtype=T)
    s = torch.tensor([[[[2.0, 0.0]]]], dtype=T)
    out = apply_sparse_constraint(d, s, torch.ones_like(d))
    assert out.view(-1).tolist() == [2.0, 1.0]
    assert torch.equal(apply_sparse_constraint(d, s, torch.zeros_like(d)), d)
    assert apply_sparse_constraint(d, s, torch.full_like(d, 0.5))[0, 0, 0, 0].item() == 3.0


def test_residual_and_droppath():
    proj = torch.nn.Conv2d(2, 1, 1).double()
    f = torch.randn(3, 2, 2, 2, dtype=T)
    d = torch.rand(3, 1, 2, 2, dtype=T)
    with torch.no_grad():
        proj.weight.zero_()
        proj.bias.zero_()
    assert torch.equal(residual_correct(f, d, proj), d)
    with torch.no_grad():
        proj.weight.copy_(torch.tensor([0.5, -2.0], dtype=T).view(1, 2, 1, 1))
        proj.bias.fill_(0.25)
    out = residual_correct(f, d, proj)
    ref = d + 0.5 * f[:, :1] - 2 * f[:, 1:] + 0.25
    assert torch.allclose(out, ref, atol=1e-15)
    kept = residual_correct(f, d, proj, keep=torch.tensor([0.0, 1.0, 0.0], dtype=T))
    assert torch.equal(kept[0], d[0]) and torch.equal(kept[2], d[2])
    torch.manual_seed(0)
    m = drop_path_mask(20000, 0.1, T)
    assert set(m.view(-1).tolist()) <= {0.0, 1 / 0.9}
    assert abs((m > 0).double().mean().item() - 0.9) < 0.01


def test_fuse_snapshots_exact_cases():
    snaps = torch.rand(2, 9, 3, 3, dtype=T)
    for j in range(9):
        tau = torch.zeros(2, 9, 3, 3, dtype=T)
        tau[:, j] = 1
        assert torch.equal(fuse_snapshots(snaps, tau), snaps[:, j:j + 1])
    same = snaps[:, :1].expand(-1, 9, -1, -1)
    tau = torch.softmax(torch.randn(2, 9, 3, 3, dtype=T), 1)
    assert torch.equal(fuse_snapshots(same, tau), snaps[:, :1])
    uni = torch.full((2, 9, 3, 3), 1 / 9, dtype=T)
    assert torch.allclose(fuse_snapshots(snaps, uni), snaps.mean(1, keepdim=True), atol=1e-14)


def small_instance(C=3, H=5, W=5, seed=0):
    g = torch.Generator().manual_seed(seed)
    f = torch.randn(1, C, H, W, generator=g, dtype=T)
    d_pre = torch.rand(1, 1, H, W, generator=g, dtype=T) * 5 + 1
    s = (torch.rand(1, 1, H, W, generator=g, dtype=T) * 5 + 1) * (torch.rand(1, 1, H, W, generator=g) < 0.3)
    return f, d_pre, s


def test_refine_selector_and_anchoring():
    r = Refiner(3).double().eval()
    torch.nn.init.normal_(r.residual.weight)
    f, d_pre, s = small_instance()
    tau = torch.zeros(1, 9, 5, 5, dtype=T)
    tau[:, 0] = 1
    out = refine(f, d_pre, s, r, tau=tau)
    d0 = residual_correct(f, d_pre, r.residual, scale=r.depth_scale)
    aff, conf, _ = r.heads(f)
    k = normalize_affinity(aff[0])[0]
    snap = apply_sparse_constraint(propagate_step(d0, k), s, torch.sigmoid(conf[:, :1]))
    assert torch.equal(out, snap.clamp(min=0))
    anchored = r(f, d_pre, s, gamma=torch.ones_like(s))
    mask = s > 0
    assert torch.equal(anchored[mask], s[mask])


def test_tau_simplex():
    r = Refiner(4).double()
    f = torch.randn(2, 4, 6, 6, dtype=T) * 10
    tau = torch.softmax(r.heads(f)[2], 1)
    assert torch.all(tau >= 0) and torch.all((tau.sum(1) - 1).abs() <= 1e-6)


def test_refine_gradients():
    r = Refiner(2, depth_scale=2.0).double().eval()
    with torch.no_grad():
        r.residual.weight.normal_()
    f, d_pre, s = small_instance(C=2, H=4, W=4, seed=3)
    f.requires_grad_(True)
    w = torch.randn(1, 1, 4, 4, dtype=T)
    params = [f, r.head.weight, r.head.bias, r.residual.weight]
    assert relative_error(lambda: (r(f, d_pre, s) * w).sum(), params, max_entries=60) < 1e-4
