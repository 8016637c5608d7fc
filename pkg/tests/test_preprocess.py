import numpy as np
import pytest
import torch

from gacnet.errors import ConfigurationError, DegenerateInputError
from gacnet.preprocess import BilateralConfig, BilateralPropagation


def make(C=3, radius=7, k=8):
    torch.manual_seed(0)
    return BilateralPropagation(C, BilateralConfig(radius, k, [8])).double()


def test_fully_valid_is_identity():
    m = make()
    s = torch.rand(2, 1, 5, 6, dtype=torch.float64) + 0.5
    out = m(s, torch.rand(2, 3, 5, 6, dtype=torch.float64))
    assert torch.equal(out, s)


def test_single_valid_pixel_everywhere():
    m = make(radius=8)
    s = torch.zeros(1, 1, 6, 6, dtype=torch.float64)
    s[0, 0, 2, 3] = 4.25
    out = m(s, torch.rand(1, 3, 6, 6, dtype=torch.float64))
    assert torch.all(out == 4.25)


def test_zero_mlp_is_window_mean(rng):
    m = make(radius=2, k=8)
    for p in m.parameters():
        torch.nn.init.zeros_(p)
    s = np.zeros((4, 4))
    s[0, 0], s[3, 2] = 2.0, 6.0
    out = m(torch.tensor(s)[None, None], torch.rand(1, 3, 4, 4, dtype=torch.float64))[0, 0].detach().numpy()
    mean = s[s > 0].mean()
    for v in range(4):
        for u in range(4):
            if s[v, u] > 0:
                assert out[v, u] == s[v, u]
                continue
            nb = [s[vv, uu] for vv in range(4) for uu in range(4)
                  if s[vv, uu] > 0 and max(abs(vv - v), abs(uu - u)) <= 2]
            assert abs(out[v, u] - (np.mean(nb) if nb else mean)) < 1e-12


def test_fallbacks_and_errors():
    m = make(radius=1)
    s = torch.zeros(1, 1, 6, 6, dtype=torch.float64)
    s[0, 0, 0, 0] = 3.0
    s[0, 0, 0, 1] = 5.0
    feat = torch.rand(1, 3, 6, 6, dtype=torch.float64)
    out = m(s, feat)
    assert out[0, 0, 5, 5] == 4.0                      # global mean
    prior = torch.full((1, 1, 6, 6), 7.0, dtype=torch.float64)
    assert m(s, feat, prior)[0, 0, 5, 5] == 7.0
    with pytest.raises(DegenerateInputError):
        m(torch.zeros(1, 1, 6, 6, dtype=torch.float64), feat)
    with pytest.raises(ConfigurationError):
        m(s, torch.rand(1, 3, 5, 6, dtype=torch.float64))


def test_convex_anchor_and_scaling(rng):
    m = make(radius=3, k=4)
    s = torch.tensor(rng.uniform(1, 9, (2, 1, 9, 9)) * (rng.random((2, 1, 9, 9)) < 0.2))
    s[:, 0, 0, 0] = 2.0
    feat = torch.rand(2, 3, 9, 9, dtype=torch.float64)
    out = m(s, feat, torch.full_like(s, 5.0))
    mask = s > 0
    assert torch.equal(out[mask], s[mask])
    np.testing.assert_allclose(m(3 * s, feat, torch.full_like(s, 15.0)).detach().numpy(),
                               3 * out.detach().numpy(), rtol=1e-12)
    sn = s[0, 0].numpy()
    for v in range(9):
        for u in range(9):
            nb = sn[max(0, v - 3):v + 4, max(0, u - 3):u + 4]
            nb = nb[nb > 0]
            if len(nb) and not sn[v, u] > 0:
                assert nb.min() - 1e-12 <= out[0, 0, v, u] <= nb.max() + 1e-12
