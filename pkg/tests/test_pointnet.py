import numpy as np
import pytest
import torch

from gradutil import relative_error
from gacnet.errors import ConfigurationError
from gacnet.pointnet import (GLOBAL_DIM, PointNetGlobal, SetAbstractionConfig, SharedMLP, ball_group,
                             extract_global_feature, farthest_point_sample, set_abstraction)


def test_fps_contract(rng):
    pc = rng.normal(size=(20, 3))
    assert sorted(farthest_point_sample(pc, 20, seed=3).tolist()) == list(range(20))
    first = int(np.random.default_rng(5).integers(20))
    assert farthest_point_sample(pc, 1, seed=5).tolist() == [first]
    line = np.array([[0, 0, 0.0], [0, 0, 1], [0, 0, 10]])
    assert farthest_point_sample(line, 2, start=0).tolist() == [0, 2]
    with pytest.raises(ConfigurationError):
        farthest_point_sample(pc, 21, seed=0)


def test_ball_group_padding_and_exhaustive(rng):
    pc = np.array([[0, 0, 0.0], [3, 3, 3], [3.05, 3, 3]])
    idx, local = ball_group(pc, [0], SetAbstractionConfig(1, 0.1, 4, [8]))
    assert idx.tolist() == [[0, 0, 0, 0]] and not local.any()
    pc = rng.normal(size=(7, 3))
    idx, _ = ball_group(pc, [2, 5], SetAbstractionConfig(1, np.inf, 7, [8]))
    assert all(sorted(r) == list(range(7)) for r in idx.tolist())


def test_set_abstraction_hand_weights():
    mlp = SharedMLP(3, [2]).double()
    with torch.no_grad():
        mlp[0].weight.copy_(torch.tensor([[1.0, 0, 0], [0, -1, 2]]))
        mlp[0].bias.copy_(torch.tensor([0.5, 0.0]))
    xyz = torch.tensor([[0.0, 0, 0], [1, 2, 3], [-2, 1, 0.5]], dtype=torch.float64)
    idx = torch.tensor([[1, 2]])
    out = set_abstraction(xyz, None, idx, torch.tensor([0]), mlp)
    a = np.maximum([1 + 0.5, -2 + 6], 0)
    b = np.maximum([-2 + 0.5, -1 + 1], 0)
    np.testing.assert_allclose(out[0].detach().numpy(), np.maximum(a, b))
    same = set_abstraction(xyz, None, torch.tensor([[1, 1, 1]]), torch.tensor([0]), mlp)
    np.testing.assert_array_equal(same[0].detach().numpy(), mlp(xyz[1:2])[0].detach().numpy())
    perm = set_abstraction(xyz, None, torch.tensor([[2, 1]]), torch.tensor([0]), mlp)
    np.testing.assert_array_equal(perm.detach().numpy(), out.detach().numpy())


def test_global_feature_shape_and_invariances(rng):
    net = PointNetGlobal()
    pc = rng.normal(size=(300, 3)) * [5, 1, 10] + [0, 1, 20]
    f = extract_global_feature(pc, net)
    assert f.shape == (GLOBAL_DIM,) and np.all(np.isfinite(f))
    for _ in range(10):
        g = extract_global_feature(pc[rng.permutation(len(pc))], net)
        assert np.abs(f - g).max() <= 1e-5
    dup = extract_global_feature(np.concatenate([pc, pc]), net)
    np.testing.assert_array_equal(dup, f)


def test_global_feature_float64_permutation(rng):
    net = PointNetGlobal().double()
    pc = rng.normal(size=(200, 3))
    f = extract_global_feature(pc, net)
    g = extract_global_feature(pc[::-1].copy(), net)
    assert np.abs(f - g).max() <= 1e-10


def test_empty_cloud_gives_zeros(caplog):
    net = PointNetGlobal()
    with caplog.at_level("WARNING"):
        f = extract_global_feature(np.zeros((0, 3)), net)
    assert f.shape == (256,) and not f.any()
    assert "empty point cloud" in caplog.text


def test_input_cap(rng):
    net = PointNetGlobal(max_points=64)
    pts, _ = net.prepare(rng.normal(size=(500, 3)))
    assert len(pts) == 64


def test_call_counter(rng):
    net = PointNetGlobal()
    net([rng.normal(size=(20, 3)), rng.normal(size=(30, 3))])
    assert net.calls == 1


def test_gradcheck_small_cloud(rng):
    net = PointNetGlobal(levels=[SetAbstractionConfig(4, 0.6, 3, [4]), SetAbstractionConfig(2, 1.5, 2, [5])],
                         global_widths=[6], out_dim=3).double()
    pc = rng.normal(size=(10, 3))
    w = torch.tensor([0.3, -1.2, 0.7], dtype=torch.float64)
    assert relative_error(lambda: (net(pc) * w).sum(), list(net.parameters())) < 1e-4
