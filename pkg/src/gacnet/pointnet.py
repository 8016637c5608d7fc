"""Encoder-only hierarchical point-set network producing one 256-d scene
vector from the back-projected sparse depth."""
import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import kernels
from ._cache import LRU, array_key
from .errors import ConfigurationError
from .geometry import normalize_point_cloud, sample_point_cloud

log = logging.getLogger(__name__)

GLOBAL_DIM = 256


@dataclass
class SetAbstractionConfig:
    n_centroids: int
    radius: float
    k_neighbors: int
    mlp_widths: list = field(default_factory=list)

    def __post_init__(self):
        if self.n_centroids < 1 or self.radius <= 0 or self.k_neighbors < 1 or not self.mlp_widths:
            raise ConfigurationError(f"invalid set-abstraction config {self}")


DEFAULT_LEVELS = (
    SetAbstractionConfig(512, 0.1, 32, [32, 64]),
    SetAbstractionConfig(128, 0.25, 32, [64, 128]),
)
DEFAULT_GLOBAL_WIDTHS = (128, 256)
DEFAULT_MAX_POINTS = 2048


def content_seed(points):
    """Seed derived from the multiset of points (order independent)."""
    canon = canonical_order(points)
    digest = hashlib.blake2b(np.ascontiguousarray(canon, dtype=np.float64).tobytes(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def canonical_order(points):
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        return points.reshape(0, 3)
    order = np.lexsort((points[:, 2], points[:, 1], points[:, 0]))
    return points[order]


def farthest_point_sample(pc, m, seed=None, start=None):
    """``m`` indices chosen greedily by max min-distance; the first index is
    a seeded draw unless ``start`` is given."""
    n = len(pc)
    if n < 1 or m > n:
        raise ConfigurationError(f"cannot sample {m} of {n} points")
    if start is None:
        start = int(np.random.default_rng(seed).integers(n))
    return kernels.fps(pc, m, start)


def ball_group(pc, centers, cfg):
    """Group indices ``(M, k)`` and local coordinates ``(M, k, 3)``."""
    pc = np.asarray(pc, dtype=np.float64)
    idx = kernels.ball_query(pc, centers, cfg.radius, cfg.k_neighbors)
    local = pc[idx] - pc[np.asarray(centers)][:, None, :]
    return idx, local


class SharedMLP(nn.Sequential):
    """Pointwise Linear+ReLU stack over the last axis."""

    def __init__(self, in_ch, widths):
        layers = []
        for w in widths:
            layers += [nn.Linear(in_ch, w), nn.ReLU()]
            in_ch = w
        super().__init__(*layers)
        self.out_channels = in_ch


def set_abstraction(xyz, feats, idx, centers, mlp):
    """Shared MLP over (local coords + inherited features), max over each group.

    ``xyz`` is ``(N, 3)``, ``feats`` ``(N, C)`` or None, ``idx`` ``(M, k)``.
    Returns ``(M, C_out)``.
    """
    local = xyz[idx] - xyz[centers][:, None, :]
    x = local if feats is None else torch.cat([local, feats[idx]], dim=-1)
    return mlp(x).max(dim=1).values


class PointNetGlobal(nn.Module):
    def __init__(self, levels=DEFAULT_LEVELS, global_widths=DEFAULT_GLOBAL_WIDTHS,
                 out_dim=GLOBAL_DIM, max_points=DEFAULT_MAX_POINTS):
        super().__init__()
        self.levels = [SetAbstractionConfig(**c) if isinstance(c, dict) else c for c in levels]
        self.max_points = max_points
        self.out_dim = out_dim
        self.sa = nn.ModuleList()
        in_ch = 3
        for cfg in self.levels:
            mlp = SharedMLP(in_ch, cfg.mlp_widths)
            self.sa.append(mlp)
            in_ch = 3 + mlp.out_channels
        self.global_mlp = SharedMLP(in_ch, global_widths)
        self.proj = nn.Linear(self.global_mlp.out_channels, out_dim)
        self.calls = 0
        self._plans = LRU(1024)

    def prepare(self, pc):
        """Dedupe into canonical order, seeded cap, unit-sphere normalization.

        Working on the sorted unique set makes the result independent of
        input order and of repeated points.
        """
        pc = np.unique(np.asarray(pc, dtype=np.float64), axis=0)
        seed = content_seed(pc)
        pc = sample_point_cloud(pc, self.max_points, seed)
        return normalize_point_cloud(pc)[0], seed

    def forward(self, pc):
        """Encode one ``(N, 3)`` cloud to ``(256,)``, or a list of clouds to
        ``(B, 256)``. Each call counts as one encoder invocation."""
        self.calls += 1
        if isinstance(pc, (list, tuple)):
            return torch.stack([self._encode(c) for c in pc])
        return self._encode(pc)

    def plan(self, pc):
        """Normalized points and per-level (centers, group index) arrays.

        These depend only on the input cloud, so they are memoized.
        """
        def make():
            pts, seed = self.prepare(pc)
            xyz = pts
            steps = []
            for cfg in self.levels:
                centers = farthest_point_sample(xyz, min(cfg.n_centroids, len(xyz)), seed=seed)
                idx, _ = ball_group(xyz, centers, cfg)
                steps.append((torch.as_tensor(centers), torch.as_tensor(idx)))
                xyz = xyz[centers]
            return pts, steps

        return self._plans.get(array_key(pc, extra=(self.max_points, repr(self.levels))), make)

    def _encode(self, pc):
        p = next(self.parameters())
        if len(pc) == 0:
            log.warning("empty point cloud: global feature set to zeros")
            return torch.zeros(self.out_dim, dtype=p.dtype, device=p.device)
        pts, steps = self.plan(np.asarray(pc, dtype=np.float64))
        xyz = torch.as_tensor(pts, dtype=p.dtype, device=p.device)
        feats = None
        for (centers, idx), mlp in zip(steps, self.sa):
            feats = set_abstraction(xyz, feats, idx, centers, mlp)
            xyz = xyz[centers]
        x = torch.cat([xyz, feats], dim=-1)
        return self.proj(self.global_mlp(x).max(dim=0).values)


def extract_global_feature(pc, net):
    """Convenience wrapper: normalizes, encodes and returns a numpy vector."""
    with torch.no_grad():
        return net(pc).cpu().numpy()
