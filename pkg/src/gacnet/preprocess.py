"""Bilateral propagation: a first dense depth estimate from the sparse map.

Each pixel gathers its ``k_nearest`` valid neighbours inside a square
window and takes a softmax-weighted average of their depths. Weights come
from a small MLP over the pixel offset and the image-feature difference,
so the output is always a convex combination of measured depths.
"""
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import kernels
from ._cache import LRU, array_key
from .errors import ConfigurationError, DegenerateInputError


@dataclass
class BilateralConfig:
    window_radius: int = 7
    k_nearest: int = 8
    mlp_widths: list = field(default_factory=lambda: [16])

    def __post_init__(self):
        if self.window_radius < 1 or self.k_nearest < 1:
            raise ConfigurationError(f"invalid bilateral config {self}")


_neighbor_cache = LRU(2048)


def gather_neighbors(mask, radius, k):
    """Neighbour indices for a batch of masks: ``(B, H*W, k)`` (-1 padded).

    Results are memoized per mask since masks repeat across epochs.
    """
    out = []
    for m in np.asarray(mask, dtype=bool):
        out.append(_neighbor_cache.get(array_key(m, extra=(radius, k)),
                                       lambda: torch.as_tensor(kernels.window_knn(m, radius, k)[0])))
    return torch.stack(out)


class BilateralPropagation(nn.Module):
    def __init__(self, feat_channels, cfg=None):
        super().__init__()
        self.cfg = cfg or BilateralConfig()
        layers = []
        in_ch = 2 + feat_channels
        for w in self.cfg.mlp_widths:
            layers += [nn.Linear(in_ch, w), nn.ReLU()]
            in_ch = w
        layers.append(nn.Linear(in_ch, 1))
        self.mlp = nn.Sequential(*layers)

    def forward(self, sparse, image_feat, coarse_prior=None, neighbors=None):
        return bilateral_propagate(sparse, image_feat, coarse_prior, self.cfg, self.mlp, neighbors)


def bilateral_propagate(sparse, image_feat, coarse_prior, cfg, mlp, neighbors=None):
    """Dense ``(B, 1, H, W)`` depth from sparse ``(B, 1, H, W)`` depth.

    Pixels with no valid neighbour in their window fall back to
    ``coarse_prior`` or, failing that, the mean valid depth of the sample.
    Valid pixels keep their measurement exactly.
    """
    B, _, H, W = sparse.shape
    if image_feat.shape[-2:] != (H, W) or (coarse_prior is not None and coarse_prior.shape[-2:] != (H, W)):
        raise ConfigurationError("sparse depth, image features and prior must share spatial dims")
    mask = sparse > 0
    if neighbors is None:
        neighbors = gather_neighbors(mask[:, 0].cpu().numpy(), cfg.window_radius, cfg.k_nearest)
    has = neighbors >= 0
    q = neighbors.clamp(min=0)
    k = q.shape[-1]

    pix = torch.arange(H * W)
    du = (q % W - (pix % W)[:, None]).to(sparse.dtype) / cfg.window_radius
    dv = (q // W - (pix // W)[:, None]).to(sparse.dtype) / cfg.window_radius

    C = image_feat.shape[1]
    feat = image_feat.reshape(B, C, H * W).transpose(1, 2)          # B, HW, C
    feat_q = torch.gather(feat, 1, q.reshape(B, H * W * k, 1).expand(-1, -1, C)).reshape(B, H * W, k, C)
    x = torch.cat([du[..., None], dv[..., None], feat[:, :, None, :] - feat_q], dim=-1)
    logits = mlp(x)[..., 0].masked_fill(~has, float("-inf"))
    any_nb = has.any(dim=-1, keepdim=True)
    w = torch.softmax(torch.where(any_nb, logits, torch.zeros_like(logits)), dim=-1) * has

    s = sparse.reshape(B, H * W)
    depth_q = torch.gather(s, 1, q.reshape(B, H * W * k)).reshape(B, H * W, k)
    out = (w * depth_q).sum(dim=-1)

    if coarse_prior is not None:
        fallback = coarse_prior.reshape(B, H * W)
    else:
        n_valid = mask.reshape(B, -1).sum(dim=1)
        if bool((n_valid == 0).any()):
            raise DegenerateInputError("sparse depth has no valid pixels and no coarse prior is available")
        mean = (s * mask.reshape(B, -1)).sum(dim=1) / n_valid
        fallback = mean[:, None].expand(-1, H * W)
    out = torch.where(any_nb[..., 0], out, fallback)
    out = torch.where(mask.reshape(B, -1), s, out)
    return out.reshape(B, 1, H, W)
