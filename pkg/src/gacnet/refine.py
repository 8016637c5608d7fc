"""Depth refinement: residual correction followed by multi-kernel,
multi-step convolutional spatial propagation with sparse anchoring.

Updates are written in increment form, ``D_i + sum_j k_ij (D_j - D_i)``,
which equals ``k_i D_i + sum_j k_ij D_j`` but leaves constant maps and
identity kernels bit-exact.
"""
import torch
import torch.nn.functional as F
from torch import nn

KERNEL_SIZES = (3, 5, 7)
SNAPSHOT_STEPS = (1, 2, 4)


def neighbor_stack(d, ksize):
    """``(B, ksize**2 - 1, H, W)`` neighbour values, row-major, centre
    removed, replicate padding at the borders."""
    B, _, H, W = d.shape
    r = ksize // 2
    cols = F.unfold(F.pad(d, (r, r, r, r), mode="replicate"), ksize).view(B, ksize * ksize, H, W)
    c = (ksize * ksize) // 2
    return torch.cat([cols[:, :c], cols[:, c + 1:]], dim=1)


def kernel_size_of(n_neighbors):
    ksize = int(round((n_neighbors + 1) ** 0.5))
    if ksize * ksize - 1 != n_neighbors:
        raise ValueError(f"{n_neighbors} neighbours is not a square window minus its centre")
    return ksize


def normalize_affinity(raw):
    """Divide by the per-pixel absolute sum (0 where that sum is 0).

    Returns ``(k_neighbors, k_self)`` with ``k_self = 1 - sum(k_neighbors)``.
    """
    s = raw.abs().sum(dim=1, keepdim=True)
    k = raw / torch.where(s > 0, s, torch.ones_like(s))
    return k, 1 - k.sum(dim=1, keepdim=True)


def with_center(k):
    """Insert a zero weight for the centre so ``k`` lines up with a full
    ``ksize**2`` unfold."""
    c = k.shape[1] // 2
    return torch.cat([k[:, :c], torch.zeros_like(k[:, :1]), k[:, c:]], dim=1)


def propagate_step(d, k):
    """One synchronous propagation step with normalized neighbour weights.

    ``k`` holds either the ``ksize**2 - 1`` neighbour weights or the full
    window from :func:`with_center`.
    """
    ksize = int(round(k.shape[1] ** 0.5))
    if ksize * ksize != k.shape[1]:
        ksize = kernel_size_of(k.shape[1])
        k = with_center(k)
    B, _, H, W = d.shape
    r = ksize // 2
    nb = F.unfold(F.pad(d, (r, r, r, r), mode="replicate"), ksize).view(B, ksize * ksize, H, W)
    return d + (k * (nb - d)).sum(dim=1, keepdim=True)


def apply_sparse_constraint(d, sparse, gamma, mask=None):
    """Blend toward the measurement with confidence ``gamma`` (forced to 0
    where ``sparse`` is invalid)."""
    if mask is None:
        mask = sparse > 0
    gamma = gamma * mask.to(gamma.dtype)
    return (1 - gamma) * d + gamma * sparse


def drop_path_mask(batch, rate, dtype, generator=None):
    keep = 1.0 - rate
    m = torch.rand(batch, generator=generator, dtype=torch.float64) < keep
    return m.to(dtype)[:, None, None, None] / keep


def residual_correct(f_fused, d_pre, proj, droppath_rate=0.0, training=False, scale=1.0, keep=None):
    """``d_pre + scale * proj(f_fused)``; during training the residual is
    zeroed per sample with probability ``droppath_rate`` (survivors
    rescaled). ``keep`` forces the per-sample mask."""
    delta = proj(f_fused) * scale
    if keep is None and training and droppath_rate > 0:
        keep = drop_path_mask(d_pre.shape[0], droppath_rate, delta.dtype)
    if keep is not None:
        delta = delta * keep.reshape(-1, 1, 1, 1).to(delta.dtype)
    return d_pre + delta


def fuse_snapshots(snaps, tau):
    """Per-pixel weighted sum of snapshots ``(B, n, H, W)``.

    Accumulated as a running convex blend so that one-hot weights return a
    snapshot exactly and identical snapshots are returned unchanged.
    """
    out = snaps[:, :1]
    acc = tau[:, :1]
    for i in range(1, snaps.shape[1]):
        t = tau[:, i:i + 1]
        acc = acc + t
        w = t / torch.where(acc > 0, acc, torch.ones_like(acc))
        out = torch.lerp(out, snaps[:, i:i + 1], w)
    return out


class Refiner(nn.Module):
    def __init__(self, channels, kernel_sizes=KERNEL_SIZES, steps=SNAPSHOT_STEPS, droppath_rate=0.0,
                 depth_scale=1.0):
        super().__init__()
        self.kernel_sizes = tuple(kernel_sizes)
        self.steps = tuple(sorted(steps))
        self.droppath_rate = droppath_rate
        self.depth_scale = depth_scale
        self.residual = nn.Conv2d(channels, 1, 1)
        nn.init.zeros_(self.residual.weight)
        nn.init.zeros_(self.residual.bias)
        # one conv emits raw affinities per kernel, then confidences, then tau logits
        self.split = [k * k - 1 for k in self.kernel_sizes] + [len(self.kernel_sizes),
                                                               len(self.kernel_sizes) * len(self.steps)]
        self.head = nn.Conv2d(channels, sum(self.split), 3, padding=1)

    def heads(self, f_fused):
        """``(raw affinities per kernel, confidence logits, tau logits)``."""
        *aff, conf, tau = torch.split(self.head(f_fused), self.split, dim=1)
        return aff, conf, tau

    def forward(self, f_fused, d_pre, sparse, gamma=None, tau=None, keep=None):
        """Refined ``(B, 1, H, W)`` depth.

        ``gamma`` (per kernel list or a single map) and ``tau`` override the
        learned confidence and fusion weights.
        """
        d0 = residual_correct(f_fused, d_pre, self.residual, self.droppath_rate, self.training,
                              self.depth_scale, keep)
        aff, conf, tau_logits = self.heads(f_fused)
        snaps = []
        valid = (sparse > 0).to(sparse.dtype)
        for i in range(len(self.kernel_sizes)):
            k = with_center(normalize_affinity(aff[i])[0])
            if gamma is None:
                g = torch.sigmoid(conf[:, i:i + 1])
            else:
                g = gamma[i] if isinstance(gamma, (list, tuple)) else gamma
            g = g * valid
            d = d0
            for t in range(1, self.steps[-1] + 1):
                # apply_sparse_constraint with gamma already masked
                d = (1 - g) * propagate_step(d, k) + g * sparse
                if t in self.steps:
                    snaps.append(d)
        snaps = torch.cat(snaps, dim=1)
        if tau is None:
            tau = torch.softmax(tau_logits, dim=1)
        return fuse_snapshots(snaps, tau).clamp(min=0)


def refine(f_fused, d_pre, sparse, module, **overrides):
    return module(f_fused, d_pre, sparse, **overrides)
