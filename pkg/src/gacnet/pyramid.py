"""Six-scale, three-stage depth completion network.

Scale 0 is the coarsest (1/32 resolution) and scale 5 the full resolution.
Each scale runs preprocessing, fusion and refinement; the upsampled output
of scale ``x`` is the prior for scale ``x + 1``.
"""
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from . import kernels
from .errors import ConfigurationError, DegenerateInputError
from .fusion import CAFFM, ConcatFuse, UNet, unet_fuse
from .geometry import back_project
from .losses import upsample_bilinear
from .pointnet import (DEFAULT_GLOBAL_WIDTHS, DEFAULT_LEVELS, DEFAULT_MAX_POINTS, PointNetGlobal,
                       SetAbstractionConfig)
from .preprocess import BilateralConfig, BilateralPropagation
from .refine import KERNEL_SIZES, SNAPSHOT_STEPS, Refiner

FACTORS = (32, 16, 8, 4, 2, 1)
FUSION_MODES = ("caffm", "concat")


@dataclass
class ScaleConfig:
    index: int
    factor: int
    image_channels: int = 16
    depth_channels: int = 16
    unet_widths: list = field(default_factory=lambda: [32, 64])
    fusion_channels: int = 32
    window_radius: int = 7
    k_nearest: int = 8

    @property
    def fraction(self):
        return 1.0 / self.factor


def default_scales(width=1.0):
    """Per-scale configs; ``width`` scales every channel count."""
    radii = (7, 7, 15, 15, 31, 31)

    def c(n):
        return max(4, int(round(n * width)))

    out = []
    for x, f in enumerate(FACTORS):
        halvings = len(FACTORS) - 1 - x
        w1 = max(8, 32 >> halvings)
        out.append(ScaleConfig(index=x, factor=f, image_channels=c(16), depth_channels=c(16),
                               unet_widths=[c(w1), c(2 * w1)], fusion_channels=c(32),
                               window_radius=radii[x]))
    return out


@dataclass
class NetworkConfig:
    enable_preprocess: bool = True
    enable_3d_branch: bool = True
    fusion_mode: str = "caffm"
    droppath_rate: float = 0.1
    seed: int = 0
    depth_norm: float = 10.0
    bilateral_widths: list = field(default_factory=lambda: [16])
    kernel_sizes: list = field(default_factory=lambda: list(KERNEL_SIZES))
    snapshot_steps: list = field(default_factory=lambda: list(SNAPSHOT_STEPS))
    point_levels: list = field(default_factory=lambda: [asdict(c) for c in DEFAULT_LEVELS])
    point_global_widths: list = field(default_factory=lambda: list(DEFAULT_GLOBAL_WIDTHS))
    max_points: int = DEFAULT_MAX_POINTS
    scales: list = field(default_factory=default_scales)

    def __post_init__(self):
        self.scales = [s if isinstance(s, ScaleConfig) else ScaleConfig(**s) for s in self.scales]
        if [s.factor for s in self.scales] != list(FACTORS):
            raise ConfigurationError(f"scale factors must be {FACTORS}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigurationError(f"fusion_mode must be one of {FUSION_MODES}")

    @classmethod
    def compact(cls, width=0.5, **kw):
        """Same topology with every channel count scaled by ``width``."""
        return cls(scales=default_scales(width), **kw)

    @classmethod
    def toy(cls, **kw):
        """Desk-scale preset for 64x64 synthetic frames: quarter-width
        channels and a point encoder sized for a few hundred points (the
        default 512 centroids would take every point as a centroid)."""
        levels = [asdict(SetAbstractionConfig(128, 0.1, 16, [32, 64])),
                  asdict(SetAbstractionConfig(32, 0.25, 16, [64, 128]))]
        return cls(**{"scales": default_scales(0.25), "point_levels": levels, **kw})

    @classmethod
    def variant(cls, name, **kw):
        """Ablation rows: i two-stage, ii three-stage, iii +3D concat, iv +3D CAFFM."""
        flags = {
            "i": dict(enable_preprocess=False, enable_3d_branch=False, fusion_mode="caffm"),
            "ii": dict(enable_preprocess=True, enable_3d_branch=False, fusion_mode="caffm"),
            "iii": dict(enable_preprocess=True, enable_3d_branch=True, fusion_mode="concat"),
            "iv": dict(enable_preprocess=True, enable_3d_branch=True, fusion_mode="caffm"),
        }
        if name not in flags:
            raise ConfigurationError(f"unknown variant {name!r}")
        return cls(**{**kw, **flags[name]})

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


class ImageEncoder(nn.Module):
    """Strided conv pyramid; returns one feature map per scale, coarsest first."""

    def __init__(self, channels):
        super().__init__()
        channels = list(channels)            # coarsest first
        full = channels[-1]
        self.stem = nn.Sequential(nn.Conv2d(3, full, 3, padding=1), nn.ReLU(),
                                  nn.Conv2d(full, full, 3, padding=1), nn.ReLU())
        downs = []
        for cin, cout in zip(channels[::-1][:-1], channels[::-1][1:]):
            downs.append(nn.Sequential(nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.ReLU()))
        self.downs = nn.ModuleList(downs)

    def forward(self, image):
        H, W = image.shape[-2:]
        n = len(self.downs)
        if H % (1 << n) or W % (1 << n):
            raise ConfigurationError(f"image {H}x{W} must be divisible by {1 << n}")
        feats = [self.stem(image)]
        for down in self.downs:
            feats.append(down(feats[-1]))
        return feats[::-1]


def encode_image(image, encoder):
    return encoder(image)


def downsample_sparse(sparse, factor):
    """Block selection keeping the valid depth nearest the block median."""
    if factor not in FACTORS:
        raise ConfigurationError(f"factor must be one of {FACTORS}")
    return kernels.block_select(sparse, factor)


def nearest_valid_fill(sparse):
    """Every pixel takes the depth of its nearest valid pixel (ties to the
    lowest row-major index)."""
    sparse = np.asarray(sparse, dtype=np.float64)
    H, W = sparse.shape
    mask = sparse > 0
    if not mask.any():
        raise DegenerateInputError("nothing to fill from: no valid pixels")
    idx, _ = kernels.window_knn(mask, max(H, W), 1)
    return sparse.ravel()[idx[:, 0]].reshape(H, W)


class ScaleStage(nn.Module):
    def __init__(self, sc, cfg):
        super().__init__()
        self.cfg = sc
        self.depth_norm = cfg.depth_norm
        if cfg.enable_preprocess:
            self.preprocess = BilateralPropagation(
                sc.image_channels, BilateralConfig(sc.window_radius, sc.k_nearest, list(cfg.bilateral_widths)))
        else:
            self.preprocess = None
        self.depth_enc = nn.Sequential(nn.Conv2d(3, sc.depth_channels, 3, padding=1), nn.ReLU())
        self.unet = UNet(sc.image_channels + sc.depth_channels, tuple(sc.unet_widths), sc.fusion_channels)
        if not cfg.enable_3d_branch:
            self.fusion = None
        elif cfg.fusion_mode == "caffm":
            self.fusion = CAFFM(sc.fusion_channels)
        else:
            self.fusion = ConcatFuse(sc.fusion_channels)
        self.refiner = Refiner(sc.fusion_channels, cfg.kernel_sizes, cfg.snapshot_steps, cfg.droppath_rate,
                               depth_scale=cfg.depth_norm)

    def initial_depth(self, sparse, img_feat, prior):
        if self.preprocess is not None:
            return self.preprocess(sparse, img_feat, prior)
        filled = []
        for b, s in enumerate(sparse[:, 0].detach().cpu().numpy()):
            if (s > 0).any():
                filled.append(torch.as_tensor(nearest_valid_fill(s), dtype=sparse.dtype))
            elif prior is not None:
                filled.append(prior[b, 0])
            else:
                raise DegenerateInputError("no valid depth at the coarsest scale")
        return torch.stack(filled)[:, None]

    def forward(self, sparse, img_feat, prior, f3d):
        d_pre = self.initial_depth(sparse, img_feat, prior)
        n = self.depth_norm
        mask = (sparse > 0).to(sparse.dtype)
        depth_in = torch.cat([d_pre / n, (d_pre if prior is None else prior) / n, mask], dim=1)
        f_unet = unet_fuse(img_feat, self.depth_enc(depth_in), self.unet)
        if self.fusion is None:
            f_fused = f_unet
        else:
            f_fused = self.fusion(f_unet, f3d)
        return self.refiner(f_fused, d_pre, sparse)


class GACNet(nn.Module):
    def __init__(self, cfg=None):
        super().__init__()
        self.cfg = cfg or NetworkConfig()
        cfg = self.cfg
        self.image_encoder = ImageEncoder([s.image_channels for s in cfg.scales])
        self.pointnet = (PointNetGlobal(cfg.point_levels, cfg.point_global_widths, max_points=cfg.max_points)
                         if cfg.enable_3d_branch else None)
        self.stages = nn.ModuleList(ScaleStage(s, cfg) for s in cfg.scales)

    def sparse_pyramid(self, sparse):
        """Per-scale sparse inputs ``(B, 1, h, w)``, coarsest first."""
        arr = sparse[:, 0].detach().cpu().numpy()
        out = []
        for sc in self.cfg.scales:
            lv = np.stack([downsample_sparse(a, sc.factor) for a in arr])
            out.append(torch.as_tensor(lv, dtype=sparse.dtype)[:, None])
        return out

    def global_feature(self, sparse, intrinsics):
        clouds = [back_project(s, intr) for s, intr in zip(sparse[:, 0].detach().cpu().numpy(), intrinsics)]
        return self.pointnet(clouds)

    def forward(self, image, sparse, intrinsics, sparse_levels=None):
        """Depth predictions for all six scales, coarsest first.

        ``image`` is ``(B, 3, H, W)`` in [0, 1], ``sparse`` ``(B, 1, H, W)`` in
        meters, ``intrinsics`` one :class:`CameraIntrinsics` per sample.
        """
        B, _, H, W = sparse.shape
        if H % 32 or W % 32:
            raise ConfigurationError(f"input {H}x{W} must be divisible by 32")
        if bool(((sparse > 0).reshape(B, -1).sum(dim=1) == 0).any()):
            raise DegenerateInputError("every sample needs at least one valid sparse depth")
        img_feats = self.image_encoder(image)
        f3d = self.global_feature(sparse, intrinsics) if self.pointnet is not None else None
        if sparse_levels is None:
            sparse_levels = self.sparse_pyramid(sparse)
        preds = []
        prior = None
        for stage, s, feat in zip(self.stages, sparse_levels, img_feats):
            if preds:
                prior = upsample_bilinear(preds[-1], *s.shape[-2:])
            preds.append(stage(s, feat, prior, f3d))
        return preds
