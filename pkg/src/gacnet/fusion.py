"""Multimodal fusion: early fusion of image and depth features with a small
U-Net, then channel-attention fusion (CAFFM) with the global 3D vector."""
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError

FUSION_CHANNELS = 32
REDUCTION = 4


def _conv(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.ReLU())


class UNet(nn.Module):
    """Two down / two up levels with skip connections.

    Inputs whose sides are not multiples of 4 are replicate-padded and the
    output cropped back, so any size works.
    """

    def __init__(self, in_ch, widths=(32, 64), out_ch=FUSION_CHANNELS):
        super().__init__()
        w1, w2 = widths
        self.in_channels = in_ch
        self.enc0 = _conv(in_ch, w1)
        self.enc1 = _conv(w1, w2, stride=2)
        self.enc2 = _conv(w2, w2, stride=2)
        self.dec1 = _conv(w2 + w2, w2)
        self.dec0 = _conv(w2 + w1, w1)
        self.out = nn.Conv2d(w1, out_ch, 1)

    def forward(self, x):
        H, W = x.shape[-2:]
        ph, pw = -H % 4, -W % 4
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="replicate")
        e0 = self.enc0(x)
        e1 = self.enc1(e0)
        e2 = self.enc2(e1)
        d1 = self.dec1(torch.cat([F.interpolate(e2, size=e1.shape[-2:], mode="nearest"), e1], dim=1))
        d0 = self.dec0(torch.cat([F.interpolate(d1, size=e0.shape[-2:], mode="nearest"), e0], dim=1))
        return self.out(d0)[..., :H, :W]


def unet_fuse(image_feat, depth_feat, unet):
    if image_feat.shape[-2:] != depth_feat.shape[-2:]:
        raise ConfigurationError(
            f"image features {tuple(image_feat.shape[-2:])} and depth features "
            f"{tuple(depth_feat.shape[-2:])} differ in size")
    return unet(torch.cat([image_feat, depth_feat], dim=1))


def open_sigmoid(x):
    """Sigmoid kept strictly inside (0, 1) even where it saturates."""
    eps = torch.finfo(x.dtype).eps
    return torch.sigmoid(x).clamp(eps, 1 - eps)


class ChannelAttention(nn.Module):
    """Squeeze-and-excitation gate: global average pool, bottleneck FC, sigmoid."""

    def __init__(self, channels, reduction=REDUCTION):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x):
        if x.dim() == 4:
            x = x.mean(dim=(2, 3))
        return open_sigmoid(self.fc2(torch.relu(self.fc1(x))))


def broadcast_global(f3d, proj, H, W):
    """Project ``(B, 256)`` to ``(B, C, H, W)`` by a linear map and tiling."""
    v = proj(f3d)
    return v[:, :, None, None].expand(-1, -1, H, W)


def weighted_fusion(f_unet, b, a_unet, a_3d):
    """``A_unet * F_unet + A_3d * B`` with per-channel weights ``(B, C)``."""
    return a_unet[:, :, None, None] * f_unet + a_3d[:, :, None, None] * b


class CAFFM(nn.Module):
    def __init__(self, channels=FUSION_CHANNELS, global_dim=256, reduction=REDUCTION):
        super().__init__()
        self.channels = channels
        self.proj = nn.Linear(global_dim, channels)
        self.att_unet = ChannelAttention(channels, reduction)
        self.att_3d = ChannelAttention(channels, reduction)

    def forward(self, f_unet, f3d, a_unet=None, a_3d=None):
        """``a_unet`` / ``a_3d`` override the learned gates when given.

        Without a 3D feature (branch disabled) the 2D features pass through,
        gated only by an explicitly supplied ``a_unet``.
        """
        if f_unet.shape[1] != self.channels:
            raise ConfigurationError(f"expected {self.channels} channels, got {f_unet.shape[1]}")
        if f3d is None:
            return f_unet if a_unet is None else a_unet[:, :, None, None] * f_unet
        b = broadcast_global(f3d, self.proj, *f_unet.shape[-2:])
        if a_unet is None:
            a_unet = self.att_unet(f_unet)
        if a_3d is None:
            # pooling the tiled map is the projected vector itself
            a_3d = self.att_3d(b[:, :, 0, 0])
        return weighted_fusion(f_unet, b, a_unet, a_3d)


class ConcatFuse(nn.Module):
    """Ablation stand-in for CAFFM: concatenate and project back with a 1x1 conv."""

    def __init__(self, channels=FUSION_CHANNELS, global_dim=256):
        super().__init__()
        self.channels = channels
        self.proj = nn.Linear(global_dim, channels)
        self.mix = nn.Conv2d(2 * channels, channels, 1)

    def forward(self, f_unet, f3d):
        if f_unet.shape[1] != self.channels:
            raise ConfigurationError(f"expected {self.channels} channels, got {f_unet.shape[1]}")
        b = broadcast_global(f3d, self.proj, *f_unet.shape[-2:])
        return self.mix(torch.cat([f_unet, b], dim=1))


def caffm(f_unet, f3d, module, a_unet=None, a_3d=None):
    return module(f_unet, f3d, a_unet, a_3d)


def concat_fuse(f_unet, f3d, module):
    return module(f_unet, f3d)
