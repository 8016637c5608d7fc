"""Multi-scale L2 supervision and KITTI-style error metrics."""
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .errors import DegenerateInputError

N_SCALES = 6


def loss_weights(n_scales=N_SCALES):
    """``4**-x`` for scale ``x``, coarsest first."""
    return [4.0 ** -x for x in range(n_scales)]


def _source_coords(n_out, n_in, dtype):
    # align_corners=False
    src = (torch.arange(n_out, dtype=dtype) + 0.5) * (n_in / n_out) - 0.5
    src = src.clamp(min=0)
    i0 = src.floor().long().clamp(max=n_in - 1)
    i1 = (i0 + 1).clamp(max=n_in - 1)
    return i0, i1, src - i0.to(dtype)


def upsample_bilinear(d, height, width):
    """Bilinear resize of ``(..., h, w)`` with half-pixel centres.

    Written with ``lerp`` so constant inputs come back exactly.
    """
    h, w = d.shape[-2:]
    if (h, w) == (height, width):
        return d
    i0, i1, a = _source_coords(height, h, d.dtype)
    rows = torch.lerp(d[..., i0, :], d[..., i1, :], a[:, None])
    j0, j1, b = _source_coords(width, w, d.dtype)
    return torch.lerp(rows[..., j0], rows[..., j1], b)


def multiscale_loss(preds, gt):
    """Weighted sum over scales of the mean squared error on valid gt pixels.

    ``preds`` are ``(B, 1, h_x, w_x)`` tensors ordered coarsest first; ``gt``
    is ``(B, 1, H, W)`` with 0 marking missing ground truth.
    """
    mask = gt > 0
    n = mask.sum()
    if int(n) == 0:
        raise DegenerateInputError("ground truth has no valid pixels")
    H, W = gt.shape[-2:]
    total = gt.new_zeros(())
    for theta, p in zip(loss_weights(len(preds)), preds):
        err = torch.where(mask, gt - upsample_bilinear(p, H, W), torch.zeros_like(gt))
        total = total + theta * (err ** 2).sum() / n
    return total


@dataclass
class MetricReport:
    rmse_mm: float
    mae_mm: float
    irmse_per_km: float = None
    imae_per_km: float = None
    n_valid: int = 0

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def compute_metrics(pred, gt):
    """RMSE/MAE in mm and inverse-depth iRMSE/iMAE in 1/km over valid gt pixels.

    Inverse metrics are ``None`` if the prediction is not positive at every
    valid pixel.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    m = gt > 0
    n = int(m.sum())
    if n == 0:
        raise DegenerateInputError("ground truth has no valid pixels")
    p, g = pred[m], gt[m]
    err = p - g
    rmse = math.sqrt(np.mean(err ** 2)) * 1000.0
    mae = np.mean(np.abs(err)) * 1000.0
    irmse = imae = None
    if np.all(p > 0):
        ierr = 1.0 / p - 1.0 / g
        irmse = math.sqrt(np.mean(ierr ** 2)) * 1000.0
        imae = float(np.mean(np.abs(ierr))) * 1000.0
    return MetricReport(float(rmse), float(mae), irmse, imae, n)


def aggregate(reports):
    """Mean of per-frame metrics; inverse metrics undefined if any frame's is."""
    reports = list(reports)
    if not reports:
        raise DegenerateInputError("no reports to aggregate")

    def mean(name):
        vals = [getattr(r, name) for r in reports]
        return None if any(v is None for v in vals) else float(np.mean(vals))

    return MetricReport(mean("rmse_mm"), mean("mae_mm"), mean("irmse_per_km"), mean("imae_per_km"),
                        sum(r.n_valid for r in reports))


def _fmt(v, digits=2):
    return "n/a" if v is None else f"{v:.{digits}f}"


def format_table(rows):
    """Aligned text table with the columns RMSE / MAE / iRMSE / iMAE.

    ``rows`` is a sequence of ``(label, MetricReport)``.
    """
    header = ["", "RMSE(mm)", "MAE(mm)", "iRMSE(1/km)", "iMAE(1/km)"]
    body = [[label, _fmt(r.rmse_mm), _fmt(r.mae_mm), _fmt(r.irmse_per_km), _fmt(r.imae_per_km)]
            for label, r in rows]
    widths = [max(len(str(row[i])) for row in [header] + body) for i in range(len(header))]
    lines = []
    for row in [header] + body:
        lines.append("  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w)
                               for i, (c, w) in enumerate(zip(row, widths))))
    return "\n".join(lines)
