"""Training loop, evaluation, nearest-fill baseline, ablation runner and
inference plots."""
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import DatasetSpec, Frame, pad_to_multiple, save_depth_png, unpad
from .errors import ConfigurationError, TrainingError
from .losses import MetricReport, aggregate, compute_metrics, format_table, multiscale_loss
from .pyramid import FACTORS, GACNet, NetworkConfig, downsample_sparse, nearest_valid_fill

log = logging.getLogger(__name__)

VARIANTS = ("i", "ii", "iii", "iv")
VARIANT_COLUMNS = {
    "i": dict(stages="2-stage", pointnet=False, concat=False, caffm=False),
    "ii": dict(stages="3-stage", pointnet=False, concat=False, caffm=False),
    "iii": dict(stages="3-stage", pointnet=True, concat=True, caffm=False),
    "iv": dict(stages="3-stage", pointnet=True, concat=False, caffm=True),
}


@dataclass
class TrainConfig:
    max_lr: float = 2.5e-4
    weight_decay: float = 0.05
    batch_size: int = 2
    epochs: int = 1
    steps: int = None                  # overrides epochs when set
    warmup_fraction: float = 0.10
    droppath_rate: float = 0.1
    seed: int = 0
    clip_grad_norm: float = None       # off unless set (1.0 for toy stability)
    eval_every: int = 1                # epochs between validation passes
    train_data: dict = field(default_factory=lambda: {"scenes": {"count": 64, "seed": 0}})
    val_data: dict = field(default_factory=lambda: {"scenes": {"count": 16, "seed": 100000}})
    network: dict = field(default_factory=lambda: NetworkConfig().to_dict())

    def __post_init__(self):
        if not self.max_lr > 0:
            raise ConfigurationError("max_lr must be positive")
        if not 0 < self.warmup_fraction < 1:
            raise ConfigurationError("warmup_fraction must lie in (0, 1)")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")
        if isinstance(self.network, NetworkConfig):
            self.network = self.network.to_dict()

    def network_config(self):
        cfg = NetworkConfig.from_dict(dict(self.network))
        cfg.droppath_rate = self.droppath_rate
        cfg.seed = self.seed
        return cfg

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

    def digest(self):
        return hashlib.blake2b(self.to_json().encode(), digest_size=8).hexdigest()


def resolve_seed(cfg):
    """``GACNET_SEED`` in the environment overrides the configured seed."""
    env = os.environ.get("GACNET_SEED")
    if env not in (None, ""):
        cfg.seed = int(env)
    return cfg


def lr_at(step, total_steps, cfg):
    """Linear warmup from ``max_lr / 40`` to ``max_lr`` over the first
    ``ceil(warmup_fraction * total)`` steps, then cosine down to
    ``max_lr / 400`` at the last step."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    peak = cfg.max_lr
    start = peak / 40
    end = start / 10
    warm = math.ceil(cfg.warmup_fraction * total_steps)
    if step < warm:
        return start + (peak - start) * step / warm
    span = total_steps - 1 - warm
    if step == warm or span <= 0:
        return peak
    p = (step - warm) / span
    return end + (peak - end) * 0.5 * (1 + math.cos(math.pi * p))


def is_no_decay(name):
    return name.endswith("bias") or "norm" in name.lower()


def param_groups(model, weight_decay):
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if p.requires_grad:
            (no_decay if is_no_decay(name) else decay).append(p)
    return [dict(params=decay, weight_decay=weight_decay), dict(params=no_decay, weight_decay=0.0)]


def make_optimizer(model, cfg):
    return torch.optim.AdamW(param_groups(model, cfg.weight_decay), lr=cfg.max_lr / 40, fused=True)


# ---------------------------------------------------------------------------
# batches

class FrameTensors:
    """Frame converted once to tensors, with its sparse pyramid."""

    def __init__(self, frame, dtype=torch.float32):
        self.id = frame.id
        self.intr = frame.intr
        self.image = torch.as_tensor(np.ascontiguousarray(frame.image.transpose(2, 0, 1)), dtype=dtype)
        self.sparse = torch.as_tensor(frame.sparse, dtype=dtype)[None]
        self.gt = torch.as_tensor(frame.gt, dtype=dtype)[None]
        self.levels = [torch.as_tensor(downsample_sparse(frame.sparse, f), dtype=dtype)[None] for f in FACTORS]


def collate(items):
    return (torch.stack([t.image for t in items]), torch.stack([t.sparse for t in items]),
            torch.stack([t.gt for t in items]), [t.intr for t in items],
            [torch.stack([t.levels[x] for t in items]) for x in range(len(FACTORS))])


def _dataset(spec):
    if isinstance(spec, DatasetSpec):
        return spec.frames()
    if isinstance(spec, (list, tuple)) and spec and isinstance(spec[0], Frame):
        return list(spec)
    return DatasetSpec(**spec).frames()


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(model, path, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {"network": model.cfg.to_dict(), **(extra or {})}
    arrays["__config__"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__config__"]))
        state = {k: torch.from_numpy(z[k].copy()) for k in z.files if k != "__config__"}
    model = GACNet(NetworkConfig.from_dict(meta["network"]))
    missing, unexpected = model.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise ConfigurationError(f"{path}: checkpoint does not match its config "
                                 f"(missing {missing}, unexpected {unexpected})")
    model.eval()
    return model


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalResult:
    per_frame: list            # [(id, MetricReport)]
    aggregate: MetricReport

    def table(self, label="model"):
        return format_table([(i, r) for i, r in self.per_frame] + [(f"mean ({label})", self.aggregate)])

    def to_dict(self):
        return {"per_frame": {i: r.to_dict() for i, r in self.per_frame}, "aggregate": self.aggregate.to_dict()}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


@torch.no_grad()
def predict(model, frames, batch_size=8):
    """Full-resolution numpy predictions, one per frame (frames are padded to
    a multiple of 32 and cropped back)."""
    model.eval()
    out = []
    frames = list(frames)
    for s in range(0, len(frames), batch_size):
        chunk = frames[s:s + batch_size]
        padded = [pad_to_multiple(f) for f in chunk]
        shapes = {p.shape for p, _ in padded}
        groups = [[i for i in range(len(chunk)) if padded[i][0].shape == sh] for sh in sorted(shapes)]
        preds = [None] * len(chunk)
        for g in groups:
            items = [FrameTensors(padded[i][0]) for i in g]
            image, sparse, _, intr, levels = collate(items)
            final = model(image, sparse, intr, levels)[-1][:, 0].numpy().astype(np.float64)
            for j, i in enumerate(g):
                preds[i] = unpad(final[j], padded[i][1])
        out.extend(preds)
    return out


def evaluate_predictions(preds, frames):
    per = [(f.id, compute_metrics(p, f.gt)) for p, f in zip(preds, frames)]
    return EvalResult(per, aggregate(r for _, r in per))


def evaluate(model, data):
    """Metrics of ``model`` (or a checkpoint path) on ``data`` (frames, a
    dataset dict or a directory)."""
    if isinstance(model, (str, Path)):
        model = load_checkpoint(model)
    frames = _dataset({"root": str(data)} if isinstance(data, (str, Path)) else data)
    if not frames:
        raise ConfigurationError("evaluation dataset is empty")
    return evaluate_predictions(predict(model, frames), frames)


def nearest_fill_baseline(data):
    frames = _dataset(data)
    return evaluate_predictions([nearest_valid_fill(f.sparse) for f in frames], frames)


# ---------------------------------------------------------------------------
# training

@dataclass
class RunRecord:
    epoch_losses: list
    val_reports: list          # [(epoch, MetricReport)]; epoch 0 is before training
    lr_trace: list
    wall_time: float
    config_hash: str
    steps: int
    best_epoch: int = None
    best_rmse: float = None
    checkpoint: str = None

    def to_dict(self):
        d = asdict(self)
        d["val_reports"] = [(e, r.to_dict()) for e, r in self.val_reports]
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def _dump_nan(out_dir, step, ids, terms, lr):
    info = dict(step=step, batch_ids=ids, lr=lr, loss_terms=terms)
    if out_dir is not None:
        p = Path(out_dir) / "nan_dump.json"
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(info, indent=1))
    return info


def train(cfg, out_dir=None, train_frames=None, val_frames=None):
    """Optimize the multi-scale loss; keeps the best-validation-RMSE weights
    (written to ``out_dir/best.npz`` when ``out_dir`` is given, and always
    loaded back into the returned model).

    Returns ``(RunRecord, model)``.
    """
    t0 = time.perf_counter()
    cfg = resolve_seed(cfg)
    torch.manual_seed(cfg.seed)
    train_frames = train_frames if train_frames is not None else _dataset(cfg.train_data)
    val_frames = val_frames if val_frames is not None else _dataset(cfg.val_data)
    if not train_frames or not val_frames:
        raise ConfigurationError("training and validation sets must be non-empty")
    items = [FrameTensors(f) for f in train_frames]

    model = GACNet(cfg.network_config())
    opt = make_optimizer(model, cfg)
    per_epoch = math.ceil(len(items) / cfg.batch_size)
    total = cfg.steps if cfg.steps is not None else cfg.epochs * per_epoch
    n_epochs = math.ceil(total / per_epoch)
    rng = np.random.default_rng(cfg.seed)

    def validate():
        return evaluate_predictions(predict(model, val_frames), val_frames).aggregate

    best = validate()
    best_epoch, best_state = 0, {k: v.clone() for k, v in model.state_dict().items()}
    reports = [(0, best)]
    losses, lrs = [], []
    step = 0
    for epoch in range(1, n_epochs + 1):
        model.train()
        order = rng.permutation(len(items))
        running, count = 0.0, 0
        for s in range(0, len(order), cfg.batch_size):
            if step >= total:
                break
            batch = [items[i] for i in order[s:s + cfg.batch_size]]
            image, sparse, gt, intr, levels = collate(batch)
            lr = lr_at(step, total, cfg)
            for g in opt.param_groups:
                g["lr"] = lr
            preds = model(image, sparse, intr, levels)
            loss = multiscale_loss(preds, gt)
            if not torch.isfinite(loss):
                info = _dump_nan(out_dir, step, [b.id for b in batch],
                                 [float(multiscale_loss([p.detach()], gt)) for p in preds], lr)
                raise TrainingError(f"non-finite loss at step {step} on batch {info['batch_ids']}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.clip_grad_norm:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_grad_norm)
            opt.step()
            running += float(loss.detach())
            count += 1
            lrs.append(lr)
            step += 1
        losses.append(running / max(count, 1))
        if epoch % cfg.eval_every == 0 or epoch == n_epochs:
            rep = validate()
            reports.append((epoch, rep))
            log.info("epoch %d loss %.4f val rmse %.1f mm", epoch, losses[-1], rep.rmse_mm)
            if rep.rmse_mm < best.rmse_mm:
                best, best_epoch = rep, epoch
                best_state = {k: v.clone() for k, v in model.state_dict().items()}
    model.load_state_dict(best_state)
    model.eval()
    ckpt = None
    if out_dir is not None:
        ckpt = str(save_checkpoint(model, Path(out_dir) / "best.npz", {"train": cfg.to_dict()}))
    record = RunRecord(losses, reports, lrs, time.perf_counter() - t0, cfg.digest(), step,
                       best_epoch, best.rmse_mm, ckpt)
    if out_dir is not None:
        (Path(out_dir) / "run.json").write_text(record.to_json())
    return record, model


# ---------------------------------------------------------------------------
# ablation

@dataclass
class AblationResult:
    rows: dict                 # variant -> mean MetricReport
    per_seed: dict             # variant -> [rmse_mm per seed]
    seeds: list

    def table(self):
        header = ["", "2-stage", "3-stage", "PointNet++", "concatenation", "CAFFM", "RMSE(mm)", "MAE(mm)"]
        body = []
        for v in VARIANTS:
            if v not in self.rows:
                continue
            c = VARIANT_COLUMNS[v]
            mark = lambda b: "x" if b else ""
            body.append([f"GAC-Net-{v}", mark(c["stages"] == "2-stage"), mark(c["stages"] == "3-stage"),
                         mark(c["pointnet"]), mark(c["concat"]), mark(c["caffm"]),
                         f"{self.rows[v].rmse_mm:.2f}", f"{self.rows[v].mae_mm:.2f}"])
        widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
        return "\n".join("  ".join(x.ljust(w) if i == 0 else x.center(w) for i, (x, w) in
                                   enumerate(zip(r, widths))) for r in [header] + body)

    def to_dict(self):
        return {"rows": {v: r.to_dict() for v, r in self.rows.items()}, "per_seed": self.per_seed,
                "seeds": self.seeds}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def variant_config(base, name):
    """``base`` TrainConfig with the network flags of ablation row ``name``."""
    net = NetworkConfig.variant(name, **{k: v for k, v in base.network.items()
                                         if k not in ("enable_preprocess", "enable_3d_branch", "fusion_mode")})
    return TrainConfig.from_dict({**base.to_dict(), "network": net.to_dict()})


def run_ablation(base_cfg, seeds=(0, 1, 2), variants=VARIANTS, out_dir=None, runs=None):
    """Train every variant under every seed on the same data; rows hold the
    mean (over seeds) of the best-checkpoint validation metrics.

    ``runs`` may carry already finished ``{(variant, seed): MetricReport}``.
    """
    train_frames = _dataset(base_cfg.train_data)
    val_frames = _dataset(base_cfg.val_data)
    runs = dict(runs or {})
    for v in variants:
        for seed in seeds:
            if (v, seed) in runs:
                continue
            cfg = variant_config(base_cfg, v)
            cfg.seed = seed
            sub = None if out_dir is None else Path(out_dir) / f"{v}_seed{seed}"
            rec, model = train(cfg, sub, train_frames, val_frames)
            runs[(v, seed)] = evaluate_predictions(predict(model, val_frames), val_frames).aggregate
            log.info("variant %s seed %d rmse %.1f", v, seed, runs[(v, seed)].rmse_mm)
    rows = {v: aggregate(runs[(v, s)] for s in seeds) for v in variants}
    per_seed = {v: [runs[(v, s)].rmse_mm for s in seeds] for v in variants}
    res = AblationResult(rows, per_seed, list(seeds))
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "ablation.json").write_text(res.to_json())
        (Path(out_dir) / "ablation.txt").write_text(res.table() + "\n")
    return res


# ---------------------------------------------------------------------------
# inference figures

def _colorize(values, cmap, vmin, vmax):
    import matplotlib

    span = vmax - vmin
    norm = np.zeros_like(values) if span <= 0 else np.clip((values - vmin) / span, 0, 1)
    rgba = matplotlib.colormaps[cmap](norm)
    return np.floor(rgba[..., :3] * 255 + 0.5).astype(np.uint8)


def _write_png(rgb, path):
    from PIL import Image

    Image.fromarray(rgb, mode="RGB").save(path, format="PNG")


def infer_and_plot(model, frame, out_dir):
    """Write ``depth.png`` (KITTI encoding), ``depth_color.png``, ``error.png``
    (when gt exists) and ``metrics.json`` for one frame."""
    if isinstance(model, (str, Path)):
        model = load_checkpoint(model)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pred = predict(model, [frame])[0]
    save_depth_png(pred, out / "depth.png")
    hi = float(max(pred.max(), frame.gt.max(initial=0)))
    _write_png(_colorize(pred, "viridis", 0.0, hi), out / "depth_color.png")
    paths = {"depth": str(out / "depth.png"), "color": str(out / "depth_color.png")}
    valid = frame.gt > 0
    metrics = None
    if valid.any():
        err = np.where(valid, np.abs(pred - frame.gt), 0.0)
        _write_png(_colorize(err, "afmhot", 0.0, float(err.max())), out / "error.png")
        paths["error"] = str(out / "error.png")
        metrics = compute_metrics(pred, frame.gt)
        (out / "metrics.json").write_text(metrics.to_json() + "\n")
    return paths, metrics
