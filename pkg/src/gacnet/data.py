"""KITTI-style file I/O, cropping and padding, synthetic scenes and LiDAR-like
sparsification.

Depth PNGs follow the KITTI devkit convention: 16-bit single channel,
``depth_m = stored / 256``, stored 0 for missing. A dataset directory holds
``image/<id>.png``, ``velodyne_raw/<id>.png``, ``groundtruth/<id>.png`` and
``intrinsics/<id>.txt`` (``fx fy cx cy``).
"""
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, FormatError
from .geometry import CameraIntrinsics, check_sparse

KITTI_SIZE = (352, 1216)
KITTI_CROP_HEIGHT = 256
DEPTH_SCALE = 256.0
SUBDIRS = ("image", "velodyne_raw", "groundtruth", "intrinsics")


# ---------------------------------------------------------------------------
# depth PNGs

def load_depth_png(path):
    path = Path(path)
    try:
        img = Image.open(path)
    except (OSError, ValueError) as e:
        raise FormatError(f"{path}: cannot read PNG ({e})") from e
    with img:
        if img.format != "PNG":
            raise FormatError(f"{path}: expected PNG, got {img.format}")
        if img.mode not in ("I;16", "I;16B", "I;16L"):
            raise FormatError(f"{path}: expected a 16-bit single-channel PNG, got mode {img.mode!r}")
        raw = np.array(img, dtype=np.uint16)
    if raw.ndim != 2:
        raise FormatError(f"{path}: expected a single channel, got shape {raw.shape}")
    return raw.astype(np.float64) / DEPTH_SCALE


def encode_depth(depth):
    depth = check_sparse(np.asarray(depth, dtype=np.float64))
    stored = np.floor(depth * DEPTH_SCALE + 0.5)
    if stored.max(initial=0) > np.iinfo(np.uint16).max:
        raise FormatError(f"depth {depth.max():.3f} m exceeds the 16-bit range")
    return stored.astype(np.uint16)


def save_depth_png(depth, path):
    """Inverse of :func:`load_depth_png` (round half up to 1/256 m)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(encode_depth(depth)).save(path, format="PNG")


def load_image_png(path):
    path = Path(path)
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as e:
        raise FormatError(f"{path}: cannot read image ({e})") from e
    return arr


def save_image_png(image, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.floor(np.asarray(image) * 255.0 + 0.5), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# frames

@dataclass
class Frame:
    image: np.ndarray          # H, W, 3 in [0, 1]
    sparse: np.ndarray         # H, W meters, 0 = invalid
    gt: np.ndarray             # H, W meters, 0 = invalid
    intr: CameraIntrinsics
    id: str = ""

    def __post_init__(self):
        H, W = self.sparse.shape
        if self.image.shape != (H, W, 3) or self.gt.shape != (H, W):
            raise ConfigurationError(
                f"frame {self.id!r}: image {self.image.shape}, sparse {self.sparse.shape} "
                f"and gt {self.gt.shape} disagree")
        if (self.intr.height, self.intr.width) != (H, W):
            raise ConfigurationError(f"frame {self.id!r}: intrinsics do not match {H}x{W}")

    @property
    def shape(self):
        return self.sparse.shape


def kitti_crop(frame):
    """Drop the top 96 rows of a 1216x352 frame (bottom-anchored)."""
    if frame.shape != KITTI_SIZE:
        raise ConfigurationError(f"kitti_crop expects {KITTI_SIZE[1]}x{KITTI_SIZE[0]}, "
                                 f"got {frame.shape[1]}x{frame.shape[0]}")
    top = KITTI_SIZE[0] - KITTI_CROP_HEIGHT
    return replace(frame, image=frame.image[top:].copy(), sparse=frame.sparse[top:].copy(),
                   gt=frame.gt[top:].copy(), intr=frame.intr.cropped(top=top, height=KITTI_CROP_HEIGHT))


def pad_to_multiple(frame, multiple=32):
    """Zero-pad rows at the top (and columns at the right) up to a multiple.

    Returns ``(padded_frame, (top, right))``.
    """
    H, W = frame.shape
    top = -H % multiple
    right = -W % multiple
    if top == right == 0:
        return frame, (0, 0)
    pad2 = ((top, 0), (0, right))
    intr = CameraIntrinsics(frame.intr.fx, frame.intr.fy, frame.intr.cx, frame.intr.cy + top,
                            W + right, H + top)
    return replace(frame, image=np.pad(frame.image, pad2 + ((0, 0),), mode="edge"),
                   sparse=np.pad(frame.sparse, pad2), gt=np.pad(frame.gt, pad2), intr=intr), (top, right)


def unpad(pred, pad):
    top, right = pad
    H, W = pred.shape[-2:]
    return pred[..., top:, :W - right]


# ---------------------------------------------------------------------------
# synthetic scenes

@dataclass
class SceneSpec:
    seed: int = 0
    height: int = 64
    width: int = 64
    n_objects: int = 4
    depth_range: tuple = (3.0, 30.0)
    texture_freq: float = 2.0
    texture_contrast: float = 0.35
    ground: bool = True
    camera_height: float = 1.6
    lines: int = 8
    dropout: float = 0.3

    def __post_init__(self):
        self.depth_range = tuple(float(x) for x in self.depth_range)
        if self.height <= 0 or self.width <= 0 or self.height % 32 or self.width % 32:
            raise ConfigurationError(f"scene size {self.height}x{self.width} must be positive multiples of 32")
        lo, hi = self.depth_range
        if not 0 < lo < hi:
            raise ConfigurationError(f"depth range {self.depth_range} must satisfy 0 < near < far")
        if self.n_objects < 0 or self.lines < 1 or not 0 <= self.dropout < 1:
            raise ConfigurationError(f"invalid scene spec {self}")

    def intrinsics(self):
        return CameraIntrinsics(0.8 * self.width, 0.8 * self.width, self.width / 2, self.height / 2,
                                self.width, self.height)

    def to_dict(self):
        d = asdict(self)
        d["depth_range"] = list(self.depth_range)
        return d


def expand_specs(doc):
    """Scene specs from a manifest: either a list of records or a template
    ``{"count": n, ...}`` whose seeds run ``seed, seed + 1, ...``."""
    if isinstance(doc, list):
        return [s if isinstance(s, SceneSpec) else SceneSpec(**s) for s in doc]
    doc = dict(doc)
    count = int(doc.pop("count", 1))
    base = SceneSpec(**doc)
    return [replace(base, seed=base.seed + i) for i in range(count)]


def load_manifest(path):
    return expand_specs(json.loads(Path(path).read_text()))


def save_manifest(specs, path):
    Path(path).write_text(json.dumps([s.to_dict() for s in specs], indent=1))


def _palette(rng):
    return rng.uniform(0.15, 0.85, size=3)


def scene_objects(spec):
    """Deterministic object list for ``spec``: a back wall, an optional
    ground plane, then vertical slabs and spheres."""
    rng = np.random.default_rng(spec.seed)
    near, far = spec.depth_range
    objs = [dict(kind="wall", z=far, color=_palette(rng).tolist(), phase=float(rng.uniform(0, 2 * math.pi)))]
    if spec.ground:
        objs.append(dict(kind="ground", y=spec.camera_height, color=_palette(rng).tolist()))
    half_fov = 0.5 * spec.width / (0.8 * spec.width)
    for _ in range(spec.n_objects):
        z = float(rng.uniform(near + 0.1 * (far - near), near + 0.7 * (far - near)))
        x = float(rng.uniform(-half_fov, half_fov) * z)
        color = _palette(rng).tolist()
        phase = float(rng.uniform(0, 2 * math.pi))
        if rng.random() < 0.5:
            r = float(rng.uniform(0.08, 0.2) * z * half_fov)
            y = spec.camera_height - r if spec.ground else float(rng.uniform(-0.3, 0.3) * z * half_fov)
            objs.append(dict(kind="sphere", center=[x, y, z], radius=r, color=color, phase=phase))
        else:
            w = float(rng.uniform(0.15, 0.45) * z * half_fov)
            h = float(rng.uniform(0.5, 2.0) * spec.camera_height)
            yaw = float(rng.uniform(-0.6, 0.6))
            objs.append(dict(kind="slab", center=[x, spec.camera_height - h / 2, z], half_w=w / 2,
                             half_h=h / 2, yaw=yaw, color=color, phase=phase))
    return objs


def camera_rays(intr, height, width):
    """Per-pixel ray directions with unit z, so a hit at ``t`` has depth ``t``."""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)


def intersect_sphere(rays, center, radius):
    c = np.asarray(center, dtype=np.float64)
    a = (rays ** 2).sum(-1)
    b = -2.0 * (rays @ c)
    cc = c @ c - radius ** 2
    disc = b * b - 4 * a * cc
    with np.errstate(invalid="ignore"):
        t = (-b - np.sqrt(disc)) / (2 * a)
    return np.where((disc >= 0) & (t > 0), t, np.inf)


def _intersect_slab(rays, o):
    cx, cy, cz = o["center"]
    nx, nz = math.sin(o["yaw"]), math.cos(o["yaw"])
    denom = rays[..., 0] * nx + rays[..., 2] * nz
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (cx * nx + cz * nz) / denom
    px = rays[..., 0] * t - cx
    py = rays[..., 1] * t - cy
    pz = rays[..., 2] * t - cz
    lateral = px * nz - pz * nx
    hit = (t > 0) & (np.abs(lateral) <= o["half_w"]) & (np.abs(py) <= o["half_h"])
    return np.where(hit, t, np.inf), lateral, py


def _texture(a, b, freq, phase):
    return 0.5 + 0.5 * np.sin(freq * a + phase) * np.cos(freq * 0.7 * b - phase)


def render_scene(objects, intr, height, width, texture_freq=2.0, texture_contrast=0.35):
    """Ray-cast ``objects``; returns ``(image, depth, object_index)``.

    The nearest hit wins, so later objects paint over earlier ones only
    when they are in front.
    """
    rays = camera_rays(intr, height, width)
    depth = np.full((height, width), np.inf)
    owner = np.full((height, width), -1, np.int64)
    image = np.zeros((height, width, 3))
    for i, o in enumerate(objects):
        kind = o["kind"]
        if kind == "wall":
            t = np.full((height, width), float(o["z"]))
            ta, tb = rays[..., 0] * t, rays[..., 1] * t
            shade = np.ones_like(t)
        elif kind == "ground":
            with np.errstate(divide="ignore"):
                t = np.where(rays[..., 1] > 0, o["y"] / rays[..., 1], np.inf)
            tf = np.where(np.isfinite(t), t, 0.0)
            ta, tb = rays[..., 0] * tf, tf
            shade = np.ones_like(t)
        elif kind == "sphere":
            t = intersect_sphere(rays, o["center"], o["radius"])
            p = rays * np.where(np.isfinite(t), t, 0)[..., None] - np.asarray(o["center"])
            n = p / o["radius"]
            ta = np.arctan2(n[..., 0], -n[..., 2]) * o["radius"] * 2
            tb = n[..., 1] * o["radius"] * 2
            shade = 0.55 + 0.45 * np.clip(-n[..., 2] * 0.8 - n[..., 1] * 0.6, 0, 1)
        elif kind == "slab":
            t, ta, tb = _intersect_slab(rays, o)
            shade = np.full_like(t, 0.8 + 0.2 * math.cos(o["yaw"]))
        else:
            raise ConfigurationError(f"unknown object kind {kind!r}")
        closer = t < depth
        if not closer.any():
            continue
        ta = np.where(closer, ta, 0.0)
        tb = np.where(closer, tb, 0.0)
        tex = _texture(ta, tb, texture_freq, o.get("phase", 0.0))
        col = np.asarray(o["color"])[None, None, :] * (1 - texture_contrast + texture_contrast * 2 * tex[..., None])
        col = col * shade[..., None]
        depth = np.where(closer, t, depth)
        owner = np.where(closer, i, owner)
        image = np.where(closer[..., None], col, image)
    return np.clip(image, 0, 1), depth, owner


def lidar_subsample(dense, lines, dropout, seed):
    """Keep ``lines`` evenly spaced rows, then drop kept pixels i.i.d. with
    probability ``dropout``."""
    dense = np.asarray(dense, dtype=np.float64)
    H, W = dense.shape
    if lines < 1 or not 0 <= dropout < 1:
        raise ConfigurationError(f"need lines >= 1 and dropout in [0, 1), got {lines}, {dropout}")
    lines = min(int(lines), H)
    rows = ((2 * np.arange(lines) + 1) * H) // (2 * lines)
    keep = np.random.default_rng(seed).random((lines, W)) >= dropout
    out = np.zeros_like(dense)
    out[rows] = np.where(keep, dense[rows], 0.0)
    return out


def generate_scene(spec):
    """Render ``spec`` into a :class:`Frame` with dense ground truth and its
    sparsified LiDAR-like input."""
    intr = spec.intrinsics()
    image, depth, _ = render_scene(scene_objects(spec), intr, spec.height, spec.width,
                                   spec.texture_freq, spec.texture_contrast)
    depth = np.minimum(depth, spec.depth_range[1])
    sparse = lidar_subsample(depth, spec.lines, spec.dropout, seed=(spec.seed, 1))
    return Frame(image=image, sparse=sparse, gt=depth, intr=intr, id=f"{spec.seed:06d}")


def synthetic_frames(specs):
    return [generate_scene(s) for s in specs]


# ---------------------------------------------------------------------------
# dataset directories

def save_frame(frame, root):
    root = Path(root)
    save_image_png(frame.image, root / "image" / f"{frame.id}.png")
    save_depth_png(frame.sparse, root / "velodyne_raw" / f"{frame.id}.png")
    save_depth_png(frame.gt, root / "groundtruth" / f"{frame.id}.png")
    p = root / "intrinsics" / f"{frame.id}.txt"
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(" ".join(repr(float(x)) for x in frame.intr.to_list()) + "\n")


def list_frames(root):
    root = Path(root)
    if not (root / "image").is_dir():
        raise FileNotFoundError(f"{root}: not a dataset directory (missing image/)")
    return sorted(p.stem for p in (root / "image").glob("*.png"))


def load_frame(root, frame_id):
    root = Path(root)
    image = load_image_png(root / "image" / f"{frame_id}.png")
    sparse = load_depth_png(root / "velodyne_raw" / f"{frame_id}.png")
    gt_path = root / "groundtruth" / f"{frame_id}.png"
    gt = load_depth_png(gt_path) if gt_path.exists() else np.zeros_like(sparse)
    vals = (root / "intrinsics" / f"{frame_id}.txt").read_text().split()
    if len(vals) != 4:
        raise FormatError(f"{root}/intrinsics/{frame_id}.txt: expected 'fx fy cx cy'")
    fx, fy, cx, cy = map(float, vals)
    H, W = sparse.shape
    return Frame(image=image, sparse=sparse, gt=gt, intr=CameraIntrinsics(fx, fy, cx, cy, W, H), id=frame_id)


def write_dataset(specs, root):
    """Render every spec into ``root`` and store the manifest next to it."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for s in specs:
        save_frame(generate_scene(s), root)
    save_manifest(specs, root / "manifest.json")
    return root


def shard(ids, worker, n_workers, seed=0):
    """This worker's share of ``ids``: a seeded permutation split round-robin,
    so shards are disjoint and the order depends only on (seed, n_workers)."""
    if not 0 <= worker < n_workers:
        raise ConfigurationError(f"worker {worker} out of range for {n_workers} workers")
    ids = list(ids)
    order = np.random.default_rng(seed).permutation(len(ids))
    return [ids[i] for i in order[worker::n_workers]]


@dataclass
class DatasetSpec:
    """Where frames come from: a directory, or synthetic scenes in memory."""
    root: str = None
    scenes: dict = field(default_factory=lambda: {"count": 64, "seed": 0})

    def frames(self):
        if self.root is not None:
            root = Path(self.root)
            if not root.exists():
                raise FileNotFoundError(f"dataset directory {root} does not exist")
            return [load_frame(root, i) for i in list_frames(root)]
        return synthetic_frames(expand_specs(self.scenes))
