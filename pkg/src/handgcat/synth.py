"""Seeded synthetic occluded-hand samples.

Each sample poses the procedural hand, projects it through a fixed pinhole
camera, draws the skeleton into a 256x256 image and pastes flat gray
rectangles over a chosen fraction of the hand pixels. Every sample gets its
own generator derived from ``(seed, split, index)`` so generation order does
not matter.
"""
from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .graph import NUM_JOINTS, PARENTS
from .hand_model import NUM_BETAS, HandModel, default_hand_model, lbs_forward
from .tensor import no_grad, precision

IMAGE_SIZE = 256
SPLITS = {"train": 0, "test": 1}
UNIT = "1 model unit = 1 mm"
FINGER_COLORS = np.array([
    [0.95, 0.55, 0.45], [0.95, 0.85, 0.40], [0.50, 0.90, 0.45],
    [0.40, 0.75, 0.95], [0.80, 0.50, 0.95],
])


@dataclass(frozen=True)
class Camera:
    focal: float = 480.0
    cu: float = IMAGE_SIZE / 2
    cv: float = IMAGE_SIZE / 2


def project(joints3d, camera: Camera = Camera()) -> np.ndarray:
    """Pinhole projection ``u = f x / z + c_u``, ``v = f y / z + c_v``."""
    p = np.asarray(joints3d, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= 0):
        raise ValueError("points must lie in front of the camera (z > 0)")
    return np.stack([camera.focal * p[..., 0] / z + camera.cu,
                     camera.focal * p[..., 1] / z + camera.cv], axis=-1)


@dataclass
class Sample:
    image: np.ndarray           # [3, 256, 256] uint8 (divide by 255 for [0, 1])
    pose2d: np.ndarray          # [21, 2] pixels, noise free
    theta: np.ndarray           # [48]
    beta: np.ndarray            # [10]
    transl: np.ndarray          # [3] hand-frame -> camera-frame shift, mm
    joints3d: np.ndarray        # [21, 3] camera frame, mm
    mesh: np.ndarray            # [778, 3] camera frame, mm
    occlusion_mask: np.ndarray  # [256, 256] bool
    occlusion_ratio: float

    def image_float(self, dtype=np.float32) -> np.ndarray:
        return self.image.astype(dtype) / 255.0


@dataclass
class GeneratorConfig:
    seed: int = 0
    n_samples: int = 16
    occlusion_level: float = 0.0
    split: str = "train"
    hand_seed: int = 20230714
    articulation_range: float = 0.6
    root_max_angle: float = np.pi / 2
    beta_range: float = 1.0
    depth_range: tuple = (520.0, 640.0)
    camera: dict = field(default_factory=lambda: asdict(Camera()))
    unit: str = UNIT


def sample_params(rng: np.random.Generator, cfg: GeneratorConfig) -> tuple[np.ndarray, np.ndarray]:
    theta = np.zeros(48)
    theta[3:] = rng.uniform(-cfg.articulation_range, cfg.articulation_range, size=45)
    # root: uniform axis direction, angle up to root_max_angle (one hemisphere of orientations)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    theta[:3] = axis * rng.uniform(0.0, cfg.root_max_angle)
    beta = rng.uniform(-cfg.beta_range, cfg.beta_range, size=NUM_BETAS)
    return theta, beta


def _segment_dist2(px: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = max(float(ab @ ab), 1e-12)
    t = np.clip(((px - a) @ ab) / denom, 0.0, 1.0)
    diff = px - (a + t[:, None] * ab)
    return np.einsum("ij,ij->i", diff, diff)


def render_hand(pose2d: np.ndarray, depth: float, rng: np.random.Generator):
    """Skeleton drawing. Returns (float image [3,H,W], hand mask [H,W])."""
    scale = 550.0 / depth
    bg = rng.uniform(0.05, 0.3, size=3)
    img = np.broadcast_to(bg[:, None, None], (3, IMAGE_SIZE, IMAGE_SIZE)).copy()
    mask = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
    # only pixels near the skeleton can be touched
    pad = 12.0 * scale
    x0, y0 = np.floor(np.maximum(pose2d.min(0) - pad, 0)).astype(int)
    x1, y1 = np.ceil(np.minimum(pose2d.max(0) + pad, IMAGE_SIZE)).astype(int)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    px = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1)
    win = img[:, y0:y1, x0:x1].reshape(3, -1).copy()
    wmask = np.zeros(px.shape[0], dtype=bool)
    for j in range(1, NUM_JOINTS):
        p = PARENTS[j]
        finger = (j - 1) // 4
        radius = (7.0 if p == 0 else 5.0) * scale
        d2 = _segment_dist2(px, pose2d[p], pose2d[j])
        hit = d2 < radius * radius
        shade = 0.75 + 0.25 * (1.0 - np.sqrt(d2[hit]) / radius)
        win[:, hit] = FINGER_COLORS[finger][:, None] * shade
        wmask |= hit
    # joints as bright blobs
    d2 = ((px[:, None, :] - pose2d[None, :, :]) ** 2).sum(-1).min(axis=1)
    blob = np.exp(-d2 / (2 * (2.5 * scale) ** 2))
    win = np.clip(win + blob[None] * 0.6, 0.0, 1.0)
    img[:, y0:y1, x0:x1] = win.reshape(3, y1 - y0, x1 - x0)
    mask[y0:y1, x0:x1] = wmask.reshape(y1 - y0, x1 - x0)
    return img, mask


def _integral(m: np.ndarray) -> np.ndarray:
    out = np.zeros((m.shape[0] + 1, m.shape[1] + 1))
    out[1:, 1:] = m.cumsum(0).cumsum(1)
    return out


def _rect_sum(ii, y0, y1, x0, x1):
    return ii[y1, x1] - ii[y0, x1] - ii[y1, x0] + ii[y0, x0]


def place_occluders(hand_mask: np.ndarray, level: float, rng: np.random.Generator):
    """1-3 axis-aligned rectangles covering about ``level`` of the hand pixels."""
    H, W = hand_mask.shape
    covered = np.zeros_like(hand_mask)
    rects = []
    total = int(hand_mask.sum())
    if level <= 0 or total == 0:
        return covered, rects
    k = int(rng.integers(1, 4))
    hy, hx = np.nonzero(hand_mask)
    for i in range(k):
        goal = level * (i + 1) / k * total
        remaining = hand_mask & ~covered
        need = goal - (hand_mask & covered).sum()
        if need <= 0 or not remaining.any():
            continue
        ii = _integral(remaining)
        c = int(rng.integers(len(hy)))
        cy, cx = hy[c], hx[c]
        aspect = rng.uniform(0.5, 2.0)
        lo, hi = 0.0, float(max(H, W))
        for _ in range(30):
            mid = 0.5 * (lo + hi)
            hh, hw = max(mid * np.sqrt(aspect), 0.5), max(mid / np.sqrt(aspect), 0.5)
            y0, y1 = int(max(cy - hh, 0)), int(min(cy + hh + 1, H))
            x0, x1 = int(max(cx - hw, 0)), int(min(cx + hw + 1, W))
            if _rect_sum(ii, y0, y1, x0, x1) < need:
                lo = mid
            else:
                hi = mid
        hh, hw = max(hi * np.sqrt(aspect), 0.5), max(hi / np.sqrt(aspect), 0.5)
        y0, y1 = int(max(cy - hh, 0)), int(min(cy + hh + 1, H))
        x0, x1 = int(max(cx - hw, 0)), int(min(cx + hw + 1, W))
        covered[y0:y1, x0:x1] = True
        rects.append((y0, y1, x0, x1))
    return covered, rects


def make_sample(model: HandModel, cfg: GeneratorConfig, index: int) -> Sample:
    if not 0.0 <= cfg.occlusion_level <= 1.0:
        raise ValueError("occlusion_level must lie in [0, 1]")
    rng = np.random.default_rng([cfg.seed, SPLITS[cfg.split], index])
    camera = Camera(**cfg.camera)
    for _ in range(1000):
        theta, beta = sample_params(rng, cfg)
        with precision("float64"), no_grad():
            V, J = lbs_forward(model, theta, beta)
        V, J = V.data, J.data
        depth = rng.uniform(*cfg.depth_range)
        jitter = rng.uniform(-12.0, 12.0, size=2) * depth / camera.focal
        transl = np.array([jitter[0], jitter[1], depth]) - J.mean(0)
        joints3d = J + transl
        if np.any(joints3d[:, 2] <= 50.0):
            continue
        pose2d = project(joints3d, camera)
        margin = 4.0
        if np.all((pose2d >= margin) & (pose2d <= IMAGE_SIZE - margin)):
            break
    else:  # pragma: no cover - ranges make this unreachable in practice
        raise RuntimeError("could not sample an in-frame hand")
    img, hand = render_hand(pose2d, depth, rng)
    covered, rects = place_occluders(hand, cfg.occlusion_level, rng)
    for (y0, y1, x0, x1) in rects:
        img[:, y0:y1, x0:x1] = rng.uniform(0.35, 0.65)
    n_hand = hand.sum()
    ratio = float((hand & covered).sum() / n_hand) if n_hand else 0.0
    return Sample(image=np.round(img * 255).astype(np.uint8), pose2d=pose2d, theta=theta, beta=beta,
                  transl=transl, joints3d=joints3d, mesh=V + transl,
                  occlusion_mask=covered, occlusion_ratio=ratio)


@dataclass
class SyntheticDataset:
    samples: list
    manifest: dict

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i) -> Sample:
        return self.samples[i]

    def batch(self, idx) -> dict:
        s = [self.samples[i] for i in idx]
        return {
            "image": np.stack([x.image for x in s]),
            "pose2d": np.stack([x.pose2d for x in s]),
            "theta": np.stack([x.theta for x in s]),
            "beta": np.stack([x.beta for x in s]),
            "transl": np.stack([x.transl for x in s]),
            "joints3d": np.stack([x.joints3d for x in s]),
            "mesh": np.stack([x.mesh for x in s]),
            "occlusion_ratio": np.array([x.occlusion_ratio for x in s]),
        }


def generate_dataset(seed: int, n_samples: int, occlusion_level: float, split: str = "train",
                     model: HandModel | None = None, workers: int = 1, **overrides) -> SyntheticDataset:
    """Samples are independent (one RNG stream each), so ``workers > 1`` renders
    them in a process pool with bit-identical results."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if not 0.0 <= occlusion_level <= 1.0:
        raise ValueError("occlusion_level must lie in [0, 1]")
    if split not in SPLITS:
        raise ValueError(f"split must be one of {sorted(SPLITS)}")
    cfg = GeneratorConfig(seed=seed, n_samples=n_samples, occlusion_level=occlusion_level,
                          split=split, **overrides)
    model = model or default_hand_model(cfg.hand_seed)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            samples = list(pool.map(partial(make_sample, model, cfg), range(n_samples), chunksize=8))
    else:
        samples = [make_sample(model, cfg, i) for i in range(n_samples)]
    manifest = asdict(cfg) | {"hand_model_seed": model.seed, "format": checkpoint.FORMAT}
    manifest["depth_range"] = list(manifest["depth_range"])
    return SyntheticDataset(samples, manifest)


_SAMPLE_FIELDS = ("image", "pose2d", "theta", "beta", "transl", "joints3d", "mesh", "occlusion_mask")


def save_dataset(ds: SyntheticDataset, path, export_ppm: bool = False) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(ds.samples):
        arrays = {k: getattr(s, k) for k in _SAMPLE_FIELDS}
        checkpoint.save_arrays(path / "samples" / f"{i:06d}", arrays,
                               meta={"occlusion_ratio": s.occlusion_ratio})
        if export_ppm:
            write_ppm(path / "ppm" / f"{i:06d}.ppm", s.image)
    (path / "manifest.json").write_text(json.dumps(ds.manifest, indent=1, sort_keys=True))
    return path


def load_dataset(path) -> SyntheticDataset:
    path = Path(path)
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"no dataset manifest under {path}")
    manifest = json.loads((path / "manifest.json").read_text())
    samples = []
    for i in range(manifest["n_samples"]):
        arrays, meta = checkpoint.load_arrays(path / "samples" / f"{i:06d}")
        samples.append(Sample(**arrays, occlusion_ratio=meta["occlusion_ratio"]))
    return SyntheticDataset(samples, manifest)


def regenerate(manifest: dict) -> SyntheticDataset:
    """Rebuild a dataset from its manifest alone."""
    keys = set(GeneratorConfig.__dataclass_fields__) - {"seed", "n_samples", "occlusion_level", "split"}
    extra = {k: manifest[k] for k in keys if k in manifest}
    extra["depth_range"] = tuple(extra.get("depth_range", GeneratorConfig.depth_range))
    return generate_dataset(manifest["seed"], manifest["n_samples"], manifest["occlusion_level"],
                            manifest["split"], **extra)


def write_ppm(path, image: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    h, w = img.shape[1:]
    with open(path, "wb") as fh:
        fh.write(f"P6 {w} {h} 255\n".encode())
        fh.write(np.ascontiguousarray(img.transpose(1, 2, 0)).tobytes())

