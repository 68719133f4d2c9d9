"""Knowledge-guided graph convolution: 2D pose -> per-joint 32x32 prior maps."""
from __future__ import annotations

import numpy as np

from .graph import NUM_JOINTS, ChebGraphConv, SkeletonGraph, build_hand_skeleton
from .nn import Linear, Module
from .tensor import Tensor, relu

PRIOR_HW = 32
PRIOR_DIM = PRIOR_HW * PRIOR_HW
CROP_SIZE = 256


def default_widths(depth: int, first: int = 64, last: int = PRIOR_DIM) -> list[int]:
    """Output width of every GCN layer; depth 4 gives 64, 256, 512, 1024.

    Other depths use a geometric ramp from ``first`` to ``last``.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if depth == 4 and first == 64 and last == PRIOR_DIM:
        return [64, 256, 512, 1024]
    if depth == 1:
        return [last]
    ramp = np.geomspace(first, last, depth)
    return [int(round(w)) for w in ramp[:-1]] + [last]


def normalize_pose(pose: np.ndarray, size: int = CROP_SIZE) -> np.ndarray:
    """Pixel coordinates in the crop -> [-1, 1]."""
    return np.asarray(pose) * (2.0 / size) - 1.0


def check_pose(pose) -> np.ndarray:
    pose = np.asarray(pose.data if isinstance(pose, Tensor) else pose)
    if pose.shape[-2:] != (NUM_JOINTS, 2):
        raise ValueError(f"pose must have {NUM_JOINTS} joints x 2 coords, got {pose.shape}")
    if not np.all(np.isfinite(pose)):
        raise ValueError("pose contains non-finite coordinates")
    return pose


def add_pose_noise(pose: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Isotropic Gaussian pixel noise on every coordinate."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    pose = np.asarray(pose, dtype=np.float64)
    if sigma == 0:
        return pose.copy()
    return pose + rng.normal(0.0, sigma, size=pose.shape)


class KgcStack(Module):
    """Stacked Chebyshev GCN layers, ReLU between layers, none after the last."""

    def __init__(self, rng: np.random.Generator, depth: int = 4, widths: list[int] | None = None,
                 K: int = 2, normalize: bool = True, graph: SkeletonGraph | None = None,
                 activation: bool = True):
        widths = list(widths) if widths else default_widths(depth)
        if len(widths) != depth:
            raise ValueError(f"{depth} layers need {depth} widths, got {widths}")
        if widths[-1] != PRIOR_DIM:
            raise ValueError(f"last width must be {PRIOR_DIM} to reshape into {PRIOR_HW}x{PRIOR_HW}")
        self.graph = graph or build_hand_skeleton()
        self.depth, self.widths, self.K = depth, widths, K
        self.normalize = normalize
        self.activation = activation
        dims = [2] + widths
        self.layers = [ChebGraphConv(dims[i], dims[i + 1], K, rng) for i in range(depth)]

    def forward(self, pose) -> Tensor:
        return kgc_forward(self, pose)


def kgc_forward(stack: KgcStack, pose) -> Tensor:
    """``pose`` is ``[21, 2]`` or ``[B, 21, 2]`` pixels (ndarray or Tensor).

    Returns ``[21, 32, 32]`` (or ``[B, 21, 32, 32]``); the 1024 features of
    each joint are reshaped row-major.
    """
    check_pose(pose)
    x = pose if isinstance(pose, Tensor) else Tensor(pose)
    if stack.normalize:
        x = x * (2.0 / CROP_SIZE) - 1.0
    for i, layer in enumerate(stack.layers):
        x = layer(stack.graph, x)
        if stack.activation and i < len(stack.layers) - 1:
            x = relu(x)
    return x.reshape(x.shape[:-1] + (PRIOR_HW, PRIOR_HW))


class MlpBaseline(Module):
    """3-layer perceptron on the flattened pose; same output contract as KGC."""

    def __init__(self, rng: np.random.Generator, hidden: tuple[int, int] = (256, 512), normalize: bool = True):
        self.normalize = normalize
        dims = [NUM_JOINTS * 2, *hidden, NUM_JOINTS * PRIOR_DIM]
        self.layers = [Linear(dims[i], dims[i + 1], rng) for i in range(3)]

    def forward(self, pose) -> Tensor:
        return mlp_baseline_forward(self, pose)


def mlp_baseline_forward(mlp: MlpBaseline, pose) -> Tensor:
    check_pose(pose)
    x = pose if isinstance(pose, Tensor) else Tensor(pose)
    if mlp.normalize:
        x = x * (2.0 / CROP_SIZE) - 1.0
    lead = x.shape[:-2]
    x = x.reshape(lead + (NUM_JOINTS * 2,))
    for i, layer in enumerate(mlp.layers):
        x = layer(x)
        if i < len(mlp.layers) - 1:
            x = relu(x)
    return x.reshape(lead + (NUM_JOINTS, PRIOR_HW, PRIOR_HW))
