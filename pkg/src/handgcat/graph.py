"""Hand skeleton graph, Laplacians and Chebyshev spectral graph convolution."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Module, param
from .tensor import ShapeError, Tensor, matmul

NUM_JOINTS = 21
SKELETON_VERSION = "mano21-v1"

# joint order: wrist, then (MCP, PIP, DIP, TIP) for thumb, index, middle, ring, pinky
FINGERS = ("thumb", "index", "middle", "ring", "pinky")
PARENTS = (-1,
           0, 1, 2, 3,
           0, 5, 6, 7,
           0, 9, 10, 11,
           0, 13, 14, 15,
           0, 17, 18, 19)
SKELETON_EDGES = tuple((p, j) for j, p in enumerate(PARENTS) if p >= 0)
FINGERTIPS = (4, 8, 12, 16, 20)


class DegenerateGraphError(ValueError):
    pass


@dataclass(frozen=True)
class SkeletonGraph:
    W: np.ndarray
    D: np.ndarray
    L: np.ndarray
    L_scaled: np.ndarray
    lambda_max: float

    @property
    def J(self) -> int:
        return self.W.shape[0]

    @classmethod
    def from_adjacency(cls, W: np.ndarray) -> "SkeletonGraph":
        W = np.asarray(W, dtype=np.float64)
        L = normalized_laplacian(W)
        lam = lambda_max_power(L)
        return cls(W=W, D=np.diag(W.sum(1)), L=L, L_scaled=scaled_laplacian(L, lam), lambda_max=lam)

    def permuted(self, perm) -> "SkeletonGraph":
        """Graph with node i of the result being node perm[i] of this one."""
        perm = np.asarray(perm)
        return SkeletonGraph.from_adjacency(self.W[np.ix_(perm, perm)])


def adjacency_from_edges(edges, n: int) -> np.ndarray:
    W = np.zeros((n, n))
    for i, j in edges:
        if i == j:
            raise ValueError("self loops are not allowed")
        W[i, j] = W[j, i] = 1.0
    return W


def build_hand_skeleton() -> SkeletonGraph:
    return SkeletonGraph.from_adjacency(adjacency_from_edges(SKELETON_EDGES, NUM_JOINTS))


def normalized_laplacian(W: np.ndarray) -> np.ndarray:
    """I - D^-1/2 W D^-1/2."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != W.shape[1] or not np.allclose(W, W.T):
        raise ValueError("adjacency must be square and symmetric")
    deg = W.sum(axis=1)
    if np.any(deg <= 0):
        raise DegenerateGraphError(f"nodes with zero degree: {np.flatnonzero(deg <= 0).tolist()}")
    d = 1.0 / np.sqrt(deg)
    return np.eye(len(W)) - d[:, None] * W * d[None, :]


def lambda_max_power(L: np.ndarray, iters: int = 100, tol: float = 1e-10) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration.

    Runs at least ``iters`` steps, then continues (bounded) until the eigen
    residual ``|L x - lam x|`` falls below ``tol * lam``. A plain test on the
    change of ``lam`` stops too early when the top two eigenvalues are close,
    as they are for the hand tree (2 and about 1.92).
    """
    n = L.shape[0]
    # deterministic start with components along every eigenvector in practice
    x = np.linspace(1.0, 2.0, n) * np.where(np.arange(n) % 2, -1.0, 1.0)
    x /= np.linalg.norm(x)
    lam = float(x @ L @ x)
    for it in range(100 * iters):
        y = L @ x
        lam = float(x @ y)
        if it + 1 >= iters and np.linalg.norm(y - lam * x) <= tol * abs(lam):
            break
        x = y / np.linalg.norm(y)
    return lam


def scaled_laplacian(L: np.ndarray, lambda_max: float) -> np.ndarray:
    if not lambda_max > 0:
        raise ValueError("lambda_max must be positive")
    return 2.0 * L / lambda_max - np.eye(L.shape[0])


def chebyshev_basis(L_scaled: np.ndarray, K: int) -> list[np.ndarray]:
    """Dense T_0..T_{K-1} of the scaled Laplacian via the three-term recurrence."""
    n = L_scaled.shape[0]
    T = [np.eye(n)]
    if K > 1:
        T.append(L_scaled.copy())
    for _ in range(2, K):
        T.append(2.0 * L_scaled @ T[-1] - T[-2])
    return T[:K]


def write_edge_list(path, edges=SKELETON_EDGES) -> None:
    with open(path, "w") as fh:
        fh.write(f"# {SKELETON_VERSION}\n")
        for i, j in edges:
            fh.write(f"{i} {j}\n")


def read_edge_list(path) -> list[tuple[int, int]]:
    edges = []
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                i, j = line.split()
                edges.append((int(i), int(j)))
    return edges


class ChebGraphConv(Module):
    """F_out = sum_k T_k(L~) F_in Theta_k, k = 0..K-1.

    ``F_in`` may be ``[J, f_in]`` or batched ``[B, J, f_in]``. The recurrence is
    applied to features (never materialising T_k), which is what the dense
    basis in :func:`chebyshev_basis` is checked against.
    """

    def __init__(self, f_in: int, f_out: int, K: int, rng: np.random.Generator, bias: bool = True):
        if K < 1:
            raise ValueError("K must be >= 1")
        self.K = K
        self.f_in, self.f_out = f_in, f_out
        self.theta = [param((f_in, f_out), rng, fan_in=f_in * K) for _ in range(K)]
        self.bias = param((f_out,), rng, scale=0.0) if bias else None

    def forward(self, g: SkeletonGraph, F_in: Tensor) -> Tensor:
        return cheb_graph_conv(self, g, F_in)


def cheb_graph_conv(layer: ChebGraphConv, g: SkeletonGraph, F_in: Tensor) -> Tensor:
    if F_in.shape[-2] != g.J or F_in.shape[-1] != layer.f_in:
        raise ShapeError(f"expected [..., {g.J}, {layer.f_in}] features, got {F_in.shape}")
    Ls = Tensor(g.L_scaled, dtype=F_in.dtype)
    x_prev, x = None, F_in
    out = matmul(x, layer.theta[0])
    for k in range(1, layer.K):
        if k == 1:
            x_prev, x = x, matmul(Ls, x)
        else:
            x_prev, x = x, 2.0 * matmul(Ls, x) - x_prev
        out = out + matmul(x, layer.theta[k])
    if layer.bias is not None:
        out = out + layer.bias
    return out
