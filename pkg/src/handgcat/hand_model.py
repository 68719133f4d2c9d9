"""Seeded synthetic parametric hand with linear blend skinning.

Same interface shapes as MANO (778 vertices, 21 joints, 48 pose scalars, 10
shape scalars) but generated procedurally: vertices are rings around the
bones of a canonical right hand, the joint regressor averages the ring
centred on each joint, and skinning weights fall off with distance to the
bones each joint drives. Units are millimetres.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .graph import NUM_JOINTS, PARENTS
from .tensor import Tensor, matmul, stack

NUM_VERTS = 778
NUM_BETAS = 10
NUM_POSE = 48
MODEL_VERSION = "synthhand-v1"
DEFAULT_SEED = 20230714
RING = 8

# joints carrying a pose triple: wrist (global) then MCP, PIP, DIP of each finger
ARTICULATED = (0, 1, 2, 3, 5, 6, 7, 9, 10, 11, 13, 14, 15, 17, 18, 19)

REST_JOINTS = np.array([
    [0.0, 0.0, 0.0],
    [-25.0, 18.0, -6.0], [-42.0, 38.0, -10.0], [-52.0, 57.0, -12.0], [-59.0, 74.0, -13.0],
    [-20.0, 86.0, 0.0], [-22.0, 124.0, 0.0], [-23.0, 148.0, 0.0], [-24.0, 168.0, 0.0],
    [-2.0, 90.0, 0.0], [-2.0, 132.0, 0.0], [-2.0, 159.0, 0.0], [-2.0, 181.0, 0.0],
    [16.0, 85.0, 0.0], [17.0, 123.0, 0.0], [18.0, 148.0, 0.0], [19.0, 168.0, 0.0],
    [32.0, 76.0, 0.0], [34.0, 105.0, 0.0], [35.0, 123.0, 0.0], [36.0, 140.0, 0.0],
])


# -- rotations -------------------------------------------------------------------

def _skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    o = np.zeros_like(x)
    return np.stack([np.stack([o, -z, y], -1), np.stack([z, o, -x], -1), np.stack([-y, x, o], -1)], -2)


def rodrigues_np(r: np.ndarray, small: float = 1e-8) -> np.ndarray:
    """Axis-angle ``[..., 3]`` -> rotation matrices ``[..., 3, 3]``."""
    r = np.asarray(r, dtype=np.float64) if not isinstance(r, np.ndarray) else r
    theta = np.linalg.norm(r, axis=-1)[..., None, None]
    K = _skew(r)
    K2 = K @ K
    eye = np.broadcast_to(np.eye(3, dtype=r.dtype), K.shape)
    tiny = theta < small
    safe = np.where(tiny, 1.0, theta)
    a = np.where(tiny, 1.0, np.sin(safe) / safe)
    b = np.where(tiny, 0.5, (1.0 - np.cos(safe)) / (safe * safe))
    return eye + a * K + b * K2


def rodrigues(axis_angle) -> np.ndarray:
    """Rotation matrix for one axis-angle 3-vector."""
    v = np.asarray(axis_angle, dtype=np.float64)
    if v.shape != (3,):
        raise ValueError("expected a 3-vector")
    return rodrigues_np(v)


def rodrigues_t(r: Tensor, small: float = 1e-8) -> Tensor:
    """Differentiable batched Rodrigues: ``[..., 3]`` -> ``[..., 3, 3]``.

    Uses dR/dr_i = (r_i [r]x + [r x (I - R) e_i]x) R / |r|^2, and [e_i]x
    below ``small``.
    """
    rd = r.data
    R = rodrigues_np(rd, small)

    def bw(g):
        flat_r = rd.reshape(-1, 3)
        flat_R = R.reshape(-1, 3, 3)
        flat_g = g.reshape(-1, 3, 3)
        theta2 = np.einsum("ni,ni->n", flat_r, flat_r)
        out = np.empty_like(flat_r)
        eye = np.eye(3)
        for i in range(3):
            e = np.zeros(3)
            e[i] = 1.0
            big = (eye - flat_R) @ e  # [n,3]
            cross = np.cross(flat_r, big)
            num = flat_r[:, i, None, None] * _skew(flat_r) + _skew(cross)
            with np.errstate(divide="ignore", invalid="ignore"):
                dR = (num @ flat_R) / theta2[:, None, None]
            tiny = np.sqrt(theta2) < small
            if np.any(tiny):
                dR[tiny] = _skew(e)
            out[:, i] = np.einsum("nab,nab->n", flat_g, dR)
        r._accum(out.reshape(rd.shape))
    return Tensor._make(R.astype(rd.dtype), (r,), bw)


# -- model -----------------------------------------------------------------------

def _frame(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = d / np.linalg.norm(d)
    ref = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(d, ref)
    u /= np.linalg.norm(u)
    return u, np.cross(d, u)


def _ring(center, direction, radius):
    u, w = _frame(direction)
    ang = np.arange(RING) * (2 * np.pi / RING)
    return center + radius * (np.cos(ang)[:, None] * u + np.sin(ang)[:, None] * w)


def _seg_dist(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


def _radius(child: int) -> float:
    if PARENTS[child] == 0:
        return 10.0
    return {1: 8.0, 2: 7.0, 3: 6.0}.get((child - 1) % 4, 6.0)


@dataclass(frozen=True)
class HandModel:
    template_vertices: np.ndarray   # [778, 3]
    shape_basis: np.ndarray         # [10, 778, 3]
    joint_regressor: np.ndarray     # [21, 778]
    skinning_weights: np.ndarray    # [778, 21]
    parents: tuple = PARENTS
    seed: int = DEFAULT_SEED

    @classmethod
    def generate(cls, seed: int = DEFAULT_SEED) -> "HandModel":
        rng = np.random.default_rng(seed)
        J = REST_JOINTS
        children = [j for j in range(NUM_JOINTS) if PARENTS[j] >= 0]
        bone_dir = {j: J[j] - J[PARENTS[j]] for j in children}

        verts, regressor_rows = [], []
        # one ring centred on every joint
        for j in range(NUM_JOINTS):
            d = bone_dir[j] if j in bone_dir else J[9] - J[0]
            radius = _radius(j) if j in bone_dir else 12.0
            regressor_rows.append(list(range(len(verts) * RING, (len(verts) + 1) * RING)))
            verts.append(_ring(J[j], d, radius))
        n_rings = (NUM_VERTS - len(verts) * RING) // RING
        per_bone = np.full(len(children), n_rings // len(children))
        per_bone[: n_rings % len(children)] += 1
        for c, m in zip(children, per_bone):
            p = PARENTS[c]
            for t in (np.arange(1, m + 1) / (m + 1)):
                verts.append(_ring(J[p] + t * bone_dir[c], bone_dir[c], _radius(c)))
        V = np.concatenate(verts, axis=0)
        # leftover vertices cap the fingertips
        tips = [4, 8, 12, 16, 20]
        extra = []
        for k in range(NUM_VERTS - len(V)):
            tip = tips[k % 5]
            d = bone_dir[tip] / np.linalg.norm(bone_dir[tip])
            extra.append(J[tip] + d * (4.0 + 2.0 * (k // 5)))
        if extra:
            V = np.concatenate([V, np.array(extra)], axis=0)
        assert V.shape == (NUM_VERTS, 3)

        reg = np.zeros((NUM_JOINTS, NUM_VERTS))
        for j, rows in enumerate(regressor_rows):
            reg[j, rows] = 1.0 / RING

        # skinning: each articulated joint drives the bones to its children
        dist = np.full((NUM_VERTS, NUM_JOINTS), np.inf)
        for c in children:
            p = PARENTS[c]
            dist[:, p] = np.minimum(dist[:, p], _seg_dist(V, J[p], J[c]))
        sigma = 8.0
        w = np.exp(-0.5 * (dist / sigma) ** 2)
        w[w < 1e-6] = 0.0
        w /= w.sum(axis=1, keepdims=True)

        # smooth shape basis: per-component random linear field plus one low-frequency wave
        rel = V - J[0]
        basis = np.empty((NUM_BETAS, NUM_VERTS, 3))
        for b in range(NUM_BETAS):
            A = rng.normal(0.0, 0.04, size=(3, 3))
            k = rng.normal(0.0, 1.0, size=3)
            k *= (2 * np.pi / 120.0) / np.linalg.norm(k)
            phase = rng.uniform(0, 2 * np.pi)
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            basis[b] = rel @ A.T + 1.5 * np.sin(V @ k + phase)[:, None] * direction
        return cls(template_vertices=V, shape_basis=basis, joint_regressor=reg,
                   skinning_weights=w, seed=seed)

    @property
    def rest_joints(self) -> np.ndarray:
        return self.joint_regressor @ self.template_vertices

    def save(self, path) -> None:
        checkpoint.save_arrays(path, {
            "template_vertices": self.template_vertices, "shape_basis": self.shape_basis,
            "joint_regressor": self.joint_regressor, "skinning_weights": self.skinning_weights,
            "parents": np.asarray(self.parents, dtype=np.int64),
        }, meta={"model": MODEL_VERSION, "seed": self.seed})

    @classmethod
    def load(cls, path) -> "HandModel":
        arrays, meta = checkpoint.load_arrays(path)
        return cls(template_vertices=arrays["template_vertices"], shape_basis=arrays["shape_basis"],
                   joint_regressor=arrays["joint_regressor"], skinning_weights=arrays["skinning_weights"],
                   parents=tuple(int(p) for p in arrays["parents"]), seed=meta["seed"])


_CACHE: dict[int, HandModel] = {}


def default_hand_model(seed: int = DEFAULT_SEED) -> HandModel:
    if seed not in _CACHE:
        _CACHE[seed] = HandModel.generate(seed)
    return _CACHE[seed]


@dataclass
class ManoParams:
    theta: np.ndarray  # [48] (16 axis-angle triples)
    beta: np.ndarray   # [10]

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if self.theta.shape[-1] != NUM_POSE or self.beta.shape[-1] != NUM_BETAS:
            raise ValueError(f"expected theta[..., {NUM_POSE}] and beta[..., {NUM_BETAS}]")


def lbs_forward(model: HandModel, theta, beta, transl=None) -> tuple[Tensor, Tensor]:
    """Pose and shape the hand.

    ``theta`` is ``[48]`` or ``[B, 48]``, ``beta`` ``[10]`` or ``[B, 10]`` (Tensor
    or array). Returns ``(vertices [.., 778, 3], joints [.., 21, 3])``. The root
    triple rotates the whole hand about the wrist; ``transl`` shifts it.
    """
    theta = theta if isinstance(theta, Tensor) else Tensor(theta)
    beta = beta if isinstance(beta, Tensor) else Tensor(beta, dtype=theta.dtype)
    if not (np.all(np.isfinite(theta.data)) and np.all(np.isfinite(beta.data))):
        raise ValueError("non-finite hand parameters")
    single = theta.ndim == 1
    if single:
        theta = theta.reshape(1, NUM_POSE)
        beta = beta.reshape(1, NUM_BETAS)
    B = theta.shape[0]
    dt = theta.dtype
    tmpl = Tensor(model.template_vertices, dtype=dt)
    basis = Tensor(model.shape_basis.reshape(NUM_BETAS, -1), dtype=dt)
    reg = Tensor(model.joint_regressor, dtype=dt)
    skin = Tensor(model.skinning_weights, dtype=dt)

    shaped = tmpl + matmul(beta, basis).reshape(B, NUM_VERTS, 3)
    rest = matmul(reg, shaped)                                   # [B, 21, 3]
    R_local = rodrigues_t(theta.reshape(B, 16, 3))               # [B, 16, 3, 3]
    slot = {j: a for a, j in enumerate(ARTICULATED)}

    Rg, tg = [], []
    for j in range(NUM_JOINTS):
        p = model.parents[j]
        Rj = R_local[:, slot[j]] if j in slot else None
        if p < 0:
            Rg.append(Rj)
            tg.append(rest[:, j].reshape(B, 3, 1))
            continue
        offset = (rest[:, j] - rest[:, p]).reshape(B, 3, 1)
        Rg.append(matmul(Rg[p], Rj) if Rj is not None else Rg[p])
        tg.append(matmul(Rg[p], offset) + tg[p])
    Rs = stack(Rg, axis=1)                                       # [B, 21, 3, 3]
    Ts = stack(tg, axis=1).reshape(B, NUM_JOINTS, 3) - \
        matmul(Rs, rest.reshape(B, NUM_JOINTS, 3, 1)).reshape(B, NUM_JOINTS, 3)
    M = matmul(skin, Rs.reshape(B, NUM_JOINTS, 9)).reshape(B, NUM_VERTS, 3, 3)
    T = matmul(skin, Ts)
    verts = (M * shaped.reshape(B, NUM_VERTS, 1, 3)).sum(axis=-1) + T
    if transl is not None:
        transl = transl if isinstance(transl, Tensor) else Tensor(transl, dtype=dt)
        verts = verts + transl.reshape(-1, 1, 3)
    joints = matmul(reg, verts)
    if single:
        return verts.reshape(NUM_VERTS, 3), joints.reshape(NUM_JOINTS, 3)
    return verts, joints
