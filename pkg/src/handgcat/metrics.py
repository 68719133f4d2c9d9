"""Pose and mesh error metrics (millimetres)."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np

AUC_MAX_MM = 50.0
AUC_STEPS = 100


class AlignmentError(ValueError):
    """Procrustes alignment is undefined for this point configuration."""


def _pair(pred, gt):
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def per_point_error(pred, gt) -> np.ndarray:
    pred, gt = _pair(pred, gt)
    return np.linalg.norm(pred - gt, axis=-1)


def mpjpe(pred, gt) -> float:
    """Mean Euclidean distance over points (joints or vertices)."""
    return float(per_point_error(pred, gt).mean())


mpvpe = mpjpe


def procrustes_transform(pred, gt, weights=None) -> tuple[float, np.ndarray, np.ndarray]:
    """Similarity ``(s, R, t)`` minimising ``sum w_i |s R p_i + t - g_i|^2`` (unit weights by default)."""
    pred, gt = _pair(pred, gt)
    if pred.shape[0] < 3:
        raise AlignmentError("need at least 3 points")
    w = np.ones(len(pred)) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    mp, mg = w @ pred, w @ gt
    X, Y = pred - mp, gt - mg
    if np.linalg.matrix_rank(Y, tol=1e-9 * max(1.0, np.abs(Y).max())) < 2:
        raise AlignmentError("ground truth points are collinear or coincident")
    var_x = (w * (X * X).sum(1)).sum()
    if var_x <= 0:
        raise AlignmentError("predicted points are coincident")
    U, S, Vt = np.linalg.svd((Y * w[:, None]).T @ X)
    d = np.ones(3)
    if np.linalg.det(U @ Vt) < 0:
        d[-1] = -1.0
    R = U @ np.diag(d) @ Vt
    s = float((S * d).sum() / var_x)
    t = mg - s * R @ mp
    return s, R, t


def procrustes_align(pred, gt) -> np.ndarray:
    """Closed-form least-squares similarity alignment of ``pred`` onto ``gt``."""
    s, R, t = procrustes_transform(pred, gt)
    return s * np.asarray(pred, dtype=np.float64) @ R.T + t


def _refine_mean_error(pred, gt, aligned, iters, tol):
    """Iteratively reweighted Procrustes: each step solves the weighted least-squares
    problem with weights 1/|residual|, which never increases the mean distance."""
    err = np.linalg.norm(aligned - gt, axis=1)
    best = err.mean()
    floor = 1e-12 * max(1.0, np.abs(gt).max())
    for _ in range(iters):
        if best <= floor:
            break
        s, R, t = procrustes_transform(pred, gt, 1.0 / np.maximum(err, floor))
        cand = s * pred @ R.T + t
        cerr = np.linalg.norm(cand - gt, axis=1)
        if cerr.mean() >= best:
            break
        done = best - cerr.mean() <= tol * best
        aligned, err, best = cand, cerr, cerr.mean()
        if done:
            break
    return aligned, best


def metric_align(pred, gt, iters: int = 500, tol: float = 1e-14) -> np.ndarray:
    """Similarity alignment minimising the mean point distance.

    Starts from the least-squares solution and descends by reweighting. That
    start can sit in a basin worse than no alignment at all (one outlier joint
    is enough); only then is the descent rerun from the identity, so the result
    is never worse than the unaligned prediction and, in the common case,
    invariant to similarity transforms of ``pred``.
    """
    pred, gt = _pair(pred, gt)
    ls, ls_err = _refine_mean_error(pred, gt, procrustes_align(pred, gt), iters, tol)
    if ls_err < np.linalg.norm(pred - gt, axis=1).mean():
        return ls
    return _refine_mean_error(pred, gt, pred, iters, tol)[0]


def pa_mpjpe(pred, gt) -> float:
    return mpjpe(metric_align(pred, gt), gt)


pa_mpvpe = pa_mpjpe


def threshold_grid(max_mm: float = AUC_MAX_MM, steps: int = AUC_STEPS) -> np.ndarray:
    return np.linspace(0.0, max_mm, steps + 1)


def pck_curve(errors, thresholds=None) -> tuple[np.ndarray, np.ndarray]:
    errors = np.asarray(errors, dtype=np.float64).ravel()
    if errors.size == 0:
        raise ValueError("no errors to score")
    if np.any(errors < 0):
        raise ValueError("errors must be non-negative")
    thresholds = threshold_grid() if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    pck = (errors[None, :] <= thresholds[:, None]).mean(axis=1)
    return thresholds, pck


def auc_pck(errors, thresholds=None) -> float:
    """Trapezoidal area under PCK over the threshold range, normalised to [0, 1]."""
    th, pck = pck_curve(errors, thresholds)
    return float(np.trapezoid(pck, th) / (th[-1] - th[0]))


def _nn_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.sqrt(np.maximum(d2.min(axis=1), 0.0))


def f_score(pred_mesh, gt_mesh, tau: float, correspondence: bool = False) -> float:
    """Harmonic mean of precision and recall at distance ``tau``.

    Default matches each vertex to its nearest neighbour in the other mesh;
    ``correspondence=True`` compares vertex i with vertex i instead.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    pred, gt = _pair(pred_mesh, gt_mesh)
    if pred.shape[0] == 0:
        raise ValueError("empty mesh")
    if correspondence:
        d = np.linalg.norm(pred - gt, axis=1)
        p = r = float((d <= tau).mean())
    else:
        p = float((_nn_dist(pred, gt) <= tau).mean())
        r = float((_nn_dist(gt, pred) <= tau).mean())
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


@dataclass
class MetricsReport:
    mpjpe_mm: float
    pa_mpjpe_mm: float
    mpvpe_mm: float
    pa_mpvpe_mm: float
    auc_pck: float
    auc_pcv: float
    f_at_5: float
    f_at_15: float
    sample_count: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    def csv_header(self) -> str:
        return ",".join(asdict(self))

    def csv_row(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="").writerow(asdict(self).values())
        return buf.getvalue()

    def check(self) -> None:
        """Raise if any invariant of the report is violated."""
        tol = 1e-9
        bad = []
        if self.pa_mpjpe_mm > self.mpjpe_mm + tol:
            bad.append("pa_mpjpe > mpjpe")
        if self.pa_mpvpe_mm > self.mpvpe_mm + tol:
            bad.append("pa_mpvpe > mpvpe")
        for k in ("auc_pck", "auc_pcv", "f_at_5", "f_at_15"):
            v = getattr(self, k)
            if not 0.0 <= v <= 1.0:
                bad.append(f"{k}={v} outside [0,1]")
        for k in ("mpjpe_mm", "pa_mpjpe_mm", "mpvpe_mm", "pa_mpvpe_mm"):
            v = getattr(self, k)
            if not (np.isfinite(v) and v >= 0):
                bad.append(f"{k}={v} invalid")
        if bad:
            raise ValueError("metrics invariant violated: " + "; ".join(bad))


def summarize(pred_joints, gt_joints, pred_verts, gt_verts, root_relative: bool = True) -> MetricsReport:
    """Aggregate metrics over samples ``[N, 21, 3]`` / ``[N, 778, 3]``.

    With ``root_relative`` both predictions and targets are re-expressed
    relative to their own root joint (index 0) before the unaligned metrics.
    """
    pj, gj = _pair(pred_joints, gt_joints)
    pv, gv = _pair(pred_verts, gt_verts)
    if root_relative:
        pv = pv - pj[:, :1]
        gv = gv - gj[:, :1]
        pj = pj - pj[:, :1]
        gj = gj - gj[:, :1]
    n = len(pj)
    pa_j = np.stack([metric_align(pj[i], gj[i]) for i in range(n)])
    pa_v = np.stack([metric_align(pv[i], gv[i]) for i in range(n)])
    ej, ev = per_point_error(pj, gj), per_point_error(pv, gv)
    paj, pav = per_point_error(pa_j, gj), per_point_error(pa_v, gv)
    return MetricsReport(
        mpjpe_mm=float(ej.mean()), pa_mpjpe_mm=float(paj.mean()),
        mpvpe_mm=float(ev.mean()), pa_mpvpe_mm=float(pav.mean()),
        auc_pck=auc_pck(paj), auc_pcv=auc_pck(pav),
        f_at_5=float(np.mean([f_score(pa_v[i], gv[i], 5.0) for i in range(n)])),
        f_at_15=float(np.mean([f_score(pa_v[i], gv[i], 15.0) for i in range(n)])),
        sample_count=n,
    )


def write_pck_csv(path, errors, thresholds=None) -> None:
    th, pck = pck_curve(errors, thresholds)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold_mm", "pck"])
        w.writerows(zip(th.tolist(), pck.tolist()))
