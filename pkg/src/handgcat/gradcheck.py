"""Central finite-difference checks of the autodiff engine in float64.

Every case builds a scalar ``L = sum(f(inputs) * R)`` with a fixed random
``R`` and compares the backpropagated gradient with central differences.
Small cases probe individual elements; the end-to-end network is probed along
random directions through all parameters at once, since elementwise probing
of thousands of weights would take hours.

The error of one input is normwise, ``max|g - g_fd| / max(max|g|, max|g_fd|, floor)``
over the probed elements, where ``floor`` is 1e-3 of the largest gradient in the
case. The floor only matters for inputs whose exact gradient is zero, such as
key biases under softmax shift invariance.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .cat import CatBlock, CatStack, PlainTransformer, attend, cross_attend
from .graph import ChebGraphConv, build_hand_skeleton, cheb_graph_conv
from .hand_model import default_hand_model, lbs_forward, rodrigues_t
from .kgc import KgcStack, MlpBaseline
from .model import HandGCAT, Hourglass, ModelConfig, Regressor, compute_training_loss
from .tensor import Tensor, precision


@dataclass
class CheckResult:
    name: str
    seed: int
    max_rel: float
    ok: bool


def _leaf(rng, *shape, positive=False, away_from_zero=False):
    x = rng.normal(size=shape)
    if positive:
        x = np.abs(x) + 0.5
    if away_from_zero:
        x = np.where(x >= 0, x + 0.05, x - 0.05)
    return Tensor(x, requires_grad=True)


def _central(loss_fn, flat, i, h):
    orig = flat[i]
    flat[i] = orig + h
    with T.no_grad():
        up = loss_fn().item()
    flat[i] = orig - h
    with T.no_grad():
        dn = loss_fn().item()
    flat[i] = orig
    return (up - dn) / (2 * h)


def _fd_elements(loss_fn, inputs, n_probe, rng, eps=1e-6):
    """Analytic vs finite-difference on up to ``n_probe`` elements per input."""
    out = loss_fn()
    for t in inputs:
        t.grad = None
    out.backward()
    floor = 1e-3 * max((np.abs(t.grad).max() for t in inputs if t.grad is not None), default=0.0)
    worst = 0.0
    for t in inputs:
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(n_probe, flat.size), replace=False)
        ga, gn = [], []
        for i in picks:
            a = g.reshape(-1)[i]
            # a step that straddles a ReLU kink is refined; a wrong gradient disagrees at every step
            for h in (eps, eps / 10, eps / 100):
                n = _central(loss_fn, flat, i, h * max(1.0, abs(flat[i])))
                if abs(a - n) <= 1e-5 * max(abs(a), abs(n), floor):
                    break
            gn.append(n)
            ga.append(a)
        ga, gn = np.array(ga), np.array(gn)
        scale = max(np.abs(ga).max(), np.abs(gn).max(), floor, 1e-12)
        worst = max(worst, float(np.abs(ga - gn).max() / scale))
    return worst


def _fd_directions(loss_fn, params, n_dirs, rng, eps=1e-6):
    """Analytic vs finite-difference directional derivatives through all params."""
    for p in params:
        p.grad = None
    loss_fn().backward()
    worst = 0.0
    for _ in range(n_dirs):
        dirs = [rng.normal(size=p.shape) for p in params]
        analytic = sum(float((p.grad * d).sum()) for p, d in zip(params, dirs) if p.grad is not None)
        for h in (eps, eps / 10, eps / 100):
            vals = []
            for sign in (1.0, -1.0):
                saved = [p.data.copy() for p in params]
                for p, d in zip(params, dirs):
                    p.data += sign * h * d
                with T.no_grad():
                    vals.append(loss_fn().item())
                for p, old in zip(params, saved):
                    p.data[...] = old
            numeric = (vals[0] - vals[1]) / (2 * h)
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
            if err <= 1e-5:
                break
        worst = max(worst, err)
    return worst


def _projected(f, rng):
    """Wrap ``f`` into a scalar loss with a fixed random projection."""
    cache = {}

    def loss():
        y = f()
        if "R" not in cache:
            cache["R"] = Tensor(rng.normal(size=y.shape))
        return (y * cache["R"]).sum()
    return loss


def _unzero(params, rng):
    """Zero-initialised biases put ReLU inputs exactly on the kink; nudge them off."""
    for p in params:
        if not p.data.any():
            p.data[...] = rng.normal(size=p.shape) * 0.1
    return params


# -- cases: each takes an rng and returns (scalar loss closure, leaves) ----------

def _binary(op, **kw):
    def case(rng):
        a = _leaf(rng, 3, 1, 4, **kw)
        b = _leaf(rng, 5, 4, **kw)
        return _projected(lambda: op(a, b), rng), [a, b]
    return case


def _unary(op, **kw):
    def case(rng):
        a = _leaf(rng, 4, 5, **kw)
        return _projected(lambda: op(a), rng), [a]
    return case


def _case_matmul(rng):
    a, b = _leaf(rng, 2, 3, 4, 5), _leaf(rng, 5, 6)
    return _projected(lambda: T.matmul(a, b), rng), [a, b]


def _case_getitem(rng):
    a = _leaf(rng, 4, 5, 3)
    idx = np.array([0, 2, 2, 3])
    return _projected(lambda: a[1:3, ::2] * 2.0 + a[idx, 1].sum(), rng), [a]


def _case_structural(rng):
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 3, 4)
    return _projected(lambda: T.concat([a.reshape(6, 4), b.transpose(1, 0, 2).reshape(6, 4)], axis=1)
                      + T.stack([a.swapaxes(0, 1), b.swapaxes(0, 1)], axis=0).reshape(6, 8), rng), [a, b]


def _case_reduce(rng):
    a = _leaf(rng, 3, 4, 5)
    return _projected(lambda: a.sum(axis=1) * a.mean(axis=(0, 2), keepdims=True)[0, :3, 0].sum()
                      + a.mean(), rng), [a]


def _case_where(rng):
    a, b = _leaf(rng, 4, 5), _leaf(rng, 4, 5)
    cond = rng.random((4, 5)) > 0.5
    return _projected(lambda: T.where(cond, a * a, b), rng), [a, b]


def _case_layer_scale(rng):
    a, s = _leaf(rng, 3, 4, 5), _leaf(rng, 4)
    return _projected(lambda: T.layer_scale(a, s, axis=1), rng), [a, s]


def _case_upsample(rng):
    a = _leaf(rng, 2, 3, 4, 4)
    return _projected(lambda: T.upsample2x(a), rng), [a]


def _case_softmax(rng):
    a = _leaf(rng, 3, 6)
    return _projected(lambda: T.softmax(a, axis=-1) + T.softmax(a, axis=0), rng), [a]


def _case_mse(rng):
    a, b = _leaf(rng, 4, 5), _leaf(rng, 4, 5)
    return (lambda: T.mse_loss(a, b) * 3.0), [a, b]


def _conv_case(k, stride, batched):
    def case(rng):
        x = _leaf(rng, *((2,) if batched else ()), 3, 6, 6)
        w, b = _leaf(rng, 4, 3, k, k), _leaf(rng, 4)
        return _projected(lambda: T.conv2d(x, w, b, stride=stride), rng), [x, w, b]
    return case


def _case_rodrigues(rng):
    r = Tensor(rng.normal(size=(5, 3)) * rng.uniform(0.01, 2.5, size=(5, 1)), requires_grad=True)
    return _projected(lambda: rodrigues_t(r), rng), [r]


def _case_cheb(rng):
    g = build_hand_skeleton()
    layer = ChebGraphConv(3, 4, int(rng.integers(1, 4)), rng)
    layer.bias.data[:] = rng.normal(size=4)
    x = _leaf(rng, 2, 21, 3)
    return _projected(lambda: cheb_graph_conv(layer, g, x), rng), [x, *_unzero(layer.parameters(), rng)]


def _case_attend(rng):
    q, k, v = _leaf(rng, 2, 5, 4), _leaf(rng, 2, 5, 4), _leaf(rng, 2, 5, 4)
    return _projected(lambda: attend(q, k, v, heads=2), rng), [q, k, v]


def _case_cat_block(rng):
    block = CatBlock(4, 2, rng)
    fi, fp = _leaf(rng, 1, 6, 4), _leaf(rng, 1, 6, 4)
    return _projected(lambda: T.concat(list(cross_attend(block, fi, fp, (2, 3))), axis=-1), rng), \
        [fi, fp, *_unzero(block.parameters(), rng)]


def _case_cat_stack(rng):
    st = CatStack(rng, c_image=3, c_prior=2, d_model=4, heads=2, blocks=2, out_channels=3)
    fi, fp = _leaf(rng, 3, 2, 2), _leaf(rng, 2, 2, 2)
    return _projected(lambda: st(fi, fp), rng), [fi, fp, *_unzero(st.parameters(), rng)]


def _case_plain(rng):
    pt = PlainTransformer(rng, c_image=3, c_prior=2, d_model=4, heads=2, layers=2, out_channels=3)
    fi, fp = _leaf(rng, 1, 3, 2, 2), _leaf(rng, 1, 2, 2, 2)
    return _projected(lambda: pt(fi, fp), rng), [fi, fp, *_unzero(pt.parameters(), rng)]


def _case_kgc(rng):
    st = KgcStack(rng, depth=2, widths=[6, 1024], K=3)
    pose = Tensor(rng.uniform(20, 230, size=(2, 21, 2)), requires_grad=True)
    return _projected(lambda: st(pose), rng), [pose, *_unzero(st.parameters(), rng)]


def _case_mlp(rng):
    m = MlpBaseline(rng, hidden=(8, 8))
    pose = Tensor(rng.uniform(20, 230, size=(21, 2)), requires_grad=True)
    return _projected(lambda: m(pose), rng), [pose, *_unzero(m.parameters(), rng)]


def _case_hourglass(rng):
    hg = Hourglass(rng, c_in=2, width=3, out_channels=2)
    x = _leaf(rng, 1, 2, 8, 8)
    return _projected(lambda: hg(x), rng), [x, *_unzero(hg.parameters(), rng)]


def _case_regressor(rng):
    reg = Regressor(rng, c_in=5, hidden=6, out_scale=1.0)
    f, h = _leaf(rng, 2, 3, 4, 4), _leaf(rng, 2, 2, 4, 4)
    return _projected(lambda: T.concat(list(reg(f, h)), axis=-1), rng), [f, h, *_unzero(reg.parameters(), rng)]


def _case_lbs(rng):
    hand = default_hand_model()
    theta = Tensor(rng.uniform(-0.6, 0.6, size=(2, 48)), requires_grad=True)
    beta = Tensor(rng.uniform(-1, 1, size=(2, 10)), requires_grad=True)
    transl = Tensor(rng.normal(size=(2, 3)) * 10, requires_grad=True)

    def f():
        v, j = lbs_forward(hand, theta, beta, transl)
        return T.concat([v, j], axis=1)
    return _projected(f, rng), [theta, beta, transl]


def _case_loss(rng):
    pred = {k: _leaf(rng, *s) for k, s in _LOSS_SHAPES.items()}
    gt = {k: rng.normal(size=s) for k, s in _LOSS_SHAPES.items()}
    w = {k: float(rng.uniform(0.1, 2)) for k in _LOSS_SHAPES}
    return (lambda: compute_training_loss(pred, gt, w)[0]), list(pred.values())


_LOSS_SHAPES = {"heatmaps": (1, 2, 3, 3), "theta": (1, 48), "beta": (1, 10), "joints": (1, 21, 3),
                "verts": (1, 778, 3)}

TINY_NET = ModelConfig(backbone_widths=(4, 4, 4, 4), kgc_depth=2, kgc_widths=[4, 1024], cat_d_model=4,
                       cat_heads=2, cat_blocks=1, fused_channels=4, hourglass_width=4, heatmap_channels=4,
                       regressor_hidden=8)


def end_to_end_case(rng, cfg: ModelConfig = TINY_NET):
    """Full network (reduced widths) plus the training loss; returns (loss fn, params)."""
    net = HandGCAT(cfg, rng)
    _unzero(net.parameters(), rng)
    image = rng.random((1, 3, 256, 256))
    pose = rng.uniform(30, 220, size=(1, 21, 2))
    gt = {"heatmaps": rng.random((1, cfg.heatmap_channels, 32, 32)), "theta": rng.normal(size=(1, 48)) * 0.3,
          "beta": rng.normal(size=(1, 10)), "joints": rng.normal(size=(1, 21, 3)) * 30,
          "verts": rng.normal(size=(1, 778, 3)) * 30}
    return (lambda: compute_training_loss(net(image, pose), gt)[0]), net.parameters()


ELEMENT_CASES = {
    "add": _binary(lambda a, b: a + b), "sub": _binary(lambda a, b: a - b),
    "mul": _binary(lambda a, b: a * b), "div": _binary(lambda a, b: a / b, away_from_zero=True),
    "rsub_rdiv": _unary(lambda a: 2.0 - 3.0 / a, away_from_zero=True),
    "neg": _unary(lambda a: -a), "pow": _unary(lambda a: a ** 1.5, positive=True),
    "exp": _unary(T.exp), "log": _unary(T.log, positive=True), "sqrt": _unary(T.sqrt, positive=True),
    "sin": _unary(T.sin), "cos": _unary(T.cos), "tanh": _unary(T.tanh),
    "relu": _unary(T.relu, away_from_zero=True),
    "matmul": _case_matmul, "getitem": _case_getitem, "reshape_transpose_concat_stack": _case_structural,
    "sum_mean": _case_reduce, "where": _case_where, "layer_scale": _case_layer_scale,
    "upsample2x": _case_upsample, "softmax": _case_softmax, "mse_loss": _case_mse,
    "conv2d_k3_s1": _conv_case(3, 1, True), "conv2d_k3_s2": _conv_case(3, 2, True),
    "conv2d_k1_unbatched": _conv_case(1, 1, False),
    "rodrigues": _case_rodrigues, "cheb_graph_conv": _case_cheb, "attend": _case_attend,
    "cat_block": _case_cat_block, "cat_stack": _case_cat_stack, "plain_transformer": _case_plain,
    "kgc_stack": _case_kgc, "mlp_baseline": _case_mlp, "hourglass": _case_hourglass,
    "regressor": _case_regressor, "lbs": _case_lbs, "training_loss": _case_loss,
}


def run_case(name: str, seed: int, rtol: float = 1e-4, n_probe: int = 4, n_dirs: int = 2) -> CheckResult:
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    with precision("float64"):
        if name == "end_to_end":
            loss, params = end_to_end_case(rng)
            err = _fd_directions(loss, params, n_dirs, rng)
        else:
            loss, leaves = ELEMENT_CASES[name](rng)
            err = _fd_elements(loss, leaves, n_probe, rng)
    return CheckResult(name, seed, err, bool(err <= rtol))


def run_suite(seeds: int = 20, rtol: float = 1e-4, only: str | None = None) -> list[CheckResult]:
    names = [*ELEMENT_CASES, "end_to_end"]
    if only:
        names = [n for n in names if only in n]
    return [run_case(n, s, rtol) for n in names for s in range(seeds)]
