"""Backbone, hourglass, parameter regressor, and the assembled network."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cat import CatStack, PlainTransformer
from .graph import NUM_JOINTS
from .hand_model import NUM_BETAS, NUM_POSE, HandModel, default_hand_model, lbs_forward
from .kgc import KgcStack, MlpBaseline
from .nn import Conv2d, Linear, Module
from .tensor import ShapeError, Tensor, concat, mse_loss, relu, upsample2x

IMAGE_SIZE = 256
FEAT_HW = 32


class Backbone(Module):
    """Four-stage conv encoder: three stride-2 stages (256 -> 32) and a stride-1 head."""

    def __init__(self, rng: np.random.Generator, widths=(32, 64, 128, 256), c_in: int = 3):
        dims = [c_in, *widths]
        strides = (2, 2, 2, 1)
        self.stages = [Conv2d(dims[i], dims[i + 1], 3, rng, stride=strides[i]) for i in range(4)]
        self.out_channels = widths[-1]

    def forward(self, image: Tensor) -> Tensor:
        return backbone_forward(self, image)


def backbone_forward(net: Backbone, image: Tensor) -> Tensor:
    if image.shape[-3] != net.stages[0].weight.shape[1]:
        raise ShapeError(f"backbone expects {net.stages[0].weight.shape[1]} input channels, got {image.shape}")
    if image.shape[-1] % 8 or image.shape[-2] % 8:
        raise ShapeError(f"image sides must be multiples of 8, got {image.shape[-2:]}")
    x = image
    for i, conv in enumerate(net.stages):
        x = conv(x)
        if i < len(net.stages) - 1:
            x = relu(x)
    return x


class Hourglass(Module):
    """Single hourglass over a 32x32 grid: 32 -> 16 -> 8 -> 16 -> 32 with skips.

    ``out = decoder(x) + skip32(x)``; the decoder output at 16 also adds a
    skip projection of the 16x16 encoder features.
    """

    def __init__(self, rng: np.random.Generator, c_in: int = 256, width: int = 256, out_channels: int = 256):
        self.skip32 = Conv2d(c_in, out_channels, 1, rng)
        self.down16 = Conv2d(c_in, width, 3, rng, stride=2)
        self.skip16 = Conv2d(width, width, 1, rng)
        self.down8 = Conv2d(width, width, 3, rng, stride=2)
        self.mid8 = Conv2d(width, width, 3, rng)
        self.up16 = Conv2d(width, width, 3, rng)
        self.up32 = Conv2d(width, out_channels, 3, rng)
        self.out_channels = out_channels

    def forward(self, x: Tensor) -> Tensor:
        return hourglass_forward(self, x)


def hourglass_forward(hg: Hourglass, x: Tensor) -> Tensor:
    if x.shape[-3] != hg.skip32.weight.shape[1]:
        raise ShapeError(f"hourglass expects {hg.skip32.weight.shape[1]} channels, got {x.shape}")
    d16 = relu(hg.down16(x))
    d8 = relu(hg.down8(d16))
    b8 = relu(hg.mid8(d8))
    u16 = relu(hg.up16(upsample2x(b8))) + hg.skip16(d16)
    return hg.up32(upsample2x(u16)) + hg.skip32(x)


class Regressor(Module):
    """concat(F_IP, H) -> global average pool -> dense -> (theta, beta)."""

    def __init__(self, rng: np.random.Generator, c_in: int, hidden: int = 512, out_scale: float = 0.01):
        self.fc1 = Linear(c_in, hidden, rng)
        self.fc2 = Linear(hidden, hidden, rng)
        self.out = Linear(hidden, NUM_POSE + NUM_BETAS, rng)
        self.out.weight.data *= out_scale

    def forward(self, F_IP: Tensor, H: Tensor) -> tuple[Tensor, Tensor]:
        return regress_params(self, F_IP, H)


def regress_params(reg: Regressor, F_IP: Tensor, H: Tensor) -> tuple[Tensor, Tensor]:
    if F_IP.shape[-2:] != H.shape[-2:] or F_IP.ndim != H.ndim:
        raise ShapeError(f"feature {F_IP.shape} and heatmap {H.shape} grids differ")
    x = concat([F_IP, H], axis=-3).mean(axis=(-2, -1))
    x = relu(reg.fc2(relu(reg.fc1(x))))
    y = reg.out(x)
    return y[..., :NUM_POSE], y[..., NUM_POSE:]


LOSS_TERMS = ("heatmaps", "theta", "beta", "joints", "verts")


def compute_training_loss(pred: dict, gt: dict, weights: dict | None = None) -> tuple[Tensor, dict]:
    """Weighted sum of per-term mean squared errors. Returns (total, per-term floats)."""
    weights = {k: 1.0 for k in LOSS_TERMS} | (weights or {})
    total = None
    parts = {}
    for k in LOSS_TERMS:
        if k not in pred or k not in gt:
            raise KeyError(f"loss term {k!r} missing from {'prediction' if k not in pred else 'ground truth'}")
        term = mse_loss(pred[k], gt[k])
        parts[k] = term.item()
        term = term * weights[k]
        total = term if total is None else total + term
    return total, parts


def render_heatmaps(pose2d: np.ndarray, channels: int = 256, hw: int = FEAT_HW,
                    image_size: int = IMAGE_SIZE, sigma: float = 1.5) -> np.ndarray:
    """Gaussian targets in the first 21 channels (grid cells), zeros elsewhere."""
    pose2d = np.asarray(pose2d)
    lead = pose2d.shape[:-2]
    out = np.zeros(lead + (channels, hw, hw))
    n = min(channels, NUM_JOINTS)
    centers = pose2d[..., :n, :] * (hw / image_size) - 0.5
    ys, xs = np.mgrid[0:hw, 0:hw]
    dx = xs - centers[..., 0, None, None]
    dy = ys - centers[..., 1, None, None]
    out[..., :n, :, :] = np.exp(-(dx * dx + dy * dy) / (2 * sigma * sigma))
    return out


@dataclass
class ModelConfig:
    backbone_widths: tuple = (32, 64, 128, 256)
    kgc_variant: str = "gcn"          # gcn | mlp | none
    kgc_depth: int = 4
    kgc_widths: list | None = None
    kgc_K: int = 2
    kgc_normalize: bool = True
    mlp_hidden: tuple = (256, 512)
    cat_variant: str = "cat"          # cat | plain_transformer | none
    cat_blocks: int = 2
    cat_heads: int = 4
    cat_d_model: int = 256
    fused_channels: int = 256
    hourglass_width: int = 256
    heatmap_channels: int = 256
    regressor_hidden: int = 512
    hand_seed: int = field(default=20230714)


class HandGCAT(Module):
    """Image + 2D pose -> heatmaps, hand parameters, joints and mesh."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, hand: HandModel | None = None):
        self.cfg = cfg
        self.hand = hand or default_hand_model(cfg.hand_seed)
        self.backbone = Backbone(rng, cfg.backbone_widths)
        c_img = cfg.backbone_widths[-1]
        if cfg.kgc_variant == "gcn":
            self.prior = KgcStack(rng, depth=cfg.kgc_depth, widths=cfg.kgc_widths, K=cfg.kgc_K,
                                  normalize=cfg.kgc_normalize)
        elif cfg.kgc_variant == "mlp":
            self.prior = MlpBaseline(rng, hidden=tuple(cfg.mlp_hidden), normalize=cfg.kgc_normalize)
        elif cfg.kgc_variant == "none":
            self.prior = None
        else:
            raise ValueError(f"unknown kgc variant {cfg.kgc_variant!r}")
        common = dict(c_image=c_img, c_prior=NUM_JOINTS, d_model=cfg.cat_d_model,
                      heads=cfg.cat_heads, out_channels=cfg.fused_channels)
        if cfg.cat_variant == "cat":
            self.fusion = CatStack(rng, blocks=cfg.cat_blocks, **common)
        elif cfg.cat_variant == "plain_transformer":
            self.fusion = PlainTransformer(rng, layers=2, **common)
        elif cfg.cat_variant == "none":
            self.fusion = None
        else:
            raise ValueError(f"unknown cat variant {cfg.cat_variant!r}")
        if (self.prior is None) != (self.fusion is None):
            raise ValueError("the prior branch and the fusion module must be enabled together")
        c_fused = cfg.fused_channels if self.fusion is not None else c_img
        self.hourglass = Hourglass(rng, c_fused, cfg.hourglass_width, cfg.heatmap_channels)
        self.regressor = Regressor(rng, c_fused + cfg.heatmap_channels, cfg.regressor_hidden)

    def forward(self, image, pose2d=None) -> dict:
        image = image if isinstance(image, Tensor) else Tensor(image)
        F_I = self.backbone(image)
        if self.fusion is not None:
            if pose2d is None:
                raise ValueError("this configuration needs a 2D pose")
            F_P = self.prior(pose2d)
            F_IP = self.fusion(F_I, F_P)
        else:
            F_IP = F_I
        H = self.hourglass(F_IP)
        theta, beta = self.regressor(F_IP, H)
        verts, joints = lbs_forward(self.hand, theta, beta)
        return {"heatmaps": H, "theta": theta, "beta": beta, "joints": joints, "verts": verts}

