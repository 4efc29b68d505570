"""Composite training loss: level-set boundary loss + ROI dice loss.

    total = alpha * L_seg + (1 - alpha) * L_att  [+ aux_bce_weight * BCE(S, g)]

``alpha`` is chosen per sample: ``1 - tau`` on end slices (either ideal
adjacent ROI empty), ``tau`` otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

DEFAULT_CAP = 96 * math.sqrt(2)


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.3
    eps: float = 1.0
    cap: float = DEFAULT_CAP
    aux_bce_weight: float = 0.0
    # swap tau / 1 - tau (the prose reading: lower alpha on end slices)
    invert_alpha: bool = False

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise ValueError(f"tau must be in (0, 1), got {self.tau}")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")
        if self.cap <= 0:
            raise ValueError("cap must be > 0")
        if self.aux_bce_weight < 0:
            raise ValueError("aux_bce_weight must be >= 0")


@dataclass(frozen=True, eq=False)
class SliceTargets:
    gt_seg: np.ndarray
    roi_prev: np.ndarray
    roi_next: np.ndarray

    @property
    def is_end_slice(self) -> bool:
        return not self.roi_prev.any() or not self.roi_next.any()


def signed_distance_map(g: np.ndarray, cap: float = DEFAULT_CAP) -> np.ndarray:
    """Level-set map of a binary mask: -D inside, +D outside, clamped to +-cap.

    D is the exact Euclidean distance (pixels) to the nearest pixel of the
    opposite class.
    """
    g = np.asarray(g).astype(bool)
    if not g.any():
        return np.full(g.shape, float(cap))
    if g.all():
        return np.full(g.shape, -float(cap))
    outside = ndimage.distance_transform_edt(~g)
    inside = ndimage.distance_transform_edt(g)
    return np.clip(outside - inside, -cap, cap)


def _as_tensor(x, like=None):
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if isinstance(like, torch.Tensor) else torch.float64
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def boundary_loss(s, g=None, cap: float = DEFAULT_CAP, phi=None):
    """Mean of ``phi_G * s`` over the image domain (and the batch).

    Pass a precomputed ``phi`` to skip the distance transform.
    """
    s = _as_tensor(s)
    if phi is None:
        if g is None:
            raise ValueError("boundary_loss needs g or phi")
        g = np.asarray(g)
        if g.shape != tuple(s.shape):
            raise ValueError(f"shape mismatch: s {tuple(s.shape)} vs g {g.shape}")
        phi = signed_distance_map(g, cap) if g.ndim == 2 else np.stack(
            [signed_distance_map(gi, cap) for gi in g.reshape(-1, *g.shape[-2:])]
        ).reshape(g.shape)
    phi = _as_tensor(phi, s).to(s.dtype)
    if phi.shape != s.shape:
        raise ValueError(f"shape mismatch: s {tuple(s.shape)} vs phi {tuple(phi.shape)}")
    return (phi * s).mean()


def soft_dice(p, g, eps: float = 1.0):
    """(2 sum pg + eps) / (sum p + sum g + eps) over the last two axes."""
    inter = (p * g).sum(dim=(-2, -1))
    return (2 * inter + eps) / (p.sum(dim=(-2, -1)) + g.sum(dim=(-2, -1)) + eps)


def roi_dice_loss(pred_prev, pred_next, target_prev, target_next, eps: float = 1.0):
    """1 - mean of the two soft dice scores; averaged over any leading batch axes."""
    pred_prev, pred_next = _as_tensor(pred_prev), _as_tensor(pred_next)
    target_prev = _as_tensor(target_prev, pred_prev).to(pred_prev.dtype)
    target_next = _as_tensor(target_next, pred_next).to(pred_next.dtype)
    if pred_prev.shape != target_prev.shape or pred_next.shape != target_next.shape:
        raise ValueError("roi_dice_loss: prediction and target shapes differ")
    per_sample = 1 - 0.5 * (soft_dice(pred_next, target_next, eps) + soft_dice(pred_prev, target_prev, eps))
    return per_sample.mean()


def alpha_for_sample(targets: SliceTargets, tau: float = 0.3, invert: bool = False) -> float:
    if not 0 < tau < 1:
        raise ValueError(f"tau must be in (0, 1), got {tau}")
    end = targets.is_end_slice
    if invert:
        end = not end
    return 1 - tau if end else tau


def alpha_for_batch(target_prev, target_next, tau: float = 0.3, invert: bool = False):
    """Vectorised :func:`alpha_for_sample` over a (B, H, W) batch."""
    end = (target_prev.sum(dim=(-2, -1)) == 0) | (target_next.sum(dim=(-2, -1)) == 0)
    if invert:
        end = ~end
    dtype = target_prev.dtype if target_prev.is_floating_point() else torch.get_default_dtype()
    hi, lo = torch.tensor(1 - tau, dtype=dtype), torch.tensor(tau, dtype=dtype)
    return torch.where(end, hi, lo)


def total_loss(output, gt_seg, roi_prev, roi_next, phi, config: LossConfig = LossConfig(), alpha=None):
    """Per-sample weighted composite loss, averaged over the batch.

    ``output`` is (B, 3, H, W) with channels (seg, roi_prev, roi_next); all
    targets are (B, H, W). ``alpha`` overrides the schedule (scalar or (B,)).
    Returns ``(loss, parts)`` where parts holds the batch-mean components.
    """
    seg, p_prev, p_next = output[:, 0], output[:, 1], output[:, 2]
    dtype = output.dtype
    gt_seg, roi_prev, roi_next, phi = (_as_tensor(t, output).to(dtype) for t in (gt_seg, roi_prev, roi_next, phi))
    if alpha is None:
        alpha = alpha_for_batch(roi_prev, roi_next, config.tau, config.invert_alpha)
    alpha = torch.as_tensor(alpha, dtype=dtype).expand(seg.shape[0])

    l_seg = (phi * seg).mean(dim=(-2, -1))
    l_att = 1 - 0.5 * (soft_dice(p_next, roi_next, config.eps) + soft_dice(p_prev, roi_prev, config.eps))
    loss = alpha * l_seg + (1 - alpha) * l_att
    parts = {"seg": l_seg.mean(), "att": l_att.mean()}
    if config.aux_bce_weight:
        bce = F.binary_cross_entropy(seg.clamp(1e-7, 1 - 1e-7), gt_seg, reduction="none").mean(dim=(-2, -1))
        loss = loss + config.aux_bce_weight * bce
        parts["bce"] = bce.mean()
    loss = loss.mean()
    if not torch.isfinite(loss):
        detail = ", ".join(f"{k}={float(v):.4g}" for k, v in parts.items())
        raise FloatingPointError(f"non-finite loss ({detail})")
    return loss, parts
