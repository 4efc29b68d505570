"""Three-encoder hard-attention segmentation network.

The network maps (slice patch, backward MIP, forward MIP, ROI mask) to three
probability maps: the segmentation of the current slice and ROI maps for the
previous and next slices.

Layout (patch side P, base width C, level i = 1..4, width C_i = C * 2**(i-1))::

    3 x encoder:  ConvBlock_i  ->  lambda_i (P / 2**(i-1))  -> pooled
    ROI mask:     HAGen stage_i -> g_i at the same resolution as lambda_i
    level i:      AttentionUnit(concat of three lambda_i, g_i) -> gated skip
    bottleneck:   concat of the three pooled level-4 outputs (P / 16)
    decoder:      DeconvBlock_4 .. DeconvBlock_1 back to P
    heads:        three 1x1 conv + sigmoid
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

LEVELS = 4
CHECKPOINT_MAGIC = b"MESAHA-CKPT1\n"


@dataclass(frozen=True)
class ArchConfig:
    base_channels: int = 8
    levels: int = LEVELS
    patch_size: int = 96
    in_channels: int = 1
    # "multiplicative" per the hard-attention formulation, "additive" for ablation
    attention_mode: str = "multiplicative"
    # F_int = max(1, round(int_fraction * gated channels))
    int_fraction: float = 0.5

    def __post_init__(self):
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.levels != LEVELS:
            raise ValueError(f"levels is fixed at {LEVELS}, got {self.levels}")
        if self.patch_size % 2 ** LEVELS:
            raise ValueError(f"patch_size must be divisible by {2 ** LEVELS}, got {self.patch_size}")
        if self.attention_mode not in ("multiplicative", "additive"):
            raise ValueError(f"unknown attention_mode {self.attention_mode!r}")

    def width(self, level: int) -> int:
        return self.base_channels * 2 ** (level - 1)

    def int_channels(self, gated_channels: int) -> int:
        return max(1, int(gated_channels * self.int_fraction))


class ConvBlock(nn.Module):
    """Two rounds of conv3x3 -> ReLU -> BN, then 2x2 max-pool.

    Returns ``(features, pooled)``; the pre-pool features are the skip.
    """

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(out_ch)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 2 or w % 2:
            raise ValueError(f"ConvBlock needs even spatial dims, got {h}x{w}")
        x = self.bn1(F.relu(self.conv1(x)))
        x = self.bn2(F.relu(self.conv2(x)))
        return x, F.max_pool2d(x, 2)


class HAGenStage(nn.Module):
    """conv3x3 -> BN -> ReLU -> (optional) 2x2 max-pool on the ROI branch."""

    def __init__(self, in_ch: int, out_ch: int, pool: bool):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.bn = nn.BatchNorm2d(out_ch)
        self.pool = pool

    def forward(self, x):
        x = F.relu(self.bn(self.conv(x)))
        return F.max_pool2d(x, 2) if self.pool else x


class AttentionUnit(nn.Module):
    """Gate features by a per-pixel coefficient computed from features and gating map.

    a = relu(W_l(lam) * W_g(g) + beta_g)   (multiplicative; '+' in additive mode)
    H = sigmoid(eta(a) + beta_eta)         one coefficient per pixel
    out = lam * H
    """

    def __init__(self, feat_ch: int, gate_ch: int, int_ch: int, mode: str = "multiplicative"):
        super().__init__()
        self.w_lambda = nn.Conv2d(feat_ch, int_ch, 1, bias=False)
        self.w_g = nn.Conv2d(gate_ch, int_ch, 1, bias=False)
        self.beta_g = nn.Parameter(torch.zeros(int_ch))
        self.eta = nn.Conv2d(int_ch, 1, 1, bias=False)
        self.beta_eta = nn.Parameter(torch.zeros(()))
        self.mode = mode

    def coefficients(self, lam, g):
        if lam.shape[-2:] != g.shape[-2:]:
            raise ValueError(f"attention inputs misaligned: {tuple(lam.shape)} vs {tuple(g.shape)}")
        a, b = self.w_lambda(lam), self.w_g(g)
        mixed = a * b if self.mode == "multiplicative" else a + b
        inter = F.relu(mixed + self.beta_g.view(1, -1, 1, 1))
        return torch.sigmoid(self.eta(inter) + self.beta_eta)

    def forward(self, lam, g):
        coeff = self.coefficients(lam, g)
        return lam * coeff, coeff


class DeconvBlock(nn.Module):
    """Nearest 2x upsample, concat skip, conv -> ReLU -> BN -> conv -> ReLU."""

    def __init__(self, in_ch: int, skip_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch + skip_ch, out_ch, 3, padding=1)
        self.bn = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)

    def forward(self, x, skip):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        if x.shape[-2:] != skip.shape[-2:]:
            raise ValueError(f"skip misaligned: upsampled {tuple(x.shape)} vs skip {tuple(skip.shape)}")
        x = torch.cat([x, skip], dim=1)
        x = self.bn(F.relu(self.conv1(x)))
        return F.relu(self.conv2(x))


class Encoder(nn.Module):
    def __init__(self, config: ArchConfig):
        super().__init__()
        chans = [config.in_channels] + [config.width(i) for i in range(1, LEVELS + 1)]
        self.blocks = nn.ModuleList(ConvBlock(chans[i], chans[i + 1]) for i in range(LEVELS))

    def forward(self, x):
        skips = []
        for block in self.blocks:
            lam, x = block(x)
            skips.append(lam)
        return skips, x


class MesahaNet(nn.Module):
    """psi(I_n, M-, M+, R_n) -> (R_prev, S_n, R_next).

    ``forward`` takes a tensor of shape (B, 4, P, P) with channels ordered
    (slice patch, backward MIP, forward MIP, ROI mask) and returns a tensor of
    shape (B, 3, P, P) with channels (segmentation, ROI prev, ROI next).
    """

    def __init__(self, config: ArchConfig = ArchConfig()):
        super().__init__()
        self.config = config
        self.encoders = nn.ModuleList(Encoder(config) for _ in range(3))
        self.hagen = nn.ModuleList(
            HAGenStage(
                config.in_channels if i == 1 else config.width(i - 1),
                config.width(i),
                pool=i > 1,
            )
            for i in range(1, LEVELS + 1)
        )
        self.attention = nn.ModuleList(
            AttentionUnit(
                3 * config.width(i),
                config.width(i),
                config.int_channels(3 * config.width(i)),
                config.attention_mode,
            )
            for i in range(1, LEVELS + 1)
        )
        # decoder[i-1] restores level i resolution
        dec = []
        for i in range(1, LEVELS + 1):
            in_ch = 3 * config.width(LEVELS) if i == LEVELS else config.width(i + 1)
            dec.append(DeconvBlock(in_ch, 3 * config.width(i), config.width(i)))
        self.decoder = nn.ModuleList(dec)
        self.heads = nn.Conv2d(config.width(1), 3, 1)

    def gating_maps(self, roi):
        """Outputs of every HA-Gen stage; stage i is aligned with lambda_i."""
        maps = []
        x = roi
        for stage in self.hagen:
            x = stage(x)
            maps.append(x)
        return maps

    def ha_gen(self, roi, level: int):
        return self.gating_maps(roi)[level - 1]

    def encode(self, x):
        feats, pooled = zip(*(enc(x[:, k : k + 1]) for k, enc in enumerate(self.encoders)))
        skips = [torch.cat([f[i] for f in feats], dim=1) for i in range(LEVELS)]
        return skips, torch.cat(pooled, dim=1)

    def forward(self, x, return_attention: bool = False):
        if x.ndim != 4 or x.shape[1] != 4:
            raise ValueError(f"expected (B, 4, P, P) input, got {tuple(x.shape)}")
        skips, bottleneck = self.encode(x[:, :3])
        gates = self.gating_maps(x[:, 3:4])
        gated, coeffs = [], []
        for lam, g, unit in zip(skips, gates, self.attention):
            out, c = unit(lam, g)
            gated.append(out)
            coeffs.append(c)
        y = bottleneck
        for i in reversed(range(LEVELS)):
            y = self.decoder[i](y, gated[i])
        logits = self.heads(y)
        # channel order of the heads: (seg, roi_prev, roi_next)
        probs = torch.sigmoid(logits)
        if return_attention:
            return probs, coeffs
        return probs


def init_params(config: ArchConfig = ArchConfig(), seed: int = 0) -> MesahaNet:
    """Build a network with deterministic fan-in scaled weights."""
    net = MesahaNet(config)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.weight[0].numel()
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.reset_parameters()
            elif isinstance(m, AttentionUnit):
                m.beta_g.zero_()
                m.beta_eta.zero_()
    return net


def count_params(params) -> int:
    """Total number of scalars in all parameter and normalization-statistic tensors.

    Accepts a module or a name -> tensor mapping. Integer bookkeeping buffers
    (``num_batches_tracked``) are not counted.
    """
    tensors = params.state_dict() if isinstance(params, nn.Module) else params
    return int(
        sum(t.numel() for name, t in tensors.items() if not name.endswith("num_batches_tracked"))
    )


def set_degenerate_norm(net: nn.Module) -> nn.Module:
    """Put every BN layer in an exact identity mode (eval, mean 0, var 1, eps 0, identity affine)."""
    for m in net.modules():
        if isinstance(m, nn.BatchNorm2d):
            m.eval()
            m.eps = 0.0
            with torch.no_grad():
                m.running_mean.zero_()
                m.running_var.fill_(1.0)
                m.weight.fill_(1.0)
                m.bias.zero_()
    return net


# --- checkpoint container ---------------------------------------------------


def save_checkpoint(net: MesahaNet, path, meta: Mapping | None = None) -> None:
    """Write ``MESAHA-CKPT1``: magic line, JSON header line, float32 LE payload."""
    tensors = {
        k: v.detach().cpu().numpy().astype("<f4")
        for k, v in net.state_dict().items()
        if not k.endswith("num_batches_tracked")
    }
    index, offset = [], 0
    for name, arr in tensors.items():
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = {"arch": asdict(net.config), "meta": dict(meta or {}), "tensors": index}
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for arr in tensors.values():
            f.write(arr.tobytes())


def load_checkpoint(path, expect: ArchConfig | None = None) -> tuple[MesahaNet, dict]:
    path = Path(path)
    data = path.read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a MESAHA-CKPT1 checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    header = json.loads(data[pos : pos + hlen])
    pos += hlen
    config = ArchConfig(**header["arch"])
    if expect is not None and expect != config:
        raise ValueError(f"{path}: checkpoint architecture {config} does not match {expect}")
    net = MesahaNet(config)
    state = net.state_dict()
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in state or tuple(state[name].shape) != shape:
            raise ValueError(f"{path}: tensor {name} {shape} does not fit architecture")
        n = int(np.prod(shape)) if shape else 1
        start = pos + entry["offset"]
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=start).reshape(shape)
        state[name] = torch.from_numpy(arr.copy())
    net.load_state_dict(state)
    return net, header["meta"]
