"""Shared-backbone keypoint detector / descriptor network.

The backbone is a stem convolution followed by nine pre-activation residual
blocks arranged in three stages (full, 1/2 and 1/4 resolution).  The detector
head upsamples the 1/4-scale features twice with transposed convolutions,
fusing the 1/2 and full-scale features through concatenation shortcuts, and
ends in a two-way softmax.  The descriptor head is one more residual block on
the 1/4-scale features, per-image channel standardisation, bilinear
upsampling and per-pixel L2 normalisation.
"""
from __future__ import annotations

import copy
import os
import tempfile
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    """Channel plan of the network.

    ``block`` selects the residual block flavour: ``"bottleneck"`` (1x1, 3x3,
    1x1 with a half-width middle) or ``"basic"`` (two 3x3 convolutions).
    ``desc_standardize`` standardises every descriptor channel over the image
    (zero mean, unit variance, no learned parameters) before upsampling.
    Without it a freshly initialised network maps shifted copies of a patch
    further apart than neighbouring patches, and hardest-negative training
    shrinks every distance instead of separating them.
    """

    stem: int = 32
    widths: tuple[int, int, int] = (32, 64, 128)
    blocks_per_stage: int = 3
    desc_dim: int = 128
    block: str = "bottleneck"
    desc_standardize: bool = True

    def __post_init__(self):
        if self.desc_dim != self.widths[2]:
            raise ValueError("desc_dim must equal the 1/4-scale width")
        if self.block not in ("bottleneck", "basic"):
            raise ValueError(f"unknown block type {self.block!r}")

    @classmethod
    def tiny(cls, width: int = 4) -> "ArchConfig":
        return cls(stem=width, widths=(width, width, width), desc_dim=width)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


class FeaturePyramid(NamedTuple):
    f1: torch.Tensor
    f2: torch.Tensor
    f4: torch.Tensor


class PreActBlock(nn.Module):
    """Pre-activation residual block (BN -> ReLU -> conv, repeated)."""

    def __init__(self, cin: int, cout: int, stride: int = 1, kind: str = "bottleneck"):
        super().__init__()
        if kind == "basic":
            self.bns = nn.ModuleList([nn.BatchNorm2d(cin), nn.BatchNorm2d(cout)])
            self.convs = nn.ModuleList([
                nn.Conv2d(cin, cout, 3, stride, 1, bias=False),
                nn.Conv2d(cout, cout, 3, 1, 1, bias=False),
            ])
        else:
            mid = max(cout // 2, 1)
            self.bns = nn.ModuleList(
                [nn.BatchNorm2d(cin), nn.BatchNorm2d(mid), nn.BatchNorm2d(mid)]
            )
            self.convs = nn.ModuleList([
                nn.Conv2d(cin, mid, 1, 1, 0, bias=False),
                nn.Conv2d(mid, mid, 3, stride, 1, bias=False),
                nn.Conv2d(mid, cout, 1, 1, 0, bias=False),
            ])
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Conv2d(cin, cout, 1, stride, 0, bias=False)

    def forward(self, x):
        pre = F.relu(self.bns[0](x))
        skip = x if self.shortcut is None else self.shortcut(pre)
        out = self.convs[0](pre)
        for bn, conv in zip(self.bns[1:], self.convs[1:]):
            out = conv(F.relu(bn(out)))
        return out + skip


class Backbone(nn.Module):
    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.stem = nn.Conv2d(1, cfg.stem, 3, 1, 1)
        stages = []
        cin = cfg.stem
        for s, width in enumerate(cfg.widths):
            blocks = []
            for b in range(cfg.blocks_per_stage):
                stride = 2 if (s > 0 and b == 0) else 1
                blocks.append(PreActBlock(cin, width, stride, cfg.block))
                cin = width
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.ModuleList(stages)

    def forward(self, img):
        x = self.stem(img)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return FeaturePyramid(*feats)


class _Up(nn.Module):
    """Transposed conv x2, concatenation shortcut, 3x3 fusion conv."""

    def __init__(self, cin: int, cskip: int, cout: int):
        super().__init__()
        self.deconv = nn.ConvTranspose2d(cin, cout, 4, 2, 1, bias=False)
        self.bn_up = nn.BatchNorm2d(cout)
        self.fuse = nn.Conv2d(cout + cskip, cout, 3, 1, 1, bias=False)
        self.bn_fuse = nn.BatchNorm2d(cout)

    def forward(self, x, skip):
        x = F.relu(self.bn_up(self.deconv(x)))
        x = torch.cat([x, skip], dim=1)
        return F.relu(self.bn_fuse(self.fuse(x)))


class DetectorHead(nn.Module):
    def __init__(self, cfg: ArchConfig):
        super().__init__()
        w1, w2, w4 = cfg.widths
        self.up2 = _Up(w4, w2, w2)
        self.up1 = _Up(w2, w1, w1)
        self.logits = nn.Conv2d(w1, 2, 1)

    def forward(self, pyr: FeaturePyramid):
        x = self.up2(pyr.f4, pyr.f2)
        x = self.up1(x, pyr.f1)
        return F.softmax(self.logits(x), dim=1)


class DescriptorHead(nn.Module):
    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.block = PreActBlock(cfg.widths[2], cfg.desc_dim, 1, cfg.block)
        self.standardize = cfg.desc_standardize

    def forward(self, pyr: FeaturePyramid):
        x = self.block(pyr.f4)
        if self.standardize:
            mean = x.mean((2, 3), keepdim=True)
            std = x.std((2, 3), keepdim=True, unbiased=False)
            x = (x - mean) / (std + 1e-6)
        x = F.interpolate(x, scale_factor=4, mode="bilinear", align_corners=False)
        return F.normalize(x, p=2, dim=1, eps=1e-12)


class Network(nn.Module):
    """Backbone + detector head + descriptor head.

    ``meta`` is a free-form dict (iteration, phase, epoch, step) carried into
    checkpoints.
    """

    def __init__(self, cfg: ArchConfig | None = None):
        super().__init__()
        self.cfg = cfg or ArchConfig()
        self.backbone = Backbone(self.cfg)
        self.detector = DetectorHead(self.cfg)
        self.descriptor = DescriptorHead(self.cfg)
        self.meta: dict = {}

    def forward(self, img):
        return forward(self, img)


def _reset(net: Network, gen: torch.Generator) -> None:
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            fan_in = m.weight.shape[1] * m.weight[0, 0].numel()
            if isinstance(m, nn.ConvTranspose2d):
                fan_in = m.weight.shape[0] * m.weight[0, 0].numel() // 4
            std = (2.0 / fan_in) ** 0.5
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * std)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
            m.reset_running_stats()


def init_params(seed: int, cfg: ArchConfig | None = None, dtype=torch.float32) -> Network:
    """Fan-in scaled (He) normal initialisation; BN scale 1, shift 0."""
    gen = torch.Generator().manual_seed(int(seed))
    net = Network(cfg)
    _reset(net, gen)
    return net.to(dtype)


def count_params(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def _as_batch(img, net: nn.Module) -> torch.Tensor:
    p = next(net.parameters())
    x = torch.as_tensor(img, dtype=p.dtype, device=p.device)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    return x


def _pad4(x: torch.Tensor, pad: bool):
    h, w = x.shape[-2:]
    ph, pw = (-h) % 4, (-w) % 4
    if ph == 0 and pw == 0:
        return x, (h, w)
    if not pad:
        raise ValueError(f"image size {h}x{w} is not divisible by 4")
    return F.pad(x, (0, pw, 0, ph), mode="reflect"), (h, w)


def backbone_forward(net: Network, img, pad: bool = False) -> FeaturePyramid:
    x, _ = _pad4(_as_batch(img, net), pad)
    return net.backbone(x)


def detector_forward(net: Network, pyr: FeaturePyramid) -> torch.Tensor:
    return net.detector(pyr)


def descriptor_forward(net: Network, pyr: FeaturePyramid) -> torch.Tensor:
    return net.descriptor(pyr)


def forward(net: Network, img, pad: bool = True, return_pyramid: bool = False):
    """Probability map ``(B, 2, H, W)`` and descriptor map ``(B, C, H, W)``.

    Images whose sides are not multiples of 4 are reflect-padded and the
    outputs cropped back.
    """
    x, (h, w) = _pad4(_as_batch(img, net), pad)
    pyr = net.backbone(x)
    prob = net.detector(pyr)[..., :h, :w]
    desc = net.descriptor(pyr)[..., :h, :w]
    if return_pyramid:
        return prob, desc, pyr
    return prob, desc


def snapshot(net: Network) -> Network:
    """Frozen deep copy.

    The copy keeps using batch statistics when put in train mode, but its BN
    running buffers are no longer tracked, so it stays bit-for-bit fixed.
    """
    snap = copy.deepcopy(net)
    for p in snap.parameters():
        p.requires_grad_(False)
    for m in snap.modules():
        if isinstance(m, nn.BatchNorm2d):
            m.track_running_stats = False
    return snap


def save_checkpoint(net: Network, path, **meta) -> None:
    """Atomic write of ``{version, arch, meta, state}`` via temp file + rename."""
    path = os.fspath(path)
    record = {
        "version": CHECKPOINT_VERSION,
        "arch": net.cfg.to_dict(),
        "meta": {**net.meta, **meta, "desc_dim": net.cfg.desc_dim},
        "state": {k: v.detach().clone() for k, v in net.state_dict().items()},
    }
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(record, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> Network:
    record = torch.load(os.fspath(path), map_location="cpu", weights_only=True)
    if not isinstance(record, dict) or "state" not in record:
        raise CheckpointError(f"{path}: not a checkpoint")
    if record.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {record.get('version')} != {CHECKPOINT_VERSION}"
        )
    cfg = ArchConfig.from_dict(record["arch"])
    dtype = next(iter(record["state"].values())).dtype
    net = Network(cfg).to(dtype)
    net.load_state_dict(record["state"])
    net.meta = dict(record["meta"])
    return net
