"""Multi-level multi-sequence U-Net and a basic U-Net baseline.

Both share one skeleton: ``m`` encoder paths (one per sequence for bottleneck fusion,
a single path over the stacked sequences for input fusion), a decoder whose every
level concatenates all ``m`` encoder maps with the upsampled decoder map, and a
sigmoid (1 class) or softmax head.
"""
from __future__ import annotations

import contextlib
import copy
from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

FUSIONS = ("input", "bottleneck")
ARCHS = ("ours", "basic")


@dataclass
class ModelConfig:
    n_sequences: int = 5
    depth: int = 4
    base_channels: int = 32
    fusion: str = "bottleneck"
    use_se: bool = True
    use_deep_supervision: bool = True
    dropout_rate: float = 0.3
    n_classes: int = 3
    arch: str = "ours"
    se_reduction: int = 16

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.n_sequences < 1 or self.base_channels < 1 or self.n_classes < 1:
            raise ValueError("n_sequences, base_channels and n_classes must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    @classmethod
    def coarse(cls, **kw) -> "ModelConfig":
        base = dict(depth=5, use_se=False, use_deep_supervision=False, n_classes=1)
        base.update(kw)
        return cls(**base)

    @classmethod
    def fine(cls, **kw) -> "ModelConfig":
        base = dict(depth=4, use_se=True, use_deep_supervision=True, n_classes=3)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelOutput:
    probabilities: torch.Tensor  # N x C x H x W
    logits: torch.Tensor
    intermediates: Optional[list[torch.Tensor]] = None


# ---------------------------------------------------------------- functional pieces

def duc_upsample(x: torch.Tensor, r: int) -> torch.Tensor:
    """Depth-to-space: ``out[c, h*r+i, w*r+j] = x[(i*r+j)*C' + c, h, w]`` for ``x`` of shape (..., r*r*C', H, W)."""
    if r == 1:
        return x
    *lead, ch, H, W = x.shape
    if ch % (r * r):
        raise ValueError(f"channel count {ch} is not divisible by r^2 = {r * r}")
    c = ch // (r * r)
    x = x.reshape(*lead, r, r, c, H, W)
    n = len(lead)
    # (..., i, j, c, h, w) -> (..., c, h, i, w, j)
    perm = list(range(n)) + [n + 2, n + 3, n, n + 4, n + 1]
    return x.permute(*perm).reshape(*lead, c, H * r, W * r)


def space_to_depth(x: torch.Tensor, r: int) -> torch.Tensor:
    """Inverse of :func:`duc_upsample`."""
    if r == 1:
        return x
    *lead, c, H, W = x.shape
    n = len(lead)
    x = x.reshape(*lead, c, H // r, r, W // r, r)
    perm = list(range(n)) + [n + 2, n + 4, n, n + 1, n + 3]
    return x.permute(*perm).reshape(*lead, r * r * c, H // r, W // r)


# ---------------------------------------------------------------- blocks

class EncoderDropout(nn.Module):
    """Dropout whose on/off state is independent of ``train()``/``eval()``."""

    def __init__(self, p: float):
        super().__init__()
        self.p = p
        self.active = False

    def forward(self, x):
        return F.dropout(x, self.p, training=self.active and self.p > 0)


class SEBlock(nn.Module):
    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def gates(self, x):
        s = x.mean(dim=(-2, -1))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(s))))

    def forward(self, x):
        return x * self.gates(x)[..., None, None]


def se_block(features: torch.Tensor, block: SEBlock) -> torch.Tensor:
    return block(features)


class ResidualBlock(nn.Module):
    """conv-IN-PReLU-conv-IN plus the (projected) input, then PReLU."""

    def __init__(self, cin, cout, dropout=0.0, se_reduction=0):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = nn.InstanceNorm2d(cout, affine=True)
        self.act1 = nn.PReLU(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = nn.InstanceNorm2d(cout, affine=True)
        self.act2 = nn.PReLU(cout)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()
        self.se = SEBlock(cout, se_reduction) if se_reduction else None
        self.drop = EncoderDropout(dropout)

    def forward(self, x):
        y = self.act1(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        if self.se is not None:
            y = self.se(y)
        return self.drop(self.act2(y + self.skip(x)))


class ConvBlock(nn.Module):
    """Two conv-norm-activation layers (decoder blocks, and the whole basic U-Net)."""

    def __init__(self, cin, cout, basic=False, dropout=0.0, se_reduction=0):
        super().__init__()
        norm = nn.BatchNorm2d if basic else (lambda c: nn.InstanceNorm2d(c, affine=True))
        act = (lambda c: nn.ReLU(inplace=True)) if basic else nn.PReLU
        self.body = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1), norm(cout), act(cout),
            nn.Conv2d(cout, cout, 3, padding=1), norm(cout), act(cout),
        )
        self.se = SEBlock(cout, se_reduction) if se_reduction else None
        self.drop = EncoderDropout(dropout)

    def forward(self, x):
        y = self.body(x)
        if self.se is not None:
            y = self.se(y)
        return self.drop(y)


class DUC(nn.Module):
    """3x3 conv to r*r*cout channels, then depth-to-space by r."""

    def __init__(self, cin, cout, r=2):
        super().__init__()
        self.r = r
        self.conv = nn.Conv2d(cin, cout * r * r, 3, padding=1)

    def forward(self, x):
        return duc_upsample(self.conv(x), self.r)


class Encoder(nn.Module):
    def __init__(self, cin, widths, arch, dropout, se_reduction):
        super().__init__()
        self.blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        prev = cin
        for level, w in enumerate(widths):
            if level > 0:
                if arch == "ours":
                    self.downs.append(nn.Conv2d(prev, prev, 2, stride=2))
                else:
                    self.downs.append(nn.MaxPool2d(2))
            if arch == "ours":
                self.blocks.append(ResidualBlock(prev, w, dropout, se_reduction))
            else:
                self.blocks.append(ConvBlock(prev, w, basic=True, dropout=dropout))
            prev = w

    def forward(self, x):
        feats = []
        for level, block in enumerate(self.blocks):
            if level > 0:
                x = self.downs[level - 1](x)
            x = block(x)
            feats.append(x)
        return feats


class SegmentationUNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        ours = config.arch == "ours"
        widths = [config.base_channels * 2**i for i in range(config.depth)]
        self.widths = widths
        self.n_paths = config.n_sequences if config.fusion == "bottleneck" else 1
        cin = 1 if config.fusion == "bottleneck" else config.n_sequences
        se = config.se_reduction if (ours and config.use_se) else 0
        self.encoders = nn.ModuleList(
            Encoder(cin, widths, config.arch, config.dropout_rate, se) for _ in range(self.n_paths)
        )
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        below = widths[-1] * self.n_paths
        for level in range(config.depth - 2, -1, -1):
            w = widths[level]
            self.ups.append(DUC(below, w) if ours else nn.ConvTranspose2d(below, w, 2, stride=2))
            self.decoders.append(ConvBlock(w + self.n_paths * w, w, basic=not ours, se_reduction=se))
            below = w
        out_ch = config.n_classes
        self.head = nn.Conv2d(widths[0], out_ch, 1)
        self.deep_supervision = ours and config.use_deep_supervision
        if self.deep_supervision:
            # one map per decoder level below full resolution, brought up by DUC
            self.side_heads = nn.ModuleList()
            for i in range(config.depth - 2):
                level = config.depth - 2 - i
                self.side_heads.append(DUC(widths[level], out_ch, r=2**level))
            self.refine = nn.Conv2d(out_ch * (config.depth - 1), out_ch, 3, padding=1)
        self.last_concat_groups: list[int] = []

    def dropout_modules(self):
        return [m for m in self.modules() if isinstance(m, EncoderDropout)]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Logits ``N x C x H x W`` for input ``N x m x H x W``."""
        if x.shape[1] != self.config.n_sequences:
            raise ValueError(f"expected {self.config.n_sequences} input sequences, got {x.shape[1]}")
        factor = 2 ** (self.config.depth - 1)
        if x.shape[-2] % factor or x.shape[-1] % factor:
            raise ValueError(f"spatial size {tuple(x.shape[-2:])} must be divisible by {factor}")
        if self.n_paths == 1:
            paths = [self.encoders[0](x)]
        else:
            paths = [enc(x[:, j : j + 1]) for j, enc in enumerate(self.encoders)]
        y = torch.cat([p[-1] for p in paths], dim=1)
        groups = []
        side_maps = []
        for i, (up, dec) in enumerate(zip(self.ups, self.decoders)):
            level = self.config.depth - 2 - i
            skips = [p[level] for p in paths]
            parts = [up(y)] + skips
            groups.append(len(parts))
            y = dec(torch.cat(parts, dim=1))
            if self.deep_supervision and level > 0:
                side_maps.append(self.side_heads[i](y))
        self.last_concat_groups = groups
        logits = self.head(y)
        if self.deep_supervision:
            logits = self.refine(torch.cat(side_maps + [logits], dim=1))
        return logits

    def probabilities(self, logits: torch.Tensor) -> torch.Tensor:
        if self.config.n_classes == 1:
            return torch.sigmoid(logits)
        return torch.softmax(logits, dim=1)


def build_model(config: ModelConfig) -> SegmentationUNet:
    return SegmentationUNet(config)


def set_dropout(model: nn.Module, active: bool) -> None:
    for m in model.modules():
        if isinstance(m, EncoderDropout):
            m.active = active


def forward(
    model: nn.Module,
    images: torch.Tensor,
    dropout_active: bool = False,
    dropout_seed: Optional[int] = None,
) -> ModelOutput:
    """Run ``model`` on ``images`` (N x m x H x W) with encoder dropout on or off.

    With dropout on, the dropout masks are drawn from a forked RNG seeded by
    ``dropout_seed``, so equal seeds give equal outputs and the global stream is untouched.
    """
    if images.ndim == 3:
        images = images[None]
    set_dropout(model, dropout_active)
    try:
        if dropout_active:
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(0 if dropout_seed is None else dropout_seed)
                logits = model(images)
        else:
            logits = model(images)
    finally:
        set_dropout(model, False)
    if hasattr(model, "probabilities"):
        probs = model.probabilities(logits)
    elif logits.shape[1] == 1:
        probs = torch.sigmoid(logits)
    else:
        probs = torch.softmax(logits, dim=1)
    return ModelOutput(probs, logits)


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, alpha: float = 0.999) -> nn.Module:
    """teacher <- alpha * teacher + (1 - alpha) * student, elementwise over parameters and float buffers."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    t_state = teacher.state_dict()
    s_state = student.state_dict()
    if t_state.keys() != s_state.keys() or any(t_state[k].shape != s_state[k].shape for k in t_state):
        raise ValueError("teacher and student weight structures differ")
    for k, t in t_state.items():
        s = s_state[k]
        if t.is_floating_point():
            t.mul_(alpha).add_(s, alpha=1.0 - alpha)
        else:
            t.copy_(s)
    return teacher


def make_teacher(student: nn.Module) -> nn.Module:
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


@contextlib.contextmanager
def frozen(model: nn.Module):
    flags = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        yield model
    finally:
        for p, f in zip(model.parameters(), flags):
            p.requires_grad_(f)
