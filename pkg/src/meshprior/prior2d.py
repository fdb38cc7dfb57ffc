"""2D self-prior network: an untrained encoder-decoder maps a fixed random
feature grid (perturbed by fresh noise each step) to a dense UV map,
supervised only at sparse sub-pixel sites via differentiable bilinear
sampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import OptimizationError
from .uvatlas import ChannelKind, DenseUVMap, SparseUVSamples

__all__ = ["Prior2DConfig", "bilinear_sample", "build_2d_network", "optimize_2d_prior"]


@dataclass(frozen=True)
class Prior2DConfig:
    input_channels: int = 32
    resolution: int = 1024
    z_std: float = 0.1
    eps_std: float = 0.02
    steps: int = 4000  # 2000 for RGB texture maps
    learning_rate: float = 1e-2
    down_blocks: int = 5
    up_blocks: int = 5
    skip_blocks: int = 5
    width: int = 64
    skip_width: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.z_std < 0 or self.eps_std < 0:
            raise ValueError("noise standard deviations must be >= 0")
        if not (self.down_blocks == self.up_blocks == self.skip_blocks):
            raise ValueError("down/up/skip block counts must match")
        if self.resolution % (2**self.down_blocks) != 0:
            raise ValueError(f"resolution must be divisible by {2**self.down_blocks}")
        if self.resolution // (2**self.down_blocks) < 2:
            raise ValueError("resolution too small: the bottleneck must be at least 2x2")


def bilinear_sample(grid, sites) -> torch.Tensor:
    """Bilinear interpolation of an (H, W, C) grid at (S, 2) sub-pixel
    (row, col) sites; differentiable with respect to the grid.

    Sites must lie within [0, H-1] x [0, W-1].
    """
    g = grid if isinstance(grid, torch.Tensor) else torch.as_tensor(grid, dtype=torch.float64)
    s = sites if isinstance(sites, torch.Tensor) else torch.as_tensor(sites, dtype=g.dtype)
    if g.ndim != 3 or s.ndim != 2 or s.shape[1] != 2:
        raise ValueError(f"expected grid (H, W, C) and sites (S, 2), got {tuple(g.shape)}, {tuple(s.shape)}")
    H, W = g.shape[0], g.shape[1]
    if len(s):
        r_min, c_min = float(s[:, 0].min()), float(s[:, 1].min())
        r_max, c_max = float(s[:, 0].max()), float(s[:, 1].max())
        if r_min < 0 or c_min < 0 or r_max > H - 1 or c_max > W - 1:
            raise ValueError(
                f"sites outside [0, {H-1}] x [0, {W-1}]: rows [{r_min:.2f}, {r_max:.2f}], "
                f"cols [{c_min:.2f}, {c_max:.2f}]"
            )
    r = s[:, 0]
    c = s[:, 1]
    r0 = r.floor().clamp(0, max(H - 2, 0)).long()
    c0 = c.floor().clamp(0, max(W - 2, 0)).long()
    fr = (r - r0).unsqueeze(1)
    fc = (c - c0).unsqueeze(1)
    return (
        g[r0, c0] * (1 - fr) * (1 - fc)
        + g[r0 + 1, c0] * fr * (1 - fc)
        + g[r0, c0 + 1] * (1 - fr) * fc
        + g[r0 + 1, c0 + 1] * fr * fc
    )


def _conv(cin, cout, kernel, stride, generator):
    pad = kernel // 2
    layers = []
    if pad:
        layers.append(nn.ReflectionPad2d(pad))
    conv = nn.Conv2d(cin, cout, kernel, stride=stride, padding=0)
    with torch.no_grad():
        std = (2.0 / (cin * kernel * kernel)) ** 0.5
        conv.weight.copy_(torch.randn(conv.weight.shape, generator=generator) * std)
        conv.bias.zero_()
    layers.append(conv)
    return layers


class _DownBlock(nn.Module):
    def __init__(self, cin, cout, generator):
        super().__init__()
        self.body = nn.Sequential(
            *_conv(cin, cout, 3, 2, generator),
            nn.BatchNorm2d(cout),
            nn.LeakyReLU(0.2, inplace=True),
            *_conv(cout, cout, 3, 1, generator),
            nn.BatchNorm2d(cout),
            nn.LeakyReLU(0.2, inplace=True),
        )

    def forward(self, x):
        return self.body(x)


class _SkipBlock(nn.Module):
    def __init__(self, cin, cout, generator):
        super().__init__()
        self.body = nn.Sequential(
            *_conv(cin, cout, 1, 1, generator),
            nn.BatchNorm2d(cout),
            nn.LeakyReLU(0.2, inplace=True),
        )

    def forward(self, x):
        return self.body(x)


class _UpBlock(nn.Module):
    def __init__(self, cin, cout, generator):
        super().__init__()
        self.body = nn.Sequential(
            nn.BatchNorm2d(cin),
            *_conv(cin, cout, 3, 1, generator),
            nn.BatchNorm2d(cout),
            nn.LeakyReLU(0.2, inplace=True),
            *_conv(cout, cout, 1, 1, generator),
            nn.BatchNorm2d(cout),
            nn.LeakyReLU(0.2, inplace=True),
        )

    def forward(self, x):
        return self.body(x)


class Prior2DNet(nn.Module):
    """Encoder-decoder with per-scale skip paths, reflection padding,
    stride-2 downsampling and bilinear upsampling."""

    def __init__(self, config: Prior2DConfig):
        super().__init__()
        gen = torch.Generator().manual_seed(config.seed)
        w, sw = config.width, config.skip_width
        downs, skips, ups = [], [], []
        cin = config.input_channels
        for _ in range(config.down_blocks):
            downs.append(_DownBlock(cin, w, gen))
            skips.append(_SkipBlock(w, sw, gen))
            ups.append(_UpBlock(w + sw, w, gen))
            cin = w
        self.downs = nn.ModuleList(downs)
        self.skips = nn.ModuleList(skips)
        self.ups = nn.ModuleList(ups)
        head = _conv(w, 3, 1, 1, gen)
        with torch.no_grad():
            # Zero-init output: unconstrained modes start flat and only grow
            # where the sparse supervision pushes them.
            head[-1].weight.zero_()
        self.head = nn.Sequential(*head)
        self.up = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)

    def forward(self, x):
        encoded = []
        for down in self.downs:
            x = down(x)
            encoded.append(x)
        y = encoded[-1]
        for i in reversed(range(len(self.ups))):
            y = self.ups[i](torch.cat([y, self.skips[i](encoded[i])], dim=1))
            y = self.up(y)
        return self.head(y)


def build_2d_network(config: Prior2DConfig, seed: int | None = None) -> Prior2DNet:
    """Randomly initialized (seeded) network mapping (1, C, H, W) -> (1, 3, H, W)."""
    if seed is not None:
        config = Prior2DConfig(**{**config.__dict__, "seed": seed})
    return Prior2DNet(config)


def make_noise_input(config: Prior2DConfig) -> torch.Tensor:
    """The fixed random grid z ~ N(0, z_std), shape (1, C, H, W)."""
    gen = torch.Generator().manual_seed(config.seed + 1)
    return torch.randn(1, config.input_channels, config.resolution, config.resolution, generator=gen) * config.z_std


def optimize_2d_prior(
    samples: SparseUVSamples,
    config: Prior2DConfig,
    log_path=None,
    snapshot_steps=(),
    snapshot_hook=None,
) -> DenseUVMap:
    """Fit the network output to the sparse sites (mean squared error through
    bilinear sampling) and return the final dense map with zero perturbation.

    A fresh perturbation eps ~ N(0, eps_std) is added to the fixed input z at
    every forward pass. Raises OptimizationError on divergence.
    """
    if len(samples) < 1:
        raise ValueError("need at least one supervision site")
    if samples.resolution and samples.resolution != config.resolution:
        raise ValueError(
            f"sample sites were built at resolution {samples.resolution}, config says {config.resolution}"
        )
    net = Prior2DNet(config)
    z = make_noise_input(config)
    sites = torch.as_tensor(samples.sites, dtype=torch.float32)
    values = torch.as_tensor(samples.values, dtype=torch.float32)
    gen = torch.Generator().manual_seed(config.seed + 2)
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)

    log_lines = []
    loss0 = None
    for step in range(config.steps):
        eps = torch.randn(z.shape, generator=gen) * config.eps_std if config.eps_std > 0 else 0.0
        out = net(z + eps)[0].permute(1, 2, 0)  # (H, W, 3)
        pred = bilinear_sample(out, sites)
        loss = ((pred - values) ** 2).mean()
        if not torch.isfinite(loss):
            raise OptimizationError("2d prior diverged", step=step)
        if loss0 is None:
            loss0 = float(loss.detach())
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log_path is not None:
            log_lines.append(f"{step} {float(loss.detach()):.8e}")
        if snapshot_hook is not None and (step + 1) in snapshot_steps:
            with torch.no_grad():
                snap = net(z)[0].permute(1, 2, 0).numpy().astype(np.float64)
            snapshot_hook(step + 1, DenseUVMap(snap, samples.channel_kind))

    if log_path is not None:
        with open(log_path, "w") as fh:
            fh.write("\n".join(log_lines) + "\n")
    with torch.no_grad():
        out = net(z)[0].permute(1, 2, 0)
        final_loss = float(((bilinear_sample(out, sites) - values) ** 2).mean())
    if loss0 is not None and final_loss >= loss0 and config.steps > 1:
        import logging

        logging.getLogger(__name__).warning(
            "2d prior did not improve the site loss: %.6g -> %.6g", loss0, final_loss
        )
    return DenseUVMap(out.numpy().astype(np.float64), samples.channel_kind)
