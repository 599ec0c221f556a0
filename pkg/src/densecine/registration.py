"""Registration network (UNet-style encoder/decoder) and its loss terms."""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .strain import warp


@dataclass
class RegOperatorConfig:
    a: float = 1.0  # Laplacian weight
    b: float = 0.1  # identity weight

    def validate(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError(f"regularizer weights must be positive (a={self.a}, b={self.b})")
        return self


def _double_conv(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.SiLU(),
        nn.Conv2d(cout, cout, 3, padding=1), nn.SiLU(),
    )


class RegistrationNet(nn.Module):
    """Maps an image pair ``(I_1, I_t)`` to a displacement ``u_t`` and a bottleneck feature.

    ``widths`` gives one channel count per resolution level; the last level is
    the bottleneck, at ``H / 2**(levels-1)``.  The displacement head starts at
    zero so an untrained network returns the identity transform.
    """

    def __init__(self, widths=(16, 32, 64)):
        super().__init__()
        if len(widths) < 2:
            raise ValueError("need at least two resolution levels")
        self.widths = tuple(int(w) for w in widths)
        self.encoders = nn.ModuleList()
        cin = 2
        for w in self.widths:
            self.encoders.append(_double_conv(cin, w))
            cin = w
        self.decoders = nn.ModuleList()
        for skip in reversed(self.widths[:-1]):
            self.decoders.append(_double_conv(cin + skip, skip))
            cin = skip
        self.head = nn.Conv2d(cin, 2, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    @property
    def downsample(self):
        return 2 ** (len(self.widths) - 1)

    @property
    def latent_channels(self):
        return self.widths[-1]

    def forward(self, i1, it):
        if i1.shape != it.shape:
            raise ValueError(f"image shapes differ: {tuple(i1.shape)} vs {tuple(it.shape)}")
        h, w = i1.shape[-2:]
        if h % self.downsample or w % self.downsample:
            raise ValueError(f"image size {h}x{w} not divisible by {self.downsample}")
        x = torch.stack([i1, it], dim=-3)
        skips = []
        for level, enc in enumerate(self.encoders):
            if level:
                x = F.avg_pool2d(x, 2)
            x = enc(x)
            skips.append(x)
        z = x
        for dec, skip in zip(self.decoders, reversed(skips[:-1])):
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = dec(torch.cat([x, skip], dim=1))
        return self.head(x), z


def predict_displacement(net: RegistrationNet, i1, it):
    """Single-pair forward pass: returns ``(u (2, H, W), z (C, H/4, W/4))``."""
    i1 = torch.as_tensor(i1, dtype=next(net.parameters()).dtype)
    it = torch.as_tensor(it, dtype=i1.dtype)
    if i1.ndim != 2:
        raise ValueError(f"expected 2D images, got {tuple(i1.shape)}")
    u, z = net(i1[None], it[None])
    return u[0], z[0]


def laplacian(u):
    """5-point Laplacian with zero-flux (replicated) borders; ``u`` is ``(..., H, W)``."""
    shape = u.shape
    v = u.reshape(-1, 1, *shape[-2:])
    p = F.pad(v, (1, 1, 1, 1), mode="replicate")
    lap = p[..., :-2, 1:-1] + p[..., 2:, 1:-1] + p[..., 1:-1, :-2] + p[..., 1:-1, 2:] - 4 * v
    return lap.reshape(shape)


def reg_term(u, cfg: RegOperatorConfig = None):
    """Mean over the grid of ``||(-a Lap + b) u||^2``.

    ``u`` is ``(2, H, W)`` or batched ``(B, 2, H, W)``, in which case one value
    per field is returned.
    """
    cfg = (cfg or RegOperatorConfig()).validate()
    u = torch.as_tensor(u)
    Lu = -cfg.a * laplacian(u) + cfg.b * u
    return (Lu ** 2).sum(dim=-3).mean(dim=(-2, -1))


def image_residual_term(i1, it, u, sigma):
    """``1/(2 sigma^2)`` times the pixel-mean squared residual of ``warp(i1, u)`` vs ``it``."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    resid = warp(i1, u) - it
    return (resid ** 2).mean(dim=(-2, -1)) / (2.0 * sigma ** 2)


def data_term(net: RegistrationNet, i1, it, sigma):
    u, _ = predict_displacement(net, i1, it)
    i1 = torch.as_tensor(i1, dtype=u.dtype)
    it = torch.as_tensor(it, dtype=u.dtype)
    return image_residual_term(i1, it, u, sigma)
