"""Learned parts of the alignment framework.

* ``AlignmentEncoder``: conditional noise predictor eps(x_t, n_f, t).
* ``TrackingOrientedLayer``: transformer block with a pooled-statistics channel gate.
* ``Discriminator``: per-state day/night critic with a score-map output.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import ShapeError

TIME_DIM = 64


def timestep_embedding(t: torch.Tensor, dim: int = TIME_DIM, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


def _groups(ch: int) -> int:
    return math.gcd(8, ch)


def _as_batch_t(t, batch: int, device) -> torch.Tensor:
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        return t.to(device)
    return torch.full((batch,), int(t), dtype=torch.long, device=device)


class ResBlock(nn.Module):
    """Pre-activation residual block: GroupNorm, SiLU, 3x3 conv, plus a time shift."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(cin), cin)
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(TIME_DIM, cout)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv(F.silu(self.norm(x))) + self.temb(emb)[:, :, None, None]
        return self.skip(x) + h


class AlignmentEncoder(nn.Module):
    """Two-level encoder-decoder predicting the noise in ``x_t``.

    The condition is concatenated with the noisy state along channels, so the
    first convolution sees ``2 * C`` inputs; its second half of input weights
    is the only path by which the condition enters.
    """

    def __init__(self, channels: int):
        super().__init__()
        c = channels
        self.channels = c
        self.inp = nn.Conv2d(2 * c, c, 3, padding=1)
        self.enc1 = ResBlock(c, c)
        self.down1 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.enc2 = ResBlock(2 * c, 2 * c)
        self.down2 = nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1)
        self.mid = ResBlock(4 * c, 4 * c)
        self.up2 = nn.Conv2d(4 * c, 2 * c, 3, padding=1)
        self.dec2 = ResBlock(4 * c, 2 * c)
        self.up1 = nn.Conv2d(2 * c, c, 3, padding=1)
        self.dec1 = ResBlock(2 * c, c)
        self.out_norm = nn.GroupNorm(_groups(c), c)
        self.out = nn.Conv2d(c, c, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def condition_weights(self) -> torch.Tensor:
        """View of the input-convolution weights applied to the condition."""
        return self.inp.weight[:, self.channels:]

    def forward(self, xt: torch.Tensor, nf: torch.Tensor, t) -> torch.Tensor:
        if xt.shape != nf.shape:
            raise ShapeError(f"state {tuple(xt.shape)} and condition {tuple(nf.shape)} differ")
        if xt.dim() != 4 or xt.shape[1] != self.channels:
            raise ShapeError(f"expected (B, {self.channels}, H, W), got {tuple(xt.shape)}")
        emb = timestep_embedding(_as_batch_t(t, xt.shape[0], xt.device)).to(xt.dtype)

        h0 = self.inp(torch.cat([xt, nf], dim=1))
        h1 = self.enc1(h0, emb)
        h2 = self.enc2(self.down1(h1), emb)
        h = self.mid(self.down2(h2), emb)
        h = self.up2(F.interpolate(h, size=h2.shape[-2:], mode="nearest"))
        h = self.dec2(torch.cat([h, h2], dim=1), emb)
        h = self.up1(F.interpolate(h, size=h1.shape[-2:], mode="nearest"))
        h = self.dec1(torch.cat([h, h1], dim=1), emb)
        return self.out(F.silu(self.out_norm(h)))


def eps_predict(enc: AlignmentEncoder, xt: torch.Tensor, nf: torch.Tensor, t) -> torch.Tensor:
    return enc(xt, nf, t)


class TrackingOrientedLayer(nn.Module):
    """Transformer block whose attention output is re-weighted per channel.

    With tokens ``x_b = reshape(x) + pos``::

        x_c = LN(MHA(x_b) + x_b)
        w   = sigmoid(Linear(cat(mean_tokens(x_c), max_tokens(x_c))))
        x_d = x_c + gamma1 * w * x_c
        out = LN(FFN(x_d) + x_d)

    ``gamma1`` starts at zero, so a fresh layer is a plain transformer block.
    When ``resize_pos`` is set, the positional grid is bilinearly resampled for
    inputs whose spatial size differs from the construction size.
    """

    def __init__(self, channels: int, heads: int, height: int, width: int, resize_pos: bool = False):
        super().__init__()
        if channels % heads:
            raise ValueError(f"channels={channels} not divisible by heads={heads}")
        self.channels, self.height, self.width = channels, height, width
        self.resize_pos = resize_pos
        self.pos = nn.Parameter(torch.empty(height * width, channels))
        nn.init.trunc_normal_(self.pos, std=0.02)
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(channels)
        self.mix = nn.Linear(2 * channels, channels)
        self.gamma1 = nn.Parameter(torch.zeros(()))
        self.ffn = nn.Sequential(
            nn.Linear(channels, 4 * channels),
            nn.ReLU(),
            nn.Linear(4 * channels, channels),
        )
        self.norm2 = nn.LayerNorm(channels)

    def _pos_for(self, h: int, w: int) -> torch.Tensor:
        if (h, w) == (self.height, self.width):
            return self.pos
        if not self.resize_pos:
            raise ShapeError(f"layer built for {self.height}x{self.width}, got {h}x{w}")
        grid = self.pos.t().reshape(1, self.channels, self.height, self.width)
        grid = F.interpolate(grid, size=(h, w), mode="bilinear", align_corners=False)
        return grid.reshape(self.channels, h * w).t()

    def forward(self, x: torch.Tensor, return_intermediates: bool = False):
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"expected (B, {self.channels}, H, W), got {tuple(x.shape)}")
        b, c, h, w = x.shape
        pos = self._pos_for(h, w)
        xa = x.flatten(2).transpose(1, 2)
        xb = xa + pos
        att, _ = self.attn(xb, xb, xb, need_weights=False)
        xc = self.norm1(att + xb)
        pooled = torch.cat([xc.mean(dim=1), xc.amax(dim=1)], dim=1)
        gate = torch.sigmoid(self.mix(pooled))
        xd = xc + self.gamma1 * gate[:, None, :] * xc
        out = self.norm2(self.ffn(xd) + xd)
        out = out.transpose(1, 2).reshape(b, c, h, w)
        if return_intermediates:
            return out, {"xb": xb, "xc": xc, "gate": gate, "xd": xd}
        return out


def tol_forward(layer: TrackingOrientedLayer, x0: torch.Tensor) -> torch.Tensor:
    return layer(x0)


class Discriminator(nn.Module):
    """Four stride-2 conv blocks and a 1x1 scorer.

    Each block maps a side of length n to ceil(n / 2); see ``output_size``.
    With ``time_embed`` the timestep embedding is added to the input channels.
    """

    def __init__(self, channels: int, width: int | None = None, time_embed: bool = False):
        super().__init__()
        width = width or 2 * channels
        self.channels = channels
        widths = [channels, width, width, width, width]
        self.blocks = nn.Sequential(*[
            nn.Sequential(nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1),
                          nn.LeakyReLU(0.2))
            for i in range(4)
        ])
        self.score = nn.Conv2d(width, 1, 1)
        self.temb = nn.Linear(TIME_DIM, channels) if time_embed else None

    @staticmethod
    def output_size(h: int, w: int) -> tuple[int, int]:
        for _ in range(4):
            h, w = (h + 1) // 2, (w + 1) // 2
        return h, w

    def forward(self, x: torch.Tensor, t=None) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"expected (B, {self.channels}, H, W), got {tuple(x.shape)}")
        if self.temb is not None:
            if t is None:
                raise ValueError("time-conditioned discriminator needs a timestep")
            emb = timestep_embedding(_as_batch_t(t, x.shape[0], x.device)).to(x.dtype)
            x = x + self.temb(emb)[:, :, None, None]
        return self.score(self.blocks(x))


def disc_forward(d: Discriminator, x: torch.Tensor, t=None) -> torch.Tensor:
    return d(x, t)
