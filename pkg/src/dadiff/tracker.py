"""Minimal Siamese tracker: shared backbone, depth-wise correlation head, and
frame-by-frame inference with optional feature alignment."""

from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import ShapeError
from .synth import BoundingBox, TrackSequence

TEMPLATE_SIZE = 64
SEARCH_SIZE = 128
STRIDE = 8
RESPONSE_SIZE = (SEARCH_SIZE - TEMPLATE_SIZE) // STRIDE + 1  # 9
LABEL_SIGMA = 1.0


class SequenceTooShortError(ValueError):
    pass


class SiameseBackbone(nn.Module):
    """Four conv blocks with total stride 8; one module serves both branches."""

    def __init__(self, channels: int = 32):
        super().__init__()
        self.channels = channels
        self.blocks = nn.Sequential(
            nn.Sequential(nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.ReLU()),
            nn.Sequential(nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.ReLU()),
            nn.Sequential(nn.Conv2d(32, channels, 3, stride=2, padding=1), nn.ReLU()),
            nn.Sequential(nn.Conv2d(channels, channels, 3, padding=1)),
        )

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        if img.dim() != 4 or img.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W) images, got {tuple(img.shape)}")
        return self.blocks(img)


def extract(bb: SiameseBackbone, template_img: torch.Tensor, search_img: torch.Tensor):
    if template_img.shape[-2:] != (TEMPLATE_SIZE, TEMPLATE_SIZE):
        raise ShapeError(f"template must be {TEMPLATE_SIZE}x{TEMPLATE_SIZE}, got {tuple(template_img.shape)}")
    if search_img.shape[-2:] != (SEARCH_SIZE, SEARCH_SIZE):
        raise ShapeError(f"search must be {SEARCH_SIZE}x{SEARCH_SIZE}, got {tuple(search_img.shape)}")
    squeeze = template_img.dim() == 3
    if squeeze:
        template_img, search_img = template_img[None], search_img[None]
    ft, fs = bb(template_img), bb(search_img)
    if squeeze:
        ft, fs = ft[0], fs[0]
    return ft, fs


def xcorr_depthwise(ft: torch.Tensor, fs: torch.Tensor) -> torch.Tensor:
    """Per-channel cross-correlation of template features over search features."""
    b, c = fs.shape[:2]
    out = F.conv2d(fs.reshape(1, b * c, *fs.shape[-2:]),
                   ft.reshape(b * c, 1, *ft.shape[-2:]), groups=b * c)
    return out.reshape(b, c, *out.shape[-2:])


class CorrelationHead(nn.Module):
    def __init__(self, channels: int = 32):
        super().__init__()
        self.mix = nn.Conv2d(channels, 1, 1)

    def forward(self, ft: torch.Tensor, fs: torch.Tensor) -> torch.Tensor:
        if ft.dim() != 4 or fs.dim() != 4 or ft.shape[:2] != fs.shape[:2]:
            raise ShapeError(f"incompatible features {tuple(ft.shape)} / {tuple(fs.shape)}")
        if fs.shape[-1] < ft.shape[-1] or fs.shape[-2] < ft.shape[-2]:
            raise ShapeError("search features smaller than template features")
        corr = xcorr_depthwise(ft, fs) / (ft.shape[-1] * ft.shape[-2])
        return self.mix(corr)


def correlate_head(head: CorrelationHead, ft: torch.Tensor, fs: torch.Tensor) -> torch.Tensor:
    if ft.shape[-2:] != (8, 8) or fs.shape[-2:] != (16, 16):
        raise ShapeError(f"expected 8x8 template and 16x16 search features, got "
                         f"{tuple(ft.shape)} / {tuple(fs.shape)}")
    return head(ft, fs)


def gaussian_label(center: torch.Tensor, size: int = RESPONSE_SIZE, sigma: float = LABEL_SIGMA,
                   dtype=torch.float32) -> torch.Tensor:
    """Gaussian maps (B, 1, size, size) peaked at (cx, cy) given in cell units."""
    center = center.to(dtype).reshape(-1, 2)
    grid = torch.arange(size, dtype=dtype)
    dx = grid[None, None, :] - center[:, 0, None, None]
    dy = grid[None, :, None] - center[:, 1, None, None]
    return torch.exp(-(dx ** 2 + dy ** 2) / (2 * sigma ** 2))[:, None]


def trc_loss(response: torch.Tensor, gt_center: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy against a Gaussian label at ``gt_center``.

    ``gt_center`` holds (x, y) in response-cell coordinates, one row per sample.
    """
    if response.dim() == 2:
        response = response[None, None]
    size = response.shape[-1]
    gt_center = torch.as_tensor(gt_center).reshape(-1, 2)
    if gt_center.shape[0] != response.shape[0]:
        raise ShapeError("one centre per response map is required")
    if (gt_center < 0).any() or (gt_center > size - 1).any():
        raise ValueError(f"ground-truth centre outside the {size}x{size} response frame")
    label = gaussian_label(gt_center, size, dtype=response.dtype)
    return F.binary_cross_entropy_with_logits(response, label)


def crop(img: torch.Tensor, cx: float, cy: float, size: int) -> torch.Tensor:
    """Square crop centred on (cx, cy); pixels outside the frame are zero."""
    _, h, w = img.shape
    x0 = int(math.floor(cx + 0.5)) - size // 2
    y0 = int(math.floor(cy + 0.5)) - size // 2
    out = img.new_zeros(img.shape[0], size, size)
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x0 + size, w), min(y0 + size, h)
    if sx1 > sx0 and sy1 > sy0:
        out[:, sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = img[:, sy0:sy1, sx0:sx1]
    return out


def crop_origin(cx: float, cy: float, size: int) -> tuple[int, int]:
    return int(math.floor(cx + 0.5)) - size // 2, int(math.floor(cy + 0.5)) - size // 2


def response_peak(response: torch.Tensor, upsample: int = 8) -> tuple[float, float]:
    """Sub-cell argmax (x, y) of a single (1, 1, n, n) or (n, n) response."""
    r = response.detach().reshape(1, 1, *response.shape[-2:]).double()
    n = r.shape[-1]
    if upsample > 1:
        m = (n - 1) * upsample + 1
        r = F.interpolate(r, size=(m, m), mode="bicubic", align_corners=True)
    flat = int(torch.argmax(r.reshape(-1)))
    m = r.shape[-1]
    iy, ix = divmod(flat, m)
    scale = upsample if upsample > 1 else 1
    return ix / scale, iy / scale


def cell_to_offset(px: float, py: float, size: int = RESPONSE_SIZE) -> tuple[float, float]:
    """Displacement in pixels of the target centre from the search-crop centre."""
    mid = (size - 1) / 2
    return (px - mid) * STRIDE, (py - mid) * STRIDE


def offset_to_cell(dx, dy, size: int = RESPONSE_SIZE):
    mid = (size - 1) / 2
    return mid + dx / STRIDE, mid + dy / STRIDE


def track_sequence(model, seq: TrackSequence, use_alignment: bool = False, seed: int = 0,
                   upsample: int = 8) -> list[BoundingBox]:
    """One-pass tracking initialised from the frame-0 ground truth.

    ``model`` must provide ``backbone``, ``head`` and, for aligned tracking,
    ``align(features, generator)`` returning aligned features. The box size is
    kept at its initial value; only the centre moves.
    """
    if len(seq) < 2:
        raise SequenceTooShortError(f"{seq.name}: need at least 2 frames, got {len(seq)}")
    gen = torch.Generator().manual_seed(seed)
    init = seq.boxes[0]
    cx, cy = init.center
    was_training = model.training
    model.eval()
    preds = [init]
    with torch.no_grad():
        first = seq.frame_tensor(0)
        zf = model.backbone(crop(first, cx, cy, TEMPLATE_SIZE)[None])
        if use_alignment:
            zf = model.align(zf, gen)
        for i in range(1, len(seq)):
            frame = seq.frame_tensor(i)
            xf = model.backbone(crop(frame, cx, cy, SEARCH_SIZE)[None])
            if use_alignment:
                xf = model.align(xf, gen)
            resp = model.head(zf, xf)
            dx, dy = cell_to_offset(*response_peak(resp, upsample), size=resp.shape[-1])
            ox, oy = crop_origin(cx, cy, SEARCH_SIZE)
            # recentre on the crop's own centre so rounding does not drift
            cx = ox + SEARCH_SIZE / 2 + dx
            cy = oy + SEARCH_SIZE / 2 + dy
            h, w = frame.shape[-2:]
            cx = min(max(cx, 0.0), float(w))
            cy = min(max(cy, 0.0), float(h))
            preds.append(BoundingBox.from_center(cx, cy, init.w, init.h))
    model.train(was_training)
    return preds


def track_all(model, seqs: Sequence[TrackSequence], use_alignment: bool, seed: int = 0,
              upsample: int = 8) -> dict[str, list[BoundingBox]]:
    return {s.name: track_sequence(model, s, use_alignment, seed, upsample) for s in seqs}
