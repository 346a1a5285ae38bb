"""Day/night feature-gap diagnostics on paired sequences."""

from __future__ import annotations

from typing import Sequence

import torch

from .evaluate import discrepancy
from .model import DaDiffTracker
from .synth import TrackSequence
from .tracker import SEARCH_SIZE, crop


def pair_sequences(seqs: Sequence[TrackSequence]) -> tuple[list[TrackSequence], list[TrackSequence]]:
    """Match ``<name>_day`` with ``<name>_night``; unmatched sequences are dropped."""
    day = {s.name[:-4]: s for s in seqs if s.domain == "day" and s.name.endswith("_day")}
    night = {s.name[:-6]: s for s in seqs if s.domain == "night" and s.name.endswith("_night")}
    keys = sorted(day.keys() & night.keys())
    return [day[k] for k in keys], [night[k] for k in keys]


@torch.no_grad()
def search_features(model: DaDiffTracker, seqs: Sequence[TrackSequence], batch: int = 32) -> torch.Tensor:
    """Backbone features of search crops centred on every ground-truth box."""
    crops = [crop(s.frame_tensor(i), *s.boxes[i].center, SEARCH_SIZE)
             for s in seqs for i in range(len(s))]
    if not crops:
        raise ValueError("no frames")
    model.eval()
    return torch.cat([model.backbone(torch.stack(crops[i:i + batch]))
                      for i in range(0, len(crops), batch)])


@torch.no_grad()
def denoise_all(model: DaDiffTracker, feats: torch.Tensor, seed: int = 0, batch: int = 32) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.cat([model.aligner.denoise(feats[i:i + batch], gen)
                      for i in range(0, len(feats), batch)])


def alignment_gap(model: DaDiffTracker, day: Sequence[TrackSequence], night: Sequence[TrackSequence],
                  seed: int = 0) -> dict:
    """Day/night discrepancy of raw backbone features and of denoised features.

    Both domains go through the denoiser (independent noise streams), as the
    tracker sees them when alignment is on. ``night_vs_raw_day`` compares the
    denoised night features with the untouched day features instead.
    """
    fd = search_features(model, day)
    fn = search_features(model, night)
    ad = denoise_all(model, fd, seed)
    an = denoise_all(model, fn, seed + 1)
    raw = discrepancy(list(fd), list(fn))
    aligned = discrepancy(list(ad), list(an))
    return {"raw": raw, "aligned": aligned, "ratio": aligned / raw if raw > 0 else float("nan"),
            "night_vs_raw_day": discrepancy(list(fd), list(an)), "maps": len(fd),
            "features": {"day": fd, "night": fn, "day_aligned": ad, "night_aligned": an}}
