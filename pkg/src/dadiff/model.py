"""The tracker with the diffusion alignment pipeline attached."""

from __future__ import annotations

from pathlib import Path

import torch
import torch.nn as nn

from .config import RunConfig
from .diffusion import DiffusionTrajectory, NoiseSchedule, make_schedule, q_sample, sample
from .networks import AlignmentEncoder, Discriminator, TrackingOrientedLayer
from .tracker import CorrelationHead, SiameseBackbone


class Aligner(nn.Module):
    """Forward-noise features to step T, denoise them conditioned on the
    original features, then integrate the result with the tracking-oriented layer.

    Diffusion runs on per-channel standardised features (``feat_mean`` and
    ``feat_std`` are calibrated on day features); the denoised state is mapped
    back to backbone units before the tracking-oriented layer.
    """

    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.sched: NoiseSchedule = make_schedule("linear", cfg.T, cfg.beta_start, cfg.beta_end, cfg.S)
        self.encoder = AlignmentEncoder(cfg.C)
        self.tol = TrackingOrientedLayer(cfg.C, cfg.heads, cfg.H, cfg.W, resize_pos=True)
        self.register_buffer("feat_mean", torch.zeros(cfg.C))
        self.register_buffer("feat_std", torch.ones(cfg.C))
        self.cond_norm = cfg.cond_norm

    @torch.no_grad()
    def calibrate(self, feats: torch.Tensor) -> None:
        """Set the standardisation statistics from a (B, C, H, W) feature batch."""
        self.feat_mean.copy_(feats.mean(dim=(0, 2, 3)))
        self.feat_std.copy_(feats.std(dim=(0, 2, 3)).clamp_min(1e-6))

    def normalize(self, f: torch.Tensor) -> torch.Tensor:
        return (f - self.feat_mean[:, None, None]) / self.feat_std[:, None, None]

    def denormalize(self, z: torch.Tensor) -> torch.Tensor:
        return z * self.feat_std[:, None, None] + self.feat_mean[:, None, None]

    def condition(self, nf: torch.Tensor) -> torch.Tensor:
        """Encoder condition: globally standardised, or normalised per map and channel."""
        if self.cond_norm == "instance":
            mu = nf.mean(dim=(2, 3), keepdim=True)
            sd = nf.std(dim=(2, 3), keepdim=True).clamp_min(1e-5)
            return (nf - mu) / sd
        return self.normalize(nf)

    def start_state(self, nz: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
        eps = torch.randn(nz.shape, generator=generator, dtype=nz.dtype, device=nz.device)
        return q_sample(nz, self.sched.T, eps, self.sched)

    def trajectory(self, nf: torch.Tensor, generator: torch.Generator | None = None,
                   xT: torch.Tensor | None = None) -> DiffusionTrajectory:
        """Reverse trajectory in standardised units, conditioned on ``nf``."""
        nz = self.normalize(nf)
        if xT is None:
            xT = self.start_state(nz, generator)
        return sample(self.encoder, self.condition(nf), xT, self.sched)

    def denoise(self, nf: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
        """Final reverse state in backbone units (before the tracking-oriented layer)."""
        return self.denormalize(self.trajectory(nf, generator).final)

    def integrate(self, traj: DiffusionTrajectory) -> torch.Tensor:
        return self.tol(self.denormalize(traj.final))

    def forward(self, nf: torch.Tensor, generator: torch.Generator | None = None,
                xT: torch.Tensor | None = None):
        traj = self.trajectory(nf, generator, xT)
        return self.integrate(traj), traj


class DaDiffTracker(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = SiameseBackbone(cfg.C)
        self.head = CorrelationHead(cfg.C)
        self.aligner = Aligner(cfg)

    @property
    def sched(self) -> NoiseSchedule:
        return self.aligner.sched

    def align(self, feats: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
        return self.aligner(feats, generator)[0]

    def tracker_parameters(self):
        return list(self.backbone.parameters()) + list(self.head.parameters())


def build(cfg: RunConfig, seed: int | None = None) -> tuple[DaDiffTracker, Discriminator]:
    torch.manual_seed(cfg.seed if seed is None else seed)
    model = DaDiffTracker(cfg)
    disc = Discriminator(cfg.C, time_embed=cfg.disc_time_embed)
    return model, disc


def save_checkpoint(path: str | Path, model: DaDiffTracker, disc: Discriminator,
                    cfg: RunConfig, extra: dict | None = None) -> None:
    payload = {
        "model": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "disc": {k: v.detach().cpu() for k, v in disc.state_dict().items()},
        "config": cfg.to_dict(),
    }
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[DaDiffTracker, Discriminator, RunConfig]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    cfg = RunConfig.from_dict(payload["config"])
    model, disc = build(cfg)
    model.load_state_dict(payload["model"])
    disc.load_state_dict(payload["disc"])
    return model, disc, cfg
