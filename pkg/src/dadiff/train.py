"""Losses, the alternating adversarial update, and the training driver."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
from torch.func import functional_call

from .config import RunConfig
from .diffusion import DiffusionTrajectory, NoiseSchedule, q_sample
from .model import DaDiffTracker, build, save_checkpoint
from .networks import Discriminator
from .synth import TrackSequence
from .tracker import SEARCH_SIZE, TEMPLATE_SIZE, crop, crop_origin, offset_to_cell, trc_loss

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    pass


class DataExhaustedError(RuntimeError):
    pass


# ---------------------------------------------------------------- losses

def align_loss(enc, x0: torch.Tensor, nf: torch.Tensor, sched: NoiseSchedule,
               rng: torch.Generator) -> torch.Tensor:
    if x0.shape != nf.shape:
        raise ValueError(f"x0 {tuple(x0.shape)} and condition {tuple(nf.shape)} differ")
    b = x0.shape[0]
    t = torch.randint(1, sched.T + 1, (b,), generator=rng)
    eps = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
    xt = q_sample(x0, t, eps, sched)
    return ((eps - enc(xt, nf, t)) ** 2).mean()


def _frozen_call(disc: Discriminator, x: torch.Tensor, t) -> torch.Tensor:
    params = {k: v.detach() for k, v in disc.named_parameters()}
    return functional_call(disc, params, (x, t if disc.temb is not None else None))


def _state_scores(call, traj: DiffusionTrajectory, detach: bool = False) -> list[torch.Tensor]:
    """Discriminator scores for every state, computed as one batch.

    The discriminator has no cross-sample operations, so this equals one call
    per state.
    """
    xs = [x.detach() if detach else x for _, x in traj.states]
    sizes = [x.shape[0] for x in xs]
    t = torch.cat([torch.full((n,), ts, dtype=torch.long) for (ts, _), n in zip(traj.states, sizes)])
    return list(torch.split(call(torch.cat(xs), t), sizes))


def adv_gen_loss(disc: Discriminator, night_traj: DiffusionTrajectory) -> torch.Tensor:
    """Least-squares push of every night state towards the day label (ones).

    The discriminator is evaluated with detached parameters, so it receives no
    gradient from this loss.
    """
    if len(night_traj) == 0:
        raise ValueError("empty trajectory")
    scores = _state_scores(lambda x, t: _frozen_call(disc, x, t), night_traj)
    return sum(((s - 1.0) ** 2).mean() for s in scores)


def adv_disc_loss(disc: Discriminator, day_traj: DiffusionTrajectory,
                  night_traj: DiffusionTrajectory) -> torch.Tensor:
    if len(day_traj) == 0 or len(night_traj) == 0:
        raise ValueError("empty trajectory")
    call = lambda x, t: disc(x, t if disc.temb is not None else None)  # noqa: E731
    day = _state_scores(call, day_traj, detach=True)
    night = _state_scores(call, night_traj, detach=True)
    return sum(((s - 1.0) ** 2).mean() for s in day) + sum((s ** 2).mean() for s in night)


def total_loss(trc, adv, align, cfg: RunConfig):
    for name, v in (("trc", trc), ("adv", adv), ("align", align)):
        value = v.item() if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(value):
            raise NonFiniteLossError(f"non-finite {name} loss: {value}")
    return cfg.lambda1 * trc + cfg.lambda2 * adv + cfg.lambda3 * align


def poly_lr(base_lr: float, iter: int, max_iter: int, power: float = 0.8) -> float:
    if max_iter <= 0:
        raise ValueError("max_iter must be positive")
    if not 0 <= iter <= max_iter:
        raise ValueError(f"iter {iter} outside [0, {max_iter}]")
    return base_lr * (1.0 - iter / max_iter) ** power


# ---------------------------------------------------------------- data

@dataclass
class Batch:
    template: torch.Tensor  # (B, 3, 64, 64)
    search: torch.Tensor  # (B, 3, 128, 128)
    centers: torch.Tensor  # (B, 2) target centre in response cells
    domain: str


class CropStream:
    """Endless stream of (template, search) training crops.

    Two streams over pixel-aligned day/night sequence lists with the same
    seed yield geometrically identical batches, which is how paired training
    data is produced.
    """

    def __init__(self, seqs: Sequence[TrackSequence], batch_size: int, seed: int,
                 max_gap: int = 8, jitter: float = 20.0, limit: int | None = None):
        if not seqs:
            raise ValueError("no sequences")
        self.seqs = list(seqs)
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self.max_gap = max_gap
        self.jitter = jitter
        self.limit = limit
        self.count = 0
        self._frames: dict[int, list[torch.Tensor]] = {}

    def _frame(self, si: int, k: int) -> torch.Tensor:
        if si not in self._frames:
            seq = self.seqs[si]
            self._frames[si] = [seq.frame_tensor(i) for i in range(len(seq))]
        return self._frames[si][k]

    def __iter__(self) -> Iterator[Batch]:
        return self

    def __next__(self) -> Batch:
        if self.limit is not None and self.count >= self.limit:
            raise StopIteration
        self.count += 1
        temps, searches, centers = [], [], []
        for _ in range(self.batch_size):
            si = int(self.rng.integers(len(self.seqs)))
            seq = self.seqs[si]
            n = len(seq)
            k1 = int(self.rng.integers(n))
            k2 = int(np.clip(k1 + self.rng.integers(-self.max_gap, self.max_gap + 1), 0, n - 1))
            tx, ty = seq.boxes[k1].center
            sx, sy = seq.boxes[k2].center
            jx, jy = self.rng.uniform(-self.jitter, self.jitter, 2)
            temps.append(crop(self._frame(si, k1), tx, ty, TEMPLATE_SIZE))
            searches.append(crop(self._frame(si, k2), sx + jx, sy + jy, SEARCH_SIZE))
            ox, oy = crop_origin(sx + jx, sy + jy, SEARCH_SIZE)
            centers.append(offset_to_cell(sx - (ox + SEARCH_SIZE / 2), sy - (oy + SEARCH_SIZE / 2)))
        return Batch(torch.stack(temps), torch.stack(searches),
                     torch.tensor(centers, dtype=torch.float32), self.seqs[0].domain)


# ---------------------------------------------------------------- training

@dataclass
class TrainState:
    model: DaDiffTracker
    disc: Discriminator
    opt_model: torch.optim.Optimizer
    opt_disc: torch.optim.Optimizer
    cfg: RunConfig
    noise: torch.Generator
    step: int = 0
    max_iter: int = 1
    history: list[dict] = field(default_factory=list)


def generator_parameters(model: DaDiffTracker, cfg: RunConfig) -> list[torch.nn.Parameter]:
    params = list(model.aligner.parameters())
    if not cfg.freeze_tracker:
        params += model.tracker_parameters()
    return params


def init_state(cfg: RunConfig, model: DaDiffTracker | None = None,
               disc: Discriminator | None = None, max_iter: int | None = None) -> TrainState:
    if model is None or disc is None:
        model, disc = build(cfg)
    opt_model = torch.optim.Adam(generator_parameters(model, cfg), lr=cfg.lr_model, betas=(0.9, 0.999))
    opt_disc = torch.optim.Adam(disc.parameters(), lr=cfg.lr_disc, betas=(0.9, 0.999))
    noise = torch.Generator().manual_seed(cfg.seed + 1)
    return TrainState(model, disc, opt_model, opt_disc, cfg, noise,
                      max_iter=max_iter or cfg.epochs * cfg.steps_per_epoch)


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


def _check_finite(name: str, v: torch.Tensor, step: int) -> None:
    if not torch.isfinite(v).all():
        raise NonFiniteLossError(f"step {step}: {name} loss is not finite ({float(v)})")


def _branches(cfg: RunConfig) -> tuple[str, ...]:
    return ("z", "x") if cfg.align_template else ("x",)


def train_step(state: TrainState, day: Batch, night: Batch) -> dict:
    """One discriminator update followed by one generator update."""
    cfg, model, disc = state.cfg, state.model, state.disc
    aligner = model.aligner
    keys = _branches(cfg)

    # (a) shared-backbone features; "z" is the template branch, "x" the search branch
    with torch.set_grad_enabled(not cfg.freeze_tracker):
        fd = {"z": model.backbone(day.template), "x": model.backbone(day.search)}
        fn = {"z": model.backbone(night.template), "x": model.backbone(night.search)}

    # (b) reverse trajectories conditioned on each branch's own features; day and
    # night go through the sampler as one batch (every encoder op is per sample)
    day_t, night_t = {}, {}
    for k in keys:
        day_t[k], night_t[k] = _split(aligner.trajectory(torch.cat([fd[k], fn[k]]), state.noise),
                                      fd[k].shape[0])
    disc_day, disc_night = [day_t[k] for k in keys], [night_t[k] for k in keys]
    if cfg.disc_input != "reverse":
        fwd_day = [_forward_states(aligner.normalize(fd[k]), aligner.sched, state.noise) for k in keys]
        fwd_night = [_forward_states(aligner.normalize(fn[k]), aligner.sched, state.noise) for k in keys]
        if cfg.disc_input == "forward":
            disc_day, disc_night = fwd_day, fwd_night
        else:
            disc_day, disc_night = disc_day + fwd_day, disc_night + fwd_night

    # (c) discriminator update
    lr_d = poly_lr(cfg.lr_disc, min(state.step, state.max_iter), state.max_iter, cfg.poly_power)
    _set_lr(state.opt_disc, lr_d)
    d_loss = sum(adv_disc_loss(disc, a, b) for a, b in zip(disc_day, disc_night)) / len(disc_day)
    _check_finite("discriminator", d_loss, state.step)
    state.opt_disc.zero_grad(set_to_none=True)
    d_loss.backward()
    state.opt_disc.step()

    # (d) generator update
    lr_m = poly_lr(cfg.lr_model, min(state.step, state.max_iter), state.max_iter, cfg.poly_power)
    _set_lr(state.opt_model, lr_m)
    ax = aligner.integrate(day_t["x"])
    az = aligner.integrate(day_t["z"]) if cfg.align_template else fd["z"]
    l_trc = trc_loss(model.head(az, ax), day.centers)
    l_adv = sum(adv_gen_loss(disc, night_t[k]) for k in keys) / len(keys)
    cond = fn if cfg.mode == "paired" else fd
    l_align = sum(align_loss(aligner.encoder, aligner.normalize(fd[k]).detach(),
                             aligner.condition(cond[k]).detach(), aligner.sched, state.noise)
                  for k in keys) / len(keys)
    loss = total_loss(l_trc, l_adv, l_align, cfg)
    state.opt_model.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.max_grad_norm:
        torch.nn.utils.clip_grad_norm_(generator_parameters(model, cfg), cfg.max_grad_norm)
    state.opt_model.step()

    record = {"step": state.step, "loss": loss.item(), "trc": l_trc.item(), "adv": l_adv.item(),
              "align": l_align.item(), "disc": d_loss.item(), "lr_model": lr_m, "lr_disc": lr_d}
    state.step += 1
    state.history.append(record)
    return record


def _split(traj: DiffusionTrajectory, n: int) -> tuple[DiffusionTrajectory, DiffusionTrajectory]:
    return (DiffusionTrajectory([(t, x[:n]) for t, x in traj.states]),
            DiffusionTrajectory([(t, x[n:]) for t, x in traj.states]))


def _forward_states(f: torch.Tensor, sched: NoiseSchedule, gen: torch.Generator) -> DiffusionTrajectory:
    states = []
    for t in sched.timesteps():
        eps = torch.randn(f.shape, generator=gen, dtype=f.dtype)
        states.append((t, q_sample(f.detach(), t, eps, sched)))
    return DiffusionTrajectory(states)


def train_epoch(state: TrainState, day_stream, night_stream, cfg: RunConfig | None = None,
                steps: int | None = None, log_file=None) -> list[dict]:
    """Run ``steps`` (default ``cfg.steps_per_epoch``) alternating updates.

    Each step's metrics are appended to ``log_file`` as one JSON line.
    """
    cfg = cfg or state.cfg
    steps = steps or cfg.steps_per_epoch
    records = []
    state.model.train()
    state.disc.train()
    for _ in range(steps):
        try:
            day, night = next(day_stream), next(night_stream)
        except StopIteration:
            raise DataExhaustedError(f"batch stream ran dry at step {state.step}") from None
        if day.template.shape[0] != night.template.shape[0]:
            raise ValueError("day and night batches differ in size")
        rec = train_step(state, day, night)
        records.append(rec)
        if log_file is not None:
            log_file.write(json.dumps(rec) + "\n")
    return records


def pretrain_tracker(model: DaDiffTracker, stream, steps: int, lr: float,
                     power: float = 0.8, log_file=None) -> list[float]:
    """Plain tracker training on day crops (no alignment): the baseline."""
    params = model.tracker_parameters()
    opt = torch.optim.Adam(params, lr=lr)
    losses = []
    model.train()
    for i in range(steps):
        batch = next(stream)
        _set_lr(opt, poly_lr(lr, i, steps, power))
        zf, xf = model.backbone(batch.template), model.backbone(batch.search)
        loss = trc_loss(model.head(zf, xf), batch.centers)
        _check_finite("tracking", loss, i)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if log_file is not None:
            log_file.write(json.dumps({"phase": "pretrain", "step": i, "trc": losses[-1]}) + "\n")
    return losses


@torch.no_grad()
def calibrate(model: DaDiffTracker, stream, batches: int = 8) -> None:
    """Fit the aligner's feature standardisation to day search features."""
    feats = torch.cat([model.backbone(next(stream).search) for _ in range(batches)])
    model.aligner.calibrate(feats)


def fit(cfg: RunConfig, day_seqs: Sequence[TrackSequence], night_seqs: Sequence[TrackSequence],
        out_dir: str | Path | None = None, steps: int | None = None,
        progress: Callable[[dict], None] | None = None) -> TrainState:
    """Pretrain the tracker on day data, then train the alignment pipeline.

    ``steps`` overrides ``epochs * steps_per_epoch`` for the alignment phase.
    """
    model, disc = build(cfg)
    out = Path(out_dir) if out_dir else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "metrics.jsonl", "w")
    try:
        pre_stream = CropStream(day_seqs, cfg.pretrain_batch, cfg.seed + 100)
        pretrain_tracker(model, pre_stream, cfg.pretrain_steps, cfg.lr_pretrain, cfg.poly_power, log_fh)

        total = steps or cfg.epochs * cfg.steps_per_epoch
        calibrate(model, pre_stream)
        state = init_state(cfg, model, disc, max_iter=total)
        night_seed = cfg.seed + 200 if cfg.mode == "paired" else cfg.seed + 300
        day_stream = CropStream(day_seqs, cfg.batch_size, cfg.seed + 200)
        night_stream = CropStream(night_seqs, cfg.batch_size, night_seed)
        epoch = 0
        while state.step < total:
            n = min(cfg.steps_per_epoch, total - state.step)
            recs = train_epoch(state, day_stream, night_stream, cfg, steps=n, log_file=log_fh)
            epoch += 1
            if progress is not None:
                progress({"epoch": epoch, **recs[-1]})
            if out is not None and (epoch % cfg.checkpoint_every == 0):
                save_checkpoint(out / f"checkpoint_epoch{epoch:03d}.pt", model, disc, cfg)
        if out is not None:
            save_checkpoint(out / "checkpoint.pt", model, disc, cfg)
    finally:
        if log_fh is not None:
            log_fh.close()
    return state
