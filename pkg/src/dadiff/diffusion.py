"""Closed-form forward diffusion and the deterministic (sigma = 0) reverse sampler.

``alpha_bar`` is the cumulative signal level, with ``alpha_bar[0] = 1``::

    x_t     = sqrt(alpha_bar[t]) * x_0 + sqrt(1 - alpha_bar[t]) * eps
    beta[t] = 1 - alpha_bar[t] / alpha_bar[t - 1]

Reverse steps predict the clean state from a noise estimate and re-noise it
to an earlier timestep without injecting fresh randomness.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
import torch

Timestep = Union[int, torch.Tensor]


class ScheduleError(ValueError):
    pass


class TimestepError(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha_bar: np.ndarray  # (T + 1,), float64
    beta: np.ndarray  # (T,), beta[i] belongs to timestep i + 1
    tau: np.ndarray  # (S,), strictly increasing, tau[-1] == T

    @property
    def S(self) -> int:
        return len(self.tau)

    def beta_at(self, t: int) -> float:
        """Noise rate of step ``t`` (1-based, as in the forward chain)."""
        return float(self.beta[t - 1])

    def timesteps(self) -> list[int]:
        """Reverse-sampling visit order, from T down to 0."""
        return [int(t) for t in self.tau[::-1]] + [0]


def make_schedule(kind: str = "linear", T: int = 100, beta_start: float = 1e-4,
                  beta_end: float = 0.02, S: int = 5) -> NoiseSchedule:
    if kind != "linear":
        raise ScheduleError(f"unsupported schedule kind {kind!r}")
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if not 1 <= S <= T:
        raise ScheduleError(f"S must lie in [1, {T}], got {S}")

    step_beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - step_beta)])
    # beta re-derived from alpha_bar so the two arrays agree to rounding
    beta = 1.0 - alpha_bar[1:] / alpha_bar[:-1]
    tau = np.array([(k * T) // S for k in range(1, S + 1)], dtype=np.int64)
    return NoiseSchedule(T=T, alpha_bar=alpha_bar, beta=beta, tau=tau)


def _check_t(t: Timestep, sched: NoiseSchedule, lo: int = 1) -> None:
    if isinstance(t, torch.Tensor):
        if t.numel() and (int(t.min()) < lo or int(t.max()) > sched.T):
            raise TimestepError(f"timesteps must lie in [{lo}, {sched.T}]")
    elif not lo <= int(t) <= sched.T:
        raise TimestepError(f"timestep {t} outside [{lo}, {sched.T}]")


def _coef(values: np.ndarray, t: Timestep, like: torch.Tensor) -> torch.Tensor | float:
    """Look up ``values[t]``; per-sample timesteps broadcast over (C, H, W)."""
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        v = torch.as_tensor(values, dtype=like.dtype, device=like.device)[t.long()]
        return v.view(-1, *([1] * (like.dim() - 1)))
    return float(values[int(t)])


def _same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def q_sample(x0: torch.Tensor, t: Timestep, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    _same_shape(x0, eps)
    _check_t(t, sched, lo=0)
    signal = np.sqrt(sched.alpha_bar)
    noise = np.sqrt(1.0 - sched.alpha_bar)
    return _coef(signal, t, x0) * x0 + _coef(noise, t, x0) * eps


def predict_x0(xt: torch.Tensor, eps_pred: torch.Tensor, t: Timestep, sched: NoiseSchedule) -> torch.Tensor:
    _same_shape(xt, eps_pred)
    _check_t(t, sched)
    signal = np.sqrt(sched.alpha_bar)
    noise = np.sqrt(1.0 - sched.alpha_bar)
    return (xt - _coef(noise, t, xt) * eps_pred) / _coef(signal, t, xt)


def ddim_step(xt: torch.Tensor, eps_pred: torch.Tensor, t: int, t_prev: int,
              sched: NoiseSchedule) -> torch.Tensor:
    if not 0 <= t_prev < t:
        raise TimestepError(f"need 0 <= t_prev < t, got t={t}, t_prev={t_prev}")
    x0_hat = predict_x0(xt, eps_pred, t, sched)
    ab_prev = sched.alpha_bar[t_prev]
    return float(np.sqrt(ab_prev)) * x0_hat + float(np.sqrt(1.0 - ab_prev)) * eps_pred


@dataclass
class DiffusionTrajectory:
    """Reverse-sampling states ``(t, x)`` ordered from the largest timestep to 0."""

    states: list[tuple[int, torch.Tensor]]

    def __len__(self) -> int:
        return len(self.states)

    @property
    def timesteps(self) -> list[int]:
        return [t for t, _ in self.states]

    @property
    def final(self) -> torch.Tensor:
        return self.states[-1][1]


EpsFn = Callable[[torch.Tensor, torch.Tensor, int], torch.Tensor]


def sample(encoder: EpsFn, condition: torch.Tensor, xT: torch.Tensor,
           sched: NoiseSchedule) -> DiffusionTrajectory:
    """Run the deterministic reverse chain over the respaced timesteps.

    ``encoder(x_t, condition, t)`` returns the predicted noise. Gradients flow
    through every state, so the trajectory can feed adversarial losses.
    """
    order = sched.timesteps()
    x = xT
    states = [(order[0], x)]
    for t, t_prev in zip(order[:-1], order[1:]):
        eps = encoder(x, condition, t)
        if eps.shape != x.shape:
            raise ShapeError(f"encoder returned {tuple(eps.shape)} for state {tuple(x.shape)}")
        x = ddim_step(x, eps, t, t_prev, sched)
        states.append((t_prev, x))
    return DiffusionTrajectory(states)
