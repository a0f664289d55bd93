"""Gaussian diffusion over flat latent vectors.

Schedules are stored as float64 numpy tables and gathered into torch tensors
on demand, so one schedule can be shared by training and sampling code. The
denoiser is always an x0 predictor: it returns an estimate of the clean
(standardized) latent, and both guidance and the reverse step operate on
that estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import InvalidArgumentError, NumericFailureError

Denoiser = Callable[[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]

COSINE_OFFSET = 0.008
MAX_BETA = 0.999


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    """Precomputed coefficient tables for a discrete diffusion process.

    ``timestep_map[i]`` is the timestep of the *original* process that step
    ``i`` of this schedule corresponds to; the denoiser is always queried with
    original timesteps so a network trained on the full schedule can be run
    on a respaced one.
    """

    betas: np.ndarray
    alphas_cumprod: np.ndarray
    timestep_map: np.ndarray
    alphas_cumprod_prev: np.ndarray = field(init=False)
    posterior_variance: np.ndarray = field(init=False)
    posterior_mean_coef1: np.ndarray = field(init=False)
    posterior_mean_coef2: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        acp = np.asarray(self.alphas_cumprod, dtype=np.float64)
        acp_prev = np.concatenate([[1.0], acp[:-1]])
        alphas = 1.0 - betas

        var = betas * (1.0 - acp_prev) / (1.0 - acp)
        if len(var) > 1:
            var[0] = var[1]
        coef1 = betas * np.sqrt(acp_prev) / (1.0 - acp)
        coef2 = (1.0 - acp_prev) * np.sqrt(alphas) / (1.0 - acp)
        # the final step returns the x0 estimate itself; pin it exactly
        # rather than relying on beta_0 / (1 - abar_0) rounding to 1.
        coef1[0], coef2[0] = 1.0, 0.0

        tmap = np.asarray(self.timestep_map, dtype=np.int64)
        for name, value in [
            ("betas", betas),
            ("alphas_cumprod", acp),
            ("timestep_map", tmap),
            ("alphas_cumprod_prev", acp_prev),
            ("posterior_variance", var),
            ("posterior_mean_coef1", coef1),
            ("posterior_mean_coef2", coef2),
        ]:
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "_tensors", {})

    @property
    def num_timesteps(self) -> int:
        return len(self.betas)

    @classmethod
    def from_betas(cls, betas, timestep_map=None) -> "DiffusionSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        if timestep_map is None:
            timestep_map = np.arange(len(betas))
        return cls(betas, np.cumprod(1.0 - betas), timestep_map)

    def table(self, name: str, dtype: torch.dtype) -> torch.Tensor:
        key = (name, dtype)
        if key not in self._tensors:
            self._tensors[key] = torch.tensor(getattr(self, name), dtype=dtype)
        return self._tensors[key]

    def check_timestep(self, t) -> None:
        tt = torch.as_tensor(t)
        if tt.numel() and (int(tt.min()) < 0 or int(tt.max()) >= self.num_timesteps):
            raise InvalidArgumentError(
                f"timestep {t} outside [0, {self.num_timesteps})"
            )


def _gather(schedule: DiffusionSchedule, name: str, t, like: torch.Tensor) -> torch.Tensor:
    """Index a schedule table at ``t`` and shape it to broadcast against ``like``."""
    values = schedule.table(name, like.dtype).to(like.device)
    tt = torch.as_tensor(t, device=like.device, dtype=torch.long)
    out = values[tt]
    if out.ndim == 0:
        return out
    return out.reshape(out.shape + (1,) * (like.ndim - out.ndim))


def cosine_alpha_bar(t: np.ndarray, num_timesteps: int, s: float = COSINE_OFFSET):
    """Continuous cumulative signal level at fractional step ``t / T``."""
    f = np.cos((np.asarray(t, dtype=np.float64) / num_timesteps + s) / (1 + s) * math.pi / 2) ** 2
    f0 = math.cos(s / (1 + s) * math.pi / 2) ** 2
    return f / f0


def make_cosine_schedule(num_timesteps: int) -> DiffusionSchedule:
    if int(num_timesteps) != num_timesteps or num_timesteps < 1:
        raise InvalidArgumentError(f"num_timesteps must be >= 1, got {num_timesteps}")
    steps = np.arange(num_timesteps + 1)
    abar = cosine_alpha_bar(steps, num_timesteps)
    betas = np.minimum(1.0 - abar[1:] / abar[:-1], MAX_BETA)
    return DiffusionSchedule.from_betas(betas)


def respace(schedule: DiffusionSchedule, num_steps: int) -> DiffusionSchedule:
    """Keep ``num_steps`` evenly spaced timesteps, always including the last one.

    Betas are recomputed so that the cumulative signal levels at the kept
    steps equal those of the original schedule.
    """
    T = schedule.num_timesteps
    if int(num_steps) != num_steps or not 1 <= num_steps <= T:
        raise InvalidArgumentError(f"num_steps must be in [1, {T}], got {num_steps}")
    if num_steps == 1:
        keep = np.array([T - 1])
    else:
        keep = np.arange(num_steps) * (T - 1) // (num_steps - 1)
    acp = schedule.alphas_cumprod[keep]
    prev = np.concatenate([[1.0], acp[:-1]])
    betas = 1.0 - acp / prev
    return DiffusionSchedule(betas, acp.copy(), schedule.timestep_map[keep])


def q_sample(x0: torch.Tensor, t, noise: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    """Draw ``x_t`` from q(x_t | x_0) using caller-supplied standard normal noise."""
    schedule.check_timestep(t)
    acp = _gather(schedule, "alphas_cumprod", t, x0)
    return acp.sqrt() * x0 + (1.0 - acp).sqrt() * noise


def posterior_mean_variance(x0_hat: torch.Tensor, x_t: torch.Tensor, t, schedule: DiffusionSchedule):
    mean = (
        _gather(schedule, "posterior_mean_coef1", t, x_t) * x0_hat
        + _gather(schedule, "posterior_mean_coef2", t, x_t) * x_t
    )
    return mean, _gather(schedule, "posterior_variance", t, x_t)


def posterior_step(x0_hat: torch.Tensor, x_t: torch.Tensor, t, schedule: DiffusionSchedule,
                   noise: torch.Tensor) -> torch.Tensor:
    """One ancestral step x_t -> x_{t-1}. No noise is added at ``t == 0``."""
    schedule.check_timestep(t)
    mean, var = posterior_mean_variance(x0_hat, x_t, t, schedule)
    nonzero = (torch.as_tensor(t, device=x_t.device) != 0).to(x_t.dtype)
    if nonzero.ndim:
        nonzero = nonzero.reshape(nonzero.shape + (1,) * (x_t.ndim - nonzero.ndim))
    return mean + nonzero * var.sqrt() * noise


def guided_prediction(pred_cond: torch.Tensor, pred_uncond: torch.Tensor, scale: float) -> torch.Tensor:
    """Classifier-free guidance on the x0 prediction, without any clipping."""
    if pred_cond.shape != pred_uncond.shape:
        raise InvalidArgumentError(
            f"prediction shapes differ: {tuple(pred_cond.shape)} vs {tuple(pred_uncond.shape)}"
        )
    if scale == 1:
        return pred_cond.clone()
    if scale == 0:
        return pred_uncond.clone()
    return pred_uncond + scale * (pred_cond - pred_uncond)


class _NoiseSource:
    """Standard normal draws from one generator, or one generator per batch row."""

    def __init__(self, seed: int | Sequence[int], batch: int):
        if isinstance(seed, (int, np.integer)):
            self.generators = [torch.Generator().manual_seed(int(seed))]
        else:
            if len(seed) != batch:
                raise InvalidArgumentError(f"got {len(seed)} seeds for a batch of {batch}")
            self.generators = [torch.Generator().manual_seed(int(s)) for s in seed]
        self.batch = batch

    def randn(self, dim: int, dtype) -> torch.Tensor:
        if len(self.generators) == 1:
            return torch.randn(self.batch, dim, generator=self.generators[0], dtype=dtype)
        return torch.cat([torch.randn(1, dim, generator=g, dtype=dtype) for g in self.generators])


@torch.no_grad()
def sample_loop(
    denoiser: Denoiser,
    cond: torch.Tensor | None,
    schedule: DiffusionSchedule,
    dim: int,
    guidance_scale: float = 1.0,
    seed: int | Sequence[int] = 0,
    *,
    num_samples: int | None = None,
    cond_dim: int | None = None,
    return_trajectory: bool = False,
    dtype=torch.float32,
):
    """Run the reverse process from pure noise down to step 0.

    ``cond`` is a ``[B, E]`` batch of condition embeddings (a single ``[E]``
    vector is broadcast to ``num_samples`` rows). Passing ``None`` samples
    unconditionally with a zero condition of width ``cond_dim`` (default
    ``dim``). The unconditional branch is evaluated with a zero condition and
    a false mask; with ``guidance_scale == 1`` it is skipped.

    ``seed`` may be a single int or one int per row; per-row seeds make each
    row's trajectory independent of the batch it is sampled in.
    """
    if cond is None:
        if num_samples is None:
            raise InvalidArgumentError("num_samples is required for unconditional sampling")
        batch = num_samples
    else:
        cond = torch.as_tensor(cond, dtype=dtype)
        if cond.ndim == 1:
            cond = cond.expand(num_samples or 1, -1)
        batch = cond.shape[0]
    noise = _NoiseSource(seed, batch)

    null_mask = torch.zeros(batch, dtype=torch.bool)
    if cond is None:
        run_cond, run_uncond = False, True
        null_cond = torch.zeros(batch, cond_dim or dim, dtype=dtype)
    else:
        run_cond, run_uncond = True, guidance_scale != 1
        if run_uncond:
            cond_in = torch.cat([cond, torch.zeros_like(cond)])
            mask_in = torch.cat([torch.ones(batch, dtype=torch.bool), null_mask])
        else:
            cond_in, mask_in = cond, torch.ones(batch, dtype=torch.bool)

    x = noise.randn(dim, dtype)
    trajectory = [x]
    for i in reversed(range(schedule.num_timesteps)):
        t_model = torch.full((batch,), int(schedule.timestep_map[i]), dtype=torch.long)
        if run_cond and run_uncond:
            out = denoiser(torch.cat([x, x]), torch.cat([t_model, t_model]), cond_in, mask_in)
            x0_hat = guided_prediction(out[:batch], out[batch:], guidance_scale)
        elif run_cond:
            x0_hat = denoiser(x, t_model, cond_in, mask_in)
        else:
            x0_hat = denoiser(x, t_model, null_cond, null_mask)
        if not torch.isfinite(x0_hat).all():
            raise NumericFailureError(
                f"denoiser produced non-finite output at timestep {int(schedule.timestep_map[i])}"
            )
        step_noise = noise.randn(dim, dtype) if i > 0 else torch.zeros_like(x)
        x = posterior_step(x0_hat, x, i, schedule, step_noise)
        if return_trajectory:
            trajectory.append(x)
    if return_trajectory:
        return x, trajectory
    return x
