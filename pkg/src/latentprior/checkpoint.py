"""Prior checkpoint archives.

A checkpoint is a single ``torch.save`` archive holding the network config,
raw and EMA weights, the latent statistics used for standardization, and
provenance. Training checkpoints additionally carry optimizer and RNG state
so a run can be resumed exactly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import torch

from . import __version__
from .data import LatentStats
from .diffusion import DiffusionSchedule, make_cosine_schedule
from .errors import LoadError, WriteError
from .network import PriorConfig, PriorNetwork, build_prior

CHECKPOINT_FORMAT = 1


@dataclass
class PriorCheckpoint:
    config: PriorConfig
    network: PriorNetwork
    stats: LatentStats
    provenance: dict = field(default_factory=dict)
    path: Path | None = None

    @cached_property
    def schedule(self) -> DiffusionSchedule:
        return make_cosine_schedule(self.config.num_timesteps)


def save_checkpoint(path, config: PriorConfig, weights: dict, ema_weights: dict, stats: LatentStats,
                    provenance: dict | None = None, train_state: dict | None = None) -> Path:
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": config.to_dict(),
        "weights": {k: v.detach().cpu().clone() for k, v in weights.items()},
        "ema_weights": {k: v.detach().cpu().clone() for k, v in ema_weights.items()},
        "latent_stats": stats.to_dict(),
        "provenance": {"version": __version__, **(provenance or {})},
    }
    if train_state is not None:
        payload["train_state"] = train_state
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, tmp)
        os.replace(tmp, path)
    except OSError as exc:
        raise WriteError(f"could not write checkpoint {path}: {exc}") from exc
    return path


def read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # torch raises a zoo of types for corrupt archives
        raise LoadError(f"could not read checkpoint {path}: {exc}") from exc
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise LoadError(f"{path} is not a prior checkpoint (format {payload.get('format')!r})")
    return payload


def load_checkpoint(path, use_ema: bool = True) -> PriorCheckpoint:
    payload = read_checkpoint(path)
    config = PriorConfig.from_dict(payload["config"])
    network = build_prior(config)
    network.load_state_dict(payload["ema_weights" if use_ema else "weights"])
    network.eval().requires_grad_(False)
    return PriorCheckpoint(
        config=config,
        network=network,
        stats=LatentStats.from_dict(payload["latent_stats"]),
        provenance=payload["provenance"],
        path=Path(path),
    )
