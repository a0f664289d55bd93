"""Training loop for the diffusion prior.

Each step standardizes a batch of latents, perturbs the paired image
embeddings with :func:`augment_embedding`, randomly drops the condition,
noises the latents at uniform timesteps and regresses the clean latent.
EMA weights are validated periodically by sampling latents for text prompts
and scoring the rendered images against the prompt embeddings; the best
scoring checkpoint wins.
"""

from __future__ import annotations

import copy
import logging
import math
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import yaml

from .checkpoint import read_checkpoint, save_checkpoint
from .data import DatasetShard, LatentStats, augment_embedding, compute_latent_stats, destandardize, load_dataset, standardize
from .diffusion import DiffusionSchedule, make_cosine_schedule, q_sample, respace, sample_loop
from .errors import ConfigError, InvalidArgumentError, NumericFailureError
from .models import EncoderHandle, GeneratorHandle, cosine_similarity
from .network import PriorConfig, PriorNetwork, build_prior, drop_condition

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    iterations: int = 1_000_000
    batch_size: int = 512
    lr: float = 1e-4
    weight_decay: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    ema_beta: float = 0.9999
    ema_update_every: int = 10
    noise_scale: float = 1.0
    validate_every: int = 10_000
    val_prompts: list[str] | None = None
    val_samples_per_prompt: int = 4
    val_guidance: float = 1.0
    val_steps: int | None = None
    seed: int = 0

    def __post_init__(self):
        for name in ("iterations", "batch_size", "ema_update_every", "validate_every", "val_samples_per_prompt"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay non-negative")
        if self.noise_scale < 0:
            raise ConfigError(f"noise_scale must be non-negative, got {self.noise_scale}")
        if not 0 <= self.ema_beta <= 1:
            raise ConfigError(f"ema_beta must lie in [0, 1], got {self.ema_beta}")


# config file key -> (target, field name)
_CONFIG_KEYS = {
    "timesteps": ("prior", "num_timesteps"),
    "predict_x_start": ("prior", "predict_x_start"),
    "cond_drop_prob": ("prior", "cond_drop_prob"),
    "dim": ("prior", "model_dim"),
    "depth": ("prior", "depth"),
    "dim_head": ("prior", "head_dim"),
    "heads": ("prior", "heads"),
    "ff_mult": ("prior", "ff_mult"),
    "latent_dim": ("prior", "latent_dim"),
    "embed_dim": ("prior", "embed_dim"),
    "num_latent_blocks": ("prior", "num_latent_blocks"),
    **{name: ("train", name) for name in TrainConfig.__dataclass_fields__},
    "generator": ("extra", "generator"),
    "encoder": ("extra", "encoder"),
    "text_gap": ("extra", "text_gap"),
    "model_seed": ("extra", "model_seed"),
}


def parse_config(raw: dict) -> tuple[PriorConfig, TrainConfig, dict]:
    """Split a flat key/value mapping into prior, training and model-selection settings."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping of parameter names to values")
    raw = dict(raw)
    schedule = raw.pop("beta_schedule", "cosine")
    if schedule != "cosine":
        raise ConfigError(f"only the cosine beta_schedule is supported, got {schedule!r}")
    if "adam_betas" in raw:
        raw["adam_beta1"], raw["adam_beta2"] = raw.pop("adam_betas")
    parts: dict[str, dict] = {"prior": {}, "train": {}, "extra": {}}
    for key, value in raw.items():
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        target, name = _CONFIG_KEYS[key]
        parts[target][name] = value
    try:
        return PriorConfig(**parts["prior"]), TrainConfig(**parts["train"]), parts["extra"]
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> tuple[PriorConfig, TrainConfig, dict]:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return parse_config(raw or {})


# ---------------------------------------------------------------------------
# EMA
# ---------------------------------------------------------------------------


@dataclass
class EmaState:
    shadow: dict[str, torch.Tensor]
    beta: float
    update_every: int = 10
    updates_applied: int = 0

    @classmethod
    def from_module(cls, module: torch.nn.Module, beta: float, update_every: int = 10) -> "EmaState":
        shadow = {k: v.detach().clone() for k, v in module.state_dict().items()}
        return cls(shadow, beta, update_every)

    def copy_to(self, module: torch.nn.Module) -> torch.nn.Module:
        module.load_state_dict(self.shadow)
        return module


@torch.no_grad()
def ema_update(ema: EmaState, network: torch.nn.Module, step: int) -> EmaState:
    """Blend the live weights into the shadow copy every ``update_every`` steps."""
    if step < 1:
        raise InvalidArgumentError(f"step must be >= 1, got {step}")
    if step % ema.update_every:
        return ema
    for name, value in network.state_dict().items():
        shadow = ema.shadow[name]
        if shadow.is_floating_point():
            shadow.mul_(ema.beta).add_(value.detach(), alpha=1.0 - ema.beta)
        else:
            shadow.copy_(value)
    ema.updates_applied += 1
    return ema


# ---------------------------------------------------------------------------
# loss and step
# ---------------------------------------------------------------------------


def prior_loss(network: PriorNetwork, x0, t, noise, cond, cond_mask, schedule: DiffusionSchedule):
    """Mean squared error between the network's x0 estimate and the clean latent."""
    x_t = q_sample(x0, t, noise, schedule)
    return F.mse_loss(network(x_t, t, cond, cond_mask), x0)


def draw_training_inputs(batch: dict, stats: LatentStats, schedule: DiffusionSchedule,
                         noise_scale: float, cond_drop_prob: float, generator: torch.Generator) -> dict:
    """All random quantities of one training step, drawn in a fixed order."""
    w = torch.as_tensor(batch["w"], dtype=torch.float32)
    emb = torch.as_tensor(batch["emb"], dtype=torch.float32)
    if len(w) == 0:
        raise InvalidArgumentError("empty training batch")
    x0 = standardize(w, stats)
    cond = augment_embedding(emb, noise_scale, generator)
    cond, mask = drop_condition(cond, cond_drop_prob, generator)
    t = torch.randint(0, schedule.num_timesteps, (len(w),), generator=generator)
    noise = torch.randn(x0.shape, generator=generator)
    return {"x0": x0, "t": t, "noise": noise, "cond": cond, "cond_mask": mask}


def training_step(network: PriorNetwork, optimizer: torch.optim.Optimizer | None, batch: dict,
                  stats: LatentStats, schedule: DiffusionSchedule, noise_scale: float,
                  generator: torch.Generator) -> float:
    """One optimization step; with ``optimizer=None`` only the loss is evaluated."""
    inputs = draw_training_inputs(batch, stats, schedule, noise_scale, network.config.cond_drop_prob, generator)
    if optimizer is None:
        with torch.no_grad():
            return float(prior_loss(network, schedule=schedule, **inputs))
    loss = prior_loss(network, schedule=schedule, **inputs)
    if not torch.isfinite(loss):
        hist = np.histogram(inputs["t"].numpy(), bins=10, range=(0, schedule.num_timesteps))[0]
        raise NumericFailureError(f"non-finite training loss; timestep histogram {hist.tolist()}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    grads = [p.grad.norm() for p in network.parameters() if p.grad is not None]
    if not all(torch.isfinite(g) for g in grads):
        raise NumericFailureError(f"non-finite gradients; max grad norm {max(float(g) for g in grads)}")
    optimizer.step()
    return loss.item()


def make_optimizer(network: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(network.parameters(), lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2),
                             weight_decay=cfg.weight_decay)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


@torch.no_grad()
def sample_latents(network: PriorNetwork, cond: torch.Tensor, stats: LatentStats, schedule: DiffusionSchedule,
                   guidance: float = 1.0, seed=0) -> torch.Tensor:
    """Sample standardized latents for a batch of conditions and map them back to raw latent space."""
    x = sample_loop(network, cond, schedule, network.config.flat_dim, guidance, seed)
    return destandardize(x, stats)


@torch.no_grad()
def score_latents(latents: torch.Tensor, text_embeds: torch.Tensor, gen: GeneratorHandle, enc: EncoderHandle,
                  num_blocks: int = 1) -> torch.Tensor:
    images = gen.synthesize_latent(latents.float(), num_blocks)
    return cosine_similarity(enc.embed_images(images, gen.output_range), text_embeds)


@torch.no_grad()
def validate_checkpoint(network: PriorNetwork, gen: GeneratorHandle, enc: EncoderHandle, prompts,
                        schedule: DiffusionSchedule, stats: LatentStats, guidance: float = 1.0,
                        samples_per_prompt: int = 4, seed: int = 0) -> float:
    """Mean prompt/image cosine similarity over ``samples_per_prompt`` samples per prompt."""
    prompts = list(prompts or [])
    if not prompts:
        raise InvalidArgumentError("validation needs at least one prompt")
    was_training = network.training
    network.eval()
    text = enc.encode_text(prompts).repeat_interleave(samples_per_prompt, dim=0)
    latents = sample_latents(network, text, stats, schedule, guidance, seed)
    network.train(was_training)
    return float(score_latents(latents, text, gen, enc, network.config.num_latent_blocks).mean())


# ---------------------------------------------------------------------------
# main loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    best_path: Path
    best_score: float
    best_step: int
    losses: list[float] = field(default_factory=list)
    val_scores: dict[int, float] = field(default_factory=dict)


def _check_dims(cfg: PriorConfig, data: DatasetShard, enc: EncoderHandle):
    m = data.manifest
    problems = []
    if m.latent_dim != cfg.latent_dim:
        problems.append(f"latent_dim {m.latent_dim} (data) != {cfg.latent_dim} (config)")
    if m.num_latent_blocks != cfg.num_latent_blocks:
        problems.append(f"num_latent_blocks {m.num_latent_blocks} (data) != {cfg.num_latent_blocks} (config)")
    if m.embed_dim != cfg.embed_dim or enc.embed_dim != cfg.embed_dim:
        problems.append(f"embed_dim {m.embed_dim} (data) / {enc.embed_dim} (encoder) != {cfg.embed_dim} (config)")
    if problems:
        raise ConfigError("dataset incompatible with config: " + "; ".join(problems))


def train(prior_cfg: PriorConfig, cfg: TrainConfig, dataset, gen: GeneratorHandle, enc: EncoderHandle,
          out_dir, resume=None, prompts=None, log_every: int = 1000, provenance: dict | None = None) -> TrainResult:
    """Train a prior and return the best checkpoint by validation score.

    A checkpoint ``step_XXXXXXXX.pt`` is written at every validation (including
    step 0) and the best one is copied to ``best.pt``. Passing ``resume``
    continues from a training checkpoint with its optimizer and RNG state.
    ``provenance`` entries are stored in every checkpoint.
    """
    data = dataset if isinstance(dataset, DatasetShard) else load_dataset(dataset)
    _check_dims(prior_cfg, data, enc)
    prompts = list(prompts or cfg.val_prompts or [])
    if not prompts:
        raise ConfigError("no validation prompts configured")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    schedule = make_cosine_schedule(prior_cfg.num_timesteps)
    val_schedule = respace(schedule, cfg.val_steps) if cfg.val_steps else schedule
    network = build_prior(prior_cfg, cfg.seed)
    optimizer = make_optimizer(network, cfg)
    generator = torch.Generator().manual_seed(cfg.seed)
    ema = EmaState.from_module(network, cfg.ema_beta, cfg.ema_update_every)
    ema_net = copy.deepcopy(network).requires_grad_(False)
    w_all = torch.from_numpy(np.ascontiguousarray(data.w))
    emb_all = torch.from_numpy(np.ascontiguousarray(data.emb))
    provenance = {
        **(provenance or {}),
        "generator": data.manifest.generator_id,
        "encoder": data.manifest.encoder_id,
        "dataset_manifest": data.manifest.__dict__ | {"shards": len(data.manifest.shards)},
        "train_config": asdict(cfg),
    }

    start = 0
    result = TrainResult(out / "best.pt", -math.inf, -1)
    if resume is not None:
        payload = read_checkpoint(resume)
        state = payload.get("train_state")
        if state is None:
            raise ConfigError(f"{resume} has no training state to resume from")
        network.load_state_dict(payload["weights"])
        ema.shadow = {k: v.clone() for k, v in payload["ema_weights"].items()}
        ema.updates_applied = state["ema_updates"]
        optimizer.load_state_dict(state["optimizer"])
        generator.set_state(state["rng"])
        stats = LatentStats.from_dict(payload["latent_stats"])
        start = state["step"]
        result.best_score, result.best_step = state["best_score"], state["best_step"]
        result.losses = list(state["losses"])
        result.val_scores = dict(state["val_scores"])
    else:
        stats = compute_latent_stats(data)

    def checkpoint(step: int):
        score = validate_checkpoint(ema.copy_to(ema_net), gen, enc, prompts, val_schedule, stats,
                                    cfg.val_guidance, cfg.val_samples_per_prompt, seed=cfg.seed)
        result.val_scores[step] = score
        if score > result.best_score:
            result.best_score, result.best_step = score, step
        state = {
            "step": step,
            "optimizer": optimizer.state_dict(),
            "rng": generator.get_state(),
            "ema_updates": ema.updates_applied,
            "best_score": result.best_score,
            "best_step": result.best_step,
            "losses": list(result.losses),
            "val_scores": dict(result.val_scores),
        }
        path = save_checkpoint(out / f"step_{step:08d}.pt", prior_cfg, network.state_dict(), ema.shadow, stats,
                               {**provenance, "step": step, "val_score": score}, state)
        if result.best_step == step:
            shutil.copyfile(path, result.best_path)
        log.info("step %d: validation score %.4f (best %.4f @ %d)", step, score, result.best_score, result.best_step)

    if start == 0:
        checkpoint(0)
    network.train()
    n = len(w_all)
    for step in range(start + 1, cfg.iterations + 1):
        idx = torch.randint(0, n, (min(cfg.batch_size, n),), generator=generator)
        loss = training_step(network, optimizer, {"w": w_all[idx], "emb": emb_all[idx]}, stats, schedule,
                             cfg.noise_scale, generator)
        result.losses.append(loss)
        ema_update(ema, network, step)
        if log_every and step % log_every == 0:
            log.info("step %d: loss %.5f", step, float(np.mean(result.losses[-log_every:])))
        if step % cfg.validate_every == 0 or step == cfg.iterations:
            checkpoint(step)
    return result
