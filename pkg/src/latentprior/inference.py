"""Text-to-image sampling and latent-space post-operations.

A prompt is embedded with the frozen encoder, a batch of candidate latents
is sampled from the prior with classifier-free guidance, each candidate is
rendered and scored against the prompt, and the best one is returned.
Because the sampled latents live in the generator's native latent space,
the usual tools (truncation toward the mean latent, style mixing, linear
edit directions) apply to them unchanged.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .checkpoint import PriorCheckpoint
from .data import destandardize
from .diffusion import DiffusionSchedule, respace, sample_loop
from .errors import CapabilityError, InvalidArgumentError
from .models import EncoderHandle, GeneratorHandle, cosine_similarity, require_differentiable


@dataclass
class SampleRequest:
    prompt: str
    n_candidates: int = 16
    guidance_scale: float = 2.0
    num_steps: int | None = None
    truncation_psi: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_candidates < 1:
            raise InvalidArgumentError(f"n_candidates must be >= 1, got {self.n_candidates}")
        if self.guidance_scale < 0:
            raise InvalidArgumentError(f"guidance_scale must be >= 0, got {self.guidance_scale}")
        if not 0 <= self.truncation_psi <= 1:
            raise InvalidArgumentError(f"truncation_psi must lie in [0, 1], got {self.truncation_psi}")


@dataclass
class SampleResult:
    image: torch.Tensor
    latent: torch.Tensor
    score: float
    candidate_scores: torch.Tensor
    candidate_latents: torch.Tensor
    index: int


def candidate_seeds(seed: int, n: int) -> list[int]:
    """Independent per-candidate seeds; the first ``k`` do not depend on ``n``."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [int(c.generate_state(1, dtype=np.uint64)[0] >> 1) for c in children]


def prompt_seeds(seed: int, prompt: str, n: int) -> list[int]:
    key = zlib.crc32(prompt.encode("utf-8"))
    return [int(np.random.SeedSequence([seed, key, k]).generate_state(1, dtype=np.uint64)[0] >> 1)
            for k in range(n)]


def _schedule_for(ckpt: PriorCheckpoint, num_steps: int | None) -> DiffusionSchedule:
    if num_steps is None or num_steps == ckpt.schedule.num_timesteps:
        return ckpt.schedule
    return respace(ckpt.schedule, num_steps)


def _tiled_mean(gen: GeneratorHandle, num_blocks: int) -> torch.Tensor:
    return gen.mean_latent.float().repeat(num_blocks)


@torch.no_grad()
def sample_prompt_latents(ckpt: PriorCheckpoint, text_embed: torch.Tensor, seeds: list[int],
                          guidance: float, num_steps: int | None = None) -> torch.Tensor:
    """Raw-space latents for one condition embedding, one row per seed."""
    cond = text_embed.reshape(1, -1).expand(len(seeds), -1)
    x = sample_loop(ckpt.network, cond, _schedule_for(ckpt, num_steps), ckpt.config.flat_dim, guidance, seeds)
    return destandardize(x, ckpt.stats)


@torch.no_grad()
def text_to_image(req: SampleRequest, ckpt: PriorCheckpoint, gen: GeneratorHandle, enc: EncoderHandle) -> SampleResult:
    if not req.prompt.strip():
        raise InvalidArgumentError("prompt must not be empty")
    blocks = ckpt.config.num_latent_blocks
    text = enc.encode_text(req.prompt)[0]
    latents = sample_prompt_latents(ckpt, text, candidate_seeds(req.seed, req.n_candidates),
                                    req.guidance_scale, req.num_steps)
    if req.truncation_psi != 1:
        latents = truncate(latents, req.truncation_psi, _tiled_mean(gen, blocks))
    images = gen.synthesize_latent(latents, blocks)
    scores = cosine_similarity(enc.embed_images(images, gen.output_range), text[None])
    best = int(torch.argmax(scores))
    return SampleResult(images[best], latents[best], float(scores[best]), scores, latents, best)


def truncate(w, psi: float, mean_latent):
    """Pull latents toward the mean latent: ``mean + psi * (w - mean)``."""
    if not 0 <= psi <= 1:
        raise InvalidArgumentError(f"truncation psi must lie in [0, 1], got {psi}")
    if psi == 1:
        # mean + (w - mean) is not bit-exact in floating point
        return w.clone() if isinstance(w, torch.Tensor) else np.array(w, copy=True)
    if isinstance(w, torch.Tensor):
        mean_latent = torch.as_tensor(mean_latent, dtype=w.dtype)
    return mean_latent + psi * (w - mean_latent)


def style_mix(w_semantic: torch.Tensor, w_style: torch.Tensor, split_layer: int, gen: GeneratorHandle) -> torch.Tensor:
    """Per-layer latent stack: ``w_semantic`` for layers below ``split_layer``, ``w_style`` from there on."""
    if not getattr(gen, "supports_style_mixing", False):
        raise CapabilityError(f"generator {gen.name!r} does not support style mixing")
    n_layers = gen.num_style_layers
    if not 0 < split_layer <= n_layers:
        raise InvalidArgumentError(f"split_layer must lie in (0, {n_layers}], got {split_layer}")
    unbatched = w_semantic.ndim == 1
    sem = w_semantic.reshape(-1, gen.latent_dim)
    sty = w_style.reshape(-1, gen.latent_dim).expand(sem.shape[0], -1)
    out = torch.cat([sem[:, None].expand(-1, split_layer, -1),
                     sty[:, None].expand(-1, n_layers - split_layer, -1)], dim=1)
    return out[0] if unbatched else out


@dataclass
class EditDirection:
    vector: np.ndarray
    name: str = "direction"
    provenance: dict | str = "external"

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if abs(np.linalg.norm(self.vector) - 1) > 1e-6:
            raise InvalidArgumentError("edit direction must have unit norm")

    @classmethod
    def from_vector(cls, v, name: str = "direction", provenance: dict | str = "external") -> "EditDirection":
        v = np.asarray(v, dtype=np.float64)
        norm = np.linalg.norm(v)
        if norm < 1e-12:
            raise InvalidArgumentError("cannot build an edit direction from a zero vector")
        return cls(v / norm, name, provenance)

    def to_json(self) -> str:
        return json.dumps({"name": self.name, "vector": self.vector.tolist(), "provenance": self.provenance})

    @classmethod
    def from_json(cls, text: str) -> "EditDirection":
        d = json.loads(text)
        return cls(np.asarray(d["vector"]), d.get("name", "direction"), d.get("provenance", "external"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "EditDirection":
        return cls.from_json(Path(path).read_text())


def apply_edit(w, direction: EditDirection, magnitude: float):
    if w.shape[-1] != direction.vector.shape[-1]:
        raise InvalidArgumentError(
            f"latent width {w.shape[-1]} does not match direction width {direction.vector.shape[-1]}"
        )
    if isinstance(w, torch.Tensor):
        return w + magnitude * torch.as_tensor(direction.vector, dtype=w.dtype)
    return np.asarray(w) + magnitude * direction.vector


@torch.no_grad()
def find_direction(pos_prompts, neg_prompts, n_per_prompt: int, ckpt: PriorCheckpoint, enc: EncoderHandle,
                   guidance: float = 1.0, seed: int = 0, num_steps: int | None = None,
                   name: str = "direction") -> EditDirection:
    """Unit direction from the mean "negative" latent to the mean "positive" latent.

    Each prompt's samples are seeded from the prompt text, so swapping the
    two lists negates the direction exactly.
    """
    pos_prompts, neg_prompts = list(pos_prompts), list(neg_prompts)
    if not pos_prompts or not neg_prompts or n_per_prompt < 1:
        raise InvalidArgumentError("find_direction needs non-empty prompt lists and n_per_prompt >= 1")

    def side_mean(prompts):
        latents = [
            sample_prompt_latents(ckpt, enc.encode_text(p)[0], prompt_seeds(seed, p, n_per_prompt), guidance, num_steps)
            for p in prompts
        ]
        return torch.cat(latents).double().mean(0).numpy()

    diff = side_mean(pos_prompts) - side_mean(neg_prompts)
    if np.linalg.norm(diff) < 1e-12:
        raise InvalidArgumentError("positive and negative latents coincide; direction is undefined")
    provenance = {"pos_prompts": pos_prompts, "neg_prompts": neg_prompts, "n_per_side": n_per_prompt}
    return EditDirection.from_vector(diff, name, provenance)


@dataclass
class BaselineResult:
    latent: torch.Tensor
    score: float
    history: list[float] = field(default_factory=list)


def optimize_latent_baseline(prompt: str, gen: GeneratorHandle, enc: EncoderHandle, iters: int = 500,
                             lr: float = 0.05, seed: int = 0, num_blocks: int = 1) -> BaselineResult:
    """Gradient ascent on prompt/image similarity directly over the latent, from the mean latent.

    ``history`` holds the best-so-far score after each iteration. The
    optimization itself is deterministic; ``seed`` only fixes torch's global
    RNG for generators whose synthesis is stochastic.
    """
    require_differentiable(gen, enc)
    if iters < 0:
        raise InvalidArgumentError(f"iters must be >= 0, got {iters}")
    text = enc.encode_text(prompt).detach()
    w = _tiled_mean(gen, num_blocks).clone()[None].requires_grad_(True)
    opt = torch.optim.Adam([w], lr=lr)

    def score():
        img = gen.synthesize_latent(w, num_blocks)
        return cosine_similarity(enc.embed_images(img, gen.output_range), text)[0]

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        current = score()
        best_w, best = w.detach().clone(), current.item()
        history = []
        for _ in range(iters):
            opt.zero_grad()
            (-current).backward()
            opt.step()
            current = score()
            if current.item() > best:
                best, best_w = current.item(), w.detach().clone()
            history.append(best)
    return BaselineResult(best_w[0], best, history)


def to_uint8(image: torch.Tensor, input_range=(-1.0, 1.0)) -> np.ndarray:
    lo, hi = input_range
    x = ((image.detach().float() - lo) / (hi - lo)).clamp(0, 1)
    arr = (x * 255).round().to(torch.uint8).permute(1, 2, 0).numpy()
    return arr[..., 0] if arr.shape[-1] == 1 else arr


def image_grid(images: torch.Tensor, nrow: int = 4, pad: int = 2, pad_value: float = -1.0) -> torch.Tensor:
    n, c, h, w = images.shape
    ncol = min(nrow, n)
    rows = -(-n // ncol)
    grid = torch.full((c, rows * (h + pad) + pad, ncol * (w + pad) + pad), pad_value, dtype=images.dtype)
    for i, img in enumerate(images):
        r, k = divmod(i, ncol)
        top, left = pad + r * (h + pad), pad + k * (w + pad)
        grid[:, top:top + h, left:left + w] = img
    return grid


def save_png(image: torch.Tensor, path, input_range=(-1.0, 1.0)) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image, input_range)).save(path, format="PNG")
    return path
