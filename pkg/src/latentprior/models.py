"""Frozen generator and encoder handles.

Everything downstream talks to two small interfaces: a generator with
``mapping(z) -> w`` and ``synthesize(w) -> image``, and an encoder with
``encode_image`` / ``encode_text`` returning unit-norm embeddings. A
deterministic toy pair lets the whole pipeline run on a laptop CPU; real
checkpoints are plugged in through TorchScript adapters.
"""

from __future__ import annotations

import functools
import math
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import CapabilityError, InvalidArgumentError, LoadError

MODEL_DIR_ENV = "C2L_MODEL_DIR"
MEAN_LATENT_SAMPLES = 10_000
PROMPT_PREFIX = "A photograph of"


def cosine_similarity(a, b):
    """Cosine similarity along the last axis. Works on numpy arrays and tensors."""
    if isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor):
        a, b = torch.as_tensor(a), torch.as_tensor(b)
        na, nb = a.norm(dim=-1), b.norm(dim=-1)
        if (na == 0).any() or (nb == 0).any():
            raise InvalidArgumentError("cosine similarity of a zero vector is undefined")
        return (a * b).sum(-1) / (na * nb)
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a, axis=-1), np.linalg.norm(b, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise InvalidArgumentError("cosine similarity of a zero vector is undefined")
    out = np.sum(a * b, axis=-1) / (na * nb)
    return float(out) if np.ndim(out) == 0 else out


class GeneratorHandle:
    """Interface of a frozen latent-variable image generator.

    Subclasses provide ``mapping`` and ``synthesize``. ``synthesize`` accepts
    either ``[B, latent_dim]`` (one latent shared by all style layers) or a
    per-layer stack ``[B, num_style_layers, latent_dim]``.
    """

    name: str = "generator"
    z_dim: int
    latent_dim: int
    num_style_layers: int
    supports_style_mixing: bool = True
    differentiable: bool = True
    output_range: tuple[float, float] = (-1.0, 1.0)
    mean_latent: torch.Tensor

    def mapping(self, z: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def synthesize(self, w: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def estimate_mean_latent(self, n: int = MEAN_LATENT_SAMPLES, seed: int = 0) -> torch.Tensor:
        g = torch.Generator().manual_seed(seed)
        z = torch.randn(n, self.z_dim, generator=g)
        with torch.no_grad():
            return torch.cat([self.mapping(chunk) for chunk in z.split(2048)]).mean(0)

    def layer_groups(self, num_blocks: int) -> list[range]:
        """Split the style layers into ``num_blocks`` contiguous groups (coarse to fine)."""
        if not 1 <= num_blocks <= self.num_style_layers:
            raise InvalidArgumentError(
                f"cannot split {self.num_style_layers} style layers into {num_blocks} blocks"
            )
        edges = np.linspace(0, self.num_style_layers, num_blocks + 1).round().astype(int)
        return [range(a, b) for a, b in zip(edges[:-1], edges[1:])]

    def expand_blocks(self, flat: torch.Tensor, num_blocks: int) -> torch.Tensor:
        """Turn a flat ``[B, num_blocks * latent_dim]`` latent into a per-layer stack."""
        blocks = flat.reshape(flat.shape[0], num_blocks, self.latent_dim)
        if num_blocks == 1:
            return blocks.expand(-1, self.num_style_layers, -1)
        index = torch.tensor([j for j, grp in enumerate(self.layer_groups(num_blocks)) for _ in grp])
        return blocks[:, index]

    def synthesize_latent(self, flat: torch.Tensor, num_blocks: int = 1) -> torch.Tensor:
        if num_blocks == 1:
            return self.synthesize(flat)
        return self.synthesize(self.expand_blocks(flat, num_blocks))


class EncoderHandle:
    """Interface of a frozen joint image/text encoder with unit-norm outputs."""

    name: str = "encoder"
    embed_dim: int
    image_input_size: int
    channels: int
    mean: tuple[float, ...]
    std: tuple[float, ...]
    differentiable: bool = True

    def encode_image(self, pixels: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def encode_text(self, prompts: str | Sequence[str]) -> torch.Tensor:
        raise NotImplementedError

    def embed_images(self, images: torch.Tensor, input_range=(-1.0, 1.0)) -> torch.Tensor:
        return self.encode_image(preprocess_image(images, self, input_range))


def preprocess_image(image: torch.Tensor, encoder: EncoderHandle, input_range=(-1.0, 1.0)) -> torch.Tensor:
    """Map generator output to encoder input: rescale to [0, 1], resize, normalize.

    ``image`` is ``[B, C, H, W]`` or ``[C, H, W]``. Resizing is bicubic and is
    skipped when the image already has the encoder's input size.
    """
    unbatched = image.ndim == 3
    if unbatched:
        image = image[None]
    if image.ndim != 4 or image.shape[1] != encoder.channels:
        raise InvalidArgumentError(
            f"expected images with {encoder.channels} channel(s) in [B, C, H, W] layout, "
            f"got shape {tuple(image.shape)}"
        )
    lo, hi = input_range
    x = (image - lo) / (hi - lo)
    size = encoder.image_input_size
    if x.shape[-2:] != (size, size):
        x = F.interpolate(x, size=(size, size), mode="bicubic", align_corners=False, antialias=True)
    mean = torch.tensor(encoder.mean, dtype=x.dtype).view(1, -1, 1, 1)
    std = torch.tensor(encoder.std, dtype=x.dtype).view(1, -1, 1, 1)
    x = (x - mean) / std
    return x[0] if unbatched else x


# ---------------------------------------------------------------------------
# toy stack
# ---------------------------------------------------------------------------

TOY_CONCEPTS = ("amber", "birch", "cobalt", "dune", "ember", "frost", "glade", "harbor")


def _frequency_patterns(rng: np.random.Generator, n: int, size: int, lo: float, hi: float) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(size) / size, np.arange(size) / size, indexing="ij")
    out = np.empty((n, size * size))
    for k in range(n):
        freq = rng.uniform(lo, hi)
        theta = rng.uniform(0, 2 * np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        out[k] = np.cos(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase).ravel()
    return out


class ToyGenerator(nn.Module, GeneratorHandle):
    """Small deterministic stand-in for a style-based GAN.

    ``mapping`` is a two-layer tanh MLP. ``synthesize`` is a linear decode into
    oriented sinusoid patterns followed by a sine, giving a ``[B, 1, 32, 32]``
    image in [-1, 1]. Each of the three style layers drives its own frequency
    band (coarse, medium, fine), so per-layer stacks behave like style mixing.
    """

    name = "toy"
    bands = ((0.5, 1.5), (1.5, 3.0), (3.0, 6.0))

    def __init__(self, seed: int = 0, z_dim: int = 8, latent_dim: int = 16, hidden: int = 32,
                 image_size: int = 32):
        super().__init__()
        self.seed, self.z_dim, self.latent_dim, self.image_size = seed, z_dim, latent_dim, image_size
        self.num_style_layers = len(self.bands)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6E]))
        t = lambda a: torch.tensor(a, dtype=torch.float32)
        self.register_buffer("w1", t(rng.normal(size=(z_dim, hidden)) / math.sqrt(z_dim) * 1.5))
        self.register_buffer("b1", t(rng.normal(size=hidden) * 0.3))
        self.register_buffer("w2", t(rng.normal(size=(hidden, latent_dim)) / math.sqrt(hidden)))
        self.register_buffer("b2", t(rng.normal(size=latent_dim) * 0.5))
        decode = []
        for lo, hi in self.bands:
            patterns = _frequency_patterns(rng, latent_dim, image_size, lo, hi)
            mix = rng.normal(size=(latent_dim, latent_dim)) / math.sqrt(latent_dim)
            decode.append(mix @ patterns * (1.2 / math.sqrt(len(self.bands))))
        self.register_buffer("decode", t(np.stack(decode)))
        self.register_buffer("bias", t(rng.normal(size=image_size * image_size) * 0.3))
        self.register_buffer("mean_latent", self.estimate_mean_latent())

    def mapping(self, z):
        return torch.tanh(z @ self.w1 + self.b1) @ self.w2 + self.b2

    def synthesize(self, w):
        if w.ndim == 2:
            pre = w @ self.decode.sum(0)
        elif w.ndim == 3 and w.shape[1] == self.num_style_layers:
            pre = torch.einsum("bld,ldp->bp", w, self.decode)
        else:
            raise InvalidArgumentError(f"cannot synthesize latent of shape {tuple(w.shape)}")
        img = torch.sin(pre + self.bias)
        return img.view(-1, 1, self.image_size, self.image_size)


class ToyEncoder(nn.Module, EncoderHandle):
    """Deterministic stand-in for a joint image/text encoder.

    Images are embedded by a fixed affine map (whitened principal directions
    of the toy generator's images, randomly rotated) followed by unit
    normalization. Text is a lookup over named concepts, each anchored to the
    embedding of one canonical generated image. ``text_gap > 0`` shifts every
    text embedding along one fixed direction before renormalizing, which
    separates the two modalities the way real encoders do.

    With ``image_rank < embed_dim`` only the leading ``image_rank`` principal
    directions keep unit variance. The remaining "minor" directions are
    scaled by ``minor_scale`` (dropped when it is 0) and the gap direction is
    drawn inside them, so text sits where images barely vary, at cosine about
    ``1/sqrt(1 + text_gap**2)`` to its anchor.
    """

    name = "toy"

    def __init__(self, generator: ToyGenerator, seed: int = 0, embed_dim: int = 16,
                 text_gap: float = 0.0, image_rank: int | None = None, minor_scale: float = 0.0,
                 concepts: Sequence[str] = TOY_CONCEPTS, fit_samples: int = 4096):
        super().__init__()
        rank = embed_dim if image_rank is None else int(image_rank)
        if not 1 <= rank <= embed_dim:
            raise InvalidArgumentError(f"image_rank must lie in [1, {embed_dim}], got {image_rank}")
        if minor_scale < 0:
            raise InvalidArgumentError(f"minor_scale must be non-negative, got {minor_scale}")
        self.embed_dim, self.text_gap, self.image_rank = embed_dim, float(text_gap), rank
        self.minor_scale = float(minor_scale) if rank < embed_dim else 0.0
        if self.text_gap or rank < embed_dim:
            self.name = f"toy(gap={self.text_gap:g},rank={rank},minor={self.minor_scale:g})"
        self.image_input_size, self.channels = generator.image_size, 1
        self.mean, self.std = (0.5,), (0.35,)
        self.concepts = tuple(concepts)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE1]))
        g = torch.Generator().manual_seed(int(rng.integers(2**31)))

        with torch.no_grad():
            z = torch.randn(fit_samples, generator.z_dim, generator=g)
            x = preprocess_image(generator.synthesize(generator.mapping(z)), self).flatten(1).double()
            center = x.mean(0)
            _, s, vt = torch.linalg.svd(x - center, full_matrices=False)
            whiten = vt[:embed_dim].T / (s[:embed_dim] / math.sqrt(fit_samples))
            whiten[:, rank:] *= self.minor_scale
            rot, _ = np.linalg.qr(rng.normal(size=(embed_dim, embed_dim)))
            proj = whiten @ torch.tensor(rot)
        self.register_buffer("proj", proj.float())
        self.register_buffer("offset", (-center @ proj).float())
        gap_dir = rng.normal(size=embed_dim)
        if rank < embed_dim:
            gap_dir = rot[rank:].T @ (rot[rank:] @ gap_dir)
        self.register_buffer("gap_direction", torch.tensor(gap_dir / np.linalg.norm(gap_dir), dtype=torch.float32))

        anchors = torch.tensor(rng.normal(size=(len(self.concepts), generator.z_dim)), dtype=torch.float32)
        self.register_buffer("anchor_z", anchors)
        with torch.no_grad():
            self.register_buffer("anchor_latents", generator.mapping(anchors))
            self.register_buffer("anchor_embeds", self.embed_images(generator.synthesize(self.anchor_latents)))
            text = self.anchor_embeds + self.text_gap * self.gap_direction
            self.register_buffer("text_embeds", F.normalize(text, dim=-1))

    @property
    def prompts(self) -> list[str]:
        return [f"{PROMPT_PREFIX} {c}" for c in self.concepts]

    def encode_image(self, pixels):
        if pixels.ndim == 3:
            pixels = pixels[None]
        return F.normalize(pixels.flatten(1) @ self.proj + self.offset, dim=-1)

    def concept_index(self, prompt: str) -> int:
        text = prompt.strip()
        if text.lower().startswith(PROMPT_PREFIX.lower()):
            text = text[len(PROMPT_PREFIX):]
        key = re.sub(r"[^a-z]", "", text.lower())
        if key not in self.concepts:
            raise InvalidArgumentError(
                f"toy encoder only knows the concepts {', '.join(self.concepts)}; got {prompt!r}"
            )
        return self.concepts.index(key)

    def encode_text(self, prompts):
        if isinstance(prompts, str):
            prompts = [prompts]
        return self.text_embeds[[self.concept_index(p) for p in prompts]]


@dataclass
class ToyStack:
    generator: ToyGenerator
    encoder: ToyEncoder

    @property
    def prompts(self) -> list[str]:
        return self.encoder.prompts


@functools.lru_cache(maxsize=8)
def _toy_generator(seed: int) -> ToyGenerator:
    return ToyGenerator(seed).requires_grad_(False).eval()


@functools.lru_cache(maxsize=8)
def _toy_encoder(seed: int, text_gap: float, image_rank: int | None = None, minor_scale: float = 0.0) -> ToyEncoder:
    enc = ToyEncoder(_toy_generator(seed), seed=seed, text_gap=text_gap, image_rank=image_rank,
                     minor_scale=minor_scale)
    return enc.requires_grad_(False).eval()


# Separated-modality variant. Half of the embedding directions carry image detail
# at a tenth of the usual spread; text is offset along them (cosine ~0.7 to its
# anchor). A prior trained on clean image embeddings leans on that detail and is
# thrown off by the offset, which is what embedding noise protects against.
TOY_GAP_PRESET = {"text_gap": 1.0, "image_rank": 8, "minor_scale": 0.1}


def toy_stack(seed: int = 0, text_gap: float = 0.0, image_rank: int | None = None,
              minor_scale: float = 0.0) -> ToyStack:
    return ToyStack(_toy_generator(seed), _toy_encoder(seed, float(text_gap), image_rank, float(minor_scale)))


def toy_gap_stack(seed: int = 0) -> ToyStack:
    return toy_stack(seed, **TOY_GAP_PRESET)


# ---------------------------------------------------------------------------
# adapters for real checkpoints
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdapterInfo:
    filename: str
    z_dim: int
    latent_dim: int
    num_style_layers: int
    hint: str


GENERATOR_REGISTRY: dict[str, AdapterInfo] = {
    "stylegan2-ffhq-1024": AdapterInfo(
        "stylegan2-ffhq-1024.pt", 512, 512, 18,
        "export the FFHQ config-F generator as TorchScript exposing mapping(z) and synthesis(ws)",
    ),
    "stylegan3-lhq-256": AdapterInfo(
        "stylegan3-lhq-256.pt", 512, 512, 16,
        "export the LHQ generator as TorchScript exposing mapping(z) and synthesis(ws)",
    ),
}

ENCODER_REGISTRY = {"clip-vit-b32": "ViT-B-32"}

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


def model_dir(explicit: str | os.PathLike | None = None) -> Path | None:
    if explicit is not None:
        return Path(explicit)
    env = os.environ.get(MODEL_DIR_ENV)
    return Path(env) if env else None


class TorchScriptGenerator(GeneratorHandle):
    """Generator backed by a TorchScript module with ``mapping`` and ``synthesis`` methods."""

    def __init__(self, path: Path, info: AdapterInfo | None = None, name: str | None = None):
        try:
            self.module = torch.jit.load(str(path), map_location="cpu").eval()
        except (RuntimeError, ValueError) as exc:
            raise LoadError(f"could not read TorchScript generator {path}: {exc}") from exc
        self.name = name or Path(path).stem
        m = self.module
        self.z_dim = info.z_dim if info else int(m.z_dim)
        self.latent_dim = info.latent_dim if info else int(m.w_dim)
        self.num_style_layers = info.num_style_layers if info else int(m.num_ws)
        self.mean_latent = self.estimate_mean_latent()

    def mapping(self, z):
        return self.module.mapping(z)

    def synthesize(self, w):
        if w.ndim == 2:
            w = w[:, None].expand(-1, self.num_style_layers, -1)
        return self.module.synthesis(w)


def load_generator(spec: str | os.PathLike, seed: int = 0, models: str | os.PathLike | None = None) -> GeneratorHandle:
    """Resolve ``"toy"``, a registered adapter id, or a TorchScript file path."""
    if spec == "toy":
        return _toy_generator(seed)
    info = GENERATOR_REGISTRY.get(str(spec))
    if info is not None:
        root = model_dir(models)
        path = root / info.filename if root else None
        if path is None or not path.is_file():
            raise LoadError(
                f"weights for generator {spec!r} not found"
                + (f" at {path}" if path else "")
                + f"; place {info.filename} in ${MODEL_DIR_ENV} ({info.hint})"
            )
        return TorchScriptGenerator(path, info, name=str(spec))
    path = Path(spec)
    if path.is_file():
        return TorchScriptGenerator(path)
    known = ", ".join(["toy", *GENERATOR_REGISTRY])
    raise LoadError(f"unknown generator {str(spec)!r}: expected one of {known} or an existing file path")


class OpenClipEncoder(EncoderHandle):
    """CLIP image/text encoder loaded through the optional ``open_clip`` package."""

    image_input_size, channels = 224, 3
    mean, std = CLIP_MEAN, CLIP_STD

    def __init__(self, arch: str, weights: str | None):
        try:
            import open_clip
        except ImportError as exc:
            raise LoadError("the CLIP adapter needs the open_clip_torch package") from exc
        self.model, _, _ = open_clip.create_model_and_transforms(arch, pretrained=weights or "openai")
        self.model.eval().requires_grad_(False)
        self.tokenizer = open_clip.get_tokenizer(arch)
        self.embed_dim = int(self.model.text_projection.shape[-1])
        self.name = arch

    def encode_image(self, pixels):
        return F.normalize(self.model.encode_image(pixels).float(), dim=-1)

    def encode_text(self, prompts):
        if isinstance(prompts, str):
            prompts = [prompts]
        return F.normalize(self.model.encode_text(self.tokenizer(list(prompts))).float(), dim=-1)


def load_encoder(spec: str, seed: int = 0, text_gap: float = 0.0,
                 models: str | os.PathLike | None = None) -> EncoderHandle:
    if spec == "toy":
        return _toy_encoder(seed, float(text_gap))
    if spec == "toy-gap":
        return toy_gap_stack(seed).encoder
    if spec in ENCODER_REGISTRY:
        root = model_dir(models)
        weights = None
        if root is not None and (root / f"{spec}.pt").is_file():
            weights = str(root / f"{spec}.pt")
        return OpenClipEncoder(ENCODER_REGISTRY[spec], weights)
    known = ", ".join(["toy", "toy-gap", *ENCODER_REGISTRY])
    raise LoadError(f"unknown encoder {spec!r}: expected one of {known}")


def require_differentiable(gen: GeneratorHandle, enc: EncoderHandle) -> None:
    if not (gen.differentiable and enc.differentiable):
        raise CapabilityError(f"{gen.name}/{enc.name} does not expose a differentiable path")
