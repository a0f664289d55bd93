"""Synthetic (latent, image-embedding) datasets, latent statistics, embedding augmentation.

On disk a dataset is a directory holding ``manifest.json`` and one or more
``shard_{j:05}.bin`` files. Each shard is a row-major little-endian float32
matrix of ``rows x (latent_width + embed_dim)``: the latent followed by the
image embedding it produced.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidArgumentError, NumericFailureError, WriteError
from .models import EncoderHandle, GeneratorHandle

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
SHARD_ROWS = 65_536
MIN_STATS_SAMPLES = 1_000
_DTYPE = np.dtype("<f4")


@dataclass
class Manifest:
    generator_id: str
    encoder_id: str
    seed: int
    count: int
    latent_dim: int
    embed_dim: int
    num_latent_blocks: int = 1
    shard_rows: int = SHARD_ROWS
    shards: list = field(default_factory=list)
    format_version: int = FORMAT_VERSION

    @property
    def latent_width(self) -> int:
        return self.latent_dim * self.num_latent_blocks


@dataclass
class DatasetShard:
    w: np.ndarray
    emb: np.ndarray
    manifest: Manifest

    def __post_init__(self):
        if len(self.w) != len(self.emb):
            raise InvalidArgumentError(f"{len(self.w)} latents but {len(self.emb)} embeddings")

    def __len__(self):
        return len(self.w)


def shard_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, index])


def _generate_rows(gen: GeneratorHandle, enc: EncoderHandle, n: int, seq: np.random.SeedSequence,
                   num_blocks: int, batch: int, start: int):
    rng = np.random.default_rng(seq)
    z = rng.standard_normal((n, num_blocks, gen.z_dim)).astype(np.float32)
    ws, embs = [], []
    with torch.no_grad():
        for lo in range(0, n, batch):
            zb = torch.from_numpy(z[lo:lo + batch])
            w = gen.mapping(zb.reshape(-1, gen.z_dim)).reshape(len(zb), -1)
            e = enc.embed_images(gen.synthesize_latent(w, num_blocks), gen.output_range)
            bad = ~torch.isfinite(e).all(dim=1)
            if bad.any():
                idx = start + lo + int(bad.nonzero()[0])
                raise NumericFailureError(f"non-finite embedding for dataset row {idx}")
            ws.append(w.numpy())
            embs.append(e.numpy())
    return np.concatenate(ws), np.concatenate(embs)


def generate_dataset(gen: GeneratorHandle, enc: EncoderHandle, n: int, seed: int, out_path,
                     num_latent_blocks: int = 1, shard_rows: int = SHARD_ROWS,
                     batch_size: int = 1024) -> Manifest:
    """Sample ``n`` untruncated latents, render them, and store (latent, image embedding) rows.

    Shard ``j`` draws its ``z`` from a seed derived from ``(seed, j)``, so a
    shard's contents depend only on the seed and the shard layout. With
    ``num_latent_blocks > 1`` each row holds independent latents that drive
    contiguous groups of style layers.
    """
    if int(n) != n or n < 1:
        raise InvalidArgumentError(f"dataset size must be >= 1, got {n}")
    out = Path(out_path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise WriteError(f"cannot create dataset directory {out}: {exc}") from exc

    manifest = Manifest(
        generator_id=gen.name, encoder_id=enc.name, seed=int(seed), count=int(n),
        latent_dim=gen.latent_dim, embed_dim=enc.embed_dim,
        num_latent_blocks=num_latent_blocks, shard_rows=shard_rows,
    )
    for j, start in enumerate(range(0, n, shard_rows)):
        rows = min(shard_rows, n - start)
        w, e = _generate_rows(gen, enc, rows, shard_seed(seed, j), num_latent_blocks, batch_size, start)
        blob = np.ascontiguousarray(np.concatenate([w, e], axis=1), dtype=_DTYPE).tobytes()
        name = f"shard_{j:05}.bin"
        try:
            (out / name).write_bytes(blob)
        except OSError as exc:
            raise WriteError(f"failed writing {out / name}: {exc}") from exc
        manifest.shards.append({"file": name, "rows": rows, "sha256": hashlib.sha256(blob).hexdigest()})
        log.info("wrote %s (%d rows)", name, rows)
    try:
        (out / "manifest.json").write_text(json.dumps(asdict(manifest), indent=2))
    except OSError as exc:
        raise WriteError(f"failed writing manifest in {out}: {exc}") from exc
    return manifest


def read_manifest(path) -> Manifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    data = json.loads(path.read_text())
    if data.get("format_version") != FORMAT_VERSION:
        raise InvalidArgumentError(f"unsupported dataset format version {data.get('format_version')}")
    return Manifest(**data)


def iter_shards(path) -> Iterable[DatasetShard]:
    root = Path(path)
    manifest = read_manifest(root)
    width = manifest.latent_width + manifest.embed_dim
    for entry in manifest.shards:
        arr = np.fromfile(root / entry["file"], dtype=_DTYPE).reshape(entry["rows"], width)
        yield DatasetShard(arr[:, :manifest.latent_width], arr[:, manifest.latent_width:], manifest)


def load_dataset(path) -> DatasetShard:
    """Read every shard of a dataset directory into one in-memory shard."""
    shards = list(iter_shards(path))
    manifest = shards[0].manifest
    w = np.concatenate([s.w for s in shards]).astype(np.float32)
    emb = np.concatenate([s.emb for s in shards]).astype(np.float32)
    if len(w) != manifest.count:
        raise InvalidArgumentError(f"manifest lists {manifest.count} rows, shards hold {len(w)}")
    return DatasetShard(w, emb, manifest)


@dataclass
class LatentStats:
    """Location and scale used to standardize latents before diffusion.

    ``std`` is a scalar by default; a per-dimension vector is stored when the
    statistics were computed with ``per_dim=True``.
    """

    mean: np.ndarray
    std: np.ndarray | float
    sample_count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if not np.all(std > 0):
            raise InvalidArgumentError("latent standard deviation must be positive (degenerate data?)")
        self.std = float(std) if std.ndim == 0 else std

    def to_dict(self) -> dict:
        std = self.std if isinstance(self.std, float) else self.std.tolist()
        return {"mean": self.mean.tolist(), "std": std, "sample_count": self.sample_count}

    @classmethod
    def from_dict(cls, d: dict) -> "LatentStats":
        return cls(np.asarray(d["mean"]), d["std"], int(d["sample_count"]))


def compute_latent_stats(data, per_dim: bool = False) -> LatentStats:
    """Mean vector and standard deviation of a latent sample.

    ``data`` may be an array of latents, a :class:`DatasetShard`, or an
    iterable of shards. The scalar std is the root of the mean per-dimension
    variance.
    """
    if isinstance(data, DatasetShard):
        w = data.w
    elif isinstance(data, (np.ndarray, torch.Tensor)):
        w = data
    else:
        w = np.concatenate([s.w for s in data])
    w = np.asarray(w, dtype=np.float64)
    if len(w) < MIN_STATS_SAMPLES:
        raise InvalidArgumentError(f"need at least {MIN_STATS_SAMPLES} latents for statistics, got {len(w)}")
    mean = w.mean(axis=0)
    var = w.var(axis=0)
    std = np.sqrt(var) if per_dim else np.sqrt(var.mean())
    return LatentStats(mean, std, len(w))


def _stat_tensors(stats: LatentStats, like: torch.Tensor):
    mean = torch.as_tensor(stats.mean, dtype=like.dtype)
    std = torch.as_tensor(stats.std, dtype=like.dtype)
    return mean, std


def standardize(w, stats: LatentStats):
    if isinstance(w, torch.Tensor):
        mean, std = _stat_tensors(stats, w)
        return (w - mean) / std
    return (np.asarray(w) - stats.mean) / stats.std


def destandardize(x, stats: LatentStats):
    if isinstance(x, torch.Tensor):
        mean, std = _stat_tensors(stats, x)
        return x * std + mean
    return np.asarray(x) * stats.std + stats.mean


def augment_embedding(e: torch.Tensor, alpha: float, generator: torch.Generator | None = None) -> torch.Tensor:
    """Perturb unit embeddings by a random direction of length ``alpha`` and renormalize.

    Works on a single ``[E]`` vector or a ``[B, E]`` batch. Rows whose
    perturbed vector is exactly zero are redrawn.
    """
    if alpha < 0:
        raise InvalidArgumentError(f"noise scale must be non-negative, got {alpha}")
    if alpha == 0:
        return e.clone()
    unbatched = e.ndim == 1
    rows = e[None] if unbatched else e
    eps = torch.randn(rows.shape, generator=generator, dtype=rows.dtype)
    y = rows + alpha * F.normalize(eps, dim=-1)
    norms = y.norm(dim=-1)
    while (norms == 0).any():
        bad = norms == 0
        eps = torch.randn((int(bad.sum()), rows.shape[1]), generator=generator, dtype=rows.dtype)
        y[bad] = rows[bad] + alpha * F.normalize(eps, dim=-1)
        norms = y.norm(dim=-1)
    out = y / norms[:, None]
    return out[0] if unbatched else out


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dataset_digest(path) -> str:
    return file_sha256(Path(path) / "manifest.json")
