"""Prompt-suite scoring, the embedding-noise sweep and sampling-time benchmarks."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import platform
import statistics
import tempfile
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from .checkpoint import PriorCheckpoint
from .errors import InvalidArgumentError, WriteError
from .inference import SampleRequest, text_to_image
from .models import PROMPT_PREFIX, EncoderHandle, GeneratorHandle
from .network import PriorConfig
from .training import TrainConfig, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PromptEntry:
    text: str
    restricted: bool = False


def with_prefix(text: str, prefix: str = PROMPT_PREFIX) -> str:
    text = text.strip()
    if text.lower().startswith(prefix.lower()):
        return text
    return f"{prefix} {text}"


def default_prompt_file() -> Path:
    """The packaged 64-prompt scoring set."""
    return Path(str(resources.files("latentprior") / "resources" / "eval_prompts.json"))


def load_prompts(path=None) -> list[PromptEntry]:
    """Read a prompt file and return prefixed prompts.

    JSON files use the layout of the packaged set (``prompts`` entries with
    ``text`` and ``restricted``); anything else is read as one prompt per
    line, ignoring blanks and ``#`` comments.
    """
    path = Path(path) if path is not None else default_prompt_file()
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read prompt file {path}: {exc.strerror or exc}") from exc
    if path.suffix == ".json":
        doc = json.loads(raw)
        prefix = doc.get("prefix", PROMPT_PREFIX)
        entries = [PromptEntry(with_prefix(p["text"], prefix), bool(p.get("restricted", False)))
                   for p in doc["prompts"]]
    else:
        entries = [PromptEntry(with_prefix(line)) for line in raw.splitlines()
                   if line.strip() and not line.lstrip().startswith("#")]
    if not entries:
        raise InvalidArgumentError(f"prompt file {path} holds no prompts")
    return entries


def hardware_descriptor() -> str:
    if torch.cuda.is_available():
        device = torch.cuda.get_device_name(0)
    else:
        device = f"{platform.processor() or platform.machine()} cpu x{torch.get_num_threads()} threads"
    return f"{device}; torch {torch.__version__}; python {platform.python_version()}"


@torch.no_grad()
def random_latent_baseline(gen: GeneratorHandle, enc: EncoderHandle, prompts, n: int = 100,
                           seed: int = 0) -> float:
    """Mean prompt/image cosine of ``n`` untruncated random latents, averaged over prompts.

    This is the score a prior that ignores its condition would get.
    """
    prompts = list(prompts)
    if not prompts or n < 1:
        raise InvalidArgumentError("random baseline needs prompts and n >= 1")
    z = torch.randn(n, gen.z_dim, generator=torch.Generator().manual_seed(seed))
    images = gen.synthesize(gen.mapping(z))
    sims = enc.embed_images(images, gen.output_range) @ enc.encode_text(prompts).T
    return float(sims.double().mean())


# ---------------------------------------------------------------------------
# prompt suite
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    prompts: list[str]
    scores: list[float]
    config: dict
    seconds_per_sample: list[float]
    hardware: str = ""
    mean_score: float = field(init=False)

    def __post_init__(self):
        if len(self.prompts) != len(self.scores):
            raise InvalidArgumentError("one score per prompt expected")
        self.mean_score = statistics.fmean(self.scores) if self.scores else float("nan")

    @property
    def median_seconds(self) -> float:
        return statistics.median(self.seconds_per_sample)

    def to_dict(self) -> dict:
        return {
            "mean_score": self.mean_score,
            "median_seconds_per_sample": self.median_seconds,
            "hardware": self.hardware,
            "config": self.config,
            "per_prompt": [{"prompt": p, "score": s, "seconds": t}
                           for p, s, t in zip(self.prompts, self.scores, self.seconds_per_sample)],
        }

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
            json_path = out / "report.json"
            json_path.write_text(json.dumps(self.to_dict(), indent=2))
            csv_path = out / "report.csv"
            with csv_path.open("w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["prompt", "score", "seconds"])
                writer.writerows(zip(self.prompts, self.scores, self.seconds_per_sample))
        except OSError as exc:
            raise WriteError(f"cannot write report to {out}: {exc}") from exc
        return json_path, csv_path


def eval_suite(ckpt: PriorCheckpoint, gen: GeneratorHandle, enc: EncoderHandle, prompts=None,
               n_candidates: int = 16, guidance_scale: float = 2.0, num_steps: int | None = None,
               truncation_psi: float = 1.0, seed: int = 0) -> EvalReport:
    """One re-ranked sample per prompt, scored against the prompt and timed.

    ``prompts`` is a prompt file path, a list of strings, or ``None`` for the
    packaged set. Every prompt gets the standard prefix. Timing covers the
    whole single-prompt call: sampling, rendering and re-ranking.
    """
    if prompts is None or isinstance(prompts, (str, os.PathLike)):
        texts = [e.text for e in load_prompts(prompts)]
    else:
        texts = [with_prefix(p) for p in prompts]
    if not texts:
        raise InvalidArgumentError("no prompts to evaluate")
    settings = dict(n_candidates=n_candidates, guidance_scale=guidance_scale, num_steps=num_steps,
                    truncation_psi=truncation_psi, seed=seed)
    scores, seconds = [], []
    for text in texts:
        start = time.perf_counter()
        result = text_to_image(SampleRequest(text, **settings), ckpt, gen, enc)
        seconds.append(time.perf_counter() - start)
        scores.append(result.score)
        log.info("%.4f  %s", result.score, text)
    config = {**settings, "checkpoint": str(ckpt.path) if ckpt.path else None,
              "generator": gen.name, "encoder": enc.name}
    return EvalReport(texts, scores, config, seconds, hardware_descriptor())


# ---------------------------------------------------------------------------
# noise sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    alpha: float
    seed: int
    score: float
    best_step: int


@dataclass
class SweepTable:
    rows: list[SweepRow]

    def alphas(self) -> list[float]:
        return sorted({r.alpha for r in self.rows})

    def mean_scores(self) -> dict[float, float]:
        return {a: statistics.fmean(r.score for r in self.rows if r.alpha == a) for a in self.alphas()}

    def score(self, alpha: float, seed: int) -> float:
        for r in self.rows:
            if r.alpha == alpha and r.seed == seed:
                return r.score
        raise KeyError((alpha, seed))

    def format(self) -> str:
        seeds = sorted({r.seed for r in self.rows})
        head = "alpha  " + "  ".join(f"seed {s:<3d}" for s in seeds) + "  mean"
        lines = [head]
        for a, mean in self.mean_scores().items():
            cells = "  ".join(f"{self.score(a, s):8.4f}" for s in seeds)
            lines.append(f"{a:5.2f}  {cells}  {mean:.4f}")
        return "\n".join(lines)

    def write(self, out_dir) -> tuple[Path, Path]:
        """``sweep.csv`` holds every run; ``sweep_plot.csv`` holds (alpha, mean score)."""
        out = Path(out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
            runs = out / "sweep.csv"
            with runs.open("w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["alpha", "seed", "score", "best_step"])
                writer.writerows(dataclasses.astuple(r) for r in self.rows)
            plot = out / "sweep_plot.csv"
            with plot.open("w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["alpha", "score"])
                writer.writerows(self.mean_scores().items())
        except OSError as exc:
            raise WriteError(f"cannot write sweep results to {out}: {exc}") from exc
        return runs, plot


def noise_sweep(alphas, dataset, gen: GeneratorHandle, enc: EncoderHandle, prior_cfg: PriorConfig,
                train_cfg: TrainConfig, seeds=(0,), prompts=None, out_dir=None) -> SweepTable:
    """Train one prior per (alpha, seed) with the same budget and report its best validation score.

    Only ``noise_scale`` and ``seed`` differ between runs. Prompts are text
    prompts, which training never sees. With ``out_dir`` each run keeps its
    checkpoints under ``alpha_<a>_seed_<s>`` and the tables are written there.
    """
    alphas = [float(a) for a in alphas]
    if not alphas or any(a < 0 for a in alphas):
        raise InvalidArgumentError("noise sweep needs non-negative alpha values")
    prompts = list(prompts or train_cfg.val_prompts or [])
    root = Path(out_dir) if out_dir is not None else None
    rows = []
    for seed in seeds:
        for alpha in alphas:
            cfg = dataclasses.replace(train_cfg, noise_scale=alpha, seed=int(seed))
            with tempfile.TemporaryDirectory() as tmp:
                run_dir = root / f"alpha_{alpha:g}_seed_{seed}" if root else tmp
                result = train(prior_cfg, cfg, dataset, gen, enc, run_dir, prompts=prompts, log_every=0)
            rows.append(SweepRow(alpha, int(seed), result.best_score, result.best_step))
            log.info("alpha %.2f seed %d: score %.4f (step %d)", alpha, seed, result.best_score, result.best_step)
    table = SweepTable(rows)
    if root is not None:
        table.write(root)
    return table


# ---------------------------------------------------------------------------
# timing
# ---------------------------------------------------------------------------


@dataclass
class TimingResult:
    median_seconds: float
    seconds: list[float]
    hardware: str
    num_steps: int


def timing_benchmark(ckpt: PriorCheckpoint, gen: GeneratorHandle, enc: EncoderHandle, prompt: str,
                     n_candidates: int = 16, guidance_scale: float = 2.0, num_steps: int | None = None,
                     repeats: int = 5, seed: int = 0) -> TimingResult:
    """Median wall-clock time of one re-ranked text-to-image call, after one untimed warm-up call."""
    if repeats < 1:
        raise InvalidArgumentError(f"repeats must be >= 1, got {repeats}")
    req = SampleRequest(with_prefix(prompt), n_candidates, guidance_scale, num_steps, seed=seed)
    text_to_image(req, ckpt, gen, enc)
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        text_to_image(req, ckpt, gen, enc)
        times.append(time.perf_counter() - start)
    steps = num_steps or ckpt.schedule.num_timesteps
    return TimingResult(float(np.median(times)), times, hardware_descriptor(), steps)
