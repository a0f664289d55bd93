"""Command-line entry point: ``latentprior <command> [options]``.

Exit codes: 0 success, 2 bad arguments or configuration, 3 file or model
loading problems, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import torch

from .checkpoint import load_checkpoint
from .data import generate_dataset, load_dataset
from .errors import (
    CapabilityError,
    ConfigError,
    InvalidArgumentError,
    LoadError,
    NumericFailureError,
    WriteError,
)
from .evaluation import eval_suite, load_prompts, noise_sweep
from .inference import (
    EditDirection,
    SampleRequest,
    apply_edit,
    find_direction,
    optimize_latent_baseline,
    save_png,
    text_to_image,
)
from .models import MODEL_DIR_ENV, ToyEncoder, load_encoder, load_generator
from .training import TrainConfig, load_config, train

log = logging.getLogger("latentprior")

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 2, 3, 4


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got {text!r}") from exc


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}") from exc


def _models(spec: dict):
    gen = load_generator(spec["generator"], spec.get("model_seed", 0))
    enc = load_encoder(spec["encoder"], spec.get("model_seed", 0), spec.get("text_gap", 0.0))
    return gen, enc


def _checkpoint_models(ckpt, args):
    """Model spec stored at training time, overridden by explicit flags."""
    spec = {"generator": "toy", "encoder": "toy", "model_seed": 0, "text_gap": 0.0,
            **ckpt.provenance.get("models", {})}
    for key in ("generator", "encoder"):
        if getattr(args, key, None):
            spec[key] = getattr(args, key)
    return spec, *_models(spec)


def _prompt_list(path, enc) -> list[str]:
    if path:
        return [p.text for p in load_prompts(path)]
    if isinstance(enc, ToyEncoder):
        return enc.prompts
    return []


def _write_json(path: Path, payload: dict):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2))
    except OSError as exc:
        raise WriteError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate_data(args) -> int:
    gen = load_generator(args.generator, args.model_seed)
    enc = load_encoder(args.encoder, args.model_seed, args.text_gap)
    manifest = generate_dataset(gen, enc, args.n, args.seed, args.out, args.num_latent_blocks, args.shard_rows)
    print(f"wrote {manifest.count} rows in {len(manifest.shards)} shard(s) to {args.out}")
    return 0


def cmd_train(args) -> int:
    prior_cfg, train_cfg, extra = load_config(args.config)
    spec = {"generator": "toy", "encoder": "toy", "model_seed": 0, "text_gap": 0.0, **extra}
    log.info("prior config: %s", json.dumps(prior_cfg.to_dict()))
    log.info("train config: %s", json.dumps(asdict(train_cfg)))
    log.info("models: %s", json.dumps(spec))
    gen, enc = _models(spec)
    prompts = _prompt_list(args.prompts, enc) or train_cfg.val_prompts
    result = train(prior_cfg, train_cfg, args.data, gen, enc, args.out, resume=args.resume, prompts=prompts,
                   log_every=args.log_every, provenance={"models": spec})
    print(f"best checkpoint {result.best_path} (step {result.best_step}, validation score {result.best_score:.4f})")
    return 0


def cmd_sample(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    spec, gen, enc = _checkpoint_models(ckpt, args)
    req = SampleRequest(args.prompt, args.n_candidates, args.guidance, args.steps, args.truncation, args.seed)
    result = text_to_image(req, ckpt, gen, enc)
    out = Path(args.out)
    try:
        save_png(result.image, out, gen.output_range)
    except OSError as exc:
        raise WriteError(f"cannot write {out}: {exc}") from exc
    _write_json(out.with_suffix(".json"), {
        "prompt": args.prompt,
        "score": result.score,
        "latent": result.latent.tolist(),
        "num_latent_blocks": ckpt.config.num_latent_blocks,
        "candidate_index": result.index,
        "settings": asdict(req),
        "checkpoint": str(args.ckpt),
        "models": spec,
    })
    print(f"{out}  score {result.score:.4f}")
    return 0


def cmd_edit(args) -> int:
    try:
        sidecar = json.loads(Path(args.latent).read_text())
        direction = EditDirection.load(args.direction)
    except (OSError, ValueError, KeyError) as exc:
        raise LoadError(f"cannot read edit inputs: {exc}") from exc
    spec = {"generator": "toy", "encoder": "toy", "model_seed": 0, **sidecar.get("models", {})}
    if args.generator:
        spec["generator"] = args.generator
    gen = load_generator(spec["generator"], spec.get("model_seed", 0))
    blocks = int(sidecar.get("num_latent_blocks", 1))
    latent = torch.tensor(sidecar["latent"], dtype=torch.float32)
    edited = apply_edit(latent, direction, args.magnitude)
    image = gen.synthesize_latent(edited[None], blocks)[0]
    out = Path(args.out)
    save_png(image, out, gen.output_range)
    _write_json(out.with_suffix(".json"), {**sidecar, "latent": edited.tolist(), "edit": {
        "direction": direction.name, "magnitude": args.magnitude, "source": str(args.latent)}})
    print(out)
    return 0


def cmd_find_direction(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    _, _, enc = _checkpoint_models(ckpt, args)
    direction = find_direction(args.pos, args.neg, args.n_per_prompt, ckpt, enc, args.guidance, args.seed,
                               args.steps, args.name)
    try:
        direction.save(args.out)
    except OSError as exc:
        raise WriteError(f"cannot write {args.out}: {exc}") from exc
    print(args.out)
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    _, gen, enc = _checkpoint_models(ckpt, args)
    prompts = args.prompts if args.prompts else (enc.prompts if isinstance(enc, ToyEncoder) else None)
    report = eval_suite(ckpt, gen, enc, prompts, args.n_candidates, args.guidance, args.steps, args.truncation,
                        args.seed)
    json_path, csv_path = report.write(args.out)
    print(f"mean score {report.mean_score:.4f} over {len(report.scores)} prompts; "
          f"median {report.median_seconds:.3f} s/sample ({report.hardware})")
    print(f"wrote {json_path} and {csv_path}")
    return 0


def cmd_noise_sweep(args) -> int:
    prior_cfg, train_cfg, extra = load_config(args.config)
    if args.iterations:
        train_cfg = TrainConfig(**{**asdict(train_cfg), "iterations": args.iterations,
                                   "validate_every": max(1, args.iterations // 5)})
    spec = {"generator": "toy", "encoder": "toy", "model_seed": 0, "text_gap": 0.0, **extra}
    log.info("prior config: %s", json.dumps(prior_cfg.to_dict()))
    log.info("train config: %s", json.dumps(asdict(train_cfg)))
    log.info("models: %s; alphas %s; seeds %s", json.dumps(spec), args.alphas, args.seeds)
    gen, enc = _models(spec)
    prompts = _prompt_list(args.prompts, enc) or train_cfg.val_prompts
    table = noise_sweep(args.alphas, load_dataset(args.data), gen, enc, prior_cfg, train_cfg, args.seeds, prompts,
                        args.out)
    print(table.format())
    return 0


def cmd_baseline_opt(args) -> int:
    gen = load_generator(args.generator, args.model_seed)
    enc = load_encoder(args.encoder, args.model_seed, args.text_gap)
    result = optimize_latent_baseline(args.prompt, gen, enc, args.iters, args.lr, args.seed)
    out = Path(args.out)
    save_png(gen.synthesize(result.latent[None])[0], out, gen.output_range)
    _write_json(out.with_suffix(".json"), {"prompt": args.prompt, "score": result.score,
                                          "latent": result.latent.tolist(), "iters": args.iters, "lr": args.lr})
    print(f"{out}  score {result.score:.4f}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_model_flags(p, defaults: bool = True):
    p.add_argument("--generator", default="toy" if defaults else None,
                   help="generator: 'toy', a registered adapter id, or a TorchScript file")
    p.add_argument("--encoder", default="toy" if defaults else None, help="encoder: 'toy' or a registered id")


def _add_sampling_flags(p):
    p.add_argument("--n-candidates", type=int, default=16, help="candidates sampled per prompt for re-ranking")
    p.add_argument("--guidance", type=float, default=2.0, help="classifier-free guidance scale")
    p.add_argument("--steps", type=int, default=None, help="respaced sampling steps; full schedule when omitted")
    p.add_argument("--truncation", type=float, default=1.0, help="truncation psi toward the mean latent")
    p.add_argument("--seed", type=int, default=0, help="random seed")


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    def _get_help_string(self, action):
        if action.default is None or action.default is argparse.SUPPRESS or action.required:
            return action.help
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latentprior", formatter_class=_HelpFormatter,
                                     description="Train and sample a diffusion prior over generator latents.")
    parser.add_argument("--model-dir", default=None, help=f"directory with model weights (sets ${MODEL_DIR_ENV})")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for debug)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    fmt = _HelpFormatter

    p = sub.add_parser("generate-data", help="sample (latent, image embedding) pairs", formatter_class=fmt)
    _add_model_flags(p)
    p.add_argument("--n", type=int, required=True, help="number of pairs")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--num-latent-blocks", type=int, default=1, help="independent latents per row")
    p.add_argument("--shard-rows", type=int, default=65_536, help="rows per shard file")
    p.add_argument("--text-gap", type=float, default=0.0, help="toy encoder text offset")
    p.add_argument("--model-seed", type=int, default=0, help="construction seed of the toy models")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train a prior from a YAML config", formatter_class=fmt)
    p.add_argument("--config", required=True, help="YAML file with training parameters")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--resume", default=None, help="training checkpoint to continue from")
    p.add_argument("--prompts", default=None, help="validation prompt file (default: toy concepts or config)")
    p.add_argument("--log-every", type=int, default=1000, help="steps between loss log lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="text to image with re-ranking", formatter_class=fmt)
    p.add_argument("--ckpt", required=True, help="prior checkpoint")
    p.add_argument("--prompt", required=True, help="text prompt")
    _add_sampling_flags(p)
    _add_model_flags(p, defaults=False)
    p.add_argument("--out", required=True, help="PNG path; a JSON sidecar is written next to it")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("edit", help="move a sampled latent along an edit direction", formatter_class=fmt)
    p.add_argument("--latent", required=True, help="JSON sidecar written by 'sample'")
    p.add_argument("--direction", required=True, help="direction JSON file")
    p.add_argument("--magnitude", type=float, required=True, help="signed step along the direction")
    p.add_argument("--generator", default=None, help="override the generator recorded in the sidecar")
    p.add_argument("--out", required=True, help="PNG path")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("find-direction", help="latent direction between two prompt sets", formatter_class=fmt)
    p.add_argument("--ckpt", required=True, help="prior checkpoint")
    p.add_argument("--pos", action="append", required=True, help="positive prompt (repeatable)")
    p.add_argument("--neg", action="append", required=True, help="negative prompt (repeatable)")
    p.add_argument("--n-per-prompt", type=int, default=16, help="samples per prompt")
    p.add_argument("--guidance", type=float, default=1.0, help="classifier-free guidance scale")
    p.add_argument("--steps", type=int, default=None, help="respaced sampling steps")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--name", default="direction", help="name stored in the direction file")
    _add_model_flags(p, defaults=False)
    p.add_argument("--out", required=True, help="direction JSON path")
    p.set_defaults(func=cmd_find_direction)

    p = sub.add_parser("eval", help="score a checkpoint on a prompt set", formatter_class=fmt)
    p.add_argument("--ckpt", required=True, help="prior checkpoint")
    p.add_argument("--prompts", default=None, help="prompt file (default: toy concepts or the packaged set)")
    _add_sampling_flags(p)
    _add_model_flags(p, defaults=False)
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("noise-sweep", help="train one prior per embedding noise scale", formatter_class=fmt)
    p.add_argument("--config", required=True, help="YAML file with training parameters")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--alphas", type=_float_list, default="0,0.5,1,4", help="comma separated noise scales")
    p.add_argument("--seeds", type=_int_list, default="0", help="comma separated training seeds")
    p.add_argument("--iterations", type=int, default=None, help="override the per-run budget")
    p.add_argument("--prompts", default=None, help="validation prompt file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_noise_sweep)

    p = sub.add_parser("baseline-opt", help="optimize a latent directly against a prompt", formatter_class=fmt)
    _add_model_flags(p)
    p.add_argument("--prompt", required=True, help="text prompt")
    p.add_argument("--iters", type=int, default=500, help="optimizer iterations")
    p.add_argument("--lr", type=float, default=0.05, help="Adam learning rate")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--text-gap", type=float, default=0.0, help="toy encoder text offset")
    p.add_argument("--model-seed", type=int, default=0, help="construction seed of the toy models")
    p.add_argument("--out", required=True, help="PNG path")
    p.set_defaults(func=cmd_baseline_opt)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose + 1, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.model_dir:
        os.environ[MODEL_DIR_ENV] = args.model_dir
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    log.info("%s: %s", args.command, json.dumps(resolved, default=str))
    try:
        return args.func(args)
    except (ConfigError, InvalidArgumentError, CapabilityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFailureError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (LoadError, WriteError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
