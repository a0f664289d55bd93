"""Sample, truncate and edit with a trained toy prior.

Needs the checkpoint from the first demo:
``python3 demos/02_sampling_and_editing.py toy_run/run/best.pt [out_dir]``.
Runs in well under a minute.
"""

# %%
import sys
from pathlib import Path

import torch

from latentprior.checkpoint import load_checkpoint
from latentprior.inference import (
    SampleRequest,
    apply_edit,
    find_direction,
    image_grid,
    optimize_latent_baseline,
    save_png,
    text_to_image,
    truncate,
)
from latentprior.models import cosine_similarity, toy_stack

ckpt = load_checkpoint(sys.argv[1] if len(sys.argv) > 1 else "toy_run/run/best.pt")
out = Path(sys.argv[2] if len(sys.argv) > 2 else "toy_samples")
stack = toy_stack()
gen, enc = stack.generator, stack.encoder

# %%
# Text to image: sample 16 candidate latents with guidance, render all of them
# and keep the one whose image embedding best matches the prompt.

results = {}
for prompt in stack.prompts:
    results[prompt] = text_to_image(SampleRequest(prompt, n_candidates=16, num_steps=64), ckpt, gen, enc)
    r = results[prompt]
    print(f"{prompt:28s} best {r.score:.3f}  median candidate {r.candidate_scores.median():.3f}")
save_png(image_grid(torch.stack([r.image for r in results.values()])), out / "prompts.png")

# %%
# Respacing samples on a subsequence of the timesteps. Same seed, fewer steps;
# on the toy stack the score barely moves.

prompt = stack.prompts[2]
for steps in (8, 32, 128, None):
    r = text_to_image(SampleRequest(prompt, n_candidates=16, num_steps=steps), ckpt, gen, enc)
    print(f"steps {steps or 'full':>5}: score {r.score:.3f}")

# %%
# Truncation pulls a latent toward the mean latent. Scores drop as psi shrinks
# because the mean image belongs to no concept in particular.

w = results[prompt].latent
text = enc.encode_text(prompt)
row = []
for psi in (1.0, 0.75, 0.5, 0.25, 0.0):
    image = gen.synthesize(truncate(w, psi, gen.mean_latent)[None])
    row.append(image[0])
    print(f"psi {psi:.2f}: score {float(cosine_similarity(enc.embed_images(image), text)):.3f}")
save_png(image_grid(torch.stack(row), nrow=5), out / "truncation.png")

# %%
# An edit direction is the difference of mean sampled latents for two prompt
# sets. Walking along it moves the image from one concept toward the other.

direction = find_direction(["frost"], ["ember"], 32, ckpt, enc, num_steps=64, name="ember-to-frost")
start = results[stack.prompts[4]].latent  # ember
row = []
for magnitude in (0.0, 1.0, 2.0, 3.0, 4.0):
    edited = apply_edit(start, direction, magnitude)
    image = gen.synthesize(edited[None])
    row.append(image[0])
    sims = enc.embed_images(image) @ enc.encode_text(["ember", "frost"]).T
    print(f"step {magnitude:.0f}: ember {float(sims[0, 0]):.3f}  frost {float(sims[0, 1]):.3f}")
save_png(image_grid(torch.stack(row), nrow=5), out / "edit.png")
direction.save(out / "ember_to_frost.json")

# %%
# Direct latent optimization is the slow upper reference. The toy encoder is
# differentiable, so gradient ascent reaches the anchor image almost exactly.

for prompt in stack.prompts[:3]:
    base = optimize_latent_baseline(prompt, gen, enc, iters=300)
    print(f"{prompt:28s} optimized {base.score:.3f}  prior {results[prompt].score:.3f}")
print("images written to", out)
