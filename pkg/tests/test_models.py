import numpy as np
import pytest
import torch

from latentprior.errors import CapabilityError, InvalidArgumentError, LoadError
from latentprior.models import (
    GENERATOR_REGISTRY,
    MODEL_DIR_ENV,
    TOY_CONCEPTS,
    ToyEncoder,
    ToyGenerator,
    cosine_similarity,
    load_encoder,
    load_generator,
    preprocess_image,
    require_differentiable,
    toy_gap_stack,
    toy_stack,
)


@pytest.fixture(scope="module")
def stack():
    return toy_stack()


class TestCosine:
    def test_identical_and_opposite(self):
        v = np.array([3.0, -1.0, 2.0])
        assert cosine_similarity(v, 2 * v) == pytest.approx(1.0, abs=1e-12)
        assert cosine_similarity(v, -v) == pytest.approx(-1.0, abs=1e-12)

    def test_torch_batch(self):
        a = torch.randn(5, 7)
        expected = torch.nn.functional.cosine_similarity(a, a.flip(0))
        torch.testing.assert_close(cosine_similarity(a, a.flip(0)), expected)

    def test_zero_vector(self):
        with pytest.raises(InvalidArgumentError):
            cosine_similarity(np.zeros(3), np.ones(3))
        with pytest.raises(InvalidArgumentError):
            cosine_similarity(torch.zeros(2, 3), torch.ones(2, 3))


def test_toy_dimensions(stack):
    gen, enc = stack.generator, stack.encoder
    assert (gen.z_dim, gen.latent_dim, gen.num_style_layers) == (8, 16, 3)
    assert enc.embed_dim == 16
    w = gen.mapping(torch.randn(4, 8))
    img = gen.synthesize(w)
    assert w.shape == (4, 16) and img.shape == (4, 1, 32, 32)
    assert img.min() >= -1 and img.max() <= 1


def test_toy_is_deterministic():
    a, b = ToyGenerator(seed=3), ToyGenerator(seed=3)
    for name, buf in a.named_buffers():
        assert torch.equal(buf, dict(b.named_buffers())[name])
    ea, eb = ToyEncoder(a, seed=3), ToyEncoder(b, seed=3)
    assert torch.equal(ea.text_embeds, eb.text_embeds)
    assert not torch.equal(ToyGenerator(seed=4).w1, a.w1)


def test_embeddings_are_unit_norm(stack):
    gen, enc = stack.generator, stack.encoder
    e = enc.embed_images(gen.synthesize(gen.mapping(torch.randn(64, 8))))
    torch.testing.assert_close(e.norm(dim=-1), torch.ones(64))
    torch.testing.assert_close(enc.encode_text(stack.prompts).norm(dim=-1), torch.ones(8))


def test_text_anchored_to_canonical_images(stack):
    gen, enc = stack.generator, stack.encoder
    for k, concept in enumerate(TOY_CONCEPTS):
        image = gen.synthesize(gen.mapping(enc.anchor_z[k:k + 1]))
        sims = cosine_similarity(enc.encode_text(concept), enc.embed_images(image))
        assert float(sims) == pytest.approx(1.0, abs=1e-6)
    cross = cosine_similarity(enc.text_embeds[:, None], enc.anchor_embeds[None])
    off_diag = cross[~torch.eye(8, dtype=torch.bool)]
    assert off_diag.max() < 0.99


def test_prompt_forms(stack):
    enc = stack.encoder
    assert torch.equal(enc.encode_text("A photograph of cobalt"), enc.encode_text("cobalt"))
    assert torch.equal(enc.encode_text("  Cobalt. "), enc.encode_text("cobalt"))
    with pytest.raises(InvalidArgumentError, match="concepts"):
        enc.encode_text("a red sports car")


def test_text_gap_moves_text_off_anchors():
    gen = ToyGenerator(0)
    enc = ToyEncoder(gen, text_gap=1.0)
    cos = (enc.text_embeds * enc.anchor_embeds).sum(-1)
    assert torch.all(cos < 0.99)


@pytest.fixture(scope="module")
def gap_enc():
    return toy_gap_stack().encoder


@pytest.fixture(scope="module")
def image_embeds(gap_enc):
    gen = toy_gap_stack().generator
    w = gen.mapping(torch.randn(4000, 8, generator=torch.Generator().manual_seed(2)))
    return gap_enc.embed_images(gen.synthesize(w)).double()


class TestSeparatedModalities:
    @pytest.fixture
    def enc(self, gap_enc):
        return gap_enc

    def test_minor_directions_have_reduced_spread(self, enc, image_embeds):
        s = torch.linalg.svdvals(image_embeds - image_embeds.mean(0))
        spread = s / s[0]
        assert float(spread[enc.image_rank - 1]) > 0.5
        assert float(spread[enc.image_rank]) < 0.15

    def test_gap_lies_along_minor_directions(self, enc, image_embeds):
        centered = image_embeds - image_embeds.mean(0)
        top = torch.linalg.svd(centered, full_matrices=False)[2][0]
        assert float((image_embeds @ enc.gap_direction.double()).std()) < 0.15 * float((centered @ top).std())

    def test_text_anchor_cosine(self, enc):
        cos = (enc.text_embeds * enc.anchor_embeds).sum(-1)
        assert torch.all((cos > 0.6) & (cos < 0.8))

    def test_presets_and_validation(self, enc):
        assert enc.name.startswith("toy(gap=1,rank=8")
        assert load_encoder("toy-gap") is enc
        with pytest.raises(InvalidArgumentError):
            ToyEncoder(ToyGenerator(0), image_rank=8, minor_scale=-1.0)
        with pytest.raises(InvalidArgumentError):
            ToyEncoder(ToyGenerator(0), image_rank=0)


def test_random_images_are_nearly_orthogonal_to_prompts(stack):
    gen, enc = stack.generator, stack.encoder
    e = enc.embed_images(gen.synthesize(gen.mapping(torch.randn(2000, 8, generator=torch.Generator().manual_seed(1)))))
    assert abs(float((e @ enc.text_embeds.T).mean())) < 0.05


def test_mean_latent_estimate(stack):
    gen = stack.generator
    torch.testing.assert_close(gen.mean_latent, gen.estimate_mean_latent())
    other = gen.estimate_mean_latent(seed=1)
    assert (other - gen.mean_latent).abs().max() < 0.05


class TestLayerBlocks:
    def test_groups_cover_layers(self, stack):
        assert stack.generator.layer_groups(3) == [range(0, 1), range(1, 2), range(2, 3)]
        assert stack.generator.layer_groups(1) == [range(0, 3)]

    def test_single_block_matches_shared_latent(self, stack):
        gen = stack.generator
        w = gen.mapping(torch.randn(3, 8))
        torch.testing.assert_close(gen.synthesize_latent(w, 1), gen.synthesize(w))
        stacked = w[:, None].expand(-1, 3, -1)
        torch.testing.assert_close(gen.synthesize(stacked), gen.synthesize(w))

    def test_three_blocks(self, stack):
        gen = stack.generator
        w = torch.randn(2, 48)
        stacked = gen.expand_blocks(w, 3)
        assert torch.equal(stacked[:, 1], w[:, 16:32])

    def test_too_many_blocks(self, stack):
        with pytest.raises(InvalidArgumentError):
            stack.generator.layer_groups(4)


class TestPreprocess:
    def test_range_mapping(self, stack):
        enc = stack.encoder
        lo = preprocess_image(-torch.ones(1, 32, 32), enc)
        hi = preprocess_image(torch.ones(1, 32, 32), enc)
        torch.testing.assert_close(lo, torch.full_like(lo, (0 - 0.5) / 0.35))
        torch.testing.assert_close(hi, torch.full_like(hi, (1 - 0.5) / 0.35))

    def test_resizes_to_encoder_input(self, stack):
        out = preprocess_image(torch.zeros(2, 1, 64, 48), stack.encoder)
        assert out.shape == (2, 1, 32, 32)

    def test_wrong_channels(self, stack):
        with pytest.raises(InvalidArgumentError):
            preprocess_image(torch.zeros(2, 3, 32, 32), stack.encoder)


def test_toy_encoder_is_differentiable(stack):
    gen, enc = stack.generator, stack.encoder
    require_differentiable(gen, enc)
    w = gen.mean_latent.clone()[None].requires_grad_(True)
    score = cosine_similarity(enc.embed_images(gen.synthesize(w)), enc.encode_text("amber"))
    score.sum().backward()
    assert torch.isfinite(w.grad).all() and w.grad.abs().sum() > 0


def test_non_differentiable_pair_is_rejected(stack):
    class Frozen:
        differentiable = False
        name = "opaque"

    with pytest.raises(CapabilityError):
        require_differentiable(Frozen(), stack.encoder)


class TestLoading:
    def test_toy(self):
        assert load_generator("toy").latent_dim == 16
        assert load_encoder("toy").embed_dim == 16

    def test_registered_without_weights(self, tmp_path, monkeypatch):
        monkeypatch.setenv(MODEL_DIR_ENV, str(tmp_path))
        with pytest.raises(LoadError, match=MODEL_DIR_ENV):
            load_generator("stylegan2-ffhq-1024")

    def test_unknown(self):
        with pytest.raises(LoadError, match="unknown generator"):
            load_generator("no-such-model")
        with pytest.raises(LoadError, match="unknown encoder"):
            load_encoder("no-such-encoder")

    def test_registry_dimensions(self):
        info = GENERATOR_REGISTRY["stylegan2-ffhq-1024"]
        assert (info.latent_dim, info.num_style_layers) == (512, 18)
