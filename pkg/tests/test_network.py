import numpy as np
import pytest
import torch

from latentprior.diffusion import make_cosine_schedule
from latentprior.errors import InvalidArgumentError, NumericFailureError
from latentprior.network import PriorConfig, build_prior, drop_condition, sinusoidal_embedding
from latentprior.training import prior_loss


@pytest.fixture(scope="module")
def toy_net():
    return build_prior(PriorConfig.toy(), init_seed=3).eval()


def test_paper_config_parameter_count():
    count = build_prior(PriorConfig()).parameter_count
    assert abs(count / 48.9e6 - 1) < 0.02


def test_toy_config_is_small(toy_net):
    assert toy_net.parameter_count < 1_000_000


def test_same_seed_same_weights():
    a = build_prior(PriorConfig.toy(), 5).state_dict()
    b = build_prior(PriorConfig.toy(), 5).state_dict()
    c = build_prior(PriorConfig.toy(), 6).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not all(torch.equal(a[k], c[k]) for k in a)


def test_build_does_not_touch_global_rng():
    torch.manual_seed(0)
    expected = torch.rand(3)
    torch.manual_seed(0)
    build_prior(PriorConfig.toy(), 9)
    assert torch.equal(torch.rand(3), expected)


@pytest.mark.parametrize("kw", [dict(depth=0), dict(heads=-1), dict(cond_drop_prob=1.5), dict(latent_dim=2.5),
                                dict(predict_x_start=False)])
def test_invalid_config(kw):
    with pytest.raises(InvalidArgumentError):
        PriorConfig.toy(**kw)


@pytest.mark.parametrize("blocks", [1, 3])
def test_output_dimension(blocks):
    cfg = PriorConfig.toy(num_latent_blocks=blocks)
    net = build_prior(cfg)
    out = net(torch.randn(5, cfg.flat_dim), torch.randint(0, 1000, (5,)), torch.randn(5, 16), torch.ones(5, dtype=torch.bool))
    assert out.shape == (5, blocks * 16)
    single = net(torch.randn(cfg.flat_dim), 10, torch.randn(16), True)
    assert single.shape == (blocks * 16,)


def test_token_order(toy_net):
    x = torch.randn(2, 16)
    t = torch.tensor([3, 700])
    cond = torch.randn(2, 16)
    seq = toy_net.tokens(x, t, cond, torch.ones(2, dtype=torch.bool)) - toy_net.pos_emb
    torch.testing.assert_close(seq[:, 0], toy_net.cond_proj(cond))
    torch.testing.assert_close(seq[:, 1], toy_net.time_proj(sinusoidal_embedding(t, 64).float()))
    torch.testing.assert_close(seq[:, 2], toy_net.latent_proj(x))
    torch.testing.assert_close(seq[:, 3], toy_net.learned_query.expand(2, -1))


def test_causal_readout_ignores_nothing_before_query(toy_net):
    # every input position precedes the query, so each one must influence the output
    x, cond = torch.randn(1, 16), torch.randn(1, 16)
    base = toy_net(x, 5, cond, True)
    assert not torch.allclose(base, toy_net(x + 0.1, 5, cond, True))
    assert not torch.allclose(base, toy_net(x, 600, cond, True))
    assert not torch.allclose(base, toy_net(x, 5, cond + 0.1, True))


def test_null_condition_is_zero_substitution(toy_net):
    x, t, cond = torch.randn(4, 16), torch.randint(0, 1000, (4,)), torch.randn(4, 16)
    dropped = toy_net(x, t, cond, torch.zeros(4, dtype=torch.bool))
    zero = toy_net(x, t, torch.zeros(4, 16), torch.ones(4, dtype=torch.bool))
    assert torch.equal(dropped, zero)


def test_deterministic_forward(toy_net):
    x, cond = torch.randn(3, 16), torch.randn(3, 16)
    assert torch.equal(toy_net(x, 4, cond, True), toy_net(x, 4, cond, True))


def test_condition_sensitivity_follows_mask():
    net = build_prior(PriorConfig.toy(), 1).double().eval()
    x = torch.randn(1, 16, dtype=torch.float64)
    cond = torch.randn(1, 16, dtype=torch.float64)
    h = 1e-6

    def jacobian_column_norms(mask):
        cols = []
        for i in range(16):
            e = torch.zeros_like(cond)
            e[0, i] = h
            diff = net(x, 100, cond + e, mask) - net(x, 100, cond - e, mask)
            cols.append((diff / (2 * h)).norm().item())
        return np.array(cols)

    assert jacobian_column_norms(True).max() > 1e-3
    assert np.all(jacobian_column_norms(False) == 0.0)


def test_rejects_non_finite(toy_net):
    x = torch.randn(2, 16)
    x[0, 0] = float("inf")
    with pytest.raises(NumericFailureError):
        toy_net(x, 1, torch.randn(2, 16), True)


def test_rejects_wrong_width(toy_net):
    with pytest.raises(InvalidArgumentError):
        toy_net(torch.randn(2, 15), 1, torch.randn(2, 16), True)


class TestDropCondition:
    def test_never(self):
        cond = torch.randn(100, 8)
        out, keep = drop_condition(cond, 0.0)
        assert keep.all() and torch.equal(out, cond)

    def test_always(self):
        out, keep = drop_condition(torch.randn(100, 8), 1.0)
        assert not keep.any() and torch.equal(out, torch.zeros(100, 8))

    def test_rate(self):
        gen = torch.Generator().manual_seed(0)
        _, keep = drop_condition(torch.ones(100_000, 1), 0.2, gen)
        assert abs((~keep).float().mean().item() - 0.2) <= 0.005

    def test_single_vector(self):
        v = torch.randn(8)
        out, keep = drop_condition(v, 0.0)
        assert keep is True and torch.equal(out, v)

    def test_bad_probability(self):
        with pytest.raises(InvalidArgumentError):
            drop_condition(torch.zeros(2, 2), -0.1)


def relative_error(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def test_gradient_matches_finite_differences():
    torch.manual_seed(0)
    net = build_prior(PriorConfig.toy(), 2).double()
    sched = make_cosine_schedule(1000)
    n = 8
    inputs = dict(
        x0=torch.randn(n, 16, dtype=torch.float64),
        t=torch.randint(0, 1000, (n,)),
        noise=torch.randn(n, 16, dtype=torch.float64),
        cond=torch.nn.functional.normalize(torch.randn(n, 16, dtype=torch.float64), dim=-1),
        cond_mask=torch.tensor([True, False] * (n // 2)),
    )
    prior_loss(net, schedule=sched, **inputs).backward()
    params = dict(net.named_parameters())
    rng = np.random.default_rng(0)
    names = list(params)
    errors = []
    for _ in range(100):
        name = names[rng.integers(len(names))]
        p = params[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        analytic = p.grad[idx].item()
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + 1e-4
            up = prior_loss(net, schedule=sched, **inputs).item()
            p[idx] = orig - 1e-4
            down = prior_loss(net, schedule=sched, **inputs).item()
            p[idx] = orig
        errors.append(relative_error(analytic, (up - down) / 2e-4))
    assert max(errors) < 1e-3
