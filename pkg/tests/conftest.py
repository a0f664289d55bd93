import pytest
import torch

from latentprior.checkpoint import load_checkpoint
from latentprior.data import generate_dataset, load_dataset
from latentprior.models import toy_stack
from latentprior.network import PriorConfig
from latentprior.training import TrainConfig, train

torch.set_num_threads(1)

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_lines():
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def stack():
    return toy_stack()


@pytest.fixture(scope="session")
def toy_data_dir(stack, tmp_path_factory):
    out = tmp_path_factory.mktemp("toy_data")
    generate_dataset(stack.generator, stack.encoder, 4000, seed=7, out_path=out)
    return out


@pytest.fixture(scope="session")
def trained_ckpt_path(stack, toy_data_dir, tmp_path_factory):
    """A briefly trained toy prior shared by the inference, evaluation and CLI tests."""
    out = tmp_path_factory.mktemp("toy_run")
    cfg = TrainConfig(iterations=3000, batch_size=64, lr=1e-3, ema_beta=0.995, validate_every=3000,
                      val_samples_per_prompt=2, val_steps=50, seed=0)
    result = train(PriorConfig.toy(), cfg, load_dataset(toy_data_dir), stack.generator, stack.encoder, out,
                   prompts=stack.prompts, log_every=0,
                   provenance={"models": {"generator": "toy", "encoder": "toy", "model_seed": 0, "text_gap": 0.0}})
    return result.best_path


@pytest.fixture(scope="session")
def trained_ckpt(trained_ckpt_path):
    return load_checkpoint(trained_ckpt_path)
