import csv
import json
import statistics
from fractions import Fraction

import pytest
import torch

from latentprior.data import load_dataset
from latentprior.errors import InvalidArgumentError
from latentprior.evaluation import (
    EvalReport,
    SweepRow,
    SweepTable,
    default_prompt_file,
    eval_suite,
    load_prompts,
    noise_sweep,
    random_latent_baseline,
    timing_benchmark,
    with_prefix,
)
from latentprior.models import PROMPT_PREFIX
from latentprior.network import PriorConfig
from latentprior.training import TrainConfig


class TestPrompts:
    def test_packaged_set(self):
        entries = load_prompts()
        assert len(entries) == 64
        assert sum(e.restricted for e in entries) == 19
        assert all(e.text.startswith(PROMPT_PREFIX + " ") for e in entries)
        assert len({e.text for e in entries}) == 64

    def test_packaged_file_is_versioned(self):
        doc = json.loads(default_prompt_file().read_text())
        assert doc["version"] == 1 and doc["prefix"] == PROMPT_PREFIX

    def test_prefix_not_doubled(self):
        assert with_prefix("a photograph of a cat") == "a photograph of a cat"
        assert with_prefix("  a cat ") == f"{PROMPT_PREFIX} a cat"

    def test_line_file(self, tmp_path):
        path = tmp_path / "prompts.txt"
        path.write_text("# header\namber\n\n  frost  \n")
        assert [e.text for e in load_prompts(path)] == [f"{PROMPT_PREFIX} amber", f"{PROMPT_PREFIX} frost"]

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load_prompts(tmp_path / "nope.json")

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.txt"
        path.write_text("# nothing\n")
        with pytest.raises(InvalidArgumentError):
            load_prompts(path)


class TestReport:
    def test_mean_is_arithmetic_mean(self):
        scores = [0.1, 0.2, 0.7, -0.3, 0.123456789]
        report = EvalReport([str(i) for i in range(5)], scores, {}, [0.0] * 5)
        exact = float(sum(Fraction(s) for s in scores) / len(scores))
        assert abs(report.mean_score - exact) < 1e-9

    def test_length_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            EvalReport(["a"], [0.1, 0.2], {}, [0.0])

    def test_toy_suite(self, trained_ckpt, stack, tmp_path):
        report = eval_suite(trained_ckpt, stack.generator, stack.encoder, stack.prompts, n_candidates=4,
                            num_steps=16)
        assert len(report.scores) == 8 and len(report.seconds_per_sample) == 8
        assert -1 <= report.mean_score <= 1
        assert report.mean_score == statistics.fmean(report.scores)
        assert report.config["n_candidates"] == 4 and report.hardware
        json_path, csv_path = report.write(tmp_path / "report")
        doc = json.loads(json_path.read_text())
        assert doc["mean_score"] == report.mean_score and len(doc["per_prompt"]) == 8
        with csv_path.open() as fh:
            rows = list(csv.DictReader(fh))
        assert [r["prompt"] for r in rows] == stack.prompts

    def test_suite_reads_prompt_file(self, trained_ckpt, stack, tmp_path):
        path = tmp_path / "p.txt"
        path.write_text("amber\nfrost\n")
        report = eval_suite(trained_ckpt, stack.generator, stack.encoder, path, n_candidates=2, num_steps=8)
        assert report.prompts == [f"{PROMPT_PREFIX} amber", f"{PROMPT_PREFIX} frost"]

    def test_suite_missing_file(self, trained_ckpt, stack, tmp_path):
        with pytest.raises(OSError):
            eval_suite(trained_ckpt, stack.generator, stack.encoder, tmp_path / "missing.txt")


class TestRandomBaseline:
    def test_matches_direct_scoring(self, stack):
        g = stack.generator
        z = torch.randn(50, g.z_dim, generator=torch.Generator().manual_seed(3))
        emb = stack.encoder.embed_images(g.synthesize(g.mapping(z)))
        expected = (emb @ stack.encoder.encode_text(stack.prompts).T).double().mean()
        got = random_latent_baseline(g, stack.encoder, stack.prompts, n=50, seed=3)
        assert got == pytest.approx(float(expected), abs=1e-6)

    def test_invalid(self, stack):
        with pytest.raises(InvalidArgumentError):
            random_latent_baseline(stack.generator, stack.encoder, [], n=10)


def _sweep_budget():
    return TrainConfig(iterations=20, batch_size=16, lr=1e-3, ema_beta=0.9, ema_update_every=1, validate_every=10,
                       val_samples_per_prompt=1, val_steps=8)


@pytest.fixture(scope="module")
def small_data(toy_data_dir):
    return load_dataset(toy_data_dir)


class TestSweep:
    def test_single_alpha(self, stack, small_data):
        table = noise_sweep([1.0], small_data, stack.generator, stack.encoder, PriorConfig.toy(), _sweep_budget(),
                            prompts=stack.prompts[:2])
        assert len(table.rows) == 1 and table.rows[0].alpha == 1.0

    def test_deterministic(self, stack, small_data, tmp_path):
        args = ([0.0, 1.0, 4.0], small_data, stack.generator, stack.encoder, PriorConfig.toy(), _sweep_budget())
        first = noise_sweep(*args, prompts=stack.prompts[:2], out_dir=tmp_path / "a")
        second = noise_sweep(*args, prompts=stack.prompts[:2], out_dir=tmp_path / "b")
        assert first.rows == second.rows
        assert (tmp_path / "a" / "sweep.csv").read_bytes() == (tmp_path / "b" / "sweep.csv").read_bytes()
        with (tmp_path / "a" / "sweep_plot.csv").open() as fh:
            assert [float(r["alpha"]) for r in csv.DictReader(fh)] == [0.0, 1.0, 4.0]
        assert (tmp_path / "a" / "alpha_4_seed_0").is_dir()

    def test_rejects_negative_alpha(self, stack, small_data):
        with pytest.raises(InvalidArgumentError):
            noise_sweep([-1.0], small_data, stack.generator, stack.encoder, PriorConfig.toy(), _sweep_budget())

    def test_table_means_and_format(self):
        table = SweepTable([SweepRow(0.0, 0, 0.1, 5), SweepRow(0.0, 1, 0.3, 5), SweepRow(1.0, 0, 0.4, 5),
                            SweepRow(1.0, 1, 0.2, 5)])
        assert table.mean_scores() == pytest.approx({0.0: 0.2, 1.0: 0.3})
        assert table.score(1.0, 1) == 0.2
        assert len(table.format().splitlines()) == 3
        with pytest.raises(KeyError):
            table.score(4.0, 0)


class TestTiming:
    def test_single_repeat(self, trained_ckpt, stack):
        res = timing_benchmark(trained_ckpt, stack.generator, stack.encoder, "amber", n_candidates=2, num_steps=4,
                               repeats=1)
        assert len(res.seconds) == 1 and res.median_seconds == res.seconds[0]
        assert res.num_steps == 4 and res.hardware

    def test_invalid_repeats(self, trained_ckpt, stack):
        with pytest.raises(InvalidArgumentError):
            timing_benchmark(trained_ckpt, stack.generator, stack.encoder, "amber", repeats=0)

    def test_monotone_in_steps_and_respacing_speedup(self, trained_ckpt, stack):
        def median(steps):
            return timing_benchmark(trained_ckpt, stack.generator, stack.encoder, "amber", num_steps=steps,
                                    repeats=3).median_seconds

        t16, t64, t1000 = median(16), median(64), median(None)
        assert t16 <= 1.05 * t64 and t64 <= 1.05 * t1000
        assert t1000 >= 10 * t16
