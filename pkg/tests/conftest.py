import pytest
import torch

from multivit2.config import load_config
from multivit2.data import synthesize_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_cfg():
    return load_config(overrides={
        "data": {"n": 20, "n_pretrain": 10}, "k": 2,
        "autoencoder": {"epochs": 1}, "diffusion": {"steps": 5}, "augment": {"min_subjects": 5},
        "classifier": {"epochs": 2},
    })


@pytest.fixture(scope="session")
def tiny_manifest(tiny_cfg):
    return synthesize_dataset(tiny_cfg.data.n, "additive", spec=tiny_cfg.data.synth_spec(), seed=3)


@pytest.fixture(scope="session")
def small_manifest():
    return synthesize_dataset(40, "additive", seed=11)


TINY_CONFIG = {
    "data": {"n": 20, "n_pretrain": 10}, "k": 2,
    "autoencoder": {"epochs": 1}, "diffusion": {"steps": 5}, "augment": {"min_subjects": 5},
    "classifier": {"epochs": 2},
}

PIPELINE = ["synth-data", "pretrain-ae", "train-ldm", "augment", "train", "evaluate", "saliency", "matrix"]


def run_pipeline(config_path, out, seed=0):
    """Run every CLI stage in order; returns {stage: exit code}."""
    from multivit2.cli import main

    codes = {}
    for stage in PIPELINE:
        extra = ["--slices", "3", "--max-subjects", "2"] if stage == "saliency" else []
        codes[stage] = main([stage, "--config", str(config_path), "--out", str(out), "--seed", str(seed), *extra])
    return codes


@pytest.fixture(scope="session")
def tiny_config_file(tmp_path_factory):
    import json

    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY_CONFIG))
    return path


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(acceptance_log.LINES):
            terminalreporter.write_line(acceptance_log.LINES[n])
