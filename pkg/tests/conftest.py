import time

import numpy as np
import pytest

from tabmia.attack import AttackConfig
from tabmia.cli import main
from tabmia.config import ChallengeSpec, DiffusionConfig, RunConfig, bundled_config
from tabmia.numerics import MlpParams


def make_params(sizes, weights, biases, activation="relu", head="linear"):
    return MlpParams(
        list(sizes),
        [np.asarray(w, dtype=np.float64) for w in weights],
        [np.asarray(b, dtype=np.float64) for b in biases],
        activation,
        head,
    )


def small_config(out, train=2, dev=1, final=1, **diffusion) -> RunConfig:
    """A 2/1/1 fleet that trains in seconds; fine for contract checks, useless for accuracy."""
    diff = dict(T=200, steps=150, batch=16, hidden=[16], embed_dim=4)
    diff.update(diffusion)
    return RunConfig(
        master_seed=7,
        out=str(out),
        baselines=True,
        challenge=ChallengeSpec(train_phase=train, dev_phase=dev, final_phase=final, members_per_model=12,
                                challenge_queries_per_model=8, train_challenge_queries_per_model=4),
        diffusion=DiffusionConfig(**diff),
        attack=AttackConfig(n_eps=3, timesteps=[5, 20], epochs=20, hidden_widths=[8], lrs=[1e-3], eval_every=10,
                            secmi_t=20, secmi_stride=5, best_noise_candidates=5, best_noise_timesteps=[10],
                            naive_timesteps=[5, 199]),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def _run_tiny(out, **overrides):
    """Run the bundled tiny experiment through the CLI; returns (root, seconds)."""
    cfg = bundled_config("tiny")
    for key, value in overrides.items():
        section, name = key.split("__")
        setattr(getattr(cfg, section), name, value)
    path = out.parent / f"{out.name}.json"
    path.write_text(cfg.to_json())
    start = time.perf_counter()
    code = main(["run-challenge", "--config", str(path), "--out", str(out)])
    assert code == 0, f"run-challenge exited {code}"
    return out, time.perf_counter() - start


@pytest.fixture(scope="session")
def tiny_experiment(tmp_path_factory):
    return _run_tiny(tmp_path_factory.mktemp("tiny") / "run_a")


@pytest.fixture(scope="session")
def tiny_rerun(tmp_path_factory):
    return _run_tiny(tmp_path_factory.mktemp("tiny_again") / "run_b")


@pytest.fixture(scope="session")
def tiny_untrained(tmp_path_factory):
    """Same fleet with every target trained for zero steps (random denoisers)."""
    return _run_tiny(tmp_path_factory.mktemp("tiny_untrained") / "run_z", diffusion__steps=0)
