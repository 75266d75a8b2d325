import sys
import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from asymprune.model import ModelConfig, init_model
from asymprune.tokens import TokenSequence

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_model():
    return init_model(ModelConfig(num_layers=2, num_heads=2, hidden_dim=16, ffn_dim=32, vocab_size=32,
                                  max_positions=128, init_seed=3, qk_std=0.5))


@pytest.fixture(scope="session")
def toy_model():
    return init_model(ModelConfig(qk_std=0.2, tie_qk=True, attn_blind_dims=32))


def random_sequence(model, rng, n_vision, n_text, start=0, turn=0):
    d = model.config.hidden_dim
    vision = rng.normal(size=(n_vision, d)).astype(np.float32) * 0.2
    ids = rng.integers(0, model.config.vocab_size, n_text)
    return TokenSequence.from_parts(vision, ids, start, turn)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
