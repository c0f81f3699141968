import numpy as np
import pytest

from mambo.core import FeatureBundle, ModelConfig, PromptSet
from mambo.encoders import FrozenTextEncoder


def unit_rows(rng, n, d):
    a = rng.normal(size=(n, d))
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def random_bundle(rng, d, num_patches, label=None, mask=None):
    g = unit_rows(rng, 1, d)[0]
    return FeatureBundle(g, unit_rows(rng, num_patches, d), label, mask)


def small_problem(seed, d=6, m=3, grid=(2, 2), n_ctx=2, n_bg=3, batch=3, nonlinearity="identity",
                  offset=None, **cfg_kw):
    """Random config, prompt, encoder and labelled batch for gradient work."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(feature_dim=d, num_classes=m, grid_h=grid[0], grid_w=grid[1],
                      context_len=n_ctx, background_len=n_bg, seed=seed,
                      **cfg_kw)
    enc = FrozenTextEncoder.from_seed(d, seed, nonlinearity, offset=offset)
    prompt = PromptSet(rng.normal(0, 0.5, (n_ctx, d)), rng.normal(0, 1.0, (m, d)),
                       rng.normal(0, 0.5, (n_bg, d)))
    data = [random_bundle(rng, d, cfg.num_patches, label=int(rng.integers(m)))
            for _ in range(batch)]
    return cfg, enc, prompt, data


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = {}


def record_criterion(number, passed, detail):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})"
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
