import math

import numpy as np
import pytest

from mambo.core import (BackgroundSet, ConfigError, DegenerateVectorError, FeatureBundle,
                        ModelConfig, PromptSet, ShapeError, SimilarityMaps, log_softmax,
                        normalize, softmax)


def test_normalize_345():
    np.testing.assert_allclose(normalize([3, 4]), [0.6, 0.8], rtol=0, atol=1e-15)


def test_normalize_unit_vector_unchanged():
    assert normalize([1, 0, 0]).tolist() == [1.0, 0.0, 0.0]


@pytest.mark.parametrize("bad", [[0, 0], [np.nan, 1.0], [np.inf, 0.0]])
def test_normalize_rejects_degenerate(bad):
    with pytest.raises(DegenerateVectorError):
        normalize(bad)


def test_softmax_two_way_closed_form():
    e = math.e
    np.testing.assert_allclose(softmax([1.0, 0.0]), [e / (e + 1), 1 / (e + 1)], rtol=1e-15)


def test_softmax_is_shift_invariant_and_stable():
    z = np.array([1000.0, 999.0, 998.0])
    np.testing.assert_allclose(softmax(z), softmax(z - 1000.0), rtol=1e-15)
    np.testing.assert_allclose(np.exp(log_softmax(z)), softmax(z), rtol=1e-14)


def test_model_config_defaults_and_validation():
    cfg = ModelConfig(feature_dim=8, num_classes=3)
    assert cfg.topk == cfg.num_patches // 2 == 8
    assert (cfg.tau, cfg.ood_weight, cfg.sct_strength, cfg.rmcm_q) == (0.01, 0.2, 1.0, 10)
    assert (cfg.context_len, cfg.background_len) == (16, 64)
    for bad in (dict(tau=0), dict(topk=17), dict(rmcm_q=0), dict(ood_weight=-1),
                dict(sct_strength=-0.5), dict(context_len=0), dict(seed=-1)):
        with pytest.raises(ConfigError):
            ModelConfig(feature_dim=8, num_classes=3, **bad)


def test_feature_bundle_checks(rng):
    g = normalize(rng.normal(size=4))
    loc = rng.normal(size=(3, 4))
    with pytest.raises(DegenerateVectorError):
        FeatureBundle(g, loc)
    loc /= np.linalg.norm(loc, axis=1, keepdims=True)
    with pytest.raises(ShapeError):
        FeatureBundle(g, loc[:, :3])
    with pytest.raises(ShapeError):
        FeatureBundle(g, loc, 0, np.zeros(2, bool))
    b = FeatureBundle(g, loc, 1, [True, False, True])
    assert b.num_patches == 3 and b.dim == 4 and b.label == 1
    with pytest.raises(ValueError):
        b.local_features[0, 0] = 2.0
    with pytest.raises(ShapeError):
        b.check_grid(ModelConfig(feature_dim=4, num_classes=2, grid_h=2, grid_w=2))


def test_prompt_initialize_is_seeded_and_words_frozen():
    cfg = ModelConfig(feature_dim=4, num_classes=2, context_len=3, background_len=5, seed=9)
    words = np.eye(4)[:2]
    a, b = PromptSet.initialize(cfg, words), PromptSet.initialize(cfg, words)
    assert np.array_equal(a.context_tokens, b.context_tokens)
    assert a.context_tokens.shape == (3, 4) and a.background_tokens.shape == (5, 4)
    with pytest.raises(ValueError):
        a.class_word_embeddings[0, 0] = 1.0
    with pytest.raises(ShapeError):
        PromptSet.initialize(cfg, np.eye(4)[:3])
    c = a.copy()
    c.context_tokens += 1
    assert not np.array_equal(a.context_tokens, c.context_tokens)


def test_similarity_maps_default_refined_is_raw():
    m = SimilarityMaps(np.zeros((2, 2)), np.array([0.1, 0.2]), 0.5)
    assert m.refined_sim is m.background_sim


def test_background_set_mask():
    J = BackgroundSet(frozenset({3, 0}), "topk")
    assert J.mask(4).tolist() == [True, False, False, True]
    assert J.sorted_indices().tolist() == [0, 3]
