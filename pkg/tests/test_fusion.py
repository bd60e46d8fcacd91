"""Tests for persona fusion strategies."""

import numpy as np
import pytest

from persona_fusion.autodiff import Tensor, gradient_check
from persona_fusion.fusion import (
    FusionParams,
    fuse,
    fuse_context,
    fuse_context_response,
    fuse_none,
    fuse_response,
)
from persona_fusion.layers import Linear
from persona_fusion.models import Strategy

MASK = np.array([True, True, True, False, False])


@pytest.fixture
def rng():
    return np.random.default_rng(3)


@pytest.fixture
def profiles(rng):
    """Five 4-wide profiles, the last two padding (zero rows)."""
    values = rng.normal(size=(5, 4))
    values[3:] = 0.0
    return Tensor(values, requires_grad=True)


def test_fuse_response_matches_manual(profiles, rng):
    """Test RA against the closed form softmax(r . p_n) weighted sum."""
    response = Tensor(rng.normal(size=4))
    fused, weights = fuse_response(profiles, response, MASK)

    alphas = profiles.values[:3] @ response.values
    expected = np.exp(alphas - alphas.max()) / np.exp(alphas - alphas.max()).sum()
    np.testing.assert_allclose(weights.as_array()[:3], expected)
    np.testing.assert_allclose(fused.values, expected @ profiles.values[:3])
    assert weights.strategy == Strategy.RA


@pytest.mark.parametrize("strategy", list(Strategy))
def test_padding_weighs_zero(strategy, profiles, rng):
    """Test that padded profiles get exactly zero weight under every strategy."""
    params = FusionParams(strategy, 4, 4, 4, rng)
    responses = Tensor(rng.normal(size=(3, 4)))
    fused, weights = fuse(params, profiles, MASK, Tensor(rng.normal(size=4)), responses)

    matrix = np.atleast_2d(weights.as_array())
    assert fused.shape == (3, 4)
    assert np.all(matrix[:, 3:] == 0.0)
    np.testing.assert_allclose(matrix.sum(axis=-1), 1.0)


@pytest.mark.parametrize("strategy", list(Strategy))
def test_fusion_is_permutation_equivariant(strategy, profiles, rng):
    """Test that reordering the real profiles leaves the fused vector and permutes the weights alike."""
    params = FusionParams(strategy, 4, 4, 4, rng)
    context = Tensor(rng.normal(size=4))
    responses = Tensor(rng.normal(size=(3, 4)))
    fused, weights = fuse(params, profiles, MASK, context, responses)
    base = np.atleast_2d(weights.as_array())

    for _ in range(1000):
        order = np.concatenate([rng.permutation(3), [3, 4]])
        shuffled, shuffled_weights = fuse(params, Tensor(profiles.values[order]), MASK, context, responses)

        np.testing.assert_allclose(shuffled.values, fused.values, atol=1e-12)
        np.testing.assert_allclose(np.atleast_2d(shuffled_weights.as_array()), base[:, order], atol=1e-12)


def test_na_ignores_context_and_response(profiles, rng):
    """Test that NA weights do not depend on the query."""
    params = FusionParams(Strategy.NA, 4, 4, 4, rng)
    first = fuse(params, profiles, MASK, Tensor(rng.normal(size=4)), Tensor(rng.normal(size=(2, 4))))[1]
    second = fuse(params, profiles, MASK, Tensor(rng.normal(size=4)), Tensor(rng.normal(size=(2, 4))))[1]

    np.testing.assert_array_equal(first.as_array(), second.as_array())


def test_ca_shared_across_candidates(profiles, rng):
    """Test that CA gives every candidate the same fused persona."""
    params = FusionParams(Strategy.CA, 4, 4, 4, rng)
    fused, _ = fuse(params, profiles, MASK, Tensor(rng.normal(size=4)), Tensor(rng.normal(size=(3, 4))))

    np.testing.assert_allclose(fused.values[0], fused.values[2])


def test_ra_differs_per_candidate(profiles, rng):
    """Test that RA weights depend on the candidate."""
    params = FusionParams(Strategy.RA, 4, 4, 4, rng)
    _, weights = fuse(params, profiles, MASK, Tensor(rng.normal(size=4)), Tensor(rng.normal(size=(2, 4)) * 3))

    assert weights.as_array().shape == (2, 5)
    assert not np.allclose(weights.as_array()[0], weights.as_array()[1])


def test_projection_when_widths_differ(rng):
    """Test that CA/RA project a query of another width into the profile space."""
    assert FusionParams(Strategy.CA, 4, 6, 4, rng).context_proj is not None
    assert FusionParams(Strategy.RA, 4, 4, 4, rng).response_proj is None
    assert FusionParams(Strategy.CRA, 4, 6, 4, rng).joint.weight.shape == (10, 4)


def test_single_profile_gets_full_weight(rng):
    """Test that one valid profile is returned unchanged."""
    profiles = Tensor(rng.normal(size=(2, 3)))
    fused, weights = fuse_context(profiles, Tensor(rng.normal(size=3)), np.array([True, False]))

    np.testing.assert_allclose(weights.as_array(), [1.0, 0.0])
    np.testing.assert_allclose(fused.values, profiles.values[0])


def test_empty_persona(profiles, rng):
    """Test that fusion over no valid profile raises."""
    with pytest.raises(ValueError, match="empty persona"):
        fuse_none(profiles, Linear(4, 1, rng), np.zeros(5, dtype=bool))


def test_query_dimension_mismatch(profiles, rng):
    """Test that a query of the wrong width raises."""
    with pytest.raises(ValueError, match="does not match profile dimension"):
        fuse_response(profiles, Tensor(rng.normal(size=3)), MASK)


def test_cra_gradient(profiles, rng):
    """Test CRA gradients against central differences."""
    params = Linear(8, 4, rng)
    context = Tensor(rng.normal(size=4), requires_grad=True)
    responses = Tensor(rng.normal(size=(2, 4)), requires_grad=True)

    def loss():
        fused, _ = fuse_context_response(profiles, context, responses, params, MASK)
        return (fused * fused).sum()

    assert gradient_check(loss, [profiles, context, responses, params.weight]) < 1e-6
