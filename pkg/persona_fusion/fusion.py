"""Persona fusion: attention-weighted aggregation of profile embeddings.

Each strategy scores every profile, normalises the scores with a masked softmax
and returns the weighted sum of profiles. Queries may be a single vector or one
row per candidate; the result has the same leading shape as the query.

    NA   alpha_n = w . p_n + b
    CA   alpha_n = c . p_n
    RA   alpha_n = r . p_n
    CRA  alpha_n = (W [c ; r] + b) . p_n
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from persona_fusion.autodiff import Tensor, concat
from persona_fusion.layers import Linear, Module, masked_softmax
from persona_fusion.models import Strategy


@dataclass
class FusionWeights:
    """Raw scores and normalised weights of one fusion; padded profiles weigh exactly 0."""

    alphas: Tensor
    weights: Tensor
    strategy: Strategy
    mask: np.ndarray

    def as_array(self) -> np.ndarray:
        return self.weights.values


def _check_profiles(profiles: Tensor, mask: np.ndarray | None) -> np.ndarray:
    if profiles.ndim != 2:
        raise ValueError(f"profiles must be (n, d), got shape {profiles.shape}")
    valid = np.ones(profiles.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if valid.shape != (profiles.shape[0],):
        raise ValueError(f"mask shape {valid.shape} does not match {profiles.shape[0]} profiles")
    if not valid.any():
        raise ValueError("empty persona")
    return valid


def _check_query(query: Tensor, dim: int, label: str) -> None:
    if query.shape[-1] != dim:
        raise ValueError(f"{label} dimension {query.shape[-1]} does not match profile dimension {dim}")


def _attend(alphas: Tensor, profiles: Tensor, valid: np.ndarray, strategy: Strategy) -> tuple[Tensor, FusionWeights]:
    weights = masked_softmax(alphas, valid)
    return weights @ profiles, FusionWeights(alphas=alphas, weights=weights, strategy=strategy, mask=valid)


def fuse_none(profiles: Tensor, params: Linear, mask: np.ndarray | None = None) -> tuple[Tensor, FusionWeights]:
    """Context- and response-free fusion scored by a learned vector.

    Args:
        profiles: ``(n, d)`` profile aggregates
        params: ``d -> 1`` scoring layer
        mask: True for real profiles

    Raises:
        ValueError: "empty persona" when no profile is valid
    """
    valid = _check_profiles(profiles, mask)
    alphas = (profiles @ params.weight + params.bias).reshape(profiles.shape[0])
    return _attend(alphas, profiles, valid, Strategy.NA)


def fuse_context(
    profiles: Tensor, context: Tensor, mask: np.ndarray | None = None
) -> tuple[Tensor, FusionWeights]:
    """Fusion scored by similarity with the context aggregate, ``(d,)`` or ``(m, d)``."""
    valid = _check_profiles(profiles, mask)
    _check_query(context, profiles.shape[1], "context")
    return _attend(context @ profiles.T, profiles, valid, Strategy.CA)


def fuse_response(
    profiles: Tensor, response: Tensor, mask: np.ndarray | None = None
) -> tuple[Tensor, FusionWeights]:
    """Fusion scored by similarity with the response aggregate, ``(d,)`` or one row per candidate."""
    valid = _check_profiles(profiles, mask)
    _check_query(response, profiles.shape[1], "response")
    return _attend(response @ profiles.T, profiles, valid, Strategy.RA)


def fuse_context_response(
    profiles: Tensor, context: Tensor, response: Tensor, params: Linear, mask: np.ndarray | None = None
) -> tuple[Tensor, FusionWeights]:
    """Fusion scored by a linear map of [context ; response] into the profile space.

    ``context`` is broadcast against ``response`` when it has fewer rows.
    """
    valid = _check_profiles(profiles, mask)
    if response.ndim == 2 and context.ndim == 1:
        context = Tensor(np.ones((response.shape[0], 1), dtype=context.dtype)) @ context.reshape(1, -1)
    joint = concat([context, response], axis=-1)
    if joint.shape[-1] != params.weight.shape[0]:
        raise ValueError(f"[context ; response] dimension {joint.shape[-1]} != {params.weight.shape[0]}")
    query = params(joint)
    _check_query(query, profiles.shape[1], "projected query")
    return _attend(query @ profiles.T, profiles, valid, Strategy.CRA)


class FusionParams(Module):
    """Learned parts of a fusion strategy.

    CA and RA use a raw dot product; when the query width differs from the profile
    width a linear projection aligns them first.
    """

    def __init__(
        self,
        strategy: Strategy,
        profile_dim: int,
        context_dim: int,
        response_dim: int,
        rng: np.random.Generator,
        dtype: str = "float64",
    ):
        self.strategy = Strategy(strategy)
        self.score: Linear | None = None
        self.context_proj: Linear | None = None
        self.response_proj: Linear | None = None
        self.joint: Linear | None = None
        if self.strategy == Strategy.NA:
            self.score = Linear(profile_dim, 1, rng, dtype)
        elif self.strategy == Strategy.CA and context_dim != profile_dim:
            self.context_proj = Linear(context_dim, profile_dim, rng, dtype)
        elif self.strategy == Strategy.RA and response_dim != profile_dim:
            self.response_proj = Linear(response_dim, profile_dim, rng, dtype)
        elif self.strategy == Strategy.CRA:
            self.joint = Linear(context_dim + response_dim, profile_dim, rng, dtype)


def fuse(
    params: FusionParams,
    profiles: Tensor,
    mask: np.ndarray,
    context: Tensor,
    responses: Tensor,
) -> tuple[Tensor, FusionWeights]:
    """Apply the configured strategy and return one persona vector per candidate.

    Args:
        params: Strategy and its parameters
        profiles: ``(n, d)`` profile aggregates, padded rows masked out by ``mask``
        mask: True for real profiles
        context: ``(dc,)`` context aggregate, or ``(C, dc)`` when it depends on the candidate
        responses: ``(C, dr)`` candidate aggregates

    Returns:
        ``(C, d)`` fused personas and the fusion weights (``(n,)`` or ``(C, n)``)
    """
    count = responses.shape[0]
    if params.strategy == Strategy.NA:
        fused, weights = fuse_none(profiles, params.score, mask)
    elif params.strategy == Strategy.CA:
        query = params.context_proj(context) if params.context_proj is not None else context
        fused, weights = fuse_context(profiles, query, mask)
    elif params.strategy == Strategy.RA:
        query = params.response_proj(responses) if params.response_proj is not None else responses
        fused, weights = fuse_response(profiles, query, mask)
    else:
        fused, weights = fuse_context_response(profiles, context, responses, params.joint, mask)
    if fused.ndim == 1:
        fused = Tensor(np.ones((count, 1), dtype=fused.dtype)) @ fused.reshape(1, -1)
    return fused, weights
