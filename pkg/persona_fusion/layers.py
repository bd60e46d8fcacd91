"""Layer primitives shared by every matcher: parameter containers, attention
normalisation, dropout, BiLSTM encoding, pooling and character convolution.
"""

from __future__ import annotations

from collections.abc import Iterator, Sequence
from dataclasses import dataclass

import numpy as np

from persona_fusion.autodiff import (
    Tensor,
    concat,
    masked_max,
    record_op,
    stack,
    take_rows,
    where,
)


class Module:
    """Container whose Tensor attributes with ``requires_grad`` are its parameters.

    Parameters are discovered by walking attributes in definition order, descending
    into nested modules, dicts and lists; names are dotted attribute paths.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            yield from _walk(value, f"{prefix}{name}")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return {name: tensor.values for name, tensor in self.named_parameters()}

    def load_parameters(self, arrays: dict[str, np.ndarray]) -> None:
        """Copy ``arrays`` into the parameters; names and shapes must match exactly."""
        params = self.parameters()
        missing = sorted(set(params) - set(arrays))
        unexpected = sorted(set(arrays) - set(params))
        if missing or unexpected:
            raise ValueError(f"parameter mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, tensor in params.items():
            source = np.asarray(arrays[name])
            if source.shape != tensor.shape:
                raise ValueError(f"shape mismatch for {name}: {source.shape} vs {tensor.shape}")
            tensor.values[...] = source


def _walk(value: object, path: str) -> Iterator[tuple[str, Tensor]]:
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(f"{path}.")
    elif isinstance(value, dict):
        for key, item in value.items():
            yield from _walk(item, f"{path}.{key}")
    elif isinstance(value, list | tuple):
        for i, item in enumerate(value):
            yield from _walk(item, f"{path}.{i}")


def glorot_uniform(
    rng: np.random.Generator, fan_in: int, fan_out: int, shape: tuple[int, ...], dtype: str = "float64"
) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def parameter(values: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


class Linear(Module):
    """Affine map ``x @ weight + bias``."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype: str = "float64"):
        self.weight = parameter(glorot_uniform(rng, in_dim, out_dim, (in_dim, out_dim), dtype))
        self.bias = parameter(np.zeros(out_dim, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


def masked_softmax(scores: Tensor, valid_mask: np.ndarray | None = None) -> Tensor:
    """Softmax along the last axis restricted to positions where ``valid_mask`` holds.

    Invalid positions get exactly zero weight and zero gradient. The mask must have
    the same last-axis length as ``scores`` and broadcast against it.

    Raises:
        ValueError: "empty attention support" if a row has no valid position, or on length mismatch
    """
    if valid_mask is None:
        valid = np.ones(scores.shape, dtype=bool)
    else:
        mask = np.asarray(valid_mask, dtype=bool)
        if mask.ndim > scores.ndim or mask.shape[-1] != scores.shape[-1]:
            raise ValueError(f"mask shape {mask.shape} does not match scores shape {scores.shape}")
        try:
            valid = np.broadcast_to(mask, scores.shape)
        except ValueError as e:
            raise ValueError(f"mask shape {mask.shape} does not match scores shape {scores.shape}") from e
    if not valid.any(axis=-1).all():
        raise ValueError("empty attention support")

    filled = np.where(valid, scores.values, -np.inf)
    shifted = filled - filled.max(axis=-1, keepdims=True)
    weights = np.where(valid, np.exp(shifted), 0.0)
    out = weights / weights.sum(axis=-1, keepdims=True)

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return record_op(out, (scores,), _backward, "masked_softmax")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate); evaluation mode is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a random generator")
    keep = rng.random(x.shape) >= rate
    return x * (keep / (1.0 - rate)).astype(x.dtype)


@dataclass
class Dropout:
    """Dropout settings threaded through a forward pass."""

    rate: float = 0.0
    rng: np.random.Generator | None = None
    training: bool = False

    def __call__(self, x: Tensor) -> Tensor:
        return dropout(x, self.rate, self.rng, self.training)


EVAL = Dropout()

GATES = ("input", "forget", "cell", "output")


class LstmParams(Module):
    """Parameters of a bidirectional LSTM.

    Each direction holds one ``(input_dim + hidden_dim, 4 * hidden_dim)`` weight whose
    column blocks are the input, forget, cell and output gates, each
    ``(input_dim + hidden_dim) x hidden_dim``, plus a ``4 * hidden_dim`` bias.
    """

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator, dtype: str = "float64"):
        if input_dim <= 0 or hidden_dim <= 0:
            raise ValueError("LSTM dimensions must be positive")
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.fw_weight, self.fw_bias = self._init_direction(rng, dtype)
        self.bw_weight, self.bw_bias = self._init_direction(rng, dtype)

    def _init_direction(self, rng: np.random.Generator, dtype: str) -> tuple[Tensor, Tensor]:
        rows, h = self.input_dim + self.hidden_dim, self.hidden_dim
        blocks = [glorot_uniform(rng, rows, h, (rows, h), dtype) for _ in GATES]
        bias = np.zeros(4 * h, dtype=dtype)
        bias[h : 2 * h] = 1.0
        return parameter(np.concatenate(blocks, axis=1)), parameter(bias)

    def gate_weight(self, direction: str, gate: str) -> np.ndarray:
        """View of one gate block, ``direction`` in {"fw", "bw"}."""
        weight = self.fw_weight if direction == "fw" else self.bw_weight
        k, h = GATES.index(gate), self.hidden_dim
        return weight.values[:, k * h : (k + 1) * h]


def _as_batch(inputs: Tensor, lengths: int | Sequence[int] | np.ndarray) -> tuple[Tensor, np.ndarray, bool]:
    single = inputs.ndim == 2
    if single:
        inputs = inputs.reshape(1, *inputs.shape)
    lengths = np.atleast_1d(np.asarray(lengths, dtype=np.int64))
    if lengths.shape[0] != inputs.shape[0]:
        raise ValueError(f"got {lengths.shape[0]} lengths for {inputs.shape[0]} sequences")
    if (lengths <= 0).any():
        raise ValueError("empty sequence")
    if (lengths > inputs.shape[1]).any():
        raise ValueError(f"length exceeds sequence capacity {inputs.shape[1]}")
    return inputs, lengths, single


def _run_direction(inputs: Tensor, mask: np.ndarray, weight: Tensor, bias: Tensor, reverse: bool) -> Tensor:
    batch, capacity, input_dim = inputs.shape
    h_dim = bias.shape[0] // 4
    steps = int(mask.sum(axis=1).max())
    zeros = np.zeros((batch, h_dim), dtype=inputs.dtype)
    h, c = Tensor(zeros), Tensor(zeros)
    outputs: list[Tensor] = [Tensor(zeros)] * capacity
    # [x_t ; h] @ W == x_t @ W[:input_dim] + h @ W[input_dim:]
    projected = inputs[:, :steps, :] @ weight[:input_dim] + bias
    recurrent = weight[input_dim:]
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        z = projected[:, t, :] + h @ recurrent
        i_gate = z[:, :h_dim].sigmoid()
        f_gate = z[:, h_dim : 2 * h_dim].sigmoid()
        g_cell = z[:, 2 * h_dim : 3 * h_dim].tanh()
        o_gate = z[:, 3 * h_dim :].sigmoid()
        c_new = f_gate * c + i_gate * g_cell
        h_new = o_gate * c_new.tanh()
        valid = mask[:, t : t + 1]
        c = where(valid, c_new, c)
        h = where(valid, h_new, h)
        outputs[t] = where(valid, h_new, zeros)
    return stack(outputs, axis=1)


def bilstm_encode(inputs: Tensor, lengths: int | Sequence[int] | np.ndarray, params: LstmParams) -> Tensor:
    """Run a bidirectional LSTM over padded sequences.

    Args:
        inputs: ``(batch, capacity, input_dim)`` or a single ``(capacity, input_dim)`` sequence
        lengths: Valid length per sequence; positions at or beyond it are padding
        params: Shared LSTM parameters

    Returns:
        ``(batch, capacity, 2 * hidden_dim)`` forward||backward states, zero at padding.
        The backward direction starts at position ``length - 1``.
    """
    batch_inputs, lengths, single = _as_batch(inputs, lengths)
    if batch_inputs.shape[-1] != params.input_dim:
        raise ValueError(f"input dim {batch_inputs.shape[-1]} != LSTM input dim {params.input_dim}")
    mask = np.arange(batch_inputs.shape[1])[None, :] < lengths[:, None]
    forward = _run_direction(batch_inputs, mask, params.fw_weight, params.fw_bias, reverse=False)
    backward = _run_direction(batch_inputs, mask, params.bw_weight, params.bw_bias, reverse=True)
    out = concat([forward, backward], axis=-1)
    return out[0] if single else out


def pool_max_last(hiddens: Tensor, lengths: int | Sequence[int] | np.ndarray) -> Tensor:
    """[componentwise max over valid positions ; state at position length-1] per sequence."""
    batch_hiddens, lengths, single = _as_batch(hiddens, lengths)
    mask = np.arange(batch_hiddens.shape[1])[None, :, None] < lengths[:, None, None]
    pooled_max = masked_max(batch_hiddens, mask, axis=1)
    last = batch_hiddens[np.arange(batch_hiddens.shape[0]), lengths - 1]
    out = concat([pooled_max, last], axis=-1)
    return out[0] if single else out


class CharConvParams(Module):
    """Character embeddings plus one bank of 1-D filters per window width."""

    def __init__(
        self,
        num_chars: int,
        char_dim: int,
        widths: Sequence[int],
        filters: int,
        rng: np.random.Generator,
        dtype: str = "float64",
    ):
        self.widths = tuple(int(w) for w in widths)
        self.filters = filters
        table = rng.normal(0.0, 0.1, size=(num_chars, char_dim)).astype(dtype)
        table[0] = 0.0
        self.char_table = parameter(table)
        self.weights = {
            f"w{w}": parameter(glorot_uniform(rng, w * char_dim, filters, (w * char_dim, filters), dtype))
            for w in self.widths
        }
        self.biases = {f"w{w}": parameter(np.zeros(filters, dtype=dtype)) for w in self.widths}

    @property
    def output_dim(self) -> int:
        return self.filters * len(self.widths)


def char_conv_embed(char_ids: np.ndarray, params: CharConvParams) -> Tensor:
    """Convolve character embeddings of each word and max-pool over time.

    Args:
        char_ids: Integer array ``(..., max_chars)``; 0 is padding
        params: Character table and filter banks

    Returns:
        ``(..., filters * len(widths))`` word vectors. Windows starting inside the word are
        pooled; words shorter than a width (including empty words) use the first window,
        so an all-padding word yields the bias vector.
    """
    ids = np.asarray(char_ids, dtype=np.int64)
    lead, capacity = ids.shape[:-1], ids.shape[-1]
    flat = ids.reshape(-1, capacity)
    widest = max(params.widths)
    if capacity < widest:
        flat = np.pad(flat, ((0, 0), (0, widest - capacity)))
        capacity = widest
    word_lengths = (flat != 0).sum(axis=-1)
    embedded = take_rows(params.char_table, flat) * (flat != 0)[..., None].astype(params.char_table.dtype)

    pooled = []
    for w in params.widths:
        windows = capacity - w + 1
        index = np.arange(windows)[:, None] + np.arange(w)[None, :]
        patches = embedded[:, index, :].reshape(flat.shape[0], windows, -1)
        conv = patches @ params.weights[f"w{w}"] + params.biases[f"w{w}"]
        valid = np.arange(windows)[None, :] < np.maximum(word_lengths - w + 1, 1)[:, None]
        pooled.append(masked_max(conv, valid[..., None], axis=1))
    return concat(pooled, axis=-1).reshape(*lead, params.output_dim)


class LayerNormParams(Module):
    def __init__(self, dim: int, dtype: str = "float64"):
        self.gamma = parameter(np.ones(dim, dtype=dtype))
        self.beta = parameter(np.zeros(dim, dtype=dtype))


def layer_norm(x: Tensor, params: LayerNormParams, eps: float = 1e-12) -> Tensor:
    centered = x - x.mean(axis=-1, keepdims=True)
    variance = (centered * centered).mean(axis=-1, keepdims=True)
    return centered * (variance + eps) ** -0.5 * params.gamma + params.beta
