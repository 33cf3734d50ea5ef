"""Conditioning operators: context encoders producing a fixed-size embedding.

Six variants share one interface: ``encode(tape, context) -> (batch, out)``.
Identity and MLP take a flat feature vector per row (the temporal task feeds
a single time stamp). The sequence variants (RNN, GRU, LSTM, transformer)
take batches of observation sequences shaped (batch, steps, features), where
the per-step features are (obs_x, obs_y, time). Sequence variants reduce a
whole sequence to one embedding: recurrent nets project the final hidden
state, the transformer runs its decoder for a single step on a zero
target token attending over the encoded sequence.

Weight shapes never depend on sequence length, so one module handles
sequences of any length >= 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import LayerNorm, Linear, MLP, Module, Parameter, bind, uniform_init

SEQUENCE_VARIANTS = ("rnn", "gru", "lstm", "transformer")
FLAT_VARIANTS = ("identity", "mlp")
VARIANTS = FLAT_VARIANTS + SEQUENCE_VARIANTS


@dataclass(frozen=True)
class ConditionerSpec:
    """Architecture tag plus dimensions for one conditioning operator."""

    variant: str
    input_features: int = 3
    hidden_features: int = 4
    output_features: int = 4
    # transformer extras
    model_dim: int = 16
    n_heads: int = 2
    n_encoder_layers: int = 1
    n_decoder_layers: int = 1
    ff_width: int = 32

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown conditioner variant {self.variant!r}; known: {VARIANTS}")
        if self.variant == "identity" and self.output_features != self.input_features:
            raise ValueError(
                f"identity conditioner requires output_features == input_features, "
                f"got {self.output_features} != {self.input_features}")
        if self.variant == "transformer" and self.model_dim % self.n_heads != 0:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")


@dataclass
class ObservationSequence:
    """Ordered (obs_x, obs_y, time) triples with strictly increasing time."""

    triples: list[tuple[float, float, float]]

    def __post_init__(self):
        if len(self.triples) < 1:
            raise ValueError("observation sequence must contain at least one triple")
        times = [t for _, _, t in self.triples]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("observation times must be strictly increasing")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.triples, dtype=np.float64).reshape(1, len(self.triples), 3)


def as_feature_rows(context, input_features: int) -> np.ndarray:
    """Coerce a flat context (scalar, vector, or row batch) to (batch, features)."""
    arr = np.asarray(context, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ad.ShapeError(f"flat context must be at most 2-d, got shape {arr.shape}")
    if arr.shape[1] != input_features:
        raise ad.ShapeError(
            f"context has {arr.shape[1]} features, conditioner expects {input_features}")
    return arr


def as_sequence_batch(context, input_features: int) -> np.ndarray:
    """Coerce a sequence context to (batch, steps, features); rejects empty sequences."""
    if isinstance(context, ObservationSequence):
        arr = context.as_array()
    else:
        arr = np.asarray(context, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None, :, :]
        if arr.ndim != 3:
            raise ad.ShapeError(
                f"sequence context must be (steps, features) or (batch, steps, features), "
                f"got shape {arr.shape}")
    if arr.shape[1] < 1:
        raise ValueError("observation sequence must contain at least one step")
    if arr.shape[2] != input_features:
        raise ad.ShapeError(
            f"sequence has {arr.shape[2]} features per step, conditioner expects "
            f"{input_features}")
    return arr


class IdentityConditioner(Module):
    """Passes the context through unchanged; zero trainable parameters."""

    def __init__(self, spec: ConditionerSpec):
        self.spec = spec

    def encode(self, tape, context) -> Tensor:
        rows = as_feature_rows(context, self.spec.input_features)
        return Tensor(rows)


class MLPConditioner(Module):
    def __init__(self, spec: ConditionerSpec, rng: np.random.Generator):
        self.spec = spec
        self.net = MLP([spec.input_features, spec.hidden_features, spec.output_features], rng)

    def encode(self, tape, context) -> Tensor:
        rows = as_feature_rows(context, self.spec.input_features)
        return self.net(tape, Tensor(rows))


class RNNConditioner(Module):
    """Single-layer Elman RNN; final hidden state projected to the embedding."""

    def __init__(self, spec: ConditionerSpec, rng: np.random.Generator):
        self.spec = spec
        n_in, n_h = spec.input_features, spec.hidden_features
        self.w_in = Parameter("w_in", uniform_init(rng, n_in, (n_in, n_h)))
        self.w_h = Parameter("w_h", uniform_init(rng, n_h, (n_h, n_h)))
        self.b = Parameter("b", uniform_init(rng, n_h, (n_h,)))
        self.proj = Linear(n_h, spec.output_features, rng)

    def encode(self, tape, context) -> Tensor:
        seq = as_sequence_batch(context, self.spec.input_features)
        n, steps, _ = seq.shape
        h = Tensor(np.zeros((n, self.spec.hidden_features)))
        w_in, w_h, b = bind(self.w_in, tape), bind(self.w_h, tape), bind(self.b, tape)
        for t in range(steps):
            x_t = Tensor(seq[:, t, :])
            h = ad.tanh(x_t @ w_in + h @ w_h + b)
        return self.proj(tape, h)


class GRUConditioner(Module):
    """Single-layer gated recurrent unit.

    Gates: reset r, update u, candidate n:
        r = sigmoid(x Wxr + h Whr + br)
        u = sigmoid(x Wxu + h Whu + bu)
        n = tanh(x Wxn + r * (h Whn) + bn)
        h' = (1 - u) * n + u * h
    """

    def __init__(self, spec: ConditionerSpec, rng: np.random.Generator):
        self.spec = spec
        n_in, n_h = spec.input_features, spec.hidden_features
        for gate in ("r", "u", "n"):
            setattr(self, f"wx_{gate}", Parameter(f"wx_{gate}", uniform_init(rng, n_in, (n_in, n_h))))
            setattr(self, f"wh_{gate}", Parameter(f"wh_{gate}", uniform_init(rng, n_h, (n_h, n_h))))
            setattr(self, f"b_{gate}", Parameter(f"b_{gate}", uniform_init(rng, n_h, (n_h,))))
        self.proj = Linear(n_h, spec.output_features, rng)

    def encode(self, tape, context) -> Tensor:
        seq = as_sequence_batch(context, self.spec.input_features)
        n, steps, _ = seq.shape
        h = Tensor(np.zeros((n, self.spec.hidden_features)))
        p = {name: bind(getattr(self, name), tape)
             for name in ("wx_r", "wh_r", "b_r", "wx_u", "wh_u", "b_u", "wx_n", "wh_n", "b_n")}
        for t in range(steps):
            x_t = Tensor(seq[:, t, :])
            r = ad.sigmoid(x_t @ p["wx_r"] + h @ p["wh_r"] + p["b_r"])
            u = ad.sigmoid(x_t @ p["wx_u"] + h @ p["wh_u"] + p["b_u"])
            cand = ad.tanh(x_t @ p["wx_n"] + r * (h @ p["wh_n"]) + p["b_n"])
            h = (1.0 - u) * cand + u * h
        return self.proj(tape, h)


class LSTMConditioner(Module):
    """Single-layer LSTM with input, forget, cell, and output gates."""

    def __init__(self, spec: ConditionerSpec, rng: np.random.Generator):
        self.spec = spec
        n_in, n_h = spec.input_features, spec.hidden_features
        for gate in ("i", "f", "g", "o"):
            setattr(self, f"wx_{gate}", Parameter(f"wx_{gate}", uniform_init(rng, n_in, (n_in, n_h))))
            setattr(self, f"wh_{gate}", Parameter(f"wh_{gate}", uniform_init(rng, n_h, (n_h, n_h))))
            setattr(self, f"b_{gate}", Parameter(f"b_{gate}", uniform_init(rng, n_h, (n_h,))))
        self.proj = Linear(n_h, spec.output_features, rng)

    def encode(self, tape, context) -> Tensor:
        seq = as_sequence_batch(context, self.spec.input_features)
        n, steps, _ = seq.shape
        h = Tensor(np.zeros((n, self.spec.hidden_features)))
        c = Tensor(np.zeros((n, self.spec.hidden_features)))
        p = {name: bind(getattr(self, name), tape)
             for gate in ("i", "f", "g", "o")
             for name in (f"wx_{gate}", f"wh_{gate}", f"b_{gate}")}
        for t in range(steps):
            x_t = Tensor(seq[:, t, :])
            gi = ad.sigmoid(x_t @ p["wx_i"] + h @ p["wh_i"] + p["b_i"])
            gf = ad.sigmoid(x_t @ p["wx_f"] + h @ p["wh_f"] + p["b_f"])
            gg = ad.tanh(x_t @ p["wx_g"] + h @ p["wh_g"] + p["b_g"])
            go = ad.sigmoid(x_t @ p["wx_o"] + h @ p["wh_o"] + p["b_o"])
            c = gf * c + gi * gg
            h = go * ad.tanh(c)
        return self.proj(tape, h)


def sinusoidal_positions(steps: int, dim: int) -> np.ndarray:
    """Classic sin/cos positional table of shape (steps, dim)."""
    pos = np.arange(steps)[:, None].astype(np.float64)
    i = np.arange(dim // 2)[None, :].astype(np.float64)
    angle = pos / np.power(10000.0, 2.0 * i / dim)
    table = np.zeros((steps, dim))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


class MultiHeadAttention(Module):
    def __init__(self, model_dim: int, n_heads: int, rng: np.random.Generator):
        self.model_dim = model_dim
        self.n_heads = n_heads
        self.head_dim = model_dim // n_heads
        self.w_q = Linear(model_dim, model_dim, rng)
        self.w_k = Linear(model_dim, model_dim, rng)
        self.w_v = Linear(model_dim, model_dim, rng)
        self.w_o = Linear(model_dim, model_dim, rng)

    def __call__(self, tape, queries: Tensor, keys_values: Tensor) -> Tensor:
        q = self.w_q(tape, queries)
        k = self.w_k(tape, keys_values)
        v = self.w_v(tape, keys_values)
        scale = 1.0 / np.sqrt(self.head_dim)
        heads = []
        for h in range(self.n_heads):
            sl = (slice(None), slice(None), slice(h * self.head_dim, (h + 1) * self.head_dim))
            scores = (q[sl] @ ad.transpose_last2(k[sl])) * scale
            heads.append(ad.softmax(scores) @ v[sl])
        return self.w_o(tape, ad.concat(heads, axis=-1))


class FeedForward(Module):
    def __init__(self, model_dim: int, ff_width: int, rng: np.random.Generator):
        self.lin1 = Linear(model_dim, ff_width, rng)
        self.lin2 = Linear(ff_width, model_dim, rng)

    def __call__(self, tape, x: Tensor) -> Tensor:
        return self.lin2(tape, ad.relu(self.lin1(tape, x)))


class EncoderLayer(Module):
    def __init__(self, model_dim: int, n_heads: int, ff_width: int, rng):
        self.attn = MultiHeadAttention(model_dim, n_heads, rng)
        self.norm1 = LayerNorm(model_dim)
        self.ff = FeedForward(model_dim, ff_width, rng)
        self.norm2 = LayerNorm(model_dim)

    def __call__(self, tape, x: Tensor) -> Tensor:
        x = self.norm1(tape, x + self.attn(tape, x, x))
        return self.norm2(tape, x + self.ff(tape, x))


class DecoderLayer(Module):
    def __init__(self, model_dim: int, n_heads: int, ff_width: int, rng):
        self.self_attn = MultiHeadAttention(model_dim, n_heads, rng)
        self.norm1 = LayerNorm(model_dim)
        self.cross_attn = MultiHeadAttention(model_dim, n_heads, rng)
        self.norm2 = LayerNorm(model_dim)
        self.ff = FeedForward(model_dim, ff_width, rng)
        self.norm3 = LayerNorm(model_dim)

    def __call__(self, tape, target: Tensor, memory: Tensor) -> Tensor:
        target = self.norm1(tape, target + self.self_attn(tape, target, target))
        target = self.norm2(tape, target + self.cross_attn(tape, target, memory))
        return self.norm3(tape, target + self.ff(tape, target))


class TransformerConditioner(Module):
    """Encoder-decoder transformer reduced to a sequence embedding.

    The encoder ingests the observation sequence with additive sinusoidal
    positional encodings. Since the embedding task is many-to-one, the decoder
    runs exactly one step: its input is a single zero-initialized target token
    (no positional term) that attends over the encoder output, and the
    resulting vector is projected to the embedding size. There is no dropout,
    so evaluation is deterministic.
    """

    def __init__(self, spec: ConditionerSpec, rng: np.random.Generator):
        self.spec = spec
        self.input_proj = Linear(spec.input_features, spec.model_dim, rng)
        self.encoder = [EncoderLayer(spec.model_dim, spec.n_heads, spec.ff_width, rng)
                        for _ in range(spec.n_encoder_layers)]
        self.decoder = [DecoderLayer(spec.model_dim, spec.n_heads, spec.ff_width, rng)
                        for _ in range(spec.n_decoder_layers)]
        self.out_proj = Linear(spec.model_dim, spec.output_features, rng)

    def encode(self, tape, context) -> Tensor:
        seq = as_sequence_batch(context, self.spec.input_features)
        n, steps, _ = seq.shape
        h = self.input_proj(tape, Tensor(seq))
        h = h + Tensor(sinusoidal_positions(steps, self.spec.model_dim))
        for layer in self.encoder:
            h = layer(tape, h)
        target = Tensor(np.zeros((n, 1, self.spec.model_dim)))
        for layer in self.decoder:
            target = layer(tape, target, h)
        return self.out_proj(tape, target[:, 0, :])


_BUILDERS = {
    "identity": lambda spec, rng: IdentityConditioner(spec),
    "mlp": MLPConditioner,
    "rnn": RNNConditioner,
    "gru": GRUConditioner,
    "lstm": LSTMConditioner,
    "transformer": TransformerConditioner,
}


def build_conditioner(spec: ConditionerSpec, rng: np.random.Generator) -> Module:
    return _BUILDERS[spec.variant](spec, rng)


def encode(spec: ConditionerSpec, conditioner: Module, context) -> np.ndarray:
    """Convenience single-context encoding; returns a 1-d embedding array."""
    emb = conditioner.encode(None, context)
    if emb.data.shape[0] != 1:
        raise ad.ShapeError("encode() is for single contexts; use conditioner.encode for batches")
    return emb.data[0].copy()
