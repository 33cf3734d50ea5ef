"""Conditional normalizing flow over a context-dependent diagonal Gaussian base.

The flow is an ordered stack of invertible layers. ``forward_transform`` maps
base samples z to data x applying layers in list order; ``inverse_transform``
maps data to the base space, applying inverted layers in reverse order. The
density convention is

    log p(x) = log p_base(z) + logdet_inverse(x),   z = inverse(x),

where logdet_inverse is the log |det| of the inverse map's Jacobian, equal to
minus the forward log-determinant at the matching point.

Layers:
  * permutation: fixed index shuffle, log-determinant exactly zero;
  * invertible linear: W = L U with unit-lower-triangular L and an upper
    triangular U whose diagonal is sign * exp(s), so W is invertible by
    construction and log |det W| == sum(s);
  * masked affine autoregressive: a masked one-hidden-layer conditioner
    emits a shift and a clamped log-scale per dimension, where the outputs
    for dimension i depend only on inputs before i plus the context
    embedding. The forward (sampling) direction is a single pass; inversion
    walks dimensions in index order because each step needs the previously
    recovered coordinates.

The context embedding produced by the conditioning operator is concatenated
into every masked conditioner input and also drives the MLP that outputs the
base distribution's mean and log-std. Affine log-scales and base log-stds are
hard-clamped to [-7, 7]; this is an overflow guard, trained models stay far
from the bounds.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import MaskedLinear, MLP, Module, Parameter, bind

LOG_SCALE_BOUND = 7.0
_LOG_2PI = float(np.log(2.0 * np.pi))


class PermutationLayer(Module):
    """Reorders coordinates by a fixed bijection; contributes zero log-det."""

    def __init__(self, perm: np.ndarray):
        perm = np.asarray(perm, dtype=np.int64)
        if sorted(perm.tolist()) != list(range(perm.size)):
            raise ValueError(f"perm must be a bijection on 0..{perm.size - 1}, got {perm}")
        self.perm = perm
        self.inv_perm = np.argsort(perm)

    def forward(self, tape, z: Tensor, emb: Tensor):
        x = z[:, self.perm]
        return x, Tensor(np.zeros(z.shape[0]))

    def inverse(self, tape, x: Tensor, emb: Tensor):
        z = x[:, self.inv_perm]
        return z, Tensor(np.zeros(x.shape[0]))


class InvertibleLinearLayer(Module):
    """Invertible linear map x = W z with W = L U (LU parameterization).

    L is unit lower triangular, U is upper triangular with diagonal
    sign * exp(log_diag); signs are fixed at construction so the map can
    never become singular during training. log |det W| = sum(log_diag).
    """

    def __init__(self, dim: int):
        self.dim = dim
        self.lower = Parameter("lower", np.zeros((dim, dim)))
        self.upper = Parameter("upper", np.zeros((dim, dim)))
        self.log_diag = Parameter("log_diag", np.zeros(dim))
        self.signs = np.ones(dim)
        self._mask_lower = np.tril(np.ones((dim, dim)), k=-1)
        self._mask_upper = np.triu(np.ones((dim, dim)), k=1)
        self._eye = np.eye(dim)

    def _weight(self, tape) -> Tensor:
        low = bind(self.lower, tape) * Tensor(self._mask_lower) + Tensor(self._eye)
        diag = Tensor(self._eye) * (ad.exp(bind(self.log_diag, tape)) * Tensor(self.signs))
        up = bind(self.upper, tape) * Tensor(self._mask_upper) + diag
        return low @ up

    def _logdet(self, tape, n: int) -> Tensor:
        total = ad.sum_(bind(self.log_diag, tape))
        return ad.broadcast_to(total, (n,))

    def forward(self, tape, z: Tensor, emb: Tensor):
        x = z @ ad.transpose_last2(self._weight(tape))
        return x, self._logdet(tape, z.shape[0])

    def inverse(self, tape, x: Tensor, emb: Tensor):
        z = ad.solve_rows(self._weight(tape), x)
        return z, ad.neg(self._logdet(tape, x.shape[0]))


def autoregressive_masks(dim: int, ctx_dim: int, hidden: int):
    """Degree masks for a one-hidden-layer masked conditioner.

    Input coordinate j has degree j+1; hidden units cycle through degrees
    1..dim-1; context columns are unmasked. Output columns (shift_i then
    log_scale_i blocks) have degree i+1 and connect to strictly smaller
    hidden degrees, so the outputs for dimension 0 are functions of the bias
    alone, matching the usual masked autoregressive construction.
    """
    if dim < 2:
        raise ValueError(f"autoregressive masking needs dim >= 2, got {dim}")
    in_deg = np.arange(1, dim + 1)
    hid_deg = (np.arange(hidden) % (dim - 1)) + 1
    in_mask = np.zeros((dim + ctx_dim, hidden))
    in_mask[:dim] = (hid_deg[None, :] >= in_deg[:, None]).astype(np.float64)
    in_mask[dim:] = 1.0
    out_deg = np.concatenate([np.arange(1, dim + 1), np.arange(1, dim + 1)])
    out_mask = (out_deg[None, :] > hid_deg[:, None]).astype(np.float64)
    return in_mask, out_mask


class MaskedAffineLayer(Module):
    """Masked affine autoregressive transform x_i = z_i * exp(a_i) + m_i.

    (m_i, a_i) come from a masked conditioner network reading z_{<i} and the
    context embedding; a_i is hard-clamped to +-LOG_SCALE_BOUND. The output
    layer is zero-initialized so a fresh layer is the identity map.
    """

    def __init__(self, dim: int, ctx_dim: int, hidden: int, rng: np.random.Generator):
        self.dim = dim
        self.ctx_dim = ctx_dim
        in_mask, out_mask = autoregressive_masks(dim, ctx_dim, hidden)
        self.lin_in = MaskedLinear(dim + ctx_dim, hidden, in_mask, rng)
        self.lin_out = MaskedLinear(hidden, 2 * dim, out_mask, rng, zero_init=True)

    def _shift_logscale(self, tape, z: Tensor, emb: Tensor):
        h = ad.tanh(self.lin_in(tape, ad.concat([z, emb], axis=-1)))
        out = self.lin_out(tape, h)
        shift = out[:, : self.dim]
        log_scale = ad.clamp(out[:, self.dim:], -LOG_SCALE_BOUND, LOG_SCALE_BOUND)
        return shift, log_scale

    def forward(self, tape, z: Tensor, emb: Tensor):
        shift, log_scale = self._shift_logscale(tape, z, emb)
        x = z * ad.exp(log_scale) + shift
        return x, ad.sum_(log_scale, axis=-1)

    def inverse(self, tape, x: Tensor, emb: Tensor):
        n = x.shape[0]
        cols: list[Tensor] = []
        log_scales: list[Tensor] = []
        for i in range(self.dim):
            pad = Tensor(np.zeros((n, self.dim - i)))
            z_partial = ad.concat(cols + [pad], axis=-1) if cols else pad
            shift, log_scale = self._shift_logscale(tape, z_partial, emb)
            z_i = (x[:, i:i + 1] - shift[:, i:i + 1]) * ad.exp(ad.neg(log_scale[:, i:i + 1]))
            cols.append(z_i)
            log_scales.append(log_scale[:, i:i + 1])
        z = ad.concat(cols, axis=-1)
        logdet = ad.neg(ad.sum_(ad.concat(log_scales, axis=-1), axis=-1))
        return z, logdet


class ConditionalGaussianBase(Module):
    """Diagonal Gaussian whose mean and log-std are an MLP of the embedding.

    Zero-initialized output layer: a fresh base is standard normal for every
    context.
    """

    def __init__(self, dim: int, ctx_dim: int, rng: np.random.Generator, hidden: int = 32):
        self.dim = dim
        self.ctx_dim = ctx_dim
        self.net = MLP([ctx_dim, hidden, hidden, 2 * dim], rng, zero_init_last=True)

    def params(self, tape, emb: Tensor):
        out = self.net(tape, emb)
        mean = out[:, : self.dim]
        log_std = ad.clamp(out[:, self.dim:], -LOG_SCALE_BOUND, LOG_SCALE_BOUND)
        return mean, log_std

    def log_prob(self, tape, z: Tensor, emb: Tensor) -> Tensor:
        mean, log_std = self.params(tape, emb)
        unit = (z - mean) * ad.exp(ad.neg(log_std))
        return (-0.5) * ad.sum_(unit * unit, axis=-1) - ad.sum_(log_std, axis=-1) \
            - 0.5 * self.dim * _LOG_2PI

    def sample(self, emb_rows: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
        mean, log_std = self.params(None, Tensor(emb_rows))
        eps = rng.standard_normal((n, self.dim))
        return mean.data + np.exp(log_std.data) * eps


class FlowModel(Module):
    """Layer stack + conditional Gaussian base + conditioning operator."""

    def __init__(self, dim: int, layers: list, base: ConditionalGaussianBase,
                 conditioner, embedding_dim: int):
        if dim < 2:
            raise ValueError(f"flow dimension must be >= 2, got {dim}")
        self.dim = dim
        self.layers = layers
        self.base = base
        self.conditioner = conditioner
        self.embedding_dim = embedding_dim

    # -- context ---------------------------------------------------------

    def embed_context(self, tape, context) -> Tensor:
        """Shared fixed-size embedding consumed by every layer and the base."""
        emb = self.conditioner.encode(tape, context)
        if emb.shape[-1] != self.embedding_dim:
            raise ad.ShapeError(
                f"conditioner produced embedding width {emb.shape[-1]}, "
                f"model expects {self.embedding_dim}")
        return emb

    @staticmethod
    def _align(emb: Tensor, n: int) -> Tensor:
        if emb.shape[0] == n:
            return emb
        if emb.shape[0] == 1:
            return ad.broadcast_to(emb, (n, emb.shape[1]))
        raise ad.ShapeError(f"embedding batch {emb.shape[0]} does not match data batch {n}")

    # -- transforms -------------------------------------------------------

    def forward_transform(self, tape, z: Tensor, emb: Tensor):
        """Base-to-data map; returns (x, per-sample forward log-determinant)."""
        emb = self._align(emb, z.shape[0])
        logdet = Tensor(np.zeros(z.shape[0]))
        x = z
        for layer in self.layers:
            x, ld = layer.forward(tape, x, emb)
            logdet = logdet + ld
        return x, logdet

    def inverse_transform(self, tape, x: Tensor, emb: Tensor):
        """Data-to-base map; returns (z, per-sample inverse log-determinant)."""
        emb = self._align(emb, x.shape[0])
        logdet = Tensor(np.zeros(x.shape[0]))
        z = x
        for layer in reversed(self.layers):
            z, ld = layer.inverse(tape, z, emb)
            logdet = logdet + ld
        return z, logdet

    # -- densities and sampling -------------------------------------------

    def log_prob(self, tape, x, context) -> Tensor:
        """Per-sample log density of data rows x given raw contexts."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ad.ShapeError(f"expected data of shape (n, {self.dim}), got {x.shape}")
        emb = self._align(self.embed_context(tape, context), x.shape[0])
        z, logdet_inv = self.inverse_transform(tape, x, emb)
        return self.base.log_prob(tape, z, emb) + logdet_inv

    def nll_loss(self, tape, batch, contexts) -> Tensor:
        """Mean negative log-likelihood; differentiable in all parameters."""
        batch = batch if isinstance(batch, Tensor) else Tensor(batch)
        if batch.shape[0] < 1:
            raise ValueError("nll_loss requires a non-empty batch")
        return ad.neg(ad.mean_(self.log_prob(tape, batch, contexts)))

    def sample(self, n: int, context, rng: np.random.Generator) -> np.ndarray:
        """Draw n data-space samples for one context; reproducible from rng."""
        if n < 1:
            raise ValueError(f"sample count must be >= 1, got {n}")
        emb = self.embed_context(None, context)
        if emb.shape[0] != 1:
            raise ad.ShapeError("sample() conditions on a single context")
        z = self.base.sample(np.repeat(emb.data, n, axis=0), n, rng)
        x, _ = self.forward_transform(None, Tensor(z), Tensor(np.repeat(emb.data, n, axis=0)))
        return x.data.copy()


def default_permutation(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Coordinate reversal for dim 2 (the only nontrivial choice); seeded shuffle above."""
    if dim == 2:
        return np.array([1, 0])
    perm = np.arange(dim)
    rng.shuffle(perm)
    return perm


def build_flow(dim: int, embedding_dim: int, conditioner, rng: np.random.Generator,
               blocks: int = 5, hidden: int = 32, base_hidden: int = 32) -> FlowModel:
    """Standard stack: `blocks` repeats of [permutation, linear, masked affine]."""
    layers: list = []
    for _ in range(blocks):
        layers.append(PermutationLayer(default_permutation(dim, rng)))
        layers.append(InvertibleLinearLayer(dim))
        layers.append(MaskedAffineLayer(dim, embedding_dim, hidden, rng))
    base = ConditionalGaussianBase(dim, embedding_dim, rng, hidden=base_hidden)
    return FlowModel(dim, layers, base, conditioner, embedding_dim)
