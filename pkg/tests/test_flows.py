import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowstate import autodiff as ad
from flowstate.autodiff import Tape, Tensor
from flowstate.conditioners import ConditionerSpec, build_conditioner
from flowstate.flows import (FlowModel, InvertibleLinearLayer, MaskedAffineLayer,
                             PermutationLayer, build_flow)

from oracles import gradcheck, grid_integral_2d, mixture_entropy

LOG_2PI = np.log(2 * np.pi)


def identity_flow(dim=2, blocks=2, seed=0):
    """Fresh flow: zero-initialized affine outputs, identity linear layers,
    standard-normal base. Only the permutations act."""
    rng = np.random.default_rng(seed)
    spec = ConditionerSpec("identity", input_features=1, output_features=1)
    return build_flow(dim, 1, build_conditioner(spec, rng), rng, blocks=blocks, hidden=8)


def randomized_flow(dim=2, blocks=2, seed=0, jolt=0.3):
    flow = identity_flow(dim, blocks, seed)
    rng = np.random.default_rng(seed + 1)
    for _, p in flow.named_parameters():
        p.data += jolt * rng.standard_normal(p.data.shape)
    return flow


def test_embed_context_identity_passthrough():
    flow = identity_flow()
    emb = flow.embed_context(None, [13.0])
    assert np.array_equal(emb.data, [[13.0]])


def test_embed_context_rejects_wrong_width():
    flow = identity_flow()
    with pytest.raises(ad.ShapeError):
        flow.embed_context(None, [[1.0, 2.0]])


def test_fresh_flow_is_identity_map_with_zero_logdet():
    flow = identity_flow(dim=2, blocks=3)
    # undo the permutations so the whole stack is exactly the identity
    for layer in flow.layers:
        if isinstance(layer, PermutationLayer):
            layer.perm = np.arange(2)
            layer.inv_perm = np.arange(2)
    z = np.random.default_rng(0).standard_normal((50, 2))
    emb = flow.embed_context(None, np.full((50, 1), 13.0))
    x, logdet = flow.forward_transform(None, Tensor(z), emb)
    assert np.allclose(x.data, z, atol=1e-15)
    assert np.allclose(logdet.data, 0.0, atol=1e-15)


def test_permutation_layer_reverses_and_has_zero_logdet():
    layer = PermutationLayer(np.array([1, 0]))
    z = Tensor([[1.0, 2.0], [3.0, 4.0]])
    x, logdet = layer.forward(None, z, None)
    assert np.array_equal(x.data, [[2.0, 1.0], [4.0, 3.0]])
    assert np.array_equal(logdet.data, [0.0, 0.0])
    back, _ = layer.inverse(None, x, None)
    assert np.array_equal(back.data, z.data)


def test_permutation_must_be_bijection():
    with pytest.raises(ValueError):
        PermutationLayer(np.array([0, 0]))


def test_linear_layer_logdet_matches_brute_force_determinant():
    layer = InvertibleLinearLayer(2)
    layer.log_diag.data[:] = np.log([2.0, 3.0])
    z = Tensor(np.eye(2))
    x, logdet = layer.forward(None, z, None)
    w = x.data.T  # rows of x are W @ basis vectors
    assert logdet.data[0] == pytest.approx(np.log(abs(np.linalg.det(w))))
    assert logdet.data[0] == pytest.approx(np.log(6.0))


def test_linear_layer_diagonal_solve():
    layer = InvertibleLinearLayer(2)
    layer.log_diag.data[:] = np.log([2.0, 3.0])
    z, logdet = layer.inverse(None, Tensor([[2.0, 3.0]]), None)
    assert np.allclose(z.data, [[1.0, 1.0]])
    assert logdet.data[0] == pytest.approx(-np.log(6.0))


def test_linear_layer_random_matrix_matches_numpy_det():
    rng = np.random.default_rng(5)
    layer = InvertibleLinearLayer(3)
    layer.lower.data[:] = rng.standard_normal((3, 3))
    layer.upper.data[:] = rng.standard_normal((3, 3))
    layer.log_diag.data[:] = rng.standard_normal(3)
    x, logdet = layer.forward(None, Tensor(np.eye(3)), None)
    w = x.data.T
    assert logdet.data[0] == pytest.approx(np.log(abs(np.linalg.det(w))), rel=1e-10)


def test_autoregressive_masking_blocks_forbidden_dependencies():
    rng = np.random.default_rng(2)
    for dim in (2, 3, 4):
        layer = MaskedAffineLayer(dim, ctx_dim=2, hidden=16, rng=rng)
        for _, p in layer.named_parameters():
            p.data += 0.5 * rng.standard_normal(p.data.shape)
        z = rng.standard_normal((1, dim))
        emb = Tensor(rng.standard_normal((1, 2)))
        shift, log_scale = layer._shift_logscale(None, Tensor(z), emb)
        for i in range(dim):
            for j in range(i, dim):
                bumped = z.copy()
                bumped[0, j] += 1.7
                s2, l2 = layer._shift_logscale(None, Tensor(bumped), emb)
                assert s2.data[0, i] == shift.data[0, i], (dim, i, j)
                assert l2.data[0, i] == log_scale.data[0, i], (dim, i, j)


def test_affine_layer_strictly_monotone_in_its_input():
    rng = np.random.default_rng(3)
    layer = MaskedAffineLayer(2, ctx_dim=1, hidden=8, rng=rng)
    for _, p in layer.named_parameters():
        p.data += 0.5 * rng.standard_normal(p.data.shape)
    emb = Tensor(np.zeros((1, 1)))
    grid = np.linspace(-3, 3, 41)
    for i in range(2):
        outs = []
        for v in grid:
            z = np.zeros((1, 2))
            z[0, i] = v
            x, _ = layer.forward(None, Tensor(z), emb)
            outs.append(x.data[0, i])
        assert np.all(np.diff(outs) > 0)


@pytest.mark.parametrize("dim,blocks", [(2, 1), (2, 4), (3, 2), (4, 3)])
def test_roundtrip_inverse_of_forward(dim, blocks):
    flow = randomized_flow(dim=dim, blocks=blocks, seed=dim * 10 + blocks)
    rng = np.random.default_rng(0)
    z = rng.standard_normal((1000, dim))
    emb = flow.embed_context(None, np.full((1000, 1), 2.5))
    x, ld_f = flow.forward_transform(None, Tensor(z), emb)
    back, ld_i = flow.inverse_transform(None, x, emb)
    assert np.max(np.abs(back.data - z)) <= 1e-8
    assert np.max(np.abs(ld_f.data + ld_i.data)) <= 1e-8


@given(st.integers(min_value=0, max_value=10 ** 6))
@settings(max_examples=10, deadline=None)
def test_roundtrip_property_random_models(seed):
    rng = np.random.default_rng(seed)
    dim = int(rng.integers(2, 5))
    blocks = int(rng.integers(1, 4))
    flow = randomized_flow(dim=dim, blocks=blocks, seed=seed % 999)
    z = rng.standard_normal((64, dim))
    emb = flow.embed_context(None, np.full((64, 1), float(rng.normal())))
    x, _ = flow.forward_transform(None, Tensor(z), emb)
    back, _ = flow.inverse_transform(None, x, emb)
    assert np.max(np.abs(back.data - z)) <= 1e-8


def _fd_jacobian_logdet(flow, z0, emb_value, h=1e-6):
    dim = z0.size

    def fwd(zv):
        emb = flow.embed_context(None, [[emb_value]])
        x, _ = flow.forward_transform(None, Tensor(zv.reshape(1, dim)), emb)
        return x.data[0]

    jac = np.zeros((dim, dim))
    for j in range(dim):
        zp, zm = z0.copy(), z0.copy()
        zp[j] += h
        zm[j] -= h
        jac[:, j] = (fwd(zp) - fwd(zm)) / (2 * h)
    return np.log(abs(np.linalg.det(jac)))


@pytest.mark.slow
def test_analytic_logdet_matches_finite_difference_jacobian():
    rng = np.random.default_rng(11)
    checked = 0
    for trial in range(20):
        dim = int(rng.integers(2, 5))
        flow = randomized_flow(dim=dim, blocks=int(rng.integers(1, 3)), seed=trial)
        for _ in range(5):
            z0 = rng.standard_normal(dim)
            emb_value = float(rng.normal())
            emb = flow.embed_context(None, [[emb_value]])
            _, ld = flow.forward_transform(None, Tensor(z0.reshape(1, dim)), emb)
            fd = _fd_jacobian_logdet(flow, z0, emb_value)
            assert abs(ld.data[0] - fd) / max(abs(fd), 1e-6) < 1e-4
            checked += 1
    assert checked == 100


def test_log_prob_standard_normal_origin():
    flow = identity_flow(dim=2)
    lp = flow.log_prob(None, np.zeros((1, 2)), [[0.0]])
    assert lp.data[0] == pytest.approx(-LOG_2PI)


def test_permutation_leaves_symmetric_base_density_unchanged():
    flow = identity_flow(dim=2, blocks=1)
    x = np.array([[0.3, -1.2]])
    lp = flow.log_prob(None, x, [[0.0]]).data[0]
    lp_swapped = flow.log_prob(None, x[:, ::-1].copy(), [[0.0]]).data[0]
    assert lp == pytest.approx(lp_swapped, abs=1e-12)


@pytest.mark.slow
def test_density_integrates_to_one_on_grid():
    for seed in (0, 1, 2):
        flow = randomized_flow(dim=2, blocks=2, seed=seed, jolt=0.2)

        def log_prob(points):
            return flow.log_prob(None, points, [[0.5]]).data

        # extent wide enough to cover the model's own spread
        probe = flow.sample(4000, [[0.5]], np.random.default_rng(seed))
        lo = probe.mean(axis=0) - 8.0 * probe.std(axis=0)
        hi = probe.mean(axis=0) + 8.0 * probe.std(axis=0)
        integral = grid_integral_2d(log_prob, ((lo[0], hi[0]), (lo[1], hi[1])),
                                    resolution=300)
        assert integral == pytest.approx(1.0, abs=0.02)


def test_sample_mean_matches_standard_normal():
    flow = identity_flow(dim=2)
    rng = np.random.default_rng(1234)
    samples = flow.sample(100_000, [[0.0]], rng)
    assert np.all(np.abs(samples.mean(axis=0)) < 0.02)


def test_sample_rejects_nonpositive_count():
    with pytest.raises(ValueError):
        identity_flow().sample(0, [[0.0]], np.random.default_rng(0))


def test_sample_deterministic_for_seed():
    flow = randomized_flow(seed=7)
    a = flow.sample(64, [[1.0]], np.random.default_rng(99))
    b = flow.sample(64, [[1.0]], np.random.default_rng(99))
    assert np.array_equal(a, b)


def test_nll_of_origin_point_identity_model():
    flow = identity_flow(dim=2)
    loss = flow.nll_loss(None, np.zeros((1, 2)), [[0.0]])
    assert loss.item() == pytest.approx(LOG_2PI)


def test_nll_duplicated_batch_invariant():
    flow = randomized_flow(seed=3)
    x = np.random.default_rng(0).standard_normal((8, 2))
    ctx = np.random.default_rng(1).standard_normal((8, 1))
    single = flow.nll_loss(None, x, ctx).item()
    doubled = flow.nll_loss(None, np.vstack([x, x]), np.vstack([ctx, ctx])).item()
    assert doubled == pytest.approx(single, abs=1e-12)


def test_nll_rejects_empty_batch():
    with pytest.raises(ValueError):
        identity_flow().nll_loss(None, np.zeros((0, 2)), np.zeros((0, 1)))


def test_nll_gradients_pass_finite_difference_check():
    flow = randomized_flow(dim=2, blocks=1, seed=5, jolt=0.2)
    x = np.random.default_rng(2).standard_normal((5, 2))
    ctx = np.random.default_rng(3).standard_normal((5, 1))

    def loss(tape):
        return flow.nll_loss(tape, x, ctx)

    gradcheck(flow, loss, rtol=1e-4, sample=6, rng=np.random.default_rng(0))


@pytest.mark.slow
def test_flow_fits_toy_gaussian_mixture_to_entropy():
    """Trained NLL must approach the target's differential entropy, computed
    independently by quadrature."""
    from flowstate.autodiff import AdamState

    weights = [0.5, 0.5]
    means = [np.array([-0.6, 0.0]), np.array([0.6, 0.0])]
    covs = [0.64 * np.eye(2), 0.64 * np.eye(2)]
    entropy = mixture_entropy(weights, means, covs, ((-6, 6), (-6, 6)))

    rng = np.random.default_rng(0)
    comps = rng.integers(0, 2, size=4096)
    data = np.array([rng.multivariate_normal(means[c], covs[c]) for c in comps])

    flow = identity_flow(dim=2, blocks=2, seed=1)
    ctx = np.zeros((256, 1))
    opt = AdamState(flow.parameters(), lr=1e-2)
    first = None
    for it in range(200):
        batch = data[rng.integers(0, len(data), size=256)]
        tape = Tape()
        loss = flow.nll_loss(tape, batch, ctx)
        if first is None:
            first = loss.item()
        opt.step(tape.parameter_grads(tape.backward(loss)))
    final = flow.nll_loss(None, data, np.zeros((len(data), 1))).item()
    assert final < first
    assert abs(final - entropy) <= 0.1
