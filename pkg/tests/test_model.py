import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tmlp.errors import ShapeError
from tmlp.model import (
    AFFINE,
    MULTIPLICATIVE,
    Architecture,
    ModelConfig,
    ModelParams,
    backward,
    forward,
    init_siren,
    parameter_count,
    predict,
    tail_quadratic_oracle,
    truncate,
)
from tmlp.numerics import finite_difference_gradient
from tmlp.training import L1_SDF, total_loss

from _oracles import gradcheck_error, random_gradcheck_case

ARCHS = list(Architecture)


def small(arch=Architecture.TMLP, k=3, width=8, in_dim=2, out_dim=1, seed=0):
    return ModelConfig(in_dim, out_dim, width, k, 30.0, arch, seed)


def grad_check(cfg, n=4, seed=0):
    rng = np.random.default_rng(seed)
    params = init_siren(cfg)
    x = rng.uniform(-1, 1, (n, cfg.input_dim))
    G = [rng.standard_normal((n, cfg.output_dim)) for _ in range(cfg.num_outputs)]

    def loss(flat):
        outs, _ = forward(ModelParams.from_flat(cfg, flat), x)
        return sum(float(np.sum(g * y)) for g, y in zip(G, outs.y))

    _, trace = forward(params, x)
    analytic = backward(params, trace, G)
    numeric = finite_difference_gradient(loss, params.flatten())
    return np.max(np.abs(analytic - numeric) / np.maximum(np.abs(analytic), 1e-8))


def test_init_is_deterministic():
    a, b = init_siren(small(seed=7)), init_siren(small(seed=7))
    assert all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))
    c = init_siren(small(seed=8))
    assert not np.array_equal(a.flatten(), c.flatten())


def test_init_bounds():
    cfg = ModelConfig(2, 1, 256, 5, 30.0)
    p = init_siren(cfg)
    assert np.abs(p.weight(1)).max() <= 0.5
    bound = np.sqrt(6 / 256) / 30
    assert bound == pytest.approx(0.00510, abs=5e-6)
    for i in range(2, 6):
        assert np.abs(p.weight(i)).max() <= bound
    for i in range(1, 6):
        assert all(np.abs(a).max() <= bound for a in p.tail(i))


def test_tail_kinds_and_parameter_counts():
    cfg = ModelConfig(2, 1, 256, 5)
    assert [cfg.tail_kind(i) for i in range(1, 6)] == [AFFINE] + [MULTIPLICATIVE] * 4
    tails = [sum(int(np.prod(s)) for s in cfg.layer_shapes(i)[2:]) for i in range(1, 6)]
    assert tails == [257, 514, 514, 514, 514]
    hidden = (2 * 256 + 256) + 4 * (256 * 256 + 256)
    assert parameter_count(cfg) == hidden + 257 + 4 * 514
    plain = ModelConfig(2, 1, 256, 5, architecture="plain_mlp")
    assert parameter_count(plain) == hidden + 257
    nomul = ModelConfig(2, 3, 64, 3, architecture="tmlp_no_multiplicative")
    assert parameter_count(nomul) == (2 * 64 + 64) + 2 * (64 * 64 + 64) + 3 * (3 * 64 + 3)


@pytest.mark.parametrize("arch", ARCHS)
def test_flatten_round_trip(arch):
    p = init_siren(small(arch))
    q = ModelParams.from_flat(p.config, p.flatten())
    assert np.array_equal(p.flatten(), q.flatten())


def test_first_level_matches_manual_composition(rng):
    cfg = small(Architecture.TMLP, k=3, width=6, out_dim=2)
    p = init_siren(cfg)
    X = rng.uniform(-1, 1, (9, 2))
    y1 = predict(p, X, level=1)
    W, b = p.weight(1), p.bias(1)
    Wo, bo = p.tail(1)
    for x, row in zip(X, y1):
        h = [np.sin(30.0 * (sum(W[r, c] * x[c] for c in range(2)) + b[r])) for r in range(6)]
        ref = [sum(Wo[o, r] * h[r] for r in range(6)) + bo[o] for o in range(2)]
        assert np.allclose(row, ref, rtol=0, atol=1e-12)


def test_zero_tails_give_zero_outputs(rng):
    p = init_siren(small(k=4))
    for i in range(1, 5):
        for a in p.tail(i):
            a[...] = 0
    outs, _ = forward(p, rng.uniform(-1, 1, (5, 2)))
    assert all(not t.any() for t in outs.t)
    assert all(not y.any() for y in outs.y)


@pytest.mark.parametrize("arch", ARCHS)
def test_tail_sum_identity_is_exact(arch, rng):
    p = init_siren(small(arch, k=4, width=16)).astype(np.float32)
    outs, _ = forward(p, rng.uniform(-1, 1, (64, 2)))
    if arch.accumulates:
        assert np.array_equal(outs.y[0], outs.t[0])
        for i in range(1, len(outs.y)):
            assert np.array_equal(outs.y[i] - outs.y[i - 1], outs.t[i])
    else:
        for y, t in zip(outs.y, outs.t):
            assert np.array_equal(y, t)


def test_forward_rejects_bad_input_shape():
    with pytest.raises(ShapeError):
        forward(init_siren(small()), np.zeros((3, 3)))


def test_quadratic_oracle_matches_forward(rng):
    cfg = small(Architecture.TMLP, k=3, width=8, out_dim=2)
    p = init_siren(cfg)
    x = rng.uniform(-1, 1, (5, 2))
    outs, trace = forward(p, x)
    for i in (2, 3):
        for n in range(5):
            forms = tail_quadratic_oracle(p.tail(i), trace.h[i - 1][n])
            for o, f in enumerate(forms):
                assert abs(f.value - trace.tail[i - 1][n, o]) < 1e-10
                assert np.linalg.matrix_rank(f.Q) <= 1


def test_quadratic_oracle_constant_tail(rng):
    d = np.array([0.7])
    c = np.array([-1.5])
    tail = (np.zeros((1, 4)), c, np.zeros((1, 4)), d)
    for _ in range(3):
        (f,) = tail_quadratic_oracle(tail, rng.standard_normal(4))
        assert f.value == pytest.approx(-1.05, abs=1e-15)


@pytest.mark.parametrize("arch", ARCHS)
@pytest.mark.parametrize("k", [1, 2, 3])
def test_backward_matches_finite_differences(arch, k):
    assert grad_check(small(arch, k=k, width=8, seed=k)) < 1e-4


def test_backward_random_small_configs():
    for n in range(20):
        case = random_gradcheck_case(n)
        assert gradcheck_error(*case) < 1e-4, case[0]


def test_exact_zero_l1_gradient_is_reproduced():
    # an even batch with balanced residual signs cancels the head-bias gradient exactly
    cfg = ModelConfig(2, 1, 4, 1, 30.0, Architecture.PLAIN_MLP, 0)
    p = init_siren(cfg)
    x = np.random.default_rng(0).uniform(-1, 1, (4, 2))
    outs, trace = forward(p, x)
    gt = outs.y[0] + np.array([[1.0], [-1.0], [1.0], [-1.0]])
    res = total_loss(outs, gt, (1.0,), L1_SDF)
    grad = ModelParams.from_flat(cfg, backward(p, trace, res.grads))
    assert grad.tail(1)[1][0] == 0.0


def test_backward_zero_grads(rng):
    p = init_siren(small(k=3))
    _, trace = forward(p, rng.uniform(-1, 1, (4, 2)))
    assert not backward(p, trace, [np.zeros((4, 1))] * 3).any()


def test_last_tail_gradient_depends_only_on_last_output(rng):
    cfg = small(Architecture.TMLP, k=3)
    p = init_siren(cfg)
    x = rng.uniform(-1, 1, (4, 2))
    _, trace = forward(p, x)
    G = [rng.standard_normal((4, 1)) for _ in range(3)]
    G[2][:] = 0
    grad = ModelParams.from_flat(cfg, backward(p, trace, G))
    assert not any(a.any() for a in grad.tail(3))
    assert any(a.any() for a in grad.tail(2))


def test_truncate_structure_and_equivalence(rng):
    p = init_siren(small(k=4, width=16))
    x = rng.uniform(-1, 1, (32, 2))
    full, _ = forward(p, x)
    assert truncate(p, 4).flatten().tolist() == p.flatten().tolist()
    one = truncate(p, 1)
    assert one.config.num_hidden_layers == 1 and one.config.tail_kind(1) == AFFINE
    for j in range(1, 5):
        part, _ = forward(truncate(p, j), x)
        assert np.array_equal(part.y[j - 1], full.y[j - 1])
    with pytest.raises(ValueError):
        truncate(p, 0)
    with pytest.raises(ValueError):
        truncate(init_siren(small(Architecture.PLAIN_MLP)), 2)


@settings(max_examples=15, deadline=None)
@given(
    st.sampled_from(ARCHS),
    st.integers(1, 4),
    st.integers(1, 12),
    st.integers(0, 2**31),
)
def test_forward_is_deterministic_and_finite(arch, k, width, seed):
    cfg = ModelConfig(2, 2, width, k, 30.0, arch, seed)
    p = init_siren(cfg)
    x = np.random.default_rng(seed).uniform(-1, 1, (8, 2))
    a, _ = forward(p, x)
    b, _ = forward(p, x)
    assert len(a.y) == cfg.num_outputs
    for ya, yb in zip(a.y, b.y):
        assert np.array_equal(ya, yb) and np.all(np.isfinite(ya))
