import math

import numpy as np
import pytest

from helpers import (
    backward_grads,
    central_difference,
    density_integral,
    gaussian_kl_quadrature,
    gradcheck,
    make_params,
)
from tagsynth import autodiff as ad
from tagsynth.autodiff import (
    DomainError,
    GradientError,
    Parameter,
    ShapeError,
    Tape,
    Tensor,
)


def test_matmul_small_fixture():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0], [6.0]])
    out = ad.matmul(a, b)
    assert out.values.tolist() == [[17.0], [39.0]]


def test_matmul_shape_error_names_both_shapes():
    a = Tensor(np.zeros((2, 3)))
    b = Tensor(np.zeros((2, 3)))
    with pytest.raises(ShapeError) as exc:
        ad.matmul(a, b)
    assert "(2, 3)" in str(exc.value)


def test_matmul_grad_of_sum_is_ones_times_transpose():
    rng = np.random.default_rng(0)
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    with Tape() as tape:
        loss = ad.matmul(a, b).sum()
        tape.backward(loss)
    ones = np.ones((3, 2))
    np.testing.assert_allclose(a.grad, ones @ b.values.T, rtol=1e-12)
    np.testing.assert_allclose(b.grad, a.values.T @ ones, rtol=1e-12)


def test_forward_is_deterministic():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((5, 3)))
    w = Tensor(rng.standard_normal((3, 3)))
    first = ad.tanh(ad.matmul(x, w)).values
    second = ad.tanh(ad.matmul(x, w)).values
    assert np.array_equal(first, second)


def test_tape_records_are_topologically_ordered():
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    with Tape() as tape:
        h = ad.tanh(ad.matmul(x, w))
        (h * h).sum()
    assert tape.records
    for rec in tape.records:
        assert all(i < rec.output_id for i in rec.input_ids)


def test_backward_visits_each_record_once_in_reverse():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = ad.exp(x)
        z = y * y
        loss = z.sum()
    visited = []
    for rec in tape.records:
        original = rec.backward_fn

        def wrapped(g, _orig=original, _op=rec.op):
            visited.append(_op)
            return _orig(g)

        rec.backward_fn = wrapped
    tape.backward(loss)
    assert visited == [rec.op for rec in reversed(tape.records)]


def test_two_backward_passes_double_the_gradient():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
    first = x.grad.copy()
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, 2.0 * first, rtol=1e-15)
    np.testing.assert_allclose(first, 2.0 * x.values, rtol=1e-15)


def test_grad_accumulates_across_uses_of_same_tensor():
    x = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        loss = (x * x + x).sum()
        tape.backward(loss)
    # d/dx (x^2 + x) = 2x + 1
    np.testing.assert_allclose(x.grad, [5.0], rtol=1e-15)


def test_backward_rejects_non_scalar_loss():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
        with pytest.raises(GradientError):
            tape.backward(y)


def test_backward_rejects_loss_from_other_tape():
    x = Tensor([1.0], requires_grad=True)
    with Tape():
        loss = (x * x).sum()
    with Tape() as other:
        (x * 1.0).sum()
        with pytest.raises(GradientError):
            other.backward(loss)


def test_detach_blocks_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = (x.detach() * x).sum()
        tape.backward(loss)
    # only the non-detached use contributes, so grad is x itself
    np.testing.assert_allclose(x.grad, x.values, rtol=1e-15)


@pytest.mark.parametrize("seed", range(4))
def test_elementwise_and_structural_op_gradients(seed):
    rng = np.random.default_rng(100 + seed)
    params = make_params(rng, (3, 4), (3, 4), (4, 2))
    a, b, w = (p.tensor for p in params)

    def loss_fn():
        h = ad.leaky_relu(a * b + a - b, 0.2)
        h = ad.matmul(ad.tanh(h), w)
        s = ad.sigmoid(h)
        c = ad.concat([s, ad.exp(-s)], axis=1)
        left = ad.slice_cols(c, 0, 2)
        mask = np.array([True, False, True])
        mixed = ad.where_rows(mask, left, left * 0.5)
        safe = ad.clamp(mixed, 0.05, 0.95)
        return (ad.log(safe) / ad.transpose(Tensor(np.full((2, 3), 2.0)))).sum()

    gradcheck(loss_fn, params)


def test_division_gradients():
    rng = np.random.default_rng(7)
    params = make_params(rng, (2, 3), (2, 3))
    a, b = (p.tensor for p in params)
    b.values = np.abs(b.values) + 0.5

    def loss_fn():
        return (a / b).sum()

    gradcheck(loss_fn, params)


def test_sum_axis_variants_match_numpy():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    assert x.sum().item() == 15.0
    np.testing.assert_allclose(x.sum(axis=0).values, [3.0, 5.0, 7.0])
    np.testing.assert_allclose(x.mean(axis=1).values, [1.0, 4.0])
    with Tape() as tape:
        loss = (x.sum(axis=0) * Tensor([1.0, 2.0, 3.0])).sum()
        tape.backward(loss)
    np.testing.assert_allclose(x.grad, [[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]])


def test_log_rejects_non_positive():
    with pytest.raises(DomainError):
        ad.log(Tensor([1.0, 0.0]))


def test_clamp_keeps_probabilities_interior():
    t = ad.clamp(Tensor([-1.0, 0.5, 2.0]), ad.PROB_EPS, 1 - ad.PROB_EPS)
    assert t.values[0] == ad.PROB_EPS
    assert t.values[2] == 1 - ad.PROB_EPS
    assert np.all(t.values > 0) and np.all(t.values < 1)


# -- reparameterized sampling --------------------------------------------------


def test_reparam_sample_is_mu_plus_sigma_eps():
    mu = Tensor([1.0, -2.0])
    sigma = Tensor([0.5, 2.0])
    eps = np.array([1.0, -1.0])
    z = ad.reparam_sample(mu, sigma, eps)
    np.testing.assert_allclose(z.values, [1.5, -4.0], rtol=1e-15)


def test_reparam_sample_with_zero_sigma_equals_mu():
    mu = Tensor([3.0, 4.0])
    z = ad.reparam_sample(mu, Tensor([0.0, 0.0]), np.array([5.0, -5.0]))
    np.testing.assert_allclose(z.values, mu.values, rtol=1e-15)


def test_reparam_sample_gradients_reach_mu_sigma_not_eps():
    rng = np.random.default_rng(8)
    params = make_params(rng, (4,), (4,))
    mu, sigma = (p.tensor for p in params)
    sigma.values = np.abs(sigma.values) + 0.1
    eps_t = Tensor(rng.standard_normal(4), requires_grad=True)

    def loss_fn():
        z = ad.reparam_sample(mu, sigma, eps_t)
        return (z * z).sum()

    gradcheck(loss_fn, params)
    _, _ = backward_grads(loss_fn, params)
    assert eps_t.grad is None


def test_reparam_sample_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.reparam_sample(Tensor([0.0]), Tensor([1.0, 1.0]), np.zeros(2))


def test_reparam_sample_reproducible_from_seeded_rng():
    draws = []
    for _ in range(2):
        rng = np.random.default_rng(99)
        eps = rng.standard_normal(6)
        z = ad.reparam_sample(Tensor(np.zeros(6)), Tensor(np.ones(6)), eps)
        draws.append(z.values.copy())
    assert np.array_equal(draws[0], draws[1])


# -- divergences and likelihoods -----------------------------------------------


def test_gaussian_kl_zero_at_standard_normal():
    kl = ad.kl_diag_gaussian_vs_std_normal(Tensor(np.zeros(5)), Tensor(np.ones(5)))
    assert abs(kl.item()) < 1e-15


def test_gaussian_kl_matches_quadrature():
    rng = np.random.default_rng(10)
    for _ in range(25):
        mu = float(rng.uniform(-2.0, 2.0))
        sigma = float(rng.uniform(0.3, 2.5))
        closed = ad.kl_diag_gaussian_vs_std_normal(Tensor([mu]), Tensor([sigma])).item()
        assert abs(closed - gaussian_kl_quadrature(mu, sigma)) < 1e-6


def test_gaussian_kl_sums_over_dimensions():
    mus = np.array([0.3, -1.2, 0.0])
    sigmas = np.array([1.1, 0.4, 2.0])
    total = ad.kl_diag_gaussian_vs_std_normal(Tensor(mus), Tensor(sigmas)).item()
    parts = sum(
        ad.kl_diag_gaussian_vs_std_normal(Tensor([m]), Tensor([s])).item()
        for m, s in zip(mus, sigmas)
    )
    assert abs(total - parts) < 1e-12


def test_gaussian_kl_rejects_bad_sigma():
    with pytest.raises(DomainError):
        ad.kl_diag_gaussian_vs_std_normal(Tensor([0.0]), Tensor([0.0]))
    with pytest.raises(DomainError):
        ad.kl_diag_gaussian_vs_std_normal(Tensor([0.0]), Tensor([-1.0]))


def test_gaussian_kl_gradients():
    rng = np.random.default_rng(11)
    params = make_params(rng, (6,), (6,))
    mu, sigma = (p.tensor for p in params)
    sigma.values = np.abs(sigma.values) + 0.3

    def loss_fn():
        return ad.kl_diag_gaussian_vs_std_normal(mu, sigma)

    gradcheck(loss_fn, params)


def test_bernoulli_kl_frozen_value():
    # 0.5*log(0.5/0.25) + 0.5*log(0.5/0.75), worked out by hand
    expected = 0.5 * math.log(2.0) + 0.5 * math.log(2.0 / 3.0)
    got = ad.kl_bernoulli_vec(Tensor([0.5]), Tensor([0.25])).item()
    assert abs(got - expected) < 1e-12
    assert abs(got - 0.1438) < 1e-4


def test_bernoulli_kl_nonnegative_and_zero_iff_equal():
    rng = np.random.default_rng(12)
    for _ in range(300):
        q = float(rng.uniform(0.01, 0.99))
        p = float(rng.uniform(0.01, 0.99))
        kl = ad.kl_bernoulli_vec(Tensor([q]), Tensor([p])).item()
        if q == p:
            assert kl == 0.0
        else:
            assert kl > 0.0
        assert ad.kl_bernoulli_vec(Tensor([q]), Tensor([q])).item() == 0.0


def test_bernoulli_kl_rejects_boundary():
    with pytest.raises(DomainError):
        ad.kl_bernoulli_vec(Tensor([0.0]), Tensor([0.5]))
    with pytest.raises(DomainError):
        ad.kl_bernoulli_vec(Tensor([0.5]), Tensor([1.0]))


def test_bernoulli_kl_gradients():
    rng = np.random.default_rng(13)
    params = make_params(rng, (5,), (5,))
    q, p = (pp.tensor for pp in params)
    q.values = 0.04 + 0.92 * (1.0 / (1.0 + np.exp(-q.values)))
    p.values = 0.04 + 0.92 * (1.0 / (1.0 + np.exp(-p.values)))

    def loss_fn():
        return ad.kl_bernoulli_vec(q, p)

    gradcheck(loss_fn, params)


def test_gaussian_log_likelihood_at_mean():
    ll = ad.gaussian_log_likelihood(Tensor([0.7]), Tensor([0.7]), Tensor([1.0]))
    assert abs(ll.item() - (-0.5 * math.log(2 * math.pi))) < 1e-12
    assert abs(ll.item() + 0.9189) < 1e-4


def test_gaussian_log_likelihood_unit_residual():
    ll = ad.gaussian_log_likelihood(Tensor([1.7]), Tensor([0.7]), Tensor([1.0]))
    assert abs(ll.item() - (-0.5 * math.log(2 * math.pi) - 0.5)) < 1e-12


def test_gaussian_log_likelihood_density_integrates_to_one():
    mu, sigma = 0.4, 1.7

    def log_density(x):
        return ad.gaussian_log_likelihood(Tensor([x]), Tensor([mu]), Tensor([sigma])).item()

    integral = density_integral(log_density, mu - 12 * sigma, mu + 12 * sigma, n=20_001)
    assert abs(integral - 1.0) < 1e-4


def test_gaussian_log_likelihood_rejects_bad_sigma():
    with pytest.raises(DomainError):
        ad.gaussian_log_likelihood(Tensor([0.0]), Tensor([0.0]), Tensor([0.0]))


def test_gaussian_log_likelihood_gradients():
    rng = np.random.default_rng(14)
    params = make_params(rng, (2, 3), (2, 3))
    mu, sigma = (p.tensor for p in params)
    sigma.values = np.abs(sigma.values) + 0.4
    x = rng.standard_normal((2, 3))

    def loss_fn():
        return ad.gaussian_log_likelihood(x, mu, sigma)

    gradcheck(loss_fn, params)


def test_binary_cross_entropy_uniform_prediction():
    probs = Tensor(np.full((1, 4), 0.5))
    targets = np.array([[1.0, 0.0, 1.0, 0.0]])
    bce = ad.binary_cross_entropy(probs, targets).item()
    assert abs(bce - 4 * math.log(2.0)) < 1e-12


def test_binary_cross_entropy_targets_stay_constant():
    rng = np.random.default_rng(15)
    params = make_params(rng, (3, 4))
    logits = params[0].tensor
    target_tensor = Tensor(rng.uniform(0.1, 0.9, (3, 4)), requires_grad=True)

    def loss_fn():
        probs = ad.clamp(ad.sigmoid(logits), ad.PROB_EPS, 1 - ad.PROB_EPS)
        return ad.binary_cross_entropy(probs, target_tensor)

    gradcheck(loss_fn, params)
    backward_grads(loss_fn, params)
    assert target_tensor.grad is None


def test_bernoulli_entropy_peak_at_half():
    assert abs(ad.bernoulli_entropy(Tensor([0.5])).item() - math.log(2.0)) < 1e-12
    rng = np.random.default_rng(16)
    params = make_params(rng, (4,))
    q = params[0].tensor
    q.values = 0.1 + 0.8 * (1.0 / (1.0 + np.exp(-q.values)))
    gradcheck(lambda: ad.bernoulli_entropy(q), params)


def test_parameter_names_must_be_unique():
    t = Tensor([0.0], requires_grad=True)
    with pytest.raises(ValueError):
        ad.check_unique_names([Parameter("w", t), Parameter("w", t)])


def test_grad_shape_matches_values_shape():
    rng = np.random.default_rng(17)
    x = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = ad.sigmoid(x).sum()
        tape.backward(loss)
    assert x.grad.shape == x.values.shape


def test_central_difference_oracle_on_known_function():
    # sanity-check the oracle itself on f(w) = sum(w^3), df/dw = 3w^2
    rng = np.random.default_rng(18)
    params = make_params(rng, (4,))
    w = params[0].tensor
    numeric = central_difference(lambda: float(np.sum(w.values**3)), params)
    np.testing.assert_allclose(numeric[0], 3 * w.values**2, rtol=1e-6, atol=1e-8)
