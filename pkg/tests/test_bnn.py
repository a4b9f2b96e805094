import math

import numpy as np
import pytest
from scipy import integrate, stats

from distbnn import autodiff as ad
from distbnn import bnn
from distbnn.autodiff import Tape, Tensor, backward, finite_difference_gradient
from distbnn.bnn import BayesianLinear, DenseLinear, GaussianParam, PriorSpec


def small_model(seed=0, output_bayesian=True, rho=-3.0):
    return bnn.init_model(np.random.default_rng(seed), hidden_width=6, hidden_layers=2, rho_init=rho,
                          output_bayesian=output_bayesian)


def with_all_rho(model, value):
    return model.with_params({n: np.full_like(a, value) for n, g, a in model.named_params() if g == bnn.RHO})


def kl_by_quadrature(m0, s0, m1, s1):
    p, q = stats.norm(m0, s0), stats.norm(m1, s1)
    f = lambda x: p.pdf(x) * (p.logpdf(x) - q.logpdf(x))
    val, _ = integrate.quad(f, m0 - 14 * s0, m0 + 14 * s0, epsabs=1e-12, epsrel=1e-12, limit=200)
    return val


def leaf_gradient_check(loss_of_leaves, model, tol=1e-4):
    """Tape gradient vs central differences for every parameter tensor of ``model``."""
    leaves = bnn.model_leaves(model)
    with Tape() as tape:
        loss = loss_of_leaves(leaves)
    adj = backward(loss, tape, wrt=leaves.values())
    for name, leaf in leaves.items():
        def f(x, name=name):
            trial = dict(leaves)
            trial[name] = Tensor(x)
            return float(loss_of_leaves(trial).value)

        fd = finite_difference_gradient(f, leaf.value, h=1e-6)
        g = adj[id(leaf)]
        scale = max(1e-6, np.abs(fd).max(), np.abs(g).max())
        assert np.abs(g - fd).max() / scale < tol, name


# ---------------------------------------------------------------------------
# sigma and KL

def test_sigma_from_rho_examples():
    assert bnn.sigma_from_rho(np.array(0.0)) == pytest.approx(0.693147, abs=1e-6)
    s = bnn.sigma_from_rho(np.array(-40.0))
    assert 0 < s < 1e-15
    assert abs(bnn.sigma_from_rho(np.array(50.0)) - 50.0) < 1e-12


def test_sigma_positive_everywhere():
    rho = np.linspace(-60, 60, 2001)
    assert (bnn.sigma_from_rho(rho) > 0).all()


@pytest.mark.parametrize("args,expected", [((0, 1, 0, 1), 0.0), ((1, 1, 0, 1), 0.5), ((0, 2, 0, 1), 0.806853)])
def test_kl_gaussian_examples(args, expected):
    assert bnn.kl_gaussian(*args) == pytest.approx(expected, abs=1e-6)


def test_kl_gaussian_matches_quadrature_on_random_quadruples():
    rng = np.random.default_rng(0)
    for _ in range(25):
        m0, m1 = rng.uniform(-3, 3, 2)
        s0, s1 = rng.uniform(0.2, 3, 2)
        assert abs(bnn.kl_gaussian(m0, s0, m1, s1) - kl_by_quadrature(m0, s0, m1, s1)) < 1e-6


def test_kl_gaussian_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        bnn.kl_gaussian(0, 0, 0, 1)


def test_model_kl_examples():
    one = bnn.kl_to_prior_tensor(Tensor([1.0]), Tensor([math.log(math.e - 1)]), PriorSpec())
    assert float(one.value) == pytest.approx(0.5, abs=1e-12)
    m = small_model()
    rho_one = math.log(math.e - 1.0)  # softplus(rho_one) == 1
    at_prior = m.with_params({n: (np.zeros_like(a) if g == bnn.MU else np.full_like(a, rho_one))
                              for n, g, a in m.named_params() if n.startswith(("hidden", "output"))})
    assert bnn.model_kl_to_prior(at_prior) == pytest.approx(0.0, abs=1e-9)


def test_model_kl_is_sum_of_scalar_kls():
    m = small_model(3)
    expected = sum(
        bnn.kl_gaussian(mu, s, 0.0, 1.0)
        for _, gp in m.gaussian_params()
        for mu, s in zip(gp.mu.ravel(), gp.sigma.ravel())
    )
    assert bnn.model_kl_to_prior(m) == pytest.approx(expected, rel=1e-10)


def test_model_kl_monotone_in_mean_offset():
    m = small_model(1)
    base = bnn.model_kl_to_prior(m)
    mu = m.get("hidden.0.weight.mu").copy()
    mu[0, 0] = abs(mu[0, 0]) + 0.5
    bigger = m.with_params({"hidden.0.weight.mu": mu})
    mu2 = mu.copy()
    mu2[0, 0] += 1.0
    biggest = m.with_params({"hidden.0.weight.mu": mu2})
    assert base < bnn.model_kl_to_prior(bigger) < bnn.model_kl_to_prior(biggest)


# ---------------------------------------------------------------------------
# losses

def test_total_loss_examples():
    assert bnn.total_loss(0.5, 0.1, 2.0) == pytest.approx(0.7)
    assert bnn.total_loss(0.5, 0.0, 2.0) == 0.5
    assert bnn.total_loss(0.5, 0.3, 0.0) == 0.5
    with pytest.raises(ValueError):
        bnn.total_loss(0.5, -1.0, 1.0)


def test_bce_examples():
    assert bnn.bce_loss([0.5], [1]) == pytest.approx(0.693147, abs=1e-6)
    assert bnn.bce_loss([1.0, 0.0], [1, 0]) <= -math.log(1 - 1e-7) + 1e-12
    rng = np.random.default_rng(2)
    p, y = rng.uniform(0.01, 0.99, 20), rng.integers(0, 2, 20)
    assert bnn.bce_loss(p, y) == pytest.approx(bnn.bce_loss(1 - p, 1 - y), abs=1e-12)
    with pytest.raises(ValueError):
        bnn.bce_loss([0.5, 0.5], [1])


def test_bce_tensor_agrees_with_numpy():
    rng = np.random.default_rng(4)
    p, y = rng.uniform(0.01, 0.99, (1, 9)), rng.integers(0, 2, 9)
    assert float(bnn.bce_tensor(Tensor(p), y).value) == pytest.approx(bnn.bce_loss(p, y), abs=1e-12)


# ---------------------------------------------------------------------------
# forward passes

def test_forward_shapes_and_range():
    m = small_model()
    pts = np.random.default_rng(0).uniform(-1, 1, (17, 2))
    out = bnn.sample_forward(m, pts, np.random.default_rng(1))
    assert out.shape == (17,) and ((out > 0) & (out < 1)).all()
    assert isinstance(bnn.deterministic_forward(m, pts[0]), float)


def test_same_seed_gives_identical_samples():
    m = small_model()
    pts = np.random.default_rng(0).uniform(-1, 1, (5, 2))
    a = bnn.sample_forward(m, pts, np.random.default_rng(9))
    b = bnn.sample_forward(m, pts, np.random.default_rng(9))
    assert np.array_equal(a, b)


def test_collapsed_spread_equals_deterministic():
    m = with_all_rho(small_model(), -40.0)
    pts = np.random.default_rng(0).uniform(-1, 1, (50, 2))
    for seed in range(3):
        s = bnn.sample_forward(m, pts, np.random.default_rng(seed))
        assert np.abs(s - bnn.deterministic_forward(m, pts)).max() < 1e-6
    mean, std = bnn.predictive_stats(m, pts, 10, np.random.default_rng(0))
    assert std.max() < 1e-6
    assert np.abs(mean - bnn.deterministic_forward(m, pts)).max() < 1e-6


def test_deterministic_forward_zero_output_layer_and_seed_independence():
    m = small_model(output_bayesian=False)
    zero = m.with_params({"output.weight": np.zeros((1, 6)), "output.bias": np.zeros(1)})
    pts = np.random.default_rng(0).uniform(-1, 1, (4, 2))
    assert np.array_equal(bnn.deterministic_forward(zero, pts), np.full(4, 0.5))
    assert np.array_equal(bnn.deterministic_forward(m, pts), bnn.deterministic_forward(m.copy(), pts))


def test_predictive_stats_defaults_and_repeatability():
    import inspect

    assert inspect.signature(bnn.predictive_stats).parameters["n_samples"].default == 50
    m = small_model()
    pts = np.random.default_rng(0).uniform(-1, 1, (8, 2))
    a = bnn.predictive_stats(m, pts, rng=np.random.default_rng(3))
    b = bnn.predictive_stats(m, pts, rng=np.random.default_rng(3))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    with pytest.raises(ValueError):
        bnn.predictive_stats(m, pts, 1)


def test_single_neuron_variance_matches_sigma_squared():
    rho_one = math.log(math.e - 1.0)
    leaves = {
        "n.weight.mu": Tensor([[0.0]]), "n.weight.rho": Tensor([[rho_one]]),
        "n.bias.mu": Tensor([0.0]), "n.bias.rho": Tensor([-40.0]),
    }
    rng = np.random.default_rng(11)
    x = Tensor([[1.0]])
    draws = np.empty(100_000)
    for k in range(draws.size):
        noise = {"n.weight": rng.standard_normal((1, 1)), "n.bias": rng.standard_normal(1)}
        draws[k] = bnn.linear_forward(leaves, "n", x, noise, "none").value[0, 0]
    assert abs(draws.var() - 1.0) < 0.05


# ---------------------------------------------------------------------------
# gradients

def test_siren_layer_gradients():
    m = small_model()
    X = Tensor(np.random.default_rng(5).uniform(-1, 1, (2, 7)))
    w = np.random.default_rng(6).normal(size=(6, 7))
    # omega0 = 30 makes the layer stiff; a smaller frequency keeps central differences accurate
    leaf_gradient_check(lambda L: ad.sum(ad.mul(bnn.siren_forward(L, X, 3.0), Tensor(w))), m)


@pytest.mark.parametrize("activation", ["relu", "sigmoid", "none"])
def test_bayesian_linear_gradients(activation):
    rng = np.random.default_rng(8)
    layer = {
        "l.weight.mu": Tensor(rng.normal(size=(3, 4))), "l.weight.rho": Tensor(rng.normal(-1, 0.5, (3, 4))),
        "l.bias.mu": Tensor(rng.normal(size=3)), "l.bias.rho": Tensor(rng.normal(-1, 0.5, 3)),
    }
    noise = {"l.weight": rng.standard_normal((3, 4)), "l.bias": rng.standard_normal(3)}
    h = Tensor(rng.uniform(0.2, 1.0, (4, 5)))
    w = rng.normal(size=(3, 5))

    def loss(L):
        return ad.sum(ad.mul(bnn.linear_forward(L, "l", h, noise, activation), Tensor(w)))

    with Tape() as tape:
        out = loss(layer)
    adj = backward(out, tape, wrt=layer.values())
    for name, leaf in layer.items():
        def f(x, name=name):
            trial = dict(layer)
            trial[name] = Tensor(x)
            return float(loss(trial).value)

        fd = finite_difference_gradient(f, leaf.value, h=1e-6)
        assert np.abs(adj[id(leaf)] - fd).max() / max(1e-6, np.abs(fd).max()) < 1e-4, name


def test_dense_output_layer_gradients():
    rng = np.random.default_rng(9)
    leaves = {"o.weight": Tensor(rng.normal(size=(1, 4))), "o.bias": Tensor(rng.normal(size=1))}
    h = Tensor(rng.normal(size=(4, 6)))
    y = rng.integers(0, 2, 6)
    loss = lambda L: bnn.bce_tensor(bnn.linear_forward(L, "o", h, None, "sigmoid", gaussian=False), y)
    with Tape() as tape:
        out = loss(leaves)
    adj = backward(out, tape, wrt=leaves.values())
    for name, leaf in leaves.items():
        fd = finite_difference_gradient(lambda x: float(loss({**leaves, name: Tensor(x)}).value), leaf.value, 1e-6)
        assert np.abs(adj[id(leaf)] - fd).max() / max(1e-6, np.abs(fd).max()) < 1e-4


def test_model_kl_gradients():
    m = small_model(2)
    leaf_gradient_check(lambda L: bnn.model_kl_tensor(m, L, PriorSpec(0.3, 1.5)), m)


def test_bce_of_sample_forward_gradients_with_frozen_noise():
    m = bnn.init_model(np.random.default_rng(4), hidden_width=5, hidden_layers=2, omega0=3.0, rho_init=-1.0,
                       output_bayesian=True)
    rng = np.random.default_rng(12)
    pts = rng.uniform(-1, 1, (9, 2))
    y = rng.integers(0, 2, 9)
    noise = bnn.draw_noise(m, rng)
    leaf_gradient_check(lambda L: bnn.bce_tensor(bnn.forward_tensor(m, pts, L, noise), y), m)


# ---------------------------------------------------------------------------
# model plumbing

def test_model_shapes_chain_and_validate():
    m = bnn.init_model(np.random.default_rng(0))
    assert m.hidden_width == 256 and len(m.hidden) == 4
    with pytest.raises(ValueError):
        bnn.BnnModel(m.siren, m.hidden[:1], DenseLinear(np.zeros((1, 3)), np.zeros(1)))
    with pytest.raises(ValueError):
        GaussianParam(np.zeros(3), np.zeros(2))


def test_named_params_are_canonical():
    names = [n for n, _, _ in small_model().named_params()]
    assert names[:2] == ["siren.weight", "siren.bias"]
    assert names[2:6] == ["hidden.0.weight.mu", "hidden.0.weight.rho", "hidden.0.bias.mu", "hidden.0.bias.rho"]
    assert len(names) == len(set(names))


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    m = small_model(5, output_bayesian=False)
    bnn.save_checkpoint(m, tmp_path / "m.ckpt")
    back = bnn.load_checkpoint(tmp_path / "m.ckpt")
    for (n1, g1, a1), (n2, g2, a2) in zip(m.named_params(), back.named_params()):
        assert (n1, g1) == (n2, g2) and np.array_equal(a1, a2)
    (tmp_path / "bad.ckpt").write_text("nope\n")
    with pytest.raises(ValueError):
        bnn.load_checkpoint(tmp_path / "bad.ckpt")
