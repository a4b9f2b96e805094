"""Acceptance checks. Each test carries a ``criterion`` marker; the terminal summary
prints one PASS/FAIL line per criterion with its measured numbers."""
import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import integrate

from distbnn import autodiff as ad
from distbnn import bnn, consensus, experiments
from distbnn.autodiff import Tape, Tensor, backward, finite_difference_gradient
from distbnn.bnn import PriorSpec
from distbnn.cli import main as cli_main
from distbnn.protocol import DecodeError, Kind, complete_message, decode_message, encode_message, state_message

from helpers import fuzz_run

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def note(request, text):
    request.node.user_properties.append(("detail", text))


# ---------------------------------------------------------------------------

def quad_kl(m0, s0, m1, s1):
    def logpdf(x, m, s):
        return -0.5 * ((x - m) / s) ** 2 - math.log(s) - 0.5 * math.log(2 * math.pi)

    val, _ = integrate.quad(
        lambda x: math.exp(logpdf(x, m0, s0)) * (logpdf(x, m0, s0) - logpdf(x, m1, s1)),
        m0 - 14 * s0, m0 + 14 * s0, epsabs=1e-12, epsrel=1e-12, limit=200,
    )
    return val


@pytest.mark.criterion("kl-oracle")
def test_kl_matches_quadrature(request):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        m0, m1 = rng.uniform(-3, 3, 2)
        s0, s1 = rng.uniform(0.2, 3, 2)
        worst = max(worst, abs(bnn.kl_gaussian(m0, s0, m1, s1) - quad_kl(m0, s0, m1, s1)))
    dt = time.perf_counter() - t0
    note(request, f"max abs err {worst:.2e} (< 1e-6), {dt:.2f}s (< 5s)")
    assert worst < 1e-6 and dt < 5.0


# ---------------------------------------------------------------------------

def max_rel_err(loss, params):
    """Largest relative error between tape gradients and central differences over ``params``."""
    leaves = {k: Tensor(v) for k, v in params.items()}
    with Tape() as tape:
        out = loss(leaves)
    adj = backward(out, tape, wrt=leaves.values())
    worst = 0.0
    for name, leaf in leaves.items():
        def f(x, name=name):
            return float(loss({**leaves, name: Tensor(x)}).value)

        fd = finite_difference_gradient(f, leaf.value, h=1e-6)
        g = adj[id(leaf)]
        worst = max(worst, np.abs(g - fd).max() / max(1e-6, np.abs(fd).max(), np.abs(g).max()))
    return worst


def gradient_cases():
    rng = np.random.default_rng(31)
    v, w = rng.normal(size=5), rng.normal(size=5)
    away = np.array([-1.3, -0.4, 0.6, 1.7, -2.2])  # off the relu/clip kinks
    W = Tensor(w)
    cases = {
        "matmul": (lambda L: ad.sum(ad.square(ad.matmul(L["a"], L["b"]))),
                   {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 2))}),
        "add": (lambda L: ad.sum(ad.square(ad.add(L["a"], L["b"]))), {"a": v, "b": w}),
        "add-column": (lambda L: ad.sum(ad.square(ad.add(L["a"], L["b"]))),
                       {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=3)}),
        "sub": (lambda L: ad.sum(ad.square(ad.sub(L["a"], L["b"]))), {"a": v, "b": w}),
        "scalar-mul": (lambda L: ad.sum(ad.mul(ad.scalar_mul(L["a"], -2.5), W)), {"a": v}),
        "elementwise-mul": (lambda L: ad.sum(ad.mul(L["a"], L["b"])), {"a": v, "b": w}),
        "sum": (lambda L: ad.square(ad.sum(L["a"])), {"a": v}),
        "dot": (lambda L: ad.dot(L["a"], L["b"]), {"a": v, "b": w}),
        "sin": (lambda L: ad.sum(ad.mul(ad.sin(L["a"]), W)), {"a": v}),
        "relu": (lambda L: ad.sum(ad.mul(ad.relu(L["a"]), W)), {"a": away}),
        "sigmoid": (lambda L: ad.sum(ad.mul(ad.sigmoid(L["a"]), W)), {"a": v}),
        "softplus": (lambda L: ad.sum(ad.mul(ad.softplus(L["a"]), W)), {"a": v}),
        "log": (lambda L: ad.sum(ad.mul(ad.log(L["a"]), W)), {"a": rng.uniform(0.5, 2, 5)}),
        "exp": (lambda L: ad.sum(ad.mul(ad.exp(L["a"]), W)), {"a": v}),
        "square": (lambda L: ad.sum(ad.mul(ad.square(L["a"]), W)), {"a": v}),
        "clip": (lambda L: ad.sum(ad.mul(ad.clip(L["a"], -1.0, 1.0), W)), {"a": away}),
    }

    X = Tensor(rng.uniform(-1, 1, (2, 7)))
    siren = {"siren.weight": rng.uniform(-0.5, 0.5, (6, 2)), "siren.bias": rng.uniform(-0.5, 0.5, 6)}
    proj = Tensor(rng.normal(size=(6, 7)))
    # omega0 = 30 is too stiff for central differences at h = 1e-6; the code path is identical
    cases["layer:siren"] = (lambda L: ad.sum(ad.mul(bnn.siren_forward(L, X, 3.0), proj)), siren)

    h = Tensor(rng.uniform(0.2, 1.0, (4, 5)))
    lin = {"l.weight.mu": rng.normal(size=(3, 4)), "l.weight.rho": rng.normal(-1, 0.5, (3, 4)),
           "l.bias.mu": rng.normal(size=3), "l.bias.rho": rng.normal(-1, 0.5, 3)}
    noise = {"l.weight": rng.standard_normal((3, 4)), "l.bias": rng.standard_normal(3)}
    proj3 = Tensor(rng.normal(size=(3, 5)))
    for act in ("relu", "sigmoid", "none"):
        cases[f"layer:bayesian-{act}"] = (
            lambda L, act=act: ad.sum(ad.mul(bnn.linear_forward(L, "l", h, noise, act), proj3)), lin)
    y5 = rng.integers(0, 2, 5)
    dense = {"o.weight": rng.normal(size=(1, 4)), "o.bias": rng.normal(size=1)}
    cases["layer:dense-output"] = (
        lambda L: bnn.bce_tensor(bnn.linear_forward(L, "o", h, None, "sigmoid", gaussian=False), y5), dense)

    model = bnn.init_model(np.random.default_rng(4), hidden_width=5, hidden_layers=2, omega0=3.0, rho_init=-1.0,
                           output_bayesian=True)
    params = {k: t.value for k, t in bnn.model_leaves(model).items()}
    cases["model_kl_to_prior"] = (lambda L: bnn.model_kl_tensor(model, L, PriorSpec(0.3, 1.5)), params)
    pts = rng.uniform(-1, 1, (9, 2))
    y9 = rng.integers(0, 2, 9)
    frozen = bnn.draw_noise(model, rng)
    cases["bce(sample_forward)"] = (lambda L: bnn.bce_tensor(bnn.forward_tensor(model, pts, L, frozen), y9), params)

    rho_reg, mu, mu_reg = rng.normal(-1, 1, 7), rng.normal(size=7), rng.normal(size=7)
    cases["kl_rho_regularization"] = (lambda L: consensus.kl_rho_tensor(L["r"], rho_reg), {"r": rng.normal(-1, 1, 7)})
    cases["kl_rho_regularization+mu"] = (
        lambda L: consensus.kl_rho_tensor(L["r"], rho_reg, mu, mu_reg), {"r": rng.normal(-1, 1, 7)})
    return cases


@pytest.mark.criterion("gradient-correctness")
def test_gradients_match_finite_differences(request):
    t0 = time.perf_counter()
    cases = gradient_cases()
    missing = set(ad.PRIMITIVES) - set(cases)
    errs = {name: max_rel_err(f, p) for name, (f, p) in cases.items()}
    dt = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    note(request, f"{len(errs)} cases, worst {worst} {errs[worst]:.1e} (< 1e-4), {dt:.1f}s (< 30s)")
    assert not missing, missing
    assert errs[worst] < 1e-4 and dt < 30.0


# ---------------------------------------------------------------------------

@pytest.mark.criterion("reparameterization-collapse")
def test_sampling_collapses_to_mean_at_tiny_spread(request):
    model = bnn.init_model(np.random.default_rng(0), hidden_width=64, hidden_layers=2, output_bayesian=True)
    model = model.with_params({n: np.full_like(a, -40.0) for n, g, a in model.named_params() if g == bnn.RHO})
    pts = np.random.default_rng(1).uniform(-1, 1, (1000, 2))
    diff = np.abs(bnn.sample_forward(model, pts, np.random.default_rng(2))
                  - bnn.deterministic_forward(model, pts)).max()
    note(request, f"max |sample - mean| {diff:.1e} over 1000 inputs (< 1e-6)")
    assert diff < 1e-6


# ---------------------------------------------------------------------------

@pytest.mark.criterion("protocol-safety-liveness")
def test_fuzzed_schedules(request):
    t0 = time.perf_counter()
    bad, totals = [], set()
    for seed in range(200):
        problems, total = fuzz_run(seed, n=7, max_round=10)
        totals.add(total)
        if problems:
            bad.append((seed, problems[:3]))
    dt = time.perf_counter() - t0
    note(request, f"200 schedules, {len(bad)} unsafe, updates per run {sorted(totals)}, {dt:.1f}s (< 60s)")
    assert not bad, bad[:3]
    assert totals == {70} and dt < 60.0


@pytest.mark.criterion("consensus-oracle")
def test_quadratic_toy_reaches_mean(request, tmp_path):
    t0 = time.perf_counter()
    cfg = experiments.load_config(CONFIGS / "toy.cfg")
    res = experiments.run_quadratic_consensus(cfg, ccfg=experiments.TOY_CONSENSUS)
    dt = time.perf_counter() - t0
    oracle = float(np.mean(cfg.toy_targets))
    final = res["thetas"][:, -1]
    err = np.abs(final - oracle).max()
    note(request, f"final {np.round(final, 6).tolist()} vs {oracle}, max err {err:.1e} (< 1e-3), {dt:.1f}s (< 10s)")
    assert oracle == 3.0 and err < 1e-3 and dt < 10.0


# ---------------------------------------------------------------------------

@pytest.mark.slow
@pytest.mark.criterion("kl-weight-spread-ordering")
def test_kl_weight_orders_predictive_spread(request):
    t0 = time.perf_counter()
    stds = []
    for kl in (1e-4, 1e-2, 1.0):
        cfg = experiments.load_config(CONFIGS / "kl_sweep.cfg", kl_weight=kl, figures=False)
        stds.append(float(experiments.run_single_agent(cfg).std.mean()))
    dt = time.perf_counter() - t0
    note(request, f"mean std {', '.join(f'{s:.4f}' for s in stds)} for kl 1e-4, 1e-2, 1; {dt:.0f}s (< 300s)")
    assert stds[0] < stds[1] < stds[2] and dt < 300.0


@pytest.mark.slow
@pytest.mark.criterion("uncertainty-localization")
def test_unobserved_half_is_more_uncertain(request):
    ratios = []
    for seed in range(5):
        cfg = experiments.load_config(CONFIGS / "localization.cfg", seed=seed, figures=False)
        res = experiments.run_single_agent(cfg)
        observed = res.extras["data"].validation.points[:, 0] < 0
        ratios.append(float(res.std[~observed].mean() / res.std[observed].mean()))
    wins = sum(r > 1.2 for r in ratios)
    note(request, f"ratios {', '.join(f'{r:.2f}' for r in ratios)}; {wins}/5 above 1.2 (need 4)")
    assert wins >= 4


@pytest.mark.slow
@pytest.mark.criterion("strategy-comparison")
def test_split_kl_reduces_validation_loss(request, capsys):
    t0 = time.perf_counter()
    logs = {}
    for seed in range(5):
        cfg = experiments.load_config(CONFIGS / "multi.cfg", seed=seed, figures=False)
        for strategy, out in experiments.run_multi_agent(cfg).items():
            logs.setdefault(strategy, {})[seed] = out.metrics
    dt = time.perf_counter() - t0
    report = experiments.compare_strategies(logs)
    with capsys.disabled():
        print("\n" + report.to_text())
    loss = report.final_loss
    worse = max(("split_l2", "uniform_l2"), key=loss.get)
    reduction = report.reductions[worse]
    note(request, f"split_kl {loss['split_kl']:.4f}, split_l2 {loss['split_l2']:.4f}, "
                  f"uniform_l2 {loss['uniform_l2']:.4f}; {reduction:.1f}% vs {worse} (>= 5%), {dt:.0f}s (< 1800s)")
    assert loss["split_kl"] <= loss["split_l2"] and loss["split_kl"] <= loss["uniform_l2"]
    assert reduction >= 5.0 and dt < 1800.0


@pytest.mark.slow
@pytest.mark.criterion("determinism")
def test_repeated_cli_runs_are_byte_identical(request, tmp_path, capsys):
    dirs = [tmp_path / "a", tmp_path / "b"]
    for d in dirs:
        assert cli_main(["run-multi", "--config", str(CONFIGS / "multi.cfg"), "--seed", "3", "--out", str(d)]) == 0
    capsys.readouterr()
    files = sorted(p.relative_to(dirs[0]) for p in dirs[0].rglob("*.csv") if p.name != "timings.csv")
    checked = [f for f in files if f.name == "metrics.csv" or f.name.startswith("heatmap")]
    differing = [str(f) for f in files if (dirs[0] / f).read_bytes() != (dirs[1] / f).read_bytes()]
    note(request, f"{len(files)} CSVs compared ({len(checked)} metrics/heatmap), {len(differing)} differ")
    assert len(checked) >= 9 and not differing


# ---------------------------------------------------------------------------

def random_message(rng):
    if rng.integers(0, 2):
        return complete_message(int(rng.integers(0, 2**32)), int(rng.integers(0, 2**32)))
    bits = rng.integers(0, 2**64, size=int(rng.integers(0, 500)), dtype=np.uint64)
    return state_message(int(rng.integers(0, 2**32)), int(rng.integers(0, 2**32)), bits.view(np.float64))


@pytest.mark.criterion("codec")
def test_codec_round_trips_and_rejects_truncation(request):
    rng = np.random.default_rng(99)
    mismatches = 0
    for _ in range(1000):
        msg = random_message(rng)
        back = decode_message(encode_message(msg))
        same = back.kind == msg.kind and back.round == msg.round and back.sender == msg.sender
        if msg.kind == Kind.STATE:
            same = same and back.payload.tobytes() == msg.payload.astype("<f8").tobytes()
        mismatches += not same
    accepted = 0
    for _ in range(100):
        wire = encode_message(random_message(rng))
        cut = int(rng.integers(0, len(wire)))
        try:
            decode_message(wire[:cut])
            accepted += 1
        except DecodeError:
            pass
    note(request, f"1000 round-trips, {mismatches} mismatched; 100 truncations, {accepted} accepted")
    assert mismatches == 0 and accepted == 0
