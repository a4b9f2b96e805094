"""Primal-dual consensus updates for a group of agents sharing one model layout.

Each agent holds its parameters split into a mean group (all deterministic
weights plus every Gaussian mean) and a spread group (every Gaussian ``rho``),
together with one dual vector per group. One node update:

1. averages its own and its peers' parameters into a regularization target,
2. moves the duals by ``penalty * (own - target)``,
3. runs a fixed number of SGD steps on the mean group and the spread group,
   each against its own loss.

The spread-group loss never sees the prediction loss unless
``rho_learns_likelihood`` is set; this mirrors the split optimization used for
the regularization strategy comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bnn import MU, RHO, BnnModel, PriorSpec, bce_tensor, forward_tensor, draw_noise, model_kl_tensor

STRATEGIES = ("uniform_l2", "split_l2", "split_kl")


class LayoutMismatch(ValueError):
    pass


class PrimalDivergence(ArithmeticError):
    pass


@dataclass(frozen=True)
class Layout:
    """Ordered ``(name, group, shape)`` triples describing a flat parameter vector."""

    entries: tuple[tuple[str, str, tuple[int, ...]], ...]

    @classmethod
    def of(cls, model: BnnModel) -> "Layout":
        return cls(tuple((n, g, a.shape) for n, g, a in model.named_params()))

    def names(self, group: str) -> list[str]:
        return [n for n, g, _ in self.entries if g == group]

    def size(self, group: str) -> int:
        return sum(math.prod(s) for _, g, s in self.entries if g == group)

    def split(self, group: str, flat: np.ndarray) -> dict[str, np.ndarray]:
        out, off = {}, 0
        for name, g, shape in self.entries:
            if g != group:
                continue
            n = math.prod(shape)
            out[name] = flat[off : off + n].reshape(shape)
            off += n
        return out


@dataclass(frozen=True)
class AgentState:
    theta_mu: np.ndarray
    theta_rho: np.ndarray
    layout: Layout

    def __post_init__(self):
        if self.theta_mu.size != self.layout.size(MU) or self.theta_rho.size != self.layout.size(RHO):
            raise LayoutMismatch("parameter vectors do not match layout")

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.theta_mu, self.theta_rho])

    @classmethod
    def from_vector(cls, vec: np.ndarray, layout: Layout) -> "AgentState":
        k = layout.size(MU)
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != k + layout.size(RHO):
            raise LayoutMismatch(f"vector of length {vec.size} does not match layout")
        return cls(vec[:k].copy(), vec[k:].copy(), layout)

    def arrays(self) -> dict[str, np.ndarray]:
        return {**self.layout.split(MU, self.theta_mu), **self.layout.split(RHO, self.theta_rho)}

    def __eq__(self, other):
        if not isinstance(other, AgentState):
            return NotImplemented
        return (
            self.layout == other.layout
            and np.array_equal(self.theta_mu, other.theta_mu)
            and np.array_equal(self.theta_rho, other.theta_rho)
        )


def flatten(model: BnnModel) -> AgentState:
    layout = Layout.of(model)
    mu = [a.reshape(-1) for _, g, a in model.named_params() if g == MU]
    rho = [a.reshape(-1) for _, g, a in model.named_params() if g == RHO]
    return AgentState(
        np.concatenate(mu) if mu else np.zeros(0),
        np.concatenate(rho) if rho else np.zeros(0),
        layout,
    )


def unflatten(state: AgentState, template: BnnModel) -> BnnModel:
    if Layout.of(template) != state.layout:
        raise LayoutMismatch("state layout does not match model")
    return template.with_params(state.arrays())


@dataclass(frozen=True)
class DualState:
    duals_mu: np.ndarray
    duals_rho: np.ndarray

    @classmethod
    def zeros_like(cls, state: AgentState) -> "DualState":
        return cls(np.zeros_like(state.theta_mu), np.zeros_like(state.theta_rho))


@dataclass(frozen=True)
class RegularizationTarget:
    theta_reg_mu: np.ndarray
    theta_reg_rho: np.ndarray


@dataclass(frozen=True)
class ConsensusConfig:
    W_mu: float = 0.5
    W_rho: float = 0.5
    penalty: float = 1.0
    primal_iters: int = 10
    learning_rate_mu: float = 1e-3
    learning_rate_rho: float = 1e-3
    strategy: str = "split_kl"
    batch_size: int = 256
    rho_learns_likelihood: bool = False
    kl_pairs_mu: bool = False
    # multiplier applied to the penalty once per round; 1.0 keeps it constant
    penalty_growth: float = 1.0

    def __post_init__(self):
        for name in ("W_mu", "W_rho", "penalty", "learning_rate_mu", "learning_rate_rho", "penalty_growth"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")
        if self.penalty <= 0 or self.learning_rate_mu <= 0 or self.learning_rate_rho <= 0:
            raise ValueError("penalty and learning rates must be positive")
        if self.primal_iters < 1 or self.batch_size < 1:
            raise ValueError("primal_iters and batch_size must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")

    def penalty_at(self, round_index: int) -> float:
        return self.penalty * self.penalty_growth**round_index


# ---------------------------------------------------------------------------
# consensus target and dual ascent

def compute_target(own: AgentState, peers: Sequence[AgentState]) -> RegularizationTarget:
    states = [own, *peers]
    for s in peers:
        if s.layout != own.layout:
            raise LayoutMismatch("peer state layout differs from own layout")
    mu = np.mean([s.theta_mu for s in states], axis=0)
    rho = np.mean([s.theta_rho for s in states], axis=0)
    return RegularizationTarget(mu, rho)


def dual_update(duals: DualState, own: AgentState, target: RegularizationTarget, penalty: float) -> DualState:
    return DualState(
        duals.duals_mu + penalty * (own.theta_mu - target.theta_reg_mu),
        duals.duals_rho + penalty * (own.theta_rho - target.theta_reg_rho),
    )


# ---------------------------------------------------------------------------
# regularizers

def l2_regularization(theta, theta_reg) -> float:
    theta = np.asarray(theta, dtype=np.float64)
    theta_reg = np.asarray(theta_reg, dtype=np.float64)
    if theta.shape != theta_reg.shape:
        raise ValueError(f"l2_regularization: shape mismatch {theta.shape} vs {theta_reg.shape}")
    return float(np.sum((theta - theta_reg) ** 2))


def l2_tensor(theta: Tensor, theta_reg: np.ndarray) -> Tensor:
    return ad.sum(ad.square(ad.sub(theta, Tensor(theta_reg))))


def kl_rho_tensor(rho: Tensor, rho_reg: np.ndarray, mu=None, mu_reg=None) -> Tensor:
    """Summed KL( N(m, softplus(rho)) || N(m_reg, softplus(rho_reg)) ).

    Means default to zero on both sides. Passing ``mu``/``mu_reg`` arrays adds
    the mean term, which is constant with respect to ``rho``.
    """
    sig_reg = ad.softplus_np(rho_reg)
    inv_var = 1.0 / sig_reg**2
    sigma = ad.softplus(rho)
    n = rho.value.size
    log_ratio = ad.add(
        Tensor(float(np.sum(np.log(sig_reg))) * 2.0),
        ad.scalar_mul(ad.sum(ad.log(sigma)), -2.0),
    )
    spread = ad.sum(ad.mul(ad.square(sigma), Tensor(inv_var)))
    extra = -float(n)
    if mu is not None:
        extra += float(np.sum((np.asarray(mu) - np.asarray(mu_reg)) ** 2 * inv_var))
    return ad.scalar_mul(ad.add(ad.add(log_ratio, spread), Tensor(extra)), 0.5)


def kl_rho_regularization(rho, rho_reg, mu=None, mu_reg=None) -> float:
    return float(kl_rho_tensor(Tensor(np.asarray(rho, dtype=np.float64)), np.asarray(rho_reg, dtype=np.float64), mu, mu_reg).value)


def _inner(leaves: list[Tensor], pieces: list[np.ndarray]) -> list[Tensor]:
    return [ad.sum(ad.mul(t, Tensor(p))) for t, p in zip(leaves, pieces)]


# ---------------------------------------------------------------------------
# objectives: anything that can score a set of named parameter tensors

class Objective(Protocol):
    def pred_loss(self, leaves: dict[str, Tensor], rng: np.random.Generator) -> Tensor: ...


@dataclass
class BnnObjective:
    """Minibatch BCE of a stochastic pass, optionally plus the prior KL term."""

    template: BnnModel
    points: np.ndarray
    labels: np.ndarray
    batch_size: int = 256
    kl_weight: float = 0.0
    prior: PriorSpec = field(default_factory=PriorSpec)
    _order: np.ndarray | None = field(default=None, repr=False)
    _cursor: int = field(default=0, repr=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.labels = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        if self.points.shape[0] == 0:
            raise ValueError("training data is empty")
        if self.points.shape[0] != self.labels.shape[0]:
            raise ValueError("points and labels differ in length")

    def next_batch(self, rng: np.random.Generator) -> np.ndarray:
        n = self.points.shape[0]
        b = min(self.batch_size, n)
        if self._order is None or self._cursor + b > n:
            self._order = rng.permutation(n)
            self._cursor = 0
        idx = self._order[self._cursor : self._cursor + b]
        self._cursor += b
        return idx

    def pred_loss(self, leaves, rng):
        idx = self.next_batch(rng)
        out = forward_tensor(self.template, self.points[idx], leaves, draw_noise(self.template, rng))
        loss = bce_tensor(out, self.labels[idx])
        if self.kl_weight > 0:
            loss = ad.add(loss, ad.scalar_mul(model_kl_tensor(self.template, leaves, self.prior), self.kl_weight))
        return loss



@dataclass
class QuadraticObjective:
    """``sum((theta - c)^2)`` over a single mean-group tensor named ``theta``."""

    c: float

    def pred_loss(self, leaves, rng):
        theta = leaves["theta"]
        return ad.sum(ad.square(ad.sub(theta, Tensor(np.full(theta.shape, self.c)))))


def scalar_layout(size: int = 1) -> Layout:
    return Layout((("theta", MU, (size,)),))


# ---------------------------------------------------------------------------
# primal optimization

@dataclass
class PrimalInfo:
    pred_loss: float
    loss_mu: float
    loss_rho: float


def primal_step_grads(
    state: AgentState,
    duals: DualState,
    target: RegularizationTarget,
    objective,
    cfg: ConsensusConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, PrimalInfo]:
    """Gradients of the mean-group and spread-group losses at ``state``."""
    layout = state.layout
    mu_names, rho_names = layout.names(MU), layout.names(RHO)
    mu_vals = layout.split(MU, state.theta_mu)
    rho_vals = layout.split(RHO, state.theta_rho)
    leaves = {n: Tensor(a) for n, a in {**mu_vals, **rho_vals}.items()}
    mu_leaves = [leaves[n] for n in mu_names]
    rho_leaves = [leaves[n] for n in rho_names]

    with ad.Tape() as tape:
        pred = objective.pred_loss(leaves, rng)
    g_pred = ad.backward(pred, tape, wrt=leaves.values())

    dmu = list(layout.split(MU, duals.duals_mu).values())
    drho = list(layout.split(RHO, duals.duals_rho).values())
    tmu = list(layout.split(MU, target.theta_reg_mu).values())
    trho = list(layout.split(RHO, target.theta_reg_rho).values())

    uniform = cfg.strategy == "uniform_l2"
    w_rho = cfg.W_mu if uniform else cfg.W_rho
    rho_sees_pred = uniform or cfg.rho_learns_likelihood

    with ad.Tape() as reg_tape:
        mu_terms = _inner(mu_leaves, dmu) + [
            ad.scalar_mul(l2_tensor(t, r), cfg.W_mu) for t, r in zip(mu_leaves, tmu)
        ]
        rho_terms = _inner(rho_leaves, drho)
        if cfg.strategy == "split_kl":
            for name, t, r in zip(rho_names, rho_leaves, trho):
                if cfg.kl_pairs_mu:
                    mu_name = name[: -len(".rho")] + ".mu"
                    mu_now = mu_vals[mu_name]
                    mu_tgt = layout.split(MU, target.theta_reg_mu)[mu_name]
                    rho_terms.append(ad.scalar_mul(kl_rho_tensor(t, r, mu_now, mu_tgt), w_rho))
                else:
                    rho_terms.append(ad.scalar_mul(kl_rho_tensor(t, r), w_rho))
        else:
            rho_terms += [ad.scalar_mul(l2_tensor(t, r), w_rho) for t, r in zip(rho_leaves, trho)]
        mu_reg = ad.stack_sum(mu_terms) if mu_terms else Tensor(0.0)
        rho_reg = ad.stack_sum(rho_terms) if rho_terms else Tensor(0.0)
        reg_total = ad.add(mu_reg, rho_reg)
    g_reg = ad.backward(reg_total, reg_tape, wrt=leaves.values())

    grad_mu = np.concatenate(
        [(g_pred[id(t)] + g_reg[id(t)]).reshape(-1) for t in mu_leaves]
    ) if mu_leaves else np.zeros(0)
    if rho_leaves:
        parts = []
        for t in rho_leaves:
            g = g_reg[id(t)]
            if rho_sees_pred:
                g = g + g_pred[id(t)]
            parts.append(g.reshape(-1))
        grad_rho = np.concatenate(parts)
    else:
        grad_rho = np.zeros(0)

    pred_v = float(pred.value)
    loss_rho = float(rho_reg.value) + (pred_v if rho_sees_pred else 0.0)
    info = PrimalInfo(pred_v, pred_v + float(mu_reg.value), loss_rho)
    return grad_mu, grad_rho, info


def primal_optimize_state(
    state: AgentState,
    duals: DualState,
    target: RegularizationTarget,
    objective,
    cfg: ConsensusConfig,
    rng: np.random.Generator,
) -> tuple[AgentState, list[PrimalInfo]]:
    theta_mu = state.theta_mu.copy()
    theta_rho = state.theta_rho.copy()
    history = []
    for it in range(cfg.primal_iters):
        current = AgentState(theta_mu, theta_rho, state.layout)
        try:
            g_mu, g_rho, info = primal_step_grads(current, duals, target, objective, cfg, rng)
        except ad.NonFiniteError as exc:
            raise PrimalDivergence(f"iteration {it}: non-finite value during loss evaluation ({exc})") from exc
        if not (math.isfinite(info.loss_mu) and math.isfinite(info.loss_rho)):
            raise PrimalDivergence(
                f"iteration {it}: non-finite loss (pred={info.pred_loss}, "
                f"loss_mu={info.loss_mu}, loss_rho={info.loss_rho})"
            )
        theta_mu = theta_mu - cfg.learning_rate_mu * g_mu
        theta_rho = theta_rho - cfg.learning_rate_rho * g_rho
        if not (np.isfinite(theta_mu).all() and np.isfinite(theta_rho).all()):
            raise PrimalDivergence(f"iteration {it}: parameters became non-finite")
        history.append(info)
    return AgentState(theta_mu, theta_rho, state.layout), history


def primal_optimize(
    model: BnnModel,
    duals: DualState,
    target: RegularizationTarget,
    data: tuple[np.ndarray, np.ndarray],
    cfg: ConsensusConfig,
    rng: np.random.Generator,
    kl_weight: float = 0.0,
    prior: PriorSpec = PriorSpec(),
) -> BnnModel:
    """Model-level wrapper: ``data`` is ``(points, labels)``."""
    points, labels = data
    obj = BnnObjective(model, points, labels, cfg.batch_size, kl_weight, prior)
    new_state, _ = primal_optimize_state(flatten(model), duals, target, obj, cfg, rng)
    return unflatten(new_state, model)


def node_update(
    state: AgentState,
    duals: DualState,
    peer_states: Sequence[AgentState],
    objective,
    cfg: ConsensusConfig,
    rng: np.random.Generator,
    round_index: int = 0,
) -> tuple[AgentState, DualState, list[PrimalInfo]]:
    target = compute_target(state, peer_states)
    duals = dual_update(duals, state, target, cfg.penalty_at(round_index))
    new_state, history = primal_optimize_state(state, duals, target, objective, cfg, rng)
    return new_state, duals, history


def with_strategy(cfg: ConsensusConfig, strategy: str) -> ConsensusConfig:
    return replace(cfg, strategy=strategy)
