"""Bayesian layers, the SIREN-fronted occupancy network, and its losses.

The network maps a normalized map coordinate ``(x, y)`` to an occupancy
probability: one sinusoidal (SIREN) layer, a stack of mean-field Gaussian
linear layers with ReLU, and a single sigmoid output unit. Each Gaussian
weight is stored as a mean ``mu`` and a pre-softplus spread ``rho`` with
``sigma = log(1 + exp(rho))``.

Activations are kept column-major, shape ``(width, n_points)``, so biases
broadcast as column vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BCE_EPS = 1e-7
DEFAULT_N_SAMPLES = 50

MU = "mu"
RHO = "rho"


@dataclass
class GaussianParam:
    mu: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.rho = np.asarray(self.rho, dtype=np.float64)
        if self.mu.shape != self.rho.shape:
            raise ValueError(f"mu shape {self.mu.shape} != rho shape {self.rho.shape}")

    @property
    def sigma(self) -> np.ndarray:
        return sigma_from_rho(self.rho)


@dataclass
class BayesianLinear:
    weight: GaussianParam  # (out, in)
    bias: GaussianParam  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        out, _ = self.weight.mu.shape
        if self.bias.mu.shape != (out,):
            raise ValueError("bias length must equal output width")
        if self.activation not in ("relu", "sigmoid", "none"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_width(self) -> int:
        return self.weight.mu.shape[1]

    @property
    def out_width(self) -> int:
        return self.weight.mu.shape[0]


@dataclass
class DenseLinear:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "sigmoid"

    @property
    def in_width(self) -> int:
        return self.weight.shape[1]

    @property
    def out_width(self) -> int:
        return self.weight.shape[0]


@dataclass
class SirenLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    omega0: float = 30.0

    def __post_init__(self):
        if not self.omega0 > 0:
            raise ValueError("omega0 must be positive")

    @property
    def out_width(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class PriorSpec:
    mu1: float = 0.0
    sigma1: float = 1.0

    def __post_init__(self):
        if not self.sigma1 > 0:
            raise ValueError("prior sigma1 must be positive")


@dataclass
class BnnModel:
    siren: SirenLayer
    hidden: list[BayesianLinear]
    output: BayesianLinear | DenseLinear

    def __post_init__(self):
        width = self.siren.out_width
        if self.siren.weight.shape[1] != 2:
            raise ValueError("SIREN layer must take 2 input coordinates")
        for layer in self.hidden:
            if layer.in_width != width:
                raise ValueError("hidden layer widths do not chain")
            width = layer.out_width
        if self.output.in_width != width or self.output.out_width != 1:
            raise ValueError("output layer must map hidden width to 1")

    @property
    def hidden_width(self) -> int:
        return self.siren.out_width

    @property
    def output_bayesian(self) -> bool:
        return isinstance(self.output, BayesianLinear)

    def named_params(self) -> Iterator[tuple[str, str, np.ndarray]]:
        """Yield ``(name, group, array)`` in canonical order.

        ``group`` is ``"mu"`` for every deterministic weight and every
        Gaussian mean, ``"rho"`` for Gaussian spread parameters.
        """
        yield "siren.weight", MU, self.siren.weight
        yield "siren.bias", MU, self.siren.bias
        layers = [(f"hidden.{i}", layer) for i, layer in enumerate(self.hidden)]
        layers.append(("output", self.output))
        for prefix, layer in layers:
            if isinstance(layer, BayesianLinear):
                for role in ("weight", "bias"):
                    gp = getattr(layer, role)
                    yield f"{prefix}.{role}.mu", MU, gp.mu
                    yield f"{prefix}.{role}.rho", RHO, gp.rho
            else:
                yield f"{prefix}.weight", MU, layer.weight
                yield f"{prefix}.bias", MU, layer.bias

    def gaussian_params(self) -> Iterator[tuple[str, GaussianParam]]:
        for i, layer in enumerate(self.hidden):
            yield f"hidden.{i}.weight", layer.weight
            yield f"hidden.{i}.bias", layer.bias
        if isinstance(self.output, BayesianLinear):
            yield "output.weight", self.output.weight
            yield "output.bias", self.output.bias

    def get(self, name: str) -> np.ndarray:
        for n, _, arr in self.named_params():
            if n == name:
                return arr
        raise KeyError(name)

    def with_params(self, values: dict[str, np.ndarray]) -> "BnnModel":
        """Return a copy with the named arrays replaced."""
        m = self.copy()
        for name, arr in values.items():
            target = m.get(name)
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != target.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {target.shape}")
            target[...] = arr
        return m

    def copy(self) -> "BnnModel":
        def gp(p: GaussianParam) -> GaussianParam:
            return GaussianParam(p.mu.copy(), p.rho.copy())

        siren = SirenLayer(self.siren.weight.copy(), self.siren.bias.copy(), self.siren.omega0)
        hidden = [BayesianLinear(gp(h.weight), gp(h.bias), h.activation) for h in self.hidden]
        if isinstance(self.output, BayesianLinear):
            out = BayesianLinear(gp(self.output.weight), gp(self.output.bias), self.output.activation)
        else:
            out = DenseLinear(self.output.weight.copy(), self.output.bias.copy(), self.output.activation)
        return BnnModel(siren, hidden, out)


def init_model(
    rng: np.random.Generator,
    hidden_width: int = 256,
    hidden_layers: int = 4,
    omega0: float = 30.0,
    rho_init: float = -3.0,
    output_bayesian: bool = False,
) -> BnnModel:
    """Build a freshly initialized model.

    Defaults give the full-size network (256 wide, four Gaussian layers).
    """
    if hidden_width < 1 or hidden_layers < 0:
        raise ValueError("hidden_width must be >= 1 and hidden_layers >= 0")
    h = hidden_width
    siren = SirenLayer(rng.uniform(-0.5, 0.5, (h, 2)), rng.uniform(-0.5, 0.5, h), omega0)

    def gaussian(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return GaussianParam(rng.uniform(-bound, bound, shape), np.full(shape, rho_init))

    hidden = [
        BayesianLinear(gaussian((h, h), h), gaussian((h,), h), "relu") for _ in range(hidden_layers)
    ]
    if output_bayesian:
        output = BayesianLinear(gaussian((1, h), h), gaussian((1,), h), "sigmoid")
    else:
        bound = 1.0 / math.sqrt(h)
        output = DenseLinear(rng.uniform(-bound, bound, (1, h)), rng.uniform(-bound, bound, 1))
    return BnnModel(siren, hidden, output)


# ---------------------------------------------------------------------------
# forward passes

def sigma_from_rho(rho) -> np.ndarray:
    return ad.softplus_np(rho)


def model_leaves(model: BnnModel) -> dict[str, Tensor]:
    return {name: Tensor(arr) for name, _, arr in model.named_params()}


def draw_noise(model: BnnModel, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """One standard-normal draw per Gaussian weight, shared across the batch."""
    return {name: rng.standard_normal(gp.mu.shape) for name, gp in model.gaussian_params()}


def _activate(z: Tensor, activation: str) -> Tensor:
    if activation == "relu":
        return ad.relu(z)
    if activation == "sigmoid":
        return ad.sigmoid(z)
    return z


def _gaussian_value(leaves, name: str, noise) -> Tensor:
    mu = leaves[f"{name}.mu"]
    if noise is None:
        return mu
    return ad.add(mu, ad.mul(ad.softplus(leaves[f"{name}.rho"]), Tensor(noise[name])))


def siren_forward(leaves, X: Tensor, omega0: float) -> Tensor:
    """``sin(omega0 * (W X + b))`` for column-major inputs ``X`` of shape (2, N)."""
    z = ad.add(ad.matmul(leaves["siren.weight"], X), leaves["siren.bias"])
    return ad.sin(ad.scalar_mul(z, omega0))


def linear_forward(leaves, name: str, h: Tensor, noise, activation: str, gaussian: bool = True) -> Tensor:
    """One linear layer named ``name``; Gaussian layers sample with ``noise`` unless it is None."""
    if gaussian:
        w = _gaussian_value(leaves, f"{name}.weight", noise)
        b = _gaussian_value(leaves, f"{name}.bias", noise)
    else:
        w, b = leaves[f"{name}.weight"], leaves[f"{name}.bias"]
    return _activate(ad.add(ad.matmul(w, h), b), activation)


def forward_tensor(
    model: BnnModel, points: np.ndarray, leaves: dict[str, Tensor], noise: dict | None
) -> Tensor:
    """Batched forward pass; returns a ``(1, n_points)`` tensor of probabilities.

    ``noise=None`` uses means only; otherwise each Gaussian weight is
    ``mu + sigma(rho) * eps`` with the supplied ``eps``.
    """
    X = Tensor(np.asarray(points, dtype=np.float64).reshape(-1, 2).T)
    h = siren_forward(leaves, X, model.siren.omega0)
    for i, layer in enumerate(model.hidden):
        h = linear_forward(leaves, f"hidden.{i}", h, noise, layer.activation)
    return linear_forward(leaves, "output", h, noise, "sigmoid", isinstance(model.output, BayesianLinear))


def _squeeze(points, out: np.ndarray):
    out = out.reshape(-1)
    if np.asarray(points).ndim == 1:
        return float(out[0])
    return out.copy()


def sample_forward(model: BnnModel, points, rng: np.random.Generator):
    """One stochastic pass. A single ``(2,)`` point gives a float, ``(N, 2)`` an array."""
    out = forward_tensor(model, points, model_leaves(model), draw_noise(model, rng))
    return _squeeze(points, out.value)


def deterministic_forward(model: BnnModel, points):
    out = forward_tensor(model, points, model_leaves(model), None)
    return _squeeze(points, out.value)


def predictive_stats(
    model: BnnModel, points, n_samples: int = DEFAULT_N_SAMPLES, rng: np.random.Generator | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Per-point mean and sample std (ddof=1) over ``n_samples`` stochastic passes."""
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    if rng is None:
        rng = np.random.default_rng()
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    leaves = model_leaves(model)
    draws = np.empty((n_samples, pts.shape[0]))
    for k in range(n_samples):
        draws[k] = forward_tensor(model, pts, leaves, draw_noise(model, rng)).value[0]
    return draws.mean(axis=0), draws.std(axis=0, ddof=1)


# ---------------------------------------------------------------------------
# divergences and losses

def kl_gaussian(mu0: float, sigma0: float, mu1: float, sigma1: float) -> float:
    """KL( N(mu0, sigma0) || N(mu1, sigma1) ) in closed form."""
    if not (sigma0 > 0 and sigma1 > 0):
        raise ValueError("standard deviations must be positive")
    if mu0 == mu1 and sigma0 == sigma1:
        return 0.0
    r = (sigma0 / sigma1) ** 2
    val = 0.5 * (-math.log(r) + r + (mu0 - mu1) ** 2 / sigma1**2 - 1.0)
    return max(val, 0.0)


def kl_to_prior_tensor(mu: Tensor, rho: Tensor, prior: PriorSpec) -> Tensor:
    """Summed KL of every ``N(mu_i, softplus(rho_i))`` against the prior."""
    n = mu.value.size
    s1sq = prior.sigma1**2
    sigma = ad.softplus(rho)
    log_term = ad.scalar_mul(ad.sum(ad.log(sigma)), -2.0)
    spread = ad.sum(ad.square(sigma))
    centred = ad.sum(ad.square(ad.sub(mu, Tensor(np.full(mu.shape, prior.mu1)))))
    quad = ad.scalar_mul(ad.add(spread, centred), 1.0 / s1sq)
    const = Tensor(n * (math.log(s1sq) - 1.0))
    return ad.scalar_mul(ad.add(ad.add(log_term, quad), const), 0.5)


def model_kl_tensor(model: BnnModel, leaves: dict[str, Tensor], prior: PriorSpec) -> Tensor:
    terms = [
        kl_to_prior_tensor(leaves[f"{name}.mu"], leaves[f"{name}.rho"], prior)
        for name, _ in model.gaussian_params()
    ]
    if not terms:
        return Tensor(0.0)
    return ad.stack_sum(terms)


def model_kl_to_prior(model: BnnModel, prior: PriorSpec = PriorSpec()) -> float:
    return float(model_kl_tensor(model, model_leaves(model), prior).value)


def total_loss(base_loss, kl_weight: float, kl_loss):
    """``base + kl_weight * kl``; works on floats and on tensors."""
    if kl_weight < 0:
        raise ValueError("kl_weight must be nonnegative")
    if isinstance(base_loss, Tensor) or isinstance(kl_loss, Tensor):
        return ad.add(base_loss, ad.scalar_mul(kl_loss, kl_weight))
    return base_loss + kl_weight * kl_loss


def bce_tensor(pred: Tensor, labels: np.ndarray) -> Tensor:
    y = np.asarray(labels, dtype=np.float64).reshape(pred.shape)
    p = ad.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    n = y.size
    pos = ad.sum(ad.mul(ad.log(p), Tensor(y)))
    one_minus = ad.sub(Tensor(np.ones(pred.shape)), p)
    neg = ad.sum(ad.mul(ad.log(one_minus), Tensor(1.0 - y)))
    return ad.scalar_mul(ad.add(pos, neg), -1.0 / n)


def bce_loss(predictions, labels) -> float:
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if p.shape != y.shape:
        raise ValueError(f"bce_loss: length mismatch {p.shape[0]} vs {y.shape[0]}")
    p = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


# ---------------------------------------------------------------------------
# checkpoints
#
# Text format, one tensor per line after a two-line header:
#   distbnn-checkpoint 1
#   model hidden_width=<int> hidden_layers=<int> omega0=<float.hex> output_bayesian=<0|1>
#   <index> <name> <dim0>x<dim1>... <float.hex values separated by spaces>

CHECKPOINT_MAGIC = "distbnn-checkpoint 1"


def save_checkpoint(model: BnnModel, path) -> None:
    lines = [
        CHECKPOINT_MAGIC,
        f"model hidden_width={model.hidden_width} hidden_layers={len(model.hidden)} "
        f"omega0={float(model.siren.omega0).hex()} output_bayesian={int(model.output_bayesian)}",
    ]
    for i, (name, _, arr) in enumerate(model.named_params()):
        shape = "x".join(str(d) for d in arr.shape)
        values = " ".join(float(v).hex() for v in arr.reshape(-1))
        lines.append(f"{i} {name} {shape} {values}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> BnnModel:
    text = Path(path).read_text().splitlines()
    if not text or text[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    header = dict(kv.split("=", 1) for kv in text[1].split()[1:])
    model = init_model(
        np.random.default_rng(0),
        hidden_width=int(header["hidden_width"]),
        hidden_layers=int(header["hidden_layers"]),
        omega0=float.fromhex(header["omega0"]),
        output_bayesian=header["output_bayesian"] == "1",
    )
    values = {}
    for line in text[2:]:
        parts = line.split(" ")
        _, name, shape = parts[:3]
        dims = tuple(int(d) for d in shape.split("x")) if shape else ()
        arr = np.array([float.fromhex(v) for v in parts[3:]], dtype=np.float64)
        values[name] = arr.reshape(dims)
    return model.with_params(values)
