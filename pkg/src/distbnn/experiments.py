"""Experiment drivers: single-agent kl_weight study, multi-agent strategy
comparison, the quadratic consensus toy, and their on-disk outputs.

A run directory always holds ``config.txt`` (a replayable snapshot),
``metrics.csv`` and heatmaps; multi-agent runs add the protocol event log.
The ``ms`` column of ``metrics.csv`` is the simulated network clock (one
transport tick per millisecond), so the file is byte-reproducible; measured
compute time goes to ``timings.csv``.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import logging
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import bnn, consensus, mapping, protocol
from .bnn import BnnModel, PriorSpec
from .consensus import AgentState, ConsensusConfig, DualState

log = logging.getLogger(__name__)

MODES = ("single_agent", "multi_agent", "quadratic_consensus")
REFERENCE_REDUCTION_BAND = (12.0, 30.0)


class ConfigError(ValueError):
    pass


class RunAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "multi_agent"
    seed: int = 0
    agent_count: int = 4
    max_round: int = 50
    # model
    hidden_width: int = 64
    hidden_layers: int = 2
    omega0: float = 30.0
    rho_init: float = -3.0
    output_bayesian: bool = False
    shared_init: bool = False
    # losses
    kl_weight: float = 0.03
    prior_mu: float = 0.0
    prior_sigma: float = 1.0
    prior_in_multi: bool = True
    # consensus optimizer
    strategies: tuple = ("uniform_l2", "split_l2", "split_kl")
    W_mu: float = 0.5
    W_rho: float = 0.5
    penalty: float = 1.0
    penalty_growth: float = 1.0
    primal_iters: int = 10
    learning_rate_mu: float = 0.1
    learning_rate_rho: float = 0.1
    batch_size: int = 256
    rho_learns_likelihood: bool = False
    kl_pairs_mu: bool = False
    # environment
    map_width: int = 64
    map_height: int = 64
    resolution: float = 0.125
    room_count: int = 4
    door_width: int = 3
    n_rays: int = 360
    max_range: float = 8.0
    noise_sigma: float = 0.02
    pose_spacing: float = 0.25
    free_points_per_ray: int = 4
    validation_size: int = 64
    # single-agent data selection
    train_agent: int = -1  # -1 pools every trajectory
    train_region: str = "all"  # all | left_half
    # protocol
    scheduler: str = "deterministic"
    min_delay: int = 1
    max_delay: int = 5
    # quadratic toy
    toy_targets: tuple = (1.0, 2.0, 3.0, 6.0)
    # outputs
    n_samples: int = 50
    figures: bool = True
    output_dir: str = "runs/out"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.agent_count < 1:
            raise ConfigError("agent_count must be >= 1")
        if self.max_round < 1:
            raise ConfigError("max_round must be >= 1")
        if self.n_samples < 2:
            raise ConfigError("n_samples must be >= 2")
        if self.kl_weight < 0:
            raise ConfigError("kl_weight must be nonnegative")
        if self.scheduler not in ("deterministic", "threads"):
            raise ConfigError("scheduler must be 'deterministic' or 'threads'")
        if self.train_region not in ("all", "left_half"):
            raise ConfigError("train_region must be 'all' or 'left_half'")
        for s in self.strategies:
            if s not in consensus.STRATEGIES:
                raise ConfigError(f"unknown strategy {s!r}")
        if not self.strategies:
            raise ConfigError("at least one strategy is required")
        try:
            self.consensus_config(self.strategies[0])
            self.map_config()
            PriorSpec(self.prior_mu, self.prior_sigma)
        except (ValueError, mapping.MapError) as exc:
            raise ConfigError(str(exc)) from exc

    def consensus_config(self, strategy: str) -> ConsensusConfig:
        return ConsensusConfig(
            W_mu=self.W_mu,
            W_rho=self.W_rho,
            penalty=self.penalty,
            primal_iters=self.primal_iters,
            learning_rate_mu=self.learning_rate_mu,
            learning_rate_rho=self.learning_rate_rho,
            strategy=strategy,
            batch_size=self.batch_size,
            rho_learns_likelihood=self.rho_learns_likelihood,
            kl_pairs_mu=self.kl_pairs_mu,
            penalty_growth=self.penalty_growth,
        )

    def map_config(self) -> mapping.MapConfig:
        return mapping.MapConfig(self.map_width, self.map_height, self.resolution, self.room_count, self.door_width)

    def sensor_config(self) -> mapping.SensorConfig:
        return mapping.SensorConfig(
            self.n_rays, self.max_range, self.noise_sigma, self.pose_spacing, self.free_points_per_ray
        )

    @property
    def prior(self) -> PriorSpec:
        return PriorSpec(self.prior_mu, self.prior_sigma)


# ---------------------------------------------------------------------------
# flat "key = value" config files

def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(name: str, default, text: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            if default and isinstance(default[0], float):
                return tuple(float(t) for t in items)
            return tuple(items)
        return text
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r} as {type(default).__name__}") from None


def parse_config(text: str, **overrides) -> ExperimentConfig:
    defaults = ExperimentConfig.__dataclass_fields__
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in defaults:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, defaults[key].default, val)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**values)


def load_config(path, **overrides) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    return parse_config(text, **overrides)


def dump_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{f.name} = {_format_value(getattr(cfg, f.name))}\n" for f in fields(cfg))


# ---------------------------------------------------------------------------
# metrics

@dataclass
class MetricsRow:
    round: int
    agent: int
    train_loss: float
    val_loss: float
    ms: int


@dataclass
class MetricsLog:
    rows: list[MetricsRow] = field(default_factory=list)

    def add(self, *args) -> None:
        self.rows.append(MetricsRow(*args))

    def sorted(self) -> "MetricsLog":
        return MetricsLog(sorted(self.rows, key=lambda r: (r.round, r.agent)))

    def check(self) -> None:
        keys = [(r.round, r.agent) for r in self.rows]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (round, agent) rows")
        rounds = sorted({r.round for r in self.rows})
        if rounds != list(range(len(rounds))):
            raise ValueError("rounds are not contiguous from 0")

    def final_val_loss(self) -> float:
        """Mean over agents of the validation loss in the last round."""
        last = max(r.round for r in self.rows)
        return float(np.mean([r.val_loss for r in self.rows if r.round == last]))

    def val_curve(self) -> tuple[np.ndarray, np.ndarray]:
        rounds = sorted({r.round for r in self.rows})
        vals = [np.mean([r.val_loss for r in self.rows if r.round == k]) for k in rounds]
        return np.array(rounds), np.array(vals)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", "agent", "train_loss", "val_loss", "ms"])
        for r in self.sorted().rows:
            w.writerow([r.round, r.agent, repr(float(r.train_loss)), repr(float(r.val_loss)), r.ms])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricsLog":
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls(
            [
                MetricsRow(int(r["round"]), int(r["agent"]), float(r["train_loss"]), float(r["val_loss"]), int(r["ms"]))
                for r in rows
            ]
        )


# ---------------------------------------------------------------------------
# heatmaps

def export_heatmap(values, shape: tuple[int, int], path_stem) -> dict:
    """Write ``<stem>.pgm`` (min-max scaled P2), ``<stem>.csv`` and ``<stem>.pgm.meta``."""
    values = np.asarray(values, dtype=np.float64)
    if values.size != shape[0] * shape[1]:
        raise ValueError(f"heatmap has {values.size} values, grid needs {shape[0] * shape[1]}")
    grid = values.reshape(shape)
    lo, hi = float(grid.min()), float(grid.max())
    constant = hi == lo
    if constant:
        img = np.full(shape, 128, dtype=np.int64)
    else:
        img = np.rint((grid - lo) / (hi - lo) * 255.0).astype(np.int64)
    stem = Path(path_stem)
    try:
        stem.parent.mkdir(parents=True, exist_ok=True)
        mapping.write_pgm(stem.with_suffix(".pgm"), img)
        with open(stem.with_suffix(".csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for row in grid:
                w.writerow([repr(float(v)) for v in row])
        meta = f"min={lo!r}\nmax={hi!r}\nconstant={int(constant)}\n"
        Path(str(stem.with_suffix(".pgm")) + ".meta").write_text(meta)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write heatmap {stem}: {exc.strerror}") from exc
    return {"min": lo, "max": hi, "constant": constant}


def read_heatmap_csv(path) -> np.ndarray:
    with open(path) as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])


# ---------------------------------------------------------------------------
# environment

def build_environment(cfg: ExperimentConfig):
    grid = mapping.generate_floorplan(cfg.seed, cfg.map_config())
    trajs = mapping.room_loop_trajectories(grid, cfg.agent_count)
    rng = np.random.default_rng([cfg.seed, 1])
    data = mapping.build_agent_datasets(grid, trajs, cfg.sensor_config(), rng, cfg.validation_size)
    return grid, trajs, data


def _new_model(cfg: ExperimentConfig, rng) -> BnnModel:
    return bnn.init_model(
        rng,
        hidden_width=cfg.hidden_width,
        hidden_layers=cfg.hidden_layers,
        omega0=cfg.omega0,
        rho_init=cfg.rho_init,
        output_bayesian=cfg.output_bayesian,
    )


def validation_loss(model: BnnModel, validation: mapping.SampleSet) -> float:
    return bnn.bce_loss(bnn.deterministic_forward(model, validation.points), validation.labels)


@dataclass
class RunOutput:
    metrics: MetricsLog
    model: BnnModel
    mean: np.ndarray
    std: np.ndarray
    extras: dict = field(default_factory=dict)


def _heatmaps(model, data, cfg, out_dir: Path | None, rng) -> tuple[np.ndarray, np.ndarray]:
    mean, std = bnn.predictive_stats(model, data.validation.points, cfg.n_samples, rng)
    if out_dir is not None:
        export_heatmap(mean, data.validation_shape, out_dir / "heatmap_mean")
        export_heatmap(std, data.validation_shape, out_dir / "heatmap_std")
    return mean, std


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# ---------------------------------------------------------------------------
# single agent

def single_agent_data(cfg: ExperimentConfig, data: mapping.Datasets) -> mapping.SampleSet:
    if cfg.train_agent >= 0:
        if cfg.train_agent >= len(data.agents):
            raise ConfigError(f"train_agent {cfg.train_agent} out of range")
        train = data.agents[cfg.train_agent]
    else:
        train = mapping.SampleSet.concat(data.agents)
    if cfg.train_region == "left_half":
        train = train.subset(train.points[:, 0] < 0.0)
    if len(train) == 0:
        raise ConfigError("selected training data is empty")
    return train


def run_single_agent(cfg: ExperimentConfig, out_dir=None, env=None) -> RunOutput:
    """Train one model on local data with the prior-anchored composite loss."""
    if cfg.mode != "single_agent":
        raise ConfigError("run_single_agent needs mode = single_agent")
    out = Path(out_dir) if out_dir is not None else None
    grid, trajs, data = env if env is not None else build_environment(cfg)
    train = single_agent_data(cfg, data)
    model = _new_model(cfg, np.random.default_rng([cfg.seed, 2]))
    # plain local training: no duals, no peers, spread parameters see the likelihood
    ccfg = replace(cfg.consensus_config("split_l2"), W_mu=0.0, W_rho=0.0, rho_learns_likelihood=True)
    objective = consensus.BnnObjective(model, train.points, train.labels, cfg.batch_size, cfg.kl_weight, cfg.prior)
    rng = np.random.default_rng([cfg.seed, 3])
    state = consensus.flatten(model)
    duals = DualState.zeros_like(state)
    init_model = model.copy()
    metrics = MetricsLog()
    timings = []
    for epoch in range(cfg.max_round):
        t0 = time.perf_counter()
        target = consensus.RegularizationTarget(state.theta_mu, state.theta_rho)
        try:
            state, hist = consensus.primal_optimize_state(state, duals, target, objective, ccfg, rng)
        except consensus.PrimalDivergence as exc:
            raise RunAborted(f"epoch {epoch}: {exc}") from exc
        current = consensus.unflatten(state, model)
        metrics.add(epoch, 0, float(np.mean([h.pred_loss for h in hist])), validation_loss(current, data.validation), 0)
        timings.append((epoch, 0, (time.perf_counter() - t0) * 1e3))
    final = consensus.unflatten(state, model)
    mean, std = _heatmaps(final, data, cfg, out, np.random.default_rng([cfg.seed, 4]))
    _, init_std = bnn.predictive_stats(init_model, data.validation.points, cfg.n_samples, np.random.default_rng([cfg.seed, 4]))
    result = RunOutput(metrics, final, mean, std, {"init_std": init_std, "grid": grid, "data": data})
    if out is not None:
        _write(out / "config.txt", dump_config(cfg))
        _write(out / "metrics.csv", metrics.to_csv())
        _write(out / "timings.csv", _timings_csv(timings))
        mapping.save_grid(grid, out / "map.pgm")
        bnn.save_checkpoint(final, out / "model.ckpt")
        if cfg.figures:
            from . import plotting

            plotting.render_run(out)
    return result


def _timings_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", "agent", "wall_ms"])
    for r, a, ms in rows:
        w.writerow([r, a, f"{ms:.3f}"])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# multi agent

@dataclass
class Agent:
    """Everything a peer owns besides its protocol loop."""

    id: int
    template: BnnModel
    objective: object
    cfg: ConsensusConfig
    rng: np.random.Generator
    duals: DualState
    validation: mapping.SampleSet | None = None
    metrics: MetricsLog | None = None
    clock: protocol.EventLog | None = None
    theta_history: list = field(default_factory=list)
    timings: list = field(default_factory=list)

    def node_update(self, state: AgentState, states_by_id: dict, round_index: int) -> AgentState:
        t0 = time.perf_counter()
        peers = [s for p, s in sorted(states_by_id.items()) if p != self.id]
        try:
            new_state, self.duals, hist = consensus.node_update(
                state, self.duals, peers, self.objective, self.cfg, self.rng, round_index
            )
        except consensus.PrimalDivergence as exc:
            raise RunAborted(f"agent {self.id}, round {round_index}: {exc}") from exc
        train = float(np.mean([h.pred_loss for h in hist]))
        if self.validation is not None:
            val = validation_loss(consensus.unflatten(new_state, self.template), self.validation)
        else:
            val = train
        if self.metrics is not None:
            ms = self.clock.tick if self.clock is not None else 0
            self.metrics.add(round_index, self.id, train, val, ms)
        self.theta_history.append(new_state.theta_mu.copy())
        self.timings.append((round_index, self.id, (time.perf_counter() - t0) * 1e3))
        return new_state


def run_agents(
    agents: list[Agent],
    initial: dict,
    max_round: int,
    scheduler: str = "deterministic",
    seed: int = 0,
    min_delay: int = 1,
    max_delay: int = 5,
) -> protocol.RunResult:
    """Run the peer protocol with each agent's node update."""
    layout = next(iter(initial.values())).layout
    encode = AgentState.to_vector
    decode = lambda vec: AgentState.from_vector(vec, layout)  # noqa: E731
    fns = {a.id: a.node_update for a in agents}
    log_ = protocol.EventLog()
    for a in agents:
        a.clock = log_
    if scheduler == "threads":
        return protocol.run_threaded(initial, max_round, fns, encode, decode, log=log_)
    transport = protocol.SimulatedTransport(tuple(initial), seed=seed, min_delay=min_delay, max_delay=max_delay)
    return protocol.run_deterministic(initial, max_round, fns, transport, encode_state=encode, decode_state=decode, log=log_)


def consensus_distance(agents: list[Agent]) -> list[float]:
    """Per round, the largest pairwise L2 distance between agents' mean-group vectors."""
    out = []
    for k in range(min(len(a.theta_history) for a in agents)):
        vecs = [a.theta_history[k] for a in agents]
        out.append(max((float(np.linalg.norm(u - v)) for u, v in itertools.combinations(vecs, 2)), default=0.0))
    return out


def run_strategy(cfg: ExperimentConfig, strategy: str, env, out: Path | None) -> RunOutput:
    grid, trajs, data = env
    ccfg = cfg.consensus_config(strategy)
    kl_weight = cfg.kl_weight if cfg.prior_in_multi else 0.0
    base = _new_model(cfg, np.random.default_rng([cfg.seed, 2]))
    metrics = MetricsLog()
    agents, initial = [], {}
    for i in range(cfg.agent_count):
        model = base.copy() if cfg.shared_init else _new_model(cfg, np.random.default_rng([cfg.seed, 2, i]))
        train = data.agents[i]
        obj = consensus.BnnObjective(model, train.points, train.labels, cfg.batch_size, kl_weight, cfg.prior)
        state = consensus.flatten(model)
        agents.append(
            Agent(i, model, obj, ccfg, np.random.default_rng([cfg.seed, 5, i]), DualState.zeros_like(state), data.validation, metrics)
        )
        initial[i] = state
    try:
        result = run_agents(agents, initial, cfg.max_round, cfg.scheduler, cfg.seed, cfg.min_delay, cfg.max_delay)
    except (RunAborted, protocol.ProtocolViolation) as exc:
        if out is not None:
            _write(out / "events.csv", agents[0].clock.to_csv() if agents[0].clock else "")
        raise RunAborted(str(exc)) from exc
    metrics = metrics.sorted()
    metrics.check()
    final_states = [result.states[i] for i in range(cfg.agent_count)]
    tgt = consensus.compute_target(final_states[0], final_states[1:])
    consensus_state = AgentState(tgt.theta_reg_mu, tgt.theta_reg_rho, final_states[0].layout)
    final_model = consensus.unflatten(consensus_state, base)
    mean, std = _heatmaps(final_model, data, cfg, out, np.random.default_rng([cfg.seed, 4]))
    dist = consensus_distance(agents)
    if out is not None:
        _write(out / "metrics.csv", metrics.to_csv())
        _write(out / "events.csv", result.log.to_csv())
        _write(out / "timings.csv", _timings_csv(sorted(t for a in agents for t in a.timings)))
        _write(out / "consensus.csv", "round,max_pairwise_l2\n" + "".join(f"{k},{d!r}\n" for k, d in enumerate(dist)))
        bnn.save_checkpoint(final_model, out / "model.ckpt")
    return RunOutput(metrics, final_model, mean, std, {"consensus_distance": dist, "states": final_states})


def run_multi_agent(cfg: ExperimentConfig, out_dir=None, env=None) -> dict[str, RunOutput]:
    """Every configured strategy on the same map, data and initialization."""
    if cfg.mode != "multi_agent":
        raise ConfigError("run_multi_agent needs mode = multi_agent")
    out = Path(out_dir) if out_dir is not None else None
    env = env if env is not None else build_environment(cfg)
    if out is not None:
        _write(out / "config.txt", dump_config(cfg))
        mapping.save_grid(env[0], out / "map.pgm")
    results = {}
    for strategy in cfg.strategies:
        log.info("seed %d: running strategy %s", cfg.seed, strategy)
        results[strategy] = run_strategy(cfg, strategy, env, out / strategy if out is not None else None)
    if out is not None and cfg.figures:
        from . import plotting

        plotting.render_run(out)
    return results


# ---------------------------------------------------------------------------
# quadratic consensus toy

def run_quadratic_consensus(cfg: ExperimentConfig, out_dir=None, ccfg: ConsensusConfig | None = None) -> dict:
    """Scalar agents with losses (theta - c_i)^2 driven through the peer protocol."""
    targets = list(cfg.toy_targets)
    if ccfg is None:
        ccfg = ConsensusConfig(
            W_mu=cfg.W_mu, W_rho=cfg.W_rho, penalty=cfg.penalty, primal_iters=cfg.primal_iters,
            learning_rate_mu=cfg.learning_rate_mu, learning_rate_rho=cfg.learning_rate_rho, strategy="split_l2",
        )
    layout = consensus.scalar_layout(1)
    metrics = MetricsLog()
    agents, initial = [], {}
    for i, c in enumerate(targets):
        st = AgentState(np.zeros(1), np.zeros(0), layout)
        agents.append(
            Agent(i, None, consensus.QuadraticObjective(c), ccfg, np.random.default_rng([cfg.seed, i]), DualState.zeros_like(st), None, metrics)
        )
        initial[i] = st
    result = run_agents(agents, initial, cfg.max_round, cfg.scheduler, cfg.seed, cfg.min_delay, cfg.max_delay)
    thetas = np.array([[h[0] for h in a.theta_history] for a in agents])  # (agents, rounds)
    out = {"thetas": thetas, "mean": float(np.mean(targets)), "metrics": metrics.sorted(), "result": result}
    if out_dir is not None:
        d = Path(out_dir)
        _write(d / "config.txt", dump_config(cfg))
        _write(d / "metrics.csv", metrics.sorted().to_csv())
        _write(d / "events.csv", result.log.to_csv())
        rows = ["round," + ",".join(f"agent{i}" for i in range(len(targets)))]
        rows += [f"{k}," + ",".join(repr(float(v)) for v in thetas[:, k]) for k in range(thetas.shape[1])]
        _write(d / "thetas.csv", "\n".join(rows) + "\n")
    return out


TOY_CONSENSUS = ConsensusConfig(
    W_mu=0.5, W_rho=0.5, penalty=1.0, primal_iters=20, learning_rate_mu=0.1, learning_rate_rho=0.1, strategy="split_l2"
)


# ---------------------------------------------------------------------------
# strategy comparison

@dataclass
class ComparisonReport:
    strategies: list[str]
    seeds: list[int]
    final_loss: dict  # strategy -> seed-averaged final validation loss
    per_seed: dict  # strategy -> {seed: loss}
    reductions: dict  # other strategy -> percent reduction of the reference
    reference: str = "split_kl"
    band: tuple = REFERENCE_REDUCTION_BAND

    def to_text(self) -> str:
        lines = [
            "strategy comparison (seed-averaged final validation loss, mean over agents)",
            f"seeds: {', '.join(str(s) for s in self.seeds)}",
            "",
        ]
        for s in self.strategies:
            lines.append(f"  {s:<12} {self.final_loss[s]:.6f}")
        lines.append("")
        lines.append(f"reduction of {self.reference} relative to:")
        for other, pct in self.reductions.items():
            inside = self.band[0] <= pct <= self.band[1]
            lines.append(f"  {other:<12} {pct:+.2f}%  ({'inside' if inside else 'outside'} reference band)")
        lines.append(f"reference band (full-scale experiment): {self.band[0]:.0f}-{self.band[1]:.0f}% reduction")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["strategy", "final_val_loss", "reduction_pct_of_" + self.reference, "band_low", "band_high"])
        for s in self.strategies:
            red = self.reductions.get(s, "")
            w.writerow([s, repr(self.final_loss[s]), "" if red == "" else repr(red), self.band[0], self.band[1]])
        return buf.getvalue()


def percent_reduction(reference_loss: float, other_loss: float) -> float:
    return 100.0 * (other_loss - reference_loss) / other_loss


def compare_strategies(logs: dict[str, dict[int, MetricsLog]], reference: str = "split_kl") -> ComparisonReport:
    """Seed-averaged final losses and the reference strategy's percent reductions."""
    if len(logs) < 2:
        raise ValueError("need at least two strategies to compare")
    seed_sets = {s: frozenset(v) for s, v in logs.items()}
    first = next(iter(seed_sets.values()))
    if any(ss != first for ss in seed_sets.values()):
        raise ValueError(f"mismatched seed sets: { {s: sorted(v) for s, v in seed_sets.items()} }")
    if reference not in logs:
        raise ValueError(f"reference strategy {reference!r} missing")
    per_seed = {s: {seed: m.final_val_loss() for seed, m in sorted(v.items())} for s, v in logs.items()}
    final = {s: float(np.mean(list(v.values()))) for s, v in per_seed.items()}
    reductions = {s: percent_reduction(final[reference], final[s]) for s in logs if s != reference}
    return ComparisonReport(list(logs), sorted(first), final, per_seed, reductions, reference)


def collect_run_logs(run_dirs) -> dict[str, dict[int, MetricsLog]]:
    """Gather ``<run>/<strategy>/metrics.csv`` across multi-agent run directories."""
    logs: dict[str, dict[int, MetricsLog]] = {}
    for d in map(Path, run_dirs):
        cfg = load_config(d / "config.txt")
        for strategy in cfg.strategies:
            m = MetricsLog.from_csv((d / strategy / "metrics.csv").read_text())
            logs.setdefault(strategy, {})[cfg.seed] = m
    return logs


def write_report(report: ComparisonReport, out_dir, logs=None, figures: bool = True) -> None:
    out = Path(out_dir)
    _write(out / "report.txt", report.to_text())
    _write(out / "report.csv", report.to_csv())
    if figures:
        from . import plotting

        plotting.render_comparison(report, logs, out)
