"""Experiment orchestration: config files, suites, sweeps, theory checks.

Config files are INI-style with one section per experiment.  Keys are flat
and strictly validated -- an unknown key anywhere aborts the whole suite
(exit code 2 from the CLI), which catches typos in sweeps early.  Example::

    [ring-tracking-qsgd]
    kind = consensus
    topology = ring
    n = 25
    d = 200
    scheme = tracking
    compression = qsgd:256
    gamma = 1.0
    iters = 500
    eval_every = 10
    seeds = 1 2 3

Each (experiment, seed) pair writes ``<label>_seed<seed>.csv`` and every
experiment additionally writes ``<label>_summary.csv`` with the mean and
population standard deviation of every metric across the repeats.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import compression as comp
from .consensus import (
    ConsensusConfig,
    DivergenceError,
    GossipScheme,
    run_consensus,
    tracking_stepsize,
)
from .objectives import (
    LogisticObjective,
    Objective,
    QuadraticObjective,
    parse_libsvm,
    partition,
    solve_reference,
)
from .optimize import (
    PracticalSchedule,
    SgdConfig,
    TheoreticalSchedule,
    run_optimization,
)
from .records import write_records_csv, write_rows_csv
from .streams import stream
from .topology import (
    FullyConnected,
    GossipMatrix,
    Ring,
    Torus,
    build_gossip_matrix,
    mixing_contraction,
    read_edge_list,
)

__all__ = [
    "ConfigError",
    "ExperimentSpec",
    "GridSpec",
    "parse_suite_file",
    "run_suite",
    "grid_search",
    "theory_check",
    "CheckOutcome",
    "parse_compression",
    "build_topology",
    "gaussian_init",
]


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# building blocks shared by the CLI and the suite runner

def parse_compression(text: str, d: int, value_bits: int = 32) -> comp.CompressionSpec:
    """Parse an operator string.

    Forms: ``identity``, ``rand_k:<k or fraction>``, ``top_k:<k or
    fraction>``, ``qsgd:<levels>``, ``rand_gossip:<p>``, and
    ``unbiased:<inner>`` for the rescaled unbiased variant.  A sparsifier
    argument below 1 is read as a coordinate fraction and resolved as
    ``ceil(fraction * d)``.
    """
    text = text.strip()
    if text.startswith("unbiased:"):
        inner = parse_compression(text[len("unbiased:"):], d, value_bits)
        return comp.RescaledUnbiased(inner, value_bits=value_bits)
    name, _, arg = text.partition(":")
    name = name.strip().lower()
    try:
        if name in ("identity", "none", "exact"):
            return comp.Identity(value_bits=value_bits)
        if name in ("rand_k", "top_k"):
            if not arg:
                raise ConfigError(f"{name} needs k or a fraction, e.g. {name}:0.01")
            value = float(arg)
            k = comp.resolve_k(value, d) if value < 1 else int(value)
            cls = comp.RandK if name == "rand_k" else comp.TopK
            return cls(k, value_bits=value_bits)
        if name == "qsgd":
            return comp.Qsgd(int(arg), value_bits=value_bits)
        if name == "rand_gossip":
            return comp.RandGossip(float(arg), value_bits=value_bits)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"bad compression argument in {text!r}: {exc}") from exc
    raise ConfigError(f"unknown compression kind {text!r}")


def build_topology(name: str, n: int | None, rows: int | None = None,
                   cols: int | None = None, edges_file: str | None = None) -> GossipMatrix:
    name = name.lower()
    if name == "ring":
        return build_gossip_matrix(Ring(_require(n, "n")))
    if name == "torus":
        return build_gossip_matrix(Torus(_require(rows, "torus_rows"), _require(cols, "torus_cols")))
    if name in ("full", "fully_connected", "complete"):
        return build_gossip_matrix(FullyConnected(_require(n, "n")))
    if name == "custom":
        if edges_file is None:
            raise ConfigError("custom topology needs an edge list file")
        return build_gossip_matrix(read_edge_list(edges_file, n))
    raise ConfigError(f"unknown topology {name!r}")


def _require(value, key):
    if value is None:
        raise ConfigError(f"missing required key {key!r}")
    return value


def gaussian_init(d: int, n: int, seed: int) -> np.ndarray:
    """Standard normal d x n initial matrix from the run's init stream."""
    return stream(seed, tag="init").standard_normal((d, n))


def resolve_gamma(gamma_text: str, matrix: GossipMatrix, spec: comp.CompressionSpec, d: int) -> float:
    if gamma_text.strip().lower() == "auto":
        return tracking_stepsize(matrix.delta, comp.omega(spec, d), matrix.beta)
    return float(gamma_text)


# ---------------------------------------------------------------------------
# suite configs

_COMMON_KEYS = {
    "kind", "topology", "n", "d", "torus_rows", "torus_cols", "edges_file",
    "compression", "value_bits", "gamma", "iters", "eval_every", "seeds", "init_file",
}
_CONSENSUS_KEYS = _COMMON_KEYS | {"scheme"}
_OPTIMIZE_KEYS = _COMMON_KEYS | {
    "averaging", "objective", "data_path", "partition", "schedule",
    "a", "b", "mu", "noise_sigma", "fstar_tol", "targets_seed",
}


@dataclass(frozen=True)
class ExperimentSpec:
    label: str
    kind: str  # consensus | optimize
    options: dict

    @property
    def seeds(self) -> list[int]:
        return self.options["seeds"]


def parse_suite_file(path: str | Path) -> list[ExperimentSpec]:
    parser = configparser.ConfigParser(interpolation=None)
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    specs = []
    for label in parser.sections():
        raw = dict(parser.items(label))
        kind = raw.get("kind")
        if kind not in ("consensus", "optimize"):
            raise ConfigError(f"[{label}]: kind must be consensus or optimize")
        allowed = _CONSENSUS_KEYS if kind == "consensus" else _OPTIMIZE_KEYS
        unknown = set(raw) - allowed
        if unknown:
            raise ConfigError(f"[{label}]: unknown keys {sorted(unknown)}")
        options = _coerce_options(label, raw)
        specs.append(ExperimentSpec(label=label, kind=kind, options=options))
    if not specs:
        raise ConfigError("no experiments in config file")
    return specs


def _coerce_options(label: str, raw: dict) -> dict:
    opts = dict(raw)
    for key in ("n", "d", "torus_rows", "torus_cols", "iters", "eval_every", "value_bits"):
        if key in opts:
            opts[key] = int(opts[key])
    for key in ("a", "b", "mu", "noise_sigma", "fstar_tol"):
        if key in opts:
            opts[key] = float(opts[key])
    if "seeds" in opts:
        seeds = [int(tok) for tok in opts["seeds"].replace(",", " ").split()]
        if not seeds:
            raise ConfigError(f"[{label}]: empty seeds list")
        if len(set(seeds)) != len(seeds):
            raise ConfigError(f"[{label}]: seeds must be distinct")
        opts["seeds"] = seeds
    else:
        opts["seeds"] = [0]
    return opts


def _build_consensus(spec: ExperimentSpec, seed: int):
    o = spec.options
    d = _require(o.get("d"), "d")
    matrix = build_topology(
        _require(o.get("topology"), "topology"), o.get("n"),
        o.get("torus_rows"), o.get("torus_cols"), o.get("edges_file"),
    )
    cspec = parse_compression(o.get("compression", "identity"), d, o.get("value_bits", 32))
    gamma = resolve_gamma(str(o.get("gamma", "1.0")), matrix, cspec, d)
    config = ConsensusConfig(
        scheme=GossipScheme(o.get("scheme", "exact")),
        matrix=matrix,
        gamma=gamma,
        compression=cspec,
        iters=o.get("iters", 100),
        seed=seed,
        eval_every=o.get("eval_every", 1),
    )
    if "init_file" in o:
        x0 = np.loadtxt(o["init_file"]).T
        if x0.ndim == 1:
            x0 = x0[:, None]
    else:
        x0 = gaussian_init(d, matrix.n, seed)
    return config, x0


def build_objective(o: dict, matrix: GossipMatrix, d: int, seed: int) -> Objective:
    name = o.get("objective", "quadratic")
    if name == "quadratic":
        targets_seed = int(o.get("targets_seed", seed))
        targets = stream(targets_seed, tag="targets").standard_normal((d, matrix.n))
        return QuadraticObjective(targets, noise_sigma=o.get("noise_sigma", 0.0))
    if name == "logistic":
        path = _require(o.get("data_path"), "data_path")
        with open(path, "r", encoding="utf-8") as fh:
            dataset = parse_libsvm(fh)
        shards = partition(dataset, matrix.n, o.get("partition", "shuffled"), seed=seed)
        return LogisticObjective(dataset, shards)
    raise ConfigError(f"unknown objective {name!r}")


def _build_optimize(spec: ExperimentSpec, seed: int):
    o = spec.options
    matrix = build_topology(
        _require(o.get("topology"), "topology"), o.get("n"),
        o.get("torus_rows"), o.get("torus_cols"), o.get("edges_file"),
    )
    d = o.get("d")
    if o.get("objective", "quadratic") == "quadratic":
        d = _require(d, "d")
    objective = build_objective(o, matrix, d, seed)
    d = objective.dim
    cspec = parse_compression(o.get("compression", "identity"), d, o.get("value_bits", 32))
    schedule_name = o.get("schedule", "practical")
    if schedule_name == "theoretical":
        mu, _ = objective.constants()
        schedule = TheoreticalSchedule(mu=o.get("mu", mu), a=o.get("a", 410.0))
    elif schedule_name == "practical":
        m = objective.samples_per_node * matrix.n if hasattr(objective, "dataset") else 1
        schedule = PracticalSchedule(a=o.get("a", 0.1), b=o.get("b", float(d)), m=m)
    else:
        raise ConfigError(f"unknown schedule {schedule_name!r}")
    gamma = resolve_gamma(str(o.get("gamma", "1.0")), matrix, cspec, d)
    config = SgdConfig(
        matrix=matrix,
        schedule=schedule,
        averaging=o.get("averaging", "exact"),
        gamma=gamma,
        compression=cspec,
        iters=o.get("iters", 100),
        seed=seed,
        eval_every=o.get("eval_every", 1),
        fstar_tol=o.get("fstar_tol", 1e-10),
    )
    x0 = np.zeros((d, matrix.n))
    return config, objective, x0


def run_experiment(spec: ExperimentSpec, seed: int):
    if spec.kind == "consensus":
        config, x0 = _build_consensus(spec, seed)
        return run_consensus(config, x0).records
    config, objective, x0 = _build_optimize(spec, seed)
    return run_optimization(config, objective, x0).records


@dataclass(frozen=True)
class SuiteOutcome:
    written: list[Path]
    failures: list[tuple[str, int, str]]


def summarize(per_seed_records: list[list]) -> tuple[list[str], list[tuple]]:
    """Mean and population stddev of each metric at every eval point."""
    first = per_seed_records[0]
    cols = [f.name for f in fields(first[0])]
    if any(len(r) != len(first) for r in per_seed_records):
        raise ValueError("repeats produced different eval grids")
    header = ["iter"]
    for c in cols[1:]:
        header += [f"{c}_mean", f"{c}_std"]
    rows = []
    for i, rec in enumerate(first):
        row = [rec.iter]
        for c in cols[1:]:
            vals = np.array([float(getattr(r[i], c)) for r in per_seed_records])
            row += [float(np.mean(vals)), float(np.std(vals))]
        rows.append(tuple(row))
    return header, rows


def run_suite(
    config_path: str | Path, out_dir: str | Path, kind: str | None = None
) -> SuiteOutcome:
    """Run every experiment in the file (optionally only one kind);
    continue past failures.

    Writes one CSV per (experiment, seed) plus a per-experiment summary.
    Returns the failures so the CLI can exit nonzero on partial failure.
    """
    specs = parse_suite_file(config_path)
    if kind is not None:
        specs = [s for s in specs if s.kind == kind]
        if not specs:
            raise ConfigError(f"no {kind} experiments in {config_path}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    failures: list[tuple[str, int, str]] = []
    for spec in specs:
        per_seed = []
        for seed in spec.seeds:
            try:
                records = run_experiment(spec, seed)
            except (DivergenceError, ConfigError, ValueError, OSError) as exc:
                failures.append((spec.label, seed, str(exc)))
                continue
            path = out / f"{spec.label}_seed{seed}.csv"
            write_records_csv(path, records)
            written.append(path)
            per_seed.append(records)
        if per_seed:
            header, rows = summarize(per_seed)
            path = out / f"{spec.label}_summary.csv"
            write_rows_csv(path, header, rows)
            written.append(path)
    return SuiteOutcome(written=written, failures=failures)


# ---------------------------------------------------------------------------
# grid search (stepsize sweep)

@dataclass(frozen=True)
class GridSpec:
    """Stepsize grid: ``a`` over powers of ten; ``b`` defaults to
    ``{1, 0.1 d, d, 10 d, 100 d}`` unless overridden."""

    a_exponents: tuple[int, ...] = (-3, -2, -1, 0, 1)
    b_factors: tuple[float, ...] | None = None
    budget_epochs: int = 10

    def a_values(self) -> list[float]:
        if not self.a_exponents:
            raise ValueError("empty a grid")
        return [10.0**e for e in self.a_exponents]

    def b_values(self, d: int) -> list[float]:
        if self.b_factors is None:
            return [1.0, 0.1 * d, float(d), 10.0 * d, 100.0 * d]
        if not self.b_factors:
            raise ValueError("empty b grid")
        return [float(b) for b in self.b_factors]


def grid_search(
    base: SgdConfig, grid: GridSpec, objective: Objective, initial_x: np.ndarray
) -> tuple[float, float, float]:
    """Pick ``(a, b)`` minimizing final suboptimality after a fixed budget.

    Every grid point runs for ``budget_epochs`` epochs (one epoch covers the
    dataset once: ``ceil(m / n)`` rounds).  Diverged points are skipped; if
    everything diverged the search aborts listing them.  Ties break toward
    smaller ``a`` then smaller ``b``.
    """
    if grid.budget_epochs < 1:
        raise ValueError("budget_epochs must be >= 1")
    d = initial_x.shape[0]
    n = base.matrix.n
    m_total = objective.samples_per_node * n
    iters = max(1, grid.budget_epochs * math.ceil(m_total / n))
    _, f_star = solve_reference(objective, base.fstar_tol)

    best = None
    diverged = []
    for a in grid.a_values():
        for b in grid.b_values(d):
            schedule = PracticalSchedule(a=a, b=b, m=m_total)
            config = SgdConfig(
                matrix=base.matrix, schedule=schedule, averaging=base.averaging,
                gamma=base.gamma, compression=base.compression, iters=iters,
                seed=base.seed, eval_every=iters, f_star=f_star,
            )
            try:
                result = run_optimization(config, objective, initial_x)
            except DivergenceError:
                diverged.append((a, b))
                continue
            final = result.records[-1].subopt
            if not math.isfinite(final):
                diverged.append((a, b))
                continue
            key = (final, a, b)
            if best is None or key < best:
                best = key
    if best is None:
        raise RuntimeError(f"all grid points diverged: {diverged}")
    return best[1], best[2], best[0]


# ---------------------------------------------------------------------------
# theory checks

@dataclass(frozen=True)
class CheckOutcome:
    kind: str
    name: str
    passed: bool
    observed: float
    bound: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {self.kind} {self.name} "
            f"observed={format(self.observed, '.17g')} bound={format(self.bound, '.17g')}"
        )


def _check_exact_rate(gamma: float) -> CheckOutcome:
    matrix = build_gossip_matrix(Ring(16))
    x0 = gaussian_init(32, 16, seed=7)
    config = ConsensusConfig(
        scheme=GossipScheme.EXACT, matrix=matrix, gamma=gamma, iters=500, seed=7, eval_every=1
    )
    result = run_consensus(config, x0)
    e0 = result.initial_error
    worst = -math.inf
    for rec in result.records:
        bound = (1.0 - gamma * matrix.delta) ** (2 * rec.iter) * e0 + 1e-9
        worst = max(worst, rec.error - bound)
    return CheckOutcome("exact_rate", f"ring16_gamma{gamma}", worst <= 0.0, worst, 0.0)


def _check_tracking_rate() -> CheckOutcome:
    matrix = build_gossip_matrix(Ring(8))
    d = 16
    spec = comp.TopK(2)
    om = comp.omega(spec, d)
    gamma = tracking_stepsize(matrix.delta, om, matrix.beta)
    config = ConsensusConfig(
        scheme=GossipScheme.TRACKING, matrix=matrix, gamma=gamma, compression=spec,
        iters=2000, seed=11, eval_every=1,
    )
    result = run_consensus(config, gaussian_init(d, matrix.n, seed=11))
    e0 = result.records[0].lyapunov
    rate = 1.0 - matrix.delta**2 * om / 82.0
    worst = -math.inf
    for rec in result.records:
        worst = max(worst, rec.lyapunov - (rate**rec.iter * e0 + 1e-9))
    return CheckOutcome("tracking_rate", "ring8_top2", worst <= 0.0, worst, 0.0)


def _check_mixing() -> list[CheckOutcome]:
    outcomes = []
    topologies = [Ring(4), Ring(8), Ring(16), Torus(3, 3), Torus(4, 4), FullyConnected(9)]
    for kind in topologies:
        matrix = build_gossip_matrix(kind)
        worst = -math.inf
        for k in range(51):
            bound = (1.0 - matrix.delta) ** k + 1e-9
            worst = max(worst, mixing_contraction(matrix.weights, k) - bound)
        name = type(kind).__name__.lower() + str(matrix.n)
        outcomes.append(CheckOutcome("mixing", name, worst <= 0.0, worst, 0.0))
    return outcomes


def _omega_contract_outcomes() -> list[CheckOutcome]:
    outcomes = []
    d, draws = 400, 10_000
    x = stream(2024, tag="omega-fixture").standard_normal(d)
    xnorm2 = float(np.dot(x, x))
    cases = [
        ("rand_k", comp.RandK(max(1, d // 100))),
        ("qsgd16", comp.Qsgd(16)),
        ("rand_gossip", comp.RandGossip(0.25)),
    ]
    for name, spec in cases:
        om = comp.omega(spec, d)
        rng = stream(2024, tag=f"omega-{name}")
        ratios = np.empty(draws)
        for i in range(draws):
            msg = comp.compress(spec, x, rng)
            ratios[i] = float(np.sum((msg.dense_value - x) ** 2)) / xnorm2
        se = float(np.std(ratios) / math.sqrt(draws))
        observed = float(np.mean(ratios))
        bound = (1.0 - om) + 4.0 * se
        outcomes.append(CheckOutcome("omega_contract", name, observed <= bound, observed, bound))
    # deterministic top_k holds per sample
    spec = comp.TopK(max(1, d // 100))
    om = comp.omega(spec, d)
    rng = stream(2024, tag="omega-topk-samples")
    worst = -math.inf
    for _ in range(100):
        sample = rng.standard_normal(d)
        msg = comp.compress(spec, sample, None)
        ratio = float(np.sum((msg.dense_value - sample) ** 2) / np.dot(sample, sample))
        worst = max(worst, ratio - (1.0 - om))
    outcomes.append(CheckOutcome("omega_contract", "top_k_per_sample", worst <= 0.0, worst, 0.0))
    return outcomes


def _check_identity_reduction() -> CheckOutcome:
    matrix = build_gossip_matrix(Ring(9))
    d, rounds, seed = 12, 200, 5
    targets = stream(31, tag="targets").standard_normal((d, 9))
    objective = QuadraticObjective(targets, noise_sigma=0.5)
    x0 = gaussian_init(d, 9, seed)
    schedule = PracticalSchedule(a=0.05, b=float(d), m=1)
    common = dict(matrix=matrix, schedule=schedule, iters=rounds, seed=seed,
                  eval_every=rounds, f_star=0.0)
    plain = run_optimization(SgdConfig(averaging="exact", gamma=1.0, **common), objective, x0)
    tracked = run_optimization(
        SgdConfig(averaging="tracking", gamma=1.0, compression=comp.Identity(), **common),
        objective, x0,
    )
    diff = float(np.max(np.abs(plain.final_x - tracked.final_x)))
    return CheckOutcome("identity_reduction", "identity_reduction", diff <= 1e-12, diff, 1e-12)


def theory_check(kind: str) -> list[CheckOutcome]:
    """Run one of the built-in bound suites; see the CLI ``check`` command."""
    if kind == "exact_rate":
        return [_check_exact_rate(0.5), _check_exact_rate(1.0)]
    if kind == "tracking_rate":
        return [_check_tracking_rate()]
    if kind == "mixing":
        return _check_mixing()
    if kind == "omega_contract":
        return _omega_contract_outcomes()
    if kind == "identity_reduction":
        return [_check_identity_reduction()]
    if kind == "all":
        out = []
        for k in ("exact_rate", "tracking_rate", "mixing", "omega_contract", "identity_reduction"):
            out.extend(theory_check(k))
        return out
    raise ConfigError(f"unknown check kind {kind!r}")
