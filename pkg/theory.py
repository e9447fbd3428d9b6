"""Empirical checks of rank stabilization.

Covers the first-order SGD trajectory oracle for f(x) = gamma * B A x,
Monte-Carlo estimates of output moments and gradient norms across ranks,
log-log slope fits, and central finite-difference gradient checks.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from adapter import (
    Adapter,
    AdapterConfig,
    InitScaleMode,
    ScalingRule,
    adapter_backward,
    adapter_forward,
    gamma,
    init_adapter,
)
from net import (
    Batch,
    ForwardCache,
    LossKind,
    LossSpec,
    Nonlinearity,
    attach_adapters,
    build_mlp,
    compute_loss,
    model_backward,
    model_forward,
)
from numerics import (
    DimensionError,
    DomainError,
    Matrix,
    RngStream,
    frobenius_norm,
    gaussian_fill,
    matmul,
    shape_text,
    zeros,
)
from optim import sgd_step

logger = logging.getLogger(__name__)

# Exponents at or above this only get slope checks on small ranks: (gamma^2 r)^2
# falls below the useful float range past rank 64.
STEEP_EXPONENT = 2.0
STEEP_RANK_LIMIT = 64


class StatisticKind(str, Enum):
    OUTPUT_MOMENT = "output-moment"
    INPUT_GRAD_SQNORM = "input-grad-sqnorm"
    INIT_GRADB_NORM = "init-gradB-norm"
    REMAINDER = "remainder"


@dataclass
class TrajectoryOracleInput:
    config: AdapterConfig
    d1: int
    d2: int
    eta: float
    inputs: List[Matrix]
    probe_grads: List[Matrix]

    def __post_init__(self) -> None:
        if len(self.inputs) != len(self.probe_grads):
            raise DomainError(
                f"{len(self.inputs)} inputs but {len(self.probe_grads)} output gradients"
            )
        for x, v in zip(self.inputs, self.probe_grads):
            if x.shape != (self.d1, 1) or v.shape != (self.d2, 1):
                raise DimensionError(
                    f"expected x {self.d1}x1 and v {self.d2}x1, got {shape_text(x)} and {shape_text(v)}"
                )

    @property
    def steps(self) -> int:
        return len(self.inputs)


def _check_a0(inp: TrajectoryOracleInput, a0: Matrix) -> None:
    if a0.shape != (inp.config.rank, inp.d1):
        raise DimensionError(f"A0 must be {inp.config.rank}x{inp.d1}, got {shape_text(a0)}")


def analytic_first_order_trajectory(inp: TrajectoryOracleInput, a0: Matrix) -> Tuple[Matrix, Matrix]:
    """B_n ~ -eta * gamma * (sum_k v_k x_k^T) A0^T and A_n ~ A0."""
    _check_a0(inp, a0)
    if inp.steps == 0:
        return zeros(inp.d2, inp.config.rank), np.array(a0)
    outer = sum(matmul(v, x.T) for x, v in zip(inp.inputs, inp.probe_grads))
    g = gamma(inp.config.rule, inp.config.rank)
    return -(inp.eta * g) * matmul(outer, a0.T), np.array(a0)


def simulate_sgd_trajectory(inp: TrajectoryOracleInput, a0: Matrix) -> Tuple[Matrix, Matrix]:
    """Exact SGD from B = 0, A = A0 with the given output gradients. Returns (B_n, A_n)."""
    _check_a0(inp, a0)
    ad = Adapter(a=np.array(a0), b=zeros(inp.d2, inp.config.rank), config=inp.config)
    for x, v in zip(inp.inputs, inp.probe_grads):
        grad_a, grad_b, _ = adapter_backward(ad, x, v)
        a, b = sgd_step([ad.a, ad.b], [grad_a, grad_b], inp.eta)
        ad = Adapter(a=a, b=b, config=inp.config)
    return ad.b, ad.a


def trajectory_residual(inp: TrajectoryOracleInput, a0: Matrix) -> Tuple[float, float]:
    """Absolute and relative Frobenius distance between exact and first-order B_n."""
    true_b, _ = simulate_sgd_trajectory(inp, a0)
    pred_b, _ = analytic_first_order_trajectory(inp, a0)
    residual = frobenius_norm(true_b - pred_b)
    scale = frobenius_norm(pred_b)
    return residual, (residual / scale if scale > 0 else 0.0)


def random_oracle_input(
    config: AdapterConfig,
    d1: int,
    d2: int,
    eta: float,
    n_steps: int,
    rng: RngStream,
) -> Tuple[TrajectoryOracleInput, Matrix]:
    """iid N(0, 1) inputs and output gradients plus a freshly initialized A0."""
    gen = rng.derive("samples").generator()
    inputs = [gaussian_fill(d1, 1, 0.0, 1.0, gen) for _ in range(n_steps)]
    grads = [gaussian_fill(d2, 1, 0.0, 1.0, gen) for _ in range(n_steps)]
    a0 = init_adapter(config, d1, d2, rng.derive("a0")).a
    return TrajectoryOracleInput(config, d1, d2, eta, inputs, grads), a0


def step_one_error(config: AdapterConfig, d1: int, d2: int, eta: float, rng: RngStream) -> float:
    """Relative error of the first-order formula after a single SGD step, where it is exact."""
    inp, a0 = random_oracle_input(config, d1, d2, eta, 1, rng)
    true_b, true_a = simulate_sgd_trajectory(inp, a0)
    pred_b, pred_a = analytic_first_order_trajectory(inp, a0)
    err_b = frobenius_norm(true_b - pred_b) / frobenius_norm(pred_b)
    err_a = frobenius_norm(true_a - pred_a) / frobenius_norm(pred_a)
    return max(err_b, err_a)


def step_one_suite(
    n_cases: int,
    rules: Sequence[ScalingRule],
    rng: RngStream,
    eta: float = 0.01,
) -> List[float]:
    """step_one_error over random dimensions, ranks and rules."""
    errors = []
    for index in range(n_cases):
        case = rng.derive("step-one", index)
        gen = case.generator()
        d1, d2 = (int(d) for d in gen.integers(1, 17, size=2))
        rank = int(gen.integers(1, 65))
        rule = rules[index % len(rules)]
        errors.append(step_one_error(AdapterConfig(rank, rule), d1, d2, eta, case))
    return errors


def remainder_order_sweep(
    config: AdapterConfig,
    d1: int,
    d2: int,
    eta: float,
    n_steps: int,
    alphas: Sequence[float],
    rng: RngStream,
) -> "SlopeFit":
    """Log-log fit of the relative first-order residual against gamma, same data per alpha."""
    base, a0 = random_oracle_input(config, d1, d2, eta, n_steps, rng)
    points = []
    for alpha in alphas:
        rule = ScalingRule(config.rule.variant, alpha, config.rule.nu)
        scaled = AdapterConfig(config.rank, rule, config.sigma_a, config.init_scale_mode)
        inp = TrajectoryOracleInput(scaled, d1, d2, eta, base.inputs, base.probe_grads)
        _, relative = trajectory_residual(inp, a0)
        points.append((gamma(rule, config.rank), relative))
    return loglog_slope_fit(points)


def expectation_identity(
    rank: int,
    d1: int,
    sigma_a: Optional[float],
    n_seeds: int,
    rng: RngStream,
) -> Tuple[Matrix, float]:
    """Monte-Carlo mean of A0^T A0 and its relative Frobenius error against r * sigma_A * I."""
    config = AdapterConfig(rank, ScalingRule.parse("rslora", 1.0), sigma_a)
    total = zeros(d1, d1)
    for s in range(n_seeds):
        a0 = init_adapter(config, d1, 1, rng.derive("gram", s)).a
        total = total + matmul(a0.T, a0)
    mean = total / n_seeds
    expected = rank * config.variance_for(d1) * np.eye(d1)
    scale = frobenius_norm(expected)
    error = frobenius_norm(mean - expected) / scale if scale > 0 else frobenius_norm(mean)
    return mean, error


@dataclass(frozen=True)
class MomentEstimate:
    rank: int
    rule: ScalingRule
    m: int
    statistic: StatisticKind
    estimate: float
    stderr: float
    n_seeds: int

    def to_row(self) -> Dict[str, object]:
        return {
            "rank": self.rank,
            "rule": self.rule.tag,
            "nu": self.rule.exponent,
            "alpha": self.rule.alpha,
            "m": self.m,
            "statistic": StatisticKind(self.statistic).value,
            "estimate": self.estimate,
            "stderr": self.stderr,
            "n_seeds": self.n_seeds,
        }

    @classmethod
    def from_row(cls, row: Mapping[str, object]) -> "MomentEstimate":
        return cls(
            rank=row["rank"],
            rule=ScalingRule.parse(row["rule"], row["alpha"]),
            m=row["m"],
            statistic=StatisticKind(row["statistic"]),
            estimate=row["estimate"],
            stderr=row["stderr"],
            n_seeds=row["n_seeds"],
        )


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    r_squared: float
    points: Tuple[Tuple[float, float], ...]


@dataclass(frozen=True)
class SlopeSummary:
    """One row of slopes.csv."""

    rule: str
    nu: float
    statistic: str
    m: int
    slope: float
    intercept: float
    r_squared: float
    n_points: int

    def to_row(self) -> Dict[str, object]:
        return dict(self.__dict__)

    @classmethod
    def from_row(cls, row: Mapping[str, object]) -> "SlopeSummary":
        return cls(**{name: row[name] for name in cls.__dataclass_fields__})


def loglog_slope_fit(points: Sequence[Tuple[float, float]]) -> SlopeFit:
    """Ordinary least squares of ln y on ln x."""
    if len(points) < 2:
        raise DomainError(f"a slope fit needs at least 2 points, got {len(points)}")
    xs = np.array([p[0] for p in points], dtype=np.float64)
    ys = np.array([p[1] for p in points], dtype=np.float64)
    if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))) or np.any(xs <= 0) or np.any(ys <= 0):
        raise DomainError("log-log fit needs finite positive coordinates")
    lx, ly = np.log(xs), np.log(ys)
    if np.ptp(lx) == 0:
        raise DomainError("log-log fit needs at least two distinct x values")
    slope, intercept = np.polyfit(lx, ly, 1)
    ss_res = float(np.sum((ly - (slope * lx + intercept)) ** 2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r_squared = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return SlopeFit(
        slope=float(slope),
        intercept=float(intercept),
        r_squared=min(1.0, max(0.0, r_squared)),
        points=tuple((float(a), float(b)) for a, b in zip(lx, ly)),
    )


def summarize_slope(estimates: Sequence[MomentEstimate]) -> SlopeSummary:
    if not estimates:
        raise DomainError("no estimates to fit")
    first = estimates[0]
    fit = loglog_slope_fit([(e.rank, e.estimate) for e in estimates])
    return SlopeSummary(
        rule=first.rule.tag,
        nu=first.rule.exponent,
        statistic=StatisticKind(first.statistic).value,
        m=first.m,
        slope=fit.slope,
        intercept=fit.intercept,
        r_squared=fit.r_squared,
        n_points=len(estimates),
    )


def ranks_for_rule(rule: ScalingRule, ranks: Sequence[int]) -> List[int]:
    if rule.exponent >= STEEP_EXPONENT:
        return [r for r in ranks if r <= STEEP_RANK_LIMIT]
    return list(ranks)


def _unit_probe(d2: int) -> Matrix:
    return np.full((d2, 1), 1.0 / math.sqrt(d2))


def _check_sweep(rule: ScalingRule, ranks: Sequence[int], n_seeds: int) -> None:
    if not ranks or any(r < 1 for r in ranks) or any(b <= a for a, b in zip(ranks, ranks[1:])):
        raise DomainError(f"ranks must be positive and strictly increasing, got {list(ranks)}")
    if rule.exponent <= 0:
        raise DomainError(f"rule {rule.tag} does not send gamma to 0 as rank grows")
    if n_seeds < 1:
        raise DomainError(f"need at least one seed, got {n_seeds}")


def _train_probe_adapter(
    rule: ScalingRule,
    rank: int,
    d1: int,
    d2: int,
    eta: float,
    n_steps: int,
    sigma_a: Optional[float],
    input_mean: float,
    cell: RngStream,
) -> Adapter:
    """n_steps of SGD on the linear probe u^T f(x) with iid inputs."""
    config = AdapterConfig(rank, rule, sigma_a)
    ad = init_adapter(config, d1, d2, cell.derive("a0"))
    gen = cell.derive("train").generator()
    u = _unit_probe(d2)
    for _ in range(n_steps):
        x = gaussian_fill(d1, 1, input_mean, 1.0, gen)
        grad_a, grad_b, _ = adapter_backward(ad, x, u)
        a, b = sgd_step([ad.a, ad.b], [grad_a, grad_b], eta)
        ad = Adapter(a=a, b=b, config=config)
    return ad


def _monte_carlo(
    rule: ScalingRule,
    ranks: Sequence[int],
    m: int,
    statistic: StatisticKind,
    n_seeds: int,
    cell_value: Callable[[int, int], float],
    threads: int,
) -> List[MomentEstimate]:
    cells = [(r, s) for r in ranks for s in range(n_seeds)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            values = list(pool.map(lambda c: cell_value(*c), cells))
    else:
        values = [cell_value(r, s) for r, s in cells]
    estimates = []
    for k, rank in enumerate(ranks):
        per_seed = np.array(values[k * n_seeds:(k + 1) * n_seeds])
        stderr = float(per_seed.std(ddof=1) / math.sqrt(n_seeds)) if n_seeds > 1 else 0.0
        estimates.append(
            MomentEstimate(rank, rule, m, statistic, float(per_seed.mean()), stderr, n_seeds)
        )
    logger.info("%s %s over ranks %s: %d cells", statistic.value, rule.tag, list(ranks), len(cells))
    return estimates


def moment_scaling_experiment(
    rule: ScalingRule,
    ranks: Sequence[int],
    m: int = 2,
    n_steps: int = 8,
    n_seeds: int = 64,
    d1: int = 2,
    d2: int = 8,
    eta: float = 0.01,
    *,
    seed: int = 0,
    n_eval: int = 256,
    input_mean: float = 0.0,
    sigma_a: Optional[float] = None,
    threads: int = 1,
) -> List[MomentEstimate]:
    """m-th moment of adapter output entries on fresh inputs after n_steps of SGD."""
    if m < 1 or int(m) != m:
        raise DomainError(f"moment order must be a positive integer, got {m}")
    if m % 2 and input_mean == 0.0:
        raise DomainError(f"odd moment m={m} has zero leading term with zero-mean inputs")
    _check_sweep(rule, ranks, n_seeds)
    base = RngStream(seed).derive("moments")

    def cell_value(rank: int, s: int) -> float:
        cell = base.derive(s)
        ad = _train_probe_adapter(rule, rank, d1, d2, eta, n_steps, sigma_a, input_mean, cell)
        x = gaussian_fill(d1, n_eval, input_mean, 1.0, cell.derive("eval"))
        return float(np.mean(adapter_forward(ad, x) ** m))

    return _monte_carlo(rule, ranks, m, StatisticKind.OUTPUT_MOMENT, n_seeds, cell_value, threads)


def input_gradient_scaling_experiment(
    rule: ScalingRule,
    ranks: Sequence[int],
    n_steps: int = 8,
    n_seeds: int = 64,
    d1: int = 2,
    d2: int = 8,
    eta: float = 0.01,
    *,
    seed: int = 0,
    n_eval: int = 256,
    sigma_a: Optional[float] = None,
    threads: int = 1,
) -> List[MomentEstimate]:
    """E ||grad_x L||^2 of the linear probe on fresh inputs after n_steps of SGD."""
    _check_sweep(rule, ranks, n_seeds)
    base = RngStream(seed).derive("moments")
    u = _unit_probe(d2)

    def cell_value(rank: int, s: int) -> float:
        cell = base.derive(s)
        ad = _train_probe_adapter(rule, rank, d1, d2, eta, n_steps, sigma_a, 0.0, cell)
        x = gaussian_fill(d1, n_eval, 0.0, 1.0, cell.derive("eval"))
        _, _, grad_x = adapter_backward(ad, x, np.repeat(u, n_eval, axis=1))
        return float(np.mean(np.sum(grad_x**2, axis=0)))

    return _monte_carlo(rule, ranks, 2, StatisticKind.INPUT_GRAD_SQNORM, n_seeds, cell_value, threads)


def init_gradient_norm_experiment(
    rule: ScalingRule,
    ranks: Sequence[int],
    n_seeds: int = 256,
    d1: int = 8,
    d2: int = 8,
    *,
    seed: int = 0,
    sigma_a: Optional[float] = None,
    init_scale_mode: InitScaleMode = InitScaleMode.STANDARD,
    threads: int = 1,
) -> List[MomentEstimate]:
    """E ||grad_B L||_F at initialization for a fixed unit input and unit output gradient."""
    if not ranks or any(b <= a for a, b in zip(ranks, ranks[1:])):
        raise DomainError(f"ranks must be strictly increasing, got {list(ranks)}")
    base = RngStream(seed).derive("init-grad")
    x = gaussian_fill(d1, 1, 0.0, 1.0, base.derive("x"))
    x = x / frobenius_norm(x)
    u = _unit_probe(d2)

    def cell_value(rank: int, s: int) -> float:
        config = AdapterConfig(rank, rule, sigma_a, init_scale_mode)
        ad = init_adapter(config, d1, d2, base.derive(s, "a0"))
        _, grad_b, _ = adapter_backward(ad, x, u)
        return frobenius_norm(grad_b)

    return _monte_carlo(rule, ranks, 1, StatisticKind.INIT_GRADB_NORM, n_seeds, cell_value, threads)


def finite_diff_check(
    fn: Callable[[Matrix], float],
    param: Matrix,
    analytic_grad: Matrix,
    h: float,
    floor: float = 1e-12,
) -> float:
    """Max over entries of |central difference - analytic| / (|analytic| + floor)."""
    if not h > 0:
        raise DomainError(f"step h must be positive, got {h}")
    if param.shape != analytic_grad.shape:
        raise DimensionError(
            f"parameter {shape_text(param)} vs gradient {shape_text(analytic_grad)}"
        )
    worst = 0.0
    for idx in np.ndindex(*param.shape):
        plus = np.array(param, dtype=np.float64)
        minus = np.array(param, dtype=np.float64)
        plus[idx] += h
        minus[idx] -= h
        fd = (fn(plus) - fn(minus)) / (2.0 * h)
        exact = analytic_grad[idx]
        worst = max(worst, abs(fd - exact) / (abs(exact) + floor))
    return worst


def relative_floor(grad: Matrix, fraction: float = 1e-2) -> float:
    """Error floor scaled to the largest gradient entry."""
    return fraction * float(np.max(np.abs(grad))) + 1e-12


@dataclass(frozen=True)
class GradCheckCase:
    index: int
    description: str
    error: float


def _check_adapter_case(gen: np.random.Generator, h: float) -> Tuple[str, float]:
    d1, d2 = int(gen.integers(1, 13)), int(gen.integers(1, 13))
    rank, n = int(gen.integers(1, 9)), int(gen.integers(1, 4))
    rule = ScalingRule.parse(str(gen.choice(["lora", "rslora", "none"])), 1.0)
    config = AdapterConfig(rank, rule, 1.0 / d1)
    a = gaussian_fill(rank, d1, 0.0, 1.0 / d1, gen)
    b = gaussian_fill(d2, rank, 0.0, 1.0, gen)
    x = gaussian_fill(d1, n, 0.0, 1.0, gen)
    v = gaussian_fill(d2, n, 0.0, 1.0, gen)
    ad = Adapter(a=a, b=b, config=config)
    grad_a, grad_b, grad_x = adapter_backward(ad, x, v)

    def probe(a_=a, b_=b, x_=x) -> float:
        return float(np.sum(v * adapter_forward(Adapter(a=a_, b=b_, config=config), x_)))

    errors = [
        finite_diff_check(lambda p: probe(a_=p), a, grad_a, h, relative_floor(grad_a)),
        finite_diff_check(lambda p: probe(b_=p), b, grad_b, h, relative_floor(grad_b)),
        finite_diff_check(lambda p: probe(x_=p), x, grad_x, h, relative_floor(grad_x)),
    ]
    return f"adapter d1={d1} d2={d2} r={rank} n={n} {rule.tag}", max(errors)


def _clear_of_kinks(cache: ForwardCache, margin: float = 1e-3) -> bool:
    """No hidden pre-activation close enough to 0 for a finite difference to straddle it.

    Exact zeros (layer norm over a single feature) stay zero under any perturbation.
    """
    for y in cache.pre[:-1]:
        live = np.abs(y[y != 0.0])
        if live.size and float(live.min()) <= margin:
            return False
    return True


def _check_model_case(gen: np.random.Generator, case: RngStream, h: float) -> Tuple[str, float]:
    n_layers = int(gen.integers(1, 4))
    dims = [int(d) for d in gen.integers(1, 13, size=n_layers + 1)]
    if gen.random() < 0.5:
        dims[1:-1] = [dims[1]] * (n_layers - 1)
    nonlinearity = Nonlinearity(str(gen.choice([k.value for k in Nonlinearity])))
    layernorm, residual = bool(gen.random() < 0.5), bool(gen.random() < 0.5)
    rank, n = int(gen.integers(1, 9)), int(gen.integers(1, 4))
    rule = ScalingRule.parse(str(gen.choice(["lora", "rslora"])), 1.0)
    model = build_mlp(dims, case.derive("base"), nonlinearity, layernorm, residual)
    attach_adapters(model, AdapterConfig(rank, rule), case.derive("adapters"))
    params = model.adapter_params()
    # non-zero B so every gradient path is live
    for k in range(1, len(params), 2):
        params[k] = gaussian_fill(params[k].shape[0], rank, 0.0, 1.0, gen)
    model.set_adapter_params(params)

    kind = LossKind(str(gen.choice([k.value for k in LossKind])))
    d_out = dims[-1]
    if kind is LossKind.LINEAR_PROBE:
        spec, targets = LossSpec(kind, gaussian_fill(d_out, 1, 0.0, 1.0, gen)), None
    elif kind is LossKind.MSE:
        spec, targets = LossSpec(kind), gaussian_fill(d_out, n, 0.0, 1.0, gen)
    else:
        spec, targets = LossSpec(kind), gen.integers(0, d_out, size=n)
    for _ in range(32):
        batch = Batch(inputs=gaussian_fill(dims[0], n, 0.0, 1.0, gen), targets=targets)
        cache, outputs = model_forward(model, batch)
        if nonlinearity is not Nonlinearity.RELU or _clear_of_kinks(cache):
            break
    _, loss_grad = compute_loss(spec, outputs, targets)
    grads = model_backward(model, cache, loss_grad)
    flat = []
    for i in model.hosted_indices():
        flat.extend([grads[i].a, grads[i].b])

    def loss_at(k: int, value: Matrix) -> float:
        trial = list(params)
        trial[k] = value
        model.set_adapter_params(trial)
        try:
            _, out = model_forward(model, batch)
            return compute_loss(spec, out, targets)[0]
        finally:
            model.set_adapter_params(params)

    errors = [
        finite_diff_check(lambda p, k=k: loss_at(k, p), params[k], flat[k], h, relative_floor(flat[k]))
        for k in range(len(params))
    ]
    description = (
        f"model dims={dims} {nonlinearity.value} ln={layernorm} res={residual} "
        f"r={rank} n={n} {rule.tag} {kind.value}"
    )
    return description, max(errors)


def gradient_check_suite(n_cases: int, rng: RngStream, h: float = 1e-5) -> List[GradCheckCase]:
    """Randomized finite-difference checks; even cases exercise a bare adapter, odd a model."""
    results = []
    for index in range(n_cases):
        case = rng.derive("gradcheck", index)
        gen = case.generator()
        if index % 2 == 0:
            description, error = _check_adapter_case(gen, h)
        else:
            description, error = _check_model_case(gen, case, h)
        results.append(GradCheckCase(index, description, error))
    if results:
        logger.info("gradient check suite: %d cases, max error %.3g", n_cases, max(c.error for c in results))
    return results
