"""Training-time experiments: rank sweeps, SGD stability, ablations, learning-rate sweep.

Every (rule, rank, seed) cell trains its own adapters on its own frozen base.
Random streams are keyed by seed index and rank only, never by rule or
learning rate, so cells that differ only in scaling rule share their
initialization and data exactly.
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from adapter import AdapterConfig, InitScaleMode, RuleVariant, ScalingRule, merge
from checkpoint import save_adapter, save_matrices
from net import (
    Nonlinearity,
    Placement,
    Task,
    ToyModel,
    activation_moments,
    attach_adapters,
    build_char_lm_task,
    build_teacher_student_task,
    compute_loss,
    frozen_digest,
    load_corpus,
    model_backward,
    model_forward,
    perplexity,
)
from numerics import DomainError, InvalidStateError, RngStream, frobenius_norm
from optim import OptimKind, init_optim_state, optimizer_step

logger = logging.getLogger(__name__)

TASKS = ("teacher-student", "char-lm")

# Share of the run, counted from the end, averaged into a cell's final loss.
FINAL_WINDOW = 0.1


def learning_rate_grid() -> List[float]:
    """{5 * 10^n, 1 * 10^n : -5 < n < -1}, ascending."""
    return [m * 10.0**n for n in range(-4, -1) for m in (1.0, 5.0)]


@dataclass(frozen=True)
class ModelSettings:
    d_model: int = 64
    depth: int = 2
    context: int = 3
    nonlinearity: Nonlinearity = Nonlinearity.RELU
    layernorm: bool = True
    d_in: int = 16
    d_out: int = 16
    corpus: Optional[str] = None


@dataclass(frozen=True)
class LrSweepSettings:
    grid: Tuple[float, ...] = tuple(learning_rate_grid())
    low_rank: int = 4
    reference_rule: str = "rslora"
    reference_rank: int = 512


@dataclass(frozen=True)
class TheorySettings:
    ranks: Tuple[int, ...] = (4, 16, 64, 256, 1024)
    rules: Tuple[str, ...] = ("lora", "rslora", "power:0.25", "power:2")
    alpha: float = 1.0
    d1: int = 2
    d2: int = 8
    n_steps: int = 8
    n_seeds: int = 64
    eta: float = 0.01
    m: int = 2
    n_eval: int = 256
    input_mean: float = 0.0

    def scaling_rules(self) -> List[ScalingRule]:
        return [ScalingRule.parse(text, self.alpha) for text in self.rules]


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "char-lm"
    seed: int = 0
    threads: int = 1
    ranks: Tuple[int, ...] = (4, 8, 32, 128, 512)
    rules: Tuple[ScalingRule, ...] = (
        ScalingRule(RuleVariant.RECIPROCAL_RANK),
        ScalingRule(RuleVariant.RECIPROCAL_SQRT_RANK),
    )
    alpha: float = 16.0
    sigma_a: Optional[float] = None
    init_scale_mode: InitScaleMode = InitScaleMode.STANDARD
    optimizer: OptimKind = OptimKind.ADAMW
    learning_rate: float = 5e-5
    sgd_learning_rate: float = 1e-2
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    steps: int = 2000
    batch_size: int = 32
    seeds: int = 3
    placement: Placement = "hidden"
    probe_every: int = 10
    divergence_factor: float = 1000.0
    comparison_nus: Tuple[float, ...] = (0.25, 0.5, 1.0, 2.0)
    model: ModelSettings = field(default_factory=ModelSettings)
    lr_sweep: LrSweepSettings = field(default_factory=LrSweepSettings)
    theory: TheorySettings = field(default_factory=TheorySettings)

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise DomainError(f"unknown task {self.task!r}")
        if not self.ranks:
            raise DomainError("ranks must be non-empty")
        if self.steps < 1:
            raise DomainError(f"steps must be at least 1, got {self.steps}")
        if self.seeds < 1 or self.batch_size < 1 or self.probe_every < 1 or self.threads < 1:
            raise DomainError("seeds, batch_size, probe_every and threads must be positive")
        object.__setattr__(self, "optimizer", OptimKind(self.optimizer))
        object.__setattr__(self, "init_scale_mode", InitScaleMode(self.init_scale_mode))

    @classmethod
    def from_mapping(cls, doc: Mapping[str, object]) -> "ExperimentConfig":
        """Typed view of a resolved config document (see ``config.resolve_config``)."""
        alpha = float(doc["alpha"])
        model = dict(doc["model"])
        model["nonlinearity"] = Nonlinearity(model["nonlinearity"])
        sweep = dict(doc["lr_sweep"])
        sweep["grid"] = tuple(float(x) for x in sweep["grid"])
        theory = dict(doc["theory"])
        theory["ranks"] = tuple(theory["ranks"])
        theory["rules"] = tuple(theory["rules"])
        placement = doc["placement"]
        return cls(
            task=doc["task"],
            seed=int(doc["seed"]),
            threads=int(doc["threads"]),
            ranks=tuple(int(r) for r in doc["ranks"]),
            rules=tuple(ScalingRule.parse(text, alpha) for text in doc["rules"]),
            alpha=alpha,
            sigma_a=doc["sigma_a"],
            init_scale_mode=InitScaleMode(doc["init_scale_mode"]),
            optimizer=OptimKind(doc["optimizer"]),
            learning_rate=float(doc["learning_rate"]),
            sgd_learning_rate=float(doc["sgd_learning_rate"]),
            betas=tuple(doc["betas"]),
            eps=float(doc["eps"]),
            weight_decay=float(doc["weight_decay"]),
            steps=int(doc["steps"]),
            batch_size=int(doc["batch_size"]),
            seeds=int(doc["seeds"]),
            placement=placement if isinstance(placement, str) else tuple(placement),
            probe_every=int(doc["probe_every"]),
            divergence_factor=float(doc["divergence_factor"]),
            comparison_nus=tuple(float(nu) for nu in doc["comparison_nus"]),
            model=ModelSettings(**model),
            lr_sweep=LrSweepSettings(**sweep),
            theory=TheorySettings(**theory),
        )

    def default_learning_rate(self) -> float:
        return self.sgd_learning_rate if self.optimizer is OptimKind.SGD else self.learning_rate


@dataclass(frozen=True)
class TrajectoryRecord:
    step: int
    rank: int
    rule: str
    nu: float
    alpha: float
    seed: int
    loss: float
    perplexity: Optional[float]
    grad_norm_mean: float
    act_m1: float
    act_m2: float
    diverged: bool = False

    def to_row(self) -> Dict[str, object]:
        return dict(self.__dict__)

    @classmethod
    def from_row(cls, row: Mapping[str, object]) -> "TrajectoryRecord":
        values = {name: row[name] for name in cls.__dataclass_fields__}
        values["diverged"] = bool(values["diverged"])
        return cls(**values)


@dataclass(frozen=True)
class LrSweepRow:
    learning_rate: float
    rule: str
    rank: int
    final_loss: float
    best_flag: bool

    def to_row(self) -> Dict[str, object]:
        return dict(self.__dict__)

    @classmethod
    def from_row(cls, row: Mapping[str, object]) -> "LrSweepRow":
        values = {name: row[name] for name in cls.__dataclass_fields__}
        values["best_flag"] = bool(values["best_flag"])
        return cls(**values)


@dataclass(frozen=True)
class Cell:
    rule: ScalingRule
    rank: int
    seed: int
    learning_rate: float


def build_task(cfg: ExperimentConfig) -> Task:
    m = cfg.model
    if cfg.task == "teacher-student":
        return build_teacher_student_task(
            RngStream(cfg.seed).derive("task"),
            d_in=m.d_in,
            d_out=m.d_out,
            d_model=m.d_model,
            depth=m.depth,
            nonlinearity=m.nonlinearity,
            layernorm=m.layernorm,
        )
    return build_char_lm_task(
        load_corpus(m.corpus),
        context=m.context,
        d_model=m.d_model,
        depth=m.depth,
        nonlinearity=m.nonlinearity,
        layernorm=m.layernorm,
    )


def cell_label(cell: Cell) -> str:
    return f"{cell.rule.tag.replace(':', '-')}-r{cell.rank}-s{cell.seed}-lr{cell.learning_rate:g}"


def export_cell(model: ToyModel, cell: Cell, out_dir: Path) -> Path:
    """Write each hosted layer's adapter and the merged W + gamma BA of those layers."""
    cell_dir = Path(out_dir) / cell_label(cell)
    merged = {}
    for i in model.hosted_indices():
        layer = model.layers[i]
        save_adapter(layer.adapter, cell_dir / f"layer{i}.adapter.yaml")
        merged[f"layer{i}"] = merge(layer)
    save_matrices(merged, cell_dir / "merged.yaml")
    return cell_dir


def run_cell(
    task: Task, cfg: ExperimentConfig, cell: Cell, export_dir: Optional[Path] = None
) -> List[TrajectoryRecord]:
    """Train one cell; records at steps 1, 1 + probe_every, ... and at divergence.

    With ``export_dir`` the final adapters and merged weights go to
    ``export_dir/<cell label>/``.
    """
    root = RngStream(cfg.seed)
    model = task.build_base(root.derive("base", cell.seed), cfg.placement)
    digest = frozen_digest(model)
    adapter_config = AdapterConfig(cell.rank, cell.rule, cfg.sigma_a, cfg.init_scale_mode)
    attach_adapters(model, adapter_config, root.derive("adapter", cell.seed, cell.rank))
    gen = root.derive("data", cell.seed).generator()

    params = model.adapter_params()
    state = init_optim_state(
        cfg.optimizer, cell.learning_rate, params, cfg.betas[0], cfg.betas[1], cfg.eps, cfg.weight_decay
    )
    records: List[TrajectoryRecord] = []
    initial: Optional[float] = None
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for step in range(1, cfg.steps + 1):
            batch = task.sample_batch(gen, cfg.batch_size)
            cache, outputs = model_forward(model, batch)
            loss, loss_grad = compute_loss(task.loss, outputs, batch.targets)
            if initial is None:
                initial = loss
            diverged = not math.isfinite(loss) or (
                initial > 0 and loss > cfg.divergence_factor * initial
            )
            grads = model_backward(model, cache, loss_grad)
            flat = []
            for i in model.hosted_indices():
                flat.extend([grads[i].a, grads[i].b])
            if diverged or (step - 1) % cfg.probe_every == 0:
                records.append(
                    TrajectoryRecord(
                        step=step,
                        rank=cell.rank,
                        rule=cell.rule.tag,
                        nu=cell.rule.exponent,
                        alpha=cell.rule.alpha,
                        seed=cell.seed,
                        loss=loss,
                        perplexity=perplexity(loss) if task.reports_perplexity else None,
                        grad_norm_mean=float(np.mean([frobenius_norm(g) for g in flat])),
                        act_m1=activation_moments(cache, 1).mean,
                        act_m2=activation_moments(cache, 2).mean,
                        diverged=diverged,
                    )
                )
            if diverged:
                logger.warning(
                    "%s rank %d seed %d diverged at step %d (loss %s)",
                    cell.rule.tag, cell.rank, cell.seed, step, loss,
                )
                break
            state, params = optimizer_step(state, params, flat)
            model.set_adapter_params(params)

    if frozen_digest(model) != digest:
        raise InvalidStateError(f"frozen weights changed during {cell.rule.tag} rank {cell.rank}")
    if export_dir is not None:
        logger.info("exported %s to %s", cell_label(cell), export_cell(model, cell, export_dir))
    logger.info(
        "%s rank %d seed %d: %d records, last loss %.6g",
        cell.rule.tag, cell.rank, cell.seed, len(records), records[-1].loss,
    )
    return records


def run_cells(
    cfg: ExperimentConfig,
    cells: Sequence[Cell],
    task: Optional[Task] = None,
    export_dir: Optional[Path] = None,
) -> List[TrajectoryRecord]:
    """Cells run concurrently; output order follows ``cells``."""
    task = task if task is not None else build_task(cfg)
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            per_cell = list(pool.map(lambda c: run_cell(task, cfg, c, export_dir), cells))
    else:
        per_cell = [run_cell(task, cfg, c, export_dir) for c in cells]
    return [record for records in per_cell for record in records]


def _grid_cells(
    cfg: ExperimentConfig,
    rules: Sequence[ScalingRule],
    ranks: Sequence[int],
    learning_rate: Optional[float] = None,
) -> List[Cell]:
    lr = cfg.default_learning_rate() if learning_rate is None else learning_rate
    return [
        Cell(rule, rank, s, lr)
        for rule in rules
        for rank in ranks
        for s in range(cfg.seeds)
    ]


def run_rank_sweep(cfg: ExperimentConfig, export_dir: Optional[Path] = None) -> List[TrajectoryRecord]:
    return run_cells(cfg, _grid_cells(cfg, cfg.rules, cfg.ranks), export_dir=export_dir)


def run_sgd_stability(cfg: ExperimentConfig, export_dir: Optional[Path] = None) -> List[TrajectoryRecord]:
    return run_rank_sweep(replace(cfg, optimizer=OptimKind.SGD), export_dir)


def init_only_rules(alpha: float) -> List[ScalingRule]:
    """No scaling factor (gamma = alpha) and plain LoRA, both with A scaled by 1/sqrt(r)."""
    return [ScalingRule(RuleVariant.NONE, alpha), ScalingRule(RuleVariant.RECIPROCAL_RANK, alpha)]


def run_init_only_ablation(cfg: ExperimentConfig, export_dir: Optional[Path] = None) -> List[TrajectoryRecord]:
    if cfg.init_scale_mode is not InitScaleMode.INIT_ONLY_SQRT:
        logger.info("init-only ablation: using init_scale_mode %s", InitScaleMode.INIT_ONLY_SQRT.value)
        cfg = replace(cfg, init_scale_mode=InitScaleMode.INIT_ONLY_SQRT)
    return run_cells(cfg, _grid_cells(cfg, init_only_rules(cfg.alpha), cfg.ranks), export_dir=export_dir)


def cell_final_loss(records: Sequence[TrajectoryRecord], steps: int) -> float:
    """Mean recorded loss over the last tenth of training; inf for a diverged cell."""
    if not records:
        raise DomainError("no records for cell")
    if records[-1].diverged:
        return math.inf
    cutoff = steps - max(1, int(FINAL_WINDOW * steps))
    tail = [r.loss for r in records if r.step > cutoff] or [records[-1].loss]
    return float(np.mean(tail))


def final_losses(records: Sequence[TrajectoryRecord], steps: int) -> Dict[Tuple[str, int], List[float]]:
    """Per (rule tag, rank): final loss of each seed, in seed order."""
    cells: Dict[Tuple[str, int, int], List[TrajectoryRecord]] = defaultdict(list)
    for record in records:
        cells[(record.rule, record.rank, record.seed)].append(record)
    out: Dict[Tuple[str, int], List[float]] = defaultdict(list)
    for (rule, rank, _), cell_records in sorted(cells.items(), key=lambda kv: kv[0][2]):
        out[(rule, rank)].append(cell_final_loss(cell_records, steps))
    return dict(out)


def mean_gradient_norms(records: Sequence[TrajectoryRecord], rule: str) -> Dict[int, Dict[int, float]]:
    """step -> rank -> seed-mean of grad_norm_mean, for one rule tag."""
    sums: Dict[int, Dict[int, List[float]]] = defaultdict(lambda: defaultdict(list))
    for record in records:
        if record.rule == rule and not record.diverged:
            sums[record.step][record.rank].append(record.grad_norm_mean)
    return {
        step: {rank: float(np.mean(values)) for rank, values in by_rank.items()}
        for step, by_rank in sorted(sums.items())
    }


def cross_rank_gradient_ratios(records: Sequence[TrajectoryRecord], rule: str) -> Dict[int, float]:
    """step -> max/min over ranks of the seed-mean adapter gradient norm."""
    ratios = {}
    for step, by_rank in mean_gradient_norms(records, rule).items():
        if len(by_rank) > 1:
            ratios[step] = max(by_rank.values()) / min(by_rank.values())
    return ratios


def run_lr_sweep(
    cfg: ExperimentConfig,
    low_rank: Optional[int] = None,
    reference: Optional[Tuple[ScalingRule, int]] = None,
    export_dir: Optional[Path] = None,
) -> List[LrSweepRow]:
    """LoRA at a low rank over the grid, plus one reference row at the default learning rate."""
    settings = cfg.lr_sweep
    if not settings.grid:
        raise DomainError("learning-rate grid is empty")
    low_rank = settings.low_rank if low_rank is None else low_rank
    if reference is None:
        reference = (ScalingRule.parse(settings.reference_rule, cfg.alpha), settings.reference_rank)
    lora = ScalingRule(RuleVariant.RECIPROCAL_RANK, cfg.alpha)
    task = build_task(cfg)

    def mean_final(rule: ScalingRule, rank: int, lr: float) -> float:
        records = run_cells(cfg, _grid_cells(cfg, [rule], [rank], lr), task, export_dir)
        return float(np.mean(final_losses(records, cfg.steps)[(rule.tag, rank)]))

    swept = [(lr, mean_final(lora, low_rank, lr)) for lr in settings.grid]
    best = min(range(len(swept)), key=lambda k: swept[k][1])
    rows = [
        LrSweepRow(lr, lora.tag, low_rank, loss, k == best)
        for k, (lr, loss) in enumerate(swept)
    ]
    ref_rule, ref_rank = reference
    ref_lr = cfg.default_learning_rate()
    rows.append(LrSweepRow(ref_lr, ref_rule.tag, ref_rank, mean_final(ref_rule, ref_rank, ref_lr), False))
    logger.info(
        "lr sweep: best %s rank %d loss %.6g at lr %g; reference %s rank %d loss %.6g",
        lora.tag, low_rank, rows[best].final_loss, rows[best].learning_rate,
        ref_rule.tag, ref_rank, rows[-1].final_loss,
    )
    return rows


def comparison_rules(cfg: ExperimentConfig) -> List[ScalingRule]:
    return [ScalingRule.from_exponent(nu, cfg.alpha) for nu in cfg.comparison_nus]


def run_scaling_rule_comparison(
    cfg: ExperimentConfig, export_dir: Optional[Path] = None
) -> List[TrajectoryRecord]:
    """Every comparison exponent at the largest configured rank."""
    return run_cells(cfg, _grid_cells(cfg, comparison_rules(cfg), [max(cfg.ranks)]), export_dir=export_dir)
