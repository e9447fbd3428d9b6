"""SGD and AdamW over adapter parameters only.

Both rules are functional: they return new matrices and never write into the
arrays they were given.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from numerics import DimensionError, InvalidStateError, Matrix, shape_text


class OptimKind(str, Enum):
    SGD = "sgd"
    ADAMW = "adamw"


@dataclass(frozen=True)
class OptimState:
    kind: OptimKind
    eta: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    first: Optional[Tuple[Matrix, ...]] = None
    second: Optional[Tuple[Matrix, ...]] = None
    step: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", OptimKind(self.kind))


def _check_pairs(params: Sequence[Matrix], grads: Sequence[Matrix]) -> None:
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if np.shape(p) != np.shape(g):
            raise DimensionError(f"parameter {shape_text(p)} vs gradient {shape_text(g)}")


def sgd_step(params: Sequence[Matrix], grads: Sequence[Matrix], eta: float) -> List[Matrix]:
    _check_pairs(params, grads)
    return [p - eta * g for p, g in zip(params, grads)]


def init_optim_state(
    kind: OptimKind,
    eta: float,
    params: Sequence[Matrix],
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> OptimState:
    kind = OptimKind(kind)
    first = second = None
    if kind is OptimKind.ADAMW:
        first = tuple(np.zeros_like(p) for p in params)
        second = tuple(np.zeros_like(p) for p in params)
    return OptimState(kind, eta, beta1, beta2, eps, weight_decay, first, second)


def adamw_step(
    state: OptimState,
    params: Sequence[Matrix],
    grads: Sequence[Matrix],
) -> Tuple[OptimState, List[Matrix]]:
    """Bias-corrected Adam with decoupled weight decay."""
    if state.kind is not OptimKind.ADAMW or state.first is None or state.second is None:
        raise InvalidStateError("AdamW state has not been initialized")
    if len(state.first) != len(params):
        raise InvalidStateError(
            f"AdamW state tracks {len(state.first)} parameters, got {len(params)}"
        )
    _check_pairs(params, grads)
    t = state.step + 1
    eta, b1, b2 = state.eta, state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    first, second, updated = [], [], []
    for p, g, m, v in zip(params, grads, state.first, state.second):
        if m.shape != p.shape:
            raise InvalidStateError(f"moment buffer {shape_text(m)} vs parameter {shape_text(p)}")
        if state.weight_decay:
            p = p * (1.0 - eta * state.weight_decay)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        updated.append(p - eta * (m / c1) / (np.sqrt(v / c2) + state.eps))
        first.append(m)
        second.append(v)
    return replace(state, first=tuple(first), second=tuple(second), step=t), updated


def optimizer_step(
    state: OptimState,
    params: Sequence[Matrix],
    grads: Sequence[Matrix],
) -> Tuple[OptimState, List[Matrix]]:
    """Dispatch on ``state.kind``; SGD only advances the step counter."""
    if state.kind is OptimKind.SGD:
        return replace(state, step=state.step + 1), sgd_step(params, grads, state.eta)
    return adamw_step(state, params, grads)
