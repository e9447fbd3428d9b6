"""Low-rank adapters gamma_r * B @ A on frozen linear layers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from numerics import (
    DimensionError,
    DomainError,
    InvalidStateError,
    Matrix,
    RandomSource,
    gaussian_fill,
    matmul,
    shape_text,
    zeros,
)


class RuleVariant(str, Enum):
    RECIPROCAL_RANK = "lora"
    RECIPROCAL_SQRT_RANK = "rslora"
    POWER = "power"
    NONE = "none"


_FIXED_EXPONENTS = {
    RuleVariant.RECIPROCAL_RANK: 1.0,
    RuleVariant.RECIPROCAL_SQRT_RANK: 0.5,
    RuleVariant.NONE: 0.0,
}


@dataclass(frozen=True)
class ScalingRule:
    """gamma_r = alpha * r**(-nu)."""

    variant: RuleVariant
    alpha: float = 16.0
    nu: Optional[float] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "variant", RuleVariant(self.variant))
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise DomainError(f"alpha must be positive and finite, got {self.alpha}")
        if self.variant is RuleVariant.POWER:
            if self.nu is None or not math.isfinite(self.nu):
                raise DomainError("power rule needs a finite exponent nu")
        elif self.nu is not None:
            raise DomainError(f"{self.variant.value} rule takes no explicit nu")

    @property
    def exponent(self) -> float:
        if self.variant is RuleVariant.POWER:
            return float(self.nu)
        return _FIXED_EXPONENTS[self.variant]

    @property
    def tag(self) -> str:
        if self.variant is RuleVariant.POWER:
            return f"power:{self.nu!r}"
        return self.variant.value

    @classmethod
    def parse(cls, text: str, alpha: float = 16.0, nu: Optional[float] = None) -> "ScalingRule":
        """Parse ``lora``, ``rslora``, ``none``, ``power:<nu>`` or ``power`` with ``nu``."""
        name, _, suffix = text.strip().lower().partition(":")
        try:
            variant = RuleVariant(name)
        except ValueError:
            raise DomainError(f"unknown scaling rule {text!r}") from None
        if variant is RuleVariant.POWER:
            if suffix:
                try:
                    nu = float(suffix)
                except ValueError:
                    raise DomainError(f"bad exponent in {text!r}") from None
            return cls(variant, alpha, nu)
        if suffix:
            raise DomainError(f"{name} takes no exponent")
        return cls(variant, alpha)

    @classmethod
    def from_exponent(cls, nu: float, alpha: float = 16.0) -> "ScalingRule":
        """Canonical rule for an exponent: 1 -> lora, 1/2 -> rslora, 0 -> none."""
        for variant, exponent in _FIXED_EXPONENTS.items():
            if nu == exponent:
                return cls(variant, alpha)
        return cls(RuleVariant.POWER, alpha, float(nu))


class InitScaleMode(str, Enum):
    STANDARD = "standard"
    INIT_ONLY_SQRT = "init-only-sqrt"


@dataclass(frozen=True)
class AdapterConfig:
    """Rank, scaling rule and A's initial variance.

    ``sigma_a`` is a variance fixed once per experiment and never a function
    of rank; ``None`` means 1/d1 of the host layer.
    """

    rank: int
    rule: ScalingRule
    sigma_a: Optional[float] = None
    init_scale_mode: InitScaleMode = InitScaleMode.STANDARD

    def __post_init__(self) -> None:
        object.__setattr__(self, "init_scale_mode", InitScaleMode(self.init_scale_mode))
        if int(self.rank) != self.rank or self.rank < 1:
            raise DomainError(f"rank must be a positive integer, got {self.rank}")
        if self.sigma_a is not None and not self.sigma_a >= 0:
            raise DomainError(f"sigma_a must be non-negative, got {self.sigma_a}")

    def variance_for(self, d1: int) -> float:
        return 1.0 / d1 if self.sigma_a is None else float(self.sigma_a)


def gamma(rule: ScalingRule, r: int) -> float:
    if r <= 0:
        raise DomainError(f"rank must be positive, got {r}")
    nu = rule.exponent
    # Dispatch on the exponent so power(1) and power(0.5) share the exact
    # arithmetic of the named rules.
    if nu == 0.0:
        return float(rule.alpha)
    if nu == 1.0:
        return rule.alpha / r
    if nu == 0.5:
        return rule.alpha / math.sqrt(r)
    return rule.alpha * float(r) ** (-nu)


@dataclass
class Adapter:
    a: Matrix
    b: Matrix
    config: AdapterConfig

    def __post_init__(self) -> None:
        r = self.config.rank
        if self.a.ndim != 2 or self.b.ndim != 2 or self.a.shape[0] != r or self.b.shape[1] != r:
            raise DimensionError(
                f"adapter of rank {r} needs A r x d1 and B d2 x r, "
                f"got A {shape_text(self.a)} and B {shape_text(self.b)}"
            )

    @property
    def gamma(self) -> float:
        return gamma(self.config.rule, self.config.rank)

    @property
    def d1(self) -> int:
        return self.a.shape[1]

    @property
    def d2(self) -> int:
        return self.b.shape[0]


@dataclass
class FrozenLinear:
    """x_out = W x_in + b, optionally plus an adapter. W and bias are never updated."""

    w: Matrix
    bias: Matrix
    adapter: Optional[Adapter] = field(default=None)

    def __post_init__(self) -> None:
        if self.bias.shape != (self.w.shape[0], 1):
            raise DimensionError(
                f"bias must be {self.w.shape[0]}x1 for W {shape_text(self.w)}, got {shape_text(self.bias)}"
            )
        if self.adapter is not None and (self.adapter.d1, self.adapter.d2) != (self.d_in, self.d_out):
            raise DimensionError(
                f"adapter maps {self.adapter.d1}->{self.adapter.d2} but W is {shape_text(self.w)}"
            )

    @property
    def d_in(self) -> int:
        return self.w.shape[1]

    @property
    def d_out(self) -> int:
        return self.w.shape[0]


def init_adapter(config: AdapterConfig, d1: int, d2: int, rng: RandomSource) -> Adapter:
    if d1 < 1 or d2 < 1:
        raise DomainError(f"layer dimensions must be positive, got d1={d1}, d2={d2}")
    r = config.rank
    a = gaussian_fill(r, d1, 0.0, config.variance_for(d1), rng)
    if config.init_scale_mode is InitScaleMode.INIT_ONLY_SQRT:
        a = a * (1.0 / math.sqrt(r))
    return Adapter(a=a, b=zeros(d2, r), config=config)


def adapter_forward(ad: Adapter, x: Matrix) -> Matrix:
    """gamma * B @ (A @ x); B @ A is never formed."""
    _check_input(ad, x)
    return ad.gamma * matmul(ad.b, matmul(ad.a, x))


def augmented_forward(layer: FrozenLinear, x: Matrix) -> Matrix:
    if x.ndim != 2 or x.shape[0] != layer.d_in:
        raise DimensionError(f"layer expects {layer.d_in} input rows, got {shape_text(x)}")
    out = matmul(layer.w, x) + layer.bias
    if layer.adapter is not None:
        out = out + adapter_forward(layer.adapter, x)
    return out


def adapter_backward(ad: Adapter, x: Matrix, v: Matrix) -> Tuple[Matrix, Matrix, Matrix]:
    """Gradients of <v, gamma B A x> with respect to A, B and x.

    Columns of ``x`` and ``v`` are paired samples; the A and B gradients are
    summed over them.
    """
    _check_input(ad, x)
    if v.ndim != 2 or v.shape != (ad.d2, x.shape[1]):
        raise DimensionError(
            f"output gradient must be {ad.d2}x{x.shape[1]}, got {shape_text(v)}"
        )
    g = ad.gamma
    ax = matmul(ad.a, x)
    btv = matmul(ad.b.T, v)
    grad_b = g * matmul(v, ax.T)
    grad_a = g * matmul(btv, x.T)
    grad_x = g * matmul(ad.a.T, btv)
    return grad_a, grad_b, grad_x


def merge(layer: FrozenLinear) -> Matrix:
    """Dense W + gamma * B @ A. The layer itself is left untouched."""
    ad = layer.adapter
    if ad is None:
        raise InvalidStateError("cannot merge a layer without an adapter")
    return layer.w + ad.gamma * matmul(ad.b, ad.a)


def _check_input(ad: Adapter, x: Matrix) -> None:
    if x.ndim != 2 or x.shape[0] != ad.d1:
        raise DimensionError(f"adapter expects {ad.d1} input rows, got {shape_text(x)}")


def with_alpha(ad: Adapter, alpha: float) -> Adapter:
    """Same A and B under the same rule with a different alpha."""
    rule = ScalingRule(ad.config.rule.variant, alpha, ad.config.rule.nu)
    config = AdapterConfig(ad.config.rank, rule, ad.config.sigma_a, ad.config.init_scale_mode)
    return Adapter(a=np.array(ad.a), b=np.array(ad.b), config=config)
