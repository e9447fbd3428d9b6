"""Toy frozen-base networks hosting adapters, with exact reverse-mode gradients."""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from adapter import (
    Adapter,
    AdapterConfig,
    FrozenLinear,
    adapter_backward,
    augmented_forward,
    init_adapter,
)
from numerics import (
    DimensionError,
    DomainError,
    InvalidStateError,
    Matrix,
    RngStream,
    gaussian_fill,
    matmul,
    shape_text,
    zeros,
)

CORPUS_PATH = Path(__file__).resolve().parent / "data" / "corpus.txt"
LN_EPS = 1e-5

Placement = Union[str, Tuple[int, ...]]

_model_tokens = itertools.count()


class Nonlinearity(str, Enum):
    IDENTITY = "identity"
    RELU = "relu"
    TANH = "tanh"


def _activate(kind: Nonlinearity, y: Matrix) -> Matrix:
    if kind is Nonlinearity.RELU:
        return np.maximum(y, 0.0)
    if kind is Nonlinearity.TANH:
        return np.tanh(y)
    return y


def _activate_grad(kind: Nonlinearity, y: Matrix, grad: Matrix) -> Matrix:
    if kind is Nonlinearity.RELU:
        return grad * (y > 0.0)
    if kind is Nonlinearity.TANH:
        return grad * (1.0 - np.tanh(y) ** 2)
    return grad


@dataclass(frozen=True)
class LayerNormCache:
    xhat: Matrix
    inv_std: Matrix


def layer_norm(h: Matrix) -> Tuple[Matrix, LayerNormCache]:
    """Per-column normalization without affine parameters."""
    centered = h - h.mean(axis=0, keepdims=True)
    inv_std = 1.0 / np.sqrt(np.mean(centered**2, axis=0, keepdims=True) + LN_EPS)
    xhat = centered * inv_std
    return xhat, LayerNormCache(xhat=xhat, inv_std=inv_std)


def layer_norm_backward(grad: Matrix, cache: LayerNormCache) -> Matrix:
    mean_grad = grad.mean(axis=0, keepdims=True)
    mean_proj = np.mean(grad * cache.xhat, axis=0, keepdims=True)
    return cache.inv_std * (grad - mean_grad - cache.xhat * mean_proj)


@dataclass
class ToyModel:
    """Stack of frozen linear layers.

    Layer i reads h_i (layer-normalized for i > 0 when ``layernorm``) and
    produces y_i. Between layers h_{i+1} = act(y_i), plus h_i when
    ``residual`` and the layer is square. The last y is the model output.
    """

    layers: List[FrozenLinear]
    nonlinearity: Nonlinearity = Nonlinearity.IDENTITY
    layernorm: bool = False
    residual: bool = False
    placement: Placement = "all"
    token: int = field(default_factory=lambda: next(_model_tokens), init=False, compare=False)
    version: int = field(default=0, init=False, compare=False)

    def __post_init__(self) -> None:
        self.nonlinearity = Nonlinearity(self.nonlinearity)
        if not self.layers:
            raise DomainError("a model needs at least one layer")
        for i, (prev, nxt) in enumerate(zip(self.layers, self.layers[1:])):
            if prev.d_out != nxt.d_in:
                raise DimensionError(
                    f"layer {i} outputs {prev.d_out} but layer {i + 1} expects {nxt.d_in}"
                )
        self.placement_indices()

    @property
    def d_in(self) -> int:
        return self.layers[0].d_in

    @property
    def d_out(self) -> int:
        return self.layers[-1].d_out

    def placement_indices(self) -> List[int]:
        if self.placement == "all":
            return list(range(len(self.layers)))
        if self.placement == "hidden":
            if len(self.layers) < 3:
                raise DomainError(f"'hidden' placement needs at least 3 layers, got {len(self.layers)}")
            return list(range(1, len(self.layers) - 1))
        if isinstance(self.placement, str):
            raise DomainError(f"unknown placement {self.placement!r}")
        indices = sorted(set(int(i) for i in self.placement))
        if any(i < 0 or i >= len(self.layers) for i in indices):
            raise DomainError(f"placement {self.placement} outside 0..{len(self.layers) - 1}")
        return indices

    def hosted_indices(self) -> List[int]:
        return [i for i, layer in enumerate(self.layers) if layer.adapter is not None]

    def residual_at(self, i: int) -> bool:
        layer = self.layers[i]
        return self.residual and i < len(self.layers) - 1 and layer.d_in == layer.d_out

    def normalized_at(self, i: int) -> bool:
        return self.layernorm and i > 0

    def adapter_params(self) -> List[Matrix]:
        """[A, B] for each hosted layer, in layer order."""
        params: List[Matrix] = []
        for i in self.hosted_indices():
            ad = self.layers[i].adapter
            params.extend([ad.a, ad.b])
        return params

    def set_adapter_params(self, params: Sequence[Matrix]) -> None:
        hosted = self.hosted_indices()
        if len(params) != 2 * len(hosted):
            raise DimensionError(f"expected {2 * len(hosted)} adapter matrices, got {len(params)}")
        for k, i in enumerate(hosted):
            ad = self.layers[i].adapter
            a, b = params[2 * k], params[2 * k + 1]
            if a.shape != ad.a.shape or b.shape != ad.b.shape:
                raise DimensionError(
                    f"layer {i}: new A {shape_text(a)} / B {shape_text(b)} do not match "
                    f"{shape_text(ad.a)} / {shape_text(ad.b)}"
                )
            self.layers[i].adapter = Adapter(a=a, b=b, config=ad.config)
        self.version += 1


def attach_adapters(model: ToyModel, config: AdapterConfig, rng: RngStream) -> ToyModel:
    """Fresh adapters on every placed layer; layer i draws A from ``rng.derive("adapter", i)``."""
    for i in model.placement_indices():
        layer = model.layers[i]
        layer.adapter = init_adapter(config, layer.d_in, layer.d_out, rng.derive("adapter", i))
    model.version += 1
    return model


def without_adapters(model: ToyModel) -> ToyModel:
    """A copy of the frozen base sharing W and bias, with no adapters."""
    layers = [FrozenLinear(w=layer.w, bias=layer.bias) for layer in model.layers]
    return ToyModel(layers, model.nonlinearity, model.layernorm, model.residual, model.placement)


def frozen_digest(model: ToyModel) -> str:
    digest = hashlib.sha256()
    for layer in model.layers:
        digest.update(np.ascontiguousarray(layer.w).tobytes())
        digest.update(np.ascontiguousarray(layer.bias).tobytes())
    return digest.hexdigest()


def build_mlp(
    dims: Sequence[int],
    rng: RngStream,
    nonlinearity: Nonlinearity = Nonlinearity.IDENTITY,
    layernorm: bool = False,
    residual: bool = False,
    placement: Placement = "all",
) -> ToyModel:
    """Random frozen base: W_i ~ N(0, 1/fan_in), zero bias."""
    layers = []
    for i, (d_in, d_out) in enumerate(zip(dims, dims[1:])):
        w = gaussian_fill(d_out, d_in, 0.0, 1.0 / d_in, rng.derive("w", i))
        layers.append(FrozenLinear(w=w, bias=zeros(d_out, 1)))
    return ToyModel(layers, nonlinearity, layernorm, residual, placement)


class LossKind(str, Enum):
    MSE = "mse"
    CROSS_ENTROPY = "cross-entropy"
    LINEAR_PROBE = "linear-probe"


@dataclass(frozen=True)
class LossSpec:
    kind: LossKind
    probe: Optional[Matrix] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", LossKind(self.kind))
        if self.kind is LossKind.LINEAR_PROBE:
            if self.probe is None or self.probe.ndim != 2 or self.probe.shape[1] != 1:
                raise DimensionError("linear-probe loss needs a column vector u")


@dataclass
class Batch:
    """Columns of ``inputs`` are samples; ``targets`` is a matrix or class indices."""

    inputs: Matrix
    targets: Optional[Union[Matrix, np.ndarray]] = None

    def __post_init__(self) -> None:
        if self.inputs.ndim != 2 or self.inputs.shape[1] < 1:
            raise DimensionError(f"batch inputs must be d x batch, got {shape_text(self.inputs)}")
        if not np.all(np.isfinite(self.inputs)):
            raise DomainError("batch inputs must be finite")

    @property
    def size(self) -> int:
        return self.inputs.shape[1]


@dataclass
class ForwardCache:
    token: int = -1
    version: int = -1
    inputs: List[Matrix] = field(default_factory=list)
    normed: List[Matrix] = field(default_factory=list)
    norm_caches: List[Optional[LayerNormCache]] = field(default_factory=list)
    pre: List[Matrix] = field(default_factory=list)
    # post-adapter, pre-normalization outputs of hosted layers
    probes: List[Matrix] = field(default_factory=list)


@dataclass(frozen=True)
class AdapterGrad:
    a: Matrix
    b: Matrix


def model_forward(model: ToyModel, batch: Batch) -> Tuple[ForwardCache, Matrix]:
    if batch.inputs.shape[0] != model.d_in:
        raise DimensionError(
            f"model expects {model.d_in} input rows, got {shape_text(batch.inputs)}"
        )
    cache = ForwardCache(token=model.token, version=model.version)
    h = batch.inputs
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        cache.inputs.append(h)
        if model.normalized_at(i):
            u, ln = layer_norm(h)
        else:
            u, ln = h, None
        cache.normed.append(u)
        cache.norm_caches.append(ln)
        y = augmented_forward(layer, u)
        cache.pre.append(y)
        if layer.adapter is not None:
            cache.probes.append(y)
        if i < last:
            nxt = _activate(model.nonlinearity, y)
            h = nxt + h if model.residual_at(i) else nxt
    return cache, cache.pre[-1]


def model_backward(model: ToyModel, cache: ForwardCache, loss_grad: Matrix) -> Dict[int, AdapterGrad]:
    """Adapter gradients keyed by layer index. Frozen W and bias get none."""
    if cache.token != model.token or cache.version != model.version:
        raise InvalidStateError("forward cache does not belong to the current model state")
    if loss_grad.shape != cache.pre[-1].shape:
        raise DimensionError(
            f"loss gradient {shape_text(loss_grad)} does not match outputs {shape_text(cache.pre[-1])}"
        )
    grads: Dict[int, AdapterGrad] = {}
    last = len(model.layers) - 1
    grad_next: Optional[Matrix] = None
    for i in range(last, -1, -1):
        layer = model.layers[i]
        if i == last:
            grad_y = loss_grad
        else:
            grad_y = _activate_grad(model.nonlinearity, cache.pre[i], grad_next)
        grad_u = matmul(layer.w.T, grad_y)
        if layer.adapter is not None:
            grad_a, grad_b, grad_x = adapter_backward(layer.adapter, cache.normed[i], grad_y)
            grads[i] = AdapterGrad(a=grad_a, b=grad_b)
            grad_u = grad_u + grad_x
        ln = cache.norm_caches[i]
        grad_h = layer_norm_backward(grad_u, ln) if ln is not None else grad_u
        if i < last and model.residual_at(i):
            grad_h = grad_h + grad_next
        grad_next = grad_h
    return grads


def compute_loss(spec: LossSpec, outputs: Matrix, targets=None) -> Tuple[float, Matrix]:
    """Batch-mean loss and its gradient with respect to ``outputs``.

    mse is 1/2 the squared error summed over output rows; the linear probe is
    u^T y per sample, so a single-sample batch has gradient exactly u.
    """
    n = outputs.shape[1]
    if spec.kind is LossKind.MSE:
        targets = np.asarray(targets, dtype=np.float64)
        if targets.shape != outputs.shape:
            raise DimensionError(
                f"targets {shape_text(targets)} do not match outputs {shape_text(outputs)}"
            )
        diff = outputs - targets
        return 0.5 * float(np.sum(diff * diff)) / n, diff / n
    if spec.kind is LossKind.CROSS_ENTROPY:
        labels = np.asarray(targets, dtype=np.int64).reshape(-1)
        k = outputs.shape[0]
        if labels.shape[0] != n:
            raise DimensionError(f"{labels.shape[0]} labels for {n} outputs")
        if np.any(labels < 0) or np.any(labels >= k):
            raise DomainError(f"class index out of range 0..{k - 1}")
        shifted = outputs - outputs.max(axis=0, keepdims=True)
        lse = np.log(np.sum(np.exp(shifted), axis=0))
        cols = np.arange(n)
        value = float(np.mean(lse - shifted[labels, cols]))
        grad = np.exp(shifted - lse)
        grad[labels, cols] -= 1.0
        return value, grad / n
    u = spec.probe
    if u.shape[0] != outputs.shape[0]:
        raise DimensionError(f"probe {shape_text(u)} does not match outputs {shape_text(outputs)}")
    value = float(np.sum(u * outputs)) / n
    return value, np.repeat(u, n, axis=1) / n


@dataclass(frozen=True)
class ActivationMoments:
    per_point: Tuple[float, ...]
    mean: float


def activation_moments(cache: ForwardCache, m: int) -> ActivationMoments:
    """Mean of y**m over the entries of each probe point, and across points."""
    if m < 1 or int(m) != m:
        raise DomainError(f"moment order must be a positive integer, got {m}")
    per_point = tuple(float(np.mean(y**m)) for y in cache.probes)
    mean = float(np.mean(per_point)) if per_point else 0.0
    return ActivationMoments(per_point=per_point, mean=mean)


@dataclass(frozen=True)
class Task:
    """A training problem: base architecture, loss and a batch sampler."""

    name: str
    dims: Tuple[int, ...]
    loss: LossSpec
    sampler: Callable[[np.random.Generator, int], Batch]
    nonlinearity: Nonlinearity = Nonlinearity.RELU
    layernorm: bool = False
    residual: bool = True
    reports_perplexity: bool = False

    def build_base(self, rng: RngStream, placement: Placement = "all") -> ToyModel:
        return build_mlp(self.dims, rng, self.nonlinearity, self.layernorm, self.residual, placement)

    def sample_batch(self, gen: np.random.Generator, batch_size: int) -> Batch:
        return self.sampler(gen, batch_size)


def build_teacher_student_task(
    rng: RngStream,
    d_in: int = 16,
    d_out: int = 16,
    d_model: int = 64,
    depth: int = 2,
    nonlinearity: Nonlinearity = Nonlinearity.TANH,
    layernorm: bool = False,
) -> Task:
    """Regression onto a fixed random linear teacher with iid N(0, 1) inputs."""
    teacher = gaussian_fill(d_out, d_in, 0.0, 1.0 / d_in, rng.derive("teacher"))

    def sampler(gen: np.random.Generator, batch_size: int) -> Batch:
        x = gen.standard_normal((d_in, batch_size))
        return Batch(inputs=x, targets=matmul(teacher, x))

    dims = (d_in,) + (d_model,) * (depth + 1) + (d_out,)
    return Task(
        name="teacher-student",
        dims=dims,
        loss=LossSpec(LossKind.MSE),
        sampler=sampler,
        nonlinearity=Nonlinearity(nonlinearity),
        layernorm=layernorm,
    )


def load_corpus(path: Optional[Path] = None) -> str:
    path = Path(path) if path is not None else CORPUS_PATH
    if not path.is_file():
        raise FileNotFoundError(f"Corpus file not found: {path}")
    text = path.read_text(encoding="utf-8")
    if len(set(text)) < 2:
        raise DomainError(f"corpus {path} needs at least two distinct characters")
    return text


def build_char_lm_task(
    text: str,
    context: int = 3,
    d_model: int = 64,
    depth: int = 2,
    nonlinearity: Nonlinearity = Nonlinearity.RELU,
    layernorm: bool = True,
) -> Task:
    """Next-character prediction from one-hot encoded contexts."""
    vocab = sorted(set(text))
    index = {ch: k for k, ch in enumerate(vocab)}
    ids = np.array([index[ch] for ch in text], dtype=np.int64)
    v = len(vocab)
    if ids.shape[0] <= context:
        raise DomainError(f"corpus of {ids.shape[0]} characters is too short for context {context}")

    def sampler(gen: np.random.Generator, batch_size: int) -> Batch:
        starts = gen.integers(0, ids.shape[0] - context, size=batch_size)
        inputs = np.zeros((context * v, batch_size), dtype=np.float64)
        cols = np.arange(batch_size)
        for j in range(context):
            inputs[j * v + ids[starts + j], cols] = 1.0
        return Batch(inputs=inputs, targets=ids[starts + context])

    dims = (context * v,) + (d_model,) * (depth + 1) + (v,)
    return Task(
        name="char-lm",
        dims=dims,
        loss=LossSpec(LossKind.CROSS_ENTROPY),
        sampler=sampler,
        nonlinearity=Nonlinearity(nonlinearity),
        layernorm=layernorm,
        reports_perplexity=True,
    )


def perplexity(loss: float) -> float:
    with np.errstate(over="ignore"):
        return float(np.exp(loss))
