"""Differentiable substrate: MLPs, gradients, ADAM and seeded randomness.

Everything runs in float64 on CPU. Autodiff is delegated to torch; the
optimizer, initialization and random streams are defined here so that every
training run is bit-reproducible from its seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch.overrides import TorchFunctionMode

from .errors import DimensionError, NonFiniteError

DTYPE = torch.float64
torch.set_default_dtype(DTYPE)

ParamSet = list  # flat [W0, b0, W1, b1, ...]; W has shape (out, in)

_ACTIVATIONS = ("relu",)
_OUTPUTS = ("linear", "sigmoid")


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    hidden_activation: str = "relu"
    output_activation: str = "linear"

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 2:
            raise DimensionError("an MLP needs at least an input and an output width")
        if any(w < 1 for w in self.layer_widths):
            raise DimensionError(f"layer widths must be >= 1, got {self.layer_widths}")
        if self.hidden_activation not in _ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in _OUTPUTS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def in_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def out_dim(self) -> int:
        return self.layer_widths[-1]

    def to_dict(self) -> dict:
        return {
            "layer_widths": list(self.layer_widths),
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(tuple(d["layer_widths"]), d["hidden_activation"], d["output_activation"])


class Rng:
    """Counter-based (Philox) random stream producing float64 tensors."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path: tuple[int, ...] = ()
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def spawn(self, *keys: int) -> "Rng":
        """Independent child stream; depends only on the seed and the full key path."""
        if not keys:
            raise ValueError("spawn needs at least one key")
        child = Rng.__new__(Rng)
        child.seed = self.seed
        child.path = self.path + tuple(int(k) for k in keys)
        child._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([self.seed, *child.path])))
        return child

    def normal(self, *shape: int) -> torch.Tensor:
        return torch.from_numpy(self._gen.standard_normal(shape))

    def uniform(self, *shape: int, low: float = 0.0, high: float = 1.0) -> torch.Tensor:
        return torch.from_numpy(self._gen.uniform(low, high, size=shape))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    @property
    def numpy(self) -> np.random.Generator:
        return self._gen


def init_params(spec: MlpSpec, rng: Rng) -> ParamSet:
    """Glorot-uniform weights, zero biases."""
    params = []
    for fan_in, fan_out in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        params.append(rng.uniform(fan_out, fan_in, low=-bound, high=bound))
        params.append(torch.zeros(fan_out, dtype=DTYPE))
    return params


def check_params(spec: MlpSpec, params: Sequence[torch.Tensor]) -> None:
    if len(params) != 2 * spec.n_layers:
        raise DimensionError(f"expected {2 * spec.n_layers} parameter arrays, got {len(params)}")
    for layer, (fan_in, fan_out) in enumerate(zip(spec.layer_widths[:-1], spec.layer_widths[1:])):
        w, b = params[2 * layer], params[2 * layer + 1]
        if tuple(w.shape) != (fan_out, fan_in) or tuple(b.shape) != (fan_out,):
            raise DimensionError(
                f"layer {layer}: expected weight {(fan_out, fan_in)} and bias {(fan_out,)}, "
                f"got {tuple(w.shape)} and {tuple(b.shape)}"
            )


def mlp_forward(spec: MlpSpec, params: Sequence[torch.Tensor], x: torch.Tensor) -> torch.Tensor:
    """Apply the network to a vector or a batch of row vectors."""
    if x.shape[-1] != spec.in_dim:
        raise DimensionError(f"layer 0: expected input width {spec.in_dim}, got {x.shape[-1]}")
    h = x
    last = spec.n_layers - 1
    for layer in range(spec.n_layers):
        w, b = params[2 * layer], params[2 * layer + 1]
        if w.shape[1] != h.shape[-1]:
            raise DimensionError(f"layer {layer}: weight expects width {w.shape[1]}, got {h.shape[-1]}")
        h = F.linear(h, w, b)
        if layer < last:
            h = torch.relu(h)
    if spec.output_activation == "sigmoid":
        h = torch.sigmoid(h)
    return h


class Mlp(torch.nn.Module):
    """Parameter container around :func:`mlp_forward`."""

    def __init__(self, spec: MlpSpec, rng: Rng | None = None, params: Sequence[torch.Tensor] | None = None):
        super().__init__()
        self.spec = spec
        if params is None:
            if rng is None:
                raise ValueError("need an rng to initialize parameters")
            params = init_params(spec, rng)
        check_params(spec, params)
        self.params = torch.nn.ParameterList(
            [torch.nn.Parameter(p.detach().clone().to(DTYPE)) for p in params]
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return mlp_forward(self.spec, list(self.params), x)

    def param_list(self) -> list[torch.Tensor]:
        return list(self.params)

    def flat_arrays(self) -> list[list[float]]:
        return [p.detach().reshape(-1).tolist() for p in self.params]

    @classmethod
    def from_flat(cls, spec: MlpSpec, arrays: Sequence[Sequence[float]]) -> "Mlp":
        shapes = []
        for fan_in, fan_out in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
            shapes += [(fan_out, fan_in), (fan_out,)]
        if len(arrays) != len(shapes):
            raise DimensionError(f"expected {len(shapes)} arrays, got {len(arrays)}")
        params = [torch.tensor(a, dtype=DTYPE).reshape(s) for a, s in zip(arrays, shapes)]
        return cls(spec, params=params)


# --- failure diagnostics -----------------------------------------------------


class _NonFiniteLocator(TorchFunctionMode):
    def __init__(self):
        super().__init__()
        self.first: str | None = None

    def __torch_function__(self, func, types, args=(), kwargs=None):
        out = func(*args, **(kwargs or {}))
        if self.first is None:
            outs = out if isinstance(out, (tuple, list)) else (out,)
            for o in outs:
                if isinstance(o, torch.Tensor) and o.is_floating_point() and not torch.isfinite(o).all():
                    self.first = getattr(func, "__name__", repr(func))
                    break
        return out


def locate_nonfinite(fn: Callable[[], torch.Tensor]) -> str | None:
    """Re-run ``fn`` and name the first torch op whose output is not finite."""
    with torch.no_grad(), _NonFiniteLocator() as mode:
        try:
            fn()
        except Exception:  # noqa: BLE001 - diagnostics only
            pass
    return mode.first


def gradient(loss: Callable[[], torch.Tensor], params: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Gradient of a scalar loss closure with respect to ``params``.

    Parameters the loss does not depend on get an exact zero gradient.
    """
    value = loss()
    if not torch.isfinite(value):
        raise NonFiniteError(f"loss evaluated to {value.item()}", locate_nonfinite(loss))
    grads = torch.autograd.grad(value, list(params), allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


# --- ADAM ---------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[torch.Tensor]
    v: list[torch.Tensor]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("ADAM betas must lie in (0, 1)")
        if self.eps <= 0 or self.lr <= 0:
            raise ValueError("ADAM lr and eps must be positive")
        if len(self.m) != len(self.v) or any(a.shape != b.shape for a, b in zip(self.m, self.v)):
            raise DimensionError("ADAM moment shapes disagree")

    @classmethod
    def fresh(cls, params: Sequence[torch.Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(
            m=[torch.zeros_like(p, dtype=DTYPE) for p in params],
            v=[torch.zeros_like(p, dtype=DTYPE) for p in params],
            lr=lr, beta1=beta1, beta2=beta2, eps=eps,
        )


def _check_grads(state: AdamState, params, grads) -> None:
    if not (len(params) == len(grads) == len(state.m)):
        raise DimensionError("ADAM: params, grads and moments differ in length")
    for i, (p, g, m) in enumerate(zip(params, grads, state.m)):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"ADAM: shape mismatch at parameter {i}")
    bad = [i for i, g in enumerate(grads) if not torch.isfinite(g).all()]
    if bad:
        raise NonFiniteError(f"ADAM: non-finite gradient in parameter(s) {bad}; update rejected")


def adam_step(state: AdamState, params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor]):
    """Pure ADAM update. Returns ``(new_state, new_params)``."""
    _check_grads(state, params, grads)
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    new_m, new_v, new_p = [], [], []
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            new_p.append(p - state.lr * (m / c1) / (torch.sqrt(v / c2) + state.eps))
            new_m.append(m)
            new_v.append(v)
    new_state = AdamState(new_m, new_v, t, state.lr, b1, b2, state.eps)
    return new_state, new_p


class Adam:
    """In-place ADAM over a fixed list of leaf tensors (same update as :func:`adam_step`)."""

    def __init__(self, params: Sequence[torch.Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState.fresh(self.params, lr, beta1, beta2, eps)

    def step(self, grads: Sequence[torch.Tensor]) -> None:
        s = self.state
        _check_grads(s, self.params, grads)
        s.step += 1
        c1, c2 = 1.0 - s.beta1**s.step, 1.0 - s.beta2**s.step
        with torch.no_grad():
            for p, g, m, v in zip(self.params, grads, s.m, s.v):
                m.mul_(s.beta1).add_(g, alpha=1.0 - s.beta1)
                v.mul_(s.beta2).addcmul_(g, g, value=1.0 - s.beta2)
                denom = (v / c2).sqrt_().add_(s.eps)
                p.addcdiv_(m, denom, value=-s.lr / c1)

    def minimize(self, loss: Callable[[], torch.Tensor]) -> torch.Tensor:
        """One descent step on ``loss``; returns the (pre-step) loss value."""
        value = loss()
        if not torch.isfinite(value):
            raise NonFiniteError(f"loss evaluated to {value.item()}", locate_nonfinite(loss))
        grads = torch.autograd.grad(value, self.params, allow_unused=True)
        self.step([torch.zeros_like(p) if g is None else g for p, g in zip(self.params, grads)])
        return value.detach()


# --- finite-difference checking ------------------------------------------------


class _KinkRecorder(TorchFunctionMode):
    """Records which side of every relu / clamp kink each element falls on."""

    def __init__(self):
        super().__init__()
        self.masks: list[torch.Tensor] = []

    def __torch_function__(self, func, types, args=(), kwargs=None):
        kwargs = kwargs or {}
        if func in (torch.relu, F.relu, torch.Tensor.relu):
            self.masks.append(args[0].detach() > 0)
        elif func in (torch.clamp, torch.Tensor.clamp, torch.clip):
            x = args[0].detach()
            lo = kwargs.get("min", args[1] if len(args) > 1 else None)
            hi = kwargs.get("max", args[2] if len(args) > 2 else None)
            code = torch.zeros_like(x, dtype=torch.int8)
            if lo is not None:
                code = code - (x < lo).to(torch.int8)
            if hi is not None:
                code = code + (x > hi).to(torch.int8)
            self.masks.append(code)
        return func(*args, **kwargs)


def _eval_with_kinks(loss, use_recorder: bool):
    with torch.no_grad():
        if not use_recorder:
            return float(loss()), None
        with _KinkRecorder() as rec:
            value = float(loss())
        return value, rec.masks


def _same_masks(a, b) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and torch.equal(x, y) for x, y in zip(a, b))


def grad_check(
    loss: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    probe_count: int,
    rng: Rng | None = None,
    step: float = 1e-5,
    avoid_kinks: bool = True,
    max_attempts: int = 50,
) -> float:
    """Max relative error between autograd and central differences.

    ``loss`` must be a deterministic closure over ``params``. With
    ``avoid_kinks`` a probe is redrawn whenever a relu or clamp changes branch
    between the two finite-difference points.
    """
    if probe_count < 1:
        raise ValueError("probe_count must be >= 1")
    rng = rng or Rng(0)
    params = list(params)
    analytic = gradient(loss, params)
    sizes = np.array([p.numel() for p in params], dtype=float)
    worst = 0.0
    for _ in range(probe_count):
        for _attempt in range(max_attempts):
            k = int(rng.numpy.choice(len(params), p=sizes / sizes.sum()))
            j = int(rng.integers(0, params[k].numel()))
            flat = params[k].data.view(-1)
            orig = flat[j].item()
            flat[j] = orig + step
            f_plus, m_plus = _eval_with_kinks(loss, avoid_kinks)
            flat[j] = orig - step
            f_minus, m_minus = _eval_with_kinks(loss, avoid_kinks)
            flat[j] = orig
            if not avoid_kinks or _same_masks(m_plus, m_minus):
                break
        fd = (f_plus - f_minus) / (2 * step)
        an = analytic[k].reshape(-1)[j].item()
        worst = max(worst, abs(an - fd) / max(1e-8, abs(fd)))
    return worst
