"""Diagonal Gaussian, Bernoulli-logit and logit-Normal distributions.

All functions work on a single vector or on a batch (leading dimensions);
reductions run over the last axis only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import DimensionError, DomainError, NonFiniteError

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
_LOG_2PI = math.log(2.0 * math.pi)


def clamp_logvar(logvar: torch.Tensor, lo: float = LOGVAR_MIN, hi: float = LOGVAR_MAX) -> torch.Tensor:
    return torch.clamp(logvar, min=lo, max=hi)


@dataclass(frozen=True)
class DiagGaussian:
    mean: torch.Tensor
    log_variance: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_variance.shape:
            raise DimensionError(
                f"mean {tuple(self.mean.shape)} and log-variance {tuple(self.log_variance.shape)} differ"
            )
        if not (torch.isfinite(self.mean).all() and torch.isfinite(self.log_variance).all()):
            raise NonFiniteError("Gaussian parameters must be finite")

    @classmethod
    def from_head(cls, out: torch.Tensor, lo: float = LOGVAR_MIN, hi: float = LOGVAR_MAX) -> "DiagGaussian":
        """Split a network output ``[mean | logvar]`` and clamp the log-variance."""
        d = out.shape[-1] // 2
        return cls(out[..., :d], clamp_logvar(out[..., d:], lo, hi))

    @property
    def variance(self) -> torch.Tensor:
        return torch.exp(self.log_variance)

    @property
    def std(self) -> torch.Tensor:
        return torch.exp(0.5 * self.log_variance)

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(self.mean.detach(), self.log_variance.detach())

    def __getitem__(self, idx) -> "DiagGaussian":
        return DiagGaussian(self.mean[idx], self.log_variance[idx])


@dataclass(frozen=True)
class BernoulliLogit:
    logit: torch.Tensor

    @property
    def probability(self) -> torch.Tensor:
        return torch.sigmoid(self.logit)


@dataclass(frozen=True)
class SupportInterval:
    lower: float
    upper: float

    def __post_init__(self):
        if not (float(self.lower) < float(self.upper)):
            raise DomainError(f"support interval needs lower < upper, got [{self.lower}, {self.upper}]")

    @property
    def span(self) -> float:
        return float(self.upper) - float(self.lower)

    def contains(self, a, tol: float = 1e-9) -> bool:
        a = torch.as_tensor(a)
        return bool(((a >= self.lower - tol) & (a <= self.upper + tol)).all())


def gaussian_sample(d: DiagGaussian, noise: torch.Tensor) -> torch.Tensor:
    if noise.shape != d.mean.shape:
        raise DimensionError(f"noise {tuple(noise.shape)} does not match mean {tuple(d.mean.shape)}")
    return d.mean + torch.exp(0.5 * d.log_variance) * noise


def gaussian_log_prob(d: DiagGaussian, x: torch.Tensor) -> torch.Tensor:
    if x.shape != d.mean.shape:
        raise DimensionError(f"value {tuple(x.shape)} does not match mean {tuple(d.mean.shape)}")
    sq = (x - d.mean) ** 2 * torch.exp(-d.log_variance)
    return -0.5 * (_LOG_2PI + d.log_variance + sq).sum(-1)


def gaussian_kl_to_standard(d: DiagGaussian) -> torch.Tensor:
    """KL(d || N(0, I)), summed over the last axis."""
    return 0.5 * (d.mean**2 + torch.exp(d.log_variance) - 1.0 - d.log_variance).sum(-1)


def bernoulli_log_prob(b: BernoulliLogit, y) -> torch.Tensor:
    """Elementwise log-likelihood of outcomes in {0, 1}."""
    y = torch.as_tensor(y, dtype=b.logit.dtype)
    if y.shape != b.logit.shape:
        y = y.expand_as(b.logit)
    if not torch.all((y == 0) | (y == 1)):
        raise DomainError("Bernoulli outcomes must be 0 or 1")
    return y * F.logsigmoid(b.logit) + (1.0 - y) * F.logsigmoid(-b.logit)


def bernoulli_sample(b: BernoulliLogit, noise: torch.Tensor) -> torch.Tensor:
    """Inverse-CDF draw driven by standard-normal noise (shared-noise friendly)."""
    return (torch.special.ndtr(noise) < b.probability).to(b.logit.dtype)


def logit_normal_sample(d: DiagGaussian, support: SupportInterval, noise: torch.Tensor) -> torch.Tensor:
    """``lower + span * sigmoid(mean + std * noise)``; differentiable in ``d``."""
    if not isinstance(support, SupportInterval):
        raise DomainError("logit-Normal sampling needs a SupportInterval")
    z = gaussian_sample(d, noise)
    a = support.lower + support.span * torch.sigmoid(z)
    return torch.clamp(a, min=support.lower, max=support.upper)
