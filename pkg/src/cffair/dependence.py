"""Dependence measures: RBF-kernel MMD and a neural HGR maximal-correlation estimator."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Union

import numpy as np
import torch

from .errors import DataError, DimensionError
from .numerics import DTYPE, Adam, Mlp, MlpSpec, Rng

MEDIAN = "median_heuristic"


@dataclass(frozen=True)
class MmdConfig:
    bandwidth: Union[float, str] = MEDIAN

    def __post_init__(self):
        if self.bandwidth != MEDIAN and not float(self.bandwidth) > 0:
            raise ValueError(f"MMD bandwidth must be positive or {MEDIAN!r}, got {self.bandwidth!r}")

    def to_dict(self):
        return {"bandwidth": self.bandwidth}


def _as_rows(x) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=DTYPE)
    if x.ndim == 1:
        x = x[:, None]
    return x


def _sqdist(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    xx = (x * x).sum(-1)[:, None]
    yy = (y * y).sum(-1)[None, :]
    return (xx + yy - 2.0 * x @ y.T).clamp_min(0.0)


def median_bandwidth(sample_p: torch.Tensor, sample_q: torch.Tensor) -> float:
    """Median pairwise distance over the pooled sample (no gradient)."""
    with torch.no_grad():
        z = torch.cat([_as_rows(sample_p), _as_rows(sample_q)], 0)
        iu = torch.triu_indices(len(z), len(z), offset=1)
        d = _sqdist(z, z)[iu[0], iu[1]].sqrt()
        med = float(d.median()) if d.numel() else 0.0
    return med if med > 0 else 1.0


def _order_key(x: torch.Tensor):
    return len(x), x.detach().contiguous().numpy().tobytes()


def mmd_rbf(sample_p, sample_q, cfg: MmdConfig = MmdConfig()) -> torch.Tensor:
    """Biased (V-statistic) squared MMD with a Gaussian RBF kernel."""
    p, q = _as_rows(sample_p), _as_rows(sample_q)
    if len(p) == 0 or len(q) == 0:
        raise DataError("MMD needs two non-empty samples")
    if p.shape[1] != q.shape[1]:
        raise DimensionError(f"MMD samples differ in dimension: {p.shape[1]} vs {q.shape[1]}")
    if _order_key(q) < _order_key(p):  # canonical order makes the result bit-symmetric
        p, q = q, p
    bw = median_bandwidth(p, q) if cfg.bandwidth == MEDIAN else float(cfg.bandwidth)
    scale = -1.0 / (2.0 * bw * bw)
    k_pp = torch.exp(scale * _sqdist(p, p)).mean()
    k_qq = torch.exp(scale * _sqdist(q, q)).mean()
    k_pq = torch.exp(scale * _sqdist(p, q)).mean()
    return k_pp + k_qq - 2.0 * k_pq


# --- HGR -----------------------------------------------------------------------


@dataclass(frozen=True)
class HgrConfig:
    hidden: tuple[int, ...] = (32, 32)
    max_steps: int = 600
    batch_size: int = 256
    lr: float = 2e-3
    train_fraction: float = 0.5
    select_fraction: float = 0.2  # early-stopping pairs; the rest is only used for the reported value
    eval_every: int = 20

    def __post_init__(self):
        if not (0 < self.train_fraction and 0 < self.select_fraction
                and self.train_fraction + self.select_fraction < 1):
            raise ValueError("train and selection fractions must be positive and leave pairs to report on")

    def f_spec(self, dim_u: int) -> MlpSpec:
        return MlpSpec((dim_u, *self.hidden, 1))

    def g_spec(self, dim_a: int) -> MlpSpec:
        return MlpSpec((dim_a, *self.hidden, 1))

    def to_dict(self):
        return {
            "hidden": list(self.hidden),
            "max_steps": self.max_steps,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "train_fraction": self.train_fraction,
            "select_fraction": self.select_fraction,
            "eval_every": self.eval_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HgrConfig":
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


class HgrResult(NamedTuple):
    value: float
    degenerate: bool = False


def _standardize(x: torch.Tensor) -> torch.Tensor | None:
    std = x.std(0)
    keep = std > 1e-12
    if not keep.any():
        return None
    x = x[:, keep]
    return (x - x.mean(0)) / std[keep]


def _batch_corr(f: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    f = (f - f.mean()) / (f.std(unbiased=False) + 1e-8)
    g = (g - g.mean()) / (g.std(unbiased=False) + 1e-8)
    return (f * g).mean()


def hgr_estimate(u_samples, a_samples, cfg: HgrConfig = HgrConfig(), rng: Rng | None = None) -> HgrResult:
    """Neural estimate of HGR(U, A) in [0, 1].

    ``f`` and ``g`` are trained to maximise the batch Pearson correlation of
    their standardized outputs on a random ``train_fraction`` of the pairs,
    with early stopping on a further ``select_fraction``. The returned value
    is the correlation magnitude on the remaining pairs, which neither the
    optimizer nor the stopping rule has seen.
    """
    u, a = _as_rows(u_samples), _as_rows(a_samples)
    n = len(u)
    if len(a) != n:
        raise DimensionError(f"HGR needs paired samples, got {n} and {len(a)}")
    if n < 32:
        raise DataError(f"HGR needs at least 32 pairs, got {n}")
    u, a = _standardize(u), _standardize(a)
    if u is None or a is None:
        return HgrResult(0.0, True)

    rng = rng or Rng(0)
    f = Mlp(cfg.f_spec(u.shape[1]), rng)
    g = Mlp(cfg.g_spec(a.shape[1]), rng)
    params = f.param_list() + g.param_list()
    opt = Adam(params, lr=cfg.lr)
    perm = rng.permutation(n)
    n_train = max(2, int(round(cfg.train_fraction * n)))
    n_sel = max(2, int(round(cfg.select_fraction * n)))
    train = perm[:n_train]
    held = torch.from_numpy(perm[n_train:n_train + n_sel])
    report = torch.from_numpy(perm[n_train + n_sel:])
    bs = min(cfg.batch_size, len(train))

    def held_corr() -> float:
        with torch.no_grad():
            return float(_batch_corr(f(u[held]), g(a[held])).abs())

    # early stopping on the held-out pairs keeps the nets from fitting noise
    best, best_params = held_corr(), [p.detach().clone() for p in params]
    order, pos = train[rng.permutation(len(train))], 0
    for step in range(1, cfg.max_steps + 1):
        if pos + bs > len(order):
            order, pos = train[rng.permutation(len(train))], 0
        idx = torch.from_numpy(order[pos:pos + bs])
        pos += bs
        ub, ab = u[idx], a[idx]
        opt.minimize(lambda: -_batch_corr(f(ub), g(ab)))
        if step % cfg.eval_every == 0:
            score = held_corr()
            if score > best:
                best, best_params = score, [p.detach().clone() for p in params]
    with torch.no_grad():
        for p, b in zip(params, best_params):
            p.copy_(b)
        rho = float(_batch_corr(f(u[report]), g(a[report])).abs())
    if not np.isfinite(rho):
        return HgrResult(0.0, True)
    return HgrResult(min(1.0, max(0.0, rho)))
