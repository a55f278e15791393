"""Step 2: a predictor h(x, a) trained with counterfactual-fairness penalties.

Counterfactual inputs come from a frozen causal model: one posterior draw of
u per individual, a factual regeneration x~ at the observed a, and x' at a
counterfactual a'. Three mitigations are available: none, the uniform/
enumerated counterfactual loss, and the dynamic version where an adversarial
logit-Normal sampler picks a' to maximise the penalty.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import NamedTuple, Optional, Sequence

import torch

from .causal_vae import CausalModel, CounterfactualNoise, _TRAIN, _batches
from .data import BINARY, CONTINUOUS, Dataset
from .distributions import DiagGaussian, SupportInterval, gaussian_sample, logit_normal_sample
from .errors import ConfigError, DimensionError, NonFiniteError, UnsupportedVariantError
from .numerics import DTYPE, Adam, Mlp, MlpSpec, Rng

log = logging.getLogger(__name__)

PROB_EPS = 1e-6
SAMPLER_LOGVAR_MIN = -6.0
PROBABILITY, REAL = "probability", "continuous"

_PRED_INIT, _SAMPLER_INIT = 11, 12


class Mitigation(str, Enum):
    NONE = "None"
    CF = "CF"
    DYNCF = "DynCF"


@dataclass
class Step2Config:
    lam: float = 0.0
    s: int = 1
    mitigation: Mitigation = Mitigation.NONE
    epochs: int = 30
    batch_size: int = 256
    lr: float = 1e-3
    sampler_lr: float = 1e-3
    sampler_steps: int = 1
    shared_noise: bool = False  # draw x~ and x' with the same decoder noise
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    hidden: tuple[int, ...] = (64, 32, 16)
    sampler_hidden: tuple[int, ...] = (32, 16)
    seed: int = 0

    def __post_init__(self):
        self.mitigation = Mitigation(self.mitigation)
        self.hidden, self.sampler_hidden = tuple(self.hidden), tuple(self.sampler_hidden)
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.s < 1:
            raise ValueError("S must be >= 1")
        if self.sampler_steps < 1:
            raise ValueError("sampler_steps must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mitigation"] = self.mitigation.value
        d["hidden"], d["sampler_hidden"] = list(self.hidden), list(self.sampler_hidden)
        return d


# -- predictor ------------------------------------------------------------------


class Predictor:
    def __init__(self, net: Mlp, output_kind: str):
        if output_kind not in (PROBABILITY, REAL):
            raise ValueError(f"unknown output kind {output_kind!r}")
        if net.spec.out_dim != 1:
            raise DimensionError("predictor network must have a scalar output")
        self.net = net
        self.output_kind = output_kind

    @classmethod
    def build(cls, p: int, output_kind: str, hidden: Sequence[int], rng: Rng) -> "Predictor":
        return cls(Mlp(MlpSpec((p + 1, *hidden, 1)), rng), output_kind)

    @property
    def p(self) -> int:
        return self.net.spec.in_dim - 1

    def params(self) -> list[torch.Tensor]:
        return self.net.param_list()

    def to_dict(self) -> dict:
        return {"output_kind": self.output_kind, "spec": self.net.spec.to_dict(), "params": self.net.flat_arrays()}

    @classmethod
    def from_dict(cls, d: dict) -> "Predictor":
        return cls(Mlp.from_flat(MlpSpec.from_dict(d["spec"]), d["params"]), d["output_kind"])


def predict(p: Predictor, x: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    """h(x, a) per row: a probability in [eps, 1 - eps] or a real value."""
    if x.ndim != 2 or x.shape[1] != p.p:
        raise DimensionError(f"X must have shape (n, {p.p}), got {tuple(x.shape)}")
    out = p.net(torch.cat([x, a.reshape(-1, 1).to(x.dtype)], -1))[:, 0]
    if p.output_kind == PROBABILITY:
        return torch.clamp(torch.sigmoid(out), PROB_EPS, 1.0 - PROB_EPS)
    return out


def delta_logit(p1, p2) -> torch.Tensor:
    p1 = torch.clamp(torch.as_tensor(p1, dtype=DTYPE), PROB_EPS, 1.0 - PROB_EPS)
    p2 = torch.clamp(torch.as_tensor(p2, dtype=DTYPE), PROB_EPS, 1.0 - PROB_EPS)
    return (torch.logit(p1) - torch.logit(p2)) ** 2


def delta_sq(y1, y2) -> torch.Tensor:
    return (torch.as_tensor(y1, dtype=DTYPE) - torch.as_tensor(y2, dtype=DTYPE)) ** 2


def delta_for(p: Predictor):
    return delta_logit if p.output_kind == PROBABILITY else delta_sq


def prediction_loss(p: Predictor, x, a, y) -> torch.Tensor:
    h = predict(p, x, a)
    if p.output_kind == PROBABILITY:
        return -(y * torch.log(h) + (1.0 - y) * torch.log1p(-h)).mean()
    return ((h - y) ** 2).mean()


# -- dynamic sampler ---------------------------------------------------------------


class DynSampler:
    """Adversarial P(a' | u): a 1-D logit-Normal mapped linearly onto Omega_A."""

    def __init__(self, net: Mlp, support: SupportInterval):
        if net.spec.out_dim != 2:
            raise DimensionError("sampler network must output (mean, log-variance)")
        self.net = net
        self.support = support

    @classmethod
    def build(cls, latent_dim: int, support: SupportInterval, hidden: Sequence[int], rng: Rng) -> "DynSampler":
        return cls(Mlp(MlpSpec((latent_dim, *hidden, 2)), rng), support)

    def params(self) -> list[torch.Tensor]:
        return self.net.param_list()

    def dist(self, u: torch.Tensor) -> DiagGaussian:
        if u.ndim != 2 or u.shape[1] != self.net.spec.in_dim:
            raise DimensionError(f"u must have shape (n, {self.net.spec.in_dim}), got {tuple(u.shape)}")
        return DiagGaussian.from_head(self.net(u), lo=SAMPLER_LOGVAR_MIN)

    def to_dict(self) -> dict:
        return {"support": [self.support.lower, self.support.upper], "spec": self.net.spec.to_dict(),
                "params": self.net.flat_arrays()}

    @classmethod
    def from_dict(cls, d: dict) -> "DynSampler":
        return cls(Mlp.from_flat(MlpSpec.from_dict(d["spec"]), d["params"]), SupportInterval(*d["support"]))


def dyn_sampler_draw(s: DynSampler, u: torch.Tensor, rng: Rng | None = None,
                     noise: torch.Tensor | None = None) -> torch.Tensor:
    """One a' per row of ``u``; differentiable in the sampler parameters."""
    d = s.dist(u)
    if noise is None:
        noise = rng.normal(*d.mean.shape)
    return logit_normal_sample(d, s.support, noise.reshape(d.mean.shape))[:, 0]


# -- counterfactual losses ---------------------------------------------------------------


class CfNoise(NamedTuple):
    """All randomness of one counterfactual-loss evaluation."""

    model: CounterfactualNoise
    a_prime: Optional[torch.Tensor] = None  # uniform draws in [0, 1) or sampler noise


def _noise(cm: CausalModel, n: int, rng: Rng | None, noise: CfNoise | None, s: int,
           shared: bool = False) -> CfNoise:
    if noise is not None:
        return noise
    if rng is None:
        raise ConfigError("either rng or an explicit noise bundle is required")
    return CfNoise(CounterfactualNoise.draw(n * s, cm.latent_dim, cm.schema.p, rng, shared=shared),
                   rng.normal(n * s))


def _factual(cm: CausalModel, x, y, a, noise: CounterfactualNoise):
    with torch.no_grad():
        u = gaussian_sample(cm.encode(x, y, a), noise.u)
        x_tilde = cm.decode_x(u, a).sample(noise.x_factual)
    return u, x_tilde


def _rep(batch, s: int):
    x, y, a = batch
    if s == 1:
        return x, y, a
    return x.repeat(s, 1), y.repeat(s), a.repeat(s)


def atoms_for(cm: CausalModel, atoms=None) -> torch.Tensor:
    if atoms is not None:
        return torch.as_tensor(atoms, dtype=DTYPE)
    if cm.schema.a_kind != BINARY:
        raise UnsupportedVariantError("enumerated counterfactual loss needs discrete A (use loss_cf_continuous)")
    return torch.tensor([0.0, 1.0], dtype=DTYPE)


def loss_cf_discrete(p: Predictor, cm: CausalModel, batch, cfg: Step2Config, rng: Rng | None = None, *,
                     noise: CfNoise | None = None, atoms=None) -> torch.Tensor:
    """Mean over rows, atoms of Omega_A and S draws of Delta(h(x~, a), h(x'_{a_k}, a_k))."""
    atoms = atoms_for(cm, atoms)
    x, y, a = _rep(batch, cfg.s)
    noise = _noise(cm, len(batch[0]), rng, noise, cfg.s, cfg.shared_noise)
    u, x_tilde = _factual(cm, x, y, a, noise.model)
    delta = delta_for(p)
    h_fact = predict(p, x_tilde, a)
    terms = []
    for a_k in atoms:
        a_k = a_k.expand(len(x))
        with torch.no_grad():
            x_cf = cm.decode_x(u, a_k).sample(noise.model.x_counterfactual)
        terms.append(delta(h_fact, predict(p, x_cf, a_k)))
    return torch.stack(terms).mean()


def loss_cf_continuous(p: Predictor, cm: CausalModel, batch, cfg: Step2Config, rng: Rng | None = None, *,
                       noise: CfNoise | None = None, a_prime: torch.Tensor | None = None,
                       atoms=None) -> torch.Tensor:
    """Mean over rows (and S) of Delta(h(x~, a), h(x', a')) with a' ~ Uniform(Omega_A).

    With ``atoms`` a' is uniform over that finite set instead; ``a_prime``
    forces the counterfactual values.
    """
    if cm.a_support is None:
        raise ConfigError("Omega_A bounds are required")
    x, y, a = _rep(batch, cfg.s)
    noise = _noise(cm, len(batch[0]), rng, noise, cfg.s, cfg.shared_noise)
    if a_prime is None:
        v = torch.special.ndtr(noise.a_prime)  # uniform(0, 1) from the shared normal draw
        if atoms is not None:
            atoms = torch.as_tensor(atoms, dtype=DTYPE)
            a_prime = atoms[torch.clamp((v * len(atoms)).long(), max=len(atoms) - 1)]
        else:
            sup = cm.a_support
            a_prime = sup.lower + sup.span * v
    u, x_tilde = _factual(cm, x, y, a, noise.model)
    with torch.no_grad():
        x_cf = cm.decode_x(u, a_prime).sample(noise.model.x_counterfactual)
    return delta_for(p)(predict(p, x_tilde, a), predict(p, x_cf, a_prime)).mean()


def dyncf_parts(p: Predictor, s: DynSampler, cm: CausalModel, batch, cfg: Step2Config, rng: Rng | None = None, *,
                noise: CfNoise | None = None, detach_a: bool = False):
    """Per-row counterfactual errors under a' ~ P_phi(a | u), plus the drawn a'."""
    if cm.schema.a_kind != CONTINUOUS:
        raise UnsupportedVariantError("the dynamic counterfactual loss needs continuous A")
    x, y, a = _rep(batch, cfg.s)
    noise = _noise(cm, len(batch[0]), rng, noise, cfg.s, cfg.shared_noise)
    u, x_tilde = _factual(cm, x, y, a, noise.model)
    a_prime = dyn_sampler_draw(s, u, noise=noise.a_prime)
    if detach_a:
        a_prime = a_prime.detach()
    x_cf = cm.decode_x(u, a_prime).sample(noise.model.x_counterfactual)
    err = delta_for(p)(predict(p, x_tilde, a), predict(p, x_cf, a_prime))
    return err, a_prime


def loss_dyncf(p: Predictor, s: DynSampler, cm: CausalModel, batch, cfg: Step2Config, rng: Rng | None = None, *,
               noise: CfNoise | None = None, detach_a: bool = False) -> torch.Tensor:
    return dyncf_parts(p, s, cm, batch, cfg, rng, noise=noise, detach_a=detach_a)[0].mean()


def step2_loss(p: Predictor, cm: CausalModel, batch, cfg: Step2Config, rng: Rng | None = None, *,
               sampler: DynSampler | None = None, noise: CfNoise | None = None):
    """Predictor objective: prediction loss + lambda * mitigation term. Returns ``(total, components)``."""
    x, y, a = batch
    pred = prediction_loss(p, x, a, y)
    comps = {"pred_loss": pred.detach()}
    if cfg.mitigation == Mitigation.NONE or cfg.lam == 0:
        return pred, comps
    if cfg.mitigation == Mitigation.CF:
        if cm.schema.a_kind == BINARY:
            term = loss_cf_discrete(p, cm, batch, cfg, rng, noise=noise)
        else:
            term = loss_cf_continuous(p, cm, batch, cfg, rng, noise=noise)
    else:
        term = loss_dyncf(p, sampler, cm, batch, cfg, rng, noise=noise, detach_a=True)
    comps["cf_term"] = term.detach()
    return pred + cfg.lam * term, comps


def sampler_objective(p: Predictor, s: DynSampler, cm: CausalModel, batch, cfg: Step2Config,
                      rng: Rng | None = None, *, noise: CfNoise | None = None) -> torch.Tensor:
    """Sampler descent objective: the negated counterfactual term (predictor detached)."""
    return -loss_dyncf(p, s, cm, batch, cfg, rng, noise=noise)


# -- training ------------------------------------------------------------------


def output_kind_for(dataset: Dataset) -> str:
    return PROBABILITY if dataset.schema.y_kind == BINARY else REAL


def build_predictor(dataset: Dataset, cfg: Step2Config) -> Predictor:
    return Predictor.build(dataset.schema.p, output_kind_for(dataset), cfg.hidden, Rng(cfg.seed).spawn(_PRED_INIT))


def train_step2(dataset: Dataset, cm: CausalModel, cfg: Step2Config, log_every: int = 0, callback=None):
    """Returns ``(predictor, sampler or None, history)``; ``callback(epoch, predictor, sampler)`` runs after each epoch."""
    if cfg.mitigation == Mitigation.DYNCF and dataset.schema.a_kind != CONTINUOUS:
        raise UnsupportedVariantError("DynCF needs a continuous sensitive attribute")
    if dataset.schema != cm.schema:
        raise ConfigError("dataset schema does not match the causal model")
    pred = build_predictor(dataset, cfg)
    sampler = None
    if cfg.mitigation == Mitigation.DYNCF:
        sampler = DynSampler.build(cm.latent_dim, cm.a_support, cfg.sampler_hidden, Rng(cfg.seed).spawn(_SAMPLER_INIT))
    active = cfg.mitigation != Mitigation.NONE and cfg.lam > 0
    rng = Rng(cfg.seed).spawn(_TRAIN)
    opt = Adam(pred.params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    s_opt = Adam(sampler.params(), cfg.sampler_lr, cfg.beta1, cfg.beta2, cfg.eps) if sampler and active else None
    x, a, y = dataset.tensors()
    history = []
    for epoch in range(cfg.epochs):
        sums: dict[str, float] = {}
        nb = 0
        for b, idx in enumerate(_batches(dataset.n, cfg.batch_size, rng)):
            batch = (x[idx], y[idx], a[idx])
            noise = _noise(cm, len(idx), rng, None, cfg.s, cfg.shared_noise) if active else None
            rec = {}
            try:
                for _ in range(cfg.sampler_steps if s_opt is not None else 0):
                    rec["sampler_term"] = -s_opt.minimize(
                        lambda: sampler_objective(pred, sampler, cm, batch, cfg, noise=noise))
                holder = {}

                def total():
                    t, comps = step2_loss(pred, cm, batch, cfg, sampler=sampler, noise=noise)
                    holder["comps"] = comps
                    return t

                rec["total"] = opt.minimize(total)
            except NonFiniteError as exc:
                raise NonFiniteError(f"step 2, epoch {epoch}, batch {b}: {exc}", exc.node) from exc
            rec.update(holder["comps"])
            for k, v in rec.items():
                sums[k] = sums.get(k, 0.0) + float(v)
            nb += 1
        row = {"epoch": epoch, **{k: v / nb for k, v in sums.items()}}
        history.append(row)
        if callback is not None:
            callback(epoch, pred, sampler)
        if log_every and (epoch % log_every == 0 or epoch == cfg.epochs - 1):
            log.info("step2 %s lam=%g epoch %d %s", cfg.mitigation.value, cfg.lam, epoch,
                     {k: round(v, 5) for k, v in row.items() if k != "epoch"})
    for t in pred.params() + (sampler.params() if sampler else []):
        t.requires_grad_(False)
    return pred, sampler, history


def _ascend(p, sampler, cm, dataset, cfg, steps, lr, batch_size, rng):
    for t in sampler.params():
        t.requires_grad_(True)
    opt = Adam(sampler.params(), lr)
    x, a, y = dataset.tensors()
    for _ in range(steps):
        idx = torch.from_numpy(rng.permutation(dataset.n)[:batch_size])
        batch = (x[idx], y[idx], a[idx])
        opt.minimize(lambda: sampler_objective(p, sampler, cm, batch, cfg, rng))
    for t in sampler.params():
        t.requires_grad_(False)
    return sampler


def sampler_best_response(p: Predictor, cm: CausalModel, dataset: Dataset, cfg: Step2Config, *,
                          steps: int = 300, lr: float = 1e-2, batch_size: int = 256, seed: int = 0,
                          sampler: DynSampler | None = None,
                          starts: Sequence[float] = (-2.0, 0.0, 2.0)) -> DynSampler:
    """Inner maximisation at a frozen predictor: ascend the dynamic counterfactual
    term over the sampler only.

    With ``sampler`` given, a copy of it is refined. Otherwise one fresh network
    is grown per entry of ``starts`` (initial mean logit), since the objective is
    often bimodal towards the two ends of the support; the candidate with the
    largest objective on ``dataset`` under common noise wins.
    """
    root = Rng(seed)
    if sampler is not None:
        return _ascend(p, DynSampler.from_dict(sampler.to_dict()), cm, dataset, cfg, steps, lr, batch_size,
                       root.spawn(_TRAIN + 100))
    x, a, y = dataset.tensors()
    judge = root.spawn(_TRAIN + 200)
    noise = _noise(cm, dataset.n, judge, None, cfg.s, cfg.shared_noise)
    best, best_val = None, -math.inf
    for k, start in enumerate(starts):
        cand = DynSampler.build(cm.latent_dim, cm.a_support, cfg.sampler_hidden, root.spawn(_SAMPLER_INIT, k))
        with torch.no_grad():
            cand.net.params[-1][0] += float(start)
        cand = _ascend(p, cand, cm, dataset, cfg, steps, lr, batch_size, root.spawn(_TRAIN + 100, k))
        with torch.no_grad():
            val = float(loss_dyncf(p, cand, cm, (x, y, a), cfg, noise=noise))
        if val > best_val:
            best, best_val = cand, val
    return best


__all__ = [
    "Mitigation", "Step2Config", "Predictor", "DynSampler", "CfNoise", "predict", "delta_logit", "delta_sq",
    "prediction_loss", "loss_cf_discrete", "loss_cf_continuous", "loss_dyncf", "dyncf_parts", "dyn_sampler_draw",
    "step2_loss", "sampler_objective", "train_step2", "build_predictor", "sampler_best_response",
]
