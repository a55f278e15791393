"""Step 1: variational inference of a confounder U independent of A.

Causal graph: U -> X, U -> Y, A -> X, A -> Y. An encoder q(u | inputs)
is trained with decoders p(x | u, a) and p(y | u, a) under one of four
independence constraints: none, group MMD to the prior, group MMD to the
batch posterior, or an adversary p(a | u) whose log-likelihood the encoder
pushes down.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from enum import Enum
from typing import NamedTuple, Optional, Union

import numpy as np
import torch

from .data import BINARY, CONTINUOUS, Dataset, Schema
from .dependence import MEDIAN, MmdConfig, mmd_rbf
from .distributions import (
    BernoulliLogit,
    DiagGaussian,
    SupportInterval,
    bernoulli_log_prob,
    bernoulli_sample,
    gaussian_kl_to_standard,
    gaussian_log_prob,
    gaussian_sample,
)
from .errors import DimensionError, DomainError, NonFiniteError, UnsupportedVariantError
from .numerics import DTYPE, Adam, Mlp, MlpSpec, Rng

log = logging.getLogger(__name__)


class Scheme(str, Enum):
    XYA = "XYA"
    XY = "XY"
    XA = "XA"


class Variant(str, Enum):
    NONE = "None"
    MMD_PRIOR = "MmdPrior"
    MMD_PAIRS = "MmdPairs"
    ADVERSARIAL = "Adversarial"


GROUP_VARIANTS = (Variant.MMD_PRIOR, Variant.MMD_PAIRS)

# network init streams; fixed so that adding an adversary leaves the others untouched
_ENC, _DEC_X, _DEC_Y, _ADV, _TRAIN = 1, 2, 3, 4, 5


@dataclass
class Step1Config:
    lambda_x: float = 1.0
    lambda_y: float = 1.0
    lambda_mmd: float = 0.0
    lambda_adv: float = 3.0
    lambda_group: float = 1.0
    lambda_kl: float = 0.0
    epochs: int = 20
    batch_size: int = 256
    adversary_steps: int = 5
    lr: float = 3e-4
    adversary_lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    latent_dim: int = 5
    encoder_hidden: tuple[int, ...] = (128, 64, 32)
    decoder_hidden: tuple[int, ...] = (64,)
    adversary_hidden: tuple[int, ...] = (32, 16)
    mmd_bandwidth: Union[float, str] = MEDIAN
    seed: int = 0

    def __post_init__(self):
        for name in ("lambda_x", "lambda_y", "lambda_mmd", "lambda_adv", "lambda_group", "lambda_kl"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.adversary_steps < 1:
            raise ValueError("adversary_steps must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        for name in ("encoder_hidden", "decoder_hidden", "adversary_hidden"):
            setattr(self, name, tuple(getattr(self, name)))

    @property
    def mmd(self) -> MmdConfig:
        return MmdConfig(self.mmd_bandwidth)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("encoder_hidden", "decoder_hidden", "adversary_hidden"):
            d[k] = list(d[k])
        return d


def _concat_a(h: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    return torch.cat([h, a.reshape(-1, 1).to(h.dtype)], -1)


class XLikelihood(NamedTuple):
    """Per-column likelihood of X: Gaussian over continuous columns, Bernoulli over binary."""

    gauss: DiagGaussian
    bern: BernoulliLogit
    cont_idx: torch.Tensor
    bin_idx: torch.Tensor

    def log_prob(self, x: torch.Tensor) -> torch.Tensor:
        lp = torch.zeros(x.shape[0], dtype=x.dtype)
        if len(self.cont_idx):
            lp = lp + gaussian_log_prob(self.gauss, x[:, self.cont_idx])
        if len(self.bin_idx):
            lp = lp + bernoulli_log_prob(self.bern, x[:, self.bin_idx]).sum(-1)
        return lp

    def sample(self, noise: torch.Tensor) -> torch.Tensor:
        out = torch.empty_like(noise)
        if len(self.cont_idx):
            out[:, self.cont_idx] = gaussian_sample(self.gauss, noise[:, self.cont_idx])
        if len(self.bin_idx):
            out[:, self.bin_idx] = bernoulli_sample(self.bern, noise[:, self.bin_idx])
        return out

    def mean(self) -> torch.Tensor:
        n = self.gauss.mean.shape[0] if len(self.cont_idx) else self.bern.logit.shape[0]
        out = torch.empty(n, len(self.cont_idx) + len(self.bin_idx), dtype=DTYPE)
        if len(self.cont_idx):
            out[:, self.cont_idx] = self.gauss.mean
        if len(self.bin_idx):
            out[:, self.bin_idx] = self.bern.probability
        return out


class Counterfactual(NamedTuple):
    x_prime: torch.Tensor
    y_prime: torch.Tensor
    x_factual: torch.Tensor
    y_factual: torch.Tensor
    u: torch.Tensor


@dataclass
class CounterfactualNoise:
    """Standard-normal draws driving one factual/counterfactual pair per row."""

    u: torch.Tensor
    x_factual: torch.Tensor
    x_counterfactual: torch.Tensor
    y_factual: torch.Tensor
    y_counterfactual: torch.Tensor

    @classmethod
    def draw(cls, n: int, latent_dim: int, p: int, rng: Rng, shared: bool = False) -> "CounterfactualNoise":
        u = rng.normal(n, latent_dim)
        xf, yf = rng.normal(n, p), rng.normal(n, 1)
        if shared:
            return cls(u, xf, xf, yf, yf)
        return cls(u, xf, rng.normal(n, p), yf, rng.normal(n, 1))

    def repeat(self, s: int) -> "CounterfactualNoise":
        return CounterfactualNoise(*(t.repeat(s, 1) for t in
                                     (self.u, self.x_factual, self.x_counterfactual,
                                      self.y_factual, self.y_counterfactual)))


class CausalModel:
    """Encoder q(u | ...), decoders p(x | u, a), p(y | u, a) and optional adversary p(a | u)."""

    def __init__(self, schema: Schema, scheme: Scheme, variant: Variant, a_support: SupportInterval,
                 cfg: Step1Config, rng: Rng | None = None, nets: dict | None = None):
        self.schema = schema
        self.scheme = Scheme(scheme)
        self.variant = Variant(variant)
        self.a_support = a_support
        self.cfg = cfg
        self.latent_dim = cfg.latent_dim
        if self.variant in GROUP_VARIANTS and schema.a_kind != BINARY:
            raise UnsupportedVariantError(
                f"{self.variant.value} aggregates posteriors per sensitive group and needs discrete A"
            )
        cont = schema.x_continuous
        self.x_cont_idx = torch.from_numpy(np.flatnonzero(cont))
        self.x_bin_idx = torch.from_numpy(np.flatnonzero(~cont))
        d, p = cfg.latent_dim, schema.p
        n_in = p + (self.scheme in (Scheme.XYA, Scheme.XY)) + (self.scheme in (Scheme.XYA, Scheme.XA))
        specs = {
            "encoder": MlpSpec((n_in, *cfg.encoder_hidden, 2 * d)),
            "decoder_x": MlpSpec((d + 1, *cfg.decoder_hidden, 2 * len(self.x_cont_idx) + len(self.x_bin_idx))),
            "decoder_y": MlpSpec((d + 1, *cfg.decoder_hidden, 2 if schema.y_kind == CONTINUOUS else 1)),
        }
        if self.variant == Variant.ADVERSARIAL:
            specs["adversary"] = MlpSpec((d, *cfg.adversary_hidden, 2 if schema.a_kind == CONTINUOUS else 1))
        if nets is None:
            rng = rng or Rng(cfg.seed)
            keys = {"encoder": _ENC, "decoder_x": _DEC_X, "decoder_y": _DEC_Y, "adversary": _ADV}
            nets = {k: Mlp(s, rng.spawn(keys[k])) for k, s in specs.items()}
        for k, s in specs.items():
            if nets[k].spec != s:
                raise DimensionError(f"{k}: network spec {nets[k].spec} does not match {s}")
        self.encoder: Mlp = nets["encoder"]
        self.decoder_x: Mlp = nets["decoder_x"]
        self.decoder_y: Mlp = nets["decoder_y"]
        self.adversary: Optional[Mlp] = nets.get("adversary")

    # -- parameters -------------------------------------------------------------

    def main_params(self) -> list[torch.Tensor]:
        return self.encoder.param_list() + self.decoder_x.param_list() + self.decoder_y.param_list()

    def adversary_params(self) -> list[torch.Tensor]:
        return [] if self.adversary is None else self.adversary.param_list()

    def nets(self) -> dict[str, Mlp]:
        out = {"encoder": self.encoder, "decoder_x": self.decoder_x, "decoder_y": self.decoder_y}
        if self.adversary is not None:
            out["adversary"] = self.adversary
        return out

    def freeze(self) -> "CausalModel":
        for p in self.main_params() + self.adversary_params():
            p.requires_grad_(False)
        return self

    # -- distributions ------------------------------------------------------------

    def encoder_input(self, x: torch.Tensor, y: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
        if x.ndim != 2 or x.shape[1] != self.schema.p:
            raise DimensionError(f"X must have shape (n, {self.schema.p}), got {tuple(x.shape)}")
        parts = [x]
        if self.scheme in (Scheme.XYA, Scheme.XY):
            parts.append(y.reshape(-1, 1).to(x.dtype))
        if self.scheme in (Scheme.XYA, Scheme.XA):
            parts.append(a.reshape(-1, 1).to(x.dtype))
        return torch.cat(parts, -1)

    def encode(self, x, y, a) -> DiagGaussian:
        return DiagGaussian.from_head(self.encoder(self.encoder_input(x, y, a)))

    def _check_u(self, u: torch.Tensor):
        if u.ndim != 2 or u.shape[1] != self.latent_dim:
            raise DimensionError(f"u must have shape (n, {self.latent_dim}), got {tuple(u.shape)}")

    def decode_x(self, u, a) -> XLikelihood:
        self._check_u(u)
        out = self.decoder_x(_concat_a(u, a))
        nc = len(self.x_cont_idx)
        gauss = DiagGaussian.from_head(out[:, : 2 * nc])
        return XLikelihood(gauss, BernoulliLogit(out[:, 2 * nc:]), self.x_cont_idx, self.x_bin_idx)

    def decode_y(self, u, a) -> Union[DiagGaussian, BernoulliLogit]:
        self._check_u(u)
        out = self.decoder_y(_concat_a(u, a))
        if self.schema.y_kind == CONTINUOUS:
            return DiagGaussian.from_head(out)
        return BernoulliLogit(out[:, 0])

    def log_py(self, u, a, y) -> torch.Tensor:
        dist = self.decode_y(u, a)
        if isinstance(dist, DiagGaussian):
            return gaussian_log_prob(dist, y.reshape(-1, 1))
        return bernoulli_log_prob(dist, y)

    def adversary_dist(self, u) -> Union[DiagGaussian, BernoulliLogit]:
        if self.adversary is None:
            raise UnsupportedVariantError("model has no adversary")
        out = self.adversary(u)
        if self.schema.a_kind == CONTINUOUS:
            return DiagGaussian.from_head(out)
        return BernoulliLogit(out[:, 0])

    def adversary_log_prob(self, u, a) -> torch.Tensor:
        dist = self.adversary_dist(u)
        if isinstance(dist, DiagGaussian):
            return gaussian_log_prob(dist, a.reshape(-1, 1))
        return bernoulli_log_prob(dist, a)

    def sample_y(self, u, a, noise: torch.Tensor) -> torch.Tensor:
        dist = self.decode_y(u, a)
        if isinstance(dist, DiagGaussian):
            return gaussian_sample(dist, noise.reshape(dist.mean.shape))[:, 0]
        return bernoulli_sample(dist, noise.reshape(-1))

    # -- serialization -------------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema": self.schema.to_dict(),
            "scheme": self.scheme.value,
            "variant": self.variant.value,
            "latent_dim": self.latent_dim,
            "a_support": [self.a_support.lower, self.a_support.upper],
            "step1_config": self.cfg.to_dict(),
            "nets": {k: {"spec": m.spec.to_dict(), "params": m.flat_arrays()} for k, m in self.nets().items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CausalModel":
        nets = {k: Mlp.from_flat(MlpSpec.from_dict(v["spec"]), v["params"]) for k, v in d["nets"].items()}
        return cls(Schema.from_dict(d["schema"]), Scheme(d["scheme"]), Variant(d["variant"]),
                   SupportInterval(*d["a_support"]), Step1Config(**d["step1_config"]), nets=nets)


def _check_a_prime(model: CausalModel, a_prime: torch.Tensor):
    if model.schema.a_kind == BINARY:
        if not torch.all((a_prime == 0) | (a_prime == 1)):
            raise DomainError("counterfactual attribute must be 0 or 1")
    elif not model.a_support.contains(a_prime, tol=1e-9):
        raise DomainError(
            f"counterfactual attribute outside Omega_A = [{model.a_support.lower}, {model.a_support.upper}]"
        )


def build_model(dataset: Dataset, cfg: Step1Config, scheme: Scheme, variant: Variant) -> CausalModel:
    return CausalModel(dataset.schema, scheme, variant, dataset.a_support, cfg, Rng(cfg.seed))


# -- losses -----------------------------------------------------------------------


def _group_masks(a: torch.Tensor) -> list[torch.Tensor]:
    return [a == v for v in torch.unique(a)]


def step1_loss(model: CausalModel, batch, cfg: Step1Config, rng: Rng | None = None, *,
               noise: torch.Tensor | None = None, prior: torch.Tensor | None = None):
    """Main-player objective on a batch; returns ``(total, components)``.

    ``noise`` fixes the reparameterization draw and ``prior`` the N(0, I)
    sample used by the MMD terms. Terms whose weight is zero are reported
    but kept out of the graph.
    """
    x, y, a = batch
    if len(x) == 0:
        raise DimensionError("empty batch")
    if model.variant in GROUP_VARIANTS and model.schema.a_kind != BINARY:
        raise UnsupportedVariantError(f"{model.variant.value} needs discrete A")
    q = model.encode(x, y, a)
    if noise is None:
        noise = rng.normal(*q.mean.shape)
    u = gaussian_sample(q, noise)
    comps: dict[str, torch.Tensor] = {}
    comps["log_px"] = model.decode_x(u, a).log_prob(x).mean()
    comps["log_py"] = model.log_py(u, a, y).mean()
    terms = [(-cfg.lambda_x, "log_px"), (-cfg.lambda_y, "log_py")]

    need_prior = cfg.lambda_mmd > 0 or model.variant == Variant.MMD_PRIOR
    if need_prior and prior is None:
        prior = rng.normal(*u.shape)
    if cfg.lambda_mmd > 0:
        comps["mmd"] = mmd_rbf(u, prior, cfg.mmd)
        terms.append((cfg.lambda_mmd, "mmd"))
    if cfg.lambda_kl > 0:
        comps["kl"] = gaussian_kl_to_standard(q).mean()
        terms.append((cfg.lambda_kl, "kl"))
    if model.variant == Variant.MMD_PRIOR:
        comps["group_mmd"] = torch.stack([mmd_rbf(u[m], prior, cfg.mmd) for m in _group_masks(a)]).mean()
        terms.append((cfg.lambda_group, "group_mmd"))
    elif model.variant == Variant.MMD_PAIRS:
        comps["group_mmd"] = torch.stack([mmd_rbf(u[m], u, cfg.mmd) for m in _group_masks(a)]).mean()
        terms.append((cfg.lambda_group, "group_mmd"))
    elif model.variant == Variant.ADVERSARIAL:
        comps["adv_log_pa"] = model.adversary_log_prob(u, a).mean()
        terms.append((cfg.lambda_adv, "adv_log_pa"))

    total = None
    for w, name in terms:
        if w != 0:
            total = w * comps[name] if total is None else total + w * comps[name]
    if total is None:
        total = 0.0 * comps["log_px"]
    comps = {k: v.detach() for k, v in comps.items()}
    return total, comps


def adversary_loss(model: CausalModel, u: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    """Adversary descent objective: negative mean log p(a | u) with u detached."""
    return -model.adversary_log_prob(u.detach(), a).mean()


# -- training ---------------------------------------------------------------------


def _batches(n: int, batch_size: int, rng: Rng):
    perm = torch.from_numpy(rng.permutation(n))
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def train_step1(dataset: Dataset, cfg: Step1Config, scheme: Scheme, variant: Variant,
                log_every: int = 0):
    """Fit a causal model; returns ``(model, history)`` with one dict per epoch.

    For the adversarial variant each batch first takes ``adversary_steps``
    ascent steps on log p(a | u) (encoder detached), then one descent step
    of the main objective on the same batch and reparameterization draw.
    """
    model = build_model(dataset, cfg, Scheme(scheme), Variant(variant))
    rng = Rng(cfg.seed).spawn(_TRAIN)
    opt = Adam(model.main_params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    adv_opt = (Adam(model.adversary_params(), cfg.adversary_lr, cfg.beta1, cfg.beta2, cfg.eps)
               if model.adversary is not None else None)
    x, a, y = dataset.tensors()
    history = []
    for epoch in range(cfg.epochs):
        sums: dict[str, float] = {}
        nb = 0
        for b, idx in enumerate(_batches(dataset.n, cfg.batch_size, rng)):
            xb, yb, ab = x[idx], y[idx], a[idx]
            noise = rng.normal(len(idx), cfg.latent_dim)
            prior = rng.normal(len(idx), cfg.latent_dim)
            try:
                if adv_opt is not None:
                    with torch.no_grad():
                        u_det = gaussian_sample(model.encode(xb, yb, ab), noise)
                    for _ in range(cfg.adversary_steps):
                        adv_val = adv_opt.minimize(lambda: adversary_loss(model, u_det, ab))
                holder = {}

                def main_loss():
                    total, comps = step1_loss(model, (xb, yb, ab), cfg, noise=noise, prior=prior)
                    holder["comps"] = comps
                    return total

                total = opt.minimize(main_loss)
            except NonFiniteError as exc:
                raise NonFiniteError(f"step 1, epoch {epoch}, batch {b}: {exc}", exc.node) from exc
            rec = dict(holder["comps"], total=total)
            if adv_opt is not None:
                rec["adversary_nll"] = adv_val
            for k, v in rec.items():
                sums[k] = sums.get(k, 0.0) + float(v)
            nb += 1
        row = {"epoch": epoch, **{k: v / nb for k, v in sums.items()}}
        history.append(row)
        if log_every and (epoch % log_every == 0 or epoch == cfg.epochs - 1):
            log.info("step1 %s/%s epoch %d %s", model.scheme.value, model.variant.value, epoch,
                     {k: round(v, 4) for k, v in row.items() if k != "epoch"})
    return model.freeze(), history


# -- inference-time helpers ----------------------------------------------------------


def posterior_means(model: CausalModel, dataset: Dataset) -> torch.Tensor:
    x, a, y = dataset.tensors()
    with torch.no_grad():
        return model.encode(x, y, a).mean


def reconstruction_losses(model: CausalModel, dataset: Dataset) -> dict[str, float]:
    """Per-feature MSE (Gaussian heads) / BCE (Bernoulli heads) at the posterior mean."""
    x, a, y = dataset.tensors()
    with torch.no_grad():
        u = model.encode(x, y, a).mean
        lik = model.decode_x(u, a)
        loss_x = []
        if len(lik.cont_idx):
            loss_x.append(((lik.gauss.mean - x[:, lik.cont_idx]) ** 2).mean(0))
        if len(lik.bin_idx):
            loss_x.append(-bernoulli_log_prob(lik.bern, x[:, lik.bin_idx]).mean(0))
        loss_x = torch.cat(loss_x).mean()
        dy = model.decode_y(u, a)
        if isinstance(dy, DiagGaussian):
            loss_y = ((dy.mean[:, 0] - y) ** 2).mean()
        else:
            loss_y = -bernoulli_log_prob(dy, y).mean()
    return {"loss_x": float(loss_x), "loss_y": float(loss_y)}


def sample_counterfactual(model: CausalModel, x, y, a, a_prime, rng: Rng | None = None,
                          noise: CounterfactualNoise | None = None) -> Counterfactual:
    """One posterior draw of u per row, then x', y' from the decoders at ``a_prime``
    and the factual regeneration at ``a`` from the same u."""
    a_prime = torch.as_tensor(a_prime, dtype=DTYPE).expand(len(x)).clone()
    _check_a_prime(model, a_prime)
    if noise is None:
        noise = CounterfactualNoise.draw(len(x), model.latent_dim, model.schema.p, rng)
    with torch.no_grad():
        u = gaussian_sample(model.encode(x, y, a), noise.u)
        x_f = model.decode_x(u, a).sample(noise.x_factual)
        x_cf = model.decode_x(u, a_prime).sample(noise.x_counterfactual)
        y_f = model.sample_y(u, a, noise.y_factual)
        y_cf = model.sample_y(u, a_prime, noise.y_counterfactual)
    return Counterfactual(x_cf, y_cf, x_f, y_f, u)
