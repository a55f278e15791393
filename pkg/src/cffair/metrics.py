"""Evaluation: counterfactual fairness (model-based and ground-truth), accuracy/MSE,
HGR of inferred codes and the demographic-parity gap."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional, Union

import numpy as np
import torch

from .causal_vae import CausalModel, posterior_means
from .data import BINARY, Dataset, true_counterfactual
from .dependence import HgrConfig, hgr_estimate
from .errors import CapabilityError, DataError, UnsupportedVariantError
from .numerics import DTYPE, Rng
from .predictor import PROBABILITY, Predictor, delta_logit, delta_sq, predict

ORACLE = "oracle"
BINARY_MIRROR = 90.0  # flips a raw age across the 45-year threshold
CONTINUOUS_CF_COUNT = 1000


class CfResult(NamedTuple):
    value: float
    per_individual: np.ndarray


def _delta(p: Predictor):
    return delta_logit if p.output_kind == PROBABILITY else delta_sq


def default_count(ds: Dataset) -> int:
    return 1 if ds.schema.a_kind == BINARY else CONTINUOUS_CF_COUNT


def _draw_a_prime(ds: Dataset, a: torch.Tensor, k: int, rng: Rng) -> torch.Tensor:
    """(n, k) counterfactual attributes: the flip for binary A, uniform on Omega_A otherwise."""
    if ds.schema.a_kind == BINARY:
        return (1.0 - a)[:, None].expand(-1, k).clone()
    sup = ds.a_support
    return rng.uniform(len(a), k, low=sup.lower, high=sup.upper)


def cf_metric(predictor: Predictor, source: Union[CausalModel, str], test_set: Dataset,
              count: int | None = None, rng: Rng | None = None, *, identity: bool = False,
              factual: str = "raw", chunk_rows: int = 100_000) -> CfResult:
    """Mean over individuals and their counterfactual sets C(i) of Delta(h(x_i, a_i), h(x', a')).

    ``source`` is a trained causal model (CF) or ``"oracle"`` for structural
    counterfactuals from the true codes (RealCF). ``identity=True`` sets
    a' = a and evaluates the factual side on the regenerated x~ with the
    same decoder noise, which must give exactly 0. ``factual="regenerated"``
    uses x~ on the factual side in general.
    """
    if test_set.n == 0:
        raise DataError("empty test set")
    count = count or default_count(test_set)
    rng = rng or Rng(0)
    x, a, y = test_set.tensors()
    delta = _delta(predictor)
    n = test_set.n
    a_prime = a[:, None].expand(-1, count).clone() if identity else _draw_a_prime(test_set, a, count, rng)

    if isinstance(source, str):
        if source != ORACLE:
            raise ValueError(f"unknown counterfactual source {source!r}")
        if test_set.u_true is None:
            raise CapabilityError("RealCF needs the true latent codes of a synthetic dataset")
        out = np.empty((n, count))
        with torch.no_grad():
            h_fact = predict(predictor, x, a)
            for j in range(count):
                ap = a_prime[:, j]
                if test_set.schema.a_kind == BINARY:
                    src = test_set.a_source if test_set.a_source is not None else None
                    if src is None:
                        raise CapabilityError("binary RealCF needs the continuous source attribute")
                    raw = src if identity else BINARY_MIRROR - src
                else:
                    raw = test_set.scaler.a_inverse(ap.numpy())
                xs, _ = true_counterfactual(test_set.u_true, raw, scaler=test_set.scaler)
                out[:, j] = delta(h_fact, predict(predictor, torch.from_numpy(xs), ap)).numpy()
        per = out.mean(1)
        return CfResult(float(per.mean()), per)

    cm: CausalModel = source
    per = np.zeros(n)
    rows_per = max(1, chunk_rows // count)
    with torch.no_grad():
        for start in range(0, n, rows_per):
            sl = slice(start, min(n, start + rows_per))
            m = sl.stop - sl.start
            q = cm.encode(x[sl], y[sl], a[sl])
            mean = q.mean.repeat_interleave(count, 0)
            logv = q.log_variance.repeat_interleave(count, 0)
            u = mean + torch.exp(0.5 * logv) * rng.normal(m * count, cm.latent_dim)
            ap = a_prime[sl].reshape(-1)
            a_rep = a[sl].repeat_interleave(count)
            x_noise = rng.normal(m * count, cm.schema.p)
            x_cf = cm.decode_x(u, ap).sample(x_noise)
            if identity or factual == "regenerated":
                x_f = cm.decode_x(u, a_rep).sample(x_noise)
                h_f = predict(predictor, x_f, a_rep)
            else:
                h_f = predict(predictor, x[sl], a[sl]).repeat_interleave(count)
            d = delta(h_f, predict(predictor, x_cf, ap))
            per[sl] = d.reshape(m, count).mean(1).numpy()
    return CfResult(float(per.mean()), per)


def predictive_metric(p: Predictor, test_set: Dataset) -> float:
    """Accuracy for probability outputs, MSE on standardized Y otherwise."""
    if test_set.n == 0:
        raise DataError("empty test set")
    x, a, y = test_set.tensors()
    with torch.no_grad():
        h = predict(p, x, a)
    if p.output_kind == PROBABILITY:
        return float(((h >= 0.5).to(DTYPE) == y).to(DTYPE).mean())
    return float(((h - y) ** 2).mean())


def hgr_on_codes(cm: CausalModel, test_set: Dataset, cfg: HgrConfig = HgrConfig(), rng: Rng | None = None) -> float:
    return hgr_estimate(posterior_means(cm, test_set), test_set.a, cfg, rng or Rng(0)).value


def dp_gap(p: Predictor, test_set: Dataset) -> float:
    if test_set.schema.a_kind != BINARY:
        raise UnsupportedVariantError("demographic parity gap needs binary A")
    if p.output_kind != PROBABILITY:
        raise UnsupportedVariantError("demographic parity gap needs a binary predictor")
    x, a, _ = test_set.tensors()
    with torch.no_grad():
        pos = (predict(p, x, a) >= 0.5).to(DTYPE)
    g0, g1 = pos[a == 0], pos[a == 1]
    if len(g0) == 0 or len(g1) == 0:
        raise DataError("both sensitive groups must be present")
    return float(abs(g0.mean() - g1.mean()))


@dataclass
class EvalReport:
    cf: float
    cf_per_individual: list
    accuracy: Optional[float] = None
    mse: Optional[float] = None
    real_cf: Optional[float] = None
    real_cf_per_individual: Optional[list] = None
    hgr_u_a: Optional[float] = None
    dp_gap: Optional[float] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.cf < 0 or (self.real_cf is not None and self.real_cf < 0):
            raise ValueError("CF values are non-negative")
        if self.dp_gap is not None and not 0.0 <= self.dp_gap <= 1.0:
            raise ValueError("dp_gap lies in [0, 1]")

    def to_dict(self, include_vectors: bool = False) -> dict:
        d = asdict(self)
        if not include_vectors:
            d.pop("cf_per_individual")
            d.pop("real_cf_per_individual")
        return {k: v for k, v in d.items() if v is not None}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def evaluate(predictor: Predictor, cm: CausalModel, test_set: Dataset, *, count: int | None = None,
             seed: int = 0, hgr_cfg: HgrConfig | None = None, factual: str = "raw") -> EvalReport:
    """All applicable metrics for one trained (causal model, predictor) pair."""
    rng = Rng(seed)
    count = count or default_count(test_set)
    cf = cf_metric(predictor, cm, test_set, count, rng.spawn(1), factual=factual)
    rep = EvalReport(cf.value, cf.per_individual.tolist(), metadata={"count_per_individual": count, "seed": seed,
                                                                       "factual": factual})
    metric = predictive_metric(predictor, test_set)
    if predictor.output_kind == PROBABILITY:
        rep.accuracy = metric
    else:
        rep.mse = metric
    if test_set.u_true is not None:
        real = cf_metric(predictor, ORACLE, test_set, count, rng.spawn(2))
        rep.real_cf, rep.real_cf_per_individual = real.value, real.per_individual.tolist()
    if hgr_cfg is not None:
        rep.hgr_u_a = hgr_on_codes(cm, test_set, hgr_cfg, rng.spawn(3))
    if test_set.schema.a_kind == BINARY and predictor.output_kind == PROBABILITY:
        rep.dp_gap = dp_gap(predictor, test_set)
    return rep
