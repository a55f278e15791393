"""Datasets: the synthetic car-insurance generator, its counterfactual oracle,
CSV ingestion and the 80/20 split protocol.

Arrays are stored raw; standardized views are derived from a :class:`Scaler`
fitted on the training split.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .distributions import SupportInterval
from .errors import DataError, DomainError, SchemaError
from .numerics import Rng

CONTINUOUS, BINARY, CATEGORICAL = "continuous", "binary", "categorical"

# synthetic scenario constants (policyholder age A, five latent traits U)
U_MEAN = np.array([0.0, 0.5, 1.0, 1.5, 2.0])
U_VAR = np.array([1.0, 4.0, 2.0, 3.0, 2.0])
A_MEAN, A_STD = 45.0, 5.0
X_NOISE_STD = np.array([1.0, 10.0, 20.0, 1000.0])
Y_NOISE_STD = 0.1
SYN_X_NAMES = ("x1", "x2", "x3", "x4")
SYN_U_NAMES = ("u1", "u2", "u3", "u4", "u5")
SYN_NOISE_NAMES = ("e_x1", "e_x2", "e_x3", "e_x4", "e_y")
BINARY_A_THRESHOLD = 45.0


@dataclass(frozen=True)
class Schema:
    x_names: tuple[str, ...]
    x_kinds: tuple[str, ...]
    a_kind: str
    y_kind: str
    a_name: str = "A"
    y_name: str = "Y"

    def __post_init__(self):
        if len(self.x_names) != len(self.x_kinds):
            raise SchemaError("x_names and x_kinds differ in length")
        for k in (*self.x_kinds, self.a_kind, self.y_kind):
            if k not in (CONTINUOUS, BINARY):
                raise SchemaError(f"unknown column kind {k!r}")

    @property
    def p(self) -> int:
        return len(self.x_names)

    @property
    def x_continuous(self) -> np.ndarray:
        return np.array([k == CONTINUOUS for k in self.x_kinds])

    def to_dict(self) -> dict:
        return {
            "x_names": list(self.x_names), "x_kinds": list(self.x_kinds),
            "a_kind": self.a_kind, "y_kind": self.y_kind,
            "a_name": self.a_name, "y_name": self.y_name,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        return cls(tuple(d["x_names"]), tuple(d["x_kinds"]), d["a_kind"], d["y_kind"],
                   d.get("a_name", "A"), d.get("y_name", "Y"))


def _moments(v: np.ndarray) -> tuple[float, float]:
    std = float(v.std())
    return float(v.mean()), std if std > 0 else 1.0


@dataclass(frozen=True)
class Scaler:
    """Affine standardization of continuous columns; binary columns pass through."""

    x_mean: np.ndarray
    x_std: np.ndarray
    a_mean: float = 0.0
    a_std: float = 1.0
    y_mean: float = 0.0
    y_std: float = 1.0

    @classmethod
    def fit(cls, schema: Schema, x_raw, a_raw, y_raw) -> "Scaler":
        x_mean = np.zeros(schema.p)
        x_std = np.ones(schema.p)
        for j in np.flatnonzero(schema.x_continuous):
            x_mean[j], x_std[j] = _moments(x_raw[:, j])
        a_mean, a_std = _moments(a_raw) if schema.a_kind == CONTINUOUS else (0.0, 1.0)
        y_mean, y_std = _moments(y_raw) if schema.y_kind == CONTINUOUS else (0.0, 1.0)
        return cls(x_mean, x_std, a_mean, a_std, y_mean, y_std)

    def x(self, x_raw):
        return (np.asarray(x_raw) - self.x_mean) / self.x_std

    def a(self, a_raw):
        return (np.asarray(a_raw) - self.a_mean) / self.a_std

    def y(self, y_raw):
        return (np.asarray(y_raw) - self.y_mean) / self.y_std

    def a_inverse(self, a_std_units):
        return np.asarray(a_std_units) * self.a_std + self.a_mean

    def y_inverse(self, y_std_units):
        return np.asarray(y_std_units) * self.y_std + self.y_mean

    def to_dict(self) -> dict:
        return {
            "x_mean": self.x_mean.tolist(), "x_std": self.x_std.tolist(),
            "a_mean": self.a_mean, "a_std": self.a_std,
            "y_mean": self.y_mean, "y_std": self.y_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(np.array(d["x_mean"], dtype=float), np.array(d["x_std"], dtype=float),
                   d["a_mean"], d["a_std"], d["y_mean"], d["y_std"])


@dataclass
class Dataset:
    x_raw: np.ndarray
    a_raw: np.ndarray
    y_raw: np.ndarray
    schema: Schema
    scaler: Scaler
    a_bounds: tuple[float, float]
    u_true: Optional[np.ndarray] = None
    noise: Optional[np.ndarray] = None
    a_source: Optional[np.ndarray] = None  # continuous A behind a binarized one
    y_source: Optional[np.ndarray] = None
    split: str = "full"
    index: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.x_raw)
        if len(self.a_raw) != n or len(self.y_raw) != n:
            raise DataError("X, A and Y must have the same number of rows")
        if self.index is None:
            self.index = np.arange(n)

    @property
    def n(self) -> int:
        return len(self.x_raw)

    @property
    def x(self) -> np.ndarray:
        return self.scaler.x(self.x_raw)

    @property
    def a(self) -> np.ndarray:
        return self.scaler.a(self.a_raw)

    @property
    def y(self) -> np.ndarray:
        return self.scaler.y(self.y_raw)

    @property
    def is_synthetic(self) -> bool:
        return self.u_true is not None

    @property
    def a_support(self) -> SupportInterval:
        """Omega_A in model (standardized) units; {0, 1} spans [0, 1] for binary A."""
        lo, hi = self.a_bounds
        return SupportInterval(float(self.scaler.a(lo)), float(self.scaler.a(hi)))

    def tensors(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return (torch.from_numpy(np.ascontiguousarray(self.x)),
                torch.from_numpy(np.ascontiguousarray(self.a)),
                torch.from_numpy(np.ascontiguousarray(self.y)))

    def subset(self, idx, split: str | None = None, scaler: Scaler | None = None,
               a_bounds: tuple[float, float] | None = None) -> "Dataset":
        idx = np.asarray(idx)
        pick = lambda v: None if v is None else v[idx]  # noqa: E731
        return Dataset(
            self.x_raw[idx], self.a_raw[idx], self.y_raw[idx], self.schema,
            scaler or self.scaler, a_bounds or self.a_bounds,
            pick(self.u_true), pick(self.noise), pick(self.a_source), pick(self.y_source),
            split or self.split, self.index[idx], dict(self.meta),
        )


def _bounds(schema: Schema, a_raw: np.ndarray) -> tuple[float, float]:
    if schema.a_kind == BINARY:
        return (0.0, 1.0)
    return (float(a_raw.min()), float(a_raw.max()))


def make_dataset(x_raw, a_raw, y_raw, schema: Schema, **extra) -> Dataset:
    """Build a dataset whose scaler and Omega_A are fitted on all its rows."""
    x_raw = np.asarray(x_raw, dtype=float)
    a_raw = np.asarray(a_raw, dtype=float)
    y_raw = np.asarray(y_raw, dtype=float)
    if x_raw.ndim != 2 or x_raw.shape[1] != schema.p:
        raise SchemaError(f"X must have shape (n, {schema.p}), got {x_raw.shape}")
    if len(x_raw) == 0:
        raise DataError("dataset is empty")
    scaler = Scaler.fit(schema, x_raw, a_raw, y_raw)
    return Dataset(x_raw, a_raw, y_raw, schema, scaler, _bounds(schema, a_raw), **extra)


# --- synthetic scenario -----------------------------------------------------------


def structural_means(u: np.ndarray, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Noiseless X1..X4 and Y at latent traits ``u`` (n, 5) and raw age ``a`` (n,)."""
    u = np.atleast_2d(np.asarray(u, dtype=float))
    a = np.asarray(a, dtype=float).reshape(-1)
    if u.shape[1] != 5:
        raise DomainError(f"synthetic latent codes are 5-dimensional, got {u.shape[1]}")
    x = np.empty((len(u), 4))
    x[:, 0] = 7.0 + 0.1 * a + u[:, 0] + u[:, 1] + u[:, 2]
    x[:, 1] = 80.0 + a + u[:, 1] ** 2
    x[:, 2] = 200.0 + 5.0 * a + 5.0 * u[:, 2]
    x[:, 3] = 1e4 + 5.0 * a + u[:, 3] + u[:, 4]
    y = 2.0 * (7.0 * a + 20.0 * u.sum(1))
    return x, y


def synthetic_schema(binary: bool = False) -> Schema:
    kind = BINARY if binary else CONTINUOUS
    return Schema(SYN_X_NAMES, (CONTINUOUS,) * 4, kind, kind)


def gen_synthetic_continuous(n: int, seed: int) -> Dataset:
    if n < 1:
        raise DataError(f"n must be >= 1, got {n}")
    gen = Rng(seed).numpy
    u = U_MEAN + np.sqrt(U_VAR) * gen.standard_normal((n, 5))
    a = A_MEAN + A_STD * gen.standard_normal(n)
    noise = np.empty((n, 5))
    noise[:, :4] = X_NOISE_STD * gen.standard_normal((n, 4))
    noise[:, 4] = Y_NOISE_STD * gen.standard_normal(n)
    x_mean, y_mean = structural_means(u, a)
    x = x_mean + noise[:, :4]
    y = y_mean + noise[:, 4]
    ds = make_dataset(x, a, y, synthetic_schema(False), u_true=u, noise=noise)
    ds.meta.update(kind="synthetic_continuous", n=n, seed=seed)
    return ds


def binarize_synthetic(ds: Dataset) -> Dataset:
    """A -> 1{A >= 45}; Y -> 1{Y >= sample median}. A pure function of ``ds``."""
    a_bin = (ds.a_raw >= BINARY_A_THRESHOLD).astype(float)
    y_bin = (ds.y_raw >= np.median(ds.y_raw)).astype(float)
    out = make_dataset(ds.x_raw, a_bin, y_bin, synthetic_schema(True), u_true=ds.u_true,
                       noise=ds.noise, a_source=ds.a_raw, y_source=ds.y_raw)
    out.meta.update(ds.meta, kind="synthetic_binary")
    return out


def gen_synthetic_binary(n: int, seed: int) -> Dataset:
    return binarize_synthetic(gen_synthetic_continuous(n, seed))


def regenerate_x(u_true: np.ndarray, a_raw: np.ndarray, noise: np.ndarray) -> np.ndarray:
    x_mean, _ = structural_means(u_true, a_raw)
    return x_mean + noise[:, :4]


def true_counterfactual(u_true, a_prime, *, bounds: tuple[float, float] | None = None,
                        scaler: Scaler | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Structural-mean counterfactual (x', y') at raw age ``a_prime``.

    With ``scaler`` the outputs are standardized with its parameters.
    """
    a_prime = np.asarray(a_prime, dtype=float)
    if bounds is not None and (a_prime.min() < bounds[0] - 1e-9 or a_prime.max() > bounds[1] + 1e-9):
        raise DomainError(f"counterfactual attribute outside Omega_A = [{bounds[0]}, {bounds[1]}]")
    x, y = structural_means(u_true, a_prime)
    if scaler is not None:
        x, y = scaler.x(x), scaler.y(y)
    return x, y


# --- splitting -------------------------------------------------------------------


def split_80_20(ds: Dataset, seed: int) -> tuple[Dataset, Dataset]:
    """Uniform random 80/20 split; scaler and Omega_A are refitted on the train part."""
    if ds.n < 5:
        raise DataError(f"need at least 5 rows to split, got {ds.n}")
    perm = Rng(seed).spawn(0x5917).permutation(ds.n)
    n_train = int(round(0.8 * ds.n))
    tr_idx, te_idx = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    scaler = Scaler.fit(ds.schema, ds.x_raw[tr_idx], ds.a_raw[tr_idx], ds.y_raw[tr_idx])
    bounds = _bounds(ds.schema, ds.a_raw[tr_idx])
    train = ds.subset(tr_idx, "train", scaler, bounds)
    test = ds.subset(te_idx, "test", scaler, bounds)
    return train, test


# --- CSV I/O ---------------------------------------------------------------------


@dataclass(frozen=True)
class CsvSchema:
    """Column layout of a CSV file.

    ``features`` maps column name to kind (continuous, binary or categorical,
    the last one-hot encoded). ``sensitive_rule`` / ``outcome_rule`` binarize
    their columns; ``None`` keeps them numeric.
    """

    features: tuple[tuple[str, str], ...]
    sensitive: str
    outcome: str
    sensitive_rule: Optional[dict] = None
    outcome_rule: Optional[dict] = None
    latent_columns: tuple[str, ...] = ()
    noise_columns: tuple[str, ...] = ()
    missing_tokens: tuple[str, ...] = ("", "?", "NA", "nan", "NaN")

    def __post_init__(self):
        names = [n for n, _ in self.features]
        if self.sensitive in names or self.outcome in names or self.sensitive == self.outcome:
            raise SchemaError("sensitive and outcome must be two distinct non-feature columns")
        for name, kind in self.features:
            if kind not in (CONTINUOUS, BINARY, CATEGORICAL):
                raise SchemaError(f"column {name!r}: unknown kind {kind!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "CsvSchema":
        allowed = {"features", "sensitive", "outcome", "sensitive_rule", "outcome_rule",
                   "latent_columns", "noise_columns", "missing_tokens", "name", "notes"}
        unknown = set(d) - allowed
        if unknown:
            raise SchemaError(f"unknown schema keys: {sorted(unknown)}")
        feats = d["features"]
        if isinstance(feats, dict):
            feats = list(feats.items())
        return cls(
            tuple((str(n), str(k)) for n, k in feats), d["sensitive"], d["outcome"],
            d.get("sensitive_rule"), d.get("outcome_rule"),
            tuple(d.get("latent_columns", ())), tuple(d.get("noise_columns", ())),
            tuple(d.get("missing_tokens", cls.missing_tokens)),
        )

    @classmethod
    def load(cls, path) -> "CsvSchema":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "features": [list(f) for f in self.features], "sensitive": self.sensitive,
            "outcome": self.outcome, "sensitive_rule": self.sensitive_rule,
            "outcome_rule": self.outcome_rule, "latent_columns": list(self.latent_columns),
            "noise_columns": list(self.noise_columns), "missing_tokens": list(self.missing_tokens),
        }


def apply_rule(rule: Optional[dict], value: str) -> float:
    """Map a raw cell through a binarization rule; raises ValueError if unparseable."""
    if rule is None:
        v = float(value)
        if not math.isfinite(v):
            raise ValueError(value)
        return v
    kind = rule["type"]
    if kind == "range":  # inclusive
        v = float(value)
        return float(rule["low"] <= v <= rule["high"])
    if kind == "threshold":  # v >= value -> 1
        return float(float(value) >= rule["value"])
    if kind == "equals":
        return float(value.strip() in {str(x) for x in rule["values"]})
    raise SchemaError(f"unknown rule type {kind!r}")


def _read_rows(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError(f"{path}: empty file") from None
    return header, [row for row in reader if row]


def load_csv(path, schema: CsvSchema) -> Dataset:
    """Read, coerce and binarize a CSV; unparseable rows are dropped and counted.

    The returned dataset is standardized on all loaded rows; :func:`split_80_20`
    refits the scaler on the training part.
    """
    header, rows = _read_rows(path)
    col = {name: i for i, name in enumerate(header)}
    needed = [n for n, _ in schema.features] + [schema.sensitive, schema.outcome,
                                                 *schema.latent_columns, *schema.noise_columns]
    missing = [n for n in needed if n not in col]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {missing}")

    missing_tok = set(schema.missing_tokens)
    cat_levels: dict[str, list[str]] = {}
    for name, kind in schema.features:
        if kind == CATEGORICAL:
            vals = {r[col[name]].strip() for r in rows if len(r) == len(header)}
            cat_levels[name] = sorted(vals - missing_tok)

    x_names, x_kinds = [], []
    for name, kind in schema.features:
        if kind == CATEGORICAL:
            for level in cat_levels[name]:
                x_names.append(f"{name}={level}")
                x_kinds.append(BINARY)
        else:
            x_names.append(name)
            x_kinds.append(kind)

    xs, As, ys, us, es = [], [], [], [], []
    dropped = 0
    for r in rows:
        try:
            if len(r) != len(header):
                raise ValueError("ragged row")
            cells = {n: r[col[n]].strip() for n in needed}
            if any(cells[n] in missing_tok for n in needed):
                raise ValueError("missing value")
            feats = []
            for name, kind in schema.features:
                if kind == CATEGORICAL:
                    feats += [float(cells[name] == lv) for lv in cat_levels[name]]
                else:
                    v = float(cells[name])
                    if not math.isfinite(v) or (kind == BINARY and v not in (0.0, 1.0)):
                        raise ValueError(cells[name])
                    feats.append(v)
            a = apply_rule(schema.sensitive_rule, cells[schema.sensitive])
            y = apply_rule(schema.outcome_rule, cells[schema.outcome])
            u = [float(cells[c]) for c in schema.latent_columns]
            e = [float(cells[c]) for c in schema.noise_columns]
        except ValueError:
            dropped += 1
            continue
        xs.append(feats); As.append(a); ys.append(y); us.append(u); es.append(e)

    if not xs:
        raise DataError(f"{path}: no usable rows ({dropped} dropped)")
    a_arr, y_arr = np.array(As), np.array(ys)
    a_kind = BINARY if schema.sensitive_rule is not None or set(np.unique(a_arr)) <= {0.0, 1.0} else CONTINUOUS
    y_kind = BINARY if schema.outcome_rule is not None or set(np.unique(y_arr)) <= {0.0, 1.0} else CONTINUOUS
    ds = make_dataset(
        np.array(xs), a_arr, y_arr,
        Schema(tuple(x_names), tuple(x_kinds), a_kind, y_kind, schema.sensitive, schema.outcome),
        u_true=np.array(us) if schema.latent_columns else None,
        noise=np.array(es) if schema.noise_columns else None,
    )
    ds.meta.update(kind="csv", path=str(path), dropped_rows=dropped)
    return ds


def synthetic_csv_schema(binary: bool = False) -> CsvSchema:
    extra = ("A_cont", "Y_cont") if binary else ()
    return CsvSchema(
        tuple((n, CONTINUOUS) for n in SYN_X_NAMES), "A", "Y",
        latent_columns=SYN_U_NAMES, noise_columns=SYN_NOISE_NAMES + extra,
    )


def write_csv(ds: Dataset, path, header_comment: str | None = None) -> None:
    """Write raw columns (x..., A, Y, then latent and noise columns when present)."""
    names = list(ds.schema.x_names) + [ds.schema.a_name, ds.schema.y_name]
    cols = [ds.x_raw, ds.a_raw[:, None], ds.y_raw[:, None]]
    if ds.u_true is not None:
        names += list(SYN_U_NAMES)
        cols.append(ds.u_true)
    if ds.noise is not None:
        names += list(SYN_NOISE_NAMES)
        cols.append(ds.noise)
    if ds.a_source is not None:
        names += ["A_cont", "Y_cont"]
        cols += [ds.a_source[:, None], ds.y_source[:, None]]
    table = np.hstack(cols)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in table:
            w.writerow([repr(float(v)) for v in row])


def load_synthetic_csv(path, binary: bool = False) -> Dataset:
    """Reload a file written by :func:`write_csv` for a synthetic dataset."""
    ds = load_csv(path, synthetic_csv_schema(binary))
    if binary:
        extra = ds.noise[:, 5:]
        ds.noise = ds.noise[:, :5]
        ds.a_source, ds.y_source = extra[:, 0].copy(), extra[:, 1].copy()
        ds.schema = synthetic_schema(True)
        ds.scaler = Scaler.fit(ds.schema, ds.x_raw, ds.a_raw, ds.y_raw)
        ds.a_bounds = (0.0, 1.0)
    else:
        ds.schema = synthetic_schema(False)
    ds.meta["kind"] = "synthetic_binary" if binary else "synthetic_continuous"
    return ds
