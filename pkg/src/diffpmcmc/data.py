"""Dataset container, CSV ingestion and synthetic data."""

from __future__ import annotations

import csv
import operator
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from diffpmcmc.errors import ValidationError


@dataclass
class Dataset:
    """Rows ``z_k = (y_k, x_k)`` in file order.

    ``X`` includes the intercept column (all ones) when ``intercept`` is set,
    always at position 0.
    """

    y: np.ndarray
    X: np.ndarray
    columns: list[str]
    response: str = "y"
    intercept: bool = True
    extra: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.y = np.ascontiguousarray(self.y, dtype=float)
        self.X = np.ascontiguousarray(self.X, dtype=float)
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise ValidationError(f"inconsistent shapes y{self.y.shape} X{self.X.shape}")
        if len(self.columns) != self.X.shape[1]:
            raise ValidationError("one column name per covariate is required")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def Z(self) -> np.ndarray:
        """``(n, p+1)`` matrix with the response in column 0."""
        return np.column_stack([self.y, self.X])

    @property
    def exempt_columns(self) -> list[int]:
        """Columns of :attr:`Z` that standardization must pass through."""
        return [1] if self.intercept else []

    def column(self, name: str) -> np.ndarray:
        if name == self.response:
            return self.y
        if name in self.columns:
            return self.X[:, self.columns.index(name)]
        if name in self.extra:
            return self.extra[name]
        raise ValidationError(f"unknown column {name!r}")

    def is_binary(self) -> bool:
        return bool(np.all((self.y == 0.0) | (self.y == 1.0)))


def ingest_csv(path, response: str = "y", intercept: bool = True, binary: bool = False) -> Dataset:
    """Read a comma-separated file with a header row.

    Lines starting with ``#`` are skipped.  Every cell must be numeric.
    Row order is preserved exactly.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = csv.reader(line for line in fh if not line.startswith("#"))
        try:
            header = next(rows)
        except StopIteration:
            raise ValidationError(f"{path}: missing header row") from None
        header = [h.strip() for h in header]
        if not header or all(_is_number(h) for h in header):
            raise ValidationError(f"{path}: missing header row")
        if response not in header:
            raise ValidationError(f"{path}: response column {response!r} not in header")
        values = []
        for lineno, row in enumerate(rows, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise ValidationError(f"{path}: data row {lineno} has {len(row)} cells, expected {len(header)}")
            parsed = []
            for col, cell in zip(header, row):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise ValidationError(
                        f"{path}: non-numeric cell {cell!r} at data row {lineno}, column {col!r}"
                    ) from None
            values.append(parsed)
    table = np.array(values, dtype=float).reshape(len(values), len(header))
    ri = header.index(response)
    y = table[:, ri]
    cov_names = [h for i, h in enumerate(header) if i != ri]
    X = table[:, [i for i in range(len(header)) if i != ri]]
    if intercept:
        X = np.column_stack([np.ones(len(y)), X])
        cov_names = ["intercept"] + cov_names
    data = Dataset(y=y, X=X, columns=cov_names, response=response, intercept=intercept)
    if binary and not data.is_binary():
        raise ValidationError(f"{path}: response {response!r} is not 0/1")
    return data


def write_csv(data: Dataset, path) -> None:
    """Write ``data`` so that :func:`ingest_csv` reproduces it exactly."""
    cols = data.columns[1:] if data.intercept else data.columns
    X = data.X[:, 1:] if data.intercept else data.X
    with Path(path).open("w", newline="") as fh:
        fh.write(",".join([data.response, *cols]) + "\n")
        for yi, xi in zip(data.y, X):
            fh.write(",".join(repr(float(v)) for v in (yi, *xi)) + "\n")


def synth_logistic(n: int, p: int, beta_true, seed: int) -> Dataset:
    """Synthetic logistic data with iid standard-normal covariates.

    ``p`` counts the intercept.  Responses follow
    ``P(y=1|x) = 1/(1 + exp(x @ beta_true))``.
    """
    beta_true = np.asarray(beta_true, dtype=float)
    if n < 1 or beta_true.shape != (p,):
        raise ValidationError(f"need n >= 1 and len(beta_true) == p, got n={n}, p={p}")
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
    prob_one = 1.0 / (1.0 + np.exp(X @ beta_true))
    y = (rng.random(n) < prob_one).astype(float)
    names = ["intercept"] + [f"x{j}" for j in range(1, p)]
    return Dataset(y=y, X=X, columns=names)


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


_OPS = {
    "==": operator.eq,
    "!=": operator.ne,
    "<=": operator.le,
    ">=": operator.ge,
    "<": operator.lt,
    ">": operator.gt,
}
_PREDICATE = re.compile(r"^\s*([A-Za-z_][\w.]*)\s*(==|!=|<=|>=|<|>)\s*([-+0-9.eE]+)\s*$")


def select_rows(data: Dataset, predicate: str | None) -> np.ndarray:
    """Row indices satisfying a comparison such as ``"y==1"``.

    An empty or ``None`` predicate selects nothing.
    """
    if not predicate:
        return np.empty(0, dtype=np.int64)
    m = _PREDICATE.match(predicate)
    if m is None:
        raise ValidationError(f"cannot parse row predicate {predicate!r}")
    name, op, value = m.groups()
    mask = _OPS[op](data.column(name), float(value))
    return np.flatnonzero(mask).astype(np.int64)
