"""Log-linear density surfaces on the mesh.

Formulas follow a small R-like grammar::

    D ~ 1
    D ~ depth + depth2 + distance_to_coast
    D ~ logdepth + s(depth, k = 6, fx = TRUE) + depth:distance_to_coast

Terms: ``1`` (intercept, always present exactly once), a covariate name
(linear), ``name2``/``name3`` (square/cube), ``log<name>`` (natural log),
``s(name, k = int, fx = TRUE)`` (fixed-df spline smooth), and ``a:b``
(product interaction).  Covariate names must not themselves end in a digit
or start with ``log``; the grammar claims those spellings.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline

from .geometry import Mesh
from .validation import DataError


class FormulaError(ValueError):
    """Raised for malformed density formulas; carries the offending position."""

    def __init__(self, message: str, position: int | None = None):
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)
        self.position = position


@dataclass(frozen=True)
class Term:
    kind: str                       # intercept | linear | power2 | power3 | log | smooth | interaction
    covariate: str | None = None
    covariate2: str | None = None   # interactions only
    k: int | None = None            # smooths only

    def __str__(self) -> str:
        if self.kind == "intercept":
            return "1"
        if self.kind == "linear":
            return self.covariate
        if self.kind == "power2":
            return f"{self.covariate}2"
        if self.kind == "power3":
            return f"{self.covariate}3"
        if self.kind == "log":
            return f"log{self.covariate}"
        if self.kind == "smooth":
            return f"s({self.covariate}, k = {self.k}, fx = TRUE)"
        if self.kind == "interaction":
            return f"{self.covariate}:{self.covariate2}"
        raise ValueError(f"unknown term kind {self.kind!r}")


@dataclass(frozen=True)
class ModelFormula:
    terms: tuple[Term, ...]

    def __str__(self) -> str:
        return "D ~ " + " + ".join(str(t) for t in self.terms)

    def covariate_names(self) -> list[str]:
        names: list[str] = []
        for t in self.terms:
            for name in (t.covariate, t.covariate2):
                if name is not None and name not in names:
                    names.append(name)
        return names

    def n_columns(self) -> int:
        """Number of design-matrix columns (smooths contribute k - 1)."""
        n = 0
        for t in self.terms:
            n += t.k - 1 if t.kind == "smooth" else 1
        return n


_SMOOTH_RE = re.compile(
    r"^s\(\s*([A-Za-z_]\w*)\s*,\s*k\s*=\s*(\d+)\s*(?:,\s*fx\s*=\s*(TRUE|FALSE)\s*)?\)$"
)
_NAME_RE = re.compile(r"^[A-Za-z_]\w*$")


def _parse_term(text: str, position: int) -> Term:
    if text == "1":
        return Term("intercept")
    m = _SMOOTH_RE.match(text)
    if m:
        name, k, fx = m.group(1), int(m.group(2)), m.group(3)
        if k < 3:
            raise FormulaError(f"smooth basis size k={k} is below the minimum of 3", position)
        if fx == "FALSE":
            raise FormulaError("penalized smooths (fx = FALSE) are not supported", position)
        return Term("smooth", covariate=name, k=k)
    if text.startswith("s("):
        raise FormulaError(f"malformed smooth term {text!r}", position)
    if ":" in text:
        left, _, right = text.partition(":")
        left, right = left.strip(), right.strip()
        if not (_NAME_RE.match(left) and _NAME_RE.match(right)):
            raise FormulaError(f"malformed interaction term {text!r}", position)
        return Term("interaction", covariate=left, covariate2=right)
    if not _NAME_RE.match(text):
        raise FormulaError(f"malformed term {text!r}", position)
    if text[-1] in "23" and len(text) > 1:
        return Term("power2" if text[-1] == "2" else "power3", covariate=text[:-1])
    if text.startswith("log") and len(text) > 3:
        return Term("log", covariate=text[3:])
    return Term("linear", covariate=text)


def parse_formula(text: str, known_covariates=None) -> ModelFormula:
    """Parse a density formula string into a normalized term list.

    The intercept is always included exactly once, first.  Duplicate terms
    collapse to their first occurrence.  If ``known_covariates`` is given,
    unresolvable names raise immediately rather than at design-matrix time.
    """
    if "~" not in text:
        raise FormulaError("formula must contain '~'", text.find("~"))
    lhs, _, rhs = text.partition("~")
    if lhs.strip() != "D":
        raise FormulaError(f"left-hand side must be 'D', got {lhs.strip()!r}", 0)
    terms: list[Term] = []
    cursor = text.index("~") + 1
    for chunk in rhs.split("+"):
        position = cursor + (len(chunk) - len(chunk.lstrip()))
        stripped = chunk.strip()
        cursor += len(chunk) + 1
        if not stripped:
            raise FormulaError("empty term", position)
        term = _parse_term(stripped, position)
        if term not in terms:
            terms.append(term)
    non_intercept = [t for t in terms if t.kind != "intercept"]
    formula = ModelFormula(tuple([Term("intercept")] + non_intercept))
    if known_covariates is not None:
        unknown = [c for c in formula.covariate_names() if c not in known_covariates]
        if unknown:
            raise FormulaError(f"unknown covariate(s) {unknown} in formula")
    return formula


def _spline_basis(x: np.ndarray, k: int) -> np.ndarray:
    """B-spline basis with ``k`` functions over the observed covariate range.

    Cubic for k >= 4, quadratic for k = 3 (a cubic basis needs at least four
    functions).  Interior knots sit at equally spaced quantiles of ``x``.
    """
    degree = 3 if k >= 4 else 2
    lo, hi = float(x.min()), float(x.max())
    if hi <= lo:
        raise DataError("smooth covariate is constant over the mesh; no basis exists")
    n_interior = k - (degree + 1)
    if n_interior > 0:
        q = np.arange(1, n_interior + 1) / (n_interior + 1)
        interior = np.quantile(x, q)
        if len(np.unique(np.concatenate([[lo], interior, [hi]]))) != n_interior + 2:
            raise DataError("smooth knots are not distinct; covariate too discrete for k")
    else:
        interior = np.empty(0)
    knots = np.concatenate([np.full(degree + 1, lo), interior, np.full(degree + 1, hi)])
    basis = BSpline.design_matrix(x, knots, degree, extrapolate=True).toarray()
    assert basis.shape[1] == k
    return basis


def _sum_to_zero(basis: np.ndarray) -> np.ndarray:
    """Project out the column-sum direction, dropping one basis column."""
    colsums = basis.sum(axis=0)
    q, _ = np.linalg.qr(colsums.reshape(-1, 1), mode="complete")
    return basis @ q[:, 1:]


@dataclass
class DesignMatrix:
    matrix: np.ndarray
    column_names: list[str]
    standardized: bool
    column_means: np.ndarray
    column_sds: np.ndarray
    formula: ModelFormula

    @property
    def n_columns(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class DensityParams:
    """Density coefficients on the log-link scale, aligned with the design."""

    beta: np.ndarray


def _coerce_beta(beta) -> np.ndarray:
    beta = getattr(beta, "beta", beta)
    return np.asarray(beta, dtype=float)


def build_design_matrix(formula: ModelFormula, mesh: Mesh, standardize: bool = True) -> DesignMatrix:
    """Realize a formula as numeric columns over the mesh cells.

    Smooth terms expand to a spline basis with a sum-to-zero constraint, so a
    ``k``-basis smooth contributes ``k - 1`` columns.  With ``standardize``,
    every non-intercept column is centered and scaled by its mesh mean/sd;
    the record of means and sds is kept for back-transforming coefficients.
    """
    columns: list[np.ndarray] = []
    names: list[str] = []
    for term in formula.terms:
        if term.kind == "intercept":
            columns.append(np.ones(mesh.n_cells))
            names.append("(Intercept)")
            continue
        x = mesh.covariate(term.covariate)
        if term.kind == "linear":
            columns.append(x.copy())
            names.append(term.covariate)
        elif term.kind == "power2":
            columns.append(x**2)
            names.append(f"{term.covariate}2")
        elif term.kind == "power3":
            columns.append(x**3)
            names.append(f"{term.covariate}3")
        elif term.kind == "log":
            if np.any(x <= 0):
                raise DataError(
                    f"log term requires positive {term.covariate!r} values everywhere"
                )
            columns.append(np.log(x))
            names.append(f"log{term.covariate}")
        elif term.kind == "interaction":
            other = mesh.covariate(term.covariate2)
            columns.append(x * other)
            names.append(f"{term.covariate}:{term.covariate2}")
        elif term.kind == "smooth":
            basis = _sum_to_zero(_spline_basis(x, term.k))
            for i in range(basis.shape[1]):
                columns.append(basis[:, i])
                names.append(f"s({term.covariate}).{i + 1}")
        else:
            raise ValueError(f"unknown term kind {term.kind!r}")

    matrix = np.column_stack(columns)
    if not np.all(np.isfinite(matrix)):
        raise DataError("design matrix contains non-finite entries")
    means = np.zeros(matrix.shape[1])
    sds = np.ones(matrix.shape[1])
    if standardize:
        for i in range(1, matrix.shape[1]):
            mean, sd = matrix[:, i].mean(), matrix[:, i].std(ddof=0)
            if sd == 0:
                raise DataError(f"column {names[i]!r} is constant; cannot standardize")
            matrix[:, i] = (matrix[:, i] - mean) / sd
            means[i], sds[i] = mean, sd
    return DesignMatrix(matrix, names, standardize, means, sds, formula)


def log_density(beta, design: DesignMatrix) -> np.ndarray:
    """Per-cell log density (calls per km^2 per study period)."""
    beta = _coerce_beta(beta)
    if beta.shape != (design.n_columns,):
        raise DataError(
            f"beta has length {beta.shape}, design has {design.n_columns} columns"
        )
    return design.matrix @ beta


def total_abundance(beta, design: DesignMatrix, mesh: Mesh) -> float:
    """Expected emitted-call count: cell areas (km^2) times cell densities."""
    area_km2 = mesh.areas / 1e6
    return float(area_km2 @ np.exp(log_density(beta, design)))


def unstandardized_coefficients(beta, design: DesignMatrix) -> np.ndarray:
    """Coefficients on the original covariate scale.

    Inverts the column standardization: slopes divide by the column sd and
    the intercept absorbs the means.
    """
    beta = _coerce_beta(beta)
    raw = beta / design.column_sds
    raw[0] = beta[0] - np.sum(beta[1:] * design.column_means[1:] / design.column_sds[1:])
    return raw
