"""Parametric score transformations and their inverses.

Each family is a set of maps ``f_t`` indexed by ``t`` in a parameter domain
``T``.  ``f_t`` sends a value of the transformed (rectified) score back to
raw-score space; both inverse directions are available in closed form:

- ``invert_in_v``: v with f_t(v) = w, used to rectify a raw score,
- ``invert_in_t``: t with f_t(phi) = s, used to move a raw-score quantile
  into the parameter domain.

For every family, v -> f_t(v) is strictly increasing for each admissible t,
and t -> f_t(phi) is continuous, strictly increasing and invertible on the
image of the raw-score domain.  The anchor ``phi`` is fixed per family.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

FAMILY_KINDS = ("additive", "multiplicative", "exp_additive", "exp_multiplicative")


class DomainError(ValueError):
    """An argument falls outside a family's parameter or score domain."""

    def __init__(self, message: str, recommended_shift: float | None = None):
        super().__init__(message)
        self.recommended_shift = recommended_shift


@dataclass(frozen=True)
class AdjustmentFamily:
    """One of the four shipped transformation families.

    phi is not user-settable: each family pins its own anchor (0 for the
    additive kinds, 1 for the multiplicative kinds), which removes a degree
    of freedom that is easy to misuse.
    """

    kind: str

    def __post_init__(self) -> None:
        if self.kind not in FAMILY_KINDS:
            raise ValueError(f"unknown adjustment family {self.kind!r}; choose from {FAMILY_KINDS}")

    @property
    def phi(self) -> float:
        return 0.0 if self.kind in ("additive", "exp_additive") else 1.0

    @property
    def t_lower(self) -> float:
        """Open lower bound of the parameter domain T (-inf means all reals)."""
        return 0.0 if self.kind in ("multiplicative", "exp_multiplicative") else -math.inf

    @property
    def v_lower(self) -> float:
        """Open lower bound of the admissible raw-score domain."""
        if self.kind == "additive":
            return -math.inf
        if self.kind == "multiplicative":
            return 0.0
        return 1.0  # both exponential kinds

    def describe_v_domain(self) -> str:
        lo = self.v_lower
        return "all reals" if lo == -math.inf else f"reals > {lo:g}"


def family(kind: str | AdjustmentFamily) -> AdjustmentFamily:
    return kind if isinstance(kind, AdjustmentFamily) else AdjustmentFamily(kind)


def _check_t(fam: AdjustmentFamily, t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if not np.isfinite(t).all():
        raise DomainError(f"{fam.kind}: parameter t must be finite")
    if fam.t_lower == 0.0 and np.any(t <= 0.0):
        raise DomainError(f"{fam.kind}: parameter t must be > 0 (got min {t.min():g})")
    return t


def forward(fam: str | AdjustmentFamily, t, v):
    """Evaluate f_t(v); maps a rectified-score value back to raw-score space."""
    fam = family(fam)
    t = _check_t(fam, t)
    v = np.asarray(v, dtype=np.float64)
    if fam.kind == "additive":
        out = t + v
    elif fam.kind == "multiplicative":
        out = t * v
    elif fam.kind == "exp_additive":
        out = np.exp(t + v)
    else:
        out = np.exp(t * v)
    return out if out.ndim else float(out)


def invert_in_v(fam: str | AdjustmentFamily, t, w):
    """Unique v with f_t(v) = w: the rectification of a raw score w.

    For the exponential kinds w must be positive (the range of f_t);
    violations usually mean the score shift was chosen too small.
    """
    fam = family(fam)
    t = _check_t(fam, t)
    w = np.asarray(w, dtype=np.float64)
    if fam.kind == "additive":
        out = w - t
    elif fam.kind == "multiplicative":
        out = w / t
    else:
        if np.any(w <= 0.0):
            raise DomainError(
                f"{fam.kind}: raw score must be > 0 to invert (got min {w.min():g}); "
                "increase score_shift"
            )
        out = np.log(w) - t if fam.kind == "exp_additive" else np.log(w) / t
    return out if out.ndim else float(out)


def invert_in_t(fam: str | AdjustmentFamily, s):
    """Unique t with f_t(phi) = s: moves a raw-score value into the t-domain."""
    fam = family(fam)
    s = np.asarray(s, dtype=np.float64)
    if fam.kind in ("additive", "multiplicative"):
        if fam.kind == "multiplicative" and np.any(s <= 0.0):
            raise DomainError(
                f"multiplicative: value must be > 0 (got min {s.min():g}); "
                "this family cannot host scores or quantiles that can reach 0 or below"
            )
        out = s
    else:
        if np.any(s <= 1.0):
            raise DomainError(
                f"{fam.kind}: value must be > 1 (got min {s.min():g}); "
                "add a score_shift so all raw scores exceed 1",
                recommended_shift=_shift_for(float(np.min(s)), 1.0),
            )
        out = np.log(s)
    out = np.asarray(out, dtype=np.float64)
    return out if out.ndim else float(out)


def _shift_for(min_score: float, bound: float, margin: float = 0.1) -> float:
    """Smallest shift, rounded up to one decimal, with min+shift >= bound+margin."""
    need = bound + margin - min_score
    return math.ceil(need * 10.0 - 1e-12) / 10.0


@dataclass(frozen=True)
class DomainCheck:
    ok: bool
    recommended_shift: float


def validate_domain(fam: str | AdjustmentFamily, scores) -> DomainCheck:
    """Check raw scores against the family's score domain.

    Returns ``ok=True`` when every score is admissible; otherwise the minimal
    uniform shift (rounded up to one decimal) that puts all shifted scores
    strictly inside the domain with a 0.1 margin, which keeps the transformed
    scores away from the singular boundary.
    """
    fam = family(fam)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("scores must be nonempty")
    if not np.isfinite(scores).all():
        raise DomainError(f"{fam.kind}: scores must be finite to validate the domain")
    lo = fam.v_lower
    if lo == -math.inf or float(scores.min()) > lo:
        return DomainCheck(ok=True, recommended_shift=0.0)
    return DomainCheck(ok=False, recommended_shift=_shift_for(float(scores.min()), lo))


def structural_conflict(fam: str | AdjustmentFamily, score_kind: str) -> str | None:
    """Detect score/family pairings that violate the domain by construction.

    Density-based scores (negative log-density) are unbounded below, so no
    finite shift makes them admissible for families requiring positive or
    greater-than-one scores; the fitted parameter can then leave T and the
    method silently loses conditional coverage.  Returns a message, or None.
    """
    fam = family(fam)
    if fam.v_lower != -math.inf and score_kind == "mixture_nll":
        return (
            f"score kind 'mixture_nll' is unbounded below and cannot satisfy the "
            f"{fam.kind} family's score domain ({fam.describe_v_domain()}) under any "
            "finite shift; use the additive family for density scores"
        )
    return None
