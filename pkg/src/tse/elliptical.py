"""Elliptical joints with normal or Student-t kernels.

Everything downstream (truncated moments, selection families, censoring
identities, risk measures) reduces to a handful of operations on a jointly
elliptical vector: marginalisation, conditioning, Mahalanobis distances,
densities and rectangle probabilities.  This module provides those
operations for the two kernels supported by the engine.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import gammaln, log_ndtr, ndtr, ndtri, stdtr, stdtrit

from .errors import NumericalError, SpecError
from .qmc import rect_prob_qmc

__all__ = [
    "NORMAL",
    "STUDENT_T",
    "EllipticalJoint",
    "IndexPartition",
    "RectangleProbSettings",
    "TruncationBox",
    "box",
    "normal_joint",
    "student_joint",
    "marginal",
    "conditional",
    "mahalanobis",
    "nu_factor",
    "density",
    "log_density",
    "rectangle_prob",
    "univariate_cdf",
    "univariate_quantile",
]

NORMAL = "normal"
STUDENT_T = "student_t"

_SYM_RTOL = 1e-12


def _as_vector(x, name="vector"):
    v = np.atleast_1d(np.asarray(x, dtype=float))
    if v.ndim != 1:
        raise SpecError(f"{name} must be one-dimensional")
    return v


def _as_matrix(x, name="matrix"):
    m = np.atleast_2d(np.asarray(x, dtype=float))
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise SpecError(f"{name} must be square")
    return m


@dataclass(frozen=True)
class TruncationBox:
    """Coordinatewise truncation limits; entries may be infinite.

    ``lower[i] == upper[i]`` marks a degenerate (zero-width) coordinate and
    is only accepted when ``allow_degenerate`` is set.
    """

    lower: np.ndarray
    upper: np.ndarray
    allow_degenerate: bool = False

    def __post_init__(self):
        lo = _as_vector(self.lower, "lower")
        hi = _as_vector(self.upper, "upper")
        if lo.size != hi.size:
            raise SpecError("lower and upper must have the same length")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
            raise SpecError("box limits must not be NaN")
        if np.any(lo == np.inf) or np.any(hi == -np.inf):
            raise SpecError("lower limits must be < +inf and upper limits > -inf")
        if np.any(lo > hi):
            raise SpecError("box requires lower <= upper in every coordinate")
        if not self.allow_degenerate and np.any(lo == hi):
            raise SpecError("degenerate coordinate (lower == upper) must be flagged")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    def is_degenerate(self) -> np.ndarray:
        return self.lower == self.upper

    def both_infinite(self) -> np.ndarray:
        return np.isinf(self.lower) & np.isinf(self.upper)

    def fully_finite(self) -> np.ndarray:
        return np.isfinite(self.lower) & np.isfinite(self.upper)

    def subset(self, idx) -> "TruncationBox":
        idx = np.asarray(idx, dtype=int)
        return TruncationBox(self.lower[idx], self.upper[idx],
                             allow_degenerate=self.allow_degenerate)


def box(lower, upper) -> TruncationBox:
    """Shorthand constructor used throughout the test-suite and CLI."""
    return TruncationBox(lower, upper)


@dataclass(frozen=True)
class IndexPartition:
    """A split of ``0..dim-1`` into two disjoint, exhaustive index lists."""

    set_one: tuple
    set_two: tuple

    def __post_init__(self):
        one = tuple(int(i) for i in self.set_one)
        two = tuple(int(i) for i in self.set_two)
        merged = sorted(one + two)
        if len(set(one)) != len(one) or len(set(two)) != len(two):
            raise SpecError("partition sets must not repeat indices")
        if set(one) & set(two):
            raise SpecError("partition sets must be disjoint")
        if merged != list(range(len(merged))):
            raise SpecError("partition must cover 0..dim-1 exactly")
        object.__setattr__(self, "set_one", one)
        object.__setattr__(self, "set_two", two)


@dataclass(frozen=True)
class RectangleProbSettings:
    """Budget and determinism knobs for the QMC rectangle integrator."""

    max_points: int = 20_000
    target_abs_error: float = 1e-6
    seed: int = 7
    num_shifts: int = 12

    def __post_init__(self):
        if self.max_points < 1000:
            raise SpecError("max_points must be at least 1000")
        if self.target_abs_error <= 0:
            raise SpecError("target_abs_error must be positive")
        if self.num_shifts < 8:
            raise SpecError("num_shifts must be at least 8")


DEFAULT_SETTINGS = RectangleProbSettings()


@dataclass(frozen=True)
class EllipticalJoint:
    """Location/dispersion pair with a normal or Student-t kernel."""

    family: str
    xi: np.ndarray
    omega: np.ndarray
    nu: Optional[float] = None

    def __post_init__(self):
        if self.family not in (NORMAL, STUDENT_T):
            raise SpecError(f"unknown kernel family {self.family!r}")
        xi = _as_vector(self.xi, "xi")
        omega = _as_matrix(self.omega, "omega")
        if omega.shape[0] != xi.size:
            raise SpecError("location and dispersion dimensions disagree")
        sym_err = np.abs(omega - omega.T).max()
        sym_scale = max(np.abs(omega).max(), 1.0)
        if sym_err > _SYM_RTOL * sym_scale:
            raise SpecError("dispersion matrix is not symmetric")
        omega = 0.5 * (omega + omega.T)
        try:
            np.linalg.cholesky(omega)
        except np.linalg.LinAlgError:
            raise NumericalError("dispersion matrix is not positive definite")
        if self.family == STUDENT_T:
            if self.nu is None or not self.nu > 0:
                raise SpecError("Student-t kernel requires nu > 0")
            object.__setattr__(self, "nu", float(self.nu))
        elif self.nu is not None:
            raise SpecError("normal kernel takes no degrees of freedom")
        xi.flags.writeable = False
        omega.flags.writeable = False
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "omega", omega)

    @property
    def dim(self) -> int:
        return self.xi.size

    def with_params(self, xi, omega) -> "EllipticalJoint":
        return EllipticalJoint(self.family, np.array(xi), np.array(omega), self.nu)


def normal_joint(xi, omega) -> EllipticalJoint:
    return EllipticalJoint(NORMAL, np.array(xi, dtype=float), np.array(omega, dtype=float))


def student_joint(xi, omega, nu) -> EllipticalJoint:
    return EllipticalJoint(STUDENT_T, np.array(xi, dtype=float),
                           np.array(omega, dtype=float), float(nu))


def _check_indices(idx, dim, name) -> np.ndarray:
    idx = np.atleast_1d(np.asarray(idx, dtype=int))
    if idx.size == 0:
        raise SpecError(f"{name} index list must be nonempty")
    if np.any(idx < 0) or np.any(idx >= dim):
        raise SpecError(f"{name} index out of range for dimension {dim}")
    if len(set(idx.tolist())) != idx.size:
        raise SpecError(f"{name} index list must not repeat indices")
    return idx


def marginal(joint: EllipticalJoint, keep: Sequence[int]) -> EllipticalJoint:
    """Marginal law of the coordinates in ``keep`` (order preserved).

    Both kernels are closed under marginalisation with unchanged degrees of
    freedom, so this is a plain subset of the location and dispersion.
    """
    keep = _check_indices(keep, joint.dim, "keep")
    xi = joint.xi[keep]
    omega = joint.omega[np.ix_(keep, keep)]
    return EllipticalJoint(joint.family, xi, omega, joint.nu)


def conditional(joint: EllipticalJoint, given: Sequence[int], value) -> EllipticalJoint:
    """Law of the remaining coordinates given exact values for ``given``.

    The normal kernel keeps its Schur-complement dispersion unchanged; the
    Student-t kernel gains ``len(given)`` degrees of freedom and its
    dispersion rescales by ``(nu + delta) / (nu + len(given))`` where
    ``delta`` is the Mahalanobis distance of the conditioning value under
    the given-block marginal.
    """
    given = _check_indices(given, joint.dim, "given")
    if given.size >= joint.dim:
        raise SpecError("conditioning must leave at least one coordinate")
    value = _as_vector(value, "value")
    if value.size != given.size:
        raise SpecError("conditioning value length must match index list")
    if not np.all(np.isfinite(value)):
        raise SpecError("conditioning value must be finite")

    keep = np.array([i for i in range(joint.dim) if i not in set(given.tolist())])
    o_gg = joint.omega[np.ix_(given, given)]
    o_kg = joint.omega[np.ix_(keep, given)]
    o_kk = joint.omega[np.ix_(keep, keep)]
    try:
        solve = np.linalg.solve(o_gg, value - joint.xi[given])
        gain = np.linalg.solve(o_gg, o_kg.T).T
    except np.linalg.LinAlgError:
        raise NumericalError("given-block dispersion is singular")
    xi = joint.xi[keep] + o_kg @ np.linalg.solve(o_gg, value - joint.xi[given])
    schur = o_kk - gain @ o_kg.T
    schur = 0.5 * (schur + schur.T)
    if joint.family == NORMAL:
        return EllipticalJoint(NORMAL, xi, schur)
    r2 = given.size
    delta = float((value - joint.xi[given]) @ solve)
    factor = (joint.nu + delta) / (joint.nu + r2)
    return EllipticalJoint(STUDENT_T, xi, factor * schur, joint.nu + r2)


def mahalanobis(joint: EllipticalJoint, x) -> float:
    """Squared scaled distance ``(x - xi)' omega^{-1} (x - xi)``."""
    x = _as_vector(x, "x")
    if x.size != joint.dim:
        raise SpecError("point dimension does not match the joint")
    diff = x - joint.xi
    try:
        sol = np.linalg.solve(joint.omega, diff)
    except np.linalg.LinAlgError:
        raise NumericalError("dispersion matrix is singular")
    return float(max(diff @ sol, 0.0))


def nu_factor(joint: EllipticalJoint, x) -> float:
    """Squared conditional-scale factor ``(nu + dim) / (nu + mahalanobis)``.

    Callers that need the unsquared factor take the square root.
    """
    if joint.family != STUDENT_T:
        raise SpecError("nu_factor is defined for the Student-t kernel only")
    return (joint.nu + joint.dim) / (joint.nu + mahalanobis(joint, x))


def log_density(joint: EllipticalJoint, x) -> float:
    """Log density at ``x``, evaluated kernel-appropriately in log space."""
    x = _as_vector(x, "x")
    if x.size != joint.dim:
        raise SpecError("point dimension does not match the joint")
    p = joint.dim
    try:
        chol = np.linalg.cholesky(joint.omega)
    except np.linalg.LinAlgError:
        raise NumericalError("dispersion matrix is not positive definite")
    half_logdet = float(np.sum(np.log(np.diag(chol))))
    z = np.linalg.solve(chol, x - joint.xi)
    delta = float(z @ z)
    if joint.family == NORMAL:
        return -0.5 * p * np.log(2.0 * np.pi) - half_logdet - 0.5 * delta
    nu = joint.nu
    return float(
        gammaln(0.5 * (nu + p)) - gammaln(0.5 * nu)
        - 0.5 * p * np.log(nu * np.pi) - half_logdet
        - 0.5 * (nu + p) * np.log1p(delta / nu)
    )


def density(joint: EllipticalJoint, x) -> float:
    return float(np.exp(log_density(joint, x)))


def _uv_cdf(z, nu=None):
    """Univariate standard cdf for either kernel; vectorised."""
    if nu is None:
        return ndtr(z)
    scalar = np.isscalar(z) or np.ndim(z) == 0
    z = np.atleast_1d(np.asarray(z, dtype=float))
    out = np.empty_like(z)
    neg_inf = z == -np.inf
    pos_inf = z == np.inf
    finite = ~(neg_inf | pos_inf)
    out[neg_inf] = 0.0
    out[pos_inf] = 1.0
    if np.any(finite):
        out[finite] = stdtr(nu, z[finite])
    if scalar:
        return float(out[0])
    return out


def _uv_log_cdf(z, nu=None):
    """Log of the univariate standard cdf; exact deep into the lower tail."""
    if nu is None:
        return log_ndtr(z)
    p = _uv_cdf(z, nu)
    with np.errstate(divide="ignore"):
        return np.log(p)


def univariate_cdf(family: str, z, nu: Optional[float] = None):
    """Standardised cdf for the given kernel family."""
    if family == NORMAL:
        return _uv_cdf(z, None)
    if family == STUDENT_T:
        if nu is None or nu <= 0:
            raise SpecError("Student-t cdf requires nu > 0")
        return _uv_cdf(z, nu)
    raise SpecError(f"unknown kernel family {family!r}")


def univariate_quantile(family: str, prob, nu: Optional[float] = None):
    """Inverse of :func:`univariate_cdf` on the open unit interval."""
    prob_arr = np.asarray(prob, dtype=float)
    if np.any(prob_arr <= 0.0) or np.any(prob_arr >= 1.0):
        raise SpecError("quantile argument must lie strictly inside (0, 1)")
    if family == NORMAL:
        out = ndtri(prob_arr)
    elif family == STUDENT_T:
        if nu is None or nu <= 0:
            raise SpecError("Student-t quantile requires nu > 0")
        out = stdtrit(nu, prob_arr)
    else:
        raise SpecError(f"unknown kernel family {family!r}")
    if out.ndim == 0:
        return float(out)
    return out


def rectangle_prob(joint: EllipticalJoint, tbox: TruncationBox,
                   settings: RectangleProbSettings = DEFAULT_SETTINGS):
    """``P(lower <= X <= upper)`` with a randomized-QMC error estimate.

    Coordinates whose limits are infinite on both sides are marginalised
    out before integration.  One remaining dimension is handled exactly via
    the univariate cdf; higher dimensions go through the separation-of-
    variables QMC integrator.  Results are deterministic for a fixed seed.
    """
    if tbox.dim != joint.dim:
        raise SpecError("box dimension does not match the joint")
    if np.any(tbox.lower > tbox.upper):
        raise SpecError("box requires lower <= upper")
    keep = np.flatnonzero(~tbox.both_infinite())
    if keep.size == 0:
        return 1.0, 0.0
    sub = marginal(joint, keep)
    lo = tbox.lower[keep] - sub.xi
    hi = tbox.upper[keep] - sub.xi
    return rect_prob_qmc(
        sub.omega, lo, hi, df=sub.nu,
        max_points=settings.max_points,
        num_shifts=settings.num_shifts,
        seed=settings.seed,
        target_abs_error=settings.target_abs_error,
    )


def _uv_interval_logprob(lo, hi, nu=None):
    """Log of a univariate interval probability, stable in far tails.

    Works in whichever tail holds the interval: the difference of cdfs is
    formed as ``logcdf(hi) + log1p(-exp(logcdf(lo) - logcdf(hi)))`` after
    reflecting right-tail intervals.  Used by the out-of-bounds detector.
    """
    if lo == -np.inf and hi == np.inf:
        return 0.0
    # Reflect so the interval sits in the lower tail (or straddles 0).
    if lo > 0 and np.isfinite(lo):
        lo, hi = -hi, -lo
    la = _uv_log_cdf(np.array(hi), nu)
    lb = _uv_log_cdf(np.array(lo), nu) if lo > -np.inf else -np.inf
    if lb == -np.inf:
        return float(la)
    d = lb - la
    if d > -1e-12:
        return -np.inf
    if d > -0.693147:
        return float(la + np.log(-np.expm1(d)))
    return float(la + np.log1p(-np.exp(d)))
