"""Conditional-expectation identities used by interval-censored E-steps.

The key identity rewrites a truncated-selection expectation of
``g(Y) * density(selection threshold | Y) / survival(threshold | Y)`` as a
closed-form factor times a plain truncated-elliptical expectation of
``g``: the factor is the threshold density-to-mass ratio of the selection
block times the ratio of box masses under the limiting law and under the
selection law.  A conditional variant covers the case where part of the
outcome vector is observed exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .elliptical import (
    DEFAULT_SETTINGS,
    EllipticalJoint,
    RectangleProbSettings,
    TruncationBox,
    conditional,
    log_density,
    rectangle_prob,
)
from .errors import NumericalError, SpecError
from .selection import SelectionSpec, SutParams, build_selection
from .truncated import truncated_mean_cov

__all__ = ["GKind", "CensoredFactor", "censored_factor", "censored_factor_conditional"]

# Supported g shapes for the censored expectations: the constant one, the
# identity (first moment) and the outer square (second moment).
G_KINDS = ("one", "mean", "second")
GKind = str


@dataclass(frozen=True)
class CensoredFactor:
    """Everything needed to evaluate the censored-expectation identity.

    ``expectation(kind)`` returns the full right-hand side
    ``prob_ratio * eta * E[g(W)]`` where ``W`` is the limiting law
    truncated to the box.  ``limiting`` is ``None`` when conditioning has
    consumed the whole outcome block, in which case only ``kind="one"`` is
    meaningful and no box mass ratio is involved.
    """

    log_eta: float
    log_prob_ratio: float
    limiting: Optional[EllipticalJoint]
    box: Optional[TruncationBox]
    settings: RectangleProbSettings = DEFAULT_SETTINGS

    @property
    def eta(self) -> float:
        return float(np.exp(self.log_eta))

    @property
    def prob_ratio(self) -> float:
        return float(np.exp(self.log_prob_ratio))

    def scalar_factor(self) -> float:
        return float(np.exp(self.log_eta + self.log_prob_ratio))

    def truncated_limiting_moments(self):
        if self.limiting is None:
            raise SpecError("no outcome block remains after conditioning")
        return truncated_mean_cov(self.limiting, self.box, self.settings)

    def expectation(self, kind: GKind = "one"):
        """Right-hand side of the identity for g in {1, y, y y'}."""
        if kind not in G_KINDS:
            raise SpecError(f"g kind must be one of {G_KINDS}")
        factor = self.scalar_factor()
        if self.limiting is None:
            if kind != "one":
                raise SpecError("only the constant g remains for a fully observed block")
            return factor
        if kind == "one":
            return factor
        rep = self.truncated_limiting_moments()
        if kind == "mean":
            return factor * rep.require_mean()
        return factor * rep.require_second_moment()


def _as_spec(params: Union[SutParams, SelectionSpec]) -> SelectionSpec:
    if isinstance(params, SutParams):
        return build_selection(params)
    if isinstance(params, SelectionSpec):
        return params
    raise SpecError("expected SutParams or a SelectionSpec")


def _require_zero_threshold(spec: SelectionSpec):
    if spec.n_selection == 0:
        raise SpecError("censored identities need a selection block")
    if np.any(spec.selection_lower != 0.0) or np.any(np.isfinite(spec.selection_upper)):
        raise SpecError("censored identities hold for the selection rectangle [0, inf)^q")


def censored_factor(params: Union[SutParams, SelectionSpec],
                    tbox: Optional[TruncationBox],
                    settings: RectangleProbSettings = DEFAULT_SETTINGS,
                    ) -> CensoredFactor:
    """Factor of the censored-expectation identity for a truncated spec.

    The selection rectangle must be the positive orthant.  Both box masses
    are kept in log space so extreme extensions only degrade the reported
    ratio, not the computation.
    """
    spec = _as_spec(params)
    _require_zero_threshold(spec)
    q = spec.n_selection

    sel = spec.selection_marginal()
    zero = np.zeros(q)
    log_f0 = log_density(sel, zero)
    sel_box = TruncationBox(np.zeros(q), np.full(q, np.inf))
    p_sel, _ = rectangle_prob(sel, sel_box, settings)
    if p_sel <= 0.0:
        raise NumericalError("selection mass underflowed; identity factor is meaningless")
    log_eta = float(log_f0 - np.log(p_sel))

    limiting = conditional(spec.joint, np.arange(q), zero)
    if tbox is None:
        tbox = TruncationBox(np.full(spec.n_outcome, -np.inf),
                             np.full(spec.n_outcome, np.inf))
    p_w, _ = rectangle_prob(limiting, tbox, settings)
    aug = spec.augmented_box(tbox)
    p_aug, _ = rectangle_prob(spec.joint, aug, settings)
    with np.errstate(divide="ignore"):
        # P(box | selection law) = P(augmented box) / P(selection event).
        log_ratio = float(np.log(p_w) - (np.log(p_aug) - np.log(p_sel)))
    return CensoredFactor(log_eta, log_ratio, limiting, tbox, settings)


def censored_factor_conditional(params: Union[SutParams, SelectionSpec],
                                tbox: Optional[TruncationBox],
                                observed,
                                observed_values,
                                settings: RectangleProbSettings = DEFAULT_SETTINGS,
                                ) -> CensoredFactor:
    """Censored factor given exact values for part of the outcome block.

    Conditioning the joint on the observed coordinates produces another
    selection spec (same rectangle, reduced outcome block); the plain
    factor of that spec is the conditional identity.  Observing everything
    leaves only the scalar factor.
    """
    spec = _as_spec(params)
    _require_zero_threshold(spec)
    observed = np.atleast_1d(np.asarray(observed, dtype=int))
    values = np.atleast_1d(np.asarray(observed_values, dtype=float))
    if observed.size == 0:
        return censored_factor(spec, tbox, settings)
    if np.any(observed < 0) or np.any(observed >= spec.n_outcome):
        raise SpecError("observed index out of range for the outcome block")
    if values.size != observed.size:
        raise SpecError("observed values must match the observed index list")
    if tbox is not None:
        lo = tbox.lower[observed]
        hi = tbox.upper[observed]
        if np.any(values < lo) or np.any(values > hi):
            raise SpecError("observed values fall outside their box slice")

    q = spec.n_selection
    cond_joint = conditional(spec.joint, q + observed, values)
    remaining = np.array([i for i in range(spec.n_outcome)
                          if i not in set(observed.tolist())])
    if remaining.size == 0:
        # Fully observed outcome: only the density-to-mass factor survives.
        sel_star = cond_joint
        log_f0 = log_density(sel_star, np.zeros(q))
        sel_box = TruncationBox(np.zeros(q), np.full(q, np.inf))
        p_sel, _ = rectangle_prob(sel_star, sel_box, settings)
        if p_sel <= 0.0:
            raise NumericalError("conditional selection mass underflowed")
        return CensoredFactor(float(log_f0 - np.log(p_sel)), 0.0, None, None, settings)
    sub_spec = SelectionSpec(cond_joint, q, remaining.size,
                             spec.selection_lower, spec.selection_upper)
    sub_box = tbox.subset(remaining) if tbox is not None else None
    return censored_factor(sub_spec, sub_box, settings)
