"""Evaluators for the label-flip and data-perturbation convergence bounds.

These compute trend diagnostics, not certified bounds: every big-O constant
is taken as 1 and log means the natural logarithm. ``measure_inputs``
bridges measured gradient spectra into the bound symbols; the purely
theoretical fields (perturbation errors, margins, targets) stay with the
caller.
"""

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .linalg import singular_values


class BadInputError(ValueError):
    pass


class EmptySelectionError(ValueError):
    pass


@dataclass
class BoundInputs:
    r_min: float = 1.0        # smallest cluster size behind the selection
    sigma_min: float = 0.0    # smallest singular value of the selected rows
    jac_norm: float = 0.0     # spectral norm of the full gradient matrix
    eps: float = 0.0          # Jacobian approximation error
    k: int = 1                # coreset size
    n: int = 1                # pool size
    rho: float = 0.1          # noisy-label fraction inside the coreset
    delta: float = 1.0        # label margin (flip) or perturbed fraction
    eta: float = 0.01         # learning rate used for the iteration floor
    E_min: float = 0.0        # perturbation error on the smallest singular value
    E_max: float = 0.0        # perturbation error on the largest singular value
    E_J1: float = 0.0         # Jacobian perturbation magnitude
    E_J2: float = 0.0         # average-Jacobian perturbation magnitude
    r0_norm: float = 1.0      # initial residual norm
    nu: float = 1e-3          # target residual norm

    def validate(self):
        for name in ("r_min", "sigma_min", "jac_norm", "eps", "eta",
                     "E_min", "E_max", "E_J1", "E_J2", "r0_norm", "nu"):
            if getattr(self, name) < 0:
                raise BadInputError(f"{name} must be nonnegative")
        if not 0.0 <= self.rho <= 1.0:
            raise BadInputError("rho must lie in [0, 1]")
        if not 0.0 <= self.delta <= 1.0:
            raise BadInputError("delta must lie in [0, 1]")
        if self.k > self.n:
            raise BadInputError("k cannot exceed n")
        if self.k < 1 or self.n < 1:
            raise BadInputError("k and n must be positive")


@dataclass
class BoundReport:
    alpha: float
    beta: float
    eps_ceiling: float
    eta_suggested: float
    iteration_floor: float    # NaN when infeasible or undefined
    bound_kind: str           # label_flip | perturbation
    feasible: bool

    def to_dict(self):
        return {"alpha": self.alpha, "beta": self.beta,
                "eps_ceiling": self.eps_ceiling,
                "eta_suggested": self.eta_suggested,
                "iteration_floor": self.iteration_floor,
                "bound_kind": self.bound_kind, "feasible": self.feasible}


def _safe_div(num, den):
    return num / den if den > 0 else math.nan


def eval_label_flip_bound(inp: BoundInputs) -> BoundReport:
    """Label-flip bound: alpha, beta, the approximation-error ceiling, the
    suggested step size, and the iteration floor; feasible iff rho < delta/8."""
    inp.validate()
    if inp.rho <= 0:
        raise BadInputError("rho must be positive for the label-flip bound")
    if inp.eta <= 0:
        raise BadInputError("eta must be positive")
    alpha = math.sqrt(inp.r_min) * inp.sigma_min
    beta = inp.jac_norm + inp.eps
    log_k = math.log(math.sqrt(inp.k) / inp.rho)
    eps_ceiling = _safe_div(inp.delta * alpha ** 2, inp.k * beta * log_k)
    eta_suggested = _safe_div(1.0, 2.0 * beta ** 2)
    iteration_floor = _safe_div(math.log(math.sqrt(inp.n) / inp.rho),
                                inp.eta * alpha ** 2)
    return BoundReport(alpha=alpha, beta=beta, eps_ceiling=eps_ceiling,
                       eta_suggested=eta_suggested,
                       iteration_floor=iteration_floor,
                       bound_kind="label_flip", feasible=inp.rho < inp.delta / 8.0)


def eval_perturbation_bound(inp: BoundInputs) -> BoundReport:
    """Data-perturbation bound. delta is the perturbed-data fraction; the
    published expression divides by log(delta), which is negative on (0, 1),
    so its magnitude is used. Feasibility additionally requires the
    iteration-floor denominator to stay positive."""
    inp.validate()
    if inp.nu <= 0 or inp.r0_norm <= 0:
        raise BadInputError("nu and r0_norm must be positive")
    if inp.eta <= 0:
        raise BadInputError("eta must be positive")
    alpha = math.sqrt(inp.r_min) * inp.sigma_min - inp.E_min
    beta = inp.jac_norm + inp.eps + inp.E_max
    log_delta = abs(math.log(inp.delta)) if 0.0 < inp.delta < 1.0 else math.nan
    eps_ceiling = (_safe_div(inp.delta * alpha ** 2, inp.k * beta * log_delta)
                   if not math.isnan(log_delta) else math.nan)
    eta_suggested = _safe_div(1.0, 2.0 * beta ** 2)
    denom = (alpha / 2.0 + inp.E_J2 * alpha + inp.E_J1 * alpha
             - inp.eta * inp.E_J2 * beta ** 3 / 2.0
             - inp.eta * inp.E_J1 * beta / 3.0)
    feasible = denom > 0.0 and alpha > 0.0
    if feasible:
        iteration_floor = math.log(inp.r0_norm / inp.nu) / (inp.eta * denom)
    else:
        iteration_floor = math.nan
    return BoundReport(alpha=alpha, beta=beta, eps_ceiling=eps_ceiling,
                       eta_suggested=eta_suggested,
                       iteration_floor=iteration_floor,
                       bound_kind="perturbation", feasible=feasible)


def measure_inputs(g, clusters=None, selection=None,
                   base: Optional[BoundInputs] = None) -> BoundInputs:
    """Fill the measurable bound symbols from a gradient matrix and selection.

    sigma_min comes from the selected-row submatrix, jac_norm from the full
    matrix, r_min from the selection's cluster provenance (all of it, when
    no clustering was involved). Theory-only fields keep their defaults or
    the values in ``base``.
    """
    if selection is None or len(selection.ids) == 0:
        raise EmptySelectionError("measure_inputs needs a nonempty selection")
    rows = np.asarray(getattr(g, "values", g), dtype=np.float64)
    sel_rows = rows[np.asarray(selection.ids, dtype=np.int64)]
    sv_sel = singular_values(sel_rows)
    sv_full = singular_values(rows)
    if selection.cluster_provenance is not None and len(selection.cluster_provenance):
        counts = np.bincount(selection.cluster_provenance)
        r_min = int(counts[counts > 0].min())
    elif clusters is not None and len(clusters.kept):
        r_min = int(clusters.sizes[clusters.kept].min())
    else:
        r_min = len(selection.ids)
    out = base if base is not None else BoundInputs()
    return replace(out, r_min=float(r_min), sigma_min=float(sv_sel[-1]),
                   jac_norm=float(sv_full[0]), k=len(selection.ids),
                   n=rows.shape[0])
