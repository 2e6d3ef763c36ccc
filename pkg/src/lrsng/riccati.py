"""Backward coupled Riccati recursion for the closed-loop gain pair.

Per stage, with ``Bc = [BL BR]`` and ``LamL = diag(SL, ML)``:

    GL = LamL + Bc' PL' Bc            KL = -GL^{-1} Bc' PL' A
    GR = SR + BL' PR' BL              KR = -GR^{-1} BL' PR' A
    FR = A + BL KR                    FL = A + Bc KL
    PL = A' PL' A + QL - KL' GL KL
    PR = A' PR' A + QR - KR' GR KR + p (FR' OR' FR - FR' PR' FR)
    OL = p FR' PL' FR + (1-p) FR' OL' FR + QL + KR' SL KR
    OR = FL' OR' FL + QR + KL' LamR KL

where primes denote stage ``k+1`` values.  Every right-hand side uses only
stage ``k+1`` data, so one step is explicit.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from ._linalg import PD_TOL, asymmetry, is_pd, is_psd, sym
from .model import composites

STEP_ASYM_TOL = 1e-9


class RiccatiError(RuntimeError):
    pass


class RiccatiInfeasible(RiccatiError):
    """A gain matrix GL or GR lost positive definiteness."""

    def __init__(self, stage, which):
        self.stage = stage
        self.which = which
        super().__init__(f"Riccati infeasible at stage {stage}: {which} not positive definite")


class StepResult(NamedTuple):
    PL: np.ndarray
    PR: np.ndarray
    OmegaL: np.ndarray
    OmegaR: np.ndarray
    KL: np.ndarray
    KR: np.ndarray
    GL: np.ndarray
    GR: np.ndarray


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    """Stacked sequences: PL..OmegaR have N+2 entries, gains and G's N+1."""

    PL: np.ndarray
    PR: np.ndarray
    OmegaL: np.ndarray
    OmegaR: np.ndarray
    KL: np.ndarray
    KR: np.ndarray
    GL: np.ndarray
    GR: np.ndarray

    @property
    def N(self):
        return self.KL.shape[0] - 1


def _pd_solve(G, rhs, stage, which):
    try:
        c = cho_factor(G, lower=True)
    except np.linalg.LinAlgError:
        raise RiccatiInfeasible(stage, which) from None
    if np.min(np.diag(c[0])) ** 2 <= PD_TOL:
        raise RiccatiInfeasible(stage, which)
    return cho_solve(c, rhs)


def _finish(X, label, stage):
    if asymmetry(X) > STEP_ASYM_TOL:
        raise RiccatiError(f"{label} asymmetric by {asymmetry(X):.3e} at stage {stage}")
    return sym(X)


def backward_step(spec, PL1, PR1, OL1, OR1, stage=None):
    comp = composites(spec)
    A, BL, Bc = spec.A, spec.BL, comp.B_cal
    p = spec.p

    GL = sym(comp.LambdaL + Bc.T @ PL1 @ Bc)
    GR = sym(spec.SR + BL.T @ PR1 @ BL)
    KL = -_pd_solve(GL, Bc.T @ PL1 @ A, stage, "GL")
    KR = -_pd_solve(GR, BL.T @ PR1 @ A, stage, "GR")
    FR = A + BL @ KR
    FL = A + Bc @ KL

    PL = A.T @ PL1 @ A + spec.QL - KL.T @ GL @ KL
    PR = (A.T @ PR1 @ A + spec.QR - KR.T @ GR @ KR
          + p * (FR.T @ OR1 @ FR - FR.T @ PR1 @ FR))
    OL = p * (FR.T @ PL1 @ FR) + (1 - p) * (FR.T @ OL1 @ FR) + spec.QL + KR.T @ spec.SL @ KR
    OR = FL.T @ OR1 @ FL + spec.QR + KL.T @ comp.LambdaR @ KL

    return StepResult(
        _finish(PL, "PL", stage), _finish(PR, "PR", stage),
        _finish(OL, "OmegaL", stage), _finish(OR, "OmegaR", stage),
        KL, KR, GL, GR,
    )


def solve(spec):
    """Run the recursion from the terminal weights at N+1 back to stage 0."""
    N, n = spec.N, spec.n
    m = spec.m1 + spec.m2
    PL = np.zeros((N + 2, n, n))
    PR = np.zeros((N + 2, n, n))
    OL = np.zeros((N + 2, n, n))
    OR = np.zeros((N + 2, n, n))
    KL = np.zeros((N + 1, m, n))
    KR = np.zeros((N + 1, spec.m1, n))
    GL = np.zeros((N + 1, m, m))
    GR = np.zeros((N + 1, spec.m1, spec.m1))
    PL[N + 1] = OL[N + 1] = spec.PL_term
    PR[N + 1] = OR[N + 1] = spec.PR_term
    for k in range(N, -1, -1):
        r = backward_step(spec, PL[k + 1], PR[k + 1], OL[k + 1], OR[k + 1], stage=k)
        PL[k], PR[k], OL[k], OR[k], KL[k], KR[k], GL[k], GR[k] = r
    for arr in (PL, PR, OL, OR, KL, KR, GL, GR):
        arr.setflags(write=False)
    return RiccatiSolution(PL, PR, OL, OR, KL, KR, GL, GR)


def initial_moments(spec):
    """Second moments of the initial estimate and error.

    With ``xhat_0 = g x0 + (1-g) mu`` and ``xtilde_0 = (1-g)(x0 - mu)``,
    ``g ~ Bernoulli(p)``: ``E[xhat xhat'] = p Sigma_x0 + mu mu'`` and
    ``E[xtilde xtilde'] = (1-p) Sigma_x0``.
    """
    Mhat = spec.p * spec.Sigma_x0 + np.outer(spec.mu, spec.mu)
    Mtilde = (1 - spec.p) * spec.Sigma_x0
    return Mhat, Mtilde


def analytic_costs(spec, sol):
    """Equilibrium costs (JL, JR) from the value matrices at stage 0 and the noise traces."""
    if sol.N != spec.N or sol.PL.shape[1] != spec.n:
        raise ValueError("solution does not match spec dimensions")
    Mhat, Mtilde = initial_moments(spec)
    p, W = spec.p, spec.Sigma_w
    tr = np.trace
    JL = tr(sol.PL[0] @ Mhat) + tr(sol.OmegaL[0] @ Mtilde)
    JR = tr(sol.OmegaR[0] @ Mhat) + tr(sol.PR[0] @ Mtilde)
    for k in range(spec.N + 1):
        JL += p * tr(W @ sol.PL[k + 1]) + (1 - p) * tr(W @ sol.OmegaL[k + 1])
        JR += p * tr(W @ sol.OmegaR[k + 1]) + (1 - p) * tr(W @ sol.PR[k + 1])
    return float(JL), float(JR)


def gain_convergence(sol, tol):
    """Largest k* with every consecutive gain change up to k* within ``tol``; -1 if none."""
    N = sol.N
    if N < 1:
        raise ValueError("gain convergence needs N >= 1")
    dL = np.max(np.abs(np.diff(sol.KL, axis=0)), axis=(1, 2))
    dR = np.max(np.abs(np.diff(sol.KR, axis=0)), axis=(1, 2))
    ok = np.maximum(dL, dR) <= tol
    if not ok[0]:
        return -1
    bad = np.flatnonzero(~ok)
    return int(bad[0] - 1) if bad.size else N - 1


def gain_psd_report(sol):
    """Stages where GL/GR fail PD or PL fails PSD (empty lists when all hold)."""
    return {
        "GL": [k for k in range(sol.N + 1) if not is_pd(sol.GL[k])],
        "GR": [k for k in range(sol.N + 1) if not is_pd(sol.GR[k])],
        "PL": [k for k in range(sol.N + 2) if not is_psd(sol.PL[k])],
    }
