"""Problem data for the local/remote LQ game and its standing checks.

The plant is ``x_{k+1} = A x_k + BL uL_k + BR uR_k + w_k``.  The local player
sees the state exactly; the remote player only gets ``x_k`` when the packet
arrives (probability ``p``).  Stage costs run over ``k = 0..N`` and the
terminal weight applies to ``x_{N+1}``.
"""

from dataclasses import dataclass, fields, replace

import numpy as np
from scipy.linalg import block_diag

from ._linalg import PD_TOL, PSD_TOL, asymmetry, is_pd, is_psd, sym

SYM_TOL = 1e-10

MATRIX_FIELDS = ("A", "BL", "BR", "QL", "QR", "SL", "SR", "ML", "MR",
                 "PL_term", "PR_term", "Sigma_x0", "Sigma_w")
SYMMETRIC_FIELDS = ("QL", "QR", "SL", "SR", "ML", "MR", "PL_term", "PR_term",
                    "Sigma_x0", "Sigma_w")
PSD_FIELDS = ("QL", "QR", "PL_term", "PR_term", "Sigma_x0", "Sigma_w")
PD_FIELDS = ("SL", "SR", "ML", "MR")


class StructureError(ValueError):
    """Matrix shapes do not fit together."""


@dataclass(frozen=True, eq=False)
class GameSpec:
    n: int
    m1: int
    m2: int
    A: np.ndarray
    BL: np.ndarray
    BR: np.ndarray
    QL: np.ndarray
    QR: np.ndarray
    SL: np.ndarray
    SR: np.ndarray
    ML: np.ndarray
    MR: np.ndarray
    PL_term: np.ndarray
    PR_term: np.ndarray
    p: float
    mu: np.ndarray
    Sigma_x0: np.ndarray
    Sigma_w: np.ndarray
    N: int

    def __post_init__(self):
        for name in MATRIX_FIELDS + ("mu",):
            arr = np.array(getattr(self, name), dtype=float)
            if name in SYMMETRIC_FIELDS and arr.ndim == 2 and arr.shape[0] == arr.shape[1]:
                # only tiny asymmetry is cleaned up; anything larger is left for validate()
                if asymmetry(arr) <= SYM_TOL:
                    arr = sym(arr)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "p", float(self.p))
        for name in ("n", "m1", "m2", "N"):
            object.__setattr__(self, name, int(getattr(self, name)))

    def with_horizon(self, N):
        return replace(self, N=N)

    def to_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.tolist() if isinstance(v, np.ndarray) else v
        return out

    def equals(self, other, tol=0.0):
        """Entrywise comparison of every field (``==`` is left as identity)."""
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if isinstance(a, np.ndarray):
                if a.shape != np.shape(b) or np.any(np.abs(a - b) > tol):
                    return False
            elif a != b:
                return False
        return True


@dataclass(frozen=True, eq=False)
class CompositeMatrices:
    B_cal: np.ndarray
    LambdaL: np.ndarray
    LambdaR: np.ndarray


def expected_shapes(spec):
    n, m1, m2 = spec.n, spec.m1, spec.m2
    return {
        "A": (n, n), "BL": (n, m1), "BR": (n, m2),
        "QL": (n, n), "QR": (n, n), "SL": (m1, m1), "SR": (m1, m1),
        "ML": (m2, m2), "MR": (m2, m2), "PL_term": (n, n), "PR_term": (n, n),
        "mu": (n,), "Sigma_x0": (n, n), "Sigma_w": (n, n),
    }


def shape_violations(spec):
    out = []
    for name, dim in (("n", spec.n), ("m1", spec.m1), ("m2", spec.m2)):
        if dim < 1:
            out.append(f"{name} must be a positive integer")
    if spec.N < 0:
        out.append("N must be a nonnegative integer")
    for name, shape in expected_shapes(spec).items():
        got = getattr(spec, name).shape
        if got != shape:
            out.append(f"{name} has shape {got}, expected {shape}")
    return out


def validate(spec, pd_tol=PD_TOL, psd_tol=PSD_TOL):
    """List every violated standing assumption; an empty list means valid.

    Checks shapes, finiteness, symmetry (1e-10), ``p`` in [0, 1], PSD of the
    state/terminal weights and covariances, PD of the four input weights.
    """
    report = shape_violations(spec)
    if report:
        return report
    for name in MATRIX_FIELDS + ("mu",):
        if not np.all(np.isfinite(getattr(spec, name))):
            report.append(f"{name} has non-finite entries")
    if report:
        return report
    for name in SYMMETRIC_FIELDS:
        if asymmetry(getattr(spec, name)) > SYM_TOL:
            report.append(f"{name} not symmetric")
    if not 0.0 <= spec.p <= 1.0:
        report.append("p out of [0,1]")
    for name in PSD_FIELDS:
        if not is_psd(getattr(spec, name), psd_tol):
            report.append(f"{name} not positive semidefinite")
    for name in PD_FIELDS:
        if not is_pd(getattr(spec, name), pd_tol):
            report.append(f"{name} not positive definite")
    return report


def composites(spec):
    """Stacked input matrix ``[BL BR]`` and the block-diagonal input weights."""
    bad = shape_violations(spec)
    if bad:
        raise StructureError("; ".join(bad))
    return CompositeMatrices(
        B_cal=np.hstack([spec.BL, spec.BR]),
        LambdaL=block_diag(spec.SL, spec.ML),
        LambdaR=block_diag(spec.SR, spec.MR),
    )


def sec5_spec(Sigma_x0=None, Sigma_w=None):
    """The two-state, two-input-per-player numerical example (N=50, p=0.5).

    The example leaves the initial and process noise covariances open; both
    default to the identity here.
    """
    I2 = np.eye(2)
    return GameSpec(
        n=2, m1=2, m2=2,
        A=[[1.2, 0.0], [0.0, 1.1]],
        BL=[[0.3, 0.2], [0.4, -0.1]],
        BR=[[0.1, 0.2], [0.0, 0.1]],
        QL=I2, QR=I2, SL=I2, SR=I2, ML=I2, MR=I2,
        PL_term=I2, PR_term=I2,
        p=0.5, mu=[0.0, 0.0],
        Sigma_x0=I2 if Sigma_x0 is None else Sigma_x0,
        Sigma_w=I2 if Sigma_w is None else Sigma_w,
        N=50,
    )


def random_spec(rng, n=2, m1=2, m2=2, N=10, p=None, diagonal_noise=False):
    """Random instance satisfying the standing assumptions (used by tests and verify)."""

    def psd(k):
        G = rng.standard_normal((k, k))
        return G @ G.T / k

    def pd(k):
        return psd(k) + 0.5 * np.eye(k)

    def cov(k):
        if diagonal_noise:
            return np.diag(rng.uniform(0.1, 1.0, k))
        return psd(k)

    A = rng.standard_normal((n, n))
    A *= 1.1 / max(1e-9, np.max(np.abs(np.linalg.eigvals(A))))
    return GameSpec(
        n=n, m1=m1, m2=m2, A=A,
        BL=rng.standard_normal((n, m1)), BR=rng.standard_normal((n, m2)),
        QL=psd(n), QR=psd(n), SL=pd(m1), SR=pd(m1), ML=pd(m2), MR=pd(m2),
        PL_term=psd(n), PR_term=psd(n),
        p=rng.uniform(0.1, 0.9) if p is None else p,
        mu=rng.standard_normal(n), Sigma_x0=cov(n), Sigma_w=cov(n), N=N,
    )
