"""Remote-side state estimate under packet drops, and the local estimation error.

All functions broadcast over leading axes, so a batch of trajectories (or
every node of a scenario tree) can be advanced in one call.
"""

from dataclasses import dataclass

import numpy as np

from ._linalg import apply
from .model import composites

CONSISTENCY_TOL = 1e-10


class EstimatorConsistencyError(AssertionError):
    pass


@dataclass(frozen=True, eq=False)
class EstimatorState:
    xhat: np.ndarray
    xtilde: np.ndarray
    k: int = 0


def _gamma(g, like):
    g = np.asarray(g, dtype=float)
    return g.reshape(g.shape + (1,) * (like.ndim - g.ndim))


def init(spec, x0, gamma0):
    x0 = np.asarray(x0, dtype=float)
    g = _gamma(gamma0, x0)
    return EstimatorState(
        xhat=g * x0 + (1 - g) * spec.mu,
        xtilde=(1 - g) * (x0 - spec.mu),
        k=0,
    )


def step(spec, st, U_prev, utilde_prev, w_prev, x_next, gamma_next, check=True):
    """Advance one stage.

    On receipt (gamma=1) the estimate snaps to the true state and the error
    resets to zero; on a drop the estimate is the noise-free prediction from
    the common-information input ``U_prev`` and the error carries the local
    private input and the noise.
    """
    x_next = np.asarray(x_next, dtype=float)
    g = _gamma(gamma_next, x_next)
    Bc = composites(spec).B_cal
    pred = apply(spec.A, st.xhat) + apply(Bc, U_prev)
    err = apply(spec.A, st.xtilde) + apply(spec.BL, utilde_prev) + np.asarray(w_prev, dtype=float)
    new = EstimatorState(
        xhat=g * x_next + (1 - g) * pred,
        xtilde=(1 - g) * err,
        k=st.k + 1,
    )
    if check:
        gap = np.abs(new.xhat + new.xtilde - x_next)
        scale = np.maximum(1.0, np.abs(x_next))
        if np.any(gap > CONSISTENCY_TOL * scale):
            raise EstimatorConsistencyError(
                f"estimate + error differs from the true state by {gap.max():.3e} at stage {new.k}")
    return new
