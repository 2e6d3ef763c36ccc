"""Policy evaluation for the closed-loop game.

Three routes to the same expected costs:

* ``monte_carlo`` samples Gaussian trajectories through the estimator,
* ``propagate_moments`` carries the second moments of the estimate and the
  estimation error forward exactly,
* ``riccati.analytic_costs`` reads the equilibrium costs off the value
  matrices.

``nash_check`` uses the exact route to test unilateral deviations.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import estimator
from ._linalg import apply, sqrt_factor
from .model import composites
from .riccati import initial_moments

CHUNK = 2048


@dataclass(frozen=True, eq=False)
class PolicySequence:
    """Gains for ``U = KLt xhat`` and ``utilde = KRt xtilde`` at stages 0..N."""

    KLt: np.ndarray
    KRt: np.ndarray

    def __post_init__(self):
        KLt = np.array(self.KLt, dtype=float)
        KRt = np.array(self.KRt, dtype=float)
        if KLt.ndim != 3 or KRt.ndim != 3 or KLt.shape[0] != KRt.shape[0]:
            raise ValueError("policy gain sequences must be stacked with equal length")
        if not (np.all(np.isfinite(KLt)) and np.all(np.isfinite(KRt))):
            raise ValueError("policy gains must be finite")
        object.__setattr__(self, "KLt", KLt)
        object.__setattr__(self, "KRt", KRt)

    @property
    def N(self):
        return self.KLt.shape[0] - 1

    @classmethod
    def from_solution(cls, sol):
        return cls(sol.KL, sol.KR)

    def check(self, spec):
        m = spec.m1 + spec.m2
        if self.KLt.shape != (spec.N + 1, m, spec.n) or self.KRt.shape != (spec.N + 1, spec.m1, spec.n):
            raise ValueError(
                f"policy shapes {self.KLt.shape}, {self.KRt.shape} do not match horizon N={spec.N}")


@dataclass(frozen=True, eq=False)
class MomentState:
    Mhat: np.ndarray
    Mtilde: np.ndarray


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str = ""

    def to_dict(self):
        return {"name": self.name, "pass": bool(self.passed), "detail": self.detail}


@dataclass
class CostReport:
    JL: float
    JR: float
    JL_se: float = 0.0
    JR_se: float = 0.0
    trajectories: int = 0
    seed: int = 0
    checks: list = field(default_factory=list)

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def to_dict(self):
        return {
            "jl": float(self.JL), "jr": float(self.JR),
            "jl_se": float(self.JL_se), "jr_se": float(self.JR_se),
            "trajectories": int(self.trajectories), "seed": int(self.seed),
            "checks": [c.to_dict() for c in self.checks],
        }


@dataclass
class NashReport:
    checks: list
    max_grad_L: float
    max_grad_R: float
    worst_dev_L: float
    worst_dev_R: float

    @property
    def passed(self):
        return all(c.passed for c in self.checks)


@dataclass(frozen=True, eq=False)
class Trace:
    """Per-trajectory record; leading axis is the trajectory when batched."""

    x: np.ndarray        # stages 0..N+1
    xhat: np.ndarray     # stages 0..N
    xtilde: np.ndarray
    uL: np.ndarray
    uR: np.ndarray
    U: np.ndarray
    utilde: np.ndarray
    gamma: np.ndarray
    w: np.ndarray


# -- sampling -----------------------------------------------------------------

def trajectory_stream(seed, index):
    """Generator for trajectory ``index``: PCG64 seeded by SeedSequence(seed, spawn_key=(index,)).

    This equals ``SeedSequence(seed).spawn(index + 1)[index]``; per trajectory
    the draws are, in order, ``standard_normal(n)`` for x0, ``random(N+1)``
    for the arrivals (gamma_k = u_k < p) and ``standard_normal((N+1, n))``
    for the process noise.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(index),))
    return np.random.Generator(np.random.PCG64(ss))


def _draw_one(spec, rng, Lx, Lw):
    n, N = spec.n, spec.N
    z0 = rng.standard_normal(n)
    u = rng.random(N + 1)
    zw = rng.standard_normal((N + 1, n))
    x0 = spec.mu + apply(Lx, z0)
    gamma = (u < spec.p).astype(float)
    w = apply(Lw, zw)
    return x0, gamma, w


def _draw(spec, seed, indices):
    Lx, Lw = sqrt_factor(spec.Sigma_x0), sqrt_factor(spec.Sigma_w)
    T = len(indices)
    x0 = np.empty((T, spec.n))
    gamma = np.empty((T, spec.N + 1))
    w = np.empty((T, spec.N + 1, spec.n))
    for t, i in enumerate(indices):
        x0[t], gamma[t], w[t] = _draw_one(spec, trajectory_stream(seed, i), Lx, Lw)
    return x0, gamma, w


# -- simulation ---------------------------------------------------------------

def _rowdot(a, b):
    out = a[..., 0] * b[..., 0]
    for j in range(1, a.shape[-1]):
        out = out + a[..., j] * b[..., j]
    return out


def _quad(M, X):
    return _rowdot(X, apply(M, X))


def _simulate(spec, policy, x0, gamma, w, record=False):
    """Vectorized over the leading (trajectory) axis; returns per-trajectory costs."""
    m1 = spec.m1
    T = x0.shape[0]
    B = composites(spec).B_cal
    JL = np.zeros(T)
    JR = np.zeros(T)
    x = x0
    st = estimator.init(spec, x0, gamma[:, 0])
    rec = {k: [] for k in ("x", "xhat", "xtilde", "uL", "uR", "U", "utilde")}
    for k in range(spec.N + 1):
        U = apply(policy.KLt[k], st.xhat)
        ut = apply(policy.KRt[k], st.xtilde)
        uL = U[:, :m1] + ut
        uR = U[:, m1:]
        JL += _quad(spec.QL, x) + _quad(spec.SL, uL) + _quad(spec.ML, uR)
        JR += _quad(spec.QR, x) + _quad(spec.SR, uL) + _quad(spec.MR, uR)
        if record:
            for key, val in (("x", x), ("xhat", st.xhat), ("xtilde", st.xtilde),
                             ("uL", uL), ("uR", uR), ("U", U), ("utilde", ut)):
                rec[key].append(val)
        x_next = apply(spec.A, x) + apply(B, U) + apply(spec.BL, ut) + w[:, k]
        if k < spec.N:
            st = estimator.step(spec, st, U, ut, w[:, k], x_next, gamma[:, k + 1])
        x = x_next
    JL += _quad(spec.PL_term, x)
    JR += _quad(spec.PR_term, x)
    trace = None
    if record:
        rec["x"].append(x)
        arrs = {k: np.stack(v, axis=1) for k, v in rec.items()}
        trace = Trace(gamma=gamma, w=w, **arrs)
    return JL, JR, trace


def simulate_batch(spec, policy, seed, indices, record=False):
    """Simulate the trajectories with the given stream indices under ``seed``."""
    policy.check(spec)
    x0, gamma, w = _draw(spec, seed, list(indices))
    return _simulate(spec, policy, x0, gamma, w, record=record)


def simulate_trajectory(spec, policy, rng):
    """One trajectory driven by ``rng``; returns (JL sample, JR sample, trace)."""
    policy.check(spec)
    x0, gamma, w = _draw_one(spec, rng, sqrt_factor(spec.Sigma_x0), sqrt_factor(spec.Sigma_w))
    JL, JR, tr = _simulate(spec, policy, x0[None], gamma[None], w[None], record=True)
    trace = Trace(**{k: getattr(tr, k)[0] for k in Trace.__dataclass_fields__})
    return float(JL[0]), float(JR[0]), trace


def _chunk_costs(args):
    spec, policy, seed, start, stop = args
    JL, JR, _ = simulate_batch(spec, policy, seed, range(start, stop))
    return JL, JR


def sample_costs(spec, policy, trajectories, seed=0, workers=1):
    """Per-trajectory cost samples in index order (independent of ``workers``)."""
    if trajectories < 2:
        raise ValueError("need at least 2 trajectories")
    policy.check(spec)
    jobs = [(spec, policy, seed, s, min(s + CHUNK, trajectories))
            for s in range(0, trajectories, CHUNK)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_chunk_costs, jobs))
    else:
        parts = [_chunk_costs(j) for j in jobs]
    return np.concatenate([a for a, _ in parts]), np.concatenate([b for _, b in parts])


def _se(x):
    # identical samples give exactly zero, not the rounding left in x - mean
    if np.ptp(x) == 0:
        return 0.0
    return float(x.std(ddof=1) / np.sqrt(len(x)))


def monte_carlo(spec, policy, trajectories, seed=0, workers=1):
    JL, JR = sample_costs(spec, policy, trajectories, seed, workers)
    return CostReport(
        JL=float(JL.mean()), JR=float(JR.mean()),
        JL_se=_se(JL), JR_se=_se(JR),
        trajectories=int(trajectories), seed=int(seed),
    )


def sample_cross_moments(spec, policy, trajectories, seed=0):
    """Sample mean and standard error of ``xhat_k xtilde_k'`` for k = 0..N."""
    _, _, tr = simulate_batch(spec, policy, seed, range(trajectories), record=True)
    C = tr.xhat[:, :, :, None] * tr.xtilde[:, :, None, :]
    return C.mean(axis=0), C.std(axis=0, ddof=1) / np.sqrt(trajectories)


# -- exact second-moment evaluation -------------------------------------------

def _costs_batch(spec, KL, KR, keep_moments=False):
    """Exact (JL, JR) for a batch of policies; KL is (..., N+1, m1+m2, n)."""
    comp = composites(spec)
    B, BL, W, p = comp.B_cal, spec.BL, spec.Sigma_w, spec.p
    Mhat0, Mtilde0 = initial_moments(spec)
    batch = KL.shape[:-3]
    Mh = np.broadcast_to(Mhat0, batch + Mhat0.shape)
    Mt = np.broadcast_to(Mtilde0, batch + Mtilde0.shape)
    JL = np.zeros(batch)
    JR = np.zeros(batch)
    moments = []

    def tr(X, Y):
        return np.einsum("...ij,...ji->...", X, Y)

    for k in range(spec.N + 1):
        if keep_moments:
            moments.append(MomentState(np.array(Mh), np.array(Mt)))
        K, Kr = KL[..., k, :, :], KR[..., k, :, :]
        Kt, Krt = np.swapaxes(K, -1, -2), np.swapaxes(Kr, -1, -2)
        JL = JL + tr(spec.QL + Kt @ comp.LambdaL @ K, Mh) + tr(spec.QL + Krt @ spec.SL @ Kr, Mt)
        JR = JR + tr(spec.QR + Kt @ comp.LambdaR @ K, Mh) + tr(spec.QR + Krt @ spec.SR @ Kr, Mt)
        FL = spec.A + B @ K
        FR = spec.A + BL @ Kr
        inno = FR @ Mt @ np.swapaxes(FR, -1, -2) + W
        Mh, Mt = FL @ Mh @ np.swapaxes(FL, -1, -2) + p * inno, (1 - p) * inno
    if keep_moments:
        moments.append(MomentState(np.array(Mh), np.array(Mt)))
    JL = JL + tr(spec.PL_term, Mh + Mt)
    JR = JR + tr(spec.PR_term, Mh + Mt)
    return JL, JR, moments


def propagate_moments(spec, policy):
    """Exact (JL, JR, moments) for a policy, moments listed for stages 0..N+1.

    The cross moment E[xhat xtilde'] vanishes for any gains, so the cost splits
    into an estimate part weighted by Mhat and an error part weighted by Mtilde.
    """
    policy.check(spec)
    JL, JR, moments = _costs_batch(spec, policy.KLt, policy.KRt, keep_moments=True)
    return float(JL), float(JR), moments


# -- Nash verification ---------------------------------------------------------

def _fd_gradient(spec, KL, KR, player, h):
    """Central differences of the player's own cost w.r.t. all of its own gain entries."""
    own = KL if player == "L" else KR
    size = own.size
    E = np.eye(size).reshape((size,) + own.shape) * h
    if player == "L":
        jp = _costs_batch(spec, KL + E, np.broadcast_to(KR, (size,) + KR.shape))[0]
        jm = _costs_batch(spec, KL - E, np.broadcast_to(KR, (size,) + KR.shape))[0]
    else:
        jp = _costs_batch(spec, np.broadcast_to(KL, (size,) + KL.shape), KR + E)[1]
        jm = _costs_batch(spec, np.broadcast_to(KL, (size,) + KL.shape), KR - E)[1]
    return ((jp - jm) / (2 * h)).reshape(own.shape)


def _deviation_gaps(spec, KL, KR, player, count, magnitude, rng):
    """J(deviated) - J(equilibrium) for ``count`` random whole-horizon deviations."""
    own = KL if player == "L" else KR
    D = rng.uniform(-magnitude, magnitude, size=(count,) + own.shape)
    if player == "L":
        J0 = _costs_batch(spec, KL, KR)[0]
        J = _costs_batch(spec, KL + D, np.broadcast_to(KR, (count,) + KR.shape))[0]
    else:
        J0 = _costs_batch(spec, KL, KR)[1]
        J = _costs_batch(spec, np.broadcast_to(KL, (count,) + KL.shape), KR + D)[1]
    return J - J0


def nash_check(spec, sol, deviations=100, magnitude=(1e-2, 1e-1, 1.0), seed=0,
               fd_step=1e-4, fd_tol=1e-5, dev_tol=1e-9):
    """Stationarity and unilateral-deviation tests of a gain pair under the exact evaluator.

    A local deviation replaces the common-information gain (moving both the
    local x̂-feedback and the remote input); a remote deviation replaces the
    local error-feedback gain.  Nothing is raised: failures are reported.
    """
    KL, KR = np.asarray(sol.KL, float), np.asarray(sol.KR, float)
    mags = np.atleast_1d(np.asarray(magnitude, dtype=float))
    rng = np.random.default_rng(seed)
    checks = []
    grads = {}
    worst = {}
    for player, label, own in (("L", "KL", KL), ("R", "KR", KR)):
        g = _fd_gradient(spec, KL, KR, player, fd_step)
        idx = np.unravel_index(np.argmax(np.abs(g)), g.shape)
        gmax = float(np.abs(g[idx]))
        grads[player] = gmax
        detail = f"max |dJ{player}/d{label}| = {gmax:.3e} at stage {idx[0]}, entry ({idx[1]},{idx[2]})"
        checks.append(Check(f"gradient_{player}", gmax <= fd_tol, detail))
        lows = []
        for mag in mags:
            gaps = _deviation_gaps(spec, KL, KR, player, deviations, mag, rng)
            lows.append(float(gaps.min()))
        worst[player] = min(lows)
        detail = ", ".join(f"min gain@{m:g} = {v:.3e}" for m, v in zip(mags, lows))
        checks.append(Check(f"deviation_{player}", worst[player] >= -dev_tol, detail))
    return NashReport(checks, grads["L"], grads["R"], worst["L"], worst["R"])


def completing_square(spec, sol, policy):
    """Both sides of the completing-square cost identities.

    Local: ``JL(KLt, KRt) - JL(KL*, KRt)`` against
    ``sum_k tr(dK' GL_k dK Mhat_k)`` with ``dK = KLt - KL*`` and Mhat under the
    deviated policy.  Remote (with the common gain held at KL*):
    ``JR(KL*, KRt) - JR(KL*, KR*)`` against ``sum_k tr(dK' GR_k dK Mtilde_k)``.
    Returns ``{"L": (lhs, rhs), "R": (lhs, rhs)}``.
    """
    policy.check(spec)
    KL, KR = np.asarray(sol.KL, float), np.asarray(sol.KR, float)
    out = {}

    JL_dev, _, mom = propagate_moments(spec, policy)
    JL_ref = float(_costs_batch(spec, KL, policy.KRt)[0])
    rhs = 0.0
    for k in range(spec.N + 1):
        d = policy.KLt[k] - KL[k]
        rhs += np.trace(d.T @ sol.GL[k] @ d @ mom[k].Mhat)
    out["L"] = (JL_dev - JL_ref, float(rhs))

    remote = PolicySequence(KL, policy.KRt)
    _, JR_dev, mom = propagate_moments(spec, remote)
    JR_ref = float(_costs_batch(spec, KL, KR)[1])
    rhs = 0.0
    for k in range(spec.N + 1):
        d = policy.KRt[k] - KR[k]
        rhs += np.trace(d.T @ sol.GR[k] @ d @ mom[k].Mtilde)
    out["R"] = (JR_dev - JR_ref, float(rhs))
    return out


def remote_best_response(spec, KL):
    """Exact best error-feedback gains for the remote cost, common gains KL held fixed.

    Diagnostic only: the remote value of the next-stage error is the
    arrival-weighted mix ``H = p OmegaR' + (1-p) PR'`` because a received
    packet moves the error into the estimate.
    """
    comp = composites(spec)
    A, BL, p = spec.A, spec.BL, spec.p
    KL = np.asarray(KL, float)
    OR = spec.PR_term
    PR = spec.PR_term
    KR = np.zeros((spec.N + 1, spec.m1, spec.n))
    for k in range(spec.N, -1, -1):
        H = p * OR + (1 - p) * PR
        KR[k] = -np.linalg.solve(spec.SR + BL.T @ H @ BL, BL.T @ H @ A)
        F = A + BL @ KR[k]
        PR = spec.QR + KR[k].T @ spec.SR @ KR[k] + F.T @ H @ F
        FL = A + comp.B_cal @ KL[k]
        OR = FL.T @ OR @ FL + spec.QR + KL[k].T @ comp.LambdaR @ KL[k]
    return KR
