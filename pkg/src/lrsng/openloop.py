"""Exact open-loop analysis on a finite scenario tree.

The Gaussian model is replaced by two-point distributions with the same first
and second moments (``mu_j +- sigma_j`` for x0, ``+-sigma_j`` for the noise,
independent coordinates), so every expectation and conditional expectation
becomes a finite weighted sum.  Anything that depends only on second moments
(e.g. the cost of a linear policy) matches the Gaussian model exactly.

Layout: depth ``d`` holds the local information at stage ``d`` for
``d = 0..N`` (x0, gamma_0..gamma_d, w_0..w_{d-1}); depth ``N+1`` adds w_N and
carries ``x_{N+1}``.  Children of node ``i`` at depth ``d`` are the contiguous
block ``i*b .. i*b+b-1`` at depth ``d+1``.  Local classes are single nodes.

Remote classes group nodes with the same arrival pattern and the same history
up to the last arrival: a received state reveals the history that produced
it.  For generic data this is the partition by the realized signals
``gamma_j x_j``; it is fixed at build time so that controls can be attached
to classes before any state is computed.
"""

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve

from . import estimator
from ._linalg import apply
from .model import composites

NODE_CAP = 100_000
RESIDUAL_TOL = 1e-10


class TreeConfigError(ValueError):
    pass


class TreeSizeError(ValueError):
    def __init__(self, count, cap):
        self.count = count
        super().__init__(f"scenario tree needs {count} nodes, cap is {cap}")


class MeasurabilityError(ValueError):
    pass


class OpenLoopSingularError(np.linalg.LinAlgError):
    def __init__(self, rank, size):
        self.rank = rank
        self.size = size
        super().__init__(
            f"open-loop system not uniquely solvable: rank {rank} of {size} (deficiency {size - rank})")


@dataclass(frozen=True, eq=False)
class ScenarioTree:
    N: int
    x0_points: np.ndarray
    x0_probs: np.ndarray
    w_points: np.ndarray
    w_probs: np.ndarray
    gamma_values: np.ndarray
    gamma_probs: np.ndarray
    size: tuple          # nodes per depth 0..N+1
    prob: tuple          # path probabilities per depth
    parent: tuple        # parent index per depth (None at depth 0)
    branch_probs: tuple  # conditional child probabilities per depth (None at depth 0)
    gamma: tuple         # gamma_d per depth 0..N
    w_index: tuple       # index of w_{d-1} per depth 1..N+1 (None at depth 0)
    x0_index: np.ndarray
    remote: tuple        # remote class label per node, depths 0..N
    n_remote: tuple
    remote_avg: tuple    # sparse (classes x nodes) conditional-averaging matrices

    @property
    def depths(self):
        return len(self.size)


@dataclass(frozen=True, eq=False)
class AdaptedControlProfile:
    """uL[k]: one local input per depth-k node; uR[k]: one remote input per remote class."""

    uL: tuple
    uR: tuple


@dataclass(frozen=True, eq=False)
class CostateField:
    """thetaL[k], thetaR[k] live on the depth-(k+1) nodes, k = 0..N."""

    thetaL: tuple
    thetaR: tuple


@dataclass(frozen=True, eq=False)
class PolicyStates:
    x: tuple        # depths 0..N+1
    xhat: tuple     # depths 0..N
    xtilde: tuple


# -- construction --------------------------------------------------------------

def _two_point(center, Sigma, what):
    Sigma = np.asarray(Sigma, dtype=float)
    if np.any(np.abs(Sigma - np.diag(np.diag(Sigma))) > 0):
        raise TreeConfigError(f"{what} must be diagonal in tree mode")
    sig = np.sqrt(np.clip(np.diag(Sigma), 0.0, None))
    pts = [np.array(center, dtype=float)]
    for j in np.flatnonzero(sig > 0):
        nxt = []
        for q in pts:
            for s in (1.0, -1.0):
                r = q.copy()
                r[j] += s * sig[j]
                nxt.append(r)
        pts = nxt
    pts = np.array(pts)
    return pts, np.full(len(pts), 1.0 / len(pts))


def _gamma_branches(p):
    vals = [g for g, pr in ((0, 1.0 - p), (1, p)) if pr > 0]
    probs = [pr for pr in (1.0 - p, p) if pr > 0]
    return np.array(vals, dtype=int), np.array(probs)


def tree_node_count(spec, N=None):
    N = spec.N if N is None else N
    s0 = 2 ** int(np.count_nonzero(np.diag(spec.Sigma_x0) > 0))
    sw = 2 ** int(np.count_nonzero(np.diag(spec.Sigma_w) > 0))
    g = len(_gamma_branches(spec.p)[0])
    total, level = 0, s0 * g
    for _ in range(N + 1):
        total += level
        level *= sw * g
    return total + level // g


def build_tree(spec, horizon_override=None, node_cap=NODE_CAP):
    N = spec.N if horizon_override is None else int(horizon_override)
    x0_pts, x0_pr = _two_point(spec.mu, spec.Sigma_x0, "Sigma_x0")
    w_pts, w_pr = _two_point(np.zeros(spec.n), spec.Sigma_w, "Sigma_w")
    g_vals, g_pr = _gamma_branches(spec.p)
    count = tree_node_count(spec, N)
    if count > node_cap:
        raise TreeSizeError(count, node_cap)
    G, S0, SW = len(g_vals), len(x0_pts), len(w_pts)

    # depth 0: (x0, gamma_0)
    x0_index = np.repeat(np.arange(S0), G)
    gamma = [np.tile(g_vals, S0)]
    prob = [np.repeat(x0_pr, G) * np.tile(g_pr, S0)]
    parent, branch_probs, w_index = [None], [None], [None]
    hist = [x0_index.copy()]                 # primitive history id (x0, w_0..w_{d-1})
    gseq = [gamma[0].copy()]                 # arrival pattern bits
    last_d = [np.where(gamma[0] == 1, 0, -1)]
    last_h = [np.where(gamma[0] == 1, hist[0], -1)]

    for d in range(1, N + 2):
        prev = len(prob[-1])
        leaf = d == N + 1
        gv, gp = (np.array([0]), np.array([1.0])) if leaf else (g_vals, g_pr)
        b = SW * len(gv)
        par = np.repeat(np.arange(prev), b)
        wi = np.tile(np.repeat(np.arange(SW), len(gv)), prev)
        cp = np.repeat(w_pr, len(gv)) * np.tile(gp, SW)
        parent.append(par)
        branch_probs.append(cp)
        w_index.append(wi)
        prob.append(prob[-1][par] * np.tile(cp, prev))
        hist.append(hist[-1][par] * SW + wi)
        if not leaf:
            g = np.tile(np.tile(gv, SW), prev)
            gamma.append(g)
            gseq.append(gseq[-1][par] * 2 + g)
            last_d.append(np.where(g == 1, d, last_d[-1][par]))
            last_h.append(np.where(g == 1, hist[-1], last_h[-1][par]))

    remote, n_remote, remote_avg = [], [], []
    for d in range(N + 1):
        key = np.stack([gseq[d], last_d[d], last_h[d]], axis=1)
        _, labels = np.unique(key, axis=0, return_inverse=True)
        labels = labels.ravel()
        k = int(labels.max()) + 1
        mass = np.bincount(labels, weights=prob[d], minlength=k)
        M = sp.csr_matrix((prob[d] / mass[labels], (labels, np.arange(len(labels)))),
                          shape=(k, len(labels)))
        remote.append(labels)
        n_remote.append(k)
        remote_avg.append(M)

    return ScenarioTree(
        N=N, x0_points=x0_pts, x0_probs=x0_pr, w_points=w_pts, w_probs=w_pr,
        gamma_values=g_vals, gamma_probs=g_pr,
        size=tuple(len(q) for q in prob), prob=tuple(prob), parent=tuple(parent),
        branch_probs=tuple(branch_probs), gamma=tuple(gamma), w_index=tuple(w_index),
        x0_index=x0_index, remote=tuple(remote), n_remote=tuple(n_remote),
        remote_avg=tuple(remote_avg),
    )


def _check_tree(tree, spec):
    if tree.x0_points.shape[1] != spec.n:
        raise ValueError("tree and spec state dimensions differ")


# -- expectations ----------------------------------------------------------------

def child_mean(tree, d, vals):
    """E[v | depth-d node] for values ``vals`` on depth d+1, shape (B, size_{d+1}, m)."""
    B, _, m = vals.shape
    b = len(tree.branch_probs[d + 1])
    v = vals.reshape(B, tree.size[d], b, m)
    return np.einsum("bicm,c->bim", v, tree.branch_probs[d + 1])


def remote_mean(tree, d, vals):
    """E[v | remote class] for node values at depth d, shape (B, size_d, m) -> (B, classes, m)."""
    B, S, m = vals.shape
    flat = np.moveaxis(vals, 1, 0).reshape(S, B * m)
    out = tree.remote_avg[d] @ flat
    return np.moveaxis(out.reshape(tree.n_remote[d], B, m), 0, 1)


def remote_mean_direct(tree, d, vals):
    """E[v | F^R_d] for values on depth d+1, averaged straight over descendants."""
    labels = tree.remote[d][tree.parent[d + 1]]
    w = tree.prob[d + 1]
    k = tree.n_remote[d]
    mass = np.bincount(labels, weights=w, minlength=k)
    out = np.zeros((vals.shape[0], k, vals.shape[2]))
    np.add.at(out, (slice(None), labels), vals * w[None, :, None])
    return out / mass[None, :, None]


# -- sweeps (leading batch axis) ------------------------------------------------

def _forward(tree, spec, uL, uR, homogeneous=False):
    B = uL[0].shape[0]
    if homogeneous:
        x = np.zeros((B, tree.size[0], spec.n))
    else:
        x = np.broadcast_to(tree.x0_points[tree.x0_index], (B, tree.size[0], spec.n))
    xs = [x]
    for d in range(tree.N + 1):
        uRn = uR[d][:, tree.remote[d], :]
        drive = x @ spec.A.T + uL[d] @ spec.BL.T + uRn @ spec.BR.T
        x = drive[:, tree.parent[d + 1], :]
        if not homogeneous:
            x = x + tree.w_points[tree.w_index[d + 1]]
        xs.append(x)
    return xs


def _costate_sweep(tree, A, Q, Pterm, xs):
    N = tree.N
    th = [None] * (N + 2)
    th[N + 1] = xs[N + 1] @ Pterm
    for d in range(N, 0, -1):
        th[d] = xs[d] @ Q + child_mean(tree, d, th[d + 1]) @ A
    return th


def _residuals(tree, spec, uL, uR, xs):
    thL = _costate_sweep(tree, spec.A, spec.QL, spec.PL_term, xs)
    thR = _costate_sweep(tree, spec.A, spec.QR, spec.PR_term, xs)
    RL, RR = [], []
    for k in range(tree.N + 1):
        RL.append(uL[k] @ spec.SL + child_mean(tree, k, thL[k + 1]) @ spec.BL)
        eR = child_mean(tree, k, thR[k + 1]) @ spec.BR
        RR.append(uR[k] @ spec.MR + remote_mean(tree, k, eR))
    return RL, RR, thL, thR


def _batch(profile):
    return [u[None] for u in profile.uL], [u[None] for u in profile.uR]


def _unbatch(uL, uR):
    return AdaptedControlProfile(tuple(u[0] for u in uL), tuple(u[0] for u in uR))


def _layout(tree, spec):
    shapes = [(tree.size[k], spec.m1) for k in range(tree.N + 1)]
    shapes += [(tree.n_remote[k], spec.m2) for k in range(tree.N + 1)]
    return shapes


def _pack(uL, uR):
    B = uL[0].shape[0]
    return np.concatenate([u.reshape(B, -1) for u in list(uL) + list(uR)], axis=1)


def _unpack(tree, spec, Z):
    B = Z.shape[0]
    parts, pos = [], 0
    for shp in _layout(tree, spec):
        size = shp[0] * shp[1]
        parts.append(Z[:, pos:pos + size].reshape((B,) + shp))
        pos += size
    K = tree.N + 1
    return parts[:K], parts[K:]


def unknown_count(tree, spec):
    return sum(a * b for a, b in _layout(tree, spec))


# -- public operations -----------------------------------------------------------

def zero_profile(tree, spec):
    return AdaptedControlProfile(
        tuple(np.zeros((tree.size[k], spec.m1)) for k in range(tree.N + 1)),
        tuple(np.zeros((tree.n_remote[k], spec.m2)) for k in range(tree.N + 1)),
    )


def profile_from_vector(tree, spec, z):
    uL, uR = _unpack(tree, spec, np.asarray(z, dtype=float)[None])
    return _unbatch(uL, uR)


def profile_to_vector(profile):
    uL, uR = _batch(profile)
    return _pack(uL, uR)[0]


def states(tree, spec, profile):
    """State at every node, depths 0..N+1."""
    _check_tree(tree, spec)
    uL, uR = _batch(profile)
    return [x[0] for x in _forward(tree, spec, uL, uR)]


def _stage_cost(tree, xs, uL, uRn, Q, S, M, Pterm):
    J = 0.0
    for k in range(tree.N + 1):
        x, a, c = xs[k], uL[k], uRn[k]
        stage = (np.einsum("ij,jk,ik->i", x, Q, x) + np.einsum("ij,jk,ik->i", a, S, a)
                 + np.einsum("ij,jk,ik->i", c, M, c))
        J += float(tree.prob[k] @ stage)
    x = xs[tree.N + 1]
    J += float(tree.prob[tree.N + 1] @ np.einsum("ij,jk,ik->i", x, Pterm, x))
    return J


def tree_cost(tree, spec, profile):
    """Exact (JL, JR) of an adapted control profile."""
    xs = states(tree, spec, profile)
    uRn = [profile.uR[k][tree.remote[k]] for k in range(tree.N + 1)]
    JL = _stage_cost(tree, xs, profile.uL, uRn, spec.QL, spec.SL, spec.ML, spec.PL_term)
    JR = _stage_cost(tree, xs, profile.uL, uRn, spec.QR, spec.SR, spec.MR, spec.PR_term)
    return JL, JR


def costates(tree, spec, profile):
    """Backward costate recursions; both condition on the local (full) history."""
    xs = _forward(tree, spec, *_batch(profile))
    thL = _costate_sweep(tree, spec.A, spec.QL, spec.PL_term, xs)
    thR = _costate_sweep(tree, spec.A, spec.QR, spec.PR_term, xs)
    return CostateField(tuple(t[0] for t in thL[1:]), tuple(t[0] for t in thR[1:]))


def stationarity_residuals(tree, spec, profile):
    """Per-class first-order conditions: local per node, remote per remote class."""
    uL, uR = _batch(profile)
    xs = _forward(tree, spec, uL, uR)
    RL, RR, _, _ = _residuals(tree, spec, uL, uR, xs)
    return tuple(r[0] for r in RL), tuple(r[0] for r in RR)


def max_residual(tree, spec, profile):
    RL, RR = stationarity_residuals(tree, spec, profile)
    return max(float(np.max(np.abs(r), initial=0.0)) for r in RL + RR)


def _residual_rows(tree, spec, Z, homogeneous):
    uL, uR = _unpack(tree, spec, Z)
    xs = _forward(tree, spec, uL, uR, homogeneous=homogeneous)
    RL, RR, _, _ = _residuals(tree, spec, uL, uR, xs)
    return _pack(RL, RR)


def stationarity_system(tree, spec, chunk=256):
    """(J, r0) with residual(z) = r0 + J z over the packed control vector z."""
    _check_tree(tree, spec)
    U = unknown_count(tree, spec)
    r0 = _residual_rows(tree, spec, np.zeros((1, U)), homogeneous=False)[0]
    J = np.empty((U, U))
    for s in range(0, U, chunk):
        e = min(s + chunk, U)
        E = np.zeros((e - s, U))
        E[np.arange(e - s), np.arange(s, e)] = 1.0
        J[:, s:e] = _residual_rows(tree, spec, E, homogeneous=True).T
    return J, r0


def solve_open_loop(tree, spec, tol=RESIDUAL_TOL):
    """Solve the stationarity conditions of both players as one square linear system."""
    J, r0 = stationarity_system(tree, spec)
    U = len(r0)
    with warnings.catch_warnings():
        warnings.simplefilter("error", LinAlgWarning)
        try:
            lu = lu_factor(J)
            z = lu_solve(lu, -r0)
        except (LinAlgWarning, ValueError, np.linalg.LinAlgError):
            rank = int(np.linalg.matrix_rank(J))
            raise OpenLoopSingularError(rank, U) from None
    profile = profile_from_vector(tree, spec, z)
    for _ in range(2):
        r = profile_to_vector(AdaptedControlProfile(*stationarity_residuals(tree, spec, profile)))
        if np.max(np.abs(r), initial=0.0) <= tol:
            return profile
        z = z - lu_solve(lu, r)
        profile = profile_from_vector(tree, spec, z)
    if max_residual(tree, spec, profile) > tol:
        rank = int(np.linalg.matrix_rank(J))
        if rank < U:
            raise OpenLoopSingularError(rank, U)
    return profile


def _player(player):
    if player not in ("L", "R"):
        raise ValueError("player must be 'L' or 'R'")
    return player


def remote_direction(tree, spec, direction):
    """Collapse a per-node remote direction to per-class values, checking measurability."""
    out = []
    for k, dn in enumerate(direction):
        dn = np.asarray(dn, dtype=float)
        dc = remote_mean(tree, k, dn[None])[0]
        gap = np.max(np.abs(dc[tree.remote[k]] - dn), initial=0.0)
        if gap > 1e-12 * (1.0 + np.max(np.abs(dn), initial=0.0)):
            raise MeasurabilityError(f"remote direction varies within a remote class at stage {k}")
        out.append(dc)
    return out


def lift_remote(tree, per_class):
    """Per-class remote values expanded to every node of the class."""
    return [np.asarray(v)[tree.remote[k]] for k, v in enumerate(per_class)]


def random_direction(tree, spec, player, rng):
    """Random adapted direction as per-node arrays for the given player."""
    if _player(player) == "L":
        return [rng.standard_normal((tree.size[k], spec.m1)) for k in range(tree.N + 1)]
    per_class = [rng.standard_normal((tree.n_remote[k], spec.m2)) for k in range(tree.N + 1)]
    return lift_remote(tree, per_class)


def _shift(tree, spec, profile, player, direction, eps):
    if player == "L":
        uL = tuple(u + eps * np.asarray(d) for u, d in zip(profile.uL, direction))
        return AdaptedControlProfile(uL, profile.uR)
    dc = remote_direction(tree, spec, direction)
    uR = tuple(u + eps * d for u, d in zip(profile.uR, dc))
    return AdaptedControlProfile(profile.uL, uR)


def second_variation(tree, spec, player, direction):
    """Cost of the variation alone: sum E[z'Qz + d'Wd] + E[z'P z] with z_{k+1} = A z_k + B d_k."""
    _player(player)
    if player == "L":
        B, Q, W, P = spec.BL, spec.QL, spec.SL, spec.PL_term
    else:
        remote_direction(tree, spec, direction)
        B, Q, W, P = spec.BR, spec.QR, spec.MR, spec.PR_term
    z = np.zeros((tree.size[0], spec.n))
    total = 0.0
    for k in range(tree.N + 1):
        dk = np.asarray(direction[k], dtype=float)
        total += float(tree.prob[k] @ (np.einsum("ij,jk,ik->i", z, Q, z)
                                       + np.einsum("ij,jk,ik->i", dk, W, dk)))
        z = (z @ spec.A.T + dk @ B.T)[tree.parent[k + 1]]
    total += float(tree.prob[tree.N + 1] @ np.einsum("ij,jk,ik->i", z, P, z))
    return total


def variational_identity_check(tree, spec, profile, player, direction, epsilon):
    """|J(u + eps d) - J(u) - eps^2 dJ(d) - 2 eps sum E[(B'theta + W u)' d]| for one player.

    ``direction`` is given per node for every stage; a remote direction must be
    constant on each remote class.
    """
    _player(player)
    shifted = _shift(tree, spec, profile, player, direction, epsilon)
    i = 0 if player == "L" else 1
    lhs = tree_cost(tree, spec, shifted)[i] - tree_cost(tree, spec, profile)[i]
    th = costates(tree, spec, profile)
    first = 0.0
    for k in range(tree.N + 1):
        dk = np.asarray(direction[k], dtype=float)
        if player == "L":
            e = child_mean(tree, k, th.thetaL[k][None])[0] @ spec.BL
            g = e + profile.uL[k] @ spec.SL
        else:
            e = child_mean(tree, k, th.thetaR[k][None])[0] @ spec.BR
            g = e + profile.uR[k][tree.remote[k]] @ spec.MR
        first += float(tree.prob[k] @ np.sum(g * dk, axis=1))
    rhs = epsilon ** 2 * second_variation(tree, spec, player, direction) + 2 * epsilon * first
    return abs(lhs - rhs)


def perturbation_gaps(tree, spec, profile, player, count, max_eps, rng):
    """J(deviated) - J(profile) for random adapted unilateral deviations, eps up to ``max_eps``."""
    i = 0 if _player(player) == "L" else 1
    J0 = tree_cost(tree, spec, profile)[i]
    gaps = np.empty(count)
    for t in range(count):
        d = random_direction(tree, spec, player, rng)
        eps = rng.uniform(-max_eps, max_eps)
        gaps[t] = tree_cost(tree, spec, _shift(tree, spec, profile, player, d, eps))[i] - J0
    return gaps


# -- closed-loop policies on the tree ------------------------------------------------

def policy_profile(tree, spec, policy):
    """Run a linear estimate/error feedback policy through the tree.

    Returns the adapted profile it induces and the per-node state, estimate
    and error.  Raises MeasurabilityError if the remote input is not constant
    on a remote class.
    """
    m1 = spec.m1
    Bc = composites(spec).B_cal
    x = tree.x0_points[tree.x0_index]
    st = estimator.init(spec, x, tree.gamma[0])
    xs, xh, xt, uLs, uRs = [x], [], [], [], []
    for k in range(tree.N + 1):
        U = apply(policy.KLt[k], st.xhat)
        ut = apply(policy.KRt[k], st.xtilde)
        uR_node = U[:, m1:]
        uR_cls = remote_mean(tree, k, uR_node[None])[0]
        gap = np.max(np.abs(uR_cls[tree.remote[k]] - uR_node), initial=0.0)
        if gap > 1e-10 * (1.0 + np.max(np.abs(uR_node), initial=0.0)):
            raise MeasurabilityError(f"remote input varies within a remote class at stage {k}")
        xh.append(st.xhat)
        xt.append(st.xtilde)
        uLs.append(U[:, :m1] + ut)
        uRs.append(uR_cls)
        par = tree.parent[k + 1]
        w = tree.w_points[tree.w_index[k + 1]]
        x_next = (apply(spec.A, x) + apply(Bc, U) + apply(spec.BL, ut))[par] + w
        if k < tree.N:
            prev = estimator.EstimatorState(st.xhat[par], st.xtilde[par], st.k)
            st = estimator.step(spec, prev, U[par], ut[par], w, x_next, tree.gamma[k + 1])
        x = x_next
        xs.append(x)
    return AdaptedControlProfile(tuple(uLs), tuple(uRs)), PolicyStates(tuple(xs), tuple(xh), tuple(xt))


def cross_moments(tree, pstates):
    """E[xhat_k xtilde_k'] on the tree for k = 0..N."""
    return [np.einsum("i,ij,ik->jk", tree.prob[k], pstates.xhat[k], pstates.xtilde[k])
            for k in range(tree.N + 1)]


def noise_moments(tree):
    """(mean, covariance) of the discrete noise and of the discrete x0."""
    wm = tree.w_probs @ tree.w_points
    wc = np.einsum("i,ij,ik->jk", tree.w_probs, tree.w_points, tree.w_points)
    xm = tree.x0_probs @ tree.x0_points
    d = tree.x0_points - xm
    xc = np.einsum("i,ij,ik->jk", tree.x0_probs, d, d)
    return wm, wc, xm, xc


def filtration_report(tree):
    """Structural checks of the information partitions.

    ``nested``: every remote class at stage k+1 sits inside one remote class at
    stage k (information only grows).  ``coarser``: the remote partition never
    splits a local class (trivial here since local classes are nodes, but
    checked against the labels).
    """
    nested = True
    for k in range(tree.N):
        child = tree.remote[k + 1]
        par_cls = tree.remote[k][tree.parent[k + 1][: len(child)]]
        first = {}
        for c, pc in zip(child.tolist(), par_cls.tolist()):
            if first.setdefault(c, pc) != pc:
                nested = False
                break
    coarser = all(len(r) == s for r, s in zip(tree.remote, tree.size))
    return {"nested": nested, "coarser": coarser}
