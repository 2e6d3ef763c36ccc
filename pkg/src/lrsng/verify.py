"""Check suites behind the ``verify-*`` commands.

Each suite returns a CostReport whose ``checks`` list is the pass/fail record;
nothing here raises on a failed check.
"""

import time

import numpy as np

from . import evaluate, openloop, riccati
from .evaluate import Check, CostReport, PolicySequence
from .model import composites, random_spec

CONV_TOL = 1e-6
MAGNITUDES = (1e-2, 1e-1, 1.0)


def _rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def riccati_checks(spec, sol):
    bad = riccati.gain_psd_report(sol)
    comp = composites(spec)
    worst = 0.0
    for k in range(spec.N + 1):
        F = spec.A + comp.B_cal @ sol.KL[k]
        alt = spec.QL + sol.KL[k].T @ comp.LambdaL @ sol.KL[k] + F.T @ sol.PL[k + 1] @ F
        worst = max(worst, float(np.max(np.abs(alt - sol.PL[k]))) / max(1.0, float(np.max(np.abs(sol.PL[k])))))
    return [
        Check("riccati_feasible", not bad["GL"] and not bad["GR"],
              f"GL non-PD stages {bad['GL']}, GR non-PD stages {bad['GR']}"),
        Check("riccati_pl_psd", not bad["PL"], f"PL non-PSD stages {bad['PL']}"),
        Check("riccati_square_completion", worst <= 1e-10, f"max rel residual {worst:.3e}"),
    ]


def completing_square_checks(spec, rng, policies=20, scale=0.3, tol=1e-8):
    """Deviation-cost identities on ``spec`` for random gain sequences around the equilibrium."""
    sol = riccati.solve(spec)
    worst = {"L": 0.0, "R": 0.0}
    for _ in range(policies):
        pol = PolicySequence(sol.KL + scale * rng.standard_normal(sol.KL.shape),
                             sol.KR + scale * rng.standard_normal(sol.KR.shape))
        res = evaluate.completing_square(spec, sol, pol)
        for player, (lhs, rhs) in res.items():
            worst[player] = max(worst[player], _rel(lhs, rhs))
    return [Check(f"completing_square_{p}", worst[p] <= tol, f"max rel residual {worst[p]:.3e}")
            for p in ("L", "R")]


def closed_loop_suite(spec, seed=0, trajectories=100_000, workers=1, fd_step=1e-4, fd_tol=1e-5,
                      deviations=100, magnitudes=MAGNITUDES):
    checks = []
    try:
        sol = riccati.solve(spec)
    except riccati.RiccatiError as exc:
        return CostReport(float("nan"), float("nan"), seed=seed,
                          checks=[Check("riccati_feasible", False, str(exc))])
    checks += riccati_checks(spec, sol)
    policy = PolicySequence.from_solution(sol)

    JL_a, JR_a = riccati.analytic_costs(spec, sol)
    JL_m, JR_m, _ = evaluate.propagate_moments(spec, policy)
    rel = max(_rel(JL_m, JL_a), _rel(JR_m, JR_a))
    checks.append(Check("cost_exact_agreement", rel <= 1e-8,
                        f"analytic ({JL_a:.10g}, {JR_a:.10g}) vs moments ({JL_m:.10g}, {JR_m:.10g}); rel {rel:.2e}"))

    mc = evaluate.monte_carlo(spec, policy, trajectories, seed=seed, workers=workers)
    for name, est, se, ref in (("L", mc.JL, mc.JL_se, JL_a), ("R", mc.JR, mc.JR_se, JR_a)):
        ok = abs(est - ref) <= 3 * se and _rel(est, ref) <= 0.02
        checks.append(Check(f"cost_monte_carlo_{name}", ok,
                            f"MC {est:.6g} +- {se:.3g} vs analytic {ref:.6g} ({abs(est - ref) / max(se, 1e-300):.2f} SE)"))

    few = min(trajectories, 1000)
    _, _, tr = evaluate.simulate_batch(spec, policy, seed, range(few), record=True)
    gap = float(np.max(np.abs(tr.x[:, :-1] - tr.xhat - tr.xtilde)))
    checks.append(Check("estimator_decomposition", gap <= 1e-12, f"max |x - xhat - xtilde| = {gap:.3e}"))
    recv = tr.gamma == 1
    reset = bool(np.all(tr.xtilde[recv] == 0.0))
    checks.append(Check("estimator_reset", reset, f"{int(recv.sum())} received stages"))

    mean, se = evaluate.sample_cross_moments(spec, policy, few, seed=seed)
    z = np.abs(mean) - 4 * se
    checks.append(Check("orthogonality_monte_carlo", bool(np.all(z <= 0)),
                        f"max |mean| - 4 SE = {float(z.max()):.3e} over {mean.size} entries"))

    nash = evaluate.nash_check(spec, sol, deviations=deviations, magnitude=magnitudes, seed=seed,
                               fd_step=fd_step, fd_tol=fd_tol)
    checks += nash.checks
    if not nash.passed:
        KRb = evaluate.remote_best_response(spec, sol.KL)
        _, JR_b, _ = evaluate.propagate_moments(spec, PolicySequence(sol.KL, KRb))
        checks.append(Check("remote_best_response_gap", JR_b >= JR_m - 1e-9,
                            f"exact remote best response to KL gives JR {JR_b:.10g} vs {JR_m:.10g}"))

    checks += completing_square_checks(spec, np.random.default_rng(seed))

    few = min(trajectories, 2000)
    a = evaluate.monte_carlo(spec, policy, few, seed=seed, workers=1)
    b = evaluate.monte_carlo(spec, policy, few, seed=seed, workers=2)
    checks.append(Check("monte_carlo_determinism", a.to_dict() == b.to_dict(), "1 vs 2 workers"))

    return CostReport(mc.JL, mc.JR, mc.JL_se, mc.JR_se, trajectories, seed, checks)


def open_loop_suite(spec, seed=0, tree_horizon=None, node_cap=openloop.NODE_CAP,
                    perturbations=100, identity_pairs=50):
    if tree_horizon is not None:
        spec = spec.with_horizon(tree_horizon)
    tree = openloop.build_tree(spec, node_cap=node_cap)
    rng = np.random.default_rng(seed)
    checks = []

    sums = [abs(float(q.sum()) - 1.0) for q in tree.prob]
    checks.append(Check("tree_probabilities", max(sums) <= 1e-12, f"max |sum - 1| = {max(sums):.2e}"))
    wm, wc, xm, xc = openloop.noise_moments(tree)
    err = max(np.abs(wm).max(), np.abs(wc - spec.Sigma_w).max(), np.abs(xm - spec.mu).max(),
              np.abs(xc - spec.Sigma_x0).max())
    checks.append(Check("discrete_moments", err <= 1e-12, f"max moment error {err:.2e}"))
    fil = openloop.filtration_report(tree)
    checks.append(Check("filtration_nesting", fil["nested"] and fil["coarser"], str(fil)))

    profile = openloop.solve_open_loop(tree, spec)
    res = openloop.max_residual(tree, spec, profile)
    checks.append(Check("open_loop_residual", res <= 1e-10, f"max residual {res:.3e}"))
    JL, JR = openloop.tree_cost(tree, spec, profile)

    th = openloop.costates(tree, spec, profile)
    tower = 0.0
    for k in range(tree.N + 1):
        for t in (th.thetaL[k], th.thetaR[k]):
            a = openloop.remote_mean(tree, k, openloop.child_mean(tree, k, t[None]))
            b = openloop.remote_mean_direct(tree, k, t[None])
            tower = max(tower, float(np.abs(a - b).max()))
    checks.append(Check("tower_property", tower <= 1e-12, f"max gap {tower:.2e}"))

    for player in ("L", "R"):
        gaps = openloop.perturbation_gaps(tree, spec, profile, player, perturbations, 1.0, rng)
        checks.append(Check(f"open_loop_perturbation_{player}", gaps.min() >= -1e-10,
                            f"min cost change {gaps.min():.3e} over {perturbations} deviations"))

    worst, convex = 0.0, np.inf
    for i in range(identity_pairs):
        player = "L" if i % 2 == 0 else "R"
        d = openloop.random_direction(tree, spec, player, rng)
        eps = float(rng.choice([1e-3, 1e-1, 0.37, 1.0])) * float(rng.choice([-1.0, 1.0]))
        worst = max(worst, openloop.variational_identity_check(tree, spec, profile, player, d, eps))
        convex = min(convex, openloop.second_variation(tree, spec, player, d))
    checks.append(Check("variational_identity", worst <= 1e-10, f"max residual {worst:.3e} over {identity_pairs} pairs"))
    checks.append(Check("convexity", convex >= 0.0, f"min second variation {convex:.3e}"))

    try:
        sol = riccati.solve(spec)
    except riccati.RiccatiError as exc:
        checks.append(Check("closed_loop_on_tree", False, str(exc)))
    else:
        policy = PolicySequence.from_solution(sol)
        cl_profile, st = openloop.policy_profile(tree, spec, policy)
        cross = max(float(np.abs(c).max()) for c in openloop.cross_moments(tree, st))
        checks.append(Check("orthogonality_tree", cross <= 1e-12, f"max |E[xhat xtilde']| = {cross:.2e}"))
        cl = openloop.tree_cost(tree, spec, cl_profile)
        mom = evaluate.propagate_moments(spec, policy)[:2]
        diff = max(abs(a - b) / max(1.0, abs(b)) for a, b in zip(cl, mom))
        checks.append(Check("cross_oracle", diff <= 1e-9,
                            f"closed-loop policy on tree ({cl[0]:.10g}, {cl[1]:.10g}) vs moments "
                            f"({mom[0]:.10g}, {mom[1]:.10g}); open-loop equilibrium ({JL:.10g}, {JR:.10g})"))
    return CostReport(JL, JR, 0.0, 0.0, 0, seed, checks)


def random_instance(seed, N=10):
    return random_spec(np.random.default_rng(seed), n=2, m1=2, m2=2, N=N)


def timed(fn, *args, **kwargs):
    t = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t
