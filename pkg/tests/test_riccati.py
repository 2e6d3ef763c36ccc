import numpy as np
import pytest
from hypothesis import given, strategies as st

from lrsng import riccati
from lrsng.model import GameSpec, composites, random_spec
from lrsng._linalg import is_pd, is_psd

from conftest import scalar_spec, zero_game


def transcribed_step(spec, PL1, PR1, OL1, OR1):
    """Straight transcription of the coupled update with explicit inverses."""
    A, BL, p = spec.A, spec.BL, spec.p
    Bc = np.hstack([spec.BL, spec.BR])
    LamL = np.block([[spec.SL, np.zeros((spec.m1, spec.m2))], [np.zeros((spec.m2, spec.m1)), spec.ML]])
    LamR = np.block([[spec.SR, np.zeros((spec.m1, spec.m2))], [np.zeros((spec.m2, spec.m1)), spec.MR]])
    GL = LamL + Bc.T @ PL1 @ Bc
    GR = spec.SR + BL.T @ PR1 @ BL
    KL = -np.linalg.inv(GL) @ Bc.T @ PL1 @ A
    KR = -np.linalg.inv(GR) @ BL.T @ PR1 @ A
    FR = A + BL @ KR
    FL = A + Bc @ KL
    PL = A.T @ PL1 @ A + spec.QL - KL.T @ GL @ KL
    PR = A.T @ PR1 @ A + spec.QR - KR.T @ GR @ KR + p * (FR.T @ OR1 @ FR - FR.T @ PR1 @ FR)
    OL = p * FR.T @ PL1 @ FR + (1 - p) * FR.T @ OL1 @ FR + spec.QL + KR.T @ spec.SL @ KR
    OR = FL.T @ OR1 @ FL + spec.QR + KL.T @ LamR @ KL
    return PL, PR, OL, OR, KL, KR, GL, GR


def _rand_psd(rng, n):
    G = rng.standard_normal((n, n))
    return G @ G.T


def test_zero_propagates():
    spec = zero_game(scalar_spec())
    Z = np.zeros((1, 1))
    r = riccati.backward_step(spec, Z, Z, Z, Z)
    for X in (r.PL, r.PR, r.OmegaL, r.OmegaR, r.KL, r.KR):
        assert not np.any(X)


def test_scalar_hand_case():
    spec = scalar_spec()
    one = np.ones((1, 1))
    r = riccati.backward_step(spec, one, one, one, one)
    assert np.allclose(r.GL, [[2.0, 1.0], [1.0, 2.0]], atol=1e-15)
    assert np.allclose(r.KL, [[-1 / 3], [-1 / 3]], atol=1e-15)


def test_scalar_closed_form_KR():
    a, bl, sr, P = 1.3, 0.7, 2.0, 1.9
    spec = scalar_spec(A=[[a]], BL=[[bl]], BR=[[0.0]], SR=[[sr]])
    r = riccati.backward_step(spec, np.eye(1), np.array([[P]]), np.eye(1), np.eye(1))
    assert r.KR[0, 0] == pytest.approx(-bl * P * a / (sr + bl ** 2 * P), rel=1e-14)


def test_last_step_matches_transcription(sec5):
    sol = riccati.solve(sec5)
    ref = transcribed_step(sec5, sec5.PL_term, sec5.PR_term, sec5.PL_term, sec5.PR_term)
    got = (sol.PL[50], sol.PR[50], sol.OmegaL[50], sol.OmegaR[50], sol.KL[50], sol.KR[50],
           sol.GL[50], sol.GR[50])
    for g, e in zip(got, ref):
        assert np.max(np.abs(g - e)) <= 1e-12


@given(st.integers(0, 2 ** 32 - 1))
def test_random_step_matches_transcription(seed):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng, n=3, m1=2, m2=1)
    mats = [_rand_psd(rng, 3) for _ in range(4)]
    r = riccati.backward_step(spec, *mats)
    ref = transcribed_step(spec, *mats)
    for g, e in zip(r, ref):
        assert np.max(np.abs(g - e)) <= 1e-9 * max(1.0, np.max(np.abs(e)))


def test_sec5_feasible(sec5):
    sol = riccati.solve(sec5)
    assert sol.N == 50
    assert sol.PL.shape == (52, 2, 2) and sol.KL.shape == (51, 4, 2) and sol.KR.shape == (51, 2, 2)
    assert all(is_pd(G) for G in sol.GL) and all(is_pd(G) for G in sol.GR)
    assert all(is_psd(P) for P in sol.PL)
    rep = riccati.gain_psd_report(sol)
    assert rep == {"GL": [], "GR": [], "PL": []}


def test_terminal_conditions_and_symmetry(sec5):
    sol = riccati.solve(sec5)
    for X, T in ((sol.PL, sec5.PL_term), (sol.OmegaL, sec5.PL_term),
                 (sol.PR, sec5.PR_term), (sol.OmegaR, sec5.PR_term)):
        assert np.array_equal(X[-1], T)
        assert np.max(np.abs(X - np.swapaxes(X, 1, 2))) <= 1e-10


def test_zero_weights_zero_gains(sec5):
    sol = riccati.solve(zero_game(sec5))
    assert not sol.KL.any() and not sol.KR.any()


def test_sec5_gains_stabilize(sec5):
    sol = riccati.solve(sec5)
    d = np.max(np.abs(np.diff(sol.KL, axis=0)), axis=(1, 2))
    # changes die out going back from the terminal stage
    assert d[0] < 1e-10 and d[-1] > 1e-2
    assert np.all(d[:30] < 1e-3)


def test_gain_convergence_regression(sec5):
    # frozen value of the convergence horizon on the example at 1e-6
    assert riccati.gain_convergence(riccati.solve(sec5), 1e-6) == 22


def test_gain_convergence_trivial(sec5):
    sol = riccati.solve(zero_game(sec5))
    assert riccati.gain_convergence(sol, 1e-6) == sec5.N - 1
    assert riccati.gain_convergence(riccati.solve(sec5), 0.0) == -1
    with pytest.raises(ValueError):
        riccati.gain_convergence(riccati.solve(sec5.with_horizon(0)), 1e-6)


def test_analytic_costs_zero():
    Z = np.zeros((1, 1))
    spec = scalar_spec(Sigma_w=Z, Sigma_x0=Z, mu=[0.0])
    assert riccati.analytic_costs(spec, riccati.solve(spec)) == (0.0, 0.0)


def test_analytic_costs_full_arrival():
    rng = np.random.default_rng(11)
    spec = random_spec(rng, n=2, N=6, p=1.0)
    spec = GameSpec(**{**spec.to_dict(), "mu": np.zeros(2)})
    sol = riccati.solve(spec)
    JL, _ = riccati.analytic_costs(spec, sol)
    ref = np.trace(sol.PL[0] @ spec.Sigma_x0) + sum(np.trace(spec.Sigma_w @ sol.PL[k + 1])
                                                    for k in range(spec.N + 1))
    assert JL == pytest.approx(ref, rel=1e-13)


def test_initial_moments(sec5):
    Mh, Mt = riccati.initial_moments(sec5)
    assert np.allclose(Mh, 0.5 * np.eye(2)) and np.allclose(Mt, 0.5 * np.eye(2))


@given(st.integers(0, 2 ** 32 - 1))
def test_one_step_square_completion(seed):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng, n=2, m1=2, m2=2)
    PL1 = _rand_psd(rng, 2)
    r = riccati.backward_step(spec, PL1, _rand_psd(rng, 2), _rand_psd(rng, 2), _rand_psd(rng, 2))
    c = composites(spec)
    F = spec.A + c.B_cal @ r.KL
    alt = spec.QL + r.KL.T @ c.LambdaL @ r.KL + F.T @ PL1 @ F
    assert np.max(np.abs(alt - r.PL)) <= 1e-10 * max(1.0, np.max(np.abs(r.PL)))


@given(st.integers(0, 2 ** 32 - 1), st.floats(0.0, 1.0))
def test_PL_stays_psd(seed, p):
    spec = random_spec(np.random.default_rng(seed), n=3, m1=1, m2=2, N=15, p=p)
    sol = riccati.solve(spec)
    assert riccati.gain_psd_report(sol)["PL"] == []


def test_gain_minimizes_quadratic_form():
    rng = np.random.default_rng(5)
    spec = random_spec(rng)
    PL1 = _rand_psd(rng, 2)
    r = riccati.backward_step(spec, PL1, PL1, PL1, PL1)
    c = composites(spec)
    lin = -c.B_cal.T @ PL1 @ spec.A

    def form(K):
        return np.trace(K.T @ r.GL @ K) - 2 * np.trace(K.T @ lin)

    f0 = form(r.KL)
    for _ in range(100):
        D = rng.standard_normal(r.KL.shape)
        D *= 1e-3 / np.linalg.norm(D)
        assert form(r.KL + D) >= f0


def test_infeasible_reports_stage():
    spec = scalar_spec(SR=[[-5.0]], N=3)
    with pytest.raises(riccati.RiccatiInfeasible) as e:
        riccati.solve(spec)
    assert e.value.stage == 3 and e.value.which == "GR"
    assert str(e.value) == "Riccati infeasible at stage 3: GR not positive definite"


def test_solution_read_only(sec5):
    sol = riccati.solve(sec5)
    with pytest.raises(ValueError):
        sol.KL[0, 0, 0] = 1.0
