import numpy as np
import pytest
from hypothesis import given, strategies as st

from lrsng.model import (GameSpec, StructureError, composites, random_spec, sec5_spec,
                         validate)

from conftest import scalar_spec


def _with(spec, **kw):
    return GameSpec(**{**spec.to_dict(), **kw})


def test_sec5_is_valid(sec5):
    assert validate(sec5) == []


def test_zero_SL_reported(sec5):
    rep = validate(_with(sec5, SL=np.zeros((2, 2))))
    assert "SL not positive definite" in rep


def test_p_out_of_range(sec5):
    assert "p out of [0,1]" in validate(_with(sec5, p=1.3))
    assert "p out of [0,1]" in validate(_with(sec5, p=-0.1))
    assert validate(_with(sec5, p=0.0)) == [] and validate(_with(sec5, p=1.0)) == []


def test_asymmetry_threshold(sec5):
    Q = np.eye(2)
    Q[0, 1] = 5e-11
    spec = _with(sec5, QL=Q)
    assert validate(spec) == []
    assert spec.QL[0, 1] == spec.QL[1, 0]
    Q[0, 1] = 1e-6
    assert "QL not symmetric" in validate(_with(sec5, QL=Q))


def test_negative_weight_not_psd(sec5):
    assert "QR not positive semidefinite" in validate(_with(sec5, QR=-np.eye(2)))
    # semidefinite is fine for state weights
    assert validate(_with(sec5, QR=np.diag([1.0, 0.0]))) == []


def test_shape_and_finiteness(sec5):
    rep = validate(_with(sec5, BR=np.ones((3, 2))))
    assert any(r.startswith("BR has shape") for r in rep)
    A = np.array(sec5.A)
    A[0, 0] = np.nan
    assert "A has non-finite entries" in validate(_with(sec5, A=A))


def test_one_entry_per_violation(sec5):
    rep = validate(_with(sec5, SL=np.zeros((2, 2)), MR=-np.eye(2), p=2.0))
    assert sorted(rep) == sorted(["SL not positive definite", "MR not positive definite",
                                  "p out of [0,1]"])


def test_composites_sec5(sec5):
    c = composites(sec5)
    assert np.array_equal(c.B_cal, [[0.3, 0.2, 0.1, 0.2], [0.4, -0.1, 0.0, 0.1]])
    assert np.array_equal(c.LambdaL, np.eye(4))
    assert np.array_equal(c.LambdaR, np.eye(4))


def test_composites_zero_inputs(sec5):
    c = composites(_with(sec5, BL=np.zeros((2, 2)), BR=np.zeros((2, 2))))
    assert np.array_equal(c.B_cal, np.zeros((2, 4)))


def test_composites_blocks():
    rng = np.random.default_rng(3)
    spec = random_spec(rng, n=3, m1=2, m2=1)
    c = composites(spec)
    assert np.array_equal(c.B_cal[:, :2], spec.BL) and np.array_equal(c.B_cal[:, 2:], spec.BR)
    assert np.array_equal(c.LambdaL[:2, :2], spec.SL) and np.array_equal(c.LambdaL[2:, 2:], spec.ML)
    assert np.array_equal(c.LambdaR[:2, :2], spec.SR) and np.array_equal(c.LambdaR[2:, 2:], spec.MR)
    assert not c.LambdaL[:2, 2:].any() and not c.LambdaR[2:, :2].any()
    again = composites(spec)
    assert np.array_equal(again.B_cal, c.B_cal) and np.array_equal(again.LambdaR, c.LambdaR)


def test_composites_structure_error(sec5):
    with pytest.raises(StructureError):
        composites(_with(sec5, BL=np.ones((3, 2))))


def test_spec_is_immutable(sec5):
    with pytest.raises(ValueError):
        sec5.A[0, 0] = 3.0
    with pytest.raises(AttributeError):
        sec5.p = 0.2


def test_with_horizon_and_equals(sec5):
    s = sec5.with_horizon(3)
    assert s.N == 3 and sec5.N == 50
    assert s.with_horizon(50).equals(sec5)
    assert not s.equals(sec5)


def _sym_from_eigs(rng, eigs):
    Qm, _ = np.linalg.qr(rng.standard_normal((len(eigs), len(eigs))))
    return Qm @ np.diag(eigs) @ Qm.T


@given(st.integers(0, 2 ** 32 - 1),
       st.lists(st.sampled_from([-1.0, -1e-3, 0.0, 1e-3, 1.0, 4.0]), min_size=2, max_size=2),
       st.lists(st.sampled_from([-1.0, -1e-3, 1e-3, 1.0, 4.0]), min_size=2, max_size=2))
def test_validate_matches_eigen_recheck(seed, q_eigs, s_eigs):
    # independent re-check with eigenvalues chosen well away from the thresholds
    rng = np.random.default_rng(seed)
    QL = _sym_from_eigs(rng, q_eigs)
    SL = _sym_from_eigs(rng, s_eigs)
    rep = validate(_with(sec5_spec(), QL=QL, SL=SL))
    assert ("QL not positive semidefinite" in rep) == (min(q_eigs) < 0)
    assert ("SL not positive definite" in rep) == (min(s_eigs) <= 0)
    assert (rep == []) == (min(q_eigs) >= 0 and min(s_eigs) > 0)


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 4), st.integers(1, 3), st.integers(1, 3))
def test_random_specs_valid(seed, n, m1, m2):
    spec = random_spec(np.random.default_rng(seed), n=n, m1=m1, m2=m2)
    assert validate(spec) == []


def test_scalar_helper_valid():
    assert validate(scalar_spec()) == []
