import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lrsng.model import GameSpec, sec5_spec

settings.register_profile("lrsng", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("lrsng")

_CRITERIA = []


@pytest.fixture
def sec5():
    return sec5_spec()


@pytest.fixture
def criterion():
    """Record one acceptance line; the lines are printed at the end of the run."""

    def record(label, ok, detail):
        _CRITERIA.append((label, bool(ok), detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label, ok, detail in sorted(_CRITERIA, key=lambda t: t[0]):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {label}: {detail}")


def scalar_spec(**kw):
    """One-state, one-input-per-player game with unit data unless overridden."""
    base = dict(n=1, m1=1, m2=1, A=[[1.0]], BL=[[1.0]], BR=[[1.0]],
                QL=[[1.0]], QR=[[1.0]], SL=[[1.0]], SR=[[1.0]], ML=[[1.0]], MR=[[1.0]],
                PL_term=[[1.0]], PR_term=[[1.0]], p=0.5, mu=[0.0],
                Sigma_x0=[[1.0]], Sigma_w=[[1.0]], N=1)
    base.update(kw)
    return GameSpec(**base)


def zero_game(spec):
    Z = np.zeros((spec.n, spec.n))
    return spec.__class__(**{**spec.to_dict(), "QL": Z, "QR": Z, "PL_term": Z, "PR_term": Z})
