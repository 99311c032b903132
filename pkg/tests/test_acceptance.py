"""The twelve acceptance criteria, one test each; a pass/fail line per criterion
is printed and collected into the terminal summary."""
import pytest

from rdslab.acceptance import CRITERIA, run_criterion

from conftest import ACCEPTANCE_LINES


@pytest.mark.parametrize("number,name,fn", CRITERIA, ids=[f"{n:02d}_{name}" for n, name, _ in CRITERIA])
def test_criterion(number, name, fn):
    r = run_criterion(number, name, fn, seed=0)
    ACCEPTANCE_LINES.append(r.line())
    print(r.line())
    assert r.passed, r.reason
