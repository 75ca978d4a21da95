"""Acceptance criteria, one test each.

Every test prints a single ``[PASS]``/``[FAIL]`` line (visible with ``-s``
and in the captured output of failures) and then asserts on the result.
"""

import pytest

from timo.acceptance import CRITERIA


def _check(number, **kw):
    result = CRITERIA[number](**kw)
    print(result.line())
    assert result.passed, result.line()


def test_criterion_01_parameter_counts():
    _check(1)


def test_criterion_02_stga_oracle_equivalence():
    _check(2)


def test_criterion_03_gyroscope_cardinality():
    _check(3)


def test_criterion_04_gradient_suite():
    _check(4)


def test_criterion_05_flops_ordering():
    _check(5)


def test_criterion_06_complexity_claims():
    _check(6)


def test_criterion_07_dstga_degeneracies():
    _check(7)


@pytest.mark.slow
def test_criterion_08_mim_pipeline():
    _check(8)


def test_criterion_09_finetune_surgery():
    _check(9)


def test_criterion_10_sampler_statistics():
    _check(10)
