import numpy as np

from roadpose.gradcheck import TERMS, check_gradients, random_prior


def test_synthetic_prior_jacobians_match_finite_differences():
    checks = check_gradients(30, seed=1)
    assert {c.term for c in checks} == set(TERMS)
    for c in checks:
        assert c.configurations == 30 and c.ok(1e-5), c


def test_random_prior_jacobians_match_finite_differences():
    checks = check_gradients(30, seed=2, prior=random_prior(np.random.default_rng(5)))
    for c in checks:
        assert c.ok(1e-5), c


def test_broken_jacobian_is_detected_and_named():
    checks = {c.term: c for c in check_gradients(3, seed=0, break_term="normal")}
    assert not checks["normal"].ok()
    assert all(c.ok() for t, c in checks.items() if t != "normal")
