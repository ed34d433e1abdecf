import numpy as np
import pytest

from infocrit.errors import UsageError
from infocrit.simulate import (
    GMM_CONDITIONS,
    FaCondition,
    GmmCondition,
    derive_seed,
    generate_fa,
    generate_gmm,
)


def test_seed_tree_is_pure():
    assert derive_seed(1, "fa", "c0.9_s1_J400", 0) == derive_seed(1, "fa", "c0.9_s1_J400", 0)
    assert derive_seed(1, "fa", "c0.9_s1_J400", 0) != derive_seed(1, "fa", "c0.9_s1_J400", 1)
    assert derive_seed(1, "a") != derive_seed(2, "a")
    assert 0 <= derive_seed(7, "x") < 2**63


def test_fa_deterministic():
    a = generate_fa(FaCondition(0.6, 0.5, 400, replicate=2))
    b = generate_fa(FaCondition(0.6, 0.5, 400, replicate=2))
    assert a.y.tobytes() == b.y.tobytes()
    assert a.meta == b.meta


def test_fa_population_covariance():
    cond = FaCondition(0.9, 1.0, 100_000)
    y = generate_fa(cond).y
    pop = cond.population_covariance()
    assert np.max(np.abs(np.cov(y, rowvar=False) - pop) / pop.max()) <= 0.02
    np.testing.assert_allclose(cond.loadings, 0.9 * np.array([0.9, 0.8, 0.7, 0.6, 0.5, 0.4]))


def test_fa_no_factor_uncorrelated():
    y = generate_fa(FaCondition(0.0, 1.0, 20_000)).y
    corr = np.corrcoef(y, rowvar=False)
    off = corr[~np.eye(6, dtype=bool)]
    assert np.max(np.abs(off)) < 4 / np.sqrt(20_000)


def test_fa_invalid_condition():
    with pytest.raises(UsageError):
        FaCondition(0.3, -1.0, 400)


@pytest.mark.parametrize("name", GMM_CONDITIONS)
def test_gmm_design_table(name):
    cond = GmmCondition(name)
    data = generate_gmm(cond)
    assert data.n_clusters == (250 if name[0] == "b" else 400)
    assert all(t.tolist() == [0, 1, 2, 3, 4] for t in data.times)
    assert cond.beta[:, 2].tolist() == [0.0, 0.0]


def test_gmm_deterministic():
    a = generate_gmm(GmmCondition("us2", replicate=4))
    b = generate_gmm(GmmCondition("us2", replicate=4))
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.y, b.y))


def test_gmm_class_fraction_and_covariance():
    cond = GmmCondition("ug1")
    # enlarge J while keeping every other setting
    big = type("Big", (GmmCondition,), {"J": property(lambda self: 100_000)})("ug1")
    data = generate_gmm(big)
    classes = np.asarray(data.meta["classes"])
    assert abs(np.mean(classes == 0) - cond.pi1) <= 0.005
    y = np.stack(data.y)
    t = np.arange(5.0)
    z = np.column_stack([np.ones(5), t])
    for k in range(2):
        pop = z @ cond.psi(k) @ z.T + cond.sigma_e**2 * np.eye(5)
        sample = np.cov(y[classes == k], rowvar=False)
        assert np.max(np.abs(sample - pop)) / pop.max() <= 0.05
        mean = y[classes == k].mean(0)
        np.testing.assert_allclose(mean, cond.beta[k, 0] + cond.beta[k, 1] * t, atol=0.1)


def test_gmm_unknown_condition():
    with pytest.raises(UsageError):
        GmmCondition("zz9")
