import numpy as np
import pytest

from checkscore.data import Dataset, FeatureCatalog, FeatureKind, FeatureSpec, fit_feature_stats
from checkscore.pool import CONSTRUCTION, VALIDATION


def small_catalog() -> FeatureCatalog:
    return FeatureCatalog(
        [
            FeatureSpec("a", FeatureKind.NUMERIC, "mg"),
            FeatureSpec("b", FeatureKind.NUMERIC),
            FeatureSpec("c", FeatureKind.CATEGORICAL),
            FeatureSpec("f1", FeatureKind.BINARY),
            FeatureSpec("f2", FeatureKind.BINARY),
        ]
    )


def toy_dataset(n: int = 400, seed: int = 0, split: str = "all") -> Dataset:
    """Labels driven by a >= 1 and f1, so a handful of rules are informative."""
    rng = np.random.default_rng(seed)
    a = rng.normal(0, 1, n)
    b = rng.normal(5, 2, n)
    c = rng.choice(np.array(["x", "y", "z"], dtype=object), n)
    f1 = rng.random(n) < 0.3
    f2 = rng.random(n) < 0.5
    logit = 2.5 * (a >= 1) + 2.0 * f1 + 1.0 * (c == "z") - 2.5
    y = (rng.random(n) < 1 / (1 + np.exp(-logit))).astype(int)
    cols = {"a": a, "b": b, "c": c, "f1": f1, "f2": f2}
    return Dataset.from_arrays(small_catalog(), cols, y, [f"g{i}" for i in range(n)], split)


@pytest.fixture
def catalog():
    return small_catalog()


@pytest.fixture
def toy():
    return toy_dataset()


@pytest.fixture
def toy_con():
    return toy_dataset(600, seed=1, split=CONSTRUCTION)


@pytest.fixture
def toy_val():
    return toy_dataset(400, seed=2, split=VALIDATION)


@pytest.fixture
def toy_stats(toy_con):
    return fit_feature_stats(toy_con)


def pytest_terminal_summary(terminalreporter):
    from _acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
