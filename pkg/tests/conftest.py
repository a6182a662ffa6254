import numpy as np
import pytest

from cfdiag import directions as dx
from cfdiag import world as tw


def style_with_intensity(world, attr, alpha, base=None):
    """Style whose oracle intensity for attr is exactly alpha (others untouched)."""
    j = world.attribute_index(attr)
    lo, hi = world.channel_pairs[j]
    s = np.zeros(world.config.style_dim) if base is None else base.copy()
    target_pre = np.arctanh(alpha) - world.bias[j]
    s[[lo, hi]] = world.mixing[j] * target_pre
    return s


@pytest.fixture(scope="session")
def world42():
    return tw.World(tw.WorldConfig(seed=42))


@pytest.fixture(scope="session")
def relevance42(world42):
    return dx.probe_relevance(world42, n_samples=8, step=0.5)


@pytest.fixture(scope="session")
def space42(world42, relevance42):
    return dx.build_space(world42, relevance42, list(world42.config.attributes))


@pytest.fixture(scope="session")
def balanced_clf(world42):
    ds = tw.make_dataset(world42, "stripes", "dots", tw.balanced_cells(250))
    return tw.train_target(ds, hyper=tw.TrainConfig(seed=11))


@pytest.fixture(scope="session")
def confounded_clf(world42):
    # scaled-down imbalanced design, same 100:1 cell ratio
    ds = tw.make_dataset(world42, "stripes", "dots", tw.confounded_cells(400, 4))
    return tw.train_target(ds, hyper=tw.TrainConfig(seed=12))


@pytest.fixture(scope="session")
def keypoint_model(world42):
    ds = tw.make_keypoint_dataset(world42, 500)
    return tw.train_target(ds, hyper=tw.TrainConfig(seed=13))


@pytest.fixture(scope="session")
def grid_clf(world42):
    # capped training keeps outputs off the sigmoid rails, so the optimizer-vs-
    # grid comparison is not dominated by asymptotic tail crumbs
    ds = tw.make_dataset(world42, "stripes", "dots", tw.balanced_cells(250))
    return tw.train_target(ds, hyper=tw.TrainConfig(seed=11, max_epochs=100))
