import pytest

from patchood import data


def small_spec(**overrides) -> data.FixtureSpec:
    base = dict(n_classes=4, d=16, d_k=8, n_patches=8, images_per_class=4,
                test_images_per_class=2, ood_images=12, ood_classes=2, seed=7)
    base.update(overrides)
    return data.FixtureSpec(**base)


@pytest.fixture
def small_fixture():
    return data.generate_fixture(small_spec())


def random_prob_rows(rng, n, m):
    """Random rows on the simplex with no zero entries."""
    raw = rng.random((n, m)) + 1e-3
    return raw / raw.sum(axis=1, keepdims=True)
