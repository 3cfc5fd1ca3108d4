import numpy as np
import pytest

from meshsplat import scene as S


@pytest.fixture(scope="session")
def small_dataset():
    """Tiny 2-bone dataset shared across fast tests."""
    return S.generate_dataset(n_bones=2, n_pose_frames=4, n_train_views=2,
                              n_val_views=2, image_size=64, n_theta=10,
                              n_phi=4, seed=3)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
