import numpy as np
import pytest

from sdnet.data import PhantomSpec, generate_phantom
from sdnet.networks import ArchDescriptor, init_params


def tiny_arch(image_size=32, base=4):
    return ArchDescriptor(image_size=image_size, base_width=base, recon_width=2 * base, disc_width=base)


@pytest.fixture(scope="session")
def phantom_spec():
    return PhantomSpec(image_size=64, seed=11)


@pytest.fixture(scope="session")
def phantom_samples(phantom_spec):
    return generate_phantom(phantom_spec, 80)


@pytest.fixture()
def tiny_model():
    return init_params(tiny_arch(), seed=0)


def random_slice(rng, size=32):
    from sdnet.data import ImageSlice

    return ImageSlice(pixels=rng.uniform(-1, 1, size=(size, size)), spacing=1.37)
