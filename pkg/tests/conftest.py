import sys

import numpy as np
import pytest

from lcodec import codec, entropy, toy


@pytest.fixture(scope="session")
def toy_images():
    rng = np.random.default_rng(1234)
    return [toy.synthetic_image(64, 64, rng) for _ in range(12)]


@pytest.fixture(scope="session")
def toy_pair(toy_images):
    return toy.toy_codec(4, 24.0, calib_images=toy_images[:6])


@pytest.fixture(scope="session")
def toy_models(toy_pair, toy_images):
    enc, _ = toy_pair
    lats = [codec.analysis(im, enc) for im in toy_images]
    return entropy.train_entropy_model(lats)


@pytest.fixture(scope="session")
def gm_corpus():
    return toy.gauss_markov_latents(12, 6, 12, 12, seed=7)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in acceptance.RESULTS:
            terminalreporter.write_line(line)
