"""Small random fusion instances shared by the decode and acceptance tests."""

import numpy as np

from scalefusion.core import ScaleSet
from scalefusion.providers import PositionwiseToyAM, train_ngram


def random_instance(rng, k, n, lm_order=2):
    """(toy AM with n rows, n-gram LM, positive random agnostic scales)."""
    am = PositionwiseToyAM(np.log(rng.dirichlet(np.full(k, 0.8), size=n)))
    corpus = [tuple(rng.integers(0, k, size=int(rng.integers(2, 7)))) for _ in range(15)]
    lm = train_ngram(corpus, order=lm_order, k_s=float(rng.uniform(0.05, 0.5)), vocab_size=k)
    scales = ScaleSet("agnostic", float(rng.uniform(0.3, 2.0)), float(rng.uniform(0.0, 2.0)))
    return am, lm, scales
