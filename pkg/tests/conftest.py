import itertools

import numpy as np
import pytest

from windbon.game import TabularPolicy, preference_from_rewards


def random_game(rng, X=3, Y=5, ties=False, rho=False):
    """Gaussian rewards, or small integers when ``ties`` so that equal rewards occur."""
    if ties:
        r = rng.integers(0, 3, size=(X, Y)).astype(float)
    else:
        r = rng.standard_normal((X, Y))
    w = rng.dirichlet(np.ones(X)) if rho else None
    return preference_from_rewards(r, w)


def random_policy(rng, X=3, Y=5, alpha=1.0):
    return TabularPolicy.from_probs(rng.dirichlet(np.full(Y, alpha), size=X))


def dense_pref(rewards):
    """P built entry by entry from the three-case rule."""
    X, Y = rewards.shape
    P = np.empty((X, Y, Y))
    for x in range(X):
        for a in range(Y):
            for b in range(Y):
                ra, rb = rewards[x, a], rewards[x, b]
                P[x, a, b] = 1.0 if ra > rb else (0.5 if ra == rb else 0.0)
    return P


def brute_bon(probs, rewards, n):
    """Distribution of best-of-n over all ordered n-tuples, ties split uniformly."""
    Y = probs.size
    out = np.zeros(Y)
    for tup in itertools.product(range(Y), repeat=n):
        w = np.prod(probs[list(tup)])
        if w == 0:
            continue
        best = max(rewards[i] for i in tup)
        winners = [i for i in tup if rewards[i] == best]
        for i in winners:
            out[i] += w / len(winners)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def two_response():
    """r(a) > r(b): the preference margin (P pi)(a) - (P pi)(b) is 1/2 for every pi."""
    return preference_from_rewards(np.array([[1.0, 0.0]]))


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))
