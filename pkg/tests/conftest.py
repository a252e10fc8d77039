from __future__ import annotations

import numpy as np
import pytest

from fedshare.distributions import ClientProfile, LabelDistribution
from fedshare.network import ChannelParams, LinkMatrix, build_constrained_graph, draw_channel_gains, gen_social_graph


def one_hot(label, Y=10):
    return LabelDistribution.one_hot(label, Y)


def uniform(Y=10):
    return LabelDistribution.uniform(Y)


def profile(k, n, dist):
    return ClientProfile(k, n, dist if isinstance(dist, LabelDistribution) else LabelDistribution(dist))


def dirichlet_profiles(K, seed, Y=10, alpha=0.5, n=100):
    """Equal-size clients with multinomial counts around Dirichlet proportions."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(K):
        counts = rng.multinomial(n, rng.dirichlet(np.full(Y, alpha)))
        out.append(ClientProfile(k, n, LabelDistribution.from_counts(counts)))
    return out


def open_instance(K, seed, **kw):
    """Random instance with both thresholds disabled (complete constrained graph)."""
    profiles = dirichlet_profiles(K, seed, **kw)
    links = draw_channel_gains(K, ChannelParams(), [seed, 1])
    social = gen_social_graph(K, [seed, 2])
    graph = build_constrained_graph(profiles, social, links, 0.0, 0.0)
    return profiles, links, social, graph


def complete_links(K, rate=1e6):
    r = np.full((K, K), float(rate))
    np.fill_diagonal(r, 0.0)
    return LinkMatrix.from_rates(r)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
