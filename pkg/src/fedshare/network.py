"""D2D wireless layer, social closeness and the constrained client graph."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .distributions import ClientProfile, SharingPlan, pairwise_emd
from .errors import DimensionError, InfeasibleShare


@dataclass(frozen=True)
class ChannelParams:
    bandwidth: float = 100e3  # Hz
    transmit_power: float = 0.1  # W
    noise_psd: float = 10 ** (-174 / 10) * 1e-3  # W/Hz, -174 dBm/Hz
    interference: float = 0.0  # W
    mean_snr_db: float = 10.0

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.noise_psd <= 0:
            raise ValueError("noise_psd must be positive")
        if self.interference < 0:
            raise ValueError("interference must be non-negative")
        if self.transmit_power <= 0:
            raise ValueError("transmit_power must be positive")

    @property
    def noise_floor(self) -> float:
        """``I + B * N0`` in watts."""
        return self.interference + self.bandwidth * self.noise_psd

    def snr(self, gain):
        return self.transmit_power * np.asarray(gain, dtype=np.float64) / self.noise_floor


def multicast_rate(gain, params: ChannelParams):
    """Shannon rate ``B log2(1 + P h / (I + B N0))`` in bits/s; vectorised over ``gain``."""
    g = np.asarray(gain, dtype=np.float64)
    if np.any(g < 0):
        raise ValueError("gain must be non-negative")
    rate = params.bandwidth * np.log2(1.0 + params.snr(g))
    return float(rate) if rate.ndim == 0 else rate


@dataclass(frozen=True)
class LinkMatrix:
    gains: np.ndarray
    rates: np.ndarray

    def __post_init__(self):
        for name in ("gains", "rates"):
            a = np.array(getattr(self, name), dtype=np.float64)
            if a.ndim != 2 or a.shape[0] != a.shape[1]:
                raise DimensionError(f"{name} must be a square matrix")
            if np.any(a < 0):
                raise ValueError(f"{name} must be non-negative")
            if np.any(np.diag(a) != 0):
                raise ValueError(f"{name} must have a zero diagonal")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if self.gains.shape != self.rates.shape:
            raise DimensionError("gains and rates disagree in size")

    @property
    def size(self) -> int:
        return self.rates.shape[0]

    @classmethod
    def from_gains(cls, gains, params: ChannelParams) -> "LinkMatrix":
        g = np.array(gains, dtype=np.float64)
        return cls(g, multicast_rate(g, params))

    @classmethod
    def from_rates(cls, rates) -> "LinkMatrix":
        """Links given directly as rates (the gains are left at zero)."""
        r = np.array(rates, dtype=np.float64)
        return cls(np.zeros_like(r), r)

    def rate(self, k: int, j: int) -> float:
        return float(self.rates[k, j])


def draw_channel_gains(K: int, params: ChannelParams, seed) -> LinkMatrix:
    """Reciprocal Rayleigh block-fading gains around the configured mean SNR.

    Power gains are exponential with mean ``snr * (I + B N0) / P``.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    rng = np.random.default_rng(seed)
    mean_gain = 10 ** (params.mean_snr_db / 10) * params.noise_floor / params.transmit_power
    gains = np.zeros((K, K))
    iu = np.triu_indices(K, k=1)
    gains[iu] = rng.exponential(mean_gain, size=len(iu[0]))
    gains = gains + gains.T
    return LinkMatrix.from_gains(gains, params)


def sharing_delay(clustering, links: LinkMatrix, a: float, plan: SharingPlan | None = None) -> float:
    """Worst-link multicast delay ``max a n_m^s / v_{m,c}`` over all clusters, in seconds."""
    plan = plan if plan is not None else clustering.plan
    worst = 0.0
    for head, group in clustering.members.items():
        n_s = plan.share_of(head)
        if n_s <= 0:
            continue
        for c in group:
            v = links.rate(head, c)
            if v <= 0:
                raise InfeasibleShare(f"head {head} shares {n_s} samples over a zero-rate link to {c}")
            worst = max(worst, a * n_s / v)
    return worst


def max_sharable_volume(head: int, members: Iterable[int], links: LinkMatrix, T_th: float, a: float, n_m: int) -> int:
    """Largest share meeting both the delay budget and the head's own data size."""
    members = list(members)
    if not members:
        raise ValueError("cluster has no members")
    if T_th <= 0:
        raise ValueError("T_th must be positive")
    v = min(links.rate(head, c) for c in members)
    if v <= 0:
        return 0
    if math.isinf(T_th):
        return int(n_m)
    n_s = min(math.floor(T_th * v / a), int(n_m))
    while n_s > 0 and a * n_s / v > T_th:
        n_s -= 1
    return max(n_s, 0)


@dataclass(frozen=True)
class SocialGraph:
    closeness: np.ndarray

    def __post_init__(self):
        e = np.array(self.closeness, dtype=np.float64)
        if e.ndim != 2 or e.shape[0] != e.shape[1]:
            raise DimensionError("closeness must be a square matrix")
        if not np.array_equal(e, e.T):
            raise ValueError("closeness must be symmetric")
        if np.any(np.diag(e) != 0):
            raise ValueError("closeness must have a zero diagonal")
        if np.any((e < 0) | (e > 1)):
            raise ValueError("closeness must lie in [0, 1]")
        e.setflags(write=False)
        object.__setattr__(self, "closeness", e)

    @property
    def size(self) -> int:
        return self.closeness.shape[0]


def gen_social_graph(K: int, seed) -> SocialGraph:
    if K < 1:
        raise ValueError("K must be at least 1")
    rng = np.random.default_rng(seed)
    e = np.zeros((K, K))
    iu = np.triu_indices(K, k=1)
    e[iu] = rng.uniform(0.0, 1.0, size=len(iu[0]))
    return SocialGraph(e + e.T)


@dataclass(frozen=True)
class ConstrainedGraph:
    """Client graph keeping only edges that pass the closeness and rate gates.

    ``weights[k, j]`` is the pairwise EMD of the two clients; it is only
    meaningful where ``adjacency[k, j]`` is set.
    """

    adjacency: np.ndarray
    weights: np.ndarray
    emd: np.ndarray  # per-client EMD to the global distribution

    @property
    def size(self) -> int:
        return self.adjacency.shape[0]

    def neighbors(self, k: int) -> list[int]:
        return [int(j) for j in np.flatnonzero(self.adjacency[k])]

    def has_edge(self, k: int, j: int) -> bool:
        return bool(self.adjacency[k, j])

    def edges(self) -> list[tuple[int, int, float]]:
        iu = np.triu_indices(self.size, k=1)
        return [(int(k), int(j), float(self.weights[k, j])) for k, j in zip(*iu) if self.adjacency[k, j]]

    def to_edge_list(self) -> str:
        """One ``k j weight`` line per undirected edge."""
        return "".join(f"{k} {j} {w!r}\n" for k, j, w in self.edges())


def build_constrained_graph(
    profiles: Sequence[ClientProfile],
    social: SocialGraph,
    links: LinkMatrix,
    e_th: float,
    v_th: float,
    g=None,
) -> ConstrainedGraph:
    """Keep edge ``(k, j)`` iff ``e_kj >= e_th`` and ``v_kj >= v_th``.

    Clients without samples are left isolated.
    """
    from .distributions import emd_to_global, global_distribution

    K = len(profiles)
    if social.size != K or links.size != K:
        raise DimensionError(f"inconsistent sizes: {K} profiles, social {social.size}, links {links.size}")
    if [p.client_id for p in profiles] != list(range(K)):
        raise DimensionError("profiles must be ordered by client id 0..K-1")
    if g is None:
        g = global_distribution(profiles)
    live = np.array([p.defined for p in profiles], dtype=bool)
    adj = (social.closeness >= e_th) & (links.rates >= v_th) & live[:, None] & live[None, :]
    np.fill_diagonal(adj, False)
    weights = np.zeros((K, K))
    for k in range(K):
        for j in range(k + 1, K):
            if live[k] and live[j]:
                weights[k, j] = weights[j, k] = pairwise_emd(profiles[k].dist, profiles[j].dist)
    emd = np.array([emd_to_global(p.dist, g) if p.defined else 0.0 for p in profiles])
    for arr in (adj, weights, emd):
        arr.setflags(write=False)
    return ConstrainedGraph(adj, weights, emd)


def rate_threshold_for(T_th: float, a: float) -> float:
    """Rate needed to move a single sample within ``T_th``."""
    return a / T_th
