"""Label distributions, EMD metrics and the data-sharing mixture arithmetic.

"EMD" here is the L1 distance between label marginals, not an
optimal-transport distance. All functions are pure and accept either a
:class:`LabelDistribution` or any 1-D array-like of probabilities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConstraintViolation, DimensionError, EmptyPopulationError

PROB_TOL = 1e-9


@dataclass(frozen=True)
class LabelDistribution:
    """Probability vector over ``Y`` classes."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=np.float64).reshape(-1)
        if p.size == 0:
            raise DimensionError("distribution must have at least one class")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError("probabilities must be finite and non-negative")
        if abs(p.sum() - 1.0) > PROB_TOL:
            raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @classmethod
    def from_counts(cls, counts) -> "LabelDistribution":
        c = np.asarray(counts, dtype=np.float64)
        total = c.sum()
        if total <= 0:
            raise EmptyPopulationError("cannot normalise an all-zero histogram")
        return cls(c / total)

    @classmethod
    def uniform(cls, num_classes: int) -> "LabelDistribution":
        return cls(np.full(num_classes, 1.0 / num_classes))

    @classmethod
    def one_hot(cls, label: int, num_classes: int) -> "LabelDistribution":
        p = np.zeros(num_classes)
        p[label] = 1.0
        return cls(p)

    @property
    def num_classes(self) -> int:
        return self.probs.size

    def __len__(self):
        return self.probs.size

    def __array__(self, dtype=None, copy=None):
        return self.probs if dtype is None else self.probs.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, LabelDistribution):
            return NotImplemented
        return np.array_equal(self.probs, other.probs)

    def __hash__(self):
        return hash(self.probs.tobytes())


@dataclass(frozen=True)
class ClientProfile:
    """Sample count and label distribution of one client.

    ``dist`` is ``None`` when the client holds no samples; such clients
    carry zero weight in every system-level metric.
    """

    client_id: int
    n_k: int
    dist: LabelDistribution | None = None

    def __post_init__(self):
        if self.n_k < 0:
            raise ValueError("n_k must be non-negative")
        if self.n_k > 0 and self.dist is None:
            raise ValueError("non-empty client needs a distribution")

    @property
    def defined(self) -> bool:
        return self.n_k > 0 and self.dist is not None

    @classmethod
    def from_labels(cls, client_id: int, labels, num_classes: int) -> "ClientProfile":
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size == 0:
            return cls(client_id, 0, None)
        counts = np.bincount(labels, minlength=num_classes)
        return cls(client_id, int(labels.size), LabelDistribution.from_counts(counts))


@dataclass(frozen=True)
class SharingPlan:
    """Per-head shared volume ``n_m^s``; heads absent from ``shares`` share nothing."""

    shares: Mapping[int, int] = field(default_factory=dict)

    def share_of(self, head: int) -> int:
        return int(self.shares.get(head, 0))

    def effective_sizes(self, clients: Sequence[ClientProfile], members: Mapping[int, Iterable[int]]) -> dict[int, int]:
        """Local volume after sharing: ``n_k + n_m^s`` for members of ``C_m``, else ``n_k``."""
        sizes = {c.client_id: c.n_k for c in clients}
        for head, group in members.items():
            for c in group:
                sizes[c] += self.share_of(head)
        return sizes

    @classmethod
    def zero(cls) -> "SharingPlan":
        return cls({})


def _probs(p) -> np.ndarray:
    if isinstance(p, LabelDistribution):
        return p.probs
    return np.asarray(p, dtype=np.float64).reshape(-1)


def _check_same_length(p: np.ndarray, q: np.ndarray):
    if p.shape != q.shape:
        raise DimensionError(f"length mismatch: {p.size} vs {q.size}")


def emd_to_global(p, g) -> float:
    """L1 distance of one client's label marginal from the global one, in [0, 2]."""
    p, g = _probs(p), _probs(g)
    _check_same_length(p, g)
    return math.fsum(np.abs(p - g))


def pairwise_emd(p, q) -> float:
    """Symmetric L1 distance between two clients' label marginals."""
    p, q = _probs(p), _probs(q)
    _check_same_length(p, q)
    return math.fsum(np.abs(p - q))


def _defined(clients: Iterable[ClientProfile]) -> list[ClientProfile]:
    return [c for c in clients if c.defined]


def global_distribution(clients: Sequence[ClientProfile]) -> LabelDistribution:
    """Size-weighted aggregate of all non-empty client distributions."""
    live = _defined(clients)
    if not live:
        raise EmptyPopulationError("no client has samples")
    n = sum(c.n_k for c in live)
    acc = np.zeros_like(live[0].dist.probs)
    for c in live:
        _check_same_length(acc, c.dist.probs)
        acc += c.n_k * c.dist.probs
    acc /= n
    return LabelDistribution(acc / acc.sum())


def system_emd(clients: Sequence[ClientProfile], g) -> float:
    """Weighted sum of per-client EMD, weights ``n_k / n``."""
    live = _defined(clients)
    n = sum(c.n_k for c in live)
    if n == 0:
        raise EmptyPopulationError("no client has samples")
    g = _probs(g)
    return float(sum(c.n_k * emd_to_global(c.dist, g) for c in live) / n)


def mix_distribution(n_k: int, p_k, n_s: int, p_m) -> LabelDistribution:
    """Label distribution of a client holding ``n_k`` native and ``n_s`` shared samples."""
    if n_k < 0 or n_s < 0:
        raise ValueError("counts must be non-negative")
    if n_k + n_s == 0:
        raise EmptyPopulationError("both counts are zero")
    if n_s == 0:
        return p_k if isinstance(p_k, LabelDistribution) else LabelDistribution(p_k)
    if n_k == 0:
        return p_m if isinstance(p_m, LabelDistribution) else LabelDistribution(p_m)
    a, b = _probs(p_k), _probs(p_m)
    _check_same_length(a, b)
    mixed = (n_k * a + n_s * b) / (n_k + n_s)
    return LabelDistribution(mixed / mixed.sum())


def validate_disjoint(heads: Iterable[int], members: Mapping[int, Iterable[int]]):
    """Raise unless clusters are pairwise disjoint and no head is also a member."""
    heads = set(heads)
    seen: set[int] = set()
    for head, group in members.items():
        if head not in heads:
            raise ConstraintViolation(f"cluster keyed by non-head {head}")
        for c in group:
            if c in heads:
                raise ConstraintViolation(f"client {c} is both head and member")
            if c in seen:
                raise ConstraintViolation(f"client {c} belongs to more than one cluster")
            seen.add(c)


def post_sharing_system_emd(
    clients: Sequence[ClientProfile],
    clustering,
    plan: SharingPlan | None = None,
    g=None,
    *,
    normalized: bool = False,
) -> float:
    """System EMD after the heads multicast their shares.

    Members of ``C_m`` take size ``n_k + n_m^s`` and the mixed distribution;
    every other client keeps its own. The default normaliser is the
    pre-sharing total ``n``, so the weights may sum above one. With
    ``normalized=True`` the post-sharing total is used instead.
    """
    plan = plan if plan is not None else clustering.plan
    members = clustering.members
    validate_disjoint(clustering.heads, members)
    if g is None:
        g = global_distribution(clients)
    g = _probs(g)
    by_id = {c.client_id: c for c in clients}
    n = sum(c.n_k for c in clients)
    if n == 0:
        raise EmptyPopulationError("no client has samples")

    head_of = {c: h for h, group in members.items() for c in group}
    num = 0.0
    denom = 0
    for c in clients:
        head = head_of.get(c.client_id)
        n_s = plan.share_of(head) if head is not None else 0
        if n_s > 0 and not by_id[head].defined:
            raise ConstraintViolation(f"head {head} shares from an empty dataset")
        size = c.n_k + n_s
        denom += size
        if size == 0:
            continue
        if n_s == 0:
            num += c.n_k * emd_to_global(c.dist, g)
        else:
            p_k = c.dist if c.defined else by_id[head].dist
            mixed = mix_distribution(c.n_k, p_k, n_s, by_id[head].dist)
            num += size * emd_to_global(mixed, g)
    return float(num / (denom if normalized else n))


def deviation(p, g) -> np.ndarray:
    """Signed per-class deviation ``p - g``."""
    p, g = _probs(p), _probs(g)
    _check_same_length(p, g)
    return p - g


def cluster_objective_delta(head_dev: np.ndarray, member_devs: np.ndarray, member_sizes: np.ndarray, share: float) -> float:
    """Change in the (un-normalised) post-sharing numerator when a head shares ``share`` samples.

    For member ``c`` the numerator term is ``|| n_c d_c + s d_m ||_1`` where
    ``d`` are deviations from the global distribution, so the change is convex
    and piecewise linear in ``s``.
    """
    if share == 0 or len(member_sizes) == 0:
        return 0.0
    scaled = member_devs * member_sizes[:, None]
    after = np.abs(scaled + share * head_dev[None, :]).sum()
    before = np.abs(scaled).sum()
    return float(after - before)


def best_share(head_dev: np.ndarray, member_devs: np.ndarray, member_sizes: np.ndarray, cap: int) -> tuple[int, float]:
    """Integer share in ``[0, cap]`` minimising :func:`cluster_objective_delta`.

    The delta is convex piecewise linear, so its minimum over the integers
    lies at zero, at ``cap`` or next to a breakpoint. Ties go to the larger
    share, which keeps the choice stable when the delay budget grows.
    """
    if cap <= 0 or len(member_sizes) == 0:
        return 0, 0.0
    scaled = member_devs * member_sizes[:, None]
    nz = head_dev != 0
    cand = {0, int(cap)}
    if np.any(nz):
        bps = -scaled[:, nz] / head_dev[nz][None, :]
        bps = bps[(bps > 0) & (bps < cap)]
        for b in np.unique(bps):
            cand.add(int(np.floor(b)))
            cand.add(min(int(np.ceil(b)), int(cap)))
    best_s, best_d = 0, 0.0
    for s in sorted(cand):
        d = cluster_objective_delta(head_dev, member_devs, member_sizes, s)
        if d < best_d - 1e-9 or (abs(d - best_d) <= 1e-9 and s > best_s and d <= 0.0):
            best_s, best_d = s, d
    if best_d > 0:
        return 0, 0.0
    return best_s, best_d
