"""Cluster formation on the constrained graph.

DACA picks low-EMD heads that cover the graph and attaches every other
client to the reachable head whose distribution differs most from its own.
The SCC and CEC baselines use the same greedy cover but rank heads by social
closeness and by bottleneck rate. A brute-force solver gives the exact
optimum on small instances.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .distributions import (
    ClientProfile,
    LabelDistribution,
    SharingPlan,
    cluster_objective_delta,
    deviation,
    emd_to_global,
    global_distribution,
    mix_distribution,
    pairwise_emd,
    post_sharing_system_emd,
    system_emd,
    validate_disjoint,
)
from .errors import ConstraintViolation, ProblemTooLarge
from .network import ConstrainedGraph, LinkMatrix, SocialGraph, max_sharable_volume, sharing_delay

SHARE_RULES = ("optimal", "guard", "cap")
BRUTE_FORCE_MAX_K = 8
TOL = 1e-12


@dataclass(frozen=True)
class Clustering:
    heads: tuple[int, ...]
    members: Mapping[int, tuple[int, ...]]
    plan: SharingPlan = field(default_factory=SharingPlan.zero)

    def __post_init__(self):
        heads = tuple(sorted(int(h) for h in self.heads))
        members = {int(h): tuple(sorted(int(c) for c in self.members.get(h, ()))) for h in heads}
        extra = set(self.members) - set(heads)
        if extra:
            raise ConstraintViolation(f"members keyed by non-heads {sorted(extra)}")
        validate_disjoint(heads, members)
        object.__setattr__(self, "heads", heads)
        object.__setattr__(self, "members", members)

    def head_of(self, client: int) -> int | None:
        for h, group in self.members.items():
            if client in group:
                return h
        return None

    @property
    def clients(self) -> set[int]:
        return set(self.heads).union(*self.members.values()) if self.heads else set()

    def to_json(self) -> dict:
        return {
            "heads": list(self.heads),
            "members": {str(h): list(self.members[h]) for h in self.heads},
            "shares": {str(h): self.plan.share_of(h) for h in self.heads},
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "Clustering":
        heads = [int(h) for h in obj["heads"]]
        members = {int(h): tuple(int(c) for c in cs) for h, cs in obj.get("members", {}).items()}
        shares = {int(h): int(n) for h, n in obj.get("shares", {}).items() if int(n) > 0}
        return cls(tuple(heads), members, SharingPlan(shares))


@dataclass
class ConditionReport:
    condition2_ok: dict[int, bool] = field(default_factory=dict)
    condition3_ok: dict[int, bool] = field(default_factory=dict)
    condition2_witnesses: list[tuple[int, int]] = field(default_factory=list)
    condition3_witnesses: list[tuple[int, int]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(self.condition2_ok.values()) and all(self.condition3_ok.values())

    @property
    def violations(self) -> int:
        return len(self.condition2_witnesses) + len(self.condition3_witnesses)


# -- share planning -----------------------------------------------------------


class _ShareOracle:
    """Share planning against the post-sharing objective.

    Cluster effects are memoised per (head, member set, share). The
    objective is ``(base + sum of numerator deltas) / denominator`` where the
    denominator is the pre-sharing total ``n`` or, when ``normalized``, the
    post-sharing total, so clusters interact and are planned by coordinate
    descent.
    """

    def __init__(self, profiles, links, T_th, a, g, share_rule="optimal", normalized=True):
        if share_rule not in SHARE_RULES:
            raise ValueError(f"unknown share rule {share_rule!r}")
        self.profiles = profiles
        self.links = links
        self.T_th = T_th
        self.a = a
        self.rule = share_rule
        self.normalized = normalized
        self.g = np.asarray(g.probs if isinstance(g, LabelDistribution) else g, dtype=np.float64)
        self.devs = np.array([deviation(p.dist, self.g) if p.defined else np.zeros_like(self.g) for p in profiles])
        self.sizes = np.array([p.n_k for p in profiles], dtype=np.float64)
        self.n = float(self.sizes.sum())
        self.base = float(np.abs(self.devs * self.sizes[:, None]).sum())
        self._caps: dict[tuple[int, tuple[int, ...]], int] = {}
        self._delta: dict[tuple[int, tuple[int, ...], int], float] = {}
        self._cands: dict[tuple[int, tuple[int, ...]], list[int]] = {}

    def cap(self, head, group) -> int:
        key = (head, group)
        hit = self._caps.get(key)
        if hit is None:
            if not group or not self.profiles[head].defined:
                hit = 0
            else:
                hit = max_sharable_volume(head, group, self.links, self.T_th, self.a, self.profiles[head].n_k)
            self._caps[key] = hit
        return hit

    def delta(self, head, group, share) -> float:
        key = (head, group, share)
        hit = self._delta.get(key)
        if hit is None:
            idx = np.array(group, dtype=np.int64)
            hit = cluster_objective_delta(self.devs[head], self.devs[idx], self.sizes[idx], share)
            self._delta[key] = hit
        return hit

    def candidates(self, head, group) -> list[int]:
        key = (head, group)
        hit = self._cands.get(key)
        if hit is None:
            cap = self.cap(head, group)
            if cap == 0:
                hit = [0]
            elif self.rule in ("guard", "cap"):
                hit = [0, cap]
            else:
                idx = np.array(group, dtype=np.int64)
                hit = share_breakpoints(self.devs[head], self.devs[idx], self.sizes[idx], cap)
            self._cands[key] = hit
        return hit

    def value(self, num, den) -> float:
        return num / (den if self.normalized else self.n)

    def plan(self, members: Mapping[int, Sequence[int]]) -> tuple[dict[int, int], float]:
        """Shares per head and the resulting objective value."""
        groups = [(h, tuple(sorted(cs))) for h, cs in sorted(members.items()) if cs]
        groups = [(h, cs) for h, cs in groups if self.cap(h, cs) > 0]
        if not groups:
            return {}, self.value(self.base, self.n)
        caps = {h: self.cap(h, cs) for h, cs in groups}
        if self.rule == "cap":
            return caps, self._evaluate(groups, caps)
        zero = {h: 0 for h, _ in groups}
        full = dict(caps)
        shares = full if self._evaluate(groups, full) <= self._evaluate(groups, zero) else zero
        shares = dict(shares)
        for _ in range(2 * len(groups) + 2):
            changed = False
            for h, cs in groups:
                best_s = shares[h]
                best_v = self._evaluate(groups, shares)
                for s in self.candidates(h, cs):
                    if s == best_s:
                        continue
                    trial = dict(shares)
                    trial[h] = s
                    v = self._evaluate(groups, trial)
                    if v < best_v - 1e-12 * max(1.0, best_v) or (abs(v - best_v) <= 1e-12 * max(1.0, best_v) and s > best_s):
                        best_s, best_v = s, v
                if best_s != shares[h]:
                    shares[h] = best_s
                    changed = True
            if not changed:
                break
        return {h: s for h, s in shares.items() if s > 0}, self._evaluate(groups, shares)

    def _evaluate(self, groups, shares) -> float:
        num = self.base
        den = self.n
        for h, cs in groups:
            s = shares.get(h, 0)
            if s:
                num += self.delta(h, cs, s)
                den += s * len(cs)
        return self.value(num, den)


def share_breakpoints(head_dev, member_devs, member_sizes, cap) -> list[int]:
    """Integer shares at which some member's per-class term changes sign, plus 0 and ``cap``.

    The numerator is piecewise linear in the share between these points and
    the denominator is affine, so either objective is optimised over this set.
    """
    scaled = member_devs * member_sizes[:, None]
    cand = {0, int(cap)}
    nz = head_dev != 0
    if np.any(nz):
        bps = -scaled[:, nz] / head_dev[nz][None, :]
        bps = bps[(bps > 0) & (bps < cap)]
        for b in np.unique(bps):
            cand.add(int(np.floor(b)))
            cand.add(min(int(np.ceil(b)), int(cap)))
    return sorted(cand)


def plan_shares(members, profiles, links, T_th, a, g=None, share_rule="optimal", normalized=True) -> SharingPlan:
    """Sharing volumes for a fixed clustering.

    ``cap`` uses the delay/size bound as is; ``guard`` lets each cluster
    share either its full bound or nothing, whichever lowers the objective;
    ``optimal`` searches every volume below the bound.
    """
    if g is None:
        g = global_distribution(profiles)
    oracle = _ShareOracle(profiles, links, T_th, a, g, share_rule, normalized)
    shares, _ = oracle.plan(members)
    return SharingPlan(shares)


# -- greedy cover -------------------------------------------------------------


def greedy_cover(order: Sequence[int], graph: ConstrainedGraph) -> list[int]:
    """Walk ``order`` and promote every node not yet adjacent to a chosen head."""
    covered = np.zeros(graph.size, dtype=bool)
    heads = []
    for k in order:
        if covered[k]:
            continue
        heads.append(k)
        covered[k] = True
        covered |= graph.adjacency[k]
    return heads


def _rank(scores, descending: bool) -> list[int]:
    # stable sort keeps lowest id first on ties
    ids = list(range(len(scores)))
    return sorted(ids, key=lambda k: (-scores[k] if descending else scores[k], k))


def _associate(heads, graph: ConstrainedGraph, score: Callable[[int, int], float], eligible=None) -> dict[int, tuple[int, ...]]:
    head_set = set(heads)
    members = {h: [] for h in heads}
    for c in range(graph.size):
        if c in head_set:
            continue
        options = [h for h in heads if graph.has_edge(h, c) and (eligible is None or eligible(h, c))]
        if not options:
            raise ConstraintViolation(f"client {c} is not covered by any head")
        best = max(options, key=lambda h: (score(h, c), -h))
        members[best].append(c)
    return {h: tuple(cs) for h, cs in members.items()}


def _finish(heads, members, profiles, links, T_th, a, g, share_rule, normalized) -> Clustering:
    plan = plan_shares(members, profiles, links, T_th, a, g, share_rule, normalized)
    return Clustering(tuple(heads), members, plan)


def _emd_vector(profiles, g) -> np.ndarray:
    return np.array([emd_to_global(p.dist, g) if p.defined else 0.0 for p in profiles])


def daca(
    graph: ConstrainedGraph,
    profiles: Sequence[ClientProfile],
    links: LinkMatrix,
    T_th: float,
    a: float,
    *,
    g=None,
    descending: bool = False,
    share_rule: str = "optimal",
    normalized: bool = True,
) -> Clustering:
    """Distribution-based adaptive clustering.

    Heads are promoted in ascending order of their own EMD until the graph is
    covered; ``descending=True`` reverses that order. A client joins, among
    the adjacent heads promoted before it, the one with the largest pairwise
    EMD, so no member ever has a lower EMD than its head.
    """
    if g is None:
        g = global_distribution(profiles)
    emd = _emd_vector(profiles, g)
    order = _rank(emd, descending)
    heads = greedy_cover(order, graph)
    position = {k: i for i, k in enumerate(order)}
    members = _associate(
        heads,
        graph,
        lambda h, c: graph.weights[h, c],
        eligible=lambda h, c: position[h] < position[c],
    )
    return _finish(heads, members, profiles, links, T_th, a, g, share_rule, normalized)


def scc_clustering(
    graph: ConstrainedGraph,
    social: SocialGraph,
    profiles: Sequence[ClientProfile],
    links: LinkMatrix,
    T_th: float,
    a: float,
    *,
    g=None,
    share_rule: str = "optimal",
    normalized: bool = True,
) -> Clustering:
    """Social-closeness clustering: most trusted clients lead, members follow their closest head."""
    e = social.closeness
    order = _rank(e.sum(axis=1), descending=True)
    heads = greedy_cover(order, graph)
    members = _associate(heads, graph, lambda h, c: e[h, c])
    return _finish(heads, members, profiles, links, T_th, a, g, share_rule, normalized)


def bottleneck_rates(graph: ConstrainedGraph, links: LinkMatrix) -> np.ndarray:
    """Minimum rate over each client's constrained-graph neighbours (0 when isolated)."""
    out = np.zeros(graph.size)
    for k in range(graph.size):
        nb = graph.neighbors(k)
        if nb:
            out[k] = links.rates[k, nb].min()
    return out


def cec_clustering(
    graph: ConstrainedGraph,
    profiles: Sequence[ClientProfile],
    links: LinkMatrix,
    T_th: float,
    a: float,
    *,
    g=None,
    share_rule: str = "optimal",
    normalized: bool = True,
) -> Clustering:
    """Rate-driven clustering: best bottleneck multicasters lead, members follow their fastest head."""
    order = _rank(bottleneck_rates(graph, links), descending=True)
    heads = greedy_cover(order, graph)
    members = _associate(heads, graph, lambda h, c: links.rates[h, c])
    return _finish(heads, members, profiles, links, T_th, a, g, share_rule, normalized)


def central_sharing_plan(profiles: Sequence[ClientProfile], beta: float, g=None) -> list[ClientProfile]:
    """Every client receives ``beta * n`` samples drawn from the global distribution."""
    if not 0 <= beta:
        raise ValueError("beta must be non-negative")
    if g is None:
        g = global_distribution(profiles)
    g = g if isinstance(g, LabelDistribution) else LabelDistribution(g)
    n = sum(p.n_k for p in profiles)
    n_s = int(round(beta * n))
    if n_s == 0:
        return list(profiles)
    out = []
    for p in profiles:
        dist = mix_distribution(p.n_k, p.dist if p.defined else g, n_s, g)
        out.append(ClientProfile(p.client_id, p.n_k + n_s, dist))
    return out


# -- objective ----------------------------------------------------------------


def objective(profiles, clustering: Clustering, g=None, *, normalized=True) -> float:
    """Post-sharing system EMD of a clustering, normalised by default like the planner."""
    return post_sharing_system_emd(profiles, clustering, g=g, normalized=normalized)


def check_constraints(
    clustering: Clustering,
    profiles: Sequence[ClientProfile],
    graph: ConstrainedGraph,
    links: LinkMatrix,
    T_th: float,
    a: float,
    social: SocialGraph | None = None,
    e_th: float | None = None,
) -> list[str]:
    """Structural feasibility audit; returns a list of human-readable violations."""
    problems = []
    try:
        validate_disjoint(clustering.heads, clustering.members)
    except ConstraintViolation as exc:
        problems.append(f"disjointness: {exc}")
    if clustering.clients != set(range(len(profiles))):
        problems.append("coverage: clustering does not cover every client exactly")
    for h in clustering.heads:
        n_s = clustering.plan.share_of(h)
        if n_s < 0 or n_s > profiles[h].n_k:
            problems.append(f"share cap: head {h} shares {n_s} of {profiles[h].n_k}")
        if n_s > 0 and not clustering.members[h]:
            problems.append(f"share without members at head {h}")
        for c in clustering.members[h]:
            if not graph.has_edge(h, c):
                problems.append(f"edge gate: {c} joined {h} without a constrained-graph edge")
            if social is not None and e_th is not None and social.closeness[h, c] < e_th:
                problems.append(f"closeness: e[{h},{c}] below threshold")
    try:
        tau = sharing_delay(clustering, links, a)
        if tau > T_th * (1 + 1e-12):
            problems.append(f"delay: {tau} s exceeds {T_th} s")
    except Exception as exc:  # noqa: BLE001
        problems.append(f"delay: {exc}")
    return problems


# -- conditions -----------------------------------------------------------------


def check_condition2(clustering: Clustering, profiles: Sequence[ClientProfile], g=None) -> ConditionReport:
    """Flag clusters holding a member whose own EMD is lower than the head's."""
    if g is None:
        g = global_distribution(profiles)
    emd = _emd_vector(profiles, g)
    rep = ConditionReport()
    for h in clustering.heads:
        bad = [(c, h) for c in clustering.members[h] if emd[c] < emd[h] - TOL]
        rep.condition2_ok[h] = not bad
        rep.condition2_witnesses.extend(bad)
    return rep


def check_condition3(clustering: Clustering, profiles: Sequence[ClientProfile], graph: ConstrainedGraph | None = None) -> ConditionReport:
    """Flag members for which another reachable head lies farther in pairwise EMD.

    Only heads that actually lead a cluster count as alternatives; a head
    without members is a client standing alone.
    """
    rep = ConditionReport()
    for h in clustering.heads:
        for c in clustering.members[h]:
            own = pairwise_emd(profiles[c].dist, profiles[h].dist)
            bad = []
            for m in clustering.heads:
                if m == h or not clustering.members[m] or (graph is not None and not graph.has_edge(m, c)):
                    continue
                if pairwise_emd(profiles[c].dist, profiles[m].dist) > own + TOL:
                    bad.append((c, m))
            rep.condition3_ok[c] = not bad
            rep.condition3_witnesses.extend(bad)
    return rep


def check_conditions(clustering, profiles, graph=None, g=None) -> ConditionReport:
    r2 = check_condition2(clustering, profiles, g)
    r3 = check_condition3(clustering, profiles, graph)
    return ConditionReport(r2.condition2_ok, r3.condition3_ok, r2.condition2_witnesses, r3.condition3_witnesses)


# -- exhaustive oracle ----------------------------------------------------------


@dataclass(frozen=True)
class OracleResult:
    clustering: Clustering
    objective: float
    evaluated: int


def brute_force_optimal(
    graph: ConstrainedGraph,
    profiles: Sequence[ClientProfile],
    links: LinkMatrix,
    T_th: float,
    a: float,
    *,
    g=None,
    share_rule: str = "optimal",
    normalized: bool = True,
    max_k: int = BRUTE_FORCE_MAX_K,
) -> OracleResult:
    """Exact minimiser of the post-sharing system EMD by full enumeration.

    Every head subset and every assignment of the remaining clients to
    adjacent heads is scored with the same share planner the heuristics use.
    Ties go to the lexicographically smallest head set, then to the smallest
    assignment vector.
    """
    K = len(profiles)
    if K > max_k:
        raise ProblemTooLarge(f"exhaustive search supports at most {max_k} clients, got {K}")
    if g is None:
        g = global_distribution(profiles)
    oracle = _ShareOracle(profiles, links, T_th, a, g, share_rule, normalized)
    adj = graph.adjacency
    plan_memo: dict[frozenset, tuple[dict, float]] = {}

    best_key = None
    best = None
    evaluated = 0
    for r in range(1, K + 1):
        for heads in itertools.combinations(range(K), r):
            others = [c for c in range(K) if c not in heads]
            choices = [[h for h in heads if adj[h, c]] for c in others]
            if any(not ch for ch in choices):
                continue
            for assign in itertools.product(*choices):
                evaluated += 1
                groups: dict[int, list[int]] = {}
                for c, h in zip(others, assign):
                    groups.setdefault(h, []).append(c)
                key = frozenset((h, tuple(cs)) for h, cs in groups.items())
                hit = plan_memo.get(key)
                if hit is None:
                    hit = oracle.plan(groups)
                    plan_memo[key] = hit
                cand = (hit[1], heads, assign)
                if best_key is None or _better(cand, best_key):
                    best_key = cand
                    best = (heads, groups, hit[0])
    heads, groups, shares = best
    # a cluster that shares nothing is indistinguishable from its clients
    # standing alone, so report it that way
    members = {h: tuple(cs) for h, cs in groups.items() if shares.get(h, 0) > 0}
    lone = [c for h, cs in groups.items() if shares.get(h, 0) == 0 for c in cs]
    clustering = Clustering(tuple(sorted(set(heads) | set(lone))), members, SharingPlan(shares))
    return OracleResult(clustering, best_key[0], evaluated)


def _better(key, incumbent) -> bool:
    obj, heads, assign = key
    best_obj, best_heads, best_assign = incumbent
    scale = max(1.0, abs(best_obj))
    if obj < best_obj - 1e-9 * scale:
        return True
    if obj > best_obj + 1e-9 * scale:
        return False
    return (heads, assign) < (best_heads, best_assign)
