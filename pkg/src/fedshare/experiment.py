"""End-to-end pipeline: partition, network, clustering, sharing, training and accounting."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .clustering import (
    Clustering,
    brute_force_optimal,
    cec_clustering,
    daca,
    scc_clustering,
)
from .config import ExperimentConfig, derive_seed, fmt_float
from .distributions import (
    ClientProfile,
    SharingPlan,
    emd_to_global,
    global_distribution,
    mix_distribution,
    post_sharing_system_emd,
    system_emd,
)
from .errors import ConfigError, FedShareError
from .fl import RoundMetrics, apply_sharing, rounds_to_target, train_federated, write_metrics_csv
from .io import atomic_write_json, atomic_write_text
from .network import LinkMatrix, build_constrained_graph, draw_channel_gains, gen_social_graph, sharing_delay
from .partition import (
    ClientDataset,
    Dataset,
    load_idx,
    partition_dirichlet,
    partition_iid,
    partition_pathological,
    profiles_of,
    synth_dataset,
)

SWEEP_KNOBS = ("T_th", "e_th", "share_volume")
SWEEP_HEADER = "knob,value,pre_emd,post_emd,rounds_to_target,total_time_s"
SERVER_ORIGIN = -2


class StageError(FedShareError):
    """A pipeline stage failed; the message names the stage."""


@dataclass(frozen=True)
class TimeAccount:
    collect_time: float
    share_time: float
    training_time: float
    total: float

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def time_account(
    method: str,
    rounds_used: int,
    round_cost: float = 0.7,
    *,
    share_time: float | None = None,
    clustering: Clustering | None = None,
    links: LinkMatrix | None = None,
    a: float | None = None,
    central_samples: int = 0,
    uplink_rate: float = 1e6,
    downlink_rate: float = 1e6,
) -> TimeAccount:
    """Collect, share and training time of one run; ``total`` is their exact sum.

    Clustered methods pay the multicast delay of their plan (or the given
    ``share_time``). Central sharing uploads ``central_samples`` samples to
    the server and broadcasts them back.
    """
    if rounds_used < 0:
        raise ValueError("rounds_used must be non-negative")
    collect = 0.0
    if method == "central":
        bits = (a or 0.0) * central_samples
        collect = bits / uplink_rate if bits else 0.0
        share = bits / downlink_rate if bits else 0.0
    elif method == "none":
        share = 0.0
    elif share_time is not None:
        share = float(share_time)
    elif clustering is not None:
        if links is None or a is None:
            raise ValueError("links and a are needed to time a clustering")
        share = sharing_delay(clustering, links, a)
    else:
        share = 0.0
    training = rounds_used * round_cost
    return TimeAccount(collect, share, training, collect + share + training)


# -- pipeline pieces --------------------------------------------------------------


@dataclass
class Instance:
    """Everything the clustering layer sees for one seed."""

    config: ExperimentConfig
    train: Dataset
    test: Dataset
    datasets: list[ClientDataset]
    profiles: list[ClientProfile]
    g: np.ndarray
    links: LinkMatrix
    social: object
    graph: object


def load_data(config: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = config.dataset
    if d.source == "idx":
        return (
            load_idx(d.train_images, d.train_labels, d.num_classes),
            load_idx(d.test_images, d.test_labels, d.num_classes),
        )
    full = synth_dataset(
        d.num_classes,
        d.samples_per_class + d.test_per_class,
        d.feature_dim,
        derive_seed(config.seed, "data"),
        spread=d.spread,
        separation=d.separation,
    )
    # labels are interleaved, so any prefix is class balanced
    cut = d.num_classes * d.samples_per_class
    idx = np.arange(len(full))
    return full.subset(idx[:cut]), full.subset(idx[cut:])


def partition(config: ExperimentConfig, train: Dataset) -> list[ClientDataset]:
    p = config.partition
    seed = derive_seed(config.seed, "partition")
    if p.kind == "pathological":
        return partition_pathological(train, config.K, config.n_single, seed, p.samples_per_client)
    if p.kind == "dirichlet":
        return partition_dirichlet(train, config.K, p.alpha, seed, p.samples_per_client)
    return partition_iid(train, config.K, seed)


def build_instance(config: ExperimentConfig) -> Instance:
    train, test = _stage("data", load_data, config)
    datasets = _stage("partition", partition, config, train)
    profiles = profiles_of(datasets)
    g = global_distribution(profiles)
    links = draw_channel_gains(config.K, config.channel, derive_seed(config.seed, "channel"))
    social = gen_social_graph(config.K, derive_seed(config.seed, "social"))
    graph = build_constrained_graph(profiles, social, links, config.e_th, config.v_th, g)
    return Instance(config, train, test, datasets, profiles, g.probs, links, social, graph)


def cluster(inst: Instance, method: str | None = None) -> Clustering:
    """Clustering for ``method`` (default: the configured one); empty for ``none``/``central``."""
    c = inst.config
    method = method or c.method
    T_th = math.inf if c.fixed_share is not None else c.T_th
    kw = dict(g=inst.g, share_rule=c.share_rule, normalized=c.normalized_objective)
    args = (inst.profiles, inst.links, T_th, c.bits_per_sample)
    if method == "daca":
        out = daca(inst.graph, *args, **kw)
    elif method == "scc":
        out = scc_clustering(inst.graph, inst.social, *args, **kw)
    elif method == "cec":
        out = cec_clustering(inst.graph, *args, **kw)
    elif method in ("none", "central"):
        return Clustering(tuple(range(c.K)), {})
    else:
        raise ConfigError(f"unknown method {method!r}")
    if c.fixed_share is not None:
        shares = {h: min(c.fixed_share, inst.profiles[h].n_k) for h in out.heads if out.members[h]}
        out = Clustering(out.heads, out.members, SharingPlan({h: s for h, s in shares.items() if s > 0}))
    return out


def central_volume(config: ExperimentConfig, n_total: int) -> int:
    if config.fixed_share is not None:
        return int(config.fixed_share)
    return int(round(config.beta * n_total))


def central_proxy(inst: Instance, n_s: int) -> Dataset:
    """Class-proportional proxy subset of the pooled training data held by the server."""
    rng = np.random.default_rng(derive_seed(inst.config.seed, "central"))
    pooled_x = np.vstack([d.features for d in inst.datasets if d.n_k])
    pooled_y = np.concatenate([d.labels for d in inst.datasets if d.n_k])
    n_s = min(n_s, pooled_y.size)
    from .fl import _stratified_pick

    pick = np.sort(_stratified_pick(pooled_y, n_s, rng)) if n_s else np.array([], dtype=np.int64)
    return Dataset(pooled_x[pick], pooled_y[pick], inst.train.num_classes)


def apply_central(datasets: Sequence[ClientDataset], proxy: Dataset) -> list[ClientDataset]:
    if len(proxy) == 0:
        return list(datasets)
    out = []
    for d in datasets:
        out.append(
            ClientDataset(
                d.client_id,
                np.vstack([d.features, proxy.features]),
                np.concatenate([d.labels, proxy.labels]),
                d.num_classes,
                np.concatenate([d.origin, np.full(len(proxy), SERVER_ORIGIN, dtype=np.int64)]),
                np.concatenate([d.source_index, np.full(len(proxy), -1, dtype=np.int64)]),
            )
        )
    return out


def emd_report(inst: Instance, clustering: Clustering, method: str, central_samples: int = 0) -> dict:
    pre = system_emd(inst.profiles, inst.g)
    if method == "central":
        n_s = central_samples
        post_profiles = [
            ClientProfile(p.client_id, p.n_k + n_s, mix_distribution(p.n_k, p.dist if p.defined else inst.g, n_s, inst.g))
            if n_s
            else p
            for p in inst.profiles
        ]
        post = system_emd(post_profiles, inst.g)
        literal = sum(p.n_k * emd_to_global(p.dist, inst.g) for p in post_profiles if p.defined) / sum(
            p.n_k for p in inst.profiles
        )
    else:
        post = post_sharing_system_emd(inst.profiles, clustering, g=inst.g, normalized=True)
        literal = post_sharing_system_emd(inst.profiles, clustering, g=inst.g, normalized=False)
    return {
        "method": method,
        "pre_sharing_emd": pre,
        "post_sharing_emd": post,
        "post_sharing_emd_unnormalized": literal,
        "global_distribution": [float(x) for x in inst.g],
    }


@dataclass
class ExperimentResult:
    history: list[RoundMetrics]
    time: TimeAccount
    clustering: Clustering
    emd: dict
    rounds_to_target: int | None

    def clustering_json(self) -> dict:
        return self.clustering.to_json()


def run_experiment(config: ExperimentConfig, out_dir=None, *, train: bool | None = None) -> ExperimentResult:
    """Full pipeline for one configuration; writes artifacts when ``out_dir`` is given."""
    train = config.train_enabled if train is None else train
    inst = build_instance(config)
    method = config.method
    clustering = _stage("clustering", cluster, inst)
    n_total = sum(p.n_k for p in inst.profiles)
    n_central = central_volume(config, n_total) if method == "central" else 0
    report = emd_report(inst, clustering, method, n_central)

    history: list[RoundMetrics] = []
    reached = None
    share_time = 0.0 if method in ("none", "central") else _stage("delay", sharing_delay, clustering, inst.links, config.bits_per_sample)
    acct_kw = dict(
        share_time=share_time,
        a=config.bits_per_sample,
        central_samples=n_central,
        uplink_rate=config.uplink_rate,
        downlink_rate=config.downlink_rate,
    )
    pre_time = time_account(method, 0, config.round_cost, **acct_kw).total
    if train:
        if method == "central":
            shared = apply_central(inst.datasets, central_proxy(inst, n_central))
        else:
            shared = _stage("sharing", apply_sharing, inst.datasets, clustering, derive_seed(config.seed, "sharing"))
        tcfg = dataclasses.replace(config.train, seed=derive_seed(config.seed, "training") % (2**32))
        history = _stage("training", train_federated, shared, tcfg, inst.test, round_cost=config.round_cost, time_offset=pre_time)
        reached = rounds_to_target(history, config.target_accuracy)
    rounds_used = reached if reached is not None else len(history)
    acct = time_account(method, rounds_used, config.round_cost, **acct_kw)
    result = ExperimentResult(history, acct, clustering, report, reached)
    if out_dir is not None:
        write_artifacts(result, out_dir, train)
    return result


def write_artifacts(result: ExperimentResult, out_dir, train: bool = True) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_json(out / "emd.json", result.emd)
    atomic_write_json(out / "clustering.json", result.clustering_json())
    if train:
        write_metrics_csv(result.history, out / "metrics.csv")
        atomic_write_json(out / "timeaccount.json", {**result.time.to_json(), "rounds_to_target": result.rounds_to_target})


# -- sweeps --------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    knob: str
    value: float
    pre_emd: float
    post_emd: float
    rounds_to_target: int | None
    total_time_s: float

    def csv(self) -> str:
        r = "" if self.rounds_to_target is None else str(self.rounds_to_target)
        return f"{self.knob},{fmt_float(self.value)},{fmt_float(self.pre_emd)},{fmt_float(self.post_emd)},{r},{fmt_float(self.total_time_s)}"


def with_knob(config: ExperimentConfig, knob: str, value: float) -> ExperimentConfig:
    if knob == "T_th":
        return config.replace(T_th=float(value))
    if knob == "e_th":
        return config.replace(e_th=float(value))
    if knob == "share_volume":
        return config.replace(fixed_share=int(round(value * config.samples_per_volume)))
    raise ConfigError(f"unknown sweep knob {knob!r}; choose from {', '.join(SWEEP_KNOBS)}")


def sweep(config: ExperimentConfig, knob: str, values: Sequence[float], out_dir=None, *, train: bool | None = None) -> list[SweepRow]:
    """One experiment per knob value with the shared master seed; optionally writes ``sweep.csv``."""
    if knob not in SWEEP_KNOBS:
        raise ConfigError(f"unknown sweep knob {knob!r}; choose from {', '.join(SWEEP_KNOBS)}")
    values = [float(v) for v in values]
    if len(values) < 2:
        raise ConfigError("a sweep needs at least two values")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ConfigError("sweep values must be strictly ascending")
    rows = []
    for i, v in enumerate(values):
        point_dir = None if out_dir is None else Path(out_dir) / "points" / f"{i:03d}_{knob}={fmt_float(v)}"
        res = run_experiment(with_knob(config, knob, v), point_dir, train=train)
        rows.append(
            SweepRow(knob, v, res.emd["pre_sharing_emd"], res.emd["post_sharing_emd"], res.rounds_to_target, res.time.total)
        )
    if out_dir is not None:
        atomic_write_text(Path(out_dir) / "sweep.csv", "\n".join([SWEEP_HEADER] + [r.csv() for r in rows]) + "\n")
    return rows


# -- oracle comparison -----------------------------------------------------------


ORACLE_HEADER = "instance,seed,optimal,daca,scc,cec,daca_gap"


def oracle_report(config: ExperimentConfig, instances: int = 5) -> list[dict]:
    """DACA and baselines against the exhaustive optimum on ``instances`` seeds."""
    if config.K > 8:
        raise ConfigError(f"oracle comparison supports K <= 8, got {config.K}")
    rows = []
    for i in range(instances):
        cfg = config.replace(seed=config.seed + i)
        inst = build_instance(cfg)
        T_th = math.inf if cfg.fixed_share is not None else cfg.T_th
        best = brute_force_optimal(
            inst.graph,
            inst.profiles,
            inst.links,
            T_th,
            cfg.bits_per_sample,
            g=inst.g,
            share_rule=cfg.share_rule,
            normalized=cfg.normalized_objective,
        )
        objs = {m: emd_report(inst, cluster(inst, m), m)["post_sharing_emd"] for m in ("daca", "scc", "cec")}
        rows.append({"instance": i, "seed": cfg.seed, "optimal": best.objective, **objs, "daca_gap": objs["daca"] - best.objective})
    return rows


def oracle_csv(rows: list[dict]) -> str:
    lines = [ORACLE_HEADER]
    for r in rows:
        lines.append(",".join([str(r["instance"]), str(r["seed"])] + [fmt_float(r[k]) for k in ("optimal", "daca", "scc", "cec", "daca_gap")]))
    return "\n".join(lines) + "\n"


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except FedShareError as exc:
        if isinstance(exc, StageError):
            raise
        raise StageError(f"{name}: {type(exc).__name__}: {exc}") from exc
    except ValueError as exc:
        raise StageError(f"{name}: {type(exc).__name__}: {exc}") from exc
