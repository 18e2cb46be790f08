"""Fitting of every distribution-conditional parameter.

Stage 1 uses benign data only: the latency log-normal, the verifier
tolerances and the z-score baselines of both potentials (from benign
leave-one-edge-out completions). Stage 2 grid-searches the cost weights on
a labelled tuning set whose families are quarantined from the test
families, then sets the budget to the 99th percentile of benign
reconstruction cost under the chosen weights.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .cost import Baselines, CostWeights, LogNormalModel, ZScore, combine
from .evadekit import make_rng
from .ontology import NodeClass
from .verifier import OrthogonalConfig

log = logging.getLogger(__name__)

NS_PER_S = 1_000_000_000
LAMBDA = 0.25
MIN_LN_SAMPLES = 100
STD_FLOOR = 1e-3
LOEO_MAX_HOPS = 3


class InsufficientSamples(ValueError):
    pass


class NonPositiveSample(ValueError):
    pass


class DegenerateSamples(ValueError):
    pass


class FamilyLeakError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CalibrationProfile:
    lognormal: LogNormalModel = LogNormalModel(-2.61, 1.43)
    baselines: Baselines = field(default_factory=Baselines.identity)
    b_max: float = 3.7
    weights: CostWeights = CostWeights(0.6, 0.9)
    lam: float = LAMBDA
    orth: OrthogonalConfig = OrthogonalConfig()
    c_q05: float = 0.0
    rho_hat: float = 1.0
    beam_width: int = 6
    k_retrieve: int = 8
    k_max: int = 8
    max_depth: int = 64
    provenance: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.b_max > 0:
            raise ConfigError("b_max must be positive")
        if self.c_q05 < 0:
            raise ConfigError("c_q05 must be non-negative")
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")

    def to_dict(self) -> dict[str, Any]:
        return {
            "lognormal": self.lognormal.to_dict(),
            "baselines": self.baselines.to_dict(),
            "b_max": self.b_max,
            "weights": {"alpha": self.weights.alpha, "gamma": self.weights.gamma},
            "lambda": self.lam,
            "orthogonal": self.orth.to_dict(),
            "c_q05": self.c_q05,
            "rho_hat": self.rho_hat,
            "search": {
                "beam_width": self.beam_width,
                "k_retrieve": self.k_retrieve,
                "k_max": self.k_max,
                "max_depth": self.max_depth,
            },
            "provenance": dict(self.provenance),
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "CalibrationProfile":
        required = ("lognormal", "baselines", "b_max", "weights")
        missing = [k for k in required if k not in raw]
        if missing:
            raise ConfigError(f"profile missing fields {missing}")
        search = raw.get("search", {})
        return cls(
            lognormal=LogNormalModel(**raw["lognormal"]),
            baselines=Baselines.from_dict(raw["baselines"]),
            b_max=float(raw["b_max"]),
            weights=CostWeights(**raw["weights"]),
            lam=float(raw.get("lambda", LAMBDA)),
            orth=OrthogonalConfig.from_dict(raw.get("orthogonal", {})),
            c_q05=float(raw.get("c_q05", 0.0)),
            rho_hat=float(raw.get("rho_hat", 1.0)),
            beam_width=int(search.get("beam_width", 6)),
            k_retrieve=int(search.get("k_retrieve", 8)),
            k_max=int(search.get("k_max", 8)),
            max_depth=int(search.get("max_depth", 64)),
            provenance=dict(raw.get("provenance", {})),
        )


def depth_bound(profile: CalibrationProfile) -> Optional[int]:
    """Maximum admissible consecutive latent hops, or None when unbounded."""
    denom = profile.c_q05 - profile.lam * profile.b_max
    if denom <= 0:
        return None
    return math.floor(profile.b_max / denom)


# --- Stage 1 primitives ---------------------------------------------------


def percentile(values: Sequence[float], q: float) -> float:
    """Linear interpolation between closest ranks (numpy's default rule)."""
    if len(values) == 0:
        raise InsufficientSamples("no values")
    return float(np.quantile(np.asarray(values, dtype=np.float64), q, method="linear"))


def fit_lognormal(latencies_s: Iterable[float]) -> LogNormalModel:
    x = np.asarray(list(latencies_s), dtype=np.float64)
    if x.size < MIN_LN_SAMPLES:
        raise InsufficientSamples(f"need at least {MIN_LN_SAMPLES} samples, got {x.size}")
    if np.any(x <= 0):
        raise NonPositiveSample("latencies must be positive")
    logs = np.log(x)
    mu = float(logs.mean())
    sigma = float(logs.std())
    if not sigma > 1e-12:
        raise DegenerateSamples("all latencies identical; sigma would be zero")
    return LogNormalModel(mu, sigma)


def benign_latencies(trace, max_gap_s: float = 3600.0) -> dict[str, list[float]]:
    """Parent-to-child latencies of benign causal pairs, keyed by child class.

    For every event, the latency is measured from the most recent event that
    delivered its source node (the moment the acting entity came into being
    or was last touched) to the event itself.
    """
    last_in: dict[tuple, int] = {}
    out: dict[str, list[float]] = {"all": []}
    attack = trace.labels.attack_edges
    for ev in trace.events:
        t0 = last_in.get(ev.src.key)
        if t0 is not None and ev.uid not in attack:
            dt = (ev.t - t0) / NS_PER_S
            if 0 < dt <= max_gap_s:
                out["all"].append(dt)
                out.setdefault(ev.dst.node_class.value, []).append(dt)
        if ev.dst.key not in last_in or ev.t > last_in[ev.dst.key]:
            last_in[ev.dst.key] = ev.t
    return out


def fit_tolerances(lat: Mapping[str, list[float]], channels: Sequence[str], base: OrthogonalConfig = OrthogonalConfig()) -> OrthogonalConfig:
    def q99(name, fallback):
        xs = lat.get(name) or []
        if len(xs) < 20:
            return fallback
        return max(1, int(round(percentile(xs, 0.99) * NS_PER_S)))

    return OrthogonalConfig(
        channels=tuple(channels),
        tau_net=q99(NodeClass.NET.value, base.tau_net),
        tau_proc=q99(NodeClass.PROCESS.value, base.tau_proc),
        tau_reg=q99(NodeClass.REGISTRY.value, base.tau_reg),
        delta_look=max(q99("all", base.delta_look), base.tau_net, base.tau_proc),
    )


@dataclass
class LoeoSample:
    uid: str
    censored: bool
    # raw (d_sem, phi) potentials of each latent hop on the cheapest path
    hops: list = field(default_factory=list)

    def cost(self, weights: CostWeights, baselines: Baselines) -> float:
        return sum(combine(d, p, weights, baselines) for d, p in self.hops)


@dataclass
class LoeoResult:
    samples: list

    @property
    def reconstructed(self) -> list:
        return [s for s in self.samples if not s.censored]

    @property
    def n_censored(self) -> int:
        return sum(1 for s in self.samples if s.censored)

    def path_costs(self, weights: CostWeights, baselines: Baselines) -> list[float]:
        return [s.cost(weights, baselines) for s in self.reconstructed]

    def hop_costs(self, weights: CostWeights, baselines: Baselines) -> list[float]:
        return [combine(d, p, weights, baselines) for s in self.reconstructed for d, p in s.hops]

    def raw_potentials(self) -> tuple[list[float], list[float]]:
        ds = [d for s in self.reconstructed for d, _ in s.hops]
        ps = [p for s in self.reconstructed for _, p in s.hops]
        return ds, ps


def benign_loeo(trace, engine, n_edges: Optional[int] = None, seed: int = 0) -> LoeoResult:
    """Remove one benign edge at a time and reconstruct it with the full pipeline.

    ``engine`` is a ``search.Hunter`` over ``trace``. Each reconstruction
    masks the removed record instead of re-indexing, and runs with the
    budget disabled. Parallel copies of the edge on other channels stay
    visible, so a surviving copy reconstructs it at zero cost.
    """
    if trace.labels.attack_edges:
        raise ValueError("benign LOEO needs a trace without attack labels")
    events = list(trace.events)
    groups: dict[tuple, list] = {}
    for ev in events:
        groups.setdefault((ev.src.key, ev.dst.key, ev.action), []).append(ev)
    keys = sorted(groups, key=lambda k: groups[k][0].order_key)
    if n_edges is None:
        n_edges = min(2000, max(1, len(keys) // 10))
    rng = make_rng(seed)
    picked = sorted(rng.permutation(len(keys))[: min(n_edges, len(keys))].tolist())
    samples: list[LoeoSample] = []
    for i in picked:
        primary = groups[keys[i]][0]
        start = engine.arrival_time(primary.src, before=primary.t)
        res = engine.hunt_between(
            primary.src, primary.dst, start_t=start, mask=frozenset({primary.uid}), budget=False,
            max_hops=LOEO_MAX_HOPS, virtual_goal=True,
        )
        if not res.paths:
            samples.append(LoeoSample(primary.uid, True))
            continue
        best = min(res.paths, key=lambda p: (p.raw_cost, p.l_lat, p.signature))
        samples.append(LoeoSample(primary.uid, False, [(h.d_sem, h.phi) for h in best.hops if not h.verified]))
    return LoeoResult(samples)


def fit_baselines(loeo: LoeoResult) -> Baselines:
    ds, ps = loeo.raw_potentials()
    if not ds:
        raise InsufficientSamples("no latent hops in benign LOEO; cannot fit z-score baselines")
    return Baselines(
        ZScore(float(np.mean(ds)), max(float(np.std(ds)), STD_FLOOR)),
        ZScore(float(np.mean(ps)), max(float(np.std(ps)), STD_FLOOR)),
    )


def budget_from(loeo: LoeoResult, weights: CostWeights, baselines: Baselines) -> float:
    costs = loeo.path_costs(weights, baselines)
    if not costs:
        raise InsufficientSamples("no reconstructed benign edges")
    return max(percentile(costs, 0.99), STD_FLOOR)


def rho_hat(attack_costs: Sequence[float], benign_costs: Sequence[float], upper: float, bins: int = 50) -> float:
    """Max over bins of attack density / benign density, add-one smoothed."""
    if upper <= 0:
        upper = 1.0
    edges = np.linspace(0.0, upper, bins + 1)
    a = np.histogram(np.clip(attack_costs, 0, upper), bins=edges)[0] + 1.0
    b = np.histogram(np.clip(benign_costs, 0, upper), bins=edges)[0] + 1.0
    return float(np.max((a / a.sum()) / (b / b.sum())))


def rho_from_histograms(attack_counts: Sequence[float], benign_counts: Sequence[float]) -> float:
    """Density ratio from already-binned counts (no smoothing)."""
    a = np.asarray(attack_counts, dtype=np.float64)
    b = np.asarray(benign_counts, dtype=np.float64)
    pa, pb = a / a.sum(), b / b.sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(pb > 0, pa / pb, np.where(pa > 0, np.inf, 0.0))
    return float(np.max(r))


def weight_grid(step: float = 0.1, lo: float = 0.1, hi: float = 2.0) -> list[float]:
    n = int(round((hi - lo) / step))
    return [round(lo + i * step, 10) for i in range(n + 1)]


def trace_digest(trace) -> str:
    h = hashlib.sha256()
    for ev in trace.events:
        h.update(ev.uid.encode())
        h.update(str(ev.t).encode())
    return h.hexdigest()[:16]


@dataclass
class TuningCase:
    """One labelled tuning scenario: the perturbed trace and what to hunt."""

    trace: Any  # perturbed, as seen by the system
    truth: Any  # unperturbed trace holding the labelled events
    anchor: Any
    target: Any
    family: str


def calibrate(
    benign,
    tuning: Sequence[TuningCase],
    kb,
    *,
    test_families: Iterable[str] = (),
    channels: Sequence[str] = ("etw", "netflow", "vmi"),
    seed: int = 0,
    n_edges: Optional[int] = None,
    grid: Optional[Sequence[float]] = None,
    base: CalibrationProfile = CalibrationProfile(),
    evaluate: Optional[Callable] = None,
    jobs: int = 1,
) -> CalibrationProfile:
    """Two-stage calibration; see the module docstring.

    ``jobs`` > 1 runs tuning hunts in a thread pool; results are gathered in
    input order so the profile does not depend on scheduling.
    """
    from .metrics import score_hunt
    from .search import Hunter

    test_families = set(test_families)
    tune_families = {c.family for c in tuning}
    leak = tune_families & test_families
    if leak:
        raise FamilyLeakError(f"tuning families overlap test families: {sorted(leak)}")
    quarantined = sorted(test_families)

    # Stage 1 -- benign only.
    lat = benign_latencies(benign)
    lognormal = fit_lognormal(lat["all"])
    orth = fit_tolerances(lat, channels, base.orth)
    stage1 = replace(base, lognormal=lognormal, orth=orth, baselines=Baselines.identity())

    engine = Hunter(benign, kb, stage1, exclude_family=quarantined)
    loeo = benign_loeo(benign, engine, n_edges=n_edges, seed=seed)
    baselines = fit_baselines(loeo)
    log.info("stage 1: %d LOEO samples, %d censored", len(loeo.samples), loeo.n_censored)

    # Stage 2 -- weights under family quarantine.
    grid = list(grid) if grid is not None else weight_grid()
    hunters = [Hunter(c.trace, kb, replace(stage1, baselines=baselines), exclude_family=quarantined) for c in tuning]
    evaluate = evaluate or score_hunt
    best_key = None
    best = None
    pool = ThreadPoolExecutor(max_workers=jobs) if jobs > 1 else None
    for a in grid:
        for g in grid:
            w = CostWeights(a, g)
            b_max = budget_from(loeo, w, baselines)
            prof = replace(stage1, baselines=baselines, weights=w, b_max=b_max)
            def score(pair, prof=prof):
                case, h = pair
                return evaluate(h.hunt(case.anchor, case.target, profile=prof), case)["f1"]

            f1s = list(pool.map(score, zip(tuning, hunters))) if pool else [score(x) for x in zip(tuning, hunters)]
            mean_f1 = float(np.mean(f1s)) if f1s else 0.0
            # prefer higher F1, then weights nearest the grid centre for stability
            key = (round(mean_f1, 12), -abs(a - 1.0) - abs(g - 1.0), -a, -g)
            if best_key is None or key > best_key:
                best_key, best = key, (w, b_max, mean_f1)
    if pool:
        pool.shutdown()
    weights, b_max, tune_f1 = best
    hop_costs = loeo.hop_costs(weights, baselines)
    c_q05 = percentile(hop_costs, 0.05) if hop_costs else 0.0

    prof = replace(stage1, baselines=baselines, weights=weights, b_max=b_max, c_q05=c_q05)
    attack_costs = []
    for case, h in zip(tuning, hunters):
        res = h.hunt(case.anchor, case.target, profile=prof)
        attack_costs.extend(p.cost for p in res.paths)
    benign_costs = loeo.path_costs(weights, baselines)
    max_hops = max([len(s.hops) for s in loeo.reconstructed] + [1])
    upper = 8.0 * (weights.alpha + weights.gamma) * max_hops
    rho = rho_hat(attack_costs, benign_costs, upper) if attack_costs else 1.0

    return replace(
        prof,
        rho_hat=rho,
        provenance={
            "seed": seed,
            "benign_trace": trace_digest(benign),
            "tuning_traces": [trace_digest(c.trace) for c in tuning],
            "tuning_families": sorted(tune_families),
            "quarantined_families": quarantined,
            "loeo_samples": len(loeo.samples),
            "loeo_censored": loeo.n_censored,
            "loeo_costs": benign_costs,
            "tuning_f1": tune_f1,
        },
    )
