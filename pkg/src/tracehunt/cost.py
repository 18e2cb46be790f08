"""Deviation cost of an unverified hop: semantic drift plus temporal implausibility."""

from __future__ import annotations

import math
from statistics import NormalDist
from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np

from .knowledge import cosine, embed, hop_text

NS_PER_S = 1_000_000_000
# Python floats order +inf above every finite cost and the cost algebra
# only adds non-negative terms, so inf saturates without producing NaN.
INF = math.inf
Z_CLAMP = (0.0, 8.0)


@dataclass(frozen=True)
class LogNormalModel:
    mu: float  # mean of ln(seconds)
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    def cdf(self, x_s: float) -> float:
        if x_s <= 0:
            return 0.0
        z = (math.log(x_s) - self.mu) / self.sigma
        return 0.5 * math.erfc(-z / math.sqrt(2.0))

    def sf(self, x_s: float) -> float:
        if x_s <= 0:
            return 1.0
        z = (math.log(x_s) - self.mu) / self.sigma
        return 0.5 * math.erfc(z / math.sqrt(2.0))

    def ppf(self, q: float) -> float:
        return math.exp(self.mu + self.sigma * NormalDist().inv_cdf(q))

    def to_dict(self) -> dict[str, float]:
        return {"mu": self.mu, "sigma": self.sigma}


@dataclass(frozen=True)
class ZScore:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError("baseline std must be positive")

    def __call__(self, x: float) -> float:
        if x == INF:
            return INF
        z = (x - self.mean) / self.std
        return min(max(z, Z_CLAMP[0]), Z_CLAMP[1])


@dataclass(frozen=True)
class Baselines:
    d_sem: ZScore
    phi: ZScore

    @classmethod
    def identity(cls) -> "Baselines":
        """Unnormalised potentials; used before Stage 1 has run."""
        return cls(ZScore(0.0, 1.0), ZScore(0.0, 1.0))

    def to_dict(self) -> dict[str, Any]:
        return {
            "d_sem": {"mean": self.d_sem.mean, "std": self.d_sem.std},
            "phi": {"mean": self.phi.mean, "std": self.phi.std},
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "Baselines":
        return cls(ZScore(**raw["d_sem"]), ZScore(**raw["phi"]))


@dataclass(frozen=True)
class CostWeights:
    alpha: float = 0.6
    gamma: float = 0.9

    def __post_init__(self):
        if not (self.alpha > 0 and self.gamma > 0):
            raise ValueError("cost weights must be positive")


def hypothesis_text(hyp) -> str:
    return hop_text(hyp.src.node_class, hyp.action, hyp.dst.node_class, hyp.dst.attr)


def d_sem_vec(payload_vec: np.ndarray, top1_hop_vec: np.ndarray) -> float:
    return min(2.0, max(0.0, 1.0 - cosine(payload_vec, top1_hop_vec)))


def d_sem(hyp, top1_hop_vec: np.ndarray) -> float:
    """1 - cosine between the hypothesis' single-hop payload and the top-1 hop vector."""
    return d_sem_vec(embed(hypothesis_text(hyp)), top1_hop_vec)


def phi_temporal(dt_ns: int, model: LogNormalModel) -> float:
    if dt_ns < 0:
        return INF
    x = dt_ns / NS_PER_S
    sf = model.sf(x)
    if sf > 0.0:
        return -math.log(sf)
    # erfc underflow far in the tail: Mills-ratio asymptote of -log(1 - Phi(z))
    z = (math.log(x) - model.mu) / model.sigma
    return 0.5 * z * z + math.log(z) + 0.5 * math.log(2.0 * math.pi)


def combine(d: float, phi: float, weights: CostWeights, baselines: Baselines) -> float:
    if phi == INF:
        return INF
    return weights.alpha * baselines.d_sem(d) + weights.gamma * baselines.phi(phi)


def c_dev(hyp, top1_hop_vec, dt_ns: int, weights: CostWeights, baselines: Baselines, model: LogNormalModel) -> float:
    phi = phi_temporal(dt_ns, model)
    if phi == INF:
        return INF
    return combine(d_sem(hyp, top1_hop_vec), phi, weights, baselines)
