"""Deterministic anti-forensic rewriting of an event stream.

Four profiles: ProcessCreate suppression (Apt29), file-I/O suppression
(Fin7), Security-channel wipe (Wiz) and per-event timestomping (Sand).
Labels pass through untouched and are checked on the way out.

Randomness comes from numpy's Philox counter-based generator, seeded with
the 64-bit config seed, so outputs are reproducible across platforms.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Any, Optional

import numpy as np

from .ontology import Action
from .trace_store import Trace

SECURITY_CHANNEL = "Microsoft-Windows-Security-Auditing"
NS_PER_S = 1_000_000_000


class Profile(str, Enum):
    APT29 = "apt29"
    FIN7 = "fin7"
    WIZ = "wiz"
    SAND = "sand"

    @classmethod
    def parse(cls, raw: str) -> "Profile":
        return cls(raw.lower())


TARGET_ACTIONS = {
    Profile.APT29: frozenset({Action.PROCESS_CREATE}),
    Profile.FIN7: frozenset({Action.FILE_WRITE, Action.FILE_MAP}),
}


class LabelTamperError(RuntimeError):
    pass


@dataclass(frozen=True)
class PerturbConfig:
    rate: float = 0.30
    timestomp_lo_s: float = 60.0
    timestomp_hi_s: float = 3600.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"rate must be in [0, 1], got {self.rate}")
        if not self.timestomp_lo_s < self.timestomp_hi_s:
            raise ValueError("timestomp_lo_s must be below timestomp_hi_s")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def _labels_digest(trace: Trace) -> str:
    blob = json.dumps(trace.labels.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def perturb(trace: Trace, profile: Profile, config: PerturbConfig = PerturbConfig()) -> Trace:
    profile = Profile.parse(profile) if isinstance(profile, str) else profile
    before = _labels_digest(trace)
    labels = trace.labels
    rng = make_rng(config.seed)
    events = list(trace.events)

    if profile in TARGET_ACTIONS:
        wanted = TARGET_ACTIONS[profile]
        targets = sorted(e.uid for e in events if e.action in wanted)
        n_drop = math.floor(config.rate * len(targets))
        order = rng.permutation(len(targets))
        drop = {targets[i] for i in order[:n_drop]}
        events = [e for e in events if e.uid not in drop]
    elif profile is Profile.WIZ:
        events = [e for e in events if e.channel != SECURITY_CHANNEL]
    elif profile is Profile.SAND:
        lo = int(round(config.timestomp_lo_s * NS_PER_S))
        hi = int(round(config.timestomp_hi_s * NS_PER_S))
        # draw in uid order so the result does not depend on input ordering
        by_uid = sorted(events, key=lambda e: e.uid)
        shifts = rng.integers(lo, hi, size=len(by_uid), endpoint=True)
        events = [dataclasses.replace(e, t=e.t + int(s)) for e, s in zip(by_uid, shifts)]

    out = Trace(tuple(events), labels, trace.alias_table, trace.hosts)
    if out.labels is not labels or _labels_digest(out) != before:
        raise LabelTamperError("ground-truth labels changed during perturbation")
    return out


def suppression_report(original: Trace, perturbed: Trace, profile: Optional[Profile] = None) -> dict[str, Any]:
    """Summarise what a perturbation removed or shifted."""
    orig = original.by_uid()
    kept = perturbed.by_uid()
    removed = [orig[u] for u in sorted(set(orig) - set(kept))]
    if profile is not None and not isinstance(profile, Profile):
        profile = Profile.parse(profile)
    if profile in TARGET_ACTIONS:
        denom = sum(1 for e in orig.values() if e.action in TARGET_ACTIONS[profile])
    elif profile is Profile.WIZ:
        denom = sum(1 for e in orig.values() if e.channel == SECURITY_CHANNEL)
    else:
        denom = len(orig)
    shifts_s = [
        (kept[u].t - orig[u].t) / NS_PER_S for u in sorted(kept) if u in orig and kept[u].t != orig[u].t
    ]
    hist: dict[str, Any] = {"edges": [], "counts": []}
    if shifts_s:
        counts, edges = np.histogram(shifts_s, bins=10)
        hist = {"edges": [float(x) for x in edges], "counts": [int(c) for c in counts]}
    return {
        "profile": None if profile is None else profile.value,
        "n_original": len(orig),
        "n_perturbed": len(kept),
        "n_removed": len(removed),
        "removed_uids": [e.uid for e in removed],
        "removed_by_action": dict(sorted(Counter(e.action.value for e in removed).items())),
        "removed_by_channel": dict(sorted(Counter(e.channel for e in removed).items())),
        "effective_rate": (len(removed) / denom) if denom else 0.0,
        "n_shifted": len(shifts_s),
        "shift_histogram_s": hist,
    }
