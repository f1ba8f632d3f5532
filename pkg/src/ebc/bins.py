"""Integer count bins for blockwise classification.

A bin policy partitions the nonnegative integers into ordered, disjoint
bins: a run of singleton and/or paired finite bins below a noise threshold
``m``, followed by one open-ended bin ``[m, inf)`` that absorbs all counts
considered too large to be reliable. Each bin carries a representative
value used when a probability map over bins is decoded into a density map.

Three granularities are supported:

* ``fine``     -- every count below ``m`` gets its own bin.
* ``coarse``   -- ``{0}`` stays alone, then counts are merged in pairs.
* ``dynamic``  -- singletons up to a switch point, pairs after it.
"""

from __future__ import annotations

from collections.abc import Iterable, Sequence
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np

GRANULARITIES = ("fine", "dynamic", "coarse")


@dataclass(frozen=True)
class Bin:
    """One bin: the integer range ``[lo, hi]`` and its representative value.

    ``hi is None`` marks the open-ended terminal bin ``[lo, inf)``.
    Bounds are inclusive.
    """

    lo: int
    hi: int | None
    representative: float

    @property
    def unbounded(self) -> bool:
        return self.hi is None

    @property
    def singleton(self) -> bool:
        return self.hi == self.lo

    def contains(self, count: int) -> bool:
        return count >= self.lo and (self.hi is None or count <= self.hi)

    def label(self) -> str:
        if self.hi is None:
            return f"[{self.lo}, inf)"
        return "{%s}" % ", ".join(str(c) for c in range(self.lo, self.hi + 1))


@dataclass(frozen=True)
class BinPolicy:
    """An ordered sequence of bins covering the nonnegative integers.

    Instances built through :func:`build_bins` always satisfy the policy
    invariants (disjoint bins, full coverage, ``{0}`` first, ``[m, inf)``
    last). Hand-built instances may be invalid; :func:`validate` reports
    every violation without raising.
    """

    bins: tuple[Bin, ...]
    granularity: str
    m: int
    switch_point: int | None = None

    @property
    def n(self) -> int:
        return len(self.bins)

    @cached_property
    def representatives(self) -> np.ndarray:
        return np.array([b.representative for b in self.bins], dtype=np.float64)

    @cached_property
    def _finite_lookup(self) -> np.ndarray:
        """Maps each count below the terminal bin to its bin index (-1 = gap)."""
        top = max((b.hi for b in self.bins if b.hi is not None), default=-1)
        table = np.full(top + 1, -1, dtype=np.int64)
        for k, b in enumerate(self.bins):
            if b.hi is not None:
                table[b.lo : b.hi + 1] = k
        return table

    def with_terminal_representative(self, value: float) -> "BinPolicy":
        """Returns a copy whose terminal bin uses ``value`` as representative."""
        last = self.bins[-1]
        if not last.unbounded:
            raise ValueError("policy has no unbounded terminal bin")
        if value < last.lo:
            raise ValueError(
                f"terminal representative {value} below bin start {last.lo}"
            )
        new_last = replace(last, representative=float(value))
        return replace(self, bins=self.bins[:-1] + (new_last,))


def build_bins(
    granularity: str,
    m: int,
    switch_point: int | None = None,
    representatives: Sequence[float] | None = None,
    terminal_representative: float | None = None,
) -> BinPolicy:
    """Constructs a valid bin policy.

    Finite bins default to their midpoint as representative (the exact value
    for singletons). The terminal bin ``[m, inf)`` has no natural midpoint;
    it defaults to ``m`` and is normally recalibrated from training data via
    :func:`calibrate_terminal`. ``representatives`` overrides the full
    vector, one entry per bin.

    Raises:
        ValueError: if ``m < 1``, the granularity is unknown, the switch
            point is missing/out of range for a dynamic policy or supplied
            for a non-dynamic one, or an override falls outside its bin.
    """
    if m < 1:
        raise ValueError(f"noise threshold m must be >= 1, got {m}")
    if granularity not in GRANULARITIES:
        raise ValueError(f"unknown granularity {granularity!r}")
    if granularity == "dynamic":
        if switch_point is None:
            raise ValueError("dynamic granularity requires a switch_point")
        if not 0 <= switch_point < m:
            raise ValueError(
                f"switch_point must lie in [0, m), got {switch_point} with m={m}"
            )
    elif switch_point is not None:
        raise ValueError("switch_point is only valid for dynamic granularity")

    if granularity == "fine":
        last_singleton = m - 1
    elif granularity == "coarse":
        last_singleton = 0
    else:
        last_singleton = switch_point

    bins: list[Bin] = []
    for c in range(0, min(last_singleton, m - 1) + 1):
        bins.append(Bin(lo=c, hi=c, representative=float(c)))
    c = len(bins)
    # Pair remaining counts below m; a pair that would reach m is cut,
    # leaving a final singleton.
    while c <= m - 1:
        hi = c + 1 if c + 1 <= m - 1 else c
        bins.append(Bin(lo=c, hi=hi, representative=(c + hi) / 2.0))
        c = hi + 1
    term = float(m) if terminal_representative is None else float(terminal_representative)
    if term < m:
        raise ValueError(f"terminal representative {term} below bin start {m}")
    bins.append(Bin(lo=m, hi=None, representative=term))

    if representatives is not None:
        if len(representatives) != len(bins):
            raise ValueError(
                f"expected {len(bins)} representatives, got {len(representatives)}"
            )
        overridden = []
        for b, rep in zip(bins, representatives):
            rep = float(rep)
            if rep < b.lo or (b.hi is not None and rep > b.hi):
                raise ValueError(
                    f"representative {rep} outside bin {b.label()}"
                )
            overridden.append(replace(b, representative=rep))
        bins = overridden

    return BinPolicy(
        bins=tuple(bins),
        granularity=granularity,
        m=m,
        switch_point=switch_point,
    )


def quantize(count: int, policy: BinPolicy) -> int:
    """Returns the index of the bin containing ``count``.

    Requires a valid policy; coverage then guarantees a unique answer.
    """
    if count < 0:
        raise ValueError(f"count must be nonnegative, got {count}")
    last = policy.bins[-1]
    if last.unbounded and count >= last.lo:
        return policy.n - 1
    table = policy._finite_lookup
    if count < table.shape[0]:
        k = int(table[count])
        if k >= 0:
            return k
    raise ValueError(f"count {count} not covered by any bin")


def quantize_counts(counts: np.ndarray, policy: BinPolicy) -> np.ndarray:
    """Vectorized :func:`quantize` over an integer array."""
    counts = np.asarray(counts)
    if counts.size and counts.min() < 0:
        raise ValueError("counts must be nonnegative")
    last = policy.bins[-1]
    table = policy._finite_lookup
    clipped = np.clip(counts, 0, max(table.shape[0] - 1, 0))
    finite = table[clipped] if table.size else np.full(counts.shape, -1, np.int64)
    out = np.where(
        (last.hi is None) & (counts >= last.lo), policy.n - 1, finite
    ).astype(np.int64)
    if (out < 0).any():
        bad = counts[out < 0].flat[0]
        raise ValueError(f"count {bad} not covered by any bin")
    return out


def representative(policy: BinPolicy, k: int) -> float:
    """Representative count value of bin ``k`` (used for density decoding)."""
    if not 0 <= k < policy.n:
        raise IndexError(f"bin index {k} out of range [0, {policy.n})")
    return policy.bins[k].representative


def calibrate_terminal(policy: BinPolicy, block_counts: Iterable[int]) -> BinPolicy:
    """Sets the terminal representative to the mean observed clamped count.

    ``block_counts`` are raw per-block counts from training data; only those
    falling in the terminal bin contribute. With no such counts the policy
    is returned unchanged (representative stays at its ``m`` fallback).
    """
    lo = policy.bins[-1].lo
    tail = [c for c in block_counts if c >= lo]
    if not tail:
        return policy
    return policy.with_terminal_representative(sum(tail) / len(tail))


@dataclass
class ValidationReport:
    ok: bool
    violations: list[str]


def validate(policy: BinPolicy) -> ValidationReport:
    """Checks every policy invariant and reports all violations found.

    Disjointness and coverage are verified by walking the sorted bins over
    the integers; the infinite tail is checked analytically (the last bin
    must be unbounded), so no upper enumeration limit is needed.
    """
    v: list[str] = []
    bins = policy.bins
    if not bins:
        return ValidationReport(False, ["policy has no bins"])

    if policy.m < 1:
        v.append(f"noise threshold m must be >= 1, got {policy.m}")
    if policy.granularity not in GRANULARITIES:
        v.append(f"unknown granularity {policy.granularity!r}")
    if policy.granularity == "dynamic":
        if policy.switch_point is None:
            v.append("dynamic policy missing switch_point")
        elif not 0 <= policy.switch_point < policy.m:
            v.append(f"switch_point {policy.switch_point} outside [0, m)")

    if any(b.lo > bins[k + 1].lo for k, b in enumerate(bins[:-1])):
        v.append("bins not sorted ascending by lower bound")
    first = bins[0]
    if not (first.lo == 0 and first.hi == 0):
        v.append(f"first bin must be {{0}}, got {first.label()}")
    last = bins[-1]
    if not last.unbounded:
        v.append(f"last bin must be unbounded, got {last.label()}")
    elif last.lo != policy.m:
        v.append(f"terminal bin starts at {last.lo}, expected m={policy.m}")

    # Walk the integer line across sorted bins: any gap or overlap shows up
    # as a mismatch between a bin's start and the next uncovered integer.
    expected = 0
    for b in sorted(bins, key=lambda b: b.lo):
        if b.hi is not None and b.hi < b.lo:
            v.append(f"bin {b.label()} has hi < lo")
            continue
        if b.lo < expected:
            v.append(f"overlap at {b.lo}")
        elif b.lo > expected:
            v.append(f"{expected} uncovered")
        if b.unbounded:
            if b is not last:
                v.append(f"unbounded bin {b.label()} before the last position")
            expected = None
            break
        expected = max(expected, b.hi + 1)
    if expected is not None:
        v.append(f"tail [{expected}, inf) uncovered")

    for k, b in enumerate(bins):
        if b.representative < b.lo:
            v.append(f"bin {k} representative {b.representative} below lo {b.lo}")
        if b.hi is not None and b.representative > b.hi:
            v.append(f"bin {k} representative {b.representative} above hi {b.hi}")

    return ValidationReport(ok=not v, violations=v)


def policy_to_config(policy: BinPolicy) -> dict:
    """Serializes a policy to its config-file form."""
    return {
        "granularity": policy.granularity,
        "m": policy.m,
        "switch_point": policy.switch_point,
        "representatives": [b.representative for b in policy.bins],
    }


def policy_from_config(cfg: dict) -> BinPolicy:
    """Builds a policy from its config-file form (see :func:`policy_to_config`)."""
    return build_bins(
        granularity=cfg["granularity"],
        m=cfg["m"],
        switch_point=cfg.get("switch_point"),
        representatives=cfg.get("representatives"),
    )
