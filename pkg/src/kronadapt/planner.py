"""
Budget-aware search over component designs ``(r1, r2, r)``.

The ranking rule is our own codification of two heuristics: first make
sure ``r`` reaches the expected rank of the target update, then spend the
remaining budget on ``r2`` while keeping ``r1`` small.
"""
import json
from dataclasses import dataclass, field
from typing import List, Tuple

from .errors import ConfigError, InfeasibleBudgetError
from .kron import KronConfig, max_attainable_rank, param_count


def _divisors(n):
    return [k for k in range(1, n + 1) if n % k == 0]


@dataclass(frozen=True)
class BudgetQuery:
    d_in: int
    d_out: int
    budget: int
    r_star_hint: int = 8
    r1_range: Tuple[int, int] = (2, 4)

    def __post_init__(self):
        for name in ("d_in", "d_out", "budget"):
            val = getattr(self, name)
            if int(val) != val or val < 1:
                raise ConfigError(f"{name} must be a positive integer, got {val!r}")
        if not 1 <= self.r_star_hint:
            raise ConfigError(f"r_star_hint must be >= 1, got {self.r_star_hint}")
        lo, hi = self.r1_range
        if lo < 1 or hi < lo:
            raise ConfigError(f"invalid r1_range {self.r1_range}")


@dataclass(frozen=True)
class PlanEntry:
    config: KronConfig
    param_count: int
    max_rank: int
    tags: Tuple[str, ...] = ()

    def to_dict(self):
        return {"r1": self.config.r1, "r2": self.config.r2, "r": self.config.r,
                "param_count": self.param_count, "max_attainable_rank": self.max_rank,
                "rationale": list(self.tags)}


@dataclass
class PlanResult:
    query: BudgetQuery
    entries: List[PlanEntry] = field(default_factory=list)

    @property
    def best(self):
        return self.entries[0] if self.entries else None

    def triples(self):
        return [e.config.triple for e in self.entries]

    def to_dict(self):
        q = self.query
        return {
            "query": {"d_in": q.d_in, "d_out": q.d_out, "budget": q.budget,
                      "r_star_hint": q.r_star_hint, "r1_range": list(q.r1_range)},
            "ranking_rule": "r >= min(hint, max r); max r2; min r1; max param_count; (r1, r2, r)",
            "entries": [e.to_dict() for e in self.entries],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _cheapest(query):
    best = None
    for r1 in _divisors(query.d_out):
        if not query.r1_range[0] <= r1 <= query.r1_range[1]:
            continue
        for r2 in _divisors(query.d_in):
            cfg = KronConfig(r1, r2, 1, query.d_in, query.d_out)
            key = (param_count(cfg), r1, r2)
            if best is None or key < best[0]:
                best = (key, cfg)
    return best


def enumerate_feasible(query):
    """
    All designs with ``r1`` in ``query.r1_range`` dividing ``d_out``, ``r2``
    dividing ``d_in`` and ``param_count <= budget``, sorted by
    ``(param_count, r1, r2, r)``.

    Raises
    ------
    InfeasibleBudgetError
        When nothing fits; the message names the cheapest design.
    """
    out = []
    for r1 in _divisors(query.d_out):
        if not query.r1_range[0] <= r1 <= query.r1_range[1]:
            continue
        for r2 in _divisors(query.d_in):
            per_component = r1 * (query.d_in // r2) + (query.d_out // r1) * r2
            for r in range(1, query.budget // per_component + 1):
                out.append(KronConfig(r1, r2, r, query.d_in, query.d_out))
    if not out:
        cheap = _cheapest(query)
        if cheap is None:
            raise InfeasibleBudgetError(
                f"no r1 in {query.r1_range} divides d_out={query.d_out}")
        (count, _, _), cfg = cheap
        raise InfeasibleBudgetError(
            f"budget {query.budget} is below the cheapest design "
            f"(r1, r2, r) = {cfg.triple} with {count} parameters")
    out.sort(key=lambda c: (param_count(c), c.r1, c.r2, c.r))
    return out


def rank_configs(query, candidates):
    """
    Order candidates by, in turn: reaching ``r >= min(r_star_hint, max r)``,
    larger ``r2``, smaller ``r1``, larger parameter count, then ``(r1, r2, r)``.
    """
    candidates = list(dict.fromkeys(candidates))
    if not candidates:
        return PlanResult(query, [])
    threshold = min(query.r_star_hint, max(c.r for c in candidates))

    def key(c):
        return (c.r < threshold, -c.r2, c.r1, -param_count(c), c.r1, c.r2, c.r)

    entries = []
    for c in sorted(candidates, key=key):
        tags = ["r>=hint" if c.r >= threshold else "r<hint"]
        if c.r1 == c.r2 == 1:
            tags.append("lora-equivalent")
        tags.append(f"r2={c.r2}")
        tags.append(f"budget-used={param_count(c)}/{query.budget}")
        entries.append(PlanEntry(c, param_count(c), max_attainable_rank(c), tuple(tags)))
    return PlanResult(query, entries)


def plan(query):
    return rank_configs(query, enumerate_feasible(query))
