"""Closed-form retention bounds and a checker that holds suite results against them.

Two notions of epsilon are easy to mix up. The dormancy threshold bounds a
token's cumulative attention; the bound on heavy-hitter survival instead
takes the fraction of positions whose attention exceeds the needle's. The
calculator here takes that fraction explicitly.
"""

from __future__ import annotations

import math
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

from .errors import CheckError, ConfigError
from .policies import partition_budget
from .sponsorship import OFFSET_DECAY

CONSISTENT = "consistent"
VIOLATED = "violated"

BOUND_NAMES = ("heavy-hitter", "sponsored-span", "min-budget", "decoy")
MC_SLACK = 0.01


def theorem1_bound(K: int, n: int, epsilon_fraction: float) -> float:
    """Upper bound ``K / (epsilon_fraction * n)`` on a dormant token surviving heavy-hitter eviction."""
    if not 0.0 < epsilon_fraction <= 1.0:
        raise ConfigError(f"epsilon_fraction must lie in (0, 1], got {epsilon_fraction}")
    if K < 1 or n < 1 or K > n:
        raise ConfigError(f"need 1 <= K <= n, got K={K}, n={n}")
    return K / (epsilon_fraction * n)


def min_voucher(B: float, L: int) -> float:
    """Smallest voucher inside a fully sponsored span: the one at offset ``L``."""
    if B < 0 or L < 0:
        raise ConfigError("B and L must be non-negative")
    return B * OFFSET_DECAY**L


def min_budget(W: int, ell: int, sinks: int = 1) -> int:
    """Smallest cache that holds the sinks, the recency window and an ``ell``-token value."""
    if W < 0 or ell < 0 or sinks < 0:
        raise ConfigError("W, ell and sinks must be non-negative")
    return sinks + W + ell


def decoy_max(K: int, W: int, L: int, sinks: int = 1) -> int:
    """Largest decoy count whose spans all fit beside the true one; -1 when not even one span fits."""
    capacity = K - sinks - W
    if capacity <= 0:
        raise ConfigError(f"K={K} leaves no room beyond {sinks} sink(s) and window {W}")
    if L < 1:
        raise ConfigError("span L must be >= 1")
    return capacity // L - 1


def decoy_retention(K: int, W: int, L: int, m: int, sinks: int = 1) -> float:
    """Full-span survival probability with ``m`` indistinguishable decoys.

    Protection ranks tokens by voucher, so every span loses its tail first.
    When the ``(m + 1) * L`` sponsored tokens overflow the capacity by ``o``
    slots and ``o <= m + 1``, the last-offset tokens share ``m + 1 - o``
    slots under random tie-breaking; beyond that no span survives whole.
    """
    capacity = K - sinks - W
    if capacity <= 0 or L < 1 or m < 0:
        raise ConfigError("need positive capacity, L >= 1 and m >= 0")
    overflow = (m + 1) * L - capacity
    if overflow <= 0:
        return 1.0
    return max(0, (m + 1) - overflow) / (m + 1)


def uniform_decoy_claim(m: int) -> float:
    """Survival ``1 / (m + 1)``: one uniformly chosen span out of ``m + 1``."""
    return 1.0 / (m + 1)


@dataclass(frozen=True)
class BoundReport:
    bound_name: str
    inputs: dict
    predicted: float
    measured: float
    verdict: str
    tolerance: float = 0.0
    note: str = ""

    def __post_init__(self) -> None:
        if self.verdict not in (CONSISTENT, VIOLATED):
            raise ConfigError(f"unknown verdict {self.verdict!r}")

    def as_dict(self) -> dict:
        return {"bound": self.bound_name, "inputs": self.inputs, "predicted": self.predicted,
                "measured": self.measured, "verdict": self.verdict, "tolerance": self.tolerance,
                "note": self.note}


@dataclass
class _Cell:
    row: Mapping[str, str]
    policy: str = field(init=False)
    K: int = field(init=False)
    rate: float = field(init=False)

    def __post_init__(self) -> None:
        try:
            self.policy = str(self.row["policy"])
            self.K = int(self.row["K"])
            self.rate = float(self.row["pct"]) / 100.0
        except (KeyError, ValueError) as exc:
            raise CheckError(f"result row lacks a usable field: {exc}") from None

    def get(self, key: str, default=None):
        v = self.row.get(key, default)
        return default if v in (None, "") else v

    def int(self, key: str, default: int = 0) -> int:
        return int(float(self.get(key, default)))

    def key(self) -> str:
        return f"policy={self.policy} K={self.K} depth={self.get('depth', '?')}"


_FAST_TA = ("ta-fast-regex", "ta-fast-semantic", "ta-fast-embedding", "ta-learned")


def _verdict(ok: bool) -> str:
    return CONSISTENT if ok else VIOLATED


def _single_anchor(c: _Cell) -> bool:
    return c.int("decoys") == 0 and c.int("injections") == 0


def _heavy_hitter(cells: list[_Cell]) -> list[BoundReport]:
    out = []
    for c in cells:
        if c.policy != "h2o":
            continue
        n = c.int("n")
        bound = theorem1_bound(c.K, n, 1.0) if c.K <= n else 1.0
        out.append(BoundReport("heavy-hitter", {"cell": c.key(), "K": c.K, "n": n, "epsilon_fraction": 1.0},
                               bound, c.rate, _verdict(c.rate <= bound + MC_SLACK), MC_SLACK))
    return out


def _sponsored_span(cells: list[_Cell]) -> list[BoundReport]:
    out = []
    for c in cells:
        if c.policy not in _FAST_TA or not _single_anchor(c):
            continue
        ell, L = c.int("needle_len"), c.int("span")
        need = min_budget(c.int("window"), ell, c.int("sinks", 1))
        if L < ell or c.K < need:
            continue
        B = float(c.get("sponsor_budget", 15))
        out.append(BoundReport("sponsored-span", {"cell": c.key(), "B": B, "L": L, "K": c.K, "needle_len": ell,
                                                  "min_voucher": min_voucher(B, L)},
                               1.0, c.rate, _verdict(c.rate >= 1.0)))
    return out


def _min_budget(cells: list[_Cell], strict: bool) -> list[BoundReport]:
    groups: dict[tuple, dict[int, float]] = defaultdict(dict)
    meta = {}
    for c in cells:
        if c.policy not in _FAST_TA or not _single_anchor(c) or c.int("span") < c.int("needle_len"):
            continue
        g = (c.policy, c.get("depth"), c.int("needle_len"), c.int("window"), c.int("sinks", 1),
             c.get("partition", "default"))
        groups[g][c.K] = c.rate
        meta[g] = c
    out = []
    for g, by_k in sorted(groups.items(), key=lambda kv: tuple(map(str, kv[0]))):
        c = meta[g]
        k_star = min_budget(c.int("window"), c.int("needle_len"), c.int("sinks", 1))
        if k_star not in by_k or k_star - 1 not in by_k:
            if strict:
                missing = k_star if k_star not in by_k else k_star - 1
                raise CheckError(f"min-budget needs a cell at K={missing} for policy={g[0]} depth={g[1]}")
            continue
        full = [k for k in sorted(by_k) if all(by_k[j] >= 1.0 for j in by_k if j >= k)]
        measured = full[0] if full else float("nan")
        out.append(BoundReport("min-budget", {"policy": g[0], "depth": g[1], "W": c.int("window"),
                                              "needle_len": c.int("needle_len"), "budgets": sorted(by_k)},
                               k_star, measured, _verdict(measured == k_star)))
    return out


def _decoy(cells: list[_Cell]) -> list[BoundReport]:
    out = []
    for c in cells:
        m = c.int("decoys")
        if not c.policy.startswith("ta-") or c.policy == "ta-full" or m == 0 or c.int("injections"):
            continue
        L, W, sinks = c.int("span"), c.int("window"), c.int("sinks", 1)
        if L != c.int("needle_len"):
            continue
        capacity = c.K - sinks - W
        inputs = {"cell": c.key(), "m": m, "L": L, "W": W, "K": c.K, "capacity": capacity,
                  "partition": c.get("partition", "default")}
        if c.get("partition", "default") != "max":
            inputs["protected_slots"] = partition_budget(c.K, c.get("partition", "default"), sinks + W).protected
        if m <= decoy_max(c.K, W, L, sinks):
            out.append(BoundReport("decoy", inputs, 1.0, c.rate, _verdict(c.rate >= 1.0)))
        elif c.get("partition") == "max" and c.get("tie_break") == "random":
            p = decoy_retention(c.K, W, L, m, sinks)
            trials = max(c.int("trials", 1), 1)
            tol = max(0.05, 3.0 * math.sqrt(max(p * (1 - p), 1e-12) / trials))
            out.append(BoundReport("decoy", inputs, p, c.rate, _verdict(abs(c.rate - p) <= tol), tol,
                                   "overflow: voucher-ranked protection, random ties"))
    return out


def check_bounds(results: Sequence[Mapping[str, str]], bounds: Iterable[str] | None = None) -> list[BoundReport]:
    """One report per applicable (bound, cell).

    With ``bounds=None`` every bound that has matching cells is checked and
    an empty outcome is an error; naming bounds explicitly makes each of them
    mandatory.
    """
    if not results:
        raise CheckError("no result rows to check")
    cells = [_Cell(r) for r in results]
    strict = bounds is not None
    wanted = tuple(bounds) if strict else BOUND_NAMES
    unknown = set(wanted) - set(BOUND_NAMES)
    if unknown:
        raise ConfigError(f"unknown bound(s) {sorted(unknown)}; choose from {BOUND_NAMES}")
    reports: list[BoundReport] = []
    for name in wanted:
        if name == "heavy-hitter":
            got = _heavy_hitter(cells)
        elif name == "sponsored-span":
            got = _sponsored_span(cells)
        elif name == "min-budget":
            got = _min_budget(cells, strict)
        else:
            got = _decoy(cells)
        if strict and not got:
            raise CheckError(f"no result cell covers bound {name!r}")
        reports.extend(got)
    if not reports:
        raise CheckError("results cover none of the known bounds")
    return reports
