"""Marginal-cost EV charging controller, line rating classes and capital-cost proxy."""

from __future__ import annotations

import math
from dataclasses import dataclass

from tdcosim.errors import ConfigError


@dataclass(frozen=True)
class McRule:
    hours: tuple[int, int]  # inclusive hour window
    threshold: float  # $/MWh, strict ">"
    multiplier: float  # share of the EV load kept in the hour
    action: str  # "delay" or "shed"


DEFAULT_MC_RULES: tuple[McRule, ...] = (
    McRule((0, 22), 500.0, 0.2, "delay"),
    McRule((0, 22), 100.0, 0.3, "delay"),
    McRule((0, 22), 60.0, 0.5, "delay"),
    McRule((23, 23), 1000.0, 0.1, "shed"),
    McRule((23, 23), 500.0, 0.4, "shed"),
    McRule((23, 23), 100.0, 0.7, "shed"),
)


def rules_from_config(rows) -> tuple[McRule, ...]:
    out = []
    for r in rows:
        try:
            rule = McRule(tuple(r["hours"]), float(r["threshold"]), float(r["multiplier"]), str(r["action"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad controller rule {r!r}: {exc}") from exc
        if rule.action not in ("delay", "shed") or not 0.0 <= rule.multiplier <= 1.0:
            raise ConfigError(f"bad controller rule {r!r}")
        out.append(rule)
    return tuple(out)


def match_rule(lmp: float, hour: int, rules=DEFAULT_MC_RULES) -> McRule | None:
    """Rule with the highest threshold strictly below ``lmp`` for this hour."""
    applicable = sorted((r for r in rules if r.hours[0] <= hour <= r.hours[1]), key=lambda r: -r.threshold)
    for r in applicable:
        if lmp > r.threshold:
            return r
    return None


@dataclass(frozen=True)
class ControllerAction:
    hour: int
    bus: int
    lmp: float
    threshold: float
    multiplier: float
    original: float
    retained: float
    moved: float  # carried to the next hour ("delay") or dropped ("shed")
    action: str


@dataclass
class ControllerOutcome:
    adjusted: dict[int, float]
    carryover: dict[int, float]  # to add to the next hour
    shed: dict[int, float]
    actions: list[ControllerAction]


def apply_mc_controller(ev_load: dict, lmp: dict, hour: int, rules=DEFAULT_MC_RULES) -> ControllerOutcome:
    """Scale each bus's EV load by the multiplier of the first matching rule.

    For a delay rule the removed part moves to the next hour; for a shed rule
    (the last hour of the day) it is dropped.  Buses without a matching rule
    keep their load.
    """
    adjusted, carry, shed, actions = {}, {}, {}, []
    for bus in sorted(ev_load):
        load = ev_load[bus]
        rule = match_rule(lmp[bus], hour, rules) if load > 0 else None
        if rule is None:
            adjusted[bus] = load
            continue
        kept = load * rule.multiplier
        moved = load - kept
        adjusted[bus] = kept
        if rule.action == "delay":
            carry[bus] = moved
        else:
            shed[bus] = moved
        actions.append(ControllerAction(hour, bus, float(lmp[bus]), rule.threshold, rule.multiplier,
                                        load, kept, moved, rule.action))
    return ControllerOutcome(adjusted, carry, shed, actions)


# ---------------------------------------------------------------- ratings

NORMAL = "normal"
WITHIN_EMERGENCY = "within-emergency"
VIOLATION = "violation"


@dataclass(frozen=True)
class RatingRule:
    season: str
    rating_class: str
    multiplier: float
    window_hours: float  # longest allowed duration; inf for the normal rating


DEFAULT_RATING_RULES: tuple[RatingRule, ...] = (
    RatingRule("winter", "normal", 1.23, math.inf),
    RatingRule("winter", "emergency-15min", 1.83, 0.25),
    RatingRule("winter", "emergency-4h", 1.34, 4.0),
    RatingRule("summer", "normal", 1.1, math.inf),
    RatingRule("summer", "emergency-15min", 1.67, 0.25),
    RatingRule("summer", "emergency-12h", 1.18, 12.0),
)


def classify_loading(flow: float, rating: float, season: str, duration_hours: float = math.inf,
                     rules=DEFAULT_RATING_RULES) -> str:
    """Rate a flow against the seasonal multipliers of nameplate rating.

    A ratio within the normal multiplier is normal at any duration.  Above
    it, the flow is within emergency limits if some emergency class admits
    both the ratio and the duration; otherwise it is a violation.
    """
    season_rules = [r for r in rules if r.season == season]
    if not season_rules:
        raise ConfigError(f"unknown season {season!r}")
    if rating <= 0:
        raise ValueError("rating must be positive")
    ratio = flow / rating
    for r in season_rules:
        if r.rating_class == "normal" and ratio <= r.multiplier:
            return NORMAL
    for r in season_rules:
        if r.rating_class != "normal" and ratio <= r.multiplier and duration_hours <= r.window_hours:
            return WITHIN_EMERGENCY
    return VIOLATION


# ---------------------------------------------------------------- capital cost

@dataclass(frozen=True)
class CapitalCostReport:
    transmission_elements: tuple[int, ...]
    distribution_elements: tuple[tuple, ...]
    transmission_cost: float
    distribution_cost: float

    @property
    def total(self) -> float:
        return self.transmission_cost + self.distribution_cost


def estimate_capital_cost(transmission_overloads, distribution_overloads,
                          transmission_unit_cost: float = 1.0e6,
                          distribution_unit_cost: float = 1.0e5) -> CapitalCostReport:
    """Remediation cost proxy: distinct overloaded elements times a unit upgrade cost.

    ``transmission_overloads`` and ``distribution_overloads`` are iterables of
    element keys (one entry per overloaded element-hour); each distinct
    element is counted once.
    """
    t = tuple(sorted(set(transmission_overloads)))
    d = tuple(sorted(set(distribution_overloads), key=repr))
    return CapitalCostReport(t, d, len(t) * transmission_unit_cost, len(d) * distribution_unit_cost)
