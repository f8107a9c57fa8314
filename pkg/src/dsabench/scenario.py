"""Seasonal load profiles, operating-condition sampling, contingency sets,
and solar-PV replacement."""

from __future__ import annotations

import csv
import datetime
import logging
from dataclasses import dataclass, replace

import numpy as np

from .network import (
    ConvergenceError,
    DataError,
    Dispatch,
    Machine,
    NetworkModel,
    PowerFlowSolution,
    ValidationError,
    solve_power_flow,
)

log = logging.getLogger(__name__)

SEASONS = ("spring", "summer", "fall", "winter")

# month -> season; Dec-Feb winter, Mar-May spring, Jun-Aug summer, Sep-Nov fall
DEFAULT_SEASON_CALENDAR = {
    12: "winter", 1: "winter", 2: "winter",
    3: "spring", 4: "spring", 5: "spring",
    6: "summer", 7: "summer", 8: "summer",
    9: "fall", 10: "fall", 11: "fall",
}

FIVE_CYCLES_60HZ = 5.0 / 60.0


@dataclass(frozen=True)
class SeasonProfile:
    season: str
    hourly_mw: tuple[float, ...]          # 24 entries, system-total MW
    source_years: tuple[int, ...]

    def __post_init__(self):
        if len(self.hourly_mw) != 24:
            raise ValidationError(f"{self.season}: profile needs 24 hourly values")
        if any(v <= 0 for v in self.hourly_mw):
            raise ValidationError(f"{self.season}: hourly loads must be positive")


@dataclass(frozen=True)
class OperatingCondition:
    id: int
    season: str
    hour: int
    load_scale: float
    dispatch: np.ndarray                   # MW per machine
    solved: PowerFlowSolution


@dataclass(frozen=True)
class Contingency:
    id: int
    faulted_lines: tuple[int, ...]         # branch positions, 1 <= k <= 6
    fault_fraction: float = 0.10
    t_fault: float = 5.0
    t_clear: float = 5.0 + FIVE_CYCLES_60HZ

    def __post_init__(self):
        if not 0 < len(self.faulted_lines) <= 6:
            raise ValidationError(f"contingency {self.id}: needs 1..6 faulted lines")
        if self.t_clear <= self.t_fault:
            raise ValidationError(f"contingency {self.id}: t_clear must follow t_fault")


@dataclass(frozen=True)
class SolarConfig:
    penetration_target: float
    replaced_machines: tuple[int, ...]     # machine positions
    achieved_penetration: float


# ---------------------------------------------------------------------------
# Hourly load ingestion
# ---------------------------------------------------------------------------

def ingest_hourly_load(path, season_calendar: dict[int, str] | None = None) -> list[SeasonProfile]:
    """Average an hourly-load CSV (``date,hour,load_mw``) into per-season
    24-hour profiles.

    Every season present in the file must cover all 24 hours; the mean is
    taken over all rows of that (season, hour) across all years present.
    """
    calendar = season_calendar or DEFAULT_SEASON_CALENDAR
    sums: dict[tuple[str, int], float] = {}
    counts: dict[tuple[str, int], int] = {}
    years: dict[str, set[int]] = {}

    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        for col in ("date", "hour", "load_mw"):
            if col not in cols:
                raise DataError(f"{path}: missing column {col!r}")
        for row_no, row in enumerate(reader, start=2):
            try:
                date = datetime.date.fromisoformat(row["date"])
                hour = int(row["hour"])
                mw = float(row["load_mw"])
            except (TypeError, ValueError) as e:
                raise DataError(f"{path}:{row_no}: bad row {row!r} ({e})") from e
            if not 0 <= hour <= 23:
                raise DataError(f"{path}:{row_no}: hour {hour} outside 0-23")
            season = calendar.get(date.month)
            if season is None:
                raise DataError(f"{path}:{row_no}: month {date.month} has no season")
            key = (season, hour)
            sums[key] = sums.get(key, 0.0) + mw
            counts[key] = counts.get(key, 0) + 1
            years.setdefault(season, set()).add(date.year)

    profiles = []
    for season in SEASONS:
        if season not in years:
            continue
        hourly = []
        for h in range(24):
            if (season, h) not in counts:
                raise DataError(f"{path}: season {season!r} has no data for hour {h}")
            hourly.append(sums[(season, h)] / counts[(season, h)])
        profiles.append(SeasonProfile(season, tuple(hourly), tuple(sorted(years[season]))))
    if not profiles:
        raise DataError(f"{path}: no usable rows")
    return profiles


def profile_for(profiles: list[SeasonProfile], season: str) -> SeasonProfile:
    for p in profiles:
        if p.season == season:
            return p
    raise DataError(f"season {season!r} not present in the load data "
                    f"(have {[p.season for p in profiles]})")


# ---------------------------------------------------------------------------
# Operating conditions
# ---------------------------------------------------------------------------

def generate_operating_conditions(model: NetworkModel, profile: SeasonProfile,
                                  count: int = 96, seed: int = 0,
                                  jitter: tuple[float, float] | None = (0.95, 1.05),
                                  ) -> list[OperatingCondition]:
    """Sample ``count`` solved operating conditions off the daily profile.

    ``count`` must be a multiple of 24: each hour contributes ``count // 24``
    variants whose load scale is the profile value times a uniform draw from
    ``jitter`` (pass None to pin the multiplier at 1).  Generation is scaled
    proportionally to each machine's base setpoint so dispatched MW matches
    the scaled load; the slack picks up losses.  Conditions whose power flow
    fails are re-drawn up to 5 times, then skipped with a warning.
    """
    if count % 24 != 0 or count <= 0:
        raise ValidationError(f"count {count} must be a positive multiple of 24")
    variants = count // 24
    rng = np.random.default_rng(seed)
    base_total = model.total_load_p()
    p_set = np.array([m.p_set for m in model.machines], dtype=float)
    p_set_total = p_set.sum()
    if base_total <= 0 or p_set_total <= 0:
        raise ValidationError("model must carry nonzero base load and dispatch")

    conditions: list[OperatingCondition] = []
    skipped = 0
    for hour in range(24):
        for _v in range(variants):
            solved = None
            for _attempt in range(5):
                u = rng.uniform(*jitter) if jitter is not None else 1.0
                load_scale = profile.hourly_mw[hour] / base_total * u
                dispatch_mw = p_set * (load_scale * base_total / p_set_total)
                try:
                    solved = solve_power_flow(model, Dispatch(dispatch_mw, load_scale))
                    break
                except ConvergenceError:
                    solved = None
                    if jitter is None:
                        break
            if solved is None:
                skipped += 1
                log.warning("operating condition hour %d skipped after retries", hour)
                continue
            conditions.append(OperatingCondition(
                id=len(conditions) + 1, season=profile.season, hour=hour,
                load_scale=load_scale, dispatch=dispatch_mw, solved=solved))
    if skipped:
        log.warning("%d of %d operating conditions skipped", skipped, count)
    return conditions


# ---------------------------------------------------------------------------
# Contingencies
# ---------------------------------------------------------------------------

def _line_candidates(model: NetworkModel) -> list[int]:
    """In-service plain lines (tap 1) whose single removal keeps the network
    connected to the slack."""
    out = []
    for k, br in enumerate(model.branches):
        if not br.in_service or br.tap != 1.0:
            continue
        if model.is_connected({k}):
            out.append(k)
    return out


def generate_contingencies(model: NetworkModel, n_c: int = 50, k_max: int = 6,
                           seed: int = 0) -> list[Contingency]:
    """Deterministic contingency mix: ``ceil(n_c / 2)`` single-line faults and
    the remainder split evenly over k = 2..k_max simultaneous line faults.

    Faulted sets are sampled without replacement and rejected when their
    removal disconnects any bus from the slack.  Every contingency inherits
    fault_fraction 0.10, inception at 5 s and clearing 5 cycles later.
    """
    if n_c < 1:
        raise ValidationError("n_c must be at least 1")
    if not 1 <= k_max <= 6:
        raise ValidationError("k_max must lie in 1..6")
    rng = np.random.default_rng(seed)
    singles_wanted = n_c if k_max == 1 else (n_c + 1) // 2
    candidates = _line_candidates(model)
    if singles_wanted > len(candidates):
        raise ValidationError(
            f"requested {singles_wanted} single-line contingencies but only "
            f"{len(candidates)} non-islanding lines exist")

    order = rng.permutation(len(candidates))
    picked = [candidates[i] for i in order[:singles_wanted]]
    contingencies = [
        Contingency(id=i + 1, faulted_lines=(line,))
        for i, line in enumerate(sorted(picked))
    ]

    remainder = n_c - singles_wanted
    if remainder:
        ks = list(range(2, k_max + 1))
        if not ks:
            raise ValidationError("k_max 1 cannot host multi-line contingencies")
        per_k = {k: remainder // len(ks) for k in ks}
        for k in ks[: remainder % len(ks)]:
            per_k[k] += 1
        lines = [k for k, br in enumerate(model.branches) if br.in_service and br.tap == 1.0]
        touches: dict[int, list[int]] = {}
        for k in lines:
            br = model.branches[k]
            touches.setdefault(br.from_bus, []).append(k)
            touches.setdefault(br.to_bus, []).append(k)
        seen: set[tuple[int, ...]] = {c.faulted_lines for c in contingencies}
        for k in ks:
            for _ in range(per_k[k]):
                group = _sample_line_cluster(model, lines, touches, k, rng, seen)
                if group is None:
                    raise ValidationError(
                        f"could not sample a non-islanding {k}-line contingency")
                seen.add(group)
                contingencies.append(
                    Contingency(id=len(contingencies) + 1, faulted_lines=group))
    return contingencies


def _sample_line_cluster(model, lines, touches, size, rng, seen, attempts=2000):
    """Grow a connected group of ``size`` lines (multi-line events hit
    electrically close circuits: shared corridors and substations).  Rejects
    groups already drawn and groups whose removal disconnects the network."""
    for _ in range(attempts):
        seed_line = lines[rng.integers(len(lines))]
        group = {seed_line}
        buses = {model.branches[seed_line].from_bus, model.branches[seed_line].to_bus}
        while len(group) < size:
            frontier = sorted({c for b in buses for c in touches[b]} - group)
            if not frontier:
                break
            pick = frontier[rng.integers(len(frontier))]
            group.add(pick)
            buses |= {model.branches[pick].from_bus, model.branches[pick].to_bus}
        key = tuple(sorted(group))
        if len(group) == size and key not in seen and model.is_connected(group):
            return key
    return None


# ---------------------------------------------------------------------------
# Solar replacement
# ---------------------------------------------------------------------------

def apply_solar(model: NetworkModel, target: float, seed: int = 0
                ) -> tuple[NetworkModel, SolarConfig]:
    """Flip conventional machines to solar until the dispatched-power share of
    solar lands within two percentage points of ``target``.

    Machines are visited in a seeded random order; one is skipped when
    flipping it would overshoot the band.  The slack-bus machine never flips.
    Dispatch itself is untouched (replacement, not curtailment).
    """
    if not 0 < target < 0.5:
        raise ValidationError("solar target must lie in (0, 0.5)")
    rng = np.random.default_rng(seed)
    slack_id = model.buses[model.slack_position()].id
    total = model.total_dispatch_p()
    shares = {
        i: m.p_set / total
        for i, m in enumerate(model.machines)
        if m.bus != slack_id and m.p_set > 0 and not m.is_solar
    }
    order = list(shares)
    rng.shuffle(order)

    picked: list[int] = []
    achieved = 0.0
    for i in order:
        if achieved >= target - 0.02:
            break
        if achieved + shares[i] <= target + 0.02:
            picked.append(i)
            achieved += shares[i]
    if achieved < target - 0.02:
        raise ValidationError(
            f"cannot reach {target:.0%} solar without the slack machine "
            f"(best achievable {achieved:.1%} with this ordering)")

    machines = list(model.machines)
    for i in picked:
        machines[i] = replace(machines[i], is_solar=True)
    new_model = NetworkModel(
        buses=model.buses, branches=model.branches, machines=tuple(machines),
        loads=model.loads, base_mva=model.base_mva)
    return new_model, SolarConfig(
        penetration_target=target,
        replaced_machines=tuple(sorted(picked)),
        achieved_penetration=achieved)
