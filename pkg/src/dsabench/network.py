"""Static network model, admittance-matrix construction, and Newton-Raphson power flow.

The network file format is JSON with top-level keys ``base_mva``, ``buses``,
``branches``, ``machines`` and ``loads``; field names match the dataclasses
below.  Branches are identified by their position in the ``branches`` list
(0-based) everywhere in this package.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Malformed input file or record."""


class ValidationError(DataError):
    """Structurally parsable input that violates a model invariant."""


class ConvergenceError(RuntimeError):
    """Iterative solve failed to reach tolerance."""


BUS_KINDS = ("slack", "PV", "PQ")


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    base_kv: float
    voltage_setpoint: float | None = None
    is_zero_injection: bool = False


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_shunt: float = 0.0
    tap: float = 1.0
    in_service: bool = True


@dataclass(frozen=True)
class Machine:
    bus: int
    rating_mva: float
    p_set: float
    q_limits: tuple[float, float]
    h: float
    xd_prime: float
    d: float = 1.0
    is_solar: bool = False


@dataclass(frozen=True)
class Load:
    bus: int
    p: float
    q: float


# Fallback dynamic parameters applied when a machine record omits them:
# inertia scales with rating (clamped to a conventional range), transient
# reactance is 0.25 pu on machine base converted to system base.
DEFAULT_H_PER_100MVA = 3.0
DEFAULT_H_RANGE = (2.0, 8.0)
DEFAULT_XDP_MACHINE_BASE = 0.25
DEFAULT_DAMPING = 1.0


def default_machine_dynamics(rating_mva: float, base_mva: float = 100.0):
    """Return (h, xd_prime, d) for a machine of the given MVA rating."""
    h = DEFAULT_H_PER_100MVA * rating_mva / 100.0
    h = min(max(h, DEFAULT_H_RANGE[0]), DEFAULT_H_RANGE[1])
    xdp = DEFAULT_XDP_MACHINE_BASE * base_mva / rating_mva
    return h, xdp, DEFAULT_DAMPING


@dataclass(frozen=True)
class NetworkModel:
    """Immutable snapshot of the study system.  Safe to share across workers."""

    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    machines: tuple[Machine, ...]
    loads: tuple[Load, ...]
    base_mva: float

    # ---- index helpers -------------------------------------------------

    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    def slack_position(self) -> int:
        for i, b in enumerate(self.buses):
            if b.kind == "slack":
                return i
        raise ValidationError("model has no slack bus")

    def bus_kinds(self) -> np.ndarray:
        return np.array([BUS_KINDS.index(b.kind) for b in self.buses])

    def total_load_p(self) -> float:
        return float(sum(ld.p for ld in self.loads))

    def total_dispatch_p(self) -> float:
        return float(sum(m.p_set for m in self.machines))

    def adjacency(self, removed_branches: set[int] | frozenset[int] = frozenset()):
        """Bus-position adjacency lists over in-service branches."""
        idx = self.bus_index()
        adj: list[list[int]] = [[] for _ in self.buses]
        for k, br in enumerate(self.branches):
            if not br.in_service or k in removed_branches:
                continue
            i, j = idx[br.from_bus], idx[br.to_bus]
            adj[i].append(j)
            adj[j].append(i)
        return adj

    def is_connected(self, removed_branches: set[int] | frozenset[int] = frozenset()) -> bool:
        """True when every bus is reachable from the slack (BFS)."""
        adj = self.adjacency(removed_branches)
        seen = [False] * self.n_bus
        stack = [self.slack_position()]
        seen[stack[0]] = True
        count = 1
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if not seen[v]:
                    seen[v] = True
                    count += 1
                    stack.append(v)
        return count == self.n_bus

    # ---- validation ----------------------------------------------------

    def validate(self) -> None:
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ValidationError(f"duplicate bus ids {dup}")
        idx = self.bus_index()
        slacks = [b.id for b in self.buses if b.kind == "slack"]
        if len(slacks) != 1:
            raise ValidationError(f"expected exactly one slack bus, found {slacks}")
        for b in self.buses:
            if b.kind not in BUS_KINDS:
                raise ValidationError(f"bus {b.id}: unknown kind {b.kind!r}")
            if b.base_kv <= 0:
                raise ValidationError(f"bus {b.id}: base_kv must be positive")
            if b.kind in ("slack", "PV") and not b.voltage_setpoint:
                raise ValidationError(f"bus {b.id}: {b.kind} bus needs a voltage_setpoint")
        for k, br in enumerate(self.branches):
            for end in (br.from_bus, br.to_bus):
                if end not in idx:
                    raise ValidationError(f"branch {k}: references unknown bus {end}")
            if br.from_bus == br.to_bus:
                raise ValidationError(f"branch {k}: from_bus equals to_bus ({br.from_bus})")
            if br.x == 0:
                raise ValidationError(f"branch {k}: zero reactance")
            if br.tap <= 0:
                raise ValidationError(f"branch {k}: tap must be positive")
        for m_i, m in enumerate(self.machines):
            if m.bus not in idx:
                raise ValidationError(f"machine {m_i}: references unknown bus {m.bus}")
            if not m.is_solar and (m.h <= 0 or m.xd_prime <= 0):
                raise ValidationError(f"machine {m_i} at bus {m.bus}: h and xd_prime must be positive")
        for l_i, ld in enumerate(self.loads):
            if ld.bus not in idx:
                raise ValidationError(f"load {l_i}: references unknown bus {ld.bus}")
        injected = {m.bus for m in self.machines} | {ld.bus for ld in self.loads}
        for b in self.buses:
            if b.is_zero_injection and b.id in injected:
                raise ValidationError(f"bus {b.id}: flagged zero-injection but has load or machine")
        if not self.is_connected():
            raise ValidationError("graph of in-service branches is not connected")

    # ---- serialization -------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "base_mva": self.base_mva,
            "buses": [
                {
                    "id": b.id,
                    "kind": b.kind,
                    "base_kv": b.base_kv,
                    "voltage_setpoint": b.voltage_setpoint,
                    "is_zero_injection": b.is_zero_injection,
                }
                for b in self.buses
            ],
            "branches": [
                {
                    "from_bus": br.from_bus,
                    "to_bus": br.to_bus,
                    "r": br.r,
                    "x": br.x,
                    "b_shunt": br.b_shunt,
                    "tap": br.tap,
                    "in_service": br.in_service,
                }
                for br in self.branches
            ],
            "machines": [
                {
                    "bus": m.bus,
                    "rating_mva": m.rating_mva,
                    "p_set": m.p_set,
                    "q_limits": list(m.q_limits),
                    "h": m.h,
                    "xd_prime": m.xd_prime,
                    "d": m.d,
                    "is_solar": m.is_solar,
                }
                for m in self.machines
            ],
            "loads": [{"bus": ld.bus, "p": ld.p, "q": ld.q} for ld in self.loads],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))


def load_network(path: str | Path, machine_params: str | Path | None = None) -> NetworkModel:
    """Load and validate a network model from a JSON file.

    ``machine_params`` optionally points to a JSON overlay file
    ``{"machines": [{"bus": id, "h": ..., "xd_prime": ..., "d": ...}, ...]}``
    supplying dynamic parameters for machines that omit them.  Machines that
    still lack parameters after the overlay get rating-derived defaults.
    Zero-injection flags are auto-detected (no load, no machine) for buses
    whose records omit the field.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: not valid JSON ({e})") from e
    for key in ("base_mva", "buses", "branches", "machines", "loads"):
        if key not in raw:
            raise DataError(f"{path}: missing top-level key {key!r}")

    overlay: dict[int, dict] = {}
    if machine_params is not None:
        params_raw = json.loads(Path(machine_params).read_text())
        for rec in params_raw.get("machines", []):
            overlay[int(rec["bus"])] = rec

    base_mva = float(raw["base_mva"])
    injected_buses = {int(m["bus"]) for m in raw["machines"]}
    injected_buses |= {int(ld["bus"]) for ld in raw["loads"]}

    buses = []
    for rec in raw["buses"]:
        try:
            bid = int(rec["id"])
            zi = rec.get("is_zero_injection")
            if zi is None:
                zi = bid not in injected_buses
            buses.append(
                Bus(
                    id=bid,
                    kind=str(rec["kind"]),
                    base_kv=float(rec["base_kv"]),
                    voltage_setpoint=(None if rec.get("voltage_setpoint") is None
                                      else float(rec["voltage_setpoint"])),
                    is_zero_injection=bool(zi),
                )
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"{path}: bad bus record {rec!r} ({e})") from e

    branches = []
    for k, rec in enumerate(raw["branches"]):
        try:
            branches.append(
                Branch(
                    from_bus=int(rec["from_bus"]),
                    to_bus=int(rec["to_bus"]),
                    r=float(rec["r"]),
                    x=float(rec["x"]),
                    b_shunt=float(rec.get("b_shunt", 0.0)),
                    tap=float(rec.get("tap", 1.0)),
                    in_service=bool(rec.get("in_service", True)),
                )
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"{path}: bad branch record {k} {rec!r} ({e})") from e

    machines = []
    for k, rec in enumerate(raw["machines"]):
        try:
            bus = int(rec["bus"])
            rating = float(rec["rating_mva"])
            over = overlay.get(bus, {})
            h = rec.get("h", over.get("h"))
            xdp = rec.get("xd_prime", over.get("xd_prime"))
            d = rec.get("d", over.get("d"))
            dh, dxdp, dd = default_machine_dynamics(rating, base_mva)
            machines.append(
                Machine(
                    bus=bus,
                    rating_mva=rating,
                    p_set=float(rec["p_set"]),
                    q_limits=(float(rec["q_limits"][0]), float(rec["q_limits"][1])),
                    h=float(h if h is not None else dh),
                    xd_prime=float(xdp if xdp is not None else dxdp),
                    d=float(d if d is not None else dd),
                    is_solar=bool(rec.get("is_solar", False)),
                )
            )
        except (KeyError, TypeError, ValueError, IndexError) as e:
            raise DataError(f"{path}: bad machine record {k} {rec!r} ({e})") from e

    loads = []
    for k, rec in enumerate(raw["loads"]):
        try:
            loads.append(Load(bus=int(rec["bus"]), p=float(rec["p"]), q=float(rec["q"])))
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"{path}: bad load record {k} {rec!r} ({e})") from e

    model = NetworkModel(
        buses=tuple(buses),
        branches=tuple(branches),
        machines=tuple(machines),
        loads=tuple(loads),
        base_mva=base_mva,
    )
    model.validate()
    return model


# ---------------------------------------------------------------------------
# Admittance matrix
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BranchSplit:
    """Split a branch at ``fraction`` from its from-bus and attach ``shunt_y``
    (complex admittance, pu) at the new intermediate node."""

    branch: int
    fraction: float
    shunt_y: complex


@dataclass(frozen=True)
class Overrides:
    """Topology changes applied on top of the base model when building Y.

    Branch indices are positions into ``model.branches``.  Split nodes are
    appended after the model buses, in ``splits`` order.
    """

    disable_branches: tuple[int, ...] = ()
    splits: tuple[BranchSplit, ...] = ()
    bus_shunts: tuple[tuple[int, complex], ...] = ()


def build_admittance(model: NetworkModel, overrides: Overrides | None = None,
                     include_charging: bool = True) -> np.ndarray:
    """Dense complex bus-admittance matrix.

    Returns an ``(n_bus + n_splits) x (n_bus + n_splits)`` matrix; parallel
    branches aggregate.  A split branch is replaced by its two pi-section
    segments joined at the appended node, with the split's shunt added there.
    """
    ov = overrides or Overrides()
    idx = model.bus_index()
    disabled = set(ov.disable_branches)
    split_of = {s.branch: (pos, s) for pos, s in enumerate(ov.splits)}
    n = model.n_bus + len(ov.splits)
    y = np.zeros((n, n), dtype=complex)

    def stamp(i, j, series_y, b_total, tap):
        # pi model; tap on the from (i) side
        sh = 1j * b_total / 2.0 if include_charging else 0.0
        y[i, i] += (series_y + sh) / (tap * tap)
        y[j, j] += series_y + sh
        y[i, j] -= series_y / tap
        y[j, i] -= series_y / tap

    for k, br in enumerate(model.branches):
        if not br.in_service or k in disabled:
            continue
        i, j = idx[br.from_bus], idx[br.to_bus]
        ys = 1.0 / complex(br.r, br.x)
        if k in split_of:
            pos, s = split_of[k]
            if br.tap != 1.0:
                raise ValidationError(f"branch {k}: cannot split a transformer (tap {br.tap})")
            if not 0.0 < s.fraction < 1.0:
                raise ValidationError(f"branch {k}: split fraction {s.fraction} outside (0, 1)")
            m = model.n_bus + pos
            stamp(i, m, ys / s.fraction, br.b_shunt * s.fraction, 1.0)
            stamp(m, j, ys / (1.0 - s.fraction), br.b_shunt * (1.0 - s.fraction), 1.0)
            y[m, m] += s.shunt_y
        else:
            stamp(i, j, ys, br.b_shunt, br.tap)

    for bus_pos, sh in ov.bus_shunts:
        y[bus_pos, bus_pos] += sh
    return y


# ---------------------------------------------------------------------------
# Power flow
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Dispatch:
    """Per-machine MW targets plus a load scaling factor.

    ``machine_p_mw`` entries for machines on the slack bus are ignored (the
    slack absorbs the residual).  ``load_scale`` multiplies every load's base
    P and Q; it may be a scalar or a per-load array.
    """

    machine_p_mw: np.ndarray
    load_scale: float | np.ndarray = 1.0

    @staticmethod
    def base_case(model: NetworkModel) -> "Dispatch":
        return Dispatch(np.array([m.p_set for m in model.machines], dtype=float), 1.0)


@dataclass
class PowerFlowSolution:
    v_mag: np.ndarray            # pu, per bus
    v_ang: np.ndarray            # rad, per bus (slack at 0)
    p_gen: np.ndarray            # pu on system base, per machine
    q_gen: np.ndarray            # pu on system base, per machine
    max_mismatch: float          # pu
    iterations: int
    converged: bool
    warnings: list[str] = field(default_factory=list)
    dispatch: "Dispatch | None" = None   # the dispatch this solution answers

    def complex_voltage(self) -> np.ndarray:
        return self.v_mag * np.exp(1j * self.v_ang)


def _spec_injections(model: NetworkModel, dispatch: Dispatch):
    """Scheduled complex power per bus (pu) exclusive of slack balancing."""
    n = model.n_bus
    idx = model.bus_index()
    p = np.zeros(n)
    q = np.zeros(n)
    for m, p_mw in zip(model.machines, np.asarray(dispatch.machine_p_mw, dtype=float)):
        p[idx[m.bus]] += p_mw / model.base_mva
    scale = np.broadcast_to(np.asarray(dispatch.load_scale, dtype=float), (len(model.loads),))
    for ld, s in zip(model.loads, scale):
        p[idx[ld.bus]] -= s * ld.p / model.base_mva
        q[idx[ld.bus]] -= s * ld.q / model.base_mva
    return p, q


def solve_power_flow(model: NetworkModel, dispatch: Dispatch | None = None, *,
                     enforce_q_limits: bool = True, tol: float = 1e-8,
                     max_iterations: int = 30, warm_start: PowerFlowSolution | None = None,
                     slack_limit_mw: float | None = None,
                     y_bus: np.ndarray | None = None) -> PowerFlowSolution:
    """Newton-Raphson power flow in polar coordinates.

    PV buses hold their setpoint magnitude unless reactive limits bind, in
    which case they are converted to PQ at the violated limit and the solve
    repeats.  Raises :class:`ConvergenceError` when the mismatch is still
    above ``tol`` after ``max_iterations`` Newton steps.
    """
    if dispatch is None:
        dispatch = Dispatch.base_case(model)
    n = model.n_bus
    idx = model.bus_index()
    y = build_admittance(model) if y_bus is None else y_bus
    kinds = model.bus_kinds()          # 0 slack, 1 PV, 2 PQ
    slack = model.slack_position()
    p_spec, q_spec = _spec_injections(model, dispatch)

    vset = np.ones(n)
    for i, b in enumerate(model.buses):
        if b.voltage_setpoint:
            vset[i] = b.voltage_setpoint

    # Aggregate machine reactive limits per bus (pu).
    q_min_bus = np.zeros(n)
    q_max_bus = np.zeros(n)
    has_mach = np.zeros(n, dtype=bool)
    for m in model.machines:
        i = idx[m.bus]
        has_mach[i] = True
        q_min_bus[i] += m.q_limits[0] / model.base_mva
        q_max_bus[i] += m.q_limits[1] / model.base_mva

    # Load reactive draw per bus (pu), needed to recover machine Q afterwards.
    q_load_bus = np.zeros(n)
    scale = np.broadcast_to(np.asarray(dispatch.load_scale, dtype=float), (len(model.loads),))
    for ld, s in zip(model.loads, scale):
        q_load_bus[idx[ld.bus]] += s * ld.q / model.base_mva

    if warm_start is not None:
        vm = warm_start.v_mag.copy()
        va = warm_start.v_ang.copy()
    else:
        vm = vset.copy()
        va = np.zeros(n)
    vm[kinds != 2] = vset[kinds != 2]
    va[slack] = 0.0

    is_pq = kinds == 2
    q_fixed = q_spec.copy()            # Q schedule for buses treated as PQ
    warnings: list[str] = []
    total_iters = 0

    def run_newton(is_pq_eff, q_sched, vm, va):
        nonlocal total_iters
        pv_pq = np.flatnonzero(np.arange(n) != slack)
        pq = np.flatnonzero(is_pq_eff)
        for _ in range(max_iterations):
            v = vm * np.exp(1j * va)
            s_calc = v * np.conj(y @ v)
            dp = p_spec[pv_pq] - s_calc.real[pv_pq]
            dq = q_sched[pq] - s_calc.imag[pq]
            mism = np.concatenate([dp, dq])
            worst = np.max(np.abs(mism)) if mism.size else 0.0
            if worst < tol:
                return vm, va, worst, True
            ibus = y @ v
            diag_v = np.diag(v)
            diag_i = np.diag(ibus)
            diag_vnorm = np.diag(v / vm)
            ds_dva = 1j * diag_v @ np.conj(diag_i - y @ diag_v)
            ds_dvm = diag_vnorm @ np.conj(diag_i) + diag_v @ np.conj(y @ diag_vnorm)
            j11 = ds_dva.real[np.ix_(pv_pq, pv_pq)]
            j12 = ds_dvm.real[np.ix_(pv_pq, pq)]
            j21 = ds_dva.imag[np.ix_(pq, pv_pq)]
            j22 = ds_dvm.imag[np.ix_(pq, pq)]
            jac = np.block([[j11, j12], [j21, j22]])
            try:
                dx = np.linalg.solve(jac, mism)
            except np.linalg.LinAlgError as e:
                raise ConvergenceError(f"singular Jacobian (mismatch {worst:.3e})") from e
            va = va.copy()
            vm = vm.copy()
            va[pv_pq] += dx[: pv_pq.size]
            vm[pq] += dx[pv_pq.size:]
            total_iters += 1
        v = vm * np.exp(1j * va)
        s_calc = v * np.conj(y @ v)
        worst = max(
            np.max(np.abs(p_spec[pv_pq] - s_calc.real[pv_pq]), initial=0.0),
            np.max(np.abs(q_sched[pq] - s_calc.imag[pq]), initial=0.0),
        )
        return vm, va, worst, False

    # Outer loop: PV -> PQ switching on reactive-limit violations.
    pv_mask = kinds == 1
    for _round in range(20):
        vm, va, worst, ok = run_newton(is_pq, q_fixed, vm, va)
        if not ok:
            raise ConvergenceError(
                f"power flow did not converge after {max_iterations} iterations "
                f"(max mismatch {worst:.3e} pu)")
        if not enforce_q_limits:
            break
        v = vm * np.exp(1j * va)
        s_calc = v * np.conj(y @ v)
        q_inj = s_calc.imag
        switched = False
        for i in np.flatnonzero(pv_mask & ~is_pq):
            q_mach = q_inj[i] + q_load_bus[i]
            if q_mach > q_max_bus[i] + 1e-9:
                q_fixed[i] = q_max_bus[i] - q_load_bus[i]
                is_pq = is_pq.copy()
                is_pq[i] = True
                warnings.append(f"bus {model.buses[i].id}: PV converted to PQ at Qmax")
                switched = True
            elif q_mach < q_min_bus[i] - 1e-9:
                q_fixed[i] = q_min_bus[i] - q_load_bus[i]
                is_pq = is_pq.copy()
                is_pq[i] = True
                warnings.append(f"bus {model.buses[i].id}: PV converted to PQ at Qmin")
                switched = True
        if not switched:
            break
    else:
        raise ConvergenceError("reactive-limit switching did not settle after 20 rounds")

    v = vm * np.exp(1j * va)
    s_calc = v * np.conj(y @ v)
    pv_pq = np.flatnonzero(np.arange(n) != slack)
    pq = np.flatnonzero(is_pq)
    max_mismatch = max(
        np.max(np.abs(p_spec[pv_pq] - s_calc.real[pv_pq]), initial=0.0),
        np.max(np.abs(q_fixed[pq] - s_calc.imag[pq]), initial=0.0),
    )

    # Allocate bus-level generation back to machines.
    p_gen = np.zeros(len(model.machines))
    q_gen = np.zeros(len(model.machines))
    mach_at_bus: dict[int, list[int]] = {}
    for k, m in enumerate(model.machines):
        mach_at_bus.setdefault(idx[m.bus], []).append(k)
    disp = np.asarray(dispatch.machine_p_mw, dtype=float) / model.base_mva
    for i, members in mach_at_bus.items():
        bus_q_mach = s_calc.imag[i] + q_load_bus[i]
        ranges = np.array([model.machines[k].q_limits[1] - model.machines[k].q_limits[0]
                           for k in members], dtype=float)
        weights = ranges / ranges.sum() if ranges.sum() > 0 else np.full(len(members), 1.0 / len(members))
        for w, k in zip(weights, members):
            q_gen[k] = w * bus_q_mach
        if i == slack:
            gen_total = s_calc.real[i] + (np.sum([disp[k] for k in members]) - p_spec[i])
            ratings = np.array([model.machines[k].rating_mva for k in members], dtype=float)
            rw = ratings / ratings.sum()
            for w, k in zip(rw, members):
                p_gen[k] = w * gen_total
        else:
            for k in members:
                p_gen[k] = disp[k]

    if slack_limit_mw is not None:
        slack_p = sum(p_gen[k] for k in mach_at_bus.get(slack, [])) * model.base_mva
        if abs(slack_p) > slack_limit_mw:
            warnings.append(
                f"slack generation {slack_p:.1f} MW exceeds configured limit {slack_limit_mw:.1f} MW")

    return PowerFlowSolution(
        v_mag=vm, v_ang=va, p_gen=p_gen, q_gen=q_gen,
        max_mismatch=float(max_mismatch), iterations=total_iters,
        converged=True, warnings=warnings, dispatch=dispatch,
    )
