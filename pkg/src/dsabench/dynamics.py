"""Time-domain simulation of the classical multi-machine model.

Machines are constant EMFs behind transient reactance, loads constant
admittances frozen from the pre-fault power flow, and solar units constant
current injections.  For each network topology the algebraic network is
eliminated down to the machine internal nodes once, so every integration
stage costs one small complex mat-vec; bus voltages are recovered through a
second precomputed map when a 30 Hz sample is due.  Cases for the same
operating condition integrate as a stacked batch.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .network import (
    BranchSplit,
    NetworkModel,
    Overrides,
    PowerFlowSolution,
    ValidationError,
    build_admittance,
)
from .scenario import Contingency, OperatingCondition

log = logging.getLogger(__name__)

W_SYNC = 2.0 * math.pi * 60.0


class SimulationError(RuntimeError):
    """Network algebra or integration failed."""


@dataclass(frozen=True)
class MachineState:
    delta: float       # rotor angle, rad
    omega: float       # speed deviation, pu
    e_mag: float       # internal EMF magnitude, pu


@dataclass(frozen=True)
class SimulatorConfig:
    dt: float = 1.0 / 150.0
    t_end: float = 20.0
    sample_rate: int = 30
    fault_admittance: float = 1e4     # pu, applied as a purely reactive shunt
    divergence_cutoff: float = 720.0  # degrees of pairwise rotor separation

    def __post_init__(self):
        if self.dt > 1.0 / (2 * self.sample_rate):
            raise ValidationError("dt must not exceed half a sample interval")
        if self.fault_admittance <= 0:
            raise ValidationError("fault_admittance must be positive")

    @property
    def substeps(self) -> int:
        """Integration steps per sample; dt is snapped so they tile exactly."""
        return max(1, round(1.0 / (self.sample_rate * self.dt)))

    @property
    def dt_effective(self) -> float:
        return 1.0 / (self.sample_rate * self.substeps)


@dataclass
class SimulationTrace:
    times: np.ndarray          # (n_samples,), i / sample_rate
    rotor_angle: np.ndarray    # (n_conv_machines, n_samples), degrees
    rotor_speed: np.ndarray    # (n_conv_machines, n_samples), pu deviation
    v_mag: np.ndarray          # (n_bus, n_samples), pu
    v_ang: np.ndarray          # (n_bus, n_samples), degrees
    terminated_early: bool
    t_last: float
    t_fault: float
    machine_positions: tuple[int, ...]   # positions into model.machines
    bus_ids: tuple[int, ...]

    @property
    def n_samples(self) -> int:
        return self.times.size

    def to_csv(self, path) -> None:
        header = ["t"]
        for b in self.bus_ids:
            header += [f"bus{b}_vmag", f"bus{b}_vang"]
        header += [f"gen{k}_delta" for k in self.machine_positions]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for s in range(self.n_samples):
                row = [repr(float(self.times[s]))]
                for i in range(len(self.bus_ids)):
                    row += [repr(float(self.v_mag[i, s])), repr(float(self.v_ang[i, s]))]
                row += [repr(float(a)) for a in self.rotor_angle[:, s]]
                writer.writerow(row)


@dataclass(frozen=True)
class NetworkPhase:
    """Linear maps of one topology after eliminating everything but machine
    internal nodes: currents I = c @ E + d, bus voltages V = v_recover @ E
    + v_const, with E the vector of machine internal phasors."""

    c: np.ndarray          # (m, m) complex; the reduced admittance
    d: np.ndarray          # (m,) complex
    v_recover: np.ndarray  # (n_bus, m) complex
    v_const: np.ndarray    # (n_bus,) complex


@dataclass(frozen=True)
class DynamicsInit:
    machine_states: tuple[MachineState, ...]   # conventional machines only
    conv_positions: tuple[int, ...]
    solar_positions: tuple[int, ...]
    e_mag: np.ndarray        # (m,)
    delta0: np.ndarray       # (m,) rad
    p_mech: np.ndarray       # (m,) pu
    h: np.ndarray            # (m,) s
    damping: np.ndarray      # (m,) pu torque per pu speed
    y_machine: np.ndarray    # (m,) complex, 1 / (j xd')
    conv_bus_pos: np.ndarray
    load_y: np.ndarray       # (n_bus,) complex
    solar_bus_pos: np.ndarray
    solar_current: np.ndarray
    v0: np.ndarray           # (n_bus,) complex pre-fault voltages


def build_network_phase(model: NetworkModel, init: DynamicsInit,
                        overrides: Overrides | None = None) -> NetworkPhase:
    """Eliminate the bus network of one topology down to machine nodes."""
    y = build_admittance(model, overrides)
    n_nodes = y.shape[0]
    n_bus = model.n_bus
    y[np.arange(n_bus), np.arange(n_bus)] += init.load_y
    y[init.conv_bus_pos, init.conv_bus_pos] += init.y_machine

    m = init.conv_bus_pos.size
    rhs = np.zeros((n_nodes, m + 1), dtype=complex)
    rhs[init.conv_bus_pos, np.arange(m)] = init.y_machine
    np.add.at(rhs[:, m], init.solar_bus_pos, init.solar_current)

    lu, piv = sla.lu_factor(y, check_finite=False)
    if np.min(np.abs(np.diag(lu))) < 1e-12:
        raise SimulationError("singular network algebra (islanded topology?)")
    x = sla.lu_solve((lu, piv), rhs, check_finite=False)

    p_mach = x[init.conv_bus_pos, :m]
    q_mach = x[init.conv_bus_pos, m]
    c = np.diag(init.y_machine) - init.y_machine[:, None] * p_mach
    d = -init.y_machine * q_mach
    return NetworkPhase(c=c, d=d, v_recover=x[:n_bus, :m], v_const=x[:n_bus, m])


def initialize_dynamics(model: NetworkModel, pf: PowerFlowSolution) -> DynamicsInit:
    """Set up machine EMFs, load admittances and solar injections from a
    converged power flow, and verify the network algebra reproduces the
    power-flow voltages at t = 0."""
    idx = model.bus_index()
    v = pf.complex_voltage()
    conv, solar = [], []
    for k, mc in enumerate(model.machines):
        (solar if mc.is_solar else conv).append(k)

    e_mag = np.zeros(len(conv))
    delta0 = np.zeros(len(conv))
    y_mach = np.zeros(len(conv), dtype=complex)
    conv_bus = np.zeros(len(conv), dtype=int)
    h = np.zeros(len(conv))
    damping = np.zeros(len(conv))
    for j, k in enumerate(conv):
        mc = model.machines[k]
        bus = idx[mc.bus]
        vt = v[bus]
        if abs(vt) < 1e-6:
            raise SimulationError(f"machine at bus {mc.bus}: zero terminal voltage")
        s = pf.p_gen[k] + 1j * pf.q_gen[k]
        i_term = np.conj(s / vt)
        e = vt + 1j * mc.xd_prime * i_term
        e_mag[j] = abs(e)
        delta0[j] = np.angle(e)
        y_mach[j] = 1.0 / (1j * mc.xd_prime)
        conv_bus[j] = bus
        h[j] = mc.h
        damping[j] = mc.d

    solar_bus = np.zeros(len(solar), dtype=int)
    solar_i = np.zeros(len(solar), dtype=complex)
    for j, k in enumerate(solar):
        mc = model.machines[k]
        bus = idx[mc.bus]
        vt = v[bus]
        if abs(vt) < 1e-6:
            raise SimulationError(f"solar machine at bus {mc.bus}: zero terminal voltage")
        s = pf.p_gen[k] + 1j * pf.q_gen[k]
        solar_bus[j] = bus
        solar_i[j] = np.conj(s / vt)

    load_y = np.zeros(model.n_bus, dtype=complex)
    dispatch = pf.dispatch
    scale = np.broadcast_to(
        np.asarray(1.0 if dispatch is None else dispatch.load_scale, dtype=float),
        (len(model.loads),))
    for ld, sc in zip(model.loads, scale):
        bus = idx[ld.bus]
        s_load = sc * complex(ld.p, ld.q) / model.base_mva
        load_y[bus] += np.conj(s_load) / abs(v[bus]) ** 2

    init = DynamicsInit(
        machine_states=tuple(
            MachineState(delta=float(delta0[j]), omega=0.0, e_mag=float(e_mag[j]))
            for j in range(len(conv))),
        conv_positions=tuple(conv), solar_positions=tuple(solar),
        e_mag=e_mag, delta0=delta0, p_mech=np.zeros(len(conv)),
        h=h, damping=damping, y_machine=y_mach, conv_bus_pos=conv_bus,
        load_y=load_y, solar_bus_pos=solar_bus, solar_current=solar_i, v0=v.copy())

    phase = build_network_phase(model, init)
    e0 = e_mag * np.exp(1j * delta0)
    v_check = phase.v_recover @ e0 + phase.v_const
    err = np.abs(v_check - v)
    worst = int(np.argmax(err))
    if err[worst] > 1e-6:
        raise SimulationError(
            f"t=0 network solution deviates from power flow by {err[worst]:.2e} pu "
            f"at bus {model.buses[worst].id}")

    p_e0 = (e0 * np.conj(phase.c @ e0 + phase.d)).real
    p_err = np.abs(p_e0 - pf.p_gen[conv])
    if p_err.size and p_err.max() > 1e-6:
        j = int(np.argmax(p_err))
        raise SimulationError(
            f"machine at bus {model.machines[conv[j]].bus}: initial electrical power "
            f"off by {p_err[j]:.2e} pu")
    init.p_mech[:] = p_e0
    return init


# ---------------------------------------------------------------------------
# Integration
# ---------------------------------------------------------------------------

def _phase_id(t: float, cont: Contingency | None) -> int:
    if cont is None or not cont.faulted_lines:
        return 0
    if t < cont.t_fault:
        return 0
    if t < cont.t_clear:
        return 1
    return 2


def _interval_plan(s: int, cfg: SimulatorConfig, cont: Contingency | None):
    """(step, phase) pairs tiling sample interval s, split at fault events."""
    t0 = s / cfg.sample_rate
    t1 = (s + 1) / cfg.sample_rate
    cuts = [t0 + k * cfg.dt_effective for k in range(cfg.substeps)] + [t1]
    if cont is not None and cont.faulted_lines:
        for ev in (cont.t_fault, cont.t_clear):
            if t0 < ev < t1 and all(abs(ev - c) > 1e-12 for c in cuts):
                cuts.append(ev)
        cuts.sort()
    return [(cuts[i + 1] - cuts[i], _phase_id(cuts[i], cont)) for i in range(len(cuts) - 1)]


def _rk4_step(delta, omega, hstep, c, d, e_mag, p_mech, h2, damping):
    """One batched RK4 step of the swing equations.

    2H dω/dt = Pm − Pe(δ) − Dω,  dδ/dt = ω ω_s, with ω in pu deviation.
    ``c``/``d`` may carry a leading batch axis or broadcast across it.
    """
    def deriv(dl, om):
        e = e_mag * np.exp(1j * dl)
        i_g = np.einsum("...ij,...j->...i", c, e) + d
        p_e = (e * np.conj(i_g)).real
        return om * W_SYNC, (p_mech - p_e - damping * om) / h2

    k1d, k1o = deriv(delta, omega)
    k2d, k2o = deriv(delta + 0.5 * hstep * k1d, omega + 0.5 * hstep * k1o)
    k3d, k3o = deriv(delta + 0.5 * hstep * k2d, omega + 0.5 * hstep * k2o)
    k4d, k4o = deriv(delta + hstep * k3d, omega + hstep * k3o)
    delta = delta + (hstep / 6.0) * (k1d + 2 * k2d + 2 * k3d + k4d)
    omega = omega + (hstep / 6.0) * (k1o + 2 * k2o + 2 * k3o + k4o)
    return delta, omega


def simulate_cases(model: NetworkModel, oc: OperatingCondition,
                   contingencies: list[Contingency | None],
                   cfg: SimulatorConfig | None = None,
                   init: DynamicsInit | None = None) -> list[SimulationTrace]:
    """Simulate one operating condition against a batch of contingencies.

    All contingencies must share inception and clearing times (the generator
    guarantees this); pass ``None`` entries for undisturbed runs, which are
    integrated over the whole horizon.  Each case runs three topologies:
    pre-fault, fault-on (faulted branches split at the fault fraction with a
    reactive shunt at the split node), post-fault (faulted branches out).
    """
    cfg = cfg or SimulatorConfig()
    if init is None:
        init = initialize_dynamics(model, oc.solved)
    m = init.e_mag.size
    n_bus = model.n_bus
    rate = cfg.sample_rate
    n_samples = round(cfg.t_end * rate) + 1
    bus_ids = tuple(b.id for b in model.buses)

    real = [c for c in contingencies if c is not None and c.faulted_lines]
    events = {(c.t_fault, c.t_clear) for c in real}
    if len(events) > 1:
        raise ValidationError("batched contingencies must share t_fault and t_clear")
    shared_cont = real[0] if real else None

    n_cases = len(contingencies)
    pre = build_network_phase(model, init)
    fc = np.empty((n_cases, m, m), dtype=complex)
    fd = np.empty((n_cases, m), dtype=complex)
    pc = np.empty_like(fc)
    pd_ = np.empty_like(fd)
    f_rec = np.empty((n_cases, n_bus, m), dtype=complex)
    f_const = np.empty((n_cases, n_bus), dtype=complex)
    p_rec = np.empty_like(f_rec)
    p_const = np.empty_like(f_const)
    for b, cont in enumerate(contingencies):
        if cont is None or not cont.faulted_lines:
            fp = pp = pre
        else:
            splits = tuple(
                BranchSplit(branch=line, fraction=cont.fault_fraction,
                            shunt_y=-1j * cfg.fault_admittance)
                for line in cont.faulted_lines)
            fp = build_network_phase(model, init, Overrides(splits=splits))
            pp = build_network_phase(
                model, init, Overrides(disable_branches=tuple(cont.faulted_lines)))
        fc[b], fd[b], f_rec[b], f_const[b] = fp.c, fp.d, fp.v_recover, fp.v_const
        pc[b], pd_[b], p_rec[b], p_const[b] = pp.c, pp.d, pp.v_recover, pp.v_const

    traces_angle = np.zeros((n_cases, m, n_samples))
    traces_speed = np.zeros((n_cases, m, n_samples))
    traces_vm = np.zeros((n_cases, n_bus, n_samples))
    traces_va = np.zeros((n_cases, n_bus, n_samples))
    last_sample = np.full(n_cases, n_samples - 1, dtype=int)
    terminated = np.zeros(n_cases, dtype=bool)

    # Pre-fault the classical model sits at its construction equilibrium, so
    # samples before inception carry the power-flow phasors.
    if shared_cont is not None:
        start_sample = min(n_samples - 1,
                           int(math.floor(shared_cont.t_fault * rate + 1e-9)))
    else:
        start_sample = 0
    traces_angle[:, :, : start_sample + 1] = np.degrees(init.delta0)[None, :, None]
    traces_vm[:, :, : start_sample + 1] = np.abs(init.v0)[None, :, None]
    traces_va[:, :, : start_sample + 1] = np.degrees(np.angle(init.v0))[None, :, None]

    delta = np.tile(init.delta0, (n_cases, 1))
    omega = np.zeros((n_cases, m))
    h2 = 2.0 * init.h
    alive = np.arange(n_cases)
    cutoff = cfg.divergence_cutoff

    for s in range(start_sample, n_samples - 1):
        if alive.size == 0:
            break
        for hstep, pid in _interval_plan(s, cfg, shared_cont):
            if pid == 0:
                c, d = pre.c[None, :, :], pre.d[None, :]
            elif pid == 1:
                c, d = fc, fd
            else:
                c, d = pc, pd_
            delta, omega = _rk4_step(delta, omega, hstep, c, d,
                                     init.e_mag, init.p_mech, h2, init.damping)
        sample = s + 1
        finite = np.isfinite(delta).all(axis=1) & np.isfinite(omega).all(axis=1)
        if not finite.all():
            for b in alive[~finite]:
                log.warning("case %d: non-finite state at t=%.3f s", b, sample / rate)

        rows = alive[finite]
        e = init.e_mag * np.exp(1j * delta[finite])
        pid = _phase_id(sample / rate, shared_cont)
        if pid == 0:
            vbus = e @ pre.v_recover.T + pre.v_const
        elif pid == 1:
            vbus = np.einsum("bij,bj->bi", f_rec[finite], e) + f_const[finite]
        else:
            vbus = np.einsum("bij,bj->bi", p_rec[finite], e) + p_const[finite]
        traces_angle[rows, :, sample] = np.degrees(delta[finite])
        traces_speed[rows, :, sample] = omega[finite]
        traces_vm[rows, :, sample] = np.abs(vbus)
        traces_va[rows, :, sample] = np.degrees(np.angle(vbus))

        if m > 1:
            spread = np.degrees(delta.max(axis=1) - delta.min(axis=1))
        else:
            spread = np.zeros(alive.size)
        done = (~finite) | (spread > cutoff)
        if done.any():
            ended = alive[done]
            terminated[ended] = True
            last_sample[ended] = np.where(finite[done], sample, sample - 1)
            keep = ~done
            alive = alive[keep]
            delta = delta[keep]
            omega = omega[keep]
            fc, fd, pc, pd_ = fc[keep], fd[keep], pc[keep], pd_[keep]
            f_rec, f_const = f_rec[keep], f_const[keep]
            p_rec, p_const = p_rec[keep], p_const[keep]

    traces = []
    for b in range(n_cases):
        n_keep = last_sample[b] + 1
        traces.append(SimulationTrace(
            times=np.arange(n_keep) / rate,
            rotor_angle=traces_angle[b, :, :n_keep],
            rotor_speed=traces_speed[b, :, :n_keep],
            v_mag=traces_vm[b, :, :n_keep],
            v_ang=traces_va[b, :, :n_keep],
            terminated_early=bool(terminated[b]),
            t_last=float((n_keep - 1) / rate),
            t_fault=float(contingencies[b].t_fault) if contingencies[b] is not None else 0.0,
            machine_positions=init.conv_positions,
            bus_ids=bus_ids))
    return traces


def simulate_case(model: NetworkModel, oc: OperatingCondition,
                  cont: Contingency | None, cfg: SimulatorConfig | None = None,
                  init: DynamicsInit | None = None) -> SimulationTrace:
    """Simulate a single (operating condition, contingency) case."""
    return simulate_cases(model, oc, [cont], cfg, init)[0]
