"""Transient stability index, short-term voltage criterion, and case labeling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import SimulationTrace
from .network import ValidationError

TSI_THRESHOLD_DEFAULT = 10.0      # percent
VOLTAGE_BAND = (0.8, 1.1)         # pu
VOLTAGE_DURATION_S = 0.5          # excursions longer than this are violations


@dataclass(frozen=True)
class VoltageViolation:
    bus: int            # bus id
    start: float        # s
    duration: float     # s
    extreme: float      # most extreme pu value in the run


@dataclass(frozen=True)
class SecurityLabel:
    secure: bool
    tsi_percent: float
    delta_max: float
    voltage_violations: tuple[VoltageViolation, ...]

    @property
    def as_int(self) -> int:
        return 1 if self.secure else 0


def compute_tsi(trace: SimulationTrace) -> tuple[float, float]:
    """Maximum pairwise rotor separation over the trace and the resulting
    stability index (360 - d) / (360 + d) * 100, in percent."""
    if trace.n_samples == 0 or trace.rotor_angle.shape[0] == 0:
        raise ValidationError("trace carries no rotor-angle samples")
    if trace.rotor_angle.shape[0] == 1:
        delta_max = 0.0
    else:
        spread = trace.rotor_angle.max(axis=0) - trace.rotor_angle.min(axis=0)
        delta_max = float(spread.max())
    tsi = (360.0 - delta_max) / (360.0 + delta_max) * 100.0
    return tsi, delta_max


def check_voltage_security(trace: SimulationTrace,
                           band: tuple[float, float] = VOLTAGE_BAND,
                           min_duration: float = VOLTAGE_DURATION_S,
                           ) -> list[VoltageViolation]:
    """Maximal contiguous out-of-band runs per bus lasting longer than the
    duration threshold, evaluated from fault inception onward.

    Run duration is (run_length - 1) / sample_rate; a trace that terminates
    early while out of band closes its run at the last sample.
    """
    lo, hi = band
    violations: list[VoltageViolation] = []
    if trace.n_samples == 0:
        return violations
    rate = 1.0 / (trace.times[1] - trace.times[0]) if trace.n_samples > 1 else 30.0
    first = int(np.searchsorted(trace.times, trace.t_fault - 1e-9))
    vm = trace.v_mag[:, first:]
    times = trace.times[first:]
    if vm.shape[1] == 0:
        return violations
    out = (vm < lo) | (vm > hi)
    for row, bus_id in enumerate(trace.bus_ids):
        flags = out[row]
        if not flags.any():
            continue
        edges = np.flatnonzero(np.diff(np.concatenate(([False], flags, [False])).astype(int)))
        for start, stop in zip(edges[::2], edges[1::2]):   # [start, stop) runs
            duration = (stop - 1 - start) / rate
            if duration > min_duration:
                seg = vm[row, start:stop]
                extreme = float(seg.min()) if seg.min() < lo else float(seg.max())
                violations.append(VoltageViolation(
                    bus=bus_id, start=float(times[start]),
                    duration=float(duration), extreme=extreme))
    return violations


def label_case(trace: SimulationTrace,
               tsi_threshold: float = TSI_THRESHOLD_DEFAULT) -> SecurityLabel:
    """Binary security label: secure iff the stability index clears the
    threshold and no short-term voltage violation occurred."""
    tsi, delta_max = compute_tsi(trace)
    violations = tuple(check_voltage_security(trace))
    secure = tsi >= tsi_threshold and not violations
    return SecurityLabel(secure=secure, tsi_percent=tsi, delta_max=delta_max,
                         voltage_violations=violations)
