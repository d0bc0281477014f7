"""Intelligent Driver Model: acceleration law and one-step Euler integration.

Sign convention used throughout the package: dv = v_follower - v_leader,
so positive dv means the follower is closing in.  Data ingestion must match
this convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError

#: Acceleration exponent; fixed model constant, never sampled.
ACCEL_EXPONENT = 4.0

#: Lower bound imposed on simulated gaps; clamp events are reported.
GAP_FLOOR = 0.1


@dataclass(frozen=True)
class IdmParams:
    """The five calibrated car-following parameters plus the fixed exponent.

    v_f: desired speed (m/s); s0: jam spacing (m); T: desired time headway
    (s); a_max: maximum acceleration (m/s^2); b: comfortable deceleration
    (m/s^2).
    """

    v_f: float
    s0: float
    T: float
    a_max: float
    b: float
    delta: float = ACCEL_EXPONENT

    def __post_init__(self):
        fields = (self.v_f, self.s0, self.T, self.a_max, self.b)
        if not all(np.isfinite(fields)) or any(f <= 0.0 for f in fields):
            raise InvalidArgumentError(
                f"IDM parameters must all be finite and > 0, got {fields}"
            )

    def as_array(self) -> np.ndarray:
        return np.array([self.v_f, self.s0, self.T, self.a_max, self.b])

    @staticmethod
    def from_array(values) -> "IdmParams":
        v_f, s0, T, a_max, b = (float(v) for v in np.asarray(values, dtype=float))
        return IdmParams(v_f=v_f, s0=s0, T=T, a_max=a_max, b=b)


#: Component names in the order of :meth:`IdmParams.as_array`.
PARAM_NAMES = ("v_f", "s0", "T", "a_max", "b")


@dataclass(frozen=True)
class StateVector:
    """Instantaneous car-following state: speed, relative speed, gap."""

    v: float
    dv: float
    s: float

    def __post_init__(self):
        if not (np.isfinite(self.v) and np.isfinite(self.dv) and np.isfinite(self.s)):
            raise InvalidArgumentError("state components must be finite")
        if self.v < 0.0:
            raise InvalidArgumentError(f"speed must be >= 0, got {self.v}")
        if self.s <= 0.0:
            raise InvalidArgumentError(f"gap must be > 0, got {self.s}")


def idm_acceleration(v, dv, s, params: IdmParams):
    """Acceleration of the follower; accepts scalars or broadcastable arrays.

    The desired gap s* may be negative for strongly negative dv; its square
    is used as-is (no clipping), which matters for the likelihood surface.
    """
    v = np.asarray(v, dtype=float)
    dv = np.asarray(dv, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(s <= 0.0):
        raise InvalidArgumentError("gap s must be > 0")
    s_star = desired_gap(v, dv, params)
    accel = params.a_max * (1.0 - (v / params.v_f) ** params.delta - (s_star / s) ** 2)
    return accel if accel.ndim else float(accel)


def desired_gap(v, dv, params: IdmParams):
    """Dynamic desired gap s*(v, dv)."""
    v = np.asarray(v, dtype=float)
    dv = np.asarray(dv, dtype=float)
    out = params.s0 + v * params.T + v * dv / (2.0 * np.sqrt(params.a_max * params.b))
    return out if out.ndim else float(out)


def equilibrium_gap(v, params: IdmParams):
    """Spacing at which acceleration is exactly zero for dv = 0, v < v_f."""
    v = np.asarray(v, dtype=float)
    if np.any(v < 0.0) or np.any(v >= params.v_f):
        raise InvalidArgumentError("equilibrium gap requires 0 <= v < v_f")
    out = desired_gap(v, 0.0, params) / np.sqrt(1.0 - (v / params.v_f) ** params.delta)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class StepResult:
    state: StateVector
    accel: float
    gap_clamped: bool


def simulate_step(
    state: StateVector,
    leader_speed_next: float,
    params: IdmParams,
    noise_std: float,
    dt: float,
    rng: np.random.Generator,
) -> StepResult:
    """Advance one explicit-Euler step at the data rate.

    The realized acceleration is the IDM mean plus N(0, noise_std^2); the
    follower speed is floored at 0 and the gap at ``GAP_FLOOR`` (flagged).
    """
    if dt <= 0.0:
        raise InvalidArgumentError("dt must be > 0")
    if noise_std < 0.0:
        raise InvalidArgumentError("noise_std must be >= 0")
    accel = idm_acceleration(state.v, state.dv, state.s, params)
    if noise_std > 0.0:
        accel += noise_std * rng.standard_normal()
    leader_speed = state.v - state.dv
    v_next = max(0.0, state.v + accel * dt)
    s_next = state.s + (leader_speed - state.v) * dt
    clamped = s_next < GAP_FLOOR
    if clamped:
        s_next = GAP_FLOOR
    next_state = StateVector(v=v_next, dv=v_next - leader_speed_next, s=s_next)
    return StepResult(state=next_state, accel=float(accel), gap_clamped=clamped)
