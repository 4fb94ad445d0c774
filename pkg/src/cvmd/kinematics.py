"""Non-holonomic vehicle motion model.

A second-order kinematic update driven by yaw rate and longitudinal
acceleration. The module provides the forward direction (motion parameters ->
trajectory), the inverse direction (trajectory -> motion parameters via finite
differences), and projection of parameters onto physical limits. Together these
give the drivability guarantee: any clamped parameter sequence rolls out to a
trajectory whose re-extracted parameters respect the same limits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError

# Published limits for passenger vehicles: 71.26 deg/s yaw rate, 9 m/s^2
# longitudinal acceleration.
YAW_RATE_MAX_DEFAULT = math.radians(71.26)
ACCEL_MAX_DEFAULT = 9.0


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    v: float
    psi: float


@dataclass(frozen=True)
class MotionParamSeq:
    """Per-step yaw rate (rad/s) and longitudinal acceleration (m/s^2)."""

    yaw_rate: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "yaw_rate", np.asarray(self.yaw_rate, dtype=float))
        object.__setattr__(self, "accel", np.asarray(self.accel, dtype=float))
        if self.yaw_rate.shape != self.accel.shape or self.yaw_rate.ndim != 1:
            raise InputError(
                f"yaw_rate/accel must be equal-length 1-d arrays, got "
                f"{self.yaw_rate.shape} and {self.accel.shape}"
            )

    def __len__(self):
        return len(self.yaw_rate)

    def as_array(self) -> np.ndarray:
        """Stack as [2 x T]: row 0 yaw rate, row 1 acceleration."""
        return np.stack([self.yaw_rate, self.accel])

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "MotionParamSeq":
        arr = np.asarray(arr, dtype=float)
        if arr.ndim != 2 or arr.shape[0] != 2:
            raise InputError(f"expected [2 x T] array, got shape {arr.shape}")
        return cls(yaw_rate=arr[0], accel=arr[1])


@dataclass(frozen=True)
class PhysicalLimits:
    yaw_rate_max: float = YAW_RATE_MAX_DEFAULT
    accel_max: float = ACCEL_MAX_DEFAULT

    def __post_init__(self):
        if self.yaw_rate_max <= 0 or self.accel_max <= 0:
            raise InputError("physical limits must be strictly positive")


def wrap_angle(psi: float) -> float:
    """Wrap into (-pi, pi]."""
    wrapped = math.remainder(psi, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


def integrate_step(s: VehicleState, yaw_rate: float, accel: float, tau: float) -> VehicleState:
    """One second-order update over a time increment tau > 0."""
    if tau <= 0:
        raise InputError(f"tau must be positive, got {tau}")
    c = math.cos(s.psi)
    si = math.sin(s.psi)
    half_tau2 = tau * tau / 2.0
    x = s.x + s.v * c * tau + (accel * c - yaw_rate * s.v * si) * half_tau2
    y = s.y + s.v * si * tau + (accel * si + yaw_rate * s.v * c) * half_tau2
    v = max(s.v + accel * tau, 0.0)
    psi = wrap_angle(s.psi + yaw_rate * tau)
    return VehicleState(x=x, y=y, v=v, psi=psi)


def rollout(s0: VehicleState, params: MotionParamSeq, tau: float) -> np.ndarray:
    """Integrate a parameter sequence into positions [2 x T].

    The output is in the frame of s0; the first column is the position one
    step after s0.
    """
    if not (np.all(np.isfinite(params.yaw_rate)) and np.all(np.isfinite(params.accel))):
        bad = np.flatnonzero(
            ~(np.isfinite(params.yaw_rate) & np.isfinite(params.accel))
        )[0]
        raise InputError(f"non-finite motion parameter at index {bad}")
    state = s0
    out = np.empty((2, len(params)))
    for k in range(len(params)):
        state = integrate_step(state, params.yaw_rate[k], params.accel[k], tau)
        out[0, k] = state.x
        out[1, k] = state.y
    return out


def extract_params(traj: np.ndarray, s_obs: VehicleState, tau: float) -> MotionParamSeq:
    """Recover motion parameters from a position trajectory [2 x T].

    The trajectory is anchored at s_obs: its first column is one step after the
    observed state. Speeds come from chord lengths, headings from chord angles
    (unwrapped), and both are differenced once more; the last value is edge
    replicated so the result keeps length T.
    """
    traj = np.asarray(traj, dtype=float)
    if traj.ndim != 2 or traj.shape[0] != 2:
        raise InputError(f"expected trajectory [2 x T], got shape {traj.shape}")
    if traj.shape[1] < 3:
        raise InputError("trajectory needs at least 3 points")
    if tau <= 0:
        raise InputError(f"tau must be positive, got {tau}")

    pts = np.concatenate([np.array([[s_obs.x], [s_obs.y]]), traj], axis=1)
    delta = np.diff(pts, axis=1)
    speed = np.hypot(delta[0], delta[1]) / tau
    # Degenerate (zero-motion) chords carry no heading: hold the previous one,
    # which keeps the yaw rate at 0 across the stop.
    moving = speed * tau > 1e-12
    heading = np.arctan2(delta[1], delta[0])
    if not moving.all():
        prev = s_obs.psi
        for k in range(len(heading)):
            if moving[k]:
                prev = heading[k]
            else:
                heading[k] = prev
    heading = np.unwrap(heading)

    accel = np.diff(speed) / tau
    yaw_rate = np.diff(heading) / tau
    accel = np.concatenate([accel, accel[-1:]])
    yaw_rate = np.concatenate([yaw_rate, yaw_rate[-1:]])
    return MotionParamSeq(yaw_rate=yaw_rate, accel=accel)


def clamp_params(params: MotionParamSeq, lim: PhysicalLimits) -> MotionParamSeq:
    """Elementwise projection into the physical limits; idempotent."""
    return MotionParamSeq(
        yaw_rate=np.clip(params.yaw_rate, -lim.yaw_rate_max, lim.yaw_rate_max),
        accel=np.clip(params.accel, -lim.accel_max, lim.accel_max),
    )


def initial_state_from_observation(sample) -> VehicleState:
    """Anchor state of the target at the last observed step.

    Accepts any object with `observation` [N x F x T_o] and `target_index`;
    feature order is (x, y, v_x, v_y).
    """
    obs = np.asarray(sample.observation, dtype=float)
    if obs.shape[2] < 2:
        raise InputError("observation needs at least 2 steps")
    target = obs[sample.target_index]
    x, y = target[0, -1], target[1, -1]
    vx, vy = target[2, -1], target[3, -1]
    v = math.hypot(vx, vy)
    if v > 1e-9:
        psi = math.atan2(vy, vx)
    else:
        dx = target[0, -1] - target[0, -2]
        dy = target[1, -1] - target[1, -2]
        psi = math.atan2(dy, dx) if math.hypot(dx, dy) > 1e-9 else 0.0
    return VehicleState(x=x, y=y, v=v, psi=psi)


def state_from_first_chord(origin_xy, traj: np.ndarray, tau: float) -> VehicleState:
    """Initial state consistent with finite-difference extraction.

    Speed and heading come from the chord between origin_xy and the first
    trajectory point, which is the convention extract_params itself uses. A
    chord measures the speed at the midpoint of its step, not its start, so
    the speed is backed up by half a step using the first chord-to-chord
    difference; with that correction the second-order integrator reproduces
    the chord lengths exactly under piecewise-constant acceleration. The
    heading is left at the first chord angle: a half-step yaw correction
    would persist as a permanent cross-track bias once the yaw rate decays,
    which costs far more than the transient it removes. This is the right
    anchor for round-trip reconstruction of a bare trajectory.
    """
    traj = np.asarray(traj, dtype=float)
    dx0 = traj[0, 0] - origin_xy[0]
    dy0 = traj[1, 0] - origin_xy[1]
    v0 = math.hypot(dx0, dy0) / tau
    if traj.shape[1] >= 2:
        dx1 = traj[0, 1] - traj[0, 0]
        dy1 = traj[1, 1] - traj[1, 0]
        v1 = math.hypot(dx1, dy1) / tau
        v0 = max(v0 - (v1 - v0) / 2.0, 0.0)
    return VehicleState(
        x=float(origin_xy[0]),
        y=float(origin_xy[1]),
        v=v0,
        psi=math.atan2(dy0, dx0),
    )
