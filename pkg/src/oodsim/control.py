"""Motor control: PID steering shaping, differential wheel velocities, e-stop latch.

The latch is one-way and thread-safe: the detector path may engage it from a
different task than the control loop, and once engaged every wheel command is
forced to zero until an explicit reset.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, replace


class ControlError(Exception):
    pass


@dataclass(frozen=True)
class PidGains:
    kp: float = 0.05
    ki: float = 0.0
    kd: float = 0.01
    u_max: float = 1.0  # symmetric output clamp
    i_max: float = 10.0  # symmetric integral clamp

    def __post_init__(self):
        if self.u_max <= 0 or self.i_max <= 0:
            raise ControlError("clamps must be positive")


@dataclass(frozen=True)
class PidState:
    gains: PidGains
    integral: float = 0.0
    prev_error: float = 0.0
    primed: bool = False  # first step has no derivative history


def pid_step(state: PidState, error: float, dt: float) -> tuple[float, PidState]:
    """One PID update. The integral clamps before the output does."""
    if dt <= 0:
        raise ControlError(f"dt must be positive, got {dt}")
    if not math.isfinite(error):
        raise ControlError(f"non-finite error {error}")
    g = state.gains
    integral = state.integral + error * dt
    integral = max(-g.i_max, min(g.i_max, integral))
    prev = state.prev_error if state.primed else error
    u = g.kp * error + g.ki * integral + g.kd * (error - prev) / dt
    u = max(-g.u_max, min(g.u_max, u))
    return u, replace(state, integral=integral, prev_error=error, primed=True)


@dataclass(frozen=True)
class WheelCommand:
    left: float  # m/s
    right: float  # m/s
    t_ns: int

    @property
    def forward_speed(self) -> float:
        return 0.5 * (self.left + self.right)


def wheel_velocities(
    v_nominal: float,
    steer: float,
    gain: float,
    t_ns: int,
    v_max: float = 1.0,
    latch: "EStopLatch | None" = None,
) -> WheelCommand:
    """Differential drive: positive steer speeds the left wheel (turn right).

    Velocities clamp to [0, v_max]; a latched e-stop forces both to zero.
    """
    if v_nominal < 0:
        raise ControlError(f"v_nominal must be >= 0, got {v_nominal}")
    if latch is not None and latch.latched:
        return WheelCommand(0.0, 0.0, t_ns)
    left = max(0.0, min(v_max, v_nominal + gain * steer))
    right = max(0.0, min(v_max, v_nominal - gain * steer))
    return WheelCommand(left, right, t_ns)


class EStopLatch:
    """One-way emergency-stop flag; first engagement wins, reset is explicit."""

    def __init__(self):
        self._lock = threading.Lock()
        self._latched = False
        self._t_ns: int | None = None

    @property
    def latched(self) -> bool:
        with self._lock:
            return self._latched

    @property
    def latch_t_ns(self) -> int | None:
        with self._lock:
            return self._t_ns

    def engage(self, t_ns: int) -> bool:
        """Latch; returns True only on the first engagement."""
        with self._lock:
            if self._latched:
                return False
            self._latched = True
            self._t_ns = t_ns
            return True

    def reset(self) -> None:
        with self._lock:
            self._latched = False
            self._t_ns = None
