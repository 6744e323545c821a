"""Session lifecycle and the command gate that enforces it.

States: IDLE -> ACTIVE <-> PAUSED, with every resume passing through
INTERPOLATING, and STOPPED as the terminal state.  The gate is what makes
pausing safe: while PAUSED the robot receives a frozen zero-velocity hold
of the last live command, and on resume the outgoing command blends
linearly from that hold to the live stream so no single tick can jump.
"""

from __future__ import annotations

from dataclasses import replace
from enum import IntEnum

from ..command import CommandVector
from .protocol import CtrlEvent

DEFAULT_BLEND_S = 1.0

MARK_EVENTS = (CtrlEvent.MARK_EPISODE_START, CtrlEvent.MARK_EPISODE_END,
               CtrlEvent.MARK_FAILURE)


class SessionState(IntEnum):
    IDLE = 0
    ACTIVE = 1
    PAUSED = 2
    INTERPOLATING = 3
    STOPPED = 4


class IllegalTransition(Exception):
    def __init__(self, state: SessionState, event: CtrlEvent):
        super().__init__(f"event {event.name} is not legal in state {state.name}")
        self.state = state
        self.event = event


_TRANSITIONS: dict[tuple[SessionState, CtrlEvent], SessionState] = {
    (SessionState.IDLE, CtrlEvent.START): SessionState.ACTIVE,
    (SessionState.ACTIVE, CtrlEvent.PAUSE): SessionState.PAUSED,
    (SessionState.INTERPOLATING, CtrlEvent.PAUSE): SessionState.PAUSED,
    (SessionState.PAUSED, CtrlEvent.RESUME): SessionState.INTERPOLATING,
}
for _s in SessionState:
    if _s is not SessionState.STOPPED:
        _TRANSITIONS[(_s, CtrlEvent.STOP)] = SessionState.STOPPED
        _TRANSITIONS[(_s, CtrlEvent.ESTOP)] = SessionState.STOPPED

_MARK_STATES = {SessionState.ACTIVE, SessionState.PAUSED,
                SessionState.INTERPOLATING}


def _hold_of(cmd: CommandVector) -> CommandVector:
    """The command that keeps the robot exactly where the stream left it."""
    return replace(cmd, vx=0.0, vy=0.0, yaw_rate=0.0,
                   q_ref=cmd.q_ref.copy(), neck=cmd.neck.copy(),
                   hand_left=cmd.hand_left.copy(),
                   hand_right=cmd.hand_right.copy())


def _blend(a: CommandVector, b: CommandVector, u: float) -> CommandVector:
    w = 1.0 - u
    return CommandVector(
        vx=w * a.vx + u * b.vx, vy=w * a.vy + u * b.vy,
        z=w * a.z + u * b.z, roll=w * a.roll + u * b.roll,
        pitch=w * a.pitch + u * b.pitch,
        yaw_rate=w * a.yaw_rate + u * b.yaw_rate,
        q_ref=w * a.q_ref + u * b.q_ref, neck=w * a.neck + u * b.neck,
        hand_left=w * a.hand_left + u * b.hand_left,
        hand_right=w * a.hand_right + u * b.hand_right,
        timestamp=b.timestamp)


class SessionMachine:
    """Explicit-time session machine; feed it events and live commands."""

    def __init__(self, blend_duration: float = DEFAULT_BLEND_S):
        if blend_duration <= 0.0:
            raise ValueError("blend duration must be positive")
        self.blend_duration = blend_duration
        self.state = SessionState.IDLE
        self.estopped = False
        self._hold: CommandVector | None = None   # always zero-velocity
        self._blend_from: CommandVector | None = None
        self._blend_started: float | None = None
        self._estop_pending = False

    def can(self, event: CtrlEvent) -> bool:
        if event in MARK_EVENTS:
            return self.state in _MARK_STATES
        return (self.state, event) in _TRANSITIONS

    def legal_events(self) -> list[CtrlEvent]:
        return [e for e in CtrlEvent if self.can(e)]

    def apply(self, event: CtrlEvent, now: float = 0.0) -> SessionState:
        """Apply a control event at monotonic time ``now``.

        Mark events do not change state (the recorder consumes them); they
        are legal only while a session is live.
        """
        if event in MARK_EVENTS:
            if self.state not in _MARK_STATES:
                raise IllegalTransition(self.state, event)
            return self.state
        key = (self.state, event)
        if key not in _TRANSITIONS:
            raise IllegalTransition(self.state, event)
        prev = self.state
        self.state = _TRANSITIONS[key]
        if event is CtrlEvent.ESTOP:
            self.estopped = True
            self._estop_pending = self._hold is not None
        elif event is CtrlEvent.RESUME:
            self._blend_started = now
            self._blend_from = self._hold
        elif event is CtrlEvent.PAUSE and prev is SessionState.INTERPOLATING:
            # Freeze where the blend got to; _hold tracked each emitted tick.
            self._blend_started = None
            self._blend_from = None
        return self.state

    def gate(self, live: CommandVector | None, now: float) -> CommandVector | None:
        """Turn the live command stream into what the robot may see.

        Returns None when nothing should be sent (idle, stopped after the
        final hold, or no live command yet).
        """
        if self.state is SessionState.IDLE:
            return None
        if self.state is SessionState.STOPPED:
            if self._estop_pending and self._hold is not None:
                self._estop_pending = False
                return _hold_of(self._hold)
            return None
        if self.state is SessionState.ACTIVE:
            if live is not None:
                self._hold = _hold_of(live)
                return live
            return None
        if self.state is SessionState.PAUSED:
            return self._hold
        # INTERPOLATING
        if self._blend_from is None:
            if live is not None:
                self.state = SessionState.ACTIVE
                self._hold = _hold_of(live)
            return live
        if live is None:
            return self._hold
        u = 1.0 if self._blend_started is None else (
            (now - self._blend_started) / self.blend_duration)
        if u >= 1.0:
            self.state = SessionState.ACTIVE
            self._blend_started = None
            self._blend_from = None
            self._hold = _hold_of(live)
            return live
        # The blend origin stays fixed so each tick moves by exactly
        # delta_u * (live - origin); a pause mid-blend freezes at _hold,
        # which tracks the last emitted tick.
        out = _blend(self._blend_from, live, max(0.0, float(u)))
        self._hold = _hold_of(out)
        return out
