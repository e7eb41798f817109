"""Opt-in instrumentation: records which action sources feed losses.

Used by tests to check the offline contract (log-probabilities and
Q-regression targets only ever see dataset actions, policy-mean bootstraps,
or the entropy term's own fresh sample).
"""

from __future__ import annotations

from contextlib import contextmanager

_EVENTS: list | None = None


@contextmanager
def action_audit():
    """Collect (event, action_source) pairs emitted inside the block."""
    global _EVENTS
    prev = _EVENTS
    _EVENTS = []
    try:
        yield _EVENTS
    finally:
        _EVENTS = prev


def record(event: str, source: str):
    if _EVENTS is not None:
        _EVENTS.append((event, source))
