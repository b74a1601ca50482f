"""Channel-gated compute preemption with cooldown-delayed wake-up.

The controller owns one :class:`ChannelState` per GPU on the node; all of
them toggle together.  Online activity disables the offline channels, and
offline work is re-enabled only after the online side has stayed idle for
``T_cool = 2 * G`` where ``G`` is the largest decode gap.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

from .core import EventKind, SimEvent

if TYPE_CHECKING:
    from .sim import NodeSim


class ChannelStatus(str, enum.Enum):
    ENABLED = "enabled"
    DISABLED = "disabled"
    DISABLING = "disabling"
    ENABLING = "enabling"


@dataclass
class SavedContext:
    remaining_us: int


@dataclass
class ChannelState:
    status: ChannelStatus = ChannelStatus.ENABLED
    toggle_latency_us: int = 1000
    saved_context: Optional[SavedContext] = None


@dataclass
class CooldownPolicy:
    G: int
    T_cool: int
    idle_since: Optional[int] = None


def set_cooldown(G: int) -> CooldownPolicy:
    if G < 0:
        raise ValueError("max decode gap must be non-negative")
    return CooldownPolicy(G=G, T_cool=2 * G)


def node_toggle_latency(n_gpus: int, per_node_us: int = 1000, per_gpu_us: int = 700,
                        lock_bypass: bool = True) -> int:
    """Node-wide disable latency.

    With the lock bypass every GPU's command is offloaded in parallel and the
    node pays ``per_node_us`` once.  Without it the driver serializes the
    ioctls under one write lock, so latency grows with the GPU count.
    """
    if n_gpus < 1:
        raise ValueError("node needs at least one GPU")
    if lock_bypass:
        return per_node_us
    return per_gpu_us * n_gpus


class PreemptiveCompute:
    """Compute gate for offline work.

    Subclasses change two things only: how long a disable takes when an
    offline kernel is in flight (:meth:`drain_latency`) and the wake-up
    cooldown.  ``holds`` keeps the gate closed while a memory reclamation is
    in progress regardless of online state.
    """

    name = "channel"

    def __init__(self, node: "NodeSim", toggle_latency_us: int, cooldown: CooldownPolicy,
                 enable_latency_us: int = 0):
        self.node = node
        self.sim = node.sim
        self.toggle_latency_us = toggle_latency_us
        self.enable_latency_us = enable_latency_us
        self.cooldown = cooldown
        self.channels = [ChannelState(toggle_latency_us=toggle_latency_us) for _ in node.gpus]
        self.status = ChannelStatus.ENABLED
        self.online_busy = False
        self.holds = 0
        self.wake_pending = False
        self.disable_times: list[int] = []
        self._ready_at = 0
        self._toggle_ev: Optional[SimEvent] = None
        self._cooldown_ev: Optional[SimEvent] = None
        self.sim.on(EventKind.CHANNEL_TOGGLE_COMPLETE, self._on_toggle)
        self.sim.on(EventKind.COOLDOWN_EXPIRY, self._on_cooldown)

    # policy knobs
    def drain_latency(self, t: int) -> int:
        return self.toggle_latency_us

    def offline_may_run(self) -> bool:
        return self.status is ChannelStatus.ENABLED

    def _set_status(self, status: ChannelStatus) -> None:
        self.status = status
        for ch in self.channels:
            ch.status = status

    def on_online_busy(self, t: int) -> int:
        """Online became active; returns when online kernels may start."""
        self.online_busy = True
        self.wake_pending = False
        self.cooldown.idle_since = None
        self.sim.cancel(self._cooldown_ev)
        self._cooldown_ev = None
        return self._disable(t, cause="online")

    def on_online_idle(self, t: int) -> None:
        self.online_busy = False
        self.cooldown.idle_since = t
        if self.cooldown.T_cool == 0:
            self._try_wake(t)
        else:
            self.sim.cancel(self._cooldown_ev)
            self._cooldown_ev = self.sim.at(t + self.cooldown.T_cool, EventKind.COOLDOWN_EXPIRY)

    def request_disable(self, t: int) -> int:
        """Close the gate for a memory reclamation; pair with :meth:`release`."""
        self.holds += 1
        return self._disable(t, cause="reclaim")

    def release(self, t: int) -> None:
        self.holds -= 1
        assert self.holds >= 0
        if self.holds == 0 and self.wake_pending and not self.online_busy:
            self._try_wake(t)

    def _disable(self, t: int, cause: str) -> int:
        st = self.status
        if st is ChannelStatus.ENABLED:
            running = self.node.offline_kernel_running()
            self.sim.record("disable", cause=cause, inflight=running)
            self.disable_times.append(t)
            if running:
                self._set_status(ChannelStatus.DISABLING)
                self._ready_at = t + self.drain_latency(t)
                self._toggle_ev = self.sim.at(self._ready_at, EventKind.CHANNEL_TOGGLE_COMPLETE,
                                              "disable")
                return self._ready_at
            self._set_status(ChannelStatus.DISABLED)
            self._ready_at = t
            return t
        if st is ChannelStatus.ENABLING:
            self.sim.cancel(self._toggle_ev)
            self.sim.record("disable", cause=cause, inflight=False)
            self.disable_times.append(t)
            self._set_status(ChannelStatus.DISABLED)
            self._ready_at = t
            return t
        if st is ChannelStatus.DISABLING:
            return self._ready_at
        return t

    def _try_wake(self, t: int) -> None:
        if self.holds > 0 or self.status is ChannelStatus.DISABLING:
            self.wake_pending = True
            return
        self.wake_pending = False
        if self.status is not ChannelStatus.DISABLED:
            return
        if self.enable_latency_us > 0:
            self._set_status(ChannelStatus.ENABLING)
            self._toggle_ev = self.sim.at(t + self.enable_latency_us,
                                          EventKind.CHANNEL_TOGGLE_COMPLETE, "enable")
        else:
            self._enable(t)

    def _enable(self, t: int) -> None:
        self._set_status(ChannelStatus.ENABLED)
        self.sim.record("enable")
        for ch in self.channels:
            ch.saved_context = None
        self.node.kick_offline(t)

    def _on_toggle(self, ev: SimEvent) -> None:
        t = ev.time
        if ev.payload == "disable":
            self._set_status(ChannelStatus.DISABLED)
            remaining = self.node.pause_offline(t)
            if remaining is not None:
                for ch in self.channels:
                    ch.saved_context = SavedContext(remaining)
            if self.wake_pending and not self.online_busy:
                self._try_wake(t)
        else:
            self._enable(t)

    def _on_cooldown(self, ev: SimEvent) -> None:
        # cancelled expiries never reach here
        self._cooldown_ev = None
        if not self.online_busy:
            self._try_wake(ev.time)


class ChannelCompute(PreemptiveCompute):
    """Context-saving channel disable: fixed toggle latency, cooldown wake-up."""

    name = "channel"
