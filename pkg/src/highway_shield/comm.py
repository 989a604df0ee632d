"""Simulated V2V message bus with fixed delay, dropout and observation noise."""
from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass, replace
from typing import IO, Deque, Dict, Iterable, List, Mapping, Optional

import numpy as np


class OutOfOrderError(ValueError):
    """A sender pushed a tick that is not newer than its last one."""


@dataclass(frozen=True)
class SharedState:
    """What a vehicle broadcasts: pose, speed and its current intent."""

    x: float
    y: float
    psi: float
    v: float
    lane: int = 0
    target_lane: int = 0
    target_speed: float = 0.0
    action: int = 0

    NOISY_FIELDS = ("x", "y", "psi", "v")


@dataclass(frozen=True)
class TimestampedMessage:
    sender: int
    tick: int
    payload: SharedState


class DelayBuffer:
    """Per-sender rings of timestamped messages."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._rings: Dict[int, Deque[TimestampedMessage]] = {}

    def push(self, msg: TimestampedMessage) -> None:
        ring = self._rings.setdefault(msg.sender, deque(maxlen=self.capacity))
        if ring and msg.tick <= ring[-1].tick:
            raise OutOfOrderError(
                f"sender {msg.sender}: tick {msg.tick} after {ring[-1].tick}"
            )
        ring.append(msg)

    def size(self, sender: int) -> int:
        return len(self._rings.get(sender, ()))

    def ticks(self, sender: int) -> List[int]:
        return [m.tick for m in self._rings.get(sender, ())]

    def senders(self) -> List[int]:
        return sorted(self._rings)

    def retrieve_delayed(self, sender: int, now: int, t_delay: int) -> Optional[TimestampedMessage]:
        """Newest message with ``tick <= now - t_delay``.

        Falls back to the oldest held message before the buffer is warm and
        returns ``None`` if nothing was ever received from ``sender``.
        """
        ring = self._rings.get(sender)
        if not ring:
            return None
        cutoff = now - t_delay
        for msg in reversed(ring):
            if msg.tick <= cutoff:
                return msg
        return ring[0]


def push(buffer: DelayBuffer, msg: TimestampedMessage) -> DelayBuffer:
    buffer.push(msg)
    return buffer


def retrieve_delayed(buffer: DelayBuffer, sender: int, now: int, t_delay: int) -> Optional[TimestampedMessage]:
    return buffer.retrieve_delayed(sender, now, t_delay)


@dataclass(frozen=True)
class ChannelConfig:
    """Link model shared by all senders.

    Args:
        t_delay: Fixed delay in ticks applied to every neighbour link.
        dropout_p: Probability that a sender's broadcast is lost this tick.
        obs_noise_sigma: Std of Gaussian noise added to the pose/speed fields
            of every retrieved message.
        seed: Seed for drops and noise.
        delay_ego_state: Also read the ego's own state through the delay.
    """

    t_delay: int = 1
    dropout_p: float = 0.0
    obs_noise_sigma: float = 0.0
    seed: int = 0
    delay_ego_state: bool = False

    def __post_init__(self) -> None:
        if self.t_delay < 0:
            raise ValueError("t_delay must be >= 0")
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ValueError("dropout_p must be in [0, 1]")
        if self.obs_noise_sigma < 0:
            raise ValueError("obs_noise_sigma must be >= 0")


class Channel:
    """One receive buffer per agent plus the shared link RNG.

    ``broadcast_round`` pushes every surviving broadcast before any receiver
    reads, so a round is a synchronisation point within a tick.
    """

    def __init__(self, agent_ids: Iterable[int], cfg: ChannelConfig, trace: bool = False):
        self.cfg = cfg
        self.agent_ids = sorted(agent_ids)
        self.rng = np.random.default_rng(cfg.seed)
        capacity = cfg.t_delay + 2
        self.buffers: Dict[int, DelayBuffer] = {i: DelayBuffer(capacity) for i in self.agent_ids}
        self.records: Optional[List[dict]] = [] if trace else None

    def prime(self, now: int, outgoing: Mapping[int, SharedState]) -> None:
        """Lossless initial exchange at reset, so every buffer starts warm-able."""
        for sender in sorted(outgoing):
            msg = TimestampedMessage(sender, now, outgoing[sender])
            for buffer in self.buffers.values():
                buffer.push(msg)

    def broadcast_round(
        self,
        now: int,
        outgoing: Mapping[int, SharedState],
        neighbors: Optional[Mapping[int, Iterable[int]]] = None,
    ) -> Dict[int, Dict[int, TimestampedMessage]]:
        """Deliver this tick's broadcasts and return what each receiver sees.

        ``neighbors`` maps a receiver to the senders it listens to (default:
        every other agent). A receiver always keeps its own state undelayed
        in its buffer so ``delay_ego_state`` can read it back.
        """
        cfg = self.cfg
        for sender in sorted(outgoing):
            msg = TimestampedMessage(sender, now, outgoing[sender])
            dropped = bool(cfg.dropout_p > 0 and self.rng.random() < cfg.dropout_p)
            if self.records is not None:
                self.records.append({"tick": now, "sender": sender, "dropped": dropped})
            # The ego's own record is local memory and never lost.
            self.buffers[sender].push(msg)
            if dropped:
                continue
            for receiver in self.agent_ids:
                if receiver != sender and self._listens(receiver, sender, neighbors):
                    self.buffers[receiver].push(msg)

        delivered: Dict[int, Dict[int, TimestampedMessage]] = {}
        for receiver in self.agent_ids:
            view: Dict[int, TimestampedMessage] = {}
            for sender in self.buffers[receiver].senders():
                if sender == receiver:
                    continue
                if not self._listens(receiver, sender, neighbors):
                    continue
                msg = self.buffers[receiver].retrieve_delayed(sender, now, cfg.t_delay)
                if msg is None:
                    continue
                msg = self._noisy(msg)
                view[sender] = msg
                if self.records is not None:
                    self.records.append(
                        {"tick": now, "receiver": receiver, "sender": sender, "delivered_tick": msg.tick}
                    )
            delivered[receiver] = view
        return delivered

    def own_state(self, agent: int, now: int) -> Optional[SharedState]:
        """The agent's own broadcast state, delayed if ``delay_ego_state``."""
        delay = self.cfg.t_delay if self.cfg.delay_ego_state else 0
        msg = self.buffers[agent].retrieve_delayed(agent, now, delay)
        return None if msg is None else msg.payload

    def _listens(self, receiver: int, sender: int, neighbors) -> bool:
        return neighbors is None or sender in neighbors.get(receiver, ())

    def _noisy(self, msg: TimestampedMessage) -> TimestampedMessage:
        sigma = self.cfg.obs_noise_sigma
        if sigma <= 0:
            return msg
        noise = self.rng.normal(0.0, sigma, size=len(SharedState.NOISY_FIELDS))
        p = msg.payload
        changes = {name: getattr(p, name) + float(n) for name, n in zip(SharedState.NOISY_FIELDS, noise)}
        return replace(msg, payload=replace(p, **changes))

    def write_trace(self, fh: IO[str]) -> None:
        for rec in self.records or ():
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def broadcast_round(
    channel: Channel,
    now: int,
    outgoing: Mapping[int, SharedState],
    neighbors: Optional[Mapping[int, Iterable[int]]] = None,
) -> Dict[int, Dict[int, TimestampedMessage]]:
    return channel.broadcast_round(now, outgoing, neighbors)


def payload_dict(state: SharedState) -> dict:
    return asdict(state)
