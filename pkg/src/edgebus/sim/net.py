"""Simulated network: sites joined by parameterized links.

Every component lives at a site ("device", "cloudlet", "cloud", ...).
A frame sent between sites experiences, in order:

    serialization   frame_bytes / bandwidth, queued FIFO per link
                    direction (the link is busy while serializing)
    propagation     one_way_latency_ms + uniform(-jitter, +jitter)
    loss            independent per transmission attempt; the sender
                    retries every RETRANSMIT_MS until the frame gets
                    through

Channels are reliable ordered streams: every sent item carries a
sequence number and the receiver delivers strictly in sequence,
buffering anything that physically arrived early (a lost frame blocks
later ones until its retransmission lands, like TCP head-of-line
blocking).  close() travels as a sequenced item, so a peer always sees
all data before the close notice.  All randomness comes from one
per-link RNG seeded from (seed, src_site, dst_site), so a component
added elsewhere in the topology does not perturb unrelated links.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from ..errors import BrokerUnavailable, ConfigError
from ..runtime import Channel, Listener

RETRANSMIT_MS = 200.0


@dataclass
class LinkParams:
    one_way_latency_ms: float = 0.2
    jitter_ms: float = 0.0
    bandwidth_bytes_per_s: float | None = None  # None = infinite
    loss_probability: float = 0.0

    def validate(self) -> "LinkParams":
        if self.one_way_latency_ms < 0 or self.jitter_ms < 0:
            raise ConfigError("latency and jitter must be >= 0")
        if not (0.0 <= self.loss_probability < 1.0):
            raise ConfigError("loss_probability must be in [0, 1)")
        if self.bandwidth_bytes_per_s is not None and self.bandwidth_bytes_per_s <= 0:
            raise ConfigError("bandwidth must be positive")
        return self


class _Link:
    """One site pair, one direction; owns the FIFO and the RNG draws."""

    def __init__(self, loop, params: LinkParams, rng: random.Random):
        self.loop = loop
        self.params = params
        self.rng = rng
        self.free_at = 0.0
        self.blocked = False  # partition fault: nothing gets through

    def transit_ms(self, nbytes: int) -> tuple[float, bool]:
        """Draws one transmission attempt: (arrival delay from now, lost?)."""
        now = self.loop.now_ms()
        start = max(now, self.free_at)
        ser = 0.0
        if self.params.bandwidth_bytes_per_s:
            ser = nbytes * 1000.0 / self.params.bandwidth_bytes_per_s
        self.free_at = start + ser
        prop = self.params.one_way_latency_ms
        if self.params.jitter_ms:
            prop += self.rng.uniform(-self.params.jitter_ms, self.params.jitter_ms)
        prop = max(0.0, prop)
        lost = self.blocked or (self.params.loss_probability > 0
                                and self.rng.random() < self.params.loss_probability)
        return (start - now) + ser + prop, lost


_CLOSE = ("close",)


class SimChannel(Channel):
    """Half of a channel pair; send() schedules in-order delivery at the peer."""

    def __init__(self, loop, link: _Link, remote: str):
        super().__init__()
        self._loop = loop
        self._link = link
        self.peer: SimChannel | None = None
        self.remote = remote
        self._send_seq = 0
        self._recv_next = 0
        self._recv_buf: dict[int, tuple] = {}
        self._ready = True  # accept side flips this when on_accept has run
        self.frames_sent = 0
        self.bytes_sent = 0

    def send(self, msg_type: int, corr_id: int, payload: bytes):
        if self.closed:
            return
        nbytes = 9 + len(payload)  # frame header + payload, as on the wire
        self.frames_sent += 1
        self.bytes_sent += nbytes
        seq = self._send_seq
        self._send_seq += 1
        self._transmit(seq, (msg_type, corr_id, payload), nbytes)

    def _transmit(self, seq, item, nbytes):
        peer = self.peer
        if peer is None or peer.closed:
            return
        delay, lost = self._link.transit_ms(nbytes)
        if lost:
            self._loop.call_later(RETRANSMIT_MS,
                                  lambda: self._transmit(seq, item, nbytes))
            return
        self._loop.call_later(delay, lambda: self._arrive(seq, item))

    def _arrive(self, seq, item):
        peer = self.peer
        if peer is None or peer.closed:
            return
        peer._recv_buf[seq] = item
        peer._drain()

    def _drain(self):
        if not self._ready:
            return
        while not self.closed and self._recv_next in self._recv_buf:
            item = self._recv_buf.pop(self._recv_next)
            self._recv_next += 1
            if item is _CLOSE:
                self.closed = True
                self._recv_buf.clear()
                if self.on_close:
                    self.on_close(self)
                return
            if self.on_frame:
                self.on_frame(self, item[0], item[1], item[2])

    def _mark_ready(self):
        self._ready = True
        self._drain()

    def close(self):
        if self.closed:
            return
        self.closed = True
        seq = self._send_seq
        self._send_seq += 1
        self._transmit(seq, _CLOSE, 9)

    def abort(self):
        """Hard teardown, like the machine dying: everything in flight is
        discarded and the peer hears a reset instead of an orderly close."""
        if self.closed:
            return
        self.closed = True
        self._recv_buf.clear()
        peer = self.peer

        def reset():
            if peer is None or peer.closed:
                return
            peer.closed = True
            peer._recv_buf.clear()
            if peer.on_close:
                peer.on_close(peer)
        self._loop.call_later(self._link.params.one_way_latency_ms, reset)


class _SimNode:
    """Network facade bound to one site, mirroring RealNetwork's surface."""

    def __init__(self, net: "SimNetwork", site: str):
        self._net = net
        self.site = site

    def listen(self, addr: str, on_accept) -> Listener:
        return self._net._listen(self.site, addr, on_accept)

    def connect(self, addr: str) -> Channel:
        return self._net._connect(self.site, addr)


class SimNetwork:
    def __init__(self, loop, seed: int = 0):
        self._loop = loop
        self._seed = seed
        self._links: dict[tuple[str, str], _Link] = {}
        self._params: dict[tuple[str, str], LinkParams] = {}
        self._default = LinkParams()
        self._listeners: dict[str, tuple[str, object]] = {}  # addr -> (site, cb)
        self.channels: list[SimChannel] = []

    def node(self, site: str) -> _SimNode:
        return _SimNode(self, site)

    def set_link(self, src_site: str, dst_site: str, params: LinkParams,
                 symmetric: bool = True):
        params.validate()
        self._params[(src_site, dst_site)] = params
        if symmetric:
            self._params[(dst_site, src_site)] = params

    def _link(self, src: str, dst: str) -> _Link:
        key = (src, dst)
        link = self._links.get(key)
        if link is None:
            params = self._params.get(key, self._default)
            rng = random.Random(f"{self._seed}:{src}>{dst}")
            link = _Link(self._loop, params, rng)
            self._links[key] = link
        return link

    def set_blocked(self, site_a: str, site_b: str, blocked: bool):
        """Partitions (or heals) both directions between two sites."""
        for key in ((site_a, site_b), (site_b, site_a)):
            self._link(*key).blocked = blocked

    def _listen(self, site: str, addr: str, on_accept) -> Listener:
        if addr in self._listeners:
            raise BrokerUnavailable(f"address already in use: {addr}")
        self._listeners[addr] = (site, on_accept)

        def close():
            if self._listeners.get(addr, (None, None))[1] is on_accept:
                del self._listeners[addr]
        return Listener(close, addr)

    def _connect(self, src_site: str, addr: str) -> Channel:
        entry = self._listeners.get(addr)
        if entry is None:
            raise ConnectionRefusedError(f"no listener at {addr}")
        dst_site, on_accept = entry
        a = SimChannel(self._loop, self._link(src_site, dst_site), addr)
        b = SimChannel(self._loop, self._link(dst_site, src_site),
                       f"{src_site}->{addr}")
        a.peer, b.peer = b, a
        b._ready = False  # hold deliveries until on_accept has installed handlers
        self.channels.append(a)
        self.channels.append(b)
        accept_delay = self._link(src_site, dst_site).params.one_way_latency_ms

        def accept():
            if b.closed:
                return
            on_accept(b)
            b._mark_ready()
        self._loop.call_later(accept_delay, accept)
        return a
