"""Event-loop and transport seams shared by the real and simulated stacks.

Broker, gateway and sink cores are written against three small
interfaces:

    Loop     - now_ms() clock, call_later() timers, post() for handing
               work to the loop thread
    Network  - listen(addr) / connect(addr) producing Channels
    Channel  - ordered, reliable delivery of (msg_type, corr_id, payload)
               frames with close notification

All core callbacks (on_frame, on_close, on_accept, timer functions) run
on the loop thread; cores therefore never lock their own state.  The
real implementations below put sockets behind reader threads that post
into a single dispatch thread.  The simulator provides drop-in
replacements driven by a virtual clock.
"""

from __future__ import annotations

import heapq
import itertools
import socket
import threading
import time
from collections import deque

from . import wire
from .errors import BindFailed


class Timer:
    """Cancellable handle returned by Loop.call_later."""

    __slots__ = ("fn", "cancelled")

    def __init__(self, fn):
        self.fn = fn
        self.cancelled = False

    def cancel(self):
        self.cancelled = True


class Channel:
    """One bidirectional frame stream.  Subclasses implement send/close."""

    def __init__(self):
        self.on_frame = None  # fn(channel, msg_type, corr_id, payload)
        self.on_close = None  # fn(channel)
        self.closed = False
        self.remote = "?"

    def set_handler(self, on_frame, on_close=None):
        self.on_frame = on_frame
        self.on_close = on_close

    def send(self, msg_type: int, corr_id: int, payload: bytes):
        raise NotImplementedError

    def close(self):
        raise NotImplementedError

    def abort(self):
        """Hard teardown; over real sockets this is just close()."""
        self.close()


class RealLoop:
    """Single dispatch thread with a monotonic-ordered timer heap.

    now_ms() is wall-clock milliseconds so record timestamps come out as
    real times; timer scheduling internally uses the same clock, which is
    fine at second-scale granularity.
    """

    def __init__(self, name="loop"):
        self._heap = []  # (due_ms, seq, Timer)
        self._seq = itertools.count()
        self._posted = deque()
        self._cond = threading.Condition()
        self._stopping = False
        self._thread = threading.Thread(target=self._run, name=name, daemon=True)
        self._thread.start()

    def now_ms(self) -> float:
        return time.time() * 1000.0

    def call_later(self, delay_ms: float, fn) -> Timer:
        t = Timer(fn)
        with self._cond:
            heapq.heappush(self._heap, (self.now_ms() + max(0.0, delay_ms),
                                        next(self._seq), t))
            self._cond.notify()
        return t

    def post(self, fn):
        with self._cond:
            self._posted.append(fn)
            self._cond.notify()

    def _run(self):
        while True:
            fn = None
            with self._cond:
                while True:
                    if self._posted:
                        fn = self._posted.popleft()
                        break
                    now = self.now_ms()
                    if self._heap and self._heap[0][0] <= now:
                        _, _, timer = heapq.heappop(self._heap)
                        if not timer.cancelled:
                            fn = timer.fn
                            break
                        continue
                    if self._stopping:
                        return
                    wait = None
                    if self._heap:
                        wait = max(0.001, (self._heap[0][0] - now) / 1000.0)
                    self._cond.wait(wait)
            try:
                fn()
            except Exception:
                # a failing handler must not kill the dispatch thread
                import traceback
                traceback.print_exc()

    def stop(self, drain=True):
        """Stops after running already-posted work (drain) or immediately."""
        with self._cond:
            if not drain:
                self._posted.clear()
            self._stopping = True
            self._cond.notify()
        if threading.current_thread() is not self._thread:
            self._thread.join(timeout=5.0)


class _SocketChannel(Channel):
    """Socket wrapped so frames arrive on the loop thread."""

    def __init__(self, loop, sock: socket.socket, remote: str):
        super().__init__()
        self._loop = loop
        self._sock = sock
        self._wlock = threading.Lock()
        self.remote = remote

    def start_reader(self):
        t = threading.Thread(target=self._read_loop,
                             name=f"read-{self.remote}", daemon=True)
        t.start()

    def _read_loop(self):
        parser = wire.FrameParser()
        try:
            while True:
                data = self._sock.recv(65536)
                if not data:
                    break
                for msg_type, corr_id, payload in parser.feed(data):
                    self._loop.post(self._dispatch_one(msg_type, corr_id, payload))
        except (OSError, wire.ProtocolError):
            pass
        self._loop.post(self._dispatch_close)

    def _dispatch_one(self, msg_type, corr_id, payload):
        def run():
            if not self.closed and self.on_frame:
                self.on_frame(self, msg_type, corr_id, payload)
        return run

    def _dispatch_close(self):
        if self.closed:
            return
        self.closed = True
        try:
            self._sock.close()
        except OSError:
            pass
        if self.on_close:
            self.on_close(self)

    def send(self, msg_type: int, corr_id: int, payload: bytes):
        if self.closed:
            return
        frame = wire.encode_frame(msg_type, corr_id, payload)
        try:
            with self._wlock:
                self._sock.sendall(frame)
        except OSError:
            self._loop.post(self._dispatch_close)

    def close(self):
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._loop.post(self._dispatch_close)


class Listener:
    def __init__(self, close_fn, addr):
        self._close_fn = close_fn
        self.addr = addr

    def close(self):
        self._close_fn()


def _split_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


class RealNetwork:
    """TCP transport; accept and frame events land on the given loop."""

    def __init__(self, loop):
        self._loop = loop
        self._listeners = []

    def listen(self, addr: str, on_accept) -> Listener:
        host, port = _split_addr(addr)
        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            srv.bind((host, port))
        except OSError as e:
            srv.close()
            raise BindFailed(f"cannot bind {addr}: {e}")
        srv.listen(64)
        bound = f"{host}:{srv.getsockname()[1]}"
        stop = threading.Event()

        def accept_loop():
            while not stop.is_set():
                try:
                    sock, peer = srv.accept()
                except OSError:
                    break
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                ch = _SocketChannel(self._loop, sock, f"{peer[0]}:{peer[1]}")

                def deliver(ch=ch):
                    on_accept(ch)
                    ch.start_reader()
                self._loop.post(deliver)

        threading.Thread(target=accept_loop, name=f"accept-{bound}",
                         daemon=True).start()

        def close():
            stop.set()
            try:
                srv.close()
            except OSError:
                pass

        lst = Listener(close, bound)
        self._listeners.append(lst)
        return lst

    def connect(self, addr: str) -> Channel:
        """Blocking connect; raises OSError on failure.

        Callers on the loop thread should treat failure as the peer being
        unavailable (connect to localhost either succeeds or refuses fast).
        """
        host, port = _split_addr(addr)
        sock = socket.create_connection((host, port), timeout=5.0)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        ch = _SocketChannel(self._loop, sock, addr)
        ch.start_reader()
        return ch

    def close(self):
        for lst in self._listeners:
            lst.close()
