"""Client side of the newline-delimited JSON backend protocol.

A backend is any process, local or remote, that answers one JSON object per
line. The client performs the ``hello`` handshake, then multiplexes
requests: each carries an ``id`` and the reader thread routes replies back
by that id, so up to ``max_in_flight`` requests can be outstanding.

Addresses:

* ``tcp://host:port`` connects to a listening backend;
* anything else is a command line, started as a subprocess speaking on its
  standard streams.
"""
from __future__ import annotations

import itertools
import json
import logging
import shlex
import socket
import subprocess
import threading
from concurrent.futures import Future
from concurrent.futures import TimeoutError as FutureTimeout

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 120.0
DEFAULT_IN_FLIGHT = 4


class BackendError(RuntimeError):
    """Backend unreachable, timed out, or answered with an error."""


class BackendClient:
    def __init__(self, rfile, wfile, closer=None, *, timeout: float = DEFAULT_TIMEOUT,
                 max_in_flight: int = DEFAULT_IN_FLIGHT):
        self._rfile = rfile
        self._wfile = wfile
        self._closer = closer
        self.timeout = timeout
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._write_lock = threading.Lock()
        self._pending: dict[str, Future] = {}
        self._pending_lock = threading.Lock()
        self._ids = itertools.count()
        self._closed = False
        self.requests_sent = 0
        self.hello_reply = self._handshake()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    # -- construction -------------------------------------------------------

    @classmethod
    def spawn(cls, argv, **kw) -> "BackendClient":
        if isinstance(argv, str):
            argv = shlex.split(argv)
        try:
            proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                    text=True, bufsize=1)
        except OSError as exc:
            raise BackendError(f"cannot start backend {argv}: {exc}") from exc

        def closer():
            try:
                proc.stdin.close()
            except OSError:
                pass
            try:
                proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()

        client = cls.__new__(cls)
        client.process = proc
        try:
            cls.__init__(client, proc.stdout, proc.stdin, closer, **kw)
        except BackendError:
            closer()
            raise
        return client

    @classmethod
    def connect(cls, host: str, port: int, **kw) -> "BackendClient":
        try:
            sock = socket.create_connection((host, port), timeout=kw.get("timeout", DEFAULT_TIMEOUT))
        except OSError as exc:
            raise BackendError(f"cannot reach backend at {host}:{port}: {exc}") from exc
        sock.settimeout(None)
        rfile = sock.makefile("r", encoding="utf-8", newline="\n")
        wfile = sock.makefile("w", encoding="utf-8", newline="\n")

        def closer():
            # unblock the reader thread before touching its buffered file
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            for f in (wfile, rfile):
                try:
                    f.close()
                except OSError:
                    pass
            sock.close()

        return cls(rfile, wfile, closer, **kw)

    @classmethod
    def from_address(cls, address: str, **kw) -> "BackendClient":
        if address.startswith("tcp://"):
            host, _, port = address[len("tcp://"):].rpartition(":")
            return cls.connect(host or "127.0.0.1", int(port), **kw)
        return cls.spawn(address, **kw)

    # -- protocol -----------------------------------------------------------

    def _send(self, msg: dict) -> None:
        line = json.dumps(msg, separators=(",", ":")) + "\n"
        with self._write_lock:
            try:
                self._wfile.write(line)
                self._wfile.flush()
            except (OSError, ValueError) as exc:
                raise BackendError(f"backend write failed: {exc}") from exc

    def _handshake(self) -> dict:
        self._send({"op": "hello"})
        line = self._rfile.readline()
        if not line:
            raise BackendError("backend closed during handshake")
        try:
            reply = json.loads(line)
        except json.JSONDecodeError as exc:
            raise BackendError(f"malformed handshake reply: {line!r}") from exc
        if reply.get("op") != "hello" or reply.get("kind") not in ("segmenter", "embedder"):
            raise BackendError(f"unexpected handshake reply: {reply}")
        if reply["kind"] == "embedder" and not isinstance(reply.get("dim"), int):
            raise BackendError("embedder handshake must report an integer dim")
        return reply

    def _read_loop(self):
        try:
            for line in self._rfile:
                line = line.strip()
                if not line:
                    continue
                try:
                    msg = json.loads(line)
                except json.JSONDecodeError:
                    log.warning("dropping malformed backend line: %.200s", line)
                    continue
                rid = str(msg.get("id"))
                with self._pending_lock:
                    fut = self._pending.pop(rid, None)
                if fut is None:
                    log.warning("reply for unknown request id %r", rid)
                    continue
                fut.set_result(msg)
        except (OSError, ValueError):
            pass
        finally:
            with self._pending_lock:
                pending = list(self._pending.values())
                self._pending.clear()
            for fut in pending:
                if not fut.done():
                    fut.set_exception(BackendError("backend connection closed"))

    def request(self, payload: dict, timeout: float | None = None) -> dict:
        """Send one request and block for its reply.

        The wire id is ``<payload id>#<seq>`` so concurrent requests about the
        same sample never collide. Error replies raise :class:`BackendError`.
        """
        if self._closed:
            raise BackendError("client is closed")
        timeout = self.timeout if timeout is None else timeout
        rid = f"{payload.get('id', '')}#{next(self._ids)}"
        msg = dict(payload, id=rid)
        fut: Future = Future()
        if not self._slots.acquire(timeout=timeout):
            raise BackendError("timed out waiting for a free request slot")
        try:
            with self._pending_lock:
                self._pending[rid] = fut
            if not self._reader.is_alive():
                raise BackendError("backend connection closed")
            self._send(msg)
            self.requests_sent += 1
            try:
                reply = fut.result(timeout=timeout)
            except FutureTimeout:
                raise BackendError(f"backend timed out after {timeout:g} s on {rid}") from None
        finally:
            with self._pending_lock:
                self._pending.pop(rid, None)
            self._slots.release()
        if reply.get("op") == "error":
            raise BackendError(reply.get("message", "backend error"))
        if reply.get("op") != "result":
            raise BackendError(f"malformed backend reply: {reply}")
        return reply

    def close(self):
        if self._closed:
            return
        self._closed = True
        if self._closer is not None:
            self._closer()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
