"""Scriptable NDJSON backend used by the test-suite and for adapter debugging.

Run ``python -m sammpa.stub_backend --help`` for modes. It speaks the same
protocol a real model adapter would, on stdin/stdout or on a TCP port.
"""
from __future__ import annotations

import argparse
import json
import socketserver
import sys
import tempfile
import threading
import time
from pathlib import Path

import numpy as np

from .core import BBox, BinaryMask, Point, load_image, save_mask
from .prompt import PromptSet, sigmoid
from .register.field import read_grid
from .segment import mock_segment


class StubBackend:
    def __init__(self, kind, mode="echo", vector=None, mask=None, delay=0.0,
                 fail_after=None, out_dir=None):
        self.kind = kind
        self.mode = mode
        self.vector = vector
        self.mask = mask
        self.delay = delay
        self.fail_after = fail_after
        self.out_dir = Path(out_dir or tempfile.mkdtemp(prefix="sammpa-stub-"))
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.served = 0
        self._lock = threading.Lock()

    def hello(self):
        msg = {"op": "hello", "kind": self.kind}
        if self.kind == "embedder":
            msg["dim"] = len(self.vector)
        return msg

    def handle(self, msg: dict) -> dict:
        op = msg.get("op")
        rid = msg.get("id")
        if op == "hello":
            return self.hello()
        if self.delay:
            time.sleep(self.delay)
        with self._lock:
            self.served += 1
            n = self.served
        try:
            if self.mode == "error" or (self.fail_after is not None and n > self.fail_after):
                raise RuntimeError("stub configured to fail")
            if op == "embed" and self.kind == "embedder":
                vec = [float("nan")] * len(self.vector) if self.mode == "nan" else self.vector
                return {"op": "result", "id": rid, "vector": vec}
            if op == "segment" and self.kind == "segmenter":
                return self._segment(msg, rid, n)
            raise RuntimeError(f"unsupported op {op!r} for a {self.kind}")
        except Exception as exc:  # noqa: BLE001 - every failure becomes a wire error
            return {"op": "error", "id": rid, "message": str(exc)}

    def _segment(self, msg, rid, n):
        if self.mode == "echo":
            return {"op": "result", "id": rid, "mask": str(self.mask), "confidence": 0.9}
        out = self.out_dir / f"mask-{n}.png"
        if self.mode == "logits":
            grid = read_grid(msg["mask_logits"])[:, :, 0]
            save_mask(BinaryMask(sigmoid(grid) >= 0.5), out)
            return {"op": "result", "id": rid, "mask": str(out), "confidence": 0.5}
        if self.mode in ("mock", "multi"):
            img = load_image(msg["image"], target_size=None)
            pts = tuple(Point(x, y, lab) for x, y, lab in msg["points"])
            grid = read_grid(msg["mask_logits"])[:, :, 0] if msg.get("mask_logits") else None
            logits = grid if grid is not None else np.zeros(img.shape, np.float32)
            res = mock_segment(img, PromptSet(pts, BBox(*msg["box"]), logits))
            save_mask(res.mask, out)
            if self.mode == "mock":
                return {"op": "result", "id": rid, "mask": str(out), "confidence": res.confidence}
            empty = self.out_dir / f"empty-{n}.png"
            save_mask(BinaryMask.empty(*img.shape), empty)
            return {"op": "result", "id": rid, "masks": [str(empty), str(out)],
                    "confidences": [0.01, max(res.confidence, 0.02)]}
        raise RuntimeError(f"unknown segmenter mode {self.mode!r}")


def serve_stdio(stub: StubBackend, rfile=sys.stdin, wfile=sys.stdout):
    for line in rfile:
        line = line.strip()
        if not line:
            continue
        try:
            msg = json.loads(line)
        except json.JSONDecodeError:
            continue
        wfile.write(json.dumps(stub.handle(msg)) + "\n")
        wfile.flush()


def tcp_server(stub: StubBackend, host="127.0.0.1", port=0) -> socketserver.ThreadingTCPServer:
    """Threaded TCP server; each request is handled on its own thread."""

    class Handler(socketserver.StreamRequestHandler):
        def handle(self):
            lock = threading.Lock()
            workers = []

            def answer(msg):
                reply = json.dumps(stub.handle(msg)) + "\n"
                with lock:
                    self.wfile.write(reply.encode())
                    self.wfile.flush()

            for raw in self.rfile:
                raw = raw.strip()
                if not raw:
                    continue
                try:
                    msg = json.loads(raw)
                except json.JSONDecodeError:
                    continue
                if msg.get("op") == "hello":
                    answer(msg)
                    continue
                t = threading.Thread(target=answer, args=(msg,), daemon=True)
                t.start()
                workers.append(t)
            for t in workers:
                t.join()

    server = socketserver.ThreadingTCPServer((host, port), Handler)
    server.daemon_threads = True
    return server


def main(argv=None):
    ap = argparse.ArgumentParser(prog="python -m sammpa.stub_backend")
    ap.add_argument("--kind", choices=["segmenter", "embedder"], required=True)
    ap.add_argument("--mode", default="echo",
                    help="embedder: echo|nan|error; segmenter: echo|logits|mock|multi|error")
    ap.add_argument("--vector", default="1,0,0,0", help="comma-separated echo vector")
    ap.add_argument("--mask", help="mask PNG returned in segmenter echo mode")
    ap.add_argument("--delay", type=float, default=0.0, help="seconds to sleep per request")
    ap.add_argument("--fail-after", type=int, default=None)
    ap.add_argument("--out-dir", default=None)
    ap.add_argument("--tcp", type=int, default=None, help="listen on this port instead of stdio")
    args = ap.parse_args(argv)
    vector = [float(v) for v in args.vector.split(",")]
    stub = StubBackend(args.kind, args.mode, vector, args.mask, args.delay,
                       args.fail_after, args.out_dir)
    if args.tcp is None:
        serve_stdio(stub)
    else:
        with tcp_server(stub, port=args.tcp) as srv:
            print(f"listening on {srv.server_address[1]}", flush=True)
            srv.serve_forever()


if __name__ == "__main__":
    main()
