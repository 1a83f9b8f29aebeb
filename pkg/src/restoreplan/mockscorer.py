"""Stand-in for a remote quality scorer, speaking the ``POST /score`` protocol.

Run ``python -m restoreplan.mockscorer --mode luminance --port 0``; the
bound port is printed as ``listening on <port>`` on the first stdout line.

Modes:
  constant   always ``{"score": 3.0}``
  luminance  ``1 + 4 * mean luma`` of the posted image
  proxy      the built-in no-reference proxy score
  timeout    sleeps ``--delay`` seconds before answering
  5xx        HTTP 503
  malformed  a body that is not JSON
  flaky      503 for the first ``--fail-first`` requests, then luminance
"""
from __future__ import annotations

import argparse
import json
import sys
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .raster import luma
from .reward import ProxyProvider, decode_png_b64

MODES = ("constant", "luminance", "proxy", "timeout", "5xx", "malformed", "flaky")


def make_handler(mode: str, delay: float = 5.0, fail_first: int = 2):
    state = {"requests": 0}
    lock = threading.Lock()
    proxy = ProxyProvider()

    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args):
            pass

        def _reply(self, code: int, body: bytes, ctype="application/json"):
            self.send_response(code)
            self.send_header("content-type", ctype)
            self.send_header("content-length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_POST(self):
            with lock:
                state["requests"] += 1
                n = state["requests"]
            length = int(self.headers.get("content-length", 0))
            raw = self.rfile.read(length)
            if self.path != "/score":
                return self._reply(404, b'{"error": "not found"}')
            if mode == "5xx" or (mode == "flaky" and n <= fail_first):
                return self._reply(503, b'{"error": "unavailable"}')
            if mode == "malformed":
                return self._reply(200, b"score: not json", "text/plain")
            if mode == "timeout":
                time.sleep(delay)
            try:
                img = decode_png_b64(json.loads(raw)["image"])
            except Exception:
                return self._reply(400, b'{"error": "bad request"}')
            if mode == "constant":
                score = 3.0
            elif mode == "proxy":
                score = proxy.score(img)
            else:
                score = 1.0 + 4.0 * float(np.mean(luma(img)))
            self._reply(200, json.dumps({"score": score}).encode())

    return Handler, state


class _Server(ThreadingHTTPServer):
    daemon_threads = True

    def handle_error(self, request, client_address):
        # clients that gave up (timeout mode) close the socket before we answer
        if not isinstance(sys.exc_info()[1], ConnectionError):
            super().handle_error(request, client_address)


def serve(mode: str, host: str = "127.0.0.1", port: int = 0, delay: float = 5.0, fail_first: int = 2):
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    handler, state = make_handler(mode, delay, fail_first)
    server = _Server((host, port), handler)
    server.request_state = state
    return server


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--mode", choices=MODES, default="luminance")
    ap.add_argument("--host", default="127.0.0.1")
    ap.add_argument("--port", type=int, default=0)
    ap.add_argument("--delay", type=float, default=5.0)
    ap.add_argument("--fail-first", type=int, default=2)
    args = ap.parse_args(argv)
    server = serve(args.mode, args.host, args.port, args.delay, args.fail_first)
    print(f"listening on {server.server_address[1]}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
