"""Line-oriented protocol for closed-box dynamics served by another process.

Wire format (one request per line, decimal floats with 17 significant
digits):

    client -> server:  HELLO <M>
    server -> client:  HELLO <M>
    client -> server:  FLOW <tau> <x_1> ... <x_M>
    server -> client:  OK <y_1> ... <y_M>     |     ERR <message>

The connection is serial: one outstanding request at a time.  Parallel
clients must each spawn their own server process.
"""

from __future__ import annotations

import select
import shlex
import subprocess
import sys

import numpy as np

from .dynamics import FlowMap


class OracleError(RuntimeError):
    """Protocol violation, timeout, or an ERR reply from the oracle."""


class OracleFlowMap(FlowMap):
    """Flow map evaluated by an external oracle subprocess."""

    def __init__(self, command: str, dim: int, tau: float, timeout: float = 30.0):
        super().__init__(dim=dim, tau=tau)
        self.command = command
        self.timeout = timeout
        self._proc: subprocess.Popen | None = None

    def _ensure_started(self):
        if self._proc is not None and self._proc.poll() is None:
            return
        self._proc = subprocess.Popen(
            shlex.split(self.command),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            bufsize=1,
        )
        self._send(f"HELLO {self.dim}")
        reply = self._recv().split()
        if len(reply) != 2 or reply[0] != "HELLO" or int(reply[1]) != self.dim:
            raise OracleError(f"bad handshake reply: {' '.join(reply)!r}")

    def _send(self, line: str):
        assert self._proc is not None and self._proc.stdin is not None
        try:
            self._proc.stdin.write(line + "\n")
            self._proc.stdin.flush()
        except BrokenPipeError as exc:
            raise OracleError("oracle process closed its input") from exc

    def _recv(self) -> str:
        assert self._proc is not None and self._proc.stdout is not None
        ready, _, _ = select.select([self._proc.stdout], [], [], self.timeout)
        if not ready:
            raise OracleError(f"oracle timed out after {self.timeout}s")
        line = self._proc.stdout.readline()
        if not line:
            raise OracleError("oracle closed the connection")
        return line.strip()

    def _advance(self, X: np.ndarray) -> np.ndarray:
        self._ensure_started()
        out = np.empty_like(X)
        for i, x in enumerate(X):
            nums = " ".join(f"{v:.17g}" for v in x)
            self._send(f"FLOW {self.tau:.17g} {nums}")
            reply = self._recv().split(maxsplit=1)
            if not reply:
                raise OracleError("empty reply")
            if reply[0] == "ERR":
                msg = reply[1] if len(reply) > 1 else ""
                raise OracleError(f"oracle error: {msg}")
            if reply[0] != "OK":
                raise OracleError(f"unexpected reply: {reply[0]!r}")
            vals = reply[1].split() if len(reply) > 1 else []
            if len(vals) != self.dim:
                raise OracleError(f"expected {self.dim} values, got {len(vals)}")
            out[i] = [float(v) for v in vals]
        return out

    def close(self):
        if self._proc is not None:
            if self._proc.stdin is not None:
                try:
                    self._proc.stdin.close()
                except OSError:
                    pass
            self._proc.terminate()
            self._proc.wait(timeout=5)
            self._proc = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass


def serve_stdio(flow_fn, dim: int):
    """Serve a flow function over stdin/stdout.

    ``flow_fn(tau, x) -> y`` maps a duration and an ``(M,)`` array to an
    ``(M,)`` array.  Runs until EOF; malformed requests get an ERR reply.
    Useful for exposing a user-defined system to the CLI via ``--oracle``.
    """
    out = sys.stdout
    for raw in sys.stdin:
        parts = raw.split()
        if not parts:
            continue
        try:
            if parts[0] == "HELLO":
                if int(parts[1]) != dim:
                    out.write(f"ERR serving dimension {dim}\n")
                else:
                    out.write(f"HELLO {dim}\n")
            elif parts[0] == "FLOW":
                tau = float(parts[1])
                x = np.array([float(p) for p in parts[2:]])
                if x.size != dim:
                    out.write(f"ERR expected {dim} coordinates\n")
                else:
                    y = np.asarray(flow_fn(tau, x), dtype=float)
                    out.write("OK " + " ".join(f"{v:.17g}" for v in y) + "\n")
            else:
                out.write(f"ERR unknown command {parts[0]}\n")
        except Exception as exc:  # noqa: BLE001 - report, keep serving
            out.write(f"ERR {exc}\n")
        out.flush()
