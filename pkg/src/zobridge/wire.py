"""Line-oriented JSON wire protocol for subprocess-backed opaque stages.

Worker side: on startup print one line ``{"in": n, "out": m, "params": p}``,
then serve one query per stdin line. A query line is a JSON array of input
numbers, optionally followed by a JSON array of parameter numbers; the reply
is one line holding a JSON array of output numbers. Any line the worker
writes to stderr aborts the in-flight query on the client side.

Floats travel as their shortest round-trip decimal form (json uses
``repr``), so values cross the pipe bit-exactly.

``python -m zobridge.wire <demo> ...`` serves a few built-in demo functions
used by tests and docs.
"""

from __future__ import annotations

import json
import os
import selectors
import subprocess
import sys
import threading

import numpy as np

from .errors import BackendError
from .stages import CONTINUOUS, ParamBlock, Stage

_DECODER = json.JSONDecoder()


def _parse_query(line: str) -> tuple[list[float], list[float] | None]:
    x, end = _DECODER.raw_decode(line)
    rest = line[end:].strip()
    params = None
    if rest:
        params, end2 = _DECODER.raw_decode(rest)
        if rest[end2:].strip():
            raise ValueError("trailing content after parameter array")
    if not isinstance(x, list):
        raise ValueError("query must start with a JSON array of inputs")
    if params is not None and not isinstance(params, list):
        raise ValueError("second element must be a JSON array of parameters")
    return x, params


def _format_query(x: np.ndarray, params: np.ndarray | None) -> str:
    line = json.dumps([float(v) for v in x])
    if params is not None:
        line += " " + json.dumps([float(v) for v in params])
    return line


def serve(fn, in_width: int, out_width: int, n_params: int = 0,
          stdin=None, stdout=None, stderr=None) -> None:
    """Run the worker loop until stdin closes.

    `fn` is called as fn(x) or fn(x, params) with float64 arrays. Exceptions
    are reported on stderr (aborting that query on the client) and the loop
    continues with the next line.
    """
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    print(json.dumps({"in": in_width, "out": out_width, "params": n_params}),
          file=stdout, flush=True)
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            xs, ps = _parse_query(line)
            x = np.asarray(xs, dtype=np.float64)
            if x.shape != (in_width,):
                raise ValueError(f"expected {in_width} inputs, got {x.shape}")
            if n_params:
                if ps is None:
                    raise ValueError("query is missing the parameter array")
                p = np.asarray(ps, dtype=np.float64)
                if p.shape != (n_params,):
                    raise ValueError(f"expected {n_params} parameters, got {p.shape}")
                y = fn(x, p)
            else:
                y = fn(x)
            y = np.asarray(y, dtype=np.float64)
            if y.shape != (out_width,):
                raise ValueError(f"worker produced {y.shape}, expected ({out_width},)")
            print(json.dumps([float(v) for v in y]), file=stdout, flush=True)
        except Exception as exc:
            print(f"worker error: {exc}", file=stderr, flush=True)


class _LineReader:
    """Incremental line reader over a raw pipe fd."""

    def __init__(self, fileobj):
        self._file = fileobj
        self._buf = b""
        self.closed = False

    def fileno(self) -> int:
        return self._file.fileno()

    def pop_line(self) -> str | None:
        idx = self._buf.find(b"\n")
        if idx < 0:
            return None
        line, self._buf = self._buf[:idx], self._buf[idx + 1:]
        return line.decode("utf-8", errors="replace")

    def feed(self) -> None:
        chunk = os.read(self.fileno(), 65536)
        if not chunk:
            self.closed = True
        self._buf += chunk


class SubprocessStage(Stage):
    """Opaque stage backed by an external worker process.

    Queries are serialized per process handle. At most one parameter block is
    supported (the protocol carries a single optional parameter array).
    """

    def __init__(self, argv: list[str], *, block: ParamBlock | None = None,
                 in_space: str = CONTINUOUS, out_space: str = CONTINUOUS,
                 name: str = "subprocess", timeout: float = 30.0):
        self.name = name
        self.in_space = in_space
        self.out_space = out_space
        self._timeout = timeout
        self._lock = threading.Lock()
        self._broken: str | None = None
        self._proc = subprocess.Popen(
            argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
            stderr=subprocess.PIPE)
        self._out = _LineReader(self._proc.stdout)
        self._err = _LineReader(self._proc.stderr)

        handshake = json.loads(self._read_reply(what="handshake"))
        try:
            self.in_width = int(handshake["in"])
            self.out_width = int(handshake["out"])
            n_params = int(handshake["params"])
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendError(f"{name!r}: malformed handshake {handshake!r}") from exc
        self._block = block
        declared = block.size if block is not None else 0
        if declared != n_params:
            raise BackendError(
                f"{name!r}: worker declares {n_params} parameters, "
                f"stage was given {declared}")

    @property
    def param_blocks(self) -> tuple[ParamBlock, ...]:
        return (self._block,) if self._block is not None else ()

    def _read_reply(self, what: str = "reply") -> str:
        """Wait for one stdout line; a stderr line or process exit aborts."""
        sel = selectors.DefaultSelector()
        sel.register(self._out, selectors.EVENT_READ, "out")
        sel.register(self._err, selectors.EVENT_READ, "err")
        try:
            while True:
                line = self._err.pop_line()
                if line is not None:
                    self._broken = line
                    raise BackendError(f"{self.name!r}: worker reported: {line}")
                line = self._out.pop_line()
                if line is not None:
                    return line
                if self._out.closed or self._err.closed:
                    rc = self._proc.poll()
                    self._broken = f"worker exited (rc={rc})"
                    raise BackendError(f"{self.name!r}: {self._broken} before {what}")
                for key, _ in sel.select(timeout=self._timeout):
                    key.fileobj.feed()
        finally:
            sel.close()

    def _forward(self, x, values):
        with self._lock:
            if self._broken is not None:
                raise BackendError(f"{self.name!r}: worker unavailable: {self._broken}")
            if self._proc.poll() is not None:
                raise BackendError(f"{self.name!r}: worker exited "
                                   f"(rc={self._proc.returncode})")
            params = values[0] if values else None
            line = _format_query(x, params) + "\n"
            try:
                self._proc.stdin.write(line.encode("utf-8"))
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                raise BackendError(f"{self.name!r}: worker pipe closed") from exc
            reply = self._read_reply()
        out = json.loads(reply)
        if not isinstance(out, list):
            raise BackendError(f"{self.name!r}: reply is not a JSON array")
        return np.asarray(out, dtype=np.float64)

    def close(self) -> None:
        if self._proc.poll() is None:
            self._proc.terminate()
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()
        for f in (self._proc.stdin, self._proc.stdout, self._proc.stderr):
            if f:
                f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def python_worker_argv(demo: str, *args: str) -> list[str]:
    """argv for serving a built-in demo worker via the current interpreter."""
    return [sys.executable, "-m", "zobridge.workers", demo, *args]
