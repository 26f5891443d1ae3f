"""Run external registration programs under the benchmark harness.

Protocol (line-delimited JSON over standard streams):
  request   {"id": "<pair>", "source_ply": "<abs path>", "target_ply": "<abs path>"}
  response  {"id": "<pair>", "status": "ok", "transform": [16 numbers, row-major 4x4]}
            {"id": "<pair>", "status": "error", "message": "<why>"}

One request per process invocation by default; persistent mode keeps the
child alive across requests to amortize model load time. Any misbehavior
(timeout, crash, malformed reply) surfaces as BackendError so the harness
can record a failure and continue; the harness itself never crashes on
backend behavior.
"""

from __future__ import annotations

import atexit
import json
import queue
import subprocess
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BackendError
from .geometry import RigidTransform
from .registration import RegistrationResult


@dataclass(frozen=True)
class BackendBinding:
    name: str
    command: tuple[str, ...]
    workdir: str | None = None
    timeout: float = 60.0
    persistent: bool = False

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")
        if not self.command:
            raise ValueError("command must be non-empty")
        object.__setattr__(self, "command", tuple(str(c) for c in self.command))


def _parse_response(line: str, request_id: str) -> RigidTransform:
    try:
        reply = json.loads(line)
    except json.JSONDecodeError as e:
        raise BackendError("protocol error", f"unparseable response line: {e}") from None
    if not isinstance(reply, dict):
        raise BackendError("protocol error", "response is not a JSON object")
    if str(reply.get("id")) != str(request_id):
        raise BackendError(
            "protocol error",
            f"response id {reply.get('id')!r} does not match request {request_id!r}",
        )
    status = reply.get("status")
    if status == "error":
        raise BackendError("backend error", str(reply.get("message", "unspecified")))
    if status != "ok":
        raise BackendError("protocol error", f"unknown status {status!r}")
    transform = reply.get("transform")
    if not isinstance(transform, list) or len(transform) != 16:
        raise BackendError("protocol error", "transform must be a list of 16 numbers")
    try:
        return RigidTransform.from_matrix(np.asarray(transform, dtype=np.float64))
    except (TypeError, ValueError) as e:
        raise BackendError("protocol error", f"bad transform: {e}") from None


def _request_line(request_id: str, source_path, target_path) -> bytes:
    req = {
        "id": str(request_id),
        "source_ply": str(Path(source_path).resolve()),
        "target_ply": str(Path(target_path).resolve()),
    }
    return (json.dumps(req) + "\n").encode("utf-8")


def _first_line(payload: bytes) -> str:
    for raw in payload.splitlines():
        line = raw.decode("utf-8", errors="replace").strip()
        if line:
            return line
    raise BackendError("protocol error", "empty response")


def _run_one_shot(binding: BackendBinding, request: bytes) -> str:
    try:
        proc = subprocess.Popen(
            binding.command,
            cwd=binding.workdir,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
        )
    except OSError as e:
        raise BackendError("backend exit", f"failed to launch {binding.command[0]}: {e}") from None
    try:
        out, err = proc.communicate(request, timeout=binding.timeout)
    except subprocess.TimeoutExpired:
        proc.kill()
        proc.communicate()
        raise BackendError("timeout", f"no response within {binding.timeout}s") from None
    if proc.returncode != 0:
        tail = err.decode("utf-8", errors="replace").strip()[-500:]
        raise BackendError("backend exit", f"exit code {proc.returncode}: {tail}")
    return _first_line(out)


class PersistentBackend:
    """A long-lived backend child; one in-flight request at a time."""

    def __init__(self, binding: BackendBinding):
        self.binding = binding
        try:
            self.proc = subprocess.Popen(
                binding.command,
                cwd=binding.workdir,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
            )
        except OSError as e:
            raise BackendError("backend exit", f"failed to launch {binding.command[0]}: {e}") from None
        self._lines: queue.Queue[bytes | None] = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    def _pump(self):
        for raw in self.proc.stdout:
            self._lines.put(raw)
        self._lines.put(None)  # EOF sentinel

    def request(self, request: bytes) -> str:
        if self.proc.poll() is not None:
            raise BackendError("backend exit", f"child exited with {self.proc.returncode}")
        try:
            self.proc.stdin.write(request)
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as e:
            raise BackendError("backend exit", f"write failed: {e}") from None
        deadline = time.monotonic() + self.binding.timeout
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                self.close()
                raise BackendError("timeout", f"no response within {self.binding.timeout}s")
            try:
                raw = self._lines.get(timeout=remaining)
            except queue.Empty:
                continue
            if raw is None:
                raise BackendError("backend exit", "child closed its output stream")
            line = raw.decode("utf-8", errors="replace").strip()
            if line:
                return line

    def close(self):
        if self.proc.poll() is None:
            self.proc.kill()
        try:
            self.proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            pass


_persistent: dict[tuple, PersistentBackend] = {}


def _get_persistent(binding: BackendBinding) -> PersistentBackend:
    key = (binding.name, binding.command, binding.workdir)
    backend = _persistent.get(key)
    if backend is None or backend.proc.poll() is not None:
        backend = PersistentBackend(binding)
        _persistent[key] = backend
    return backend


@atexit.register
def _shutdown_persistent():
    for backend in _persistent.values():
        backend.close()
    _persistent.clear()


def register_external(
    binding: BackendBinding, source_path, target_path, request_id: str = "0"
) -> RegistrationResult:
    """Ask an external backend to register one pair of PLY files.

    Wall time is measured by the harness around the whole exchange; fitness
    and rmse are not reported by the protocol and come back as NaN.
    """
    request = _request_line(request_id, source_path, target_path)
    start = time.perf_counter()
    if binding.persistent:
        line = _get_persistent(binding).request(request)
    else:
        line = _run_one_shot(binding, request)
    transform = _parse_response(line, request_id)
    return RegistrationResult(
        transform=transform,
        fitness=float("nan"),
        inlier_rmse=float("nan"),
        iterations=0,
        wall_time=time.perf_counter() - start,
    )


def load_backend_bindings(path) -> list[BackendBinding]:
    """Read backend bindings from a JSON file (a list of objects)."""
    path = Path(path)
    entries = json.loads(path.read_text())
    if not isinstance(entries, list):
        raise ValueError(f"{path}: backend bindings must be a JSON list")
    bindings = []
    for k, e in enumerate(entries):
        try:
            bindings.append(
                BackendBinding(
                    name=str(e["name"]),
                    command=tuple(e["command"]),
                    workdir=e.get("workdir"),
                    timeout=float(e.get("timeout", 60.0)),
                    persistent=bool(e.get("persistent", False)),
                )
            )
        except (KeyError, TypeError, ValueError) as err:
            raise ValueError(f"{path}: bad backend entry {k}: {err}") from None
    return bindings
