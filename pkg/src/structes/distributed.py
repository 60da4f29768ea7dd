"""Seed-synchronized coordinator/worker evaluation.

Coordinator and workers agree once on a configuration (objective, smoothing,
exploration scheme, master seed) and on a fixed partition of direction rows.
Each iteration the coordinator broadcasts ``theta``; every worker rebuilds the
iteration's directions from ``derive_iteration_seed(master_seed, iteration)``,
evaluates only its rows and replies with scalars.  The coordinator rebuilds
the directions too and folds the gradient in ascending row order, so the
result does not depend on the number of workers or on arrival order.

Wire format: a frame is a 4-byte big-endian length followed by a UTF-8 JSON
object ``{"type", "iteration", "payload"}``.  Types are INIT, PARAMS, EVALS,
STOP and ERROR.  Floats travel as hex strings (``float.hex``) so values
round-trip bit-exactly.
"""

import hashlib
import json
import logging
import queue
import socket
import struct
import threading
from dataclasses import dataclass

import numpy as np

from .environments import build_objective
from .errors import IncompleteIterationError, NonFiniteValueError, ProtocolError
from .estimators import EstimatorKind, GradientEstimate, SmoothingConfig, evaluations_for, \
    gradient_from_values
from .exploration import ExplorationScheme
from .seeding import derive_iteration_seed
from .trainer import IterationResult, evaluate_rows

log = logging.getLogger(__name__)

__all__ = ["derive_iteration_seed", "assign_rows", "WorkerAssignment", "EvalMessage",
           "SharedConfig", "worker_evaluate", "master_aggregate", "Coordinator",
           "serve_worker", "in_process_pair", "SocketChannel", "local_cluster"]

FRAME_TYPES = ("INIT", "PARAMS", "EVALS", "STOP", "ERROR")
_LEN = struct.Struct(">I")


# --- row assignment ---------------------------------------------------------

@dataclass(frozen=True)
class WorkerAssignment:
    worker_id: int
    row_indices: tuple


def assign_rows(n, workers):
    """Balanced contiguous partition of ``range(n)``; the first ``n % L``
    workers get one extra row."""
    if workers < 1:
        raise ValueError(f"need at least one worker, got {workers}")
    if workers > n:
        raise ValueError(f"more workers ({workers}) than directions ({n})")
    base, extra = divmod(n, workers)
    out = []
    start = 0
    for w in range(workers):
        size = base + (1 if w < extra else 0)
        out.append(WorkerAssignment(w, tuple(range(start, start + size))))
        start += size
    return out


# --- shared configuration ----------------------------------------------------

@dataclass(frozen=True)
class SharedConfig:
    """Everything a worker needs to reproduce the coordinator's directions."""

    objective: dict
    smoothing: SmoothingConfig
    scheme: ExplorationScheme
    master_seed: int

    def to_dict(self):
        return {
            "objective": self.objective,
            "smoothing": {"sigma": self.smoothing.sigma,
                          "num_directions": self.smoothing.num_directions,
                          "estimator_kind": self.smoothing.estimator_kind.value},
            "exploration": {"kind": self.scheme.kind.value, "k": self.scheme.k,
                            "leap": self.scheme.leap, "skip": self.scheme.skip},
            "master_seed": int(self.master_seed),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["objective"], SmoothingConfig(**d["smoothing"]),
                   ExplorationScheme(**d["exploration"]), int(d["master_seed"]))

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# --- messages ----------------------------------------------------------------

def _hex_list(values):
    return [float(v).hex() for v in values]


def _unhex_list(values):
    return np.array([float.fromhex(v) for v in values], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class EvalMessage:
    iteration: int
    worker_id: int
    rows: tuple
    f_plus: np.ndarray
    f_minus: np.ndarray | None = None
    center: float | None = None

    def to_payload(self):
        return {"worker_id": self.worker_id, "rows": list(self.rows),
                "f_plus": _hex_list(self.f_plus),
                "f_minus": None if self.f_minus is None else _hex_list(self.f_minus),
                "center": None if self.center is None else float(self.center).hex()}

    @classmethod
    def from_payload(cls, iteration, p):
        return cls(iteration, int(p["worker_id"]), tuple(int(r) for r in p["rows"]),
                   _unhex_list(p["f_plus"]),
                   None if p["f_minus"] is None else _unhex_list(p["f_minus"]),
                   None if p["center"] is None else float.fromhex(p["center"]))


def encode_frame(kind, iteration, payload):
    if kind not in FRAME_TYPES:
        raise ProtocolError(f"unknown frame type {kind!r}")
    body = json.dumps({"type": kind, "iteration": iteration, "payload": payload},
                      separators=(",", ":")).encode()
    return _LEN.pack(len(body)) + body


def decode_frame(frame):
    if len(frame) < 4:
        raise ProtocolError("truncated frame header")
    (n,) = _LEN.unpack(frame[:4])
    if len(frame) != 4 + n:
        raise ProtocolError(f"frame length {len(frame) - 4} does not match header {n}")
    try:
        msg = json.loads(frame[4:].decode())
    except ValueError as e:
        raise ProtocolError(f"malformed frame body: {e}") from None
    if msg.get("type") not in FRAME_TYPES:
        raise ProtocolError(f"unknown frame type {msg.get('type')!r}")
    return msg["type"], msg.get("iteration"), msg.get("payload")


# --- transports --------------------------------------------------------------

class _QueueChannel:
    """One end of an in-process duplex channel carrying encoded frames."""

    def __init__(self, inbox, outbox):
        self._in = inbox
        self._out = outbox
        self.bytes_sent = 0
        self.bytes_received = 0

    def send(self, frame):
        self.bytes_sent += len(frame)
        self._out.put(frame)

    def recv(self, timeout=None):
        try:
            frame = self._in.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError("no frame within timeout") from None
        self.bytes_received += len(frame)
        return frame

    def close(self):
        pass


def in_process_pair():
    """Two connected channel ends: ``(coordinator_side, worker_side)``."""
    a, b = queue.Queue(), queue.Queue()
    return _QueueChannel(a, b), _QueueChannel(b, a)


class SocketChannel:
    """Frame channel over a connected stream socket."""

    def __init__(self, sock):
        self.sock = sock
        self.bytes_sent = 0
        self.bytes_received = 0

    @classmethod
    def connect(cls, host, port, timeout=10.0):
        return cls(socket.create_connection((host, port), timeout=timeout))

    def send(self, frame):
        self.sock.sendall(frame)
        self.bytes_sent += len(frame)

    def _read_exact(self, n):
        buf = bytearray()
        while len(buf) < n:
            chunk = self.sock.recv(n - len(buf))
            if not chunk:
                raise ProtocolError("connection closed mid-frame")
            buf += chunk
        return bytes(buf)

    def recv(self, timeout=None):
        self.sock.settimeout(timeout)
        try:
            head = self._read_exact(4)
            body = self._read_exact(_LEN.unpack(head)[0])
        except socket.timeout:
            raise TimeoutError("no frame within timeout") from None
        self.bytes_received += 4 + len(body)
        return head + body

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


def listen(host, port, workers, timeout=60.0):
    """Accept ``workers`` connections; returns the channels in accept order."""
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen(workers)
    srv.settimeout(timeout)
    chans = []
    try:
        while len(chans) < workers:
            conn, _ = srv.accept()
            chans.append(SocketChannel(conn))
    finally:
        srv.close()
    return chans


# --- worker side ---------------------------------------------------------------

class WorkerState:
    def __init__(self, config, assignment, objective=None):
        self.config = config
        self.assignment = assignment
        self.objective = objective if objective is not None else build_objective(config.objective)
        self.next_iteration = 0


def worker_evaluate(state, iteration, theta):
    """Evaluate the worker's rows for one iteration; returns an :class:`EvalMessage`.

    Only scalars leave the worker.  Worker 0 also reports ``F(theta)``, which
    the coordinator logs and the forward-difference estimator needs.
    """
    if iteration != state.next_iteration:
        raise ProtocolError(f"worker {state.assignment.worker_id} expected iteration "
                            f"{state.next_iteration}, got {iteration}")
    cfg = state.config
    theta = np.asarray(theta, dtype=np.float64)
    n = cfg.smoothing.num_directions
    seed = derive_iteration_seed(cfg.master_seed, iteration)
    rows_idx = state.assignment.row_indices
    rows = cfg.scheme.rows(theta.size, n, seed, rows_idx, iteration)
    lead = state.assignment.worker_id == 0
    vals = evaluate_rows(state.objective, theta, cfg.smoothing, rows, with_center=lead)
    state.next_iteration += 1
    return EvalMessage(iteration, state.assignment.worker_id, tuple(rows_idx), vals["f_plus"],
                       vals.get("f_minus"), vals.get("center"))


def serve_worker(channel, expected_hash=None, objective=None, timeout=None):
    """Worker loop: INIT, then PARAMS/EVALS until STOP.

    With ``expected_hash`` the worker refuses an INIT whose configuration hash
    differs, replying with an ERROR frame and raising :class:`ProtocolError`.
    """
    kind, _, payload = decode_frame(channel.recv(timeout))
    if kind != "INIT":
        raise ProtocolError(f"expected INIT, got {kind}")
    h = payload["config_hash"]
    if expected_hash is not None and h != expected_hash:
        msg = f"config hash mismatch: coordinator {h[:12]}, worker {expected_hash[:12]}"
        channel.send(encode_frame("ERROR", None, {"message": msg}))
        raise ProtocolError(msg)
    config = SharedConfig.from_dict(payload["config"])
    if config.config_hash() != h:
        msg = "INIT config does not match its own hash"
        channel.send(encode_frame("ERROR", None, {"message": msg}))
        raise ProtocolError(msg)
    a = payload["assignment"]
    state = WorkerState(config, WorkerAssignment(int(a["worker_id"]), tuple(a["rows"])),
                        objective)
    while True:
        kind, iteration, payload = decode_frame(channel.recv(timeout))
        if kind == "STOP":
            return
        if kind != "PARAMS":
            raise ProtocolError(f"unexpected {kind} frame")
        try:
            msg = worker_evaluate(state, iteration, _unhex_list(payload["theta"]))
        except (ProtocolError, NonFiniteValueError) as e:
            channel.send(encode_frame("ERROR", iteration, {"message": str(e)}))
            raise
        channel.send(encode_frame("EVALS", iteration, msg.to_payload()))


# --- coordinator side --------------------------------------------------------

def master_aggregate(messages, iteration, config, dim):
    """Combine worker messages into the iteration's gradient estimate.

    Returns ``(GradientEstimate, center_value)``.  Raises
    :class:`IncompleteIterationError` on a missing or duplicated row and
    :class:`ProtocolError` on an iteration mismatch.
    """
    cfg = config.smoothing
    n = cfg.num_directions
    kind = cfg.estimator_kind
    f_plus = np.full(n, np.nan)
    f_minus = np.full(n, np.nan) if kind is EstimatorKind.ANTITHETIC else None
    seen = np.zeros(n, dtype=bool)
    center = None
    for m in messages:
        if m.iteration != iteration:
            raise ProtocolError(f"message from worker {m.worker_id} is for iteration "
                                f"{m.iteration}, expected {iteration}")
        rows = np.asarray(m.rows, dtype=np.int64)
        if rows.size and (rows.min() < 0 or rows.max() >= n):
            raise ProtocolError(f"worker {m.worker_id} sent out-of-range rows")
        dup = rows[seen[rows]]
        if dup.size or len(set(m.rows)) != len(m.rows):
            dup_rows = dup.tolist() or [r for r in m.rows if m.rows.count(r) > 1]
            raise IncompleteIterationError(iteration, dup_rows, "duplicate rows")
        seen[rows] = True
        f_plus[rows] = m.f_plus
        if f_minus is not None:
            if m.f_minus is None:
                raise ProtocolError(f"worker {m.worker_id} omitted antithetic values")
            f_minus[rows] = m.f_minus
        if m.center is not None:
            center = m.center
    if not seen.all():
        raise IncompleteIterationError(iteration, np.flatnonzero(~seen).tolist())
    if center is None:
        raise ProtocolError(f"no center value reported for iteration {iteration}")
    seed = derive_iteration_seed(config.master_seed, iteration)
    dirs = config.scheme.sample(dim, n, seed, iteration).rows
    g = gradient_from_values(kind, cfg.sigma, dirs, f_plus, f_minus, center)
    return GradientEstimate(g, evaluations_for(kind, n), kind), center


class Coordinator:
    """Evaluator that farms each iteration out to workers over channels.

    Plugs into :func:`structes.trainer.train` as ``evaluator``.
    """

    def __init__(self, channels, config, timeout=30.0):
        self.channels = list(channels)
        self.config = config
        self.timeout = timeout
        self.assignments = assign_rows(config.smoothing.num_directions, len(self.channels))
        self._started = False

    def start(self):
        h = self.config.config_hash()
        cfg = self.config.to_dict()
        for ch, a in zip(self.channels, self.assignments):
            ch.send(encode_frame("INIT", None, {
                "config": cfg, "config_hash": h,
                "assignment": {"worker_id": a.worker_id, "rows": list(a.row_indices)}}))
        self._started = True

    def evaluate(self, iteration, theta):
        if not self._started:
            self.start()
        theta = np.asarray(theta, dtype=np.float64)
        frame = encode_frame("PARAMS", iteration, {"theta": _hex_list(theta)})
        for ch in self.channels:
            ch.send(frame)
        messages = []
        missing = []
        for ch, a in zip(self.channels, self.assignments):
            try:
                kind, it, payload = decode_frame(ch.recv(self.timeout))
            except TimeoutError:
                log.error("worker %d timed out at iteration %d", a.worker_id, iteration)
                missing.extend(a.row_indices)
                continue
            if kind == "ERROR":
                raise ProtocolError(f"worker {a.worker_id}: {payload['message']}")
            if kind != "EVALS":
                raise ProtocolError(f"expected EVALS from worker {a.worker_id}, got {kind}")
            messages.append(EvalMessage.from_payload(it, payload))
        if missing:
            raise IncompleteIterationError(iteration, missing, "worker timeout")
        est, center = master_aggregate(messages, iteration, self.config, theta.size)
        n = self.config.smoothing.num_directions
        calls = 1 + (2 * n if self.config.smoothing.estimator_kind is EstimatorKind.ANTITHETIC
                     else n)
        return IterationResult(est, float(center), calls)

    def close(self):
        for ch in self.channels:
            try:
                ch.send(encode_frame("STOP", None, {}))
            except OSError:
                pass
            ch.close()


class local_cluster:
    """Context manager running ``workers`` in-process workers on threads.

    Yields a started :class:`Coordinator`.  ``objective`` lets workers share
    an already-built objective instead of rebuilding it from the description.
    """

    def __init__(self, config, workers, objective=None, timeout=30.0):
        self.config = config
        self.workers = workers
        self.objective = objective
        self.timeout = timeout
        self.errors = []

    def _run(self, ch):
        try:
            serve_worker(ch, objective=self.objective)
        except Exception as e:  # surfaced by the coordinator as a timeout or ERROR
            self.errors.append(e)

    def __enter__(self):
        pairs = [in_process_pair() for _ in range(self.workers)]
        self.threads = [threading.Thread(target=self._run, args=(w,), daemon=True)
                        for _, w in pairs]
        for t in self.threads:
            t.start()
        self.coordinator = Coordinator([c for c, _ in pairs], self.config, self.timeout)
        self.coordinator.start()
        return self.coordinator

    def __exit__(self, *exc):
        self.coordinator.close()
        for t in self.threads:
            t.join(timeout=5)
        return False
