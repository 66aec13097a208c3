"""Sliding-window intent inference over a live or replayed sample stream.

A paced producer pushes samples into a bounded queue; an inference consumer
keeps the last ``T`` samples and, at every hop boundary, predicts the
window and dispatches one :class:`CommandEvent`. When the queue is full the
oldest sample is dropped, so the sample clock never waits on inference.

:func:`predict_commands` is the batch equivalent used for offline scoring.
"""
from __future__ import annotations

import collections
import json
import logging
import socket
import threading
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import patch_logits

log = logging.getLogger(__name__)

RELAX = 0


class ProtocolError(IOError):
    pass


@dataclass
class StreamConfig:
    window_len: int = 200
    hop: int = 10
    realtime_factor: float = 1.0
    smoothing: int = 3          # majority over the last m commands; 1 = none
    queue_size: int = 256

    def __post_init__(self):
        if self.hop < 1 or self.hop > self.window_len:
            raise ValueError(f"hop must be in [1, {self.window_len}], got {self.hop}")
        if self.smoothing < 1:
            raise ValueError("smoothing window must be >= 1")
        if self.queue_size < 1:
            raise ValueError("queue_size must be >= 1")


@dataclass
class CommandEvent:
    sample_index: int
    cls: int
    posterior_max: float
    inference_latency_us: float
    queue_depth: int


@dataclass
class StreamReport:
    achieved_factor: float
    latency_p50_us: float
    latency_p99_us: float
    drops: int
    n_samples: int
    hop: int
    events: list = field(default_factory=list)

    def commands(self, n_samples=None):
        """Per-timestep command stream; warm-up and dropped hops hold the previous command."""
        n = self.n_samples if n_samples is None else n_samples
        out = np.full(n, RELAX, dtype=np.int64)
        last, cursor = RELAX, 0
        for ev in self.events:
            start = max(ev.sample_index - self.hop + 1, 0)
            out[cursor:start] = last
            out[start:ev.sample_index + 1] = ev.cls
            last, cursor = ev.cls, ev.sample_index + 1
        out[cursor:] = last
        return out

    def to_dict(self, commands_path=None):
        return {
            "achieved_factor": self.achieved_factor,
            "latency_us": {"p50": self.latency_p50_us, "p99": self.latency_p99_us},
            "drops": self.drops,
            "n_samples": self.n_samples,
            "n_events": len(self.events),
            "commands_path": commands_path,
        }


# ---------------------------------------------------------------- batch path

def window_commands(model, samples, hop=None, chunk=256):
    """Class of the newest sample for every full window ending on a hop boundary.

    Returns ``(ends, classes)`` where window ``i`` covers ``[ends[i] - T, ends[i])``.
    """
    cfg = model.config
    T = cfg.window_len
    hop = cfg.patch_len if hop is None else hop
    x = model.norm.apply(samples)
    n = len(x)
    first = -(-T // hop) * hop
    ends = np.arange(first, n + 1, hop, dtype=np.int64)
    classes = np.zeros(len(ends), dtype=np.int64)
    view = np.lib.stride_tricks.sliding_window_view(x, (T, x.shape[1]))[:, 0]
    for s in range(0, len(ends), chunk):
        e = ends[s:s + chunk]
        wins = np.ascontiguousarray(view[e - T])
        logits = patch_logits(model.params, cfg, wins, lora=model.lora, lora_scale=model.lora_scale)
        classes[s:s + chunk] = logits[:, -1].argmax(axis=-1)
    return ends, classes


def predict_commands(model, samples, hop=None):
    """Per-timestep commands under the streaming policy (warm-up = relax)."""
    hop = model.config.patch_len if hop is None else hop
    ends, classes = window_commands(model, samples, hop)
    events = [CommandEvent(int(e) - 1, int(c), 0.0, 0.0, 0) for e, c in zip(ends, classes)]
    rep = StreamReport(0.0, 0.0, 0.0, 0, len(samples), hop, events)
    return rep.commands()


# ---------------------------------------------------------------- sources

class ReplaySource:
    """Replays a recording's samples, paced at ``rate * realtime_factor`` (0 = unpaced)."""

    def __init__(self, recording, realtime_factor=1.0):
        if realtime_factor < 0:
            raise ValueError("realtime_factor must be >= 0")
        self.samples = recording.samples
        self.rate = recording.sample_rate_hz
        self.factor = realtime_factor
        self.channels = recording.channels
        self.paced = realtime_factor > 0

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        if not self.paced:
            yield from self.samples
            return
        period = 1.0 / (self.rate * self.factor)
        t0 = time.perf_counter()
        for i, row in enumerate(self.samples):
            delay = t0 + i * period - time.perf_counter()
            if delay > 0:
                time.sleep(delay)
            yield row


def replay_source(recording, realtime_factor=1.0):
    return ReplaySource(recording, realtime_factor)


class SocketSource:
    """Accepts one TCP client sending fixed-size records of ``channels`` little-endian f32."""

    def __init__(self, port=0, channels=8, heartbeat_s=2.0, host="127.0.0.1"):
        self.channels = channels
        self.heartbeat_s = heartbeat_s
        self.paced = True
        self.error = None
        self._srv = socket.create_server((host, port))
        self.port = self._srv.getsockname()[1]

    def close(self):
        self._srv.close()

    def __iter__(self):
        rec = 4 * self.channels
        self._srv.settimeout(None)
        conn, _ = self._srv.accept()
        buf = b""
        with conn:
            conn.settimeout(self.heartbeat_s)
            while True:
                try:
                    chunk = conn.recv(65536)
                except socket.timeout:
                    chunk = b""
                if not chunk:
                    break
                buf += chunk
                usable = len(buf) - len(buf) % rec
                if usable:
                    block = np.frombuffer(buf[:usable], dtype="<f4").reshape(-1, self.channels)
                    buf = buf[usable:]
                    yield from block.astype(np.float32)
        self.close()
        if buf:
            self.error = ProtocolError(f"stream ended with {len(buf)} stray bytes; "
                                       f"records must be {rec} bytes ({self.channels} x f32)")
            raise self.error


def socket_source(port=0, channels=8, heartbeat_s=2.0):
    return SocketSource(port, channels, heartbeat_s)


# ---------------------------------------------------------------- engine

class _DropOldestQueue:
    def __init__(self, maxsize, block):
        self.items = collections.deque()
        self.maxsize = maxsize
        self.block = block
        self.cond = threading.Condition()
        self.drops = 0
        self.closed = False

    def put(self, item):
        with self.cond:
            if len(self.items) >= self.maxsize:
                if self.block:
                    while len(self.items) >= self.maxsize:
                        self.cond.wait()
                else:
                    self.items.popleft()
                    self.drops += 1
            self.items.append(item)
            self.cond.notify_all()

    def close(self):
        with self.cond:
            self.closed = True
            self.cond.notify_all()

    def get(self):
        with self.cond:
            while not self.items and not self.closed:
                self.cond.wait()
            if not self.items:
                return None
            item = self.items.popleft()
            self.cond.notify_all()
            return item, len(self.items)


def _majority(history, current):
    counts = collections.Counter(history)
    best = max(counts.values())
    return current if counts[current] == best else min(c for c, n in counts.items() if n == best)


def run_stream(model, stream_config, source, sink=None, infer_delay_s=0.0):
    """Drive ``source`` through the model; returns a :class:`StreamReport`.

    ``infer_delay_s`` adds an artificial per-inference delay (for testing
    backpressure).
    """
    cfg = model.config
    T, hop, C = stream_config.window_len, stream_config.hop, cfg.channels
    if T != cfg.window_len:
        raise ValueError(f"stream window {T} differs from model window {cfg.window_len}")
    if getattr(source, "channels", C) != C:
        raise ValueError(f"source has {source.channels} channels, model expects {C}")
    q = _DropOldestQueue(stream_config.queue_size, block=not getattr(source, "paced", True))
    produced = [0]
    failure = []

    def producer():
        try:
            for i, row in enumerate(source):
                row = np.asarray(row, dtype=np.float32)
                if row.shape != (C,):
                    raise ProtocolError(f"sample {i} has shape {row.shape}, expected ({C},)")
                q.put((i, row, time.perf_counter()))
                produced[0] = i + 1
        except Exception as e:  # surfaced to the caller after shutdown
            failure.append(e)
        finally:
            q.close()

    events, latencies = [], []
    ring = np.zeros((T, C), dtype=np.float32)
    filled = 0
    history = collections.deque(maxlen=stream_config.smoothing)
    t_start = time.perf_counter()
    th = threading.Thread(target=producer, name="emg-producer", daemon=True)
    th.start()
    while True:
        got = q.get()
        if got is None:
            break
        (idx, row, t_in), depth = got
        ring[:-1] = ring[1:]
        ring[-1] = row
        filled = min(filled + 1, T)
        if (idx + 1) % hop:
            continue
        if filled < T:
            ev = CommandEvent(idx, RELAX, 1.0, 0.0, depth)
        else:
            if infer_delay_s:
                time.sleep(infer_delay_s)
            logits = patch_logits(model.params, cfg, model.norm.apply(ring)[None],
                                  lora=model.lora, lora_scale=model.lora_scale)[0, -1].astype(np.float64)
            cls = int(logits.argmax())
            post = np.exp(logits - logits.max())
            post /= post.sum()
            history.append(cls)
            if stream_config.smoothing > 1:
                cls = _majority(history, cls)
            lat = (time.perf_counter() - t_in) * 1e6
            latencies.append(lat)
            ev = CommandEvent(idx, cls, float(post.max()), lat, depth)
        events.append(ev)
        if sink is not None:
            sink(ev)
    th.join()
    elapsed = time.perf_counter() - t_start
    if failure:
        raise failure[0]
    n = produced[0]
    rate = cfg.sample_rate_hz
    lat = np.asarray(latencies) if latencies else np.zeros(1)
    return StreamReport(
        achieved_factor=(n / rate) / elapsed if elapsed > 0 else float("inf"),
        latency_p50_us=float(np.percentile(lat, 50)),
        latency_p99_us=float(np.percentile(lat, 99)),
        drops=q.drops,
        n_samples=n,
        hop=hop,
        events=events,
    )


def write_report(report, path, commands_path=None):
    with open(path, "w") as f:
        json.dump(report.to_dict(commands_path), f, indent=1, sort_keys=True)
    if commands_path:
        np.save(commands_path, report.commands())


def events_to_dicts(events):
    return [asdict(e) for e in events]
