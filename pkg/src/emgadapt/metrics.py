"""Per-timestep and event-based scoring of intent predictions.

Transition accuracy scores every ground-truth class change as a control
event. An event at index ``i`` into class ``c`` passes when

* the prediction switches onto ``c`` inside the reaction buffer
  ``[i, i + buffer)`` (truncated at the next transition): some ``j`` in the
  buffer has ``pred[j] == c`` and ``pred[j - 1] != c``; and
* every prediction from that switch up to the next transition is ``c``.

Requiring a switch means a predictor that already sat on ``c`` (for example
one that never left relax) gets no credit for the transition back.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class TransitionEvent:
    index: int
    from_class: int
    to_class: int
    buffer_end: int
    maintenance_end: int
    detected: bool
    flicker_free: bool
    detection_index: int = -1

    @property
    def passed(self):
        return self.detected and self.flicker_free


@dataclass
class MetricsReport:
    raw_accuracy: float
    transition_accuracy: float | None
    events: list
    confusion: list
    buffer_s: float
    sample_rate_hz: int
    set_kind: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def n_passed(self):
        return sum(e.passed for e in self.events)

    def to_dict(self):
        return {
            "metrics": {
                "raw_accuracy": self.raw_accuracy,
                "transition_accuracy": self.transition_accuracy,
                "n_events": len(self.events),
                "n_passed": self.n_passed,
            },
            "events": [dict(asdict(e), passed=e.passed) for e in self.events],
            "confusion": self.confusion,
            "config": {
                "buffer_s": self.buffer_s,
                "sample_rate_hz": self.sample_rate_hz,
                "buffer_starts_at_transition": True,
                "detection": "switch onto new class within buffer",
            },
            "set_kind": self.set_kind,
            **({"extra": self.extra} if self.extra else {}),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def _streams(truth, pred):
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if truth.shape != pred.shape or truth.ndim != 1:
        raise ValueError(f"truth {truth.shape} and pred {pred.shape} must be equal-length 1-D streams")
    return truth, pred


def raw_accuracy(truth, pred):
    truth, pred = _streams(truth, pred)
    if truth.size == 0:
        raise ValueError("empty streams")
    return float(np.count_nonzero(truth == pred) / truth.size)


def extract_transitions(truth):
    """[(index, from_class, to_class)] for every i with truth[i] != truth[i - 1]."""
    truth = np.asarray(truth, dtype=np.int64)
    if truth.size == 0:
        raise ValueError("empty stream")
    idx = np.nonzero(truth[1:] != truth[:-1])[0] + 1
    return [(int(i), int(truth[i - 1]), int(truth[i])) for i in idx]


def transition_accuracy(truth, pred, sample_rate_hz=200, buffer_s=1.0):
    """Return ``(fraction or None, events)``; None when there are no transitions."""
    truth, pred = _streams(truth, pred)
    if buffer_s < 0:
        raise ValueError("buffer_s must be non-negative")
    buf = int(round(buffer_s * sample_rate_hz))
    trans = extract_transitions(truth)
    bounds = [t[0] for t in trans] + [truth.size]
    seg_min = np.diff([0] + bounds).min() if trans else truth.size
    if trans and buf >= seg_min:
        warnings.warn(f"reaction buffer of {buf} samples is not shorter than the shortest "
                      f"segment ({seg_min} samples)", stacklevel=2)
    events = []
    for n, (i, a, c) in enumerate(trans):
        nxt = bounds[n + 1]
        bend = min(i + buf, nxt)
        window = pred[i:bend]
        prev = pred[i - 1:bend - 1]
        hits = np.nonzero((window == c) & (prev != c))[0]
        detected = hits.size > 0
        start = i + int(hits[0]) if detected else bend
        flicker_free = bool(np.all(pred[start:nxt] == c))
        events.append(TransitionEvent(i, a, c, bend, nxt, bool(detected), flicker_free,
                                      start if detected else -1))
    if not events:
        return None, events
    return sum(e.passed for e in events) / len(events), events


def confusion_counts(truth, pred, num_classes):
    truth, pred = _streams(truth, pred)
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(m, (truth, pred), 1)
    return m.tolist()


def score(truth, pred, sample_rate_hz=200, buffer_s=1.0, num_classes=3, set_kind=""):
    frac, events = transition_accuracy(truth, pred, sample_rate_hz, buffer_s)
    return MetricsReport(raw_accuracy(truth, pred), frac, events,
                         confusion_counts(truth, pred, num_classes), buffer_s, sample_rate_hz, set_kind)


@dataclass
class SuiteReport:
    reports: list
    mean_raw: float
    mean_transition: float | None

    def to_dict(self):
        return {
            "mean_raw_accuracy": self.mean_raw,
            "mean_transition_accuracy": self.mean_transition,
            "recordings": [r.to_dict() for r in self.reports],
        }


def summarize(reports):
    """Unweighted means across reports; undefined transition scores are skipped."""
    raw = float(np.mean([r.raw_accuracy for r in reports])) if reports else float("nan")
    defined = [r.transition_accuracy for r in reports if r.transition_accuracy is not None]
    if len(defined) < len(reports):
        log.warning("%d recording(s) without transitions excluded from the transition mean",
                    len(reports) - len(defined))
    trans = float(np.mean(defined)) if defined else None
    return SuiteReport(list(reports), raw, trans)


def evaluate_testsuite(model, recordings, hop=None, buffer_s=1.0):
    """Stream-policy predictions over each recording, scored and averaged."""
    from .stream import predict_commands

    reports = []
    for rec in recordings:
        if rec.channels != model.config.channels:
            raise ValueError(f"recording has {rec.channels} channels, model expects {model.config.channels}")
        pred = predict_commands(model, rec.samples, hop=hop)
        reports.append(score(rec.labels, pred, rec.sample_rate_hz, buffer_s,
                             model.config.num_classes, rec.set_kind))
    return summarize(reports)
