"""Synthetic cue-protocol EMG recordings for healthy and stroke-like subjects.

A set is two timed instruction sequences, ``ROROROR`` then ``RCRCRCR`` with
5 s relax and 6 s open/close cues. Subjects are described by a
:class:`SubjectProfile`; stroke profiles are derived from a severity in
[0, 1] that weakens activation, delays and slows recruitment, adds
antagonist co-contraction, tremor and resting tone.

Channels sit at equal 45 degree spacing around the forearm. Each class
activates a smooth bump of channels; a subject's armband placement shifts
the bumps.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

SAMPLE_RATE = 200
CHANNELS = 8
CLASS_NAMES = ("relax", "open", "close")
CUE_CLASS = {"R": 0, "O": 1, "C": 2}
LABEL_MAP = {str(i): name for i, name in enumerate(CLASS_NAMES)}
RELAX_S = 5.0
ACTIVE_S = 6.0

SET_KINDS = ("train", "test_drift_mid", "test_drift_end", "test_posture", "test_rotation", "test_device")
TEST_KINDS = SET_KINDS[1:]
SHIFTS = ("drift", "posture", "rotation", "device")


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------- cue timelines

@dataclass(frozen=True)
class CueTimeline:
    segments: tuple  # ((cue letter, duration_s), ...)
    sample_rate_hz: int = SAMPLE_RATE

    def segment_lengths(self):
        return [int(round(d * self.sample_rate_hz)) for _, d in self.segments]

    def labels(self):
        return np.concatenate([np.full(n, CUE_CLASS[c], dtype=np.int64)
                               for (c, _), n in zip(self.segments, self.segment_lengths())])

    def num_samples(self):
        return sum(self.segment_lengths())

    def cue_string(self):
        return "".join(c for c, _ in self.segments)

    def segment_bounds(self):
        """[(cue, start, stop), ...] in samples."""
        out, t = [], 0
        for (c, _), n in zip(self.segments, self.segment_lengths()):
            out.append((c, t, t + n))
            t += n
        return out


def sequence(active):
    """``R A R A R A R`` for the active cue letter ``A``."""
    segs = []
    for i in range(7):
        segs.append(("R", RELAX_S) if i % 2 == 0 else (active, ACTIVE_S))
    return tuple(segs)


def make_set_timeline(kind="standard"):
    if kind == "standard":
        return CueTimeline(sequence("O") + sequence("C"))
    if kind == "closing_only":
        return CueTimeline(sequence("C"))
    raise ValueError(f"unknown timeline kind {kind!r}; expected 'standard' or 'closing_only'")


# ---------------------------------------------------------------- subjects

@dataclass
class SubjectProfile:
    subject_id: str
    population: str
    amplitudes: np.ndarray       # (K, C) peak activation per class and channel; row 0 = resting tone
    onset_delay_s: float
    rise_time_s: float
    cocontraction: np.ndarray    # (K, C) antagonist leakage as a fraction of the class's peak amplitude
    noise_std: float
    tremor_hz: float
    tremor_amp: float            # relative modulation depth of active drive
    severity: float = 0.0
    placement: float = 0.0       # armband offset in channel units
    decay_time_s: float = 0.15
    effort_jitter: float = 0.1

    @property
    def amplitude_scale(self):
        return 1.0 - 0.6 * self.severity

    @property
    def cocontraction_norm(self):
        return float(np.abs(self.cocontraction).max())

    def dominant_channels(self, cls, n=3):
        return [int(c) for c in np.argsort(-self.amplitudes[cls], kind="stable")[:n]]


# Muscle-group centres in channel units (before placement offset).
EXTENSOR_CENTRE = 1.5
FLEXOR_CENTRE = 5.0


def channel_bump(centre, width=0.9, channels=CHANNELS):
    pos = np.arange(channels)
    ang = 2 * np.pi * (pos - centre) / channels
    return np.exp((np.cos(ang) - 1.0) / (2 * np.pi * width / channels) ** 2)


# Per-unit-severity slopes of the stroke phenotype.
STROKE_PHENOTYPE = {
    "tone": 0.3,            # resting flexor tone, fraction of gain
    "cocontraction": 1.2,   # antagonist leakage, fraction of the class peak
    "onset": 0.6,           # s
    "rise": 0.7,            # s
    "decay": 0.6,           # s
    "tremor": 0.5,          # modulation depth
    "jitter": 0.2,          # attempt-to-attempt effort spread
}


def sample_subject(population, severity=0.0, seed=0, subject_id=None):
    """Draw a subject profile; deterministic in ``seed``."""
    if population not in ("healthy", "stroke"):
        raise ValueError(f"population must be 'healthy' or 'stroke', got {population!r}")
    if not 0.0 <= severity <= 1.0:
        raise ValueError(f"severity {severity} outside [0, 1]")
    rng = np.random.default_rng(seed)
    if population == "healthy":
        severity = 0.0
    placement = rng.uniform(-0.6, 0.6)
    gain = rng.uniform(6.0, 12.0)
    ext = channel_bump(EXTENSOR_CENTRE + placement, rng.uniform(0.8, 1.1))
    flex = channel_bump(FLEXOR_CENTRE + placement, rng.uniform(0.9, 1.3))
    ext *= rng.lognormal(0.0, 0.15, CHANNELS)
    flex *= rng.lognormal(0.0, 0.15, CHANNELS)
    ext /= ext.max()
    flex /= flex.max()
    scale = 1.0 - 0.6 * severity
    K = len(CLASS_NAMES)
    amps = np.zeros((K, CHANNELS))
    amps[1] = gain * rng.uniform(0.9, 1.1) * ext * scale
    amps[2] = gain * rng.uniform(0.9, 1.1) * flex * scale
    # resting flexor tone grows with spasticity
    # spastic features emerge early, so they grow as sqrt(severity)
    early = np.sqrt(severity)
    amps[0] = gain * (0.02 + STROKE_PHENOTYPE["tone"] * early) * flex

    coco = np.zeros((K, CHANNELS))
    if population == "healthy":
        level = rng.uniform(0.0, 0.08)
        coco[1] = level * flex
        coco[2] = 0.5 * level * ext
        onset = rng.uniform(0.03, 0.09)
        rise = rng.uniform(0.08, 0.15)
        decay = rng.uniform(0.1, 0.2)
        tremor_amp = 0.0
        jitter = 0.1
    else:
        ph = STROKE_PHENOTYPE
        level = 0.05 + ph["cocontraction"] * early
        coco[1] = level * flex
        coco[2] = 0.4 * level * ext
        onset = 0.05 + ph["onset"] * severity + rng.uniform(0.0, 0.03)
        rise = 0.1 + ph["rise"] * severity
        decay = 0.15 + ph["decay"] * severity
        tremor_amp = ph["tremor"] * early
        jitter = 0.1 + ph["jitter"] * early
    return SubjectProfile(
        subject_id=subject_id or f"{population}-{seed}",
        population=population,
        amplitudes=amps.astype(np.float32),
        onset_delay_s=float(onset),
        rise_time_s=float(rise),
        cocontraction=coco.astype(np.float32),
        noise_std=float(rng.uniform(0.8, 1.2)),
        tremor_hz=float(rng.uniform(4.0, 6.0)),
        tremor_amp=float(tremor_amp),
        severity=float(severity),
        placement=float(placement),
        decay_time_s=float(decay),
        effort_jitter=float(jitter),
    )


# ---------------------------------------------------------------- recordings

@dataclass
class Recording:
    samples: np.ndarray          # (N, C) float32
    labels: np.ndarray           # (N,) int in [0, K)
    sample_rate_hz: int = SAMPLE_RATE
    subject_id: str = ""
    population: str = "healthy"
    set_kind: str = "train"
    condition: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 2 or len(self.labels) != len(self.samples):
            raise ValueError(f"samples {self.samples.shape} and labels {self.labels.shape} disagree")
        if self.set_kind not in SET_KINDS:
            raise ValueError(f"unknown set_kind {self.set_kind!r}; valid kinds: {', '.join(SET_KINDS)}")

    @property
    def channels(self):
        return self.samples.shape[1]

    def __len__(self):
        return len(self.labels)


def _carrier(rng, n, channels, rate):
    """Rectified band-limited noise with unit mean."""
    b, a = signal.butter(2, [20.0 / (rate / 2), 90.0 / (rate / 2)], btype="band")
    x = signal.lfilter(b, a, rng.standard_normal((n + 200, channels)), axis=0)[200:]
    x = np.abs(x)
    return x / x.mean(axis=0, keepdims=True)


def _slow_noise(rng, n, rate, cutoff_hz=0.5):
    b, a = signal.butter(1, cutoff_hz / (rate / 2))
    x = signal.lfilter(b, a, rng.standard_normal(n + 4 * rate))[4 * rate:]
    return x / (x.std() + 1e-12)


def activation_envelope(profile, timeline, rng):
    """(K, N) envelopes: each cue's activation after onset delay, rise, and decay."""
    rate = timeline.sample_rate_hz
    n = timeline.num_samples()
    K = profile.amplitudes.shape[0]
    env = np.zeros((K, n))
    t = np.arange(n) / rate
    tau_r = max(profile.rise_time_s, 1e-3) / 3.0
    tau_d = max(profile.decay_time_s, 1e-3) / 3.0
    for cue, start, stop in timeline.segment_bounds():
        k = CUE_CLASS[cue]
        if k == 0:
            continue
        effort = 1.0 + profile.effort_jitter * rng.uniform(-1.0, 1.0)
        on = start / rate + profile.onset_delay_s
        off = stop / rate + min(profile.onset_delay_s, 0.5) * 0.5
        rise = np.where(t >= on, 1.0 - np.exp(-np.clip(t - on, 0.0, None) / tau_r), 0.0)
        level_at_off = 1.0 - np.exp(-max(off - on, 0.0) / tau_r)
        fall = np.where(t >= off, level_at_off * np.exp(-np.clip(t - off, 0.0, None) / tau_d), 0.0)
        seg = np.where(t < off, rise, fall) * effort
        env[k] += seg
    return env


def synthesize(profile, timeline, seed=0, set_kind="train", condition=None):
    """Render a recording of ``profile`` following ``timeline``."""
    rng = np.random.default_rng(seed)
    rate = timeline.sample_rate_hz
    n = timeline.num_samples()
    C = profile.amplitudes.shape[1]
    env = activation_envelope(profile, timeline, rng)
    # slow effort fluctuation within attempts, stronger for unsteady (stroke) drive
    wobble = 1.0 + profile.effort_jitter * 0.8 * _slow_noise(rng, n, rate, 1.0)
    wobble = np.clip(wobble, 0.2, None)
    peak = profile.amplitudes.max(axis=1, keepdims=True)
    pattern = profile.amplitudes + profile.cocontraction * peak        # (K, C)
    active = env[1:].T * wobble[:, None]
    if profile.tremor_amp > 0:
        phase = rng.uniform(0, 2 * np.pi)
        trem = np.sin(2 * np.pi * profile.tremor_hz * np.arange(n) / rate + phase)
        active = active * (1.0 + profile.tremor_amp * trem)[:, None]
    carrier = _carrier(rng, n, C, rate)
    noise = profile.noise_std * rng.standard_normal((n, C))
    # resting tone swells and eases as unsteadily as the effort does
    sigma = 2.0 * profile.effort_jitter
    tone = np.exp(sigma * _slow_noise(rng, n, rate, 0.5) - 0.5 * sigma ** 2)
    drive = active @ pattern[1:] + tone[:, None] * pattern[0][None, :]
    x = drive * carrier + noise
    return Recording(x.astype(np.float32), timeline.labels(), rate, profile.subject_id,
                     profile.population, set_kind, dict(condition or {}))


# ---------------------------------------------------------------- distribution shifts

SHIFT_DEFAULTS = {
    "drift": {"delta": 0.15, "stage": 1, "tone": 0.08, "wander": 0.3, "tone_channels": None},
    "posture": {"level": 0.3, "channels": (1, 2, 3)},
    "rotation": {"degrees": 15.0},
    "device": {"level": 0.6, "motion_hz": 0.6, "channels": None},
}


def _active_rms(rec):
    act = rec.samples[rec.labels != 0]
    if act.size == 0:
        act = rec.samples
    return float(np.sqrt(np.mean(act.astype(np.float64) ** 2)))


def rotate_channels(samples, degrees, spacing=45.0):
    """Circularly remap channels by ``degrees`` with linear interpolation."""
    shift = degrees / spacing
    whole = int(np.floor(shift))
    frac = shift - whole
    base = np.roll(samples, whole, axis=1)
    if frac == 0.0:
        return np.ascontiguousarray(base)
    nxt = np.roll(samples, whole + 1, axis=1)
    out = (1.0 - frac) * base.astype(np.float64) + frac * nxt.astype(np.float64)
    return out.astype(np.float32)


def _relax_runs(labels):
    runs, start = [], 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[start]:
            runs.append((int(labels[start]), start, i))
            start = i
    return runs


def apply_shift(recording, shift, params=None, seed=0):
    """Return a shifted copy of ``recording``; labels are never changed."""
    if shift not in SHIFTS:
        raise ValueError(f"unknown shift {shift!r}; expected one of {SHIFTS}")
    p = dict(SHIFT_DEFAULTS[shift])
    p.update(params or {})
    rng = np.random.default_rng(seed)
    x = recording.samples.astype(np.float64)
    n, C = x.shape
    rate = recording.sample_rate_hz
    labels = recording.labels
    if shift == "rotation":
        out = rotate_channels(recording.samples, p["degrees"])
    elif shift == "drift":
        stage = float(p["stage"])
        ramp = np.linspace(1.0 + p["delta"] * (stage - 1), 1.0 + p["delta"] * stage, n)
        scale = _active_rms(recording)
        wander = p["wander"] * scale * 0.1 * stage * _slow_noise(rng, n, rate, 0.05)
        chans = p["tone_channels"] if p["tone_channels"] is not None else range(C)
        tone = np.zeros((n, C))
        carrier = _carrier(rng, n, C, rate)
        relax = (labels == 0).astype(np.float64)
        for c in chans:
            tone[:, c] = p["tone"] * stage * scale * relax * carrier[:, c]
        out = x * ramp[:, None] + wander[:, None] + tone
    elif shift == "posture":
        scale = _active_rms(recording)
        carrier = _carrier(rng, n, C, rate)
        add = np.zeros((n, C))
        for c in p["channels"]:
            add[:, c] = p["level"] * scale * carrier[:, c]
        out = x + add
    else:  # device
        scale = _active_rms(recording)
        chans = list(p["channels"]) if p["channels"] is not None else list(range(C))
        add = np.zeros((n, C))
        runs = _relax_runs(labels)
        carrier = _carrier(rng, n, C, rate)
        for i, (cls, a, b) in enumerate(runs):
            if cls != 0 or i + 1 >= len(runs) or runs[i + 1][0] != CUE_CLASS["C"]:
                continue
            t = np.arange(b - a) / rate
            bump = np.sin(np.pi * np.arange(b - a) / (b - a)) ** 2
            motion = 0.5 * (1 - np.cos(2 * np.pi * p["motion_hz"] * t))
            art = p["level"] * scale * bump * (0.6 * motion + 0.4)
            for c in chans:
                add[a:b, c] += art * (0.5 * carrier[a:b, c] + 0.5)
        out = x + add
    cond = dict(recording.condition)
    cond["shift"] = shift
    cond.update({k: (list(v) if isinstance(v, (tuple, range)) else v) for k, v in p.items()
                 if v is not None})
    return Recording(np.asarray(out, dtype=np.float32), labels.copy(), rate, recording.subject_id,
                     recording.population, recording.set_kind, cond)


# ---------------------------------------------------------------- file format

REC_MAGIC = b"EMGR"
REC_VERSION = 1


def write_recording(recording, path):
    C = recording.channels
    header = {
        "subject_id": recording.subject_id,
        "population": recording.population,
        "set_kind": recording.set_kind,
        "condition": recording.condition,
        "sample_rate_hz": int(recording.sample_rate_hz),
        "channels": int(C),
        "num_samples": int(len(recording)),
        "label_map": LABEL_MAP,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    rec = np.zeros(len(recording), dtype=np.dtype([("x", "<f4", (C,)), ("y", "u1")]))
    rec["x"] = recording.samples
    rec["y"] = recording.labels
    body = rec.tobytes()
    with open(path, "wb") as f:
        f.write(REC_MAGIC)
        f.write(struct.pack("<HI", REC_VERSION, len(hbytes)))
        f.write(hbytes)
        f.write(body)
        f.write(struct.pack("<I", zlib.crc32(body)))


def read_recording(path):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 14 or blob[:4] != REC_MAGIC:
        raise FormatError(f"{path}: not a recording file")
    ver, hlen = struct.unpack_from("<HI", blob, 4)
    if ver != REC_VERSION:
        raise FormatError(f"{path}: unsupported version {ver}")
    try:
        header = json.loads(blob[10:10 + hlen])
        C, n = int(header["channels"]), int(header["num_samples"])
        kind = header["set_kind"]
    except (ValueError, KeyError) as e:
        raise FormatError(f"{path}: malformed header ({e})") from None
    if kind not in SET_KINDS:
        raise FormatError(f"{path}: unknown set_kind {kind!r}; valid kinds: {', '.join(SET_KINDS)}")
    body = blob[10 + hlen:-4]
    if len(body) != n * (4 * C + 1):
        raise FormatError(f"{path}: body holds {len(body)} bytes, header declares "
                          f"{n} samples x {C} channels")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError(f"{path}: CRC mismatch")
    rec = np.frombuffer(body, dtype=np.dtype([("x", "<f4", (C,)), ("y", "u1")]))
    labels = rec["y"].astype(np.int64)
    if labels.size and labels.max() >= len(header["label_map"]):
        raise FormatError(f"{path}: label outside label_map")
    return Recording(rec["x"].astype(np.float32), labels, header["sample_rate_hz"], header["subject_id"],
                     header["population"], kind, header.get("condition", {}))


# ---------------------------------------------------------------- benchmark

@dataclass
class StrokeSubject:
    profile: SubjectProfile
    train: list
    test: list


@dataclass
class Benchmark:
    seed: int
    healthy: dict          # subject_id -> [Recording]
    retention: dict        # subject_id -> [Recording]
    stroke: dict           # subject_id -> StrokeSubject
    profiles: dict = field(default_factory=dict)

    def healthy_recordings(self):
        return [r for recs in self.healthy.values() for r in recs]

    def retention_recordings(self):
        return [r for recs in self.retention.values() for r in recs]


STROKE_SEVERITIES = (0.8, 0.5, 0.3)


def _seed(*parts):
    h = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:4], "little")


def stroke_test_sets(profile, seed):
    """The five shifted test sets for one stroke subject, in SET_KINDS order."""
    std = make_set_timeline("standard")
    flex = profile.dominant_channels(2)
    ext = profile.dominant_channels(1)
    out = []
    base = synthesize(profile, std, _seed(seed, profile.subject_id, "drift_mid"), "test_drift_mid")
    out.append(apply_shift(base, "drift", {"stage": 1, "tone_channels": flex}, _seed(seed, "dm")))
    base = synthesize(profile, std, _seed(seed, profile.subject_id, "drift_end"), "test_drift_end")
    out.append(apply_shift(base, "drift", {"stage": 2, "tone_channels": flex}, _seed(seed, "de")))
    base = synthesize(profile, std, _seed(seed, profile.subject_id, "posture"), "test_posture")
    posture_ch = sorted(set(ext[:2]) | {int((ext[0] + 2) % CHANNELS)})
    out.append(apply_shift(base, "posture", {"channels": posture_ch}, _seed(seed, "po")))
    base = synthesize(profile, std, _seed(seed, profile.subject_id, "rotation"), "test_rotation")
    out.append(apply_shift(base, "rotation", {"degrees": 15.0}, _seed(seed, "ro")))
    base = synthesize(profile, make_set_timeline("closing_only"),
                      _seed(seed, profile.subject_id, "device"), "test_device")
    out.append(apply_shift(base, "device", {"channels": flex + ext[:1]}, _seed(seed, "dv")))
    return out


def build_benchmark(seed=42, n_healthy=40, n_retention=2, sets_per_healthy=4,
                    severities=STROKE_SEVERITIES):
    """Healthy pretraining corpus, held-out healthy retention subjects, and stroke subjects."""
    std = make_set_timeline("standard")
    healthy, retention, stroke, profiles = {}, {}, {}, {}
    for i in range(n_healthy + n_retention):
        sid = f"H{i + 1:02d}" if i < n_healthy else f"R{i - n_healthy + 1:02d}"
        prof = sample_subject("healthy", 0.0, _seed(seed, "profile", sid), subject_id=sid)
        profiles[sid] = prof
        n_sets = sets_per_healthy if i < n_healthy else 1
        recs = [synthesize(prof, std, _seed(seed, sid, j), "train") for j in range(n_sets)]
        (healthy if i < n_healthy else retention)[sid] = recs
    for i, sev in enumerate(severities):
        sid = f"S{i + 1}"
        prof = sample_subject("stroke", sev, _seed(seed, "profile", sid), subject_id=sid)
        profiles[sid] = prof
        train = [synthesize(prof, std, _seed(seed, sid, "train", j), "train") for j in range(4)]
        stroke[sid] = StrokeSubject(prof, train, stroke_test_sets(prof, seed))
    return Benchmark(seed, healthy, retention, stroke, profiles)


def write_benchmark(bench, root):
    os.makedirs(root, exist_ok=True)
    index = {"seed": bench.seed, "healthy": sorted(bench.healthy), "retention": sorted(bench.retention),
             "stroke": sorted(bench.stroke)}
    groups = [(sid, {"train": recs}) for sid, recs in bench.healthy.items()]
    groups += [(sid, {"retention": recs}) for sid, recs in bench.retention.items()]
    groups += [(sid, {"train": s.train, "test": s.test}) for sid, s in bench.stroke.items()]
    for sid, roles in groups:
        d = os.path.join(root, sid)
        os.makedirs(d, exist_ok=True)
        manifest = {"subject_id": sid, "population": bench.profiles[sid].population,
                    "severity": bench.profiles[sid].severity}
        for role, recs in roles.items():
            names = []
            for j, rec in enumerate(recs):
                name = f"{role}_{j}_{rec.set_kind}.emgr"
                write_recording(rec, os.path.join(d, name))
                names.append(name)
            manifest[role] = names
        with open(os.path.join(d, "manifest.json"), "w") as f:
            json.dump(manifest, f, indent=1, sort_keys=True)
    with open(os.path.join(root, "manifest.json"), "w") as f:
        json.dump(index, f, indent=1, sort_keys=True)


def read_benchmark(root):
    with open(os.path.join(root, "manifest.json")) as f:
        index = json.load(f)

    def load(sid):
        with open(os.path.join(root, sid, "manifest.json")) as f:
            m = json.load(f)
        roles = {role: [read_recording(os.path.join(root, sid, n)) for n in m[role]]
                 for role in ("train", "test", "retention") if role in m}
        return m, roles

    healthy, retention, stroke, profiles = {}, {}, {}, {}
    for sid in index["healthy"]:
        healthy[sid] = load(sid)[1]["train"]
    for sid in index["retention"]:
        retention[sid] = load(sid)[1]["retention"]
    for sid in index["stroke"]:
        m, roles = load(sid)
        stroke[sid] = StrokeSubject(None, roles["train"], roles["test"])
    return Benchmark(index["seed"], healthy, retention, stroke, profiles)


def tree_checksum(root):
    """SHA-256 over every file's relative path and bytes, in sorted order."""
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            path = os.path.join(dirpath, name)
            h.update(os.path.relpath(path, root).encode())
            with open(path, "rb") as f:
                h.update(f.read())
    return h.hexdigest()
