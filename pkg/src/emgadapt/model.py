"""Encoder-only transformer over EMG patches and intent-label tokens.

Each window of ``T`` samples is cut into ``T / patch_len`` patches. A patch
token is the sum of a linear embedding of the flattened EMG patch, an
embedding of the patch's intent label (or the mask token ``K``), and a
learned positional embedding. Two linear heads read the encoder output:
per-patch intent logits and a reconstruction of the EMG patch.
"""
from __future__ import annotations

import dataclasses
import json
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 8
    window_len: int = 200
    num_classes: int = 3
    patch_len: int = 10
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    ff_dim: int = 64
    dropout: float = 0.1
    emg_mask_ratio: float = 0.15
    label_mask_ratio: float = 0.5
    # share of training windows whose labels are masked entirely (the inference condition)
    full_label_mask_prob: float = 0.5
    sample_rate_hz: int = 200

    def __post_init__(self):
        if self.window_len % self.patch_len:
            raise ConfigError(f"window_len {self.window_len} not divisible by patch_len {self.patch_len}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if self.channels < 1 or self.patch_len < 1:
            raise ConfigError("channels and patch_len must be positive")
        for name in ("dropout", "emg_mask_ratio", "label_mask_ratio", "full_label_mask_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} outside [0, 1]")

    @property
    def n_patches(self):
        return self.window_len // self.patch_len

    @property
    def patch_dim(self):
        return self.patch_len * self.channels

    @property
    def mask_token(self):
        return self.num_classes

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class NormStats:
    """Per-channel z-normalization statistics."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, channels):
        return cls(np.zeros(channels, np.float32), np.ones(channels, np.float32))

    @classmethod
    def fit(cls, arrays):
        x = np.concatenate([np.asarray(a, np.float64) for a in arrays], axis=0)
        std = x.std(axis=0)
        std[std < 1e-6] = 1.0
        return cls(x.mean(axis=0).astype(np.float32), std.astype(np.float32))

    def apply(self, emg):
        return ((np.asarray(emg, np.float32) - self.mean) / self.std).astype(np.float32)


@dataclass
class Model:
    """Everything needed to run inference: weights, config, preprocessing, adapters."""

    params: "OrderedDict[str, Tensor]"
    config: ModelConfig
    norm: NormStats
    lora: dict = field(default_factory=dict)
    lora_scale: float = 1.0


# ---------------------------------------------------------------- parameters

def param_shapes(config):
    """Ordered name -> shape map fully determined by ``config``."""
    D, K, P = config.d_model, config.num_classes, config.patch_dim
    shapes = OrderedDict()
    shapes["emg_embed.weight"] = (P, D)
    shapes["emg_embed.bias"] = (D,)
    shapes["label_embed"] = (K + 1, D)
    shapes["pos_embed"] = (config.n_patches, D)
    for i in range(config.n_layers):
        pre = f"layers.{i}."
        shapes[pre + "ln1.gain"] = (D,)
        shapes[pre + "ln1.bias"] = (D,)
        for proj in ("wq", "wk", "wv", "wo"):
            shapes[pre + f"attn.{proj}.weight"] = (D, D)
            shapes[pre + f"attn.{proj}.bias"] = (D,)
        shapes[pre + "ln2.gain"] = (D,)
        shapes[pre + "ln2.bias"] = (D,)
        shapes[pre + "ff1.weight"] = (D, config.ff_dim)
        shapes[pre + "ff1.bias"] = (config.ff_dim,)
        shapes[pre + "ff2.weight"] = (config.ff_dim, D)
        shapes[pre + "ff2.bias"] = (D,)
    shapes["final_norm.gain"] = (D,)
    shapes["final_norm.bias"] = (D,)
    shapes["head_intent.weight"] = (D, K)
    shapes["head_intent.bias"] = (K,)
    shapes["head_recon.weight"] = (D, P)
    shapes["head_recon.bias"] = (P,)
    return shapes


HEAD_PARAMS = ("head_intent.weight", "head_intent.bias")


def is_backbone(name):
    return not name.startswith(("head_intent.", "head_recon."))


def linear_weight_names(config):
    return [n for n, s in param_shapes(config).items() if n.endswith(".weight") and len(s) == 2]


def init_params(config, seed=0):
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            arr = np.ones(shape)
        elif name.endswith(".bias"):
            arr = np.zeros(shape)
        elif name in ("label_embed", "pos_embed"):
            arr = rng.normal(0.0, 0.1, shape)
        else:
            arr = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
        params[name] = Tensor(arr.astype(np.float32))
    return params


def copy_params(params, requires_grad=False):
    return OrderedDict((n, Tensor(t.data.copy(), requires_grad=requires_grad)) for n, t in params.items())


def check_params(params, config):
    expected = param_shapes(config)
    missing = [n for n in expected if n not in params]
    if missing:
        raise CheckpointError(f"missing tensor {missing[0]}")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise CheckpointError(f"tensor {name} has shape {tuple(params[name].shape)}, config expects {shape}")
    extra = [n for n in params if n not in expected]
    if extra:
        raise CheckpointError(f"unexpected tensor {extra[0]}")


# ---------------------------------------------------------------- batches

@dataclass
class WindowBatch:
    emg: np.ndarray          # (B, T, C) normalized
    labels: np.ndarray       # (B, T) per-timestep labels, patch-aligned
    emg_mask: np.ndarray     # (B, Tp) True = EMG patch hidden
    label_mask: np.ndarray   # (B, Tp) True = label replaced by mask token


def patch_majority(labels, patch_len, num_classes):
    """Majority label per patch, ties broken toward the lower class."""
    lab = np.asarray(labels, dtype=np.int64)
    B, T = lab.shape
    lab = lab.reshape(B, T // patch_len, patch_len)
    counts = np.stack([(lab == k).sum(axis=-1) for k in range(num_classes)], axis=-1)
    return counts.argmax(axis=-1)


def make_batch(emg, labels, config, rng=None, emg_mask=None, label_mask=None):
    """Assemble a WindowBatch, patch-aligning labels and sampling masks.

    With ``rng=None`` and no explicit masks the batch is in inference form:
    no EMG masked, every label masked.
    """
    emg = np.asarray(emg, dtype=np.float32)
    if emg.ndim != 3 or emg.shape[1:] != (config.window_len, config.channels):
        raise nx.DimensionError(
            f"emg batch {emg.shape} does not match (B, {config.window_len}, {config.channels})")
    B, Tp = emg.shape[0], config.n_patches
    if labels is None:
        plab = np.zeros((B, Tp), dtype=np.int64)
    else:
        labels = np.asarray(labels)
        if labels.shape != emg.shape[:2]:
            raise nx.DimensionError(f"labels {labels.shape} do not match emg {emg.shape[:2]}")
        if labels.size and (labels.min() < 0 or labels.max() >= config.num_classes):
            raise nx.LabelError("labels outside [0, K)")
        plab = patch_majority(labels, config.patch_len, config.num_classes)
    if emg_mask is None:
        emg_mask = (rng.random((B, Tp)) < config.emg_mask_ratio) if rng is not None else np.zeros((B, Tp), bool)
    if label_mask is None:
        if rng is None:
            label_mask = np.ones((B, Tp), bool)
        else:
            label_mask = rng.random((B, Tp)) < config.label_mask_ratio
            full = rng.random(B) < config.full_label_mask_prob
            label_mask[full] = True
    return WindowBatch(emg, np.repeat(plab, config.patch_len, axis=1),
                       np.asarray(emg_mask, bool), np.asarray(label_mask, bool))


# ---------------------------------------------------------------- forward

def _linear(x, params, name, lora, lora_scale):
    y = nx.add(nx.matmul(x, params[name + ".weight"]), params[name + ".bias"])
    pair = lora.get(name + ".weight") if lora else None
    if pair is not None:
        low = nx.matmul(nx.matmul(x, nx.transpose(pair.A)), nx.transpose(pair.B))
        y = nx.add(y, nx.mul(low, lora_scale))
    return y


def _stage(where, fn, *args):
    try:
        return fn(*args)
    except nx.NonFiniteError as e:
        raise nx.NonFiniteError(e.op, where=where) from None


def forward(params, config, batch, lora=None, lora_scale=1.0, rng=None):
    """Return ``(intent_logits (B, Tp, K), recon (B, Tp, patch_len*C))``.

    ``rng`` switches on dropout (training mode).
    """
    emg = np.asarray(batch.emg, dtype=np.float32)
    B = emg.shape[0]
    Tp, D, H = config.n_patches, config.d_model, config.n_heads
    if emg.shape[1:] != (config.window_len, config.channels):
        raise nx.DimensionError(f"emg batch {emg.shape} does not match config")
    patches = emg.reshape(B, Tp, config.patch_dim).copy()
    patches[batch.emg_mask] = 0.0
    tokens = patch_majority(batch.labels, config.patch_len, config.num_classes)
    tokens[batch.label_mask] = config.mask_token
    p_drop = config.dropout if rng is not None else 0.0

    def embed():
        x = _linear(Tensor(patches), params, "emg_embed", lora, lora_scale)
        x = nx.add(x, nx.take_rows(params["label_embed"], tokens))
        x = nx.add(x, params["pos_embed"])
        return nx.dropout(x, p_drop, rng)

    x = _stage("embedding", embed)
    for i in range(config.n_layers):
        pre = f"layers.{i}."

        def attn_block(x=x, pre=pre):
            h = nx.layer_norm(x, params[pre + "ln1.gain"], params[pre + "ln1.bias"])
            heads = []
            for proj in ("wq", "wk", "wv"):
                t = _linear(h, params, pre + "attn." + proj, lora, lora_scale)
                t = nx.permute(nx.reshape(t, (B, Tp, H, D // H)), (0, 2, 1, 3))
                heads.append(t)
            a = nx.attention(*heads)
            a = nx.reshape(nx.permute(a, (0, 2, 1, 3)), (B, Tp, D))
            a = _linear(a, params, pre + "attn.wo", lora, lora_scale)
            return nx.add(x, nx.dropout(a, p_drop, rng))

        x = _stage(f"layer {i} attention", attn_block)

        def ff_block(x=x, pre=pre):
            h = nx.layer_norm(x, params[pre + "ln2.gain"], params[pre + "ln2.bias"])
            h = nx.gelu(_linear(h, params, pre + "ff1", lora, lora_scale))
            h = _linear(h, params, pre + "ff2", lora, lora_scale)
            return nx.add(x, nx.dropout(h, p_drop, rng))

        x = _stage(f"layer {i} feedforward", ff_block)

    def heads():
        h = nx.layer_norm(x, params["final_norm.gain"], params["final_norm.bias"])
        return (_linear(h, params, "head_intent", lora, lora_scale),
                _linear(h, params, "head_recon", lora, lora_scale))

    return _stage("heads", heads)


def pretrain_loss(params, config, batch, lambda_recon=1.0, lora=None, lora_scale=1.0, rng=None):
    """Masked-label cross-entropy plus ``lambda_recon`` times masked-patch MSE."""
    if not batch.label_mask.any() and not batch.emg_mask.any():
        raise ConfigError("both label and EMG masks are empty; nothing to reconstruct")
    logits, recon = forward(params, config, batch, lora=lora, lora_scale=lora_scale, rng=rng)
    plab = patch_majority(batch.labels, config.patch_len, config.num_classes)
    target_labels = np.where(batch.label_mask, plab, -100)
    loss = nx.cross_entropy(logits, target_labels, ignore_index=-100)
    if lambda_recon != 0 and batch.emg_mask.any():
        B = batch.emg.shape[0]
        target = np.asarray(batch.emg, np.float32).reshape(B, config.n_patches, config.patch_dim)
        loss = nx.add(loss, nx.mul(nx.mse(recon, target, mask=batch.emg_mask), float(lambda_recon)))
    return loss


def patch_logits(params, config, emg, lora=None, lora_scale=1.0):
    """Inference logits (B, Tp, K) for a batch of normalized windows, labels fully masked."""
    emg = np.asarray(emg, dtype=np.float32)
    if emg.ndim != 3 or emg.shape[2] != config.channels:
        raise nx.DimensionError(f"expected (B, T, {config.channels}) windows, got {emg.shape}")
    batch = make_batch(emg, None, config)
    with nx.no_grad():
        logits, _ = forward(params, config, batch, lora=lora, lora_scale=lora_scale)
    return logits.data


def predict_window(params, config, emg, lora=None, lora_scale=1.0):
    """Per-timestep labels and posteriors for one normalized (T, C) window."""
    emg = np.asarray(emg, dtype=np.float32)
    if emg.ndim != 2 or emg.shape[1] != config.channels:
        raise nx.DimensionError(f"expected ({config.window_len}, {config.channels}) window, got {emg.shape}")
    if not np.isfinite(emg).all():
        raise nx.NonFiniteError("input", where="predict_window")
    logits = patch_logits(params, config, emg[None], lora=lora, lora_scale=lora_scale)[0]
    z = logits.astype(np.float64)
    post = np.exp(z - z.max(axis=-1, keepdims=True))
    post /= post.sum(axis=-1, keepdims=True)
    post = np.repeat(post, config.patch_len, axis=0).astype(np.float32)
    labels = np.repeat(logits.argmax(axis=-1), config.patch_len)
    return labels, post


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"EMGM"
CKPT_VERSION = 1


def _pack_tensors(names_arrays):
    manifest, chunks, offset = [], [], 0
    for name, arr in names_arrays:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    return manifest, b"".join(chunks)


def write_container(path, magic, version, header, names_arrays):
    manifest, body = _pack_tensors(names_arrays)
    header = dict(header, tensors=manifest)
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<HI", version, len(hbytes)))
        f.write(hbytes)
        f.write(body)
        f.write(struct.pack("<I", zlib.crc32(body)))
    return zlib.crc32(body)


def read_container(path, magic, version):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 10 or blob[:4] != magic:
        raise CheckpointError(f"{path}: bad magic, expected {magic!r}")
    ver, hlen = struct.unpack_from("<HI", blob, 4)
    if ver != version:
        raise CheckpointError(f"{path}: format version {ver}, expected {version}")
    start = 10 + hlen
    if len(blob) < start + 4:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[10:start])
    except ValueError as e:
        raise CheckpointError(f"{path}: malformed header ({e})") from None
    body = blob[start:-4]
    (crc,) = struct.unpack("<I", blob[-4:])
    expected = sum(4 * int(np.prod(t["shape"])) for t in header["tensors"])
    if len(body) != expected:
        raise CheckpointError(f"{path}: truncated tensor section ({len(body)} of {expected} bytes)")
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch in tensor section")
    arrays = OrderedDict()
    for t in header["tensors"]:
        n = int(np.prod(t["shape"]))
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=t["offset"])
        arrays[t["name"]] = arr.reshape(t["shape"]).astype(np.float32)
    return header, arrays, crc


def save_checkpoint(model, path):
    """Write ``model`` (weights, config, normalization stats) to ``path``; returns the tensor CRC."""
    header = {
        "config": model.config.to_dict(),
        "norm": {"mean": [float(v) for v in model.norm.mean], "std": [float(v) for v in model.norm.std]},
    }
    return write_container(path, CKPT_MAGIC, CKPT_VERSION, header,
                           [(n, t.data) for n, t in model.params.items()])


def load_checkpoint(path, expect_config=None):
    header, arrays, _ = read_container(path, CKPT_MAGIC, CKPT_VERSION)
    config = ModelConfig.from_dict(header["config"])
    params = OrderedDict((n, Tensor(a)) for n, a in arrays.items())
    check_params(params, expect_config or config)
    norm = NormStats(np.asarray(header["norm"]["mean"], np.float32),
                     np.asarray(header["norm"]["std"], np.float32))
    return Model(params, expect_config or config, norm)


def checkpoint_crc(path):
    return read_container(path, CKPT_MAGIC, CKPT_VERSION)[2]
