"""Adaptation variants for moving a healthy-pretrained model to a new subject.

Five variants share one training loop and differ only in where they start
and which tensors may change:

=========  ===================  ==========================================
variant    start                trainable
=========  ===================  ==========================================
zero_shot  healthy checkpoint   nothing
scratch    random init          every parameter
head_only  healthy checkpoint   ``head_intent.weight``, ``head_intent.bias``
lora       healthy checkpoint   low-rank pairs on every linear weight
full       healthy checkpoint   every parameter
=========  ===================  ==========================================

A LoRA pair on a weight stored as ``(in, out)`` (so ``y = x @ W``) holds
``A: (r, in)`` and ``B: (out, r)``; the effective stored weight is
``W + (alpha / r) * (B @ A).T``.
"""
from __future__ import annotations

import fnmatch
import logging
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .model import (
    HEAD_PARAMS,
    CheckpointError,
    Model,
    ModelConfig,
    NormStats,
    copy_params,
    init_params,
    linear_weight_names,
    make_batch,
    pretrain_loss,
    read_container,
    write_container,
)
from .numerics import Tensor

log = logging.getLogger(__name__)

VARIANTS = ("zero_shot", "scratch", "head_only", "lora", "full")


class UnsupportedOperation(RuntimeError):
    pass


@dataclass
class AdaptationSpec:
    variant: str
    lora_rank: int = 4
    lora_alpha: float | None = None
    lora_targets: tuple | None = None   # fnmatch patterns; None = every linear weight
    init_source: str | None = None
    seed: int = 0

    def __post_init__(self):
        self.variant = self.variant.replace("-", "_")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.lora_rank < 1:
            raise ValueError("lora_rank must be >= 1")

    @property
    def alpha(self):
        return float(2 * self.lora_rank if self.lora_alpha is None else self.lora_alpha)

    @property
    def scale(self):
        return self.alpha / self.lora_rank


@dataclass
class LoraPair:
    A: Tensor       # (r, in_dim)
    B: Tensor       # (out_dim, r)
    base_name: str

    @property
    def rank(self):
        return self.A.shape[0]

    @property
    def n_params(self):
        return self.A.data.size + self.B.data.size


def lora_effective_weight(base, pair, alpha, r):
    """``base + (alpha / r) * B @ A`` for ``base`` in (out, in) layout; ``base`` is not modified."""
    W = base.data if isinstance(base, Tensor) else np.asarray(base, dtype=np.float32)
    A = pair.A.data if isinstance(pair.A, Tensor) else np.asarray(pair.A)
    B = pair.B.data if isinstance(pair.B, Tensor) else np.asarray(pair.B)
    if A.shape[1] != W.shape[1] or B.shape[0] != W.shape[0] or A.shape[0] != B.shape[1]:
        raise nx.DimensionError(f"LoRA pair A {A.shape}, B {B.shape} does not fit weight {W.shape}")
    if not np.any(B) or not np.any(A):
        return W.copy()
    delta = (B.astype(np.float64) @ A.astype(np.float64)) * (alpha / r)
    return (W.astype(np.float64) + delta).astype(np.float32)


def lora_target_names(config, targets=None):
    names = linear_weight_names(config)
    if targets is None:
        return names
    picked = [n for n in names if any(fnmatch.fnmatchcase(n, pat) for pat in targets)]
    if not picked:
        raise ValueError(f"LoRA targets {targets} match no linear weight")
    return picked


def init_lora(params, names, rank, seed, strict):
    """Attach pairs with A ~ N(0, 1/r) and B = 0.

    With ``strict`` a rank above a target's smaller dimension is an error;
    otherwise that target's rank is capped at its smaller dimension.
    """
    rng = np.random.default_rng(seed)
    pairs = OrderedDict()
    for name in names:
        d_in, d_out = params[name].shape
        r = rank
        if rank > min(d_in, d_out):
            if strict:
                raise ValueError(f"LoRA rank {rank} exceeds the smaller dimension of {name} {(d_in, d_out)}")
            r = min(d_in, d_out)
        A = rng.normal(0.0, 1.0 / np.sqrt(rank), (r, d_in)).astype(np.float32)
        pairs[name] = LoraPair(Tensor(A), Tensor(np.zeros((d_out, r), np.float32)), name)
    return pairs


def lora_param_count(pairs):
    return sum(p.n_params for p in pairs.values())


def _trainable_names(variant, params, lora):
    if variant == "zero_shot":
        return []
    if variant in ("scratch", "full"):
        return list(params)
    if variant == "head_only":
        return list(HEAD_PARAMS)
    return [f"lora:{n}.{ab}" for n in lora for ab in ("A", "B")]


def build_variant(spec, healthy=None, config=None):
    """Return ``(model, mask)`` for ``spec``.

    ``healthy`` is a :class:`Model` or a checkpoint path; it is required for
    every variant except ``scratch``. ``mask`` maps each tensor name
    (parameters, plus ``lora:<weight>.A/B`` for adapters) to trainability.
    """
    from .model import load_checkpoint

    if isinstance(healthy, str):
        healthy = load_checkpoint(healthy)
    elif healthy is None and spec.init_source:
        healthy = load_checkpoint(spec.init_source)
    if healthy is None and spec.variant != "scratch":
        raise ValueError(f"variant {spec.variant} needs a healthy checkpoint")
    if spec.variant == "scratch":
        cfg = config or (healthy.config if healthy is not None else ModelConfig())
        model = Model(init_params(cfg, spec.seed), cfg, NormStats.identity(cfg.channels))
    else:
        model = Model(copy_params(healthy.params), healthy.config,
                      NormStats(healthy.norm.mean.copy(), healthy.norm.std.copy()))
    if spec.variant == "lora":
        names = lora_target_names(model.config, spec.lora_targets)
        model.lora = init_lora(model.params, names, spec.lora_rank, spec.seed,
                               strict=spec.lora_targets is not None)
        model.lora_scale = spec.scale
    trainable = set(_trainable_names(spec.variant, model.params, model.lora))
    mask = OrderedDict((n, n in trainable) for n in model.params)
    for n in model.lora:
        mask[f"lora:{n}.A"] = f"lora:{n}.A" in trainable
        mask[f"lora:{n}.B"] = f"lora:{n}.B" in trainable
    return model, mask


def tensor_table(model):
    """Every tensor of ``model`` by mask name."""
    table = OrderedDict(model.params)
    for n, pair in model.lora.items():
        table[f"lora:{n}.A"] = pair.A
        table[f"lora:{n}.B"] = pair.B
    return table


def merge_lora(model):
    """Plain model with every adapter folded into its base weight."""
    params = copy_params(model.params)
    for name, pair in model.lora.items():
        W = params[name].data
        merged = lora_effective_weight(W.T, pair, model.lora_scale * pair.rank, pair.rank)
        params[name] = Tensor(np.ascontiguousarray(merged.T))
    return Model(params, model.config, NormStats(model.norm.mean.copy(), model.norm.std.copy()))


# ---------------------------------------------------------------- adapter sidecar

ADAPTER_MAGIC = b"EMGA"
ADAPTER_VERSION = 1


def save_adapters(model, path, base_crc):
    header = {"base_crc": int(base_crc), "alpha_over_r": model.lora_scale,
              "ranks": {n: p.rank for n, p in model.lora.items()}, "targets": list(model.lora)}
    arrays = []
    for n, p in model.lora.items():
        arrays += [(f"{n}.A", p.A.data), (f"{n}.B", p.B.data)]
    write_container(path, ADAPTER_MAGIC, ADAPTER_VERSION, header, arrays)


def load_adapters(model, path, base_crc):
    """Attach adapters from ``path`` to ``model`` after checking the base checkpoint CRC."""
    header, arrays, _ = read_container(path, ADAPTER_MAGIC, ADAPTER_VERSION)
    if header["base_crc"] != int(base_crc):
        raise CheckpointError(f"{path}: adapters were trained on a different base checkpoint")
    pairs = OrderedDict()
    for n in header["targets"]:
        if n not in model.params:
            raise CheckpointError(f"{path}: adapter target {n} not in model")
        pairs[n] = LoraPair(Tensor(arrays[f"{n}.A"]), Tensor(arrays[f"{n}.B"]), n)
        if pairs[n].A.shape[1] != model.params[n].shape[0] or pairs[n].B.shape[0] != model.params[n].shape[1]:
            raise CheckpointError(f"{path}: adapter for {n} does not match weight shape")
    model.lora = pairs
    model.lora_scale = float(header["alpha_over_r"])
    return model


# ---------------------------------------------------------------- training

@dataclass
class TrainHyper:
    lr: float = 1e-3
    weight_decay: float = 0.0
    epochs: int = 10
    batch_size: int = 64
    lambda_recon: float = 1.0
    stride: int = 50
    seed: int = 0
    probe_windows: int = 64

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def segment_windows(segments, norm, window_len, stride):
    """Slice normalized ``(samples, labels)`` segments into training windows."""
    xs, ys = [], []
    for samples, labels in segments:
        x = norm.apply(samples)
        n = len(x)
        if n < window_len:
            continue
        starts = np.arange(0, n - window_len + 1, stride)
        idx = starts[:, None] + np.arange(window_len)[None, :]
        xs.append(x[idx])
        ys.append(np.asarray(labels)[idx])
    if not xs:
        raise ValueError("no segment is long enough for one window")
    return np.concatenate(xs), np.concatenate(ys)


@dataclass
class TrainResult:
    model: Model
    loss_trace: list = field(default_factory=list)   # fixed-probe loss after each epoch
    epoch_loss: list = field(default_factory=list)   # mean minibatch loss per epoch
    steps: int = 0


def train(model, mask, windows, hyper, on_epoch=None):
    """Adam over the masked tensors of ``model`` on ``(emg, labels)`` windows.

    ``on_epoch(epoch, model)`` is called after every epoch (1-based).
    Tensor data arrays are replaced, never written in place, so frozen
    tensors stay bitwise identical.
    """
    emg, labels = windows
    cfg = model.config
    table = tensor_table(model)
    names = [n for n, on in mask.items() if on]
    for n, t in table.items():
        t.requires_grad = n in names
        t.grad = None
    rng = np.random.default_rng(hyper.seed)
    probe_rng = np.random.default_rng(hyper.seed + 7919)
    n_probe = min(hyper.probe_windows, len(emg))
    probe_idx = np.sort(probe_rng.permutation(len(emg))[:n_probe])
    probe = make_batch(emg[probe_idx], labels[probe_idx], cfg, probe_rng)
    if not probe.label_mask.any() and not probe.emg_mask.any():
        probe.label_mask[:] = True

    def probe_loss():
        with nx.no_grad():
            return float(pretrain_loss(model.params, cfg, probe, hyper.lambda_recon,
                                       lora=model.lora, lora_scale=model.lora_scale).item())

    state = nx.AdamState()
    result = TrainResult(model)
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(len(emg))
        losses = []
        for s in range(0, len(order), hyper.batch_size):
            idx = np.sort(order[s:s + hyper.batch_size])
            batch = make_batch(emg[idx], labels[idx], cfg, rng)
            if not batch.label_mask.any() and not batch.emg_mask.any():
                batch.label_mask[:] = True
            if not names:
                continue
            loss = pretrain_loss(model.params, cfg, batch, hyper.lambda_recon,
                                 lora=model.lora, lora_scale=model.lora_scale, rng=rng)
            loss.backward()
            grads = {n: (table[n].grad if table[n].grad is not None else np.zeros(table[n].shape, np.float32))
                     for n in names}
            nx.adam_step(table, grads, state, hyper.lr, weight_decay=hyper.weight_decay)
            for n in names:
                table[n].grad = None
            losses.append(loss.item())
            result.steps += 1
        result.epoch_loss.append(float(np.mean(losses)) if losses else float("nan"))
        result.loss_trace.append(probe_loss())
        if on_epoch is not None:
            on_epoch(epoch, model)
    for t in table.values():
        t.requires_grad = False
    return result


def finetune(model, mask, segments, hyper, variant=None, refit_norm=True, on_epoch=None):
    """Train ``model`` on labelled ``(samples, labels)`` segments.

    Normalization statistics are refit on the segments unless
    ``refit_norm`` is False.
    """
    if variant == "zero_shot":
        raise UnsupportedOperation("zero-shot models are evaluated frozen; they cannot be fine-tuned")
    if refit_norm:
        model.norm = NormStats.fit([s for s, _ in segments])
    windows = segment_windows(segments, model.norm, model.config.window_len, hyper.stride)
    return train(model, mask, windows, hyper, on_epoch=on_epoch)


def tensor_digests(model, names=None):
    """CRC32 of every tensor's bytes, for freeze-integrity checks."""
    table = tensor_table(model)
    return {n: zlib.crc32(table[n].data.tobytes()) for n in (names or table)}
