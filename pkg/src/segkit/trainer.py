"""AdamW training loop, learning-rate schedule, and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import backbone as bb
from . import data as D
from . import decoder as dec
from . import tensor as T
from .model import SegRet, config_digest
from .tensor import Tensor

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"SEGKIT\x00\x01"


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class CheckpointMismatch(ValueError):
    """A checkpoint does not belong to the requested configuration."""


@dataclass
class TrainConfig:
    iterations: int = 300
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "poly"  # or "constant"
    warmup_iters: int = 10
    poly_power: float = 1.0
    min_lr: float = 0.0
    grad_clip: Optional[float] = None
    augment: bool = False
    crop_size: Optional[List[int]] = None
    dtype: str = "f32"
    accuracy_gate: Optional[float] = None
    stop_at_gate: bool = False

    def __post_init__(self):
        if self.schedule not in ("poly", "constant"):
            raise ValueError(f"train.schedule must be 'poly' or 'constant', got {self.schedule!r}")
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("train.iterations must be >= 0 and train.batch_size >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "OptimState":
        return cls(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)

    def hyper(self) -> dict:
        return {k: getattr(self, k) for k in ("lr", "beta1", "beta2", "eps", "weight_decay", "t")}


def adamw_step(params: Dict[str, Tensor], state: OptimState, lr: Optional[float] = None) -> None:
    """One decoupled-weight-decay Adam update of every parameter that has a gradient.

    ``p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p``
    """
    lr = state.lr if lr is None else lr
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        if p.grad is None:
            logger.warning("parameter %s has no gradient; skipped", name)
            continue
        g = p.grad
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data = (p.data - lr * update - lr * state.weight_decay * p.data).astype(p.dtype, copy=False)


def scheduled_lr(cfg: TrainConfig, it: int, total: int) -> float:
    """Learning rate for 0-based iteration ``it``: linear warmup then poly decay."""
    if cfg.schedule == "constant":
        lr = cfg.lr
    else:
        frac = min(it / max(total, 1), 1.0)
        lr = (cfg.lr - cfg.min_lr) * (1.0 - frac) ** cfg.poly_power + cfg.min_lr
    if cfg.warmup_iters and it < cfg.warmup_iters:
        lr *= (it + 1) / cfg.warmup_iters
    return lr


def clip_grad_norm(params: Dict[str, Tensor], max_norm: float) -> float:
    sq = sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params.values() if p.grad is not None)
    norm = math.sqrt(sq)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    optim: OptimState
    rng: np.random.Generator
    iteration: int = 0
    log: List[dict] = field(default_factory=list)
    gate_iteration: Optional[int] = None


def new_state(cfg: TrainConfig, seed: int) -> TrainState:
    return TrainState(OptimState.from_config(cfg), np.random.default_rng(seed))


def _batch(dataset, cfg: TrainConfig, rng: np.random.Generator, mean, std, dtype):
    n = len(dataset)
    if cfg.batch_size >= n:
        idx = rng.permutation(n)
    else:
        idx = rng.choice(n, size=cfg.batch_size, replace=False)
    imgs, masks = [], []
    for i in idx:
        s = dataset[int(i)]
        if cfg.augment:
            s = D.random_flip(s, rng)
            if cfg.crop_size:
                s = D.random_crop(s, cfg.crop_size[0], cfg.crop_size[1], rng)
        imgs.append(D.normalize(s.image, mean, std))
        masks.append(s.mask)
    return np.stack(imgs).astype(dtype), np.stack(masks)


def pixel_accuracy_of(logits: np.ndarray, target: np.ndarray, ignore_index: int) -> float:
    valid = target != ignore_index
    pred = logits.argmax(axis=-3)
    return float(((pred == target) & valid).sum() / max(int(valid.sum()), 1))


def train_loop(
    model: SegRet,
    dataset: Sequence[D.SegmentationSample],
    cfg: TrainConfig,
    state: Optional[TrainState] = None,
    iterations: Optional[int] = None,
    seed: int = 0,
    ignore_index: int = D.IGNORE_INDEX,
    mean=(0.0, 0.0, 0.0),
    std=(1.0, 1.0, 1.0),
    on_record: Optional[Callable[[dict], None]] = None,
) -> TrainState:
    """Run ``iterations`` steps (default ``cfg.iterations``) from ``state``.

    The schedule horizon is always ``cfg.iterations`` so a run split across
    calls follows the same curve as an uninterrupted one.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    state = state or new_state(cfg, seed)
    stop = cfg.iterations if iterations is None else min(state.iteration + iterations, cfg.iterations)
    dtype = model.dtype
    while state.iteration < stop:
        it = state.iteration
        lr = scheduled_lr(cfg, it, cfg.iterations)
        images, masks = _batch(dataset, cfg, state.rng, mean, std, dtype)
        model.zero_grad()
        logits = model(Tensor._wrap(images))
        loss = T.cross_entropy(logits, masks, ignore_index=ignore_index)
        loss_val = float(loss.data)
        if not math.isfinite(loss_val):
            raise DivergenceError(f"loss became {loss_val} at iteration {it}")
        acc = pixel_accuracy_of(logits.data, masks, ignore_index)
        T.backward(loss)
        if cfg.grad_clip:
            clip_grad_norm(model.params, cfg.grad_clip)
        adamw_step(model.params, state.optim, lr)
        record = {"iter": it, "loss": loss_val, "lr": lr, "pixel_acc_estimate": acc}
        state.log.append(record)
        state.iteration += 1
        if on_record:
            on_record(record)
        if cfg.accuracy_gate is not None and state.gate_iteration is None and acc >= cfg.accuracy_gate:
            state.gate_iteration = it
            logger.info("accuracy gate %.3f reached at iteration %d", cfg.accuracy_gate, it)
            if cfg.stop_at_gate:
                break
    return state


def write_loss_csv(records: Sequence[dict], path) -> None:
    with open(path, "w") as fh:
        fh.write("iter,loss,lr,pixel_acc_estimate\n")
        for r in records:
            fh.write(f"{r['iter']},{r['loss']:.9g},{r['lr']:.9g},{r['pixel_acc_estimate']:.6f}\n")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    model: SegRet
    state: TrainState
    manifest: dict


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    bitgen = getattr(np.random, state["bit_generator"])()
    bitgen.state = state
    return np.random.Generator(bitgen)


def checkpoint_save(model: SegRet, state: TrainState, path, extra: Optional[dict] = None) -> Path:
    """Write params and optimizer moments as one file.

    Layout: magic, ``u64`` manifest length, JSON manifest, then every tensor in
    manifest order using the tensor serialization format.
    """
    names = list(model.params)
    manifest = {
        "format": 1,
        "digest": model.digest,
        "config": {"backbone": model.backbone.to_dict(), "decoder": model.decoder.to_dict()},
        "iteration": state.iteration,
        "gate_iteration": state.gate_iteration,
        "optim": state.optim.hyper(),
        "rng": _rng_state(state.rng),
        "params": names,
        "moments": [n for n in names if n in state.optim.m],
        "extra": extra or {},
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    chunks = [CKPT_MAGIC, struct.pack("<Q", len(head)), head]
    for n in names:
        chunks.append(T.tensor_to_bytes(model.params[n]))
    for n in manifest["moments"]:
        chunks.append(T.tensor_to_bytes(Tensor._wrap(state.optim.m[n])))
        chunks.append(T.tensor_to_bytes(Tensor._wrap(state.optim.v[n])))
    path = Path(path)
    path.write_bytes(b"".join(chunks))
    return path


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def config_differences(a: dict, b: dict) -> List[str]:
    fa, fb = _flatten(a), _flatten(b)
    return sorted(k for k in set(fa) | set(fb) if fa.get(k) != fb.get(k))


def checkpoint_load(path, expect_backbone=None, expect_decoder=None) -> Checkpoint:
    """Read a checkpoint; refuse it if it was written for a different model config."""
    buf = Path(path).read_bytes()
    if not buf.startswith(CKPT_MAGIC):
        raise CheckpointMismatch(f"{path} is not a segkit checkpoint")
    off = len(CKPT_MAGIC)
    (hlen,) = struct.unpack_from("<Q", buf, off)
    off += 8
    manifest = json.loads(buf[off : off + hlen].decode())
    off += hlen
    cfg = manifest["config"]
    bcfg = bb.BackboneConfig(**cfg["backbone"])
    dcfg = dec.DecoderConfig(**cfg["decoder"])
    if config_digest(bcfg, dcfg) != manifest["digest"]:
        raise CheckpointMismatch(f"{path}: stored digest does not match its own config")
    if expect_backbone is not None or expect_decoder is not None:
        want = {
            "backbone": (expect_backbone or bcfg).to_dict(),
            "decoder": (expect_decoder or dcfg).to_dict(),
        }
        diff = config_differences(cfg, want)
        if diff:
            raise CheckpointMismatch(
                f"checkpoint {path} was written for a different configuration; differing fields: {', '.join(diff)}"
            )
    params = {}
    for n in manifest["params"]:
        t, off = T.tensor_from_bytes(buf, off)
        t.requires_grad = True
        t.name = n
        params[n] = t
    hyper = dict(manifest["optim"])
    optim = OptimState(**hyper)
    for n in manifest["moments"]:
        m, off = T.tensor_from_bytes(buf, off)
        v, off = T.tensor_from_bytes(buf, off)
        optim.m[n], optim.v[n] = m.data, v.data
    state = TrainState(optim, _restore_rng(manifest["rng"]), manifest["iteration"])
    state.gate_iteration = manifest.get("gate_iteration")
    return Checkpoint(SegRet(bcfg, dcfg, params), state, manifest)
