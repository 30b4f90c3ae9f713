"""Training loop with counter-based randomness and binary checkpoints.

Every random choice is drawn from a counter-based generator keyed by the
run seed and a purpose constant, with the epoch (shuffling) or the
optimizer step (patch sampling, unit dropout) as the counter. Nothing
random depends on how the process got to a given epoch, so a run resumed
from a checkpoint at an epoch boundary is bit-identical to one that
never stopped.

Checkpoints are a single file: magic ``GRDN``, a version word, a JSON
header (model spec, connection mask, shape tables, optimizer and
progress state), then raw little-endian float32 parameters and batch
norm statistics followed by float64 Adam moments.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, fields

import numpy as np

from .data import AugmentConfig, Scene, random_patch
from .dropout import sample_drop_mask
from .grid import ConnectionMask, GridModel, GridSpec, build_grid
from .ops import softmax_cross_entropy
from .optim import Adam
from .tensor import Tape, backward

KEY_SHUFFLE = 0x8AF1DE91C2264F8D
KEY_PATCH = 0x3C6EF372FE94F82B

_MAGIC = b"GRDN"
_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_decay: float = 0.0
    decay_mode: str = "inverse_time"
    lr_drop_epoch: int | None = None
    lr_after_drop: float | None = None
    use_dropout: bool = True
    ignore_label: int = 255
    snapshot_every: int | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be non-negative, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if (self.lr_drop_epoch is None) != (self.lr_after_drop is None):
            raise ValueError("lr_drop_epoch and lr_after_drop go together")
        if self.snapshot_every is not None and self.snapshot_every < 1:
            raise ValueError(f"snapshot_every must be positive, got "
                             f"{self.snapshot_every}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def make_batch(scenes: list[Scene], augment: AugmentConfig, rng):
    """Sample one augmented patch per scene; images come out (n, 3, s, s)."""
    images, labels = [], []
    for scene in scenes:
        img, lab, _ = random_patch(scene, augment, rng)
        images.append(img.transpose(2, 0, 1))
        labels.append(lab)
    return np.stack(images), np.stack(labels)


def base_lr_for_epoch(cfg: TrainConfig, epoch: int) -> float:
    if cfg.lr_drop_epoch is not None and epoch >= cfg.lr_drop_epoch:
        return cfg.lr_after_drop
    return cfg.lr


def train_epoch(model: GridModel, optim: Adam, scenes: list[Scene],
                augment: AugmentConfig, cfg: TrainConfig, seed: int,
                epoch: int) -> dict:
    """One pass over the data; returns a JSON-ready record (no timestamps)."""
    optim.lr = base_lr_for_epoch(cfg, epoch)
    order = np.random.Generator(
        np.random.Philox(key=seed ^ KEY_SHUFFLE, counter=epoch)
    ).permutation(len(scenes))
    losses, skipped = [], 0
    for start in range(0, len(order), cfg.batch_size):
        picks = [scenes[k] for k in order[start:start + cfg.batch_size]]
        patch_rng = np.random.Generator(
            np.random.Philox(key=seed ^ KEY_PATCH, counter=optim.t)
        )
        x, y = make_batch(picks, augment, patch_rng)
        if (y == cfg.ignore_label).all():
            skipped += 1
            continue
        drop = None
        if cfg.use_dropout and model.spec.dropout_p < 1.0:
            drop = sample_drop_mask(model, model.spec.dropout_p, seed, step=optim.t)
        tape = Tape()
        logits = model.forward(x, training=True, drop_mask=drop, tape=tape)
        loss = softmax_cross_entropy(logits, y, cfg.ignore_label, tape=tape)
        backward(tape, loss)
        optim.step()
        losses.append(float(loss.data))
    return {
        "epoch": epoch,
        "steps": len(losses),
        "skipped": skipped,
        "loss": float(np.mean(losses)) if losses else None,
        "lr": optim.effective_lr(optim.t) if optim.t else optim.lr,
    }


def make_optimizer(model: GridModel, cfg: TrainConfig) -> Adam:
    return Adam(model.named_parameters(), lr=cfg.lr, beta1=cfg.beta1,
                beta2=cfg.beta2, eps=cfg.eps, lr_decay=cfg.lr_decay,
                decay_mode=cfg.decay_mode)


def train_run(model: GridModel, scenes: list[Scene], augment: AugmentConfig,
              cfg: TrainConfig, seed: int, optim: Adam | None = None,
              epochs_done: int = 0, log_path: str | None = None,
              snapshot_path: str | None = None) -> list[dict]:
    """Run epochs epochs_done..epochs-1, appending one log line per epoch.

    With ``snapshot_path`` set and ``cfg.snapshot_every`` = k, a rolling
    checkpoint lands on that path after every k-th finished epoch, so an
    interrupted run can resume from the most recent boundary.
    """
    if not scenes:
        raise ValueError("training needs at least one scene")
    if optim is None:
        optim = make_optimizer(model, cfg)
    records = []
    log = open(log_path, "a") if log_path else None
    try:
        for epoch in range(epochs_done, cfg.epochs):
            rec = train_epoch(model, optim, scenes, augment, cfg, seed, epoch)
            records.append(rec)
            if log is not None:
                log.write(json.dumps(rec, sort_keys=True) + "\n")
                log.flush()
            if (snapshot_path is not None and cfg.snapshot_every is not None
                    and (epoch + 1) % cfg.snapshot_every == 0):
                save_checkpoint(snapshot_path, model, optim, train_seed=seed,
                                epochs_done=epoch + 1)
    finally:
        if log is not None:
            log.close()
    return records


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str, model: GridModel, optim: Adam, train_seed: int,
                    epochs_done: int) -> None:
    if model.dtype != np.float32:
        raise ValueError(f"checkpoints hold float32 models, got {model.dtype}")
    params = model.named_parameters()
    buffers = model.named_buffers()
    if optim.names != [n for n, _ in params]:
        raise ValueError("optimizer parameter order does not match the model")
    header = {
        "spec": model.spec.to_dict(),
        "mask": {
            "horizontal_on": model.mask.horizontal_on.tolist(),
            "residual_on": model.mask.residual_on.tolist(),
            "vertical_on": model.mask.vertical_on.tolist(),
        },
        "input_hw": list(model.input_hw),
        "init_seed": model.init_seed,
        "prune_masked": model.prune_masked,
        "params": [[n, list(p.shape)] for n, p in params],
        "buffers": [[n, list(b.shape)] for n, b in buffers],
        "optim": {**optim.hyperparams(), "t": optim.t},
        "train": {"seed": int(train_seed), "epochs_done": int(epochs_done)},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IQ", _VERSION, len(blob)))
        f.write(blob)
        for _, p in params:
            f.write(np.ascontiguousarray(p.data, np.float32).tobytes())
        for _, b in buffers:
            f.write(np.ascontiguousarray(b, np.float32).tobytes())
        for m in optim.m:
            f.write(np.ascontiguousarray(m, np.float64).tobytes())
        for v in optim.v:
            f.write(np.ascontiguousarray(v, np.float64).tobytes())


def _take(raw: bytes, offset: int, shape, dtype) -> tuple[np.ndarray, int]:
    n = int(np.prod(shape, dtype=np.int64)) if shape else 1
    end = offset + n * np.dtype(dtype).itemsize
    if end > len(raw):
        raise ValueError("checkpoint truncated")
    arr = np.frombuffer(raw[offset:end], dtype).reshape(shape).copy()
    return arr, end


def load_checkpoint(path: str, expect_spec: GridSpec | None = None):
    """Rebuild (model, optimizer, train_state) from a checkpoint file."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, header_len = struct.unpack("<IQ", raw[4:16])
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + header_len].decode())
    spec = GridSpec.from_dict(header["spec"])
    if expect_spec is not None and spec != expect_spec:
        for name in (f.name for f in fields(GridSpec)):
            a, b = getattr(spec, name), getattr(expect_spec, name)
            if a != b:
                raise ValueError(
                    f"checkpoint spec mismatch: {name} is {a!r}, expected {b!r}"
                )
    mask = ConnectionMask(
        np.array(header["mask"]["horizontal_on"], bool),
        np.array(header["mask"]["residual_on"], bool),
        np.array(header["mask"]["vertical_on"], bool),
    )
    model = build_grid(spec, header["input_hw"], mask=mask,
                       seed=header["init_seed"],
                       prune_masked=header["prune_masked"])
    params = model.named_parameters()
    if [[n, list(p.shape)] for n, p in params] != header["params"]:
        raise ValueError("checkpoint parameter table does not match the rebuilt model")
    buffers = model.named_buffers()
    if [[n, list(b.shape)] for n, b in buffers] != header["buffers"]:
        raise ValueError("checkpoint buffer table does not match the rebuilt model")
    offset = 16 + header_len
    for _, p in params:
        p.data, offset = _take(raw, offset, p.shape, np.float32)
    for _, b in buffers:
        b[...], offset = _take(raw, offset, b.shape, np.float32)
    opt_h = dict(header["optim"])
    t = opt_h.pop("t")
    optim = Adam(params, **opt_h)
    optim.t = t
    for k, (_, p) in enumerate(params):
        optim.m[k], offset = _take(raw, offset, p.shape, np.float64)
    for k, (_, p) in enumerate(params):
        optim.v[k], offset = _take(raw, offset, p.shape, np.float64)
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return model, optim, dict(header["train"])
