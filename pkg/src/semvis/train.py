"""Training loop: Adam, staged unfreezing, halving learning rate, checkpoints.

The text encoder, the word table and the final projection train from epoch
zero; the rest of the image pipeline joins after ``freeze_epochs``.  The
learning rate starts at ``lr0`` and halves every epoch until
``halving_until_epoch``, then stays fixed.  All randomness (shuffling,
caption sampling, dropout) is derived from (seed, epoch) keys, so a run is
bit-reproducible and a resumed run continues the exact trajectory.

Checkpoints are a single binary file: magic ``SVEC``, a u32 version, then
three sections (model tensors, optimizer state, run state), each a u32
entry count followed by entries of the form

    u32 name length | UTF-8 name | u32 rank | rank x u64 dims | f64 LE payload

The model section also carries the architecture as ``config.*`` scalars and
the vocabulary as ``vocab.*`` byte arrays, so a checkpoint alone rebuilds a
usable model.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import zero_grads
from .data import Dataset
from .errors import CheckpointError, ContractError
from .loss import Batch, LossConfig, batch_loss
from .model import Model, ModelConfig
from .text import Vocab

_EPOCH_SALT = 11

CHECKPOINT_MAGIC = b"SVEC"
CHECKPOINT_VERSION = 1

# Parameter-name prefixes that train from epoch zero.
EARLY_TRAINABLE = ("sru.", "word.", "proj.")


@dataclass
class TrainSchedule:
    epochs: int = 30
    batch_size: int = 32
    lr0: float = 4e-3
    halving_until_epoch: int = 5
    freeze_epochs: int = 2

    def __post_init__(self):
        if min(self.epochs, self.batch_size) < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr0 <= 0 or self.halving_until_epoch < 0 or self.freeze_epochs < 0:
            raise ValueError("lr0 must be positive, schedule epochs nonnegative")


def effective_lr(epoch: int, sched: TrainSchedule) -> float:
    """lr0 halved once per epoch up to ``halving_until_epoch``, constant after."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return sched.lr0 / 2 ** min(epoch, sched.halving_until_epoch)


def trainable_set(epoch: int, sched: TrainSchedule, param_names) -> list[str]:
    """Names updated at ``epoch``: the early set during the freeze, then everything."""
    names = sorted(param_names)
    if epoch < sched.freeze_epochs:
        return [n for n in names if n.startswith(EARLY_TRAINABLE)]
    return names


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)


def adam_step(params: dict, state: AdamState, lr: float, names) -> None:
    """One Adam update over ``names``; every named tensor must carry a gradient."""
    for name in sorted(names):
        p = params[name]
        if p.grad is None:
            raise ContractError(f"parameter {name} has no gradient (forgot backward?)")
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
            state.t[name] = 0
        state.t[name] += 1
        t = state.t[name]
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = state.m[name] / (1.0 - state.beta1 ** t)
        v_hat = state.v[name] / (1.0 - state.beta2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


def _training_captions(scene) -> list[str]:
    longest = max(len(c.split()) for c in scene.captions)
    return [c for c in scene.captions if len(c.split()) == longest]


def train_epoch(model: Model, dataset: Dataset, sched: TrainSchedule, state: AdamState,
                epoch: int, seed: int, loss_cfg: LossConfig | None = None) -> float:
    """One pass over the shuffled dataset; returns the mean batch loss.

    Each scene contributes its image and one of its captions, drawn
    uniformly per appearance.  A trailing batch with fewer than two scenes
    is skipped (it has no negatives).
    """
    if not dataset.scenes:
        raise ContractError("cannot train on an empty dataset")
    if loss_cfg is None:
        loss_cfg = LossConfig(model.cfg.margin, model.cfg.mining)
    rng = np.random.default_rng((seed, _EPOCH_SALT, epoch))
    # One epoch walks every (image, caption slot) pair, so a scene appears
    # once per stored caption; same-scene appearances may share a batch and
    # are excluded from each other's negative sets by image id.
    appearances = np.repeat(np.arange(len(dataset.scenes)),
                            [len(s.captions) for s in dataset.scenes])
    order = appearances[rng.permutation(len(appearances))]
    lr = effective_lr(epoch, sched)
    names = trainable_set(epoch, sched, model.params)

    losses = []
    for step, start in enumerate(range(0, len(order), sched.batch_size)):
        idxs = order[start:start + sched.batch_size]
        if len(idxs) < 2 or len(set(int(i) for i in idxs)) < 2:
            continue
        images, captions, ids = [], [], []
        taken: set[str] = set()
        for j, scene_idx in enumerate(idxs):
            scene = dataset.scenes[int(scene_idx)]
            # Template captions repeat across scenes ("a red circle" belongs to
            # every scene with a red circle), and a duplicate owned by another
            # image is an unsatisfiable hard negative whose hinge is pinned at
            # the margin.  So per appearance we sample among the scene's most
            # descriptive captions (the conjunctions, when present) and redraw
            # on a string collision within the batch.
            pool = _training_captions(scene)
            for _ in range(8):
                cap = pool[int(rng.integers(0, len(pool)))]
                if cap not in taken:
                    break
            taken.add(cap)
            key = (seed, epoch, step, j)
            x, _ = model.encode_image(scene.image, training=True, rng_key=key)
            v = model.encode_text(cap, training=True, rng_key=key)
            images.append(x)
            captions.append(v)
            ids.append(scene.scene_id)
        loss = batch_loss(Batch(images, captions, ids), loss_cfg)
        value = loss.item()
        if not math.isfinite(value):
            raise ArithmeticError(f"non-finite loss {value} in batch {step} of epoch {epoch}")
        loss.backward()
        adam_step(model.params, state, lr, names)
        zero_grads(model.params.values())
        losses.append(value)
    if not losses:
        raise ContractError("dataset too small to form a single batch of >= 2 scenes")
    return float(np.mean(losses))


def train(model: Model, dataset: Dataset, sched: TrainSchedule, seed: int,
          state: AdamState | None = None, start_epoch: int = 0,
          loss_cfg: LossConfig | None = None, log_path=None) -> list[dict]:
    """Run epochs [start_epoch, sched.epochs); returns one log record per epoch."""
    if state is None:
        state = AdamState()
    history = []
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for epoch in range(start_epoch, sched.epochs):
            loss = train_epoch(model, dataset, sched, state, epoch, seed, loss_cfg)
            record = {"epoch": epoch, "loss": loss, "lr": effective_lr(epoch, sched),
                      "trainable": trainable_set(epoch, sched, model.params)}
            history.append(record)
            if log_fh:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    return history


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

@dataclass
class CheckpointBundle:
    model: Model
    opt_state: AdamState
    schedule: TrainSchedule
    seed: int
    next_epoch: int


def _write_entry(fh, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    arr = np.asarray(arr, dtype=np.float64)
    fh.write(struct.pack("<I", arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<Q", dim))
    fh.write(arr.astype("<f8").tobytes())


def _write_section(fh, entries: dict) -> None:
    fh.write(struct.pack("<I", len(entries)))
    for name in sorted(entries):
        _write_entry(fh, name, entries[name])


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated file")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def section(self) -> dict:
        out = {}
        for _ in range(self.u32()):
            name = self.take(self.u32()).decode("utf-8")
            rank = self.u32()
            shape = tuple(self.u64() for _ in range(rank))
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape)
            out[name] = arr.astype(np.float64)
        return out


_POOLING_CODES = {"max_min": 0.0, "mean": 1.0}
_MINING_CODES = {"hard": 0.0, "random": 1.0}


def _config_entries(cfg: ModelConfig, vocab: Vocab) -> dict:
    entries = {
        "config.backbone_channels": np.float64(cfg.backbone_channels),
        "config.hidden_channels": np.array(cfg.hidden_channels, dtype=np.float64),
        "config.adapt_channels": np.float64(cfg.adapt_channels),
        "config.embed_dim": np.float64(cfg.embed_dim),
        "config.word_dim": np.float64(cfg.word_dim),
        "config.sru_layers": np.float64(cfg.sru_layers),
        "config.pooling": np.float64(_POOLING_CODES[cfg.pooling]),
        "config.mining": np.float64(_MINING_CODES[cfg.mining]),
        "config.margin": np.float64(cfg.margin),
        "config.visual_dropout": np.float64(cfg.visual_dropout),
        "config.sru_dropout": np.float64(cfg.sru_dropout),
        "config.top_k": np.float64(-1 if cfg.top_k is None else cfg.top_k),
    }
    for i, token in enumerate(vocab.tokens):
        entries[f"vocab.{i:06d}"] = np.frombuffer(token.encode("utf-8"), dtype=np.uint8
                                                  ).astype(np.float64)
    return entries


def _decode_config(entries: dict) -> tuple[ModelConfig, Vocab]:
    def scalar(name):
        if name not in entries:
            raise CheckpointError(f"missing checkpoint field {name}")
        return float(np.asarray(entries[name]).reshape(()))

    pooling = {v: k for k, v in _POOLING_CODES.items()}[scalar("config.pooling")]
    mining = {v: k for k, v in _MINING_CODES.items()}[scalar("config.mining")]
    top_k = scalar("config.top_k")
    cfg = ModelConfig(
        backbone_channels=int(scalar("config.backbone_channels")),
        hidden_channels=tuple(int(v) for v in entries["config.hidden_channels"]),
        adapt_channels=int(scalar("config.adapt_channels")),
        embed_dim=int(scalar("config.embed_dim")),
        word_dim=int(scalar("config.word_dim")),
        sru_layers=int(scalar("config.sru_layers")),
        pooling=pooling,
        visual_dropout=scalar("config.visual_dropout"),
        sru_dropout=scalar("config.sru_dropout"),
        margin=scalar("config.margin"),
        mining=mining,
        top_k=None if top_k < 0 else int(top_k),
    )
    tokens = []
    i = 0
    while f"vocab.{i:06d}" in entries:
        raw = np.asarray(entries[f"vocab.{i:06d}"]).astype(np.uint8).tobytes()
        tokens.append(raw.decode("utf-8"))
        i += 1
    if not tokens or tokens[0] != "<unk>":
        raise CheckpointError("checkpoint vocabulary must start with <unk>")
    return cfg, Vocab(tokens[1:])


def save_checkpoint(path, model: Model, state: AdamState, sched: TrainSchedule,
                    seed: int, next_epoch: int) -> None:
    model_section = {name: p.data for name, p in model.params.items()}
    model_section.update(_config_entries(model.cfg, model.vocab))

    opt_section = {}
    for name in state.m:
        opt_section[f"adam.m.{name}"] = state.m[name]
        opt_section[f"adam.v.{name}"] = state.v[name]
        opt_section[f"adam.t.{name}"] = np.float64(state.t[name])

    run_section = {
        "seed": np.float64(seed),
        "next_epoch": np.float64(next_epoch),
        "schedule.epochs": np.float64(sched.epochs),
        "schedule.batch_size": np.float64(sched.batch_size),
        "schedule.lr0": np.float64(sched.lr0),
        "schedule.halving_until_epoch": np.float64(sched.halving_until_epoch),
        "schedule.freeze_epochs": np.float64(sched.freeze_epochs),
    }

    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        _write_section(fh, model_section)
        _write_section(fh, opt_section)
        _write_section(fh, run_section)


def load_checkpoint(path) -> CheckpointBundle:
    with open(path, "rb") as fh:
        blob = fh.read()
    reader = _Reader(blob, path)
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes (not a checkpoint)")
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    model_section = reader.section()
    opt_section = reader.section()
    run_section = reader.section()
    if reader.pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - reader.pos} trailing bytes")

    cfg, vocab = _decode_config(model_section)
    params = {k: v for k, v in model_section.items()
              if not k.startswith(("config.", "vocab."))}
    model = Model.from_params(cfg, vocab, params)

    state = AdamState()
    for key, arr in opt_section.items():
        kind, _, name = key.partition(".")[2].partition(".")
        if name not in model.params:
            raise CheckpointError(f"{path}: optimizer state for unknown tensor {name!r}")
        if kind == "m":
            state.m[name] = arr.copy()
        elif kind == "v":
            state.v[name] = arr.copy()
        elif kind == "t":
            state.t[name] = int(arr.reshape(()))
        else:
            raise CheckpointError(f"{path}: unknown optimizer entry {key!r}")

    def run_scalar(name):
        if name not in run_section:
            raise CheckpointError(f"{path}: missing run field {name}")
        return float(np.asarray(run_section[name]).reshape(()))

    sched = TrainSchedule(
        epochs=int(run_scalar("schedule.epochs")),
        batch_size=int(run_scalar("schedule.batch_size")),
        lr0=run_scalar("schedule.lr0"),
        halving_until_epoch=int(run_scalar("schedule.halving_until_epoch")),
        freeze_epochs=int(run_scalar("schedule.freeze_epochs")),
    )
    return CheckpointBundle(model, state, sched, int(run_scalar("seed")),
                            int(run_scalar("next_epoch")))
