"""Loss assembly, Adam, the training loop and checkpoint files."""
from __future__ import annotations

import csv
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from . import quantizer
from .autograd import Tensor
from .data import Batch, FeatureConfig, TimeSeriesDataset, TrainingWindow, WindowSampler
from .errors import ConfigError, ContractError, DataError, NonFiniteError
from .model import ModelConfig, VQARModel

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"VQARCKPT"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(NonFiniteError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 256
    learning_rate: float = 1e-3
    batches_per_epoch: int = 50
    codebook_size: int = 128
    encoder_size: int = 64
    decoder_size: int = 40
    commitment_cost: float = 0.25
    replace_threshold: float = 2.0
    decay: float = 0.99
    head: str = "gaussian"
    use_ema: bool = True
    quantize: bool = True
    use_identity: bool = True
    kmeans_iters: int = 10
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "codebook_size", "encoder_size", "decoder_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batches_per_epoch < 1:
            raise ConfigError("batches_per_epoch must be positive")

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.head, self.codebook_size, self.encoder_size, self.decoder_size,
                           self.commitment_cost, self.replace_threshold, self.decay, self.use_ema,
                           self.quantize, self.kmeans_iters)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training options: {', '.join(sorted(unknown))}")
        return cls(**d)


# ---------------------------------------------------------------------------
# losses

def batch_loss(model: VQARModel, batch: Batch | Sequence[TrainingWindow]) -> Tensor:
    """Mean step loss over all windows and all positions t = 1 .. L-1."""
    if not isinstance(batch, Batch):
        if len(batch) == 0:
            raise ContractError("batch_loss needs at least one window")
        batch = Batch.from_windows(batch)
    if len(batch) == 0:
        raise ContractError("batch_loss needs at least one window")
    return model.unroll(batch).loss()


def step_loss(model: VQARModel, window: TrainingWindow, t: int,
              fixed_assignments: np.ndarray | None = None) -> Tensor:
    """Loss at position ``t`` of one window (NLL of x_t plus the VQ terms)."""
    if not 1 <= t <= len(window) - 1:
        raise ContractError(f"position t={t} outside 1..{len(window) - 1}")
    out = model.unroll(Batch.from_windows([window]), fixed_assignments)
    return ag.sum(out.step_losses[t - 1])


# ---------------------------------------------------------------------------
# optimiser

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, lr: float) -> None:
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    model: VQARModel
    train_config: TrainConfig
    epoch: int = 0
    rng_state: dict = field(default_factory=dict)
    log: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def features(self) -> FeatureConfig:
        return self.model.features

    def arrays(self) -> dict[str, np.ndarray]:
        return self.model.state_dict()

    def save(self, path) -> None:
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return load_checkpoint(path)


def _to_bytes(ckpt: Checkpoint) -> bytes:
    arrays = ckpt.model.state_dict()
    header = {
        "version": CHECKPOINT_VERSION,
        "train_config": ckpt.train_config.to_dict(),
        "model_config": ckpt.model.cfg.to_dict(),
        "features": ckpt.model.features.to_dict(),
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "log": ckpt.log,
        "meta": ckpt.meta,
        "arrays": [],
    }
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        blob = arr.tobytes()
        header["arrays"].append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    head = json.dumps(header, sort_keys=True).encode()
    return CHECKPOINT_MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(_to_bytes(ckpt))


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    return _to_bytes(ckpt)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n])
    if header["version"] != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {header['version']}")
    body = raw[16 + n:]
    arrays = {}
    for spec in header["arrays"]:
        chunk = body[spec["offset"]:spec["offset"] + spec["nbytes"]]
        arrays[spec["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(spec["shape"]).copy()
    features = FeatureConfig.from_dict(header["features"])
    model = VQARModel(ModelConfig(**header["model_config"]), features, 0)
    model.load_state_dict(arrays)
    return Checkpoint(model, TrainConfig.from_dict(header["train_config"]), header["epoch"],
                      header["rng_state"], header["log"], header.get("meta", {}))


def write_train_log(path, log: Sequence[dict]) -> None:
    cols = ["epoch", "mean_loss", "codebook_utilization", "replacements"]
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for row in log:
            w.writerow(row)


# ---------------------------------------------------------------------------
# training loop

def build_model(ds: TimeSeriesDataset, cfg: TrainConfig, rng: np.random.Generator) -> VQARModel:
    feats = FeatureConfig.for_dataset(ds, use_identity=cfg.use_identity)
    return VQARModel(cfg.model_config(), feats, rng)


def _rng_streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("init", "windows", "kmeans", "dead")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.Generator(np.random.PCG64(c)) for n, c in zip(names, children)}


def train(ds: TimeSeriesDataset, cfg: TrainConfig,
          on_epoch: Callable[[dict], None] | None = None) -> Checkpoint:
    if ds.D == 0:
        raise DataError("cannot train on an empty dataset")
    if cfg.head == "neg_binomial" and not ds.is_count_data():
        raise DataError("negative binomial head needs non-negative integer targets")
    rngs = _rng_streams(cfg.seed)
    model = build_model(ds, cfg, rngs["init"])
    sampler = WindowSampler(ds, model.features)
    n_batches = cfg.batches_per_epoch
    cb = model.codebook

    if cfg.quantize:
        warm = sampler.sample_batch(rngs["windows"], cfg.batch_size)
        quantizer.kmeans_init(cb, model.encode_only(warm), cfg.kmeans_iters, rngs["kmeans"])

    params = model.parameters()
    opt = AdamState.for_params(params)
    log: list[dict] = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        losses, used, replaced = [], np.zeros(cb.num_codes, dtype=bool), 0
        for _ in range(n_batches):
            batch = sampler.sample_batch(rngs["windows"], cfg.batch_size)
            try:
                out = model.unroll(batch)
                loss = out.loss()
                loss.backward()
            except NonFiniteError as exc:
                ids = [ds.series[i].item_id for i in batch.series_index]
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, step {step}: {exc}; windows from series {ids[:8]}"
                ) from None
            adam_step(params, ag.parameters_grads(params), opt, cfg.learning_rate)
            model.zero_grad()
            if cfg.quantize:
                enc = out.encodings.reshape(-1, cb.dim)
                if cfg.use_ema:
                    quantizer.ema_update(cb, enc, out.assignments.reshape(-1))
                else:
                    quantizer.update_cluster_size(cb, out.assignments.reshape(-1))
                replaced += quantizer.replace_dead(cb, enc, rngs["dead"])
                used[np.unique(out.assignments)] = True
            losses.append(loss.item())
            step += 1
        row = {
            "epoch": epoch,
            "mean_loss": float(np.mean(losses)),
            "codebook_utilization": float(used.mean()) if cfg.quantize else 0.0,
            "replacements": replaced,
        }
        log.append(row)
        logger.info("epoch %d loss %.5f util %.3f replaced %d (%.1fs)", epoch, row["mean_loss"],
                    row["codebook_utilization"], replaced, time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(row)
    rng_state = {k: g.bit_generator.state for k, g in rngs.items()}
    return Checkpoint(model, cfg, cfg.epochs, _jsonable(rng_state), log, {"steps": step})


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj
