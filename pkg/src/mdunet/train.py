"""Training loop: Adam, step-decayed learning rate, slice-wise batches, checkpoints."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import functional as F
from .data import Case, normalize_case, read_container, slice_case, write_container
from .metrics import MetricsReport, SegmentationMask, aggregate, evaluate_case
from .network import ConfigError, MultiPathUNet, NetworkConfig, build_network
from .tensor import Parameter, Tensor, backward, no_grad

LOSSES = ("cross_entropy", "soft_dice")
CKPT_MAGIC = b"MDTK"
PROB_CLAMP = 1e-7


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    decay_epoch: int = 100
    decay_factor: float = 0.1
    betas: tuple[float, float] = (0.9, 0.99)
    epsilon: float = 1e-8
    batch_size: int = 4
    epochs: int = 200
    loss: str = "cross_entropy"
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.validate()

    def validate(self) -> None:
        def check(ok, name, msg):
            if not ok:
                raise ConfigError(name, msg)

        check(isinstance(self.epochs, int) and self.epochs >= 1, "epochs", f"must be an int >= 1, got {self.epochs!r}")
        check(self.lr0 > 0, "lr0", f"must be > 0, got {self.lr0!r}")
        check(0 <= self.decay_factor <= 1, "decay_factor", f"must lie in [0, 1], got {self.decay_factor!r}")
        check(
            isinstance(self.decay_epoch, int) and 1 <= self.decay_epoch <= self.epochs,
            "decay_epoch",
            f"must satisfy 1 <= decay_epoch <= epochs ({self.epochs}), got {self.decay_epoch!r}",
        )
        check(len(self.betas) == 2 and all(0 <= b < 1 for b in self.betas), "betas", f"need two values in [0, 1), got {self.betas!r}")
        check(self.epsilon > 0, "epsilon", f"must be > 0, got {self.epsilon!r}")
        check(isinstance(self.batch_size, int) and self.batch_size >= 1, "batch_size", f"must be an int >= 1, got {self.batch_size!r}")
        check(self.loss in LOSSES, "loss", f"must be one of {LOSSES}, got {self.loss!r}")
        check(isinstance(self.seed, int), "seed", f"must be an int, got {self.seed!r}")
        check(isinstance(self.checkpoint_every, int) and self.checkpoint_every >= 0, "checkpoint_every", "must be an int >= 0")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``: ``lr0`` up to ``decay_epoch``, then scaled once."""
        return self.lr0 if epoch <= self.decay_epoch else self.lr0 * self.decay_factor

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"train.{key}", "unknown key")
        try:
            return cls(**d)
        except ConfigError as e:
            raise ConfigError(f"train.{e.field}", str(e).split(": ", 1)[1]) from None
        except TypeError as e:
            raise ConfigError("train", str(e)) from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


# --- optimiser ---------------------------------------------------------------


def adam_step(params, grads, m, v, t: int, lr: float, betas=(0.9, 0.99), eps: float = 1e-8):
    """One bias-corrected Adam update, in place on ``params``, ``m`` and ``v``."""
    if t < 1:
        raise ValueError(f"step index t must be >= 1, got {t}")
    b1, b2 = betas
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or m[i].shape != p.shape or v[i].shape != p.shape:
            raise ValueError(f"adam: shape mismatch at index {i}: param {p.shape}, grad {g.shape}, m {m[i].shape}, v {v[i].shape}")
        m[i] *= b1
        m[i] += (1.0 - b1) * g
        v[i] *= b2
        v[i] += (1.0 - b2) * (g * g)
        p -= (lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)).astype(p.dtype, copy=False)
    return params, m, v


class Adam:
    def __init__(self, params: Sequence[Parameter], betas=(0.9, 0.99), eps: float = 1e-8):
        self.params = list(params)
        self.betas = tuple(betas)
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step([p.data for p in self.params], grads, self.m, self.v, self.t, lr, self.betas, self.eps)


# --- losses ------------------------------------------------------------------


def loss_fn(pred: Tensor, target, kind: str = "cross_entropy") -> Tensor:
    """Scalar loss of softmax output ``pred [B,K,H,W]`` against labels ``[B,H,W]``."""
    target = np.asarray(target)
    if pred.ndim != 4 or target.shape != (pred.shape[0],) + pred.shape[2:]:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} are inconsistent")
    sums = pred.data.sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-4:
        raise ValueError(f"prediction is not a probability map: channel sums deviate by {np.abs(sums - 1).max():.2e}")
    K = pred.shape[1]
    onehot = (target[:, None] == np.arange(K)[None, :, None, None]).astype(pred.dtype)
    if kind == "cross_entropy":
        p_true = F.sum(F.mul(pred, Tensor(onehot)), axis=1)
        return F.mul(F.mean(F.log(F.clip(p_true, PROB_CLAMP, 1.0 - PROB_CLAMP))), -1.0)
    if kind == "soft_dice":
        p = F.channel_slice(pred, 1, 2)
        g = Tensor(onehot[:, 1:2])
        inter = F.sum(F.mul(p, g))
        num = F.add(F.mul(inter, 2.0), 1.0)
        den = F.add(F.add(F.sum(p), float(g.data.sum())), 1.0)
        return F.sub(1.0, F.div(num, den))
    raise ValueError(f"unknown loss {kind!r}; expected one of {LOSSES}")


# --- data plumbing -------------------------------------------------------------


def stack_samples(cases: Sequence[Case], modalities: Sequence[str], dtype="float32"):
    """Normalise each case and flatten to arrays ``X [n,N,H,W]`` and ``Y [n,H,W]``."""
    xs, ys = [], []
    for c in cases:
        c.check_modalities(modalities)
        for s in slice_case(normalize_case(c)):
            xs.append(np.stack(s.images))
            ys.append(s.label if s.label is not None else np.zeros(s.images[0].shape, np.uint8))
    return np.stack(xs).astype(dtype), np.stack(ys).astype(np.int64)


def _inputs(x: np.ndarray) -> list[Tensor]:
    return [Tensor(x[:, i : i + 1]) for i in range(x.shape[1])]


def predict_case(network: MultiPathUNet, case: Case, batch_size: int = 8) -> np.ndarray:
    """Binary lesion mask ``[D,H,W]`` (argmax over classes, class 1 = lesion)."""
    cfg = network.config
    x, _ = stack_samples([case], cfg.modalities, cfg.dtype)
    was_training = network.training
    network.eval()
    out = []
    try:
        with no_grad():
            for i in range(0, len(x), batch_size):
                probs = network(_inputs(x[i : i + batch_size])).data
                out.append(probs.argmax(axis=1) == 1)
    finally:
        network.train(was_training)
    return np.concatenate(out).astype(np.uint8)


def evaluate(network: MultiPathUNet, cases: Sequence[Case]) -> MetricsReport:
    records = []
    for c in cases:
        pred = predict_case(network, c)
        ref = SegmentationMask(c.mask, c.spacing)
        records.append(evaluate_case(c.case_id, ref, SegmentationMask(pred, c.spacing)))
    return aggregate(records)


# --- checkpoints ---------------------------------------------------------------


def save_checkpoint(path, network: MultiPathUNet, epoch: int = 0) -> None:
    cfg = network.config
    code = "<f4" if cfg.dtype == "float32" else "<f8"
    params = list(network.named_parameters())
    buffers = list(network.named_buffers())
    manifest = {
        "network": cfg.to_dict(),
        "epoch": epoch,
        "dtype": code,
        "params": [{"name": n, "shape": list(p.shape)} for n, p in params],
        "buffers": [{"name": n, "shape": list(b.shape)} for n, b in buffers],
    }
    payloads = [p.data.astype(code).tobytes() for _, p in params] + [b.astype(code).tobytes() for _, b in buffers]
    with open(path, "wb") as fh:
        write_container(fh, CKPT_MAGIC, manifest, payloads)


def load_checkpoint(path) -> MultiPathUNet:
    manifest, payload = read_container(Path(path).read_bytes(), CKPT_MAGIC)
    net = build_network(NetworkConfig.from_dict(manifest["network"]))
    code = np.dtype(manifest["dtype"])
    targets = dict(net.named_parameters())
    bufs = dict(net.named_buffers())
    offset = 0
    for kind, store in (("params", targets), ("buffers", bufs)):
        for entry in manifest[kind]:
            name, shape = entry["name"], tuple(entry["shape"])
            if name not in store:
                raise ValueError(f"checkpoint entry {name!r} does not exist in the network")
            dst = store[name].data if kind == "params" else store[name]
            if dst.shape != shape:
                raise ValueError(f"checkpoint entry {name!r} has shape {shape}, network expects {dst.shape}")
            n = int(np.prod(shape)) * code.itemsize
            if offset + n > len(payload):
                raise ValueError("checkpoint payload truncated")
            dst[...] = np.frombuffer(payload[offset : offset + n], dtype=code).reshape(shape)
            offset += n
    if offset != len(payload):
        raise ValueError(f"checkpoint payload has {len(payload) - offset} trailing bytes")
    return net


# --- training ------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    val_dsc: float = math.nan
    val_mhd: float = math.nan
    val_vs: float = math.nan
    wall_time: float = 0.0


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    def to_csv(self, with_time: bool = False) -> str:
        """Deterministic columns only unless ``with_time``."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["epoch", "loss", "lr", "val_dsc", "val_mhd_mm", "val_vs"] + (["wall_time_s"] if with_time else [])
        w.writerow(cols)
        for r in self.records:
            row = [r.epoch, repr(r.loss), repr(r.lr), repr(r.val_dsc), repr(r.val_mhd), repr(r.val_vs)]
            if with_time:
                row.append(f"{r.wall_time:.3f}")
            w.writerow(row)
        return buf.getvalue()


def train(
    network: MultiPathUNet,
    train_cases: Sequence[Case],
    config: TrainConfig,
    val_cases: Sequence[Case] | None = None,
    checkpoint_dir=None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[MultiPathUNet, TrainLog]:
    if not train_cases:
        raise ValueError("training set is empty")
    cfg = network.config
    X, Y = stack_samples(train_cases, cfg.modalities, cfg.dtype)
    params = network.parameters()
    opt = Adam(params, config.betas, config.epsilon)
    rng = np.random.default_rng(config.seed)
    log = TrainLog()
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    n = len(X)
    network.train()
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        lr = config.lr_at(epoch)
        order = rng.permutation(n)
        batch_losses = []
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            network.zero_grad()
            loss = loss_fn(network(_inputs(X[idx])), Y[idx], config.loss)
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(epoch, b, value)
            backward(loss)
            opt.step(lr)
            batch_losses.append(value)
        rec = EpochRecord(epoch, float(np.mean(batch_losses)), lr)
        if val_cases:
            rep = evaluate(network, val_cases)
            rec.val_dsc = rep.mean.get("dsc", math.nan)
            rec.val_mhd = rep.mean.get("mhd", math.nan)
            rec.val_vs = rep.mean.get("vs", math.nan)
        rec.wall_time = time.perf_counter() - t0
        log.records.append(rec)
        if ckpt_dir is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            save_checkpoint(ckpt_dir / f"checkpoint_e{epoch:04d}.mdtk", network, epoch)
        if on_epoch is not None:
            on_epoch(rec)
    if ckpt_dir is not None:
        save_checkpoint(ckpt_dir / "checkpoint.mdtk", network, config.epochs)
    return network, log
