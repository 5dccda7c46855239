"""Desk-scale experiment on the synthetic conjunctive cohort."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import synth_dataset
from .network import NetworkConfig, build_network
from .train import TrainConfig, TrainLog, train


@dataclass
class ToyExperiment:
    seed: int = 0
    train_cases: int = 60
    val_cases: int = 20
    size: tuple[int, int] = (64, 64)
    num_modalities: int = 2
    base_width: int = 8
    depth: int = 4
    epochs: int = 30
    lr0: float = 1e-3
    decay_epoch: int = 30
    batch_size: int = 4

    def datasets(self):
        tr = synth_dataset(self.seed, self.train_cases, self.size, 1, self.num_modalities)
        va = synth_dataset(self.seed, self.val_cases, self.size, 1, self.num_modalities, id_offset=self.train_cases)
        return tr, va

    def network_config(self, fusion: str) -> NetworkConfig:
        return NetworkConfig(
            num_streams=self.num_modalities,
            fusion=fusion,
            base_width=self.base_width,
            depth=self.depth,
            input_spatial=tuple(self.size),
            seed=self.seed,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr0=self.lr0, decay_epoch=self.decay_epoch, epochs=self.epochs, batch_size=self.batch_size, seed=self.seed
        )


def run_toy(exp: ToyExperiment, fusion: str = "hyperdense", on_epoch=None) -> TrainLog:
    tr, va = exp.datasets()
    _, log = train(build_network(exp.network_config(fusion)), tr, exp.train_config(), va, on_epoch=on_epoch)
    return log


def moving_average(values, window: int = 5) -> list[float]:
    """Trailing mean; the first ``window - 1`` entries average what is available."""
    v = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.r_[0.0, v])
    lo = np.maximum(np.arange(1, v.size + 1) - window, 0)
    return list((c[1:] - c[lo]) / (np.arange(1, v.size + 1) - lo))
