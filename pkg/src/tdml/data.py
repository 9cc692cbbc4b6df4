"""Seeded Gaussian-blob classification task used as the toy workload."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DataConfig:
    num_classes: int = 4
    input_dim: int = 16
    n_train: int = 4000
    n_test: int = 1000
    separation: float = 0.6


def _balanced(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.arange(n) % k
    return rng.permutation(labels)


def make_blobs(cfg: DataConfig, seed: int):
    """Return ``(x_train, y_train, x_test, y_test)`` with float32 features.

    Class centres are drawn once from ``N(0, separation**2 I)``; samples add
    unit-variance isotropic noise.  Both splits are class-balanced up to
    rounding.
    """
    rng = np.random.default_rng(seed)
    centres = rng.normal(0.0, cfg.separation, size=(cfg.num_classes, cfg.input_dim))

    def draw(n):
        y = _balanced(n, cfg.num_classes, rng)
        x = centres[y] + rng.normal(size=(n, cfg.input_dim))
        return x.astype(np.float32), y.astype(np.int64)

    x_tr, y_tr = draw(cfg.n_train)
    x_te, y_te = draw(cfg.n_test)
    return x_tr, y_tr, x_te, y_te
