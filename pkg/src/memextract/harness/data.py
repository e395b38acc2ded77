"""Synthetic training sets: Gaussian mixtures and tiny structured image grids."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DATASET_KINDS = ("gaussian_mixture", "tiny_image_grid")


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "tiny_image_grid"
    n: int = 64
    dim: int = 64
    k: int = 8
    seed: int = 0
    # gaussian_mixture: component std; tiny_image_grid: share of class-prototype
    # variance in each image (the rest is a per-image pattern).
    spread: float = 0.5
    max_freq: int = 2
    gain: float = 1.5


@dataclass
class Dataset:
    x: np.ndarray
    labels: np.ndarray
    centers: np.ndarray


def _check(spec: DatasetSpec):
    if spec.kind not in DATASET_KINDS:
        raise ValueError(f"unknown dataset kind {spec.kind!r}")
    if spec.n < 2:
        raise ValueError("dataset needs N >= 2")
    if spec.k < 1 or spec.k > spec.n:
        raise ValueError("need 1 <= k <= N")
    if spec.dim < 1:
        raise ValueError("dim must be positive")
    if spec.kind == "tiny_image_grid" and math.isqrt(spec.dim) ** 2 != spec.dim:
        raise ValueError("tiny_image_grid needs a square dim")


def smooth_field(side: int, max_freq: int, rng: np.random.Generator, count: int) -> np.ndarray:
    """``count`` random unit-variance fields of low-frequency 2-d cosines, flattened."""
    yy, xx = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    coords = np.stack([yy.ravel(), xx.ravel()], axis=1) / side
    freqs = [(a, b) for a in range(max_freq + 1) for b in range(max_freq + 1) if a or b]
    basis = np.stack([np.cos(2 * math.pi * (coords @ np.array(f, dtype=float)) + ph)
                      for f in freqs for ph in (0.0, math.pi / 2)], axis=1)
    fields = rng.standard_normal((count, basis.shape[1])) @ basis.T
    fields -= fields.mean(axis=1, keepdims=True)
    fields /= fields.std(axis=1, keepdims=True)
    return fields


def synth_dataset(spec: DatasetSpec) -> Dataset:
    """Deterministic for a fixed spec; values lie in ``[-1, 1]``."""
    _check(spec)
    rng = np.random.default_rng(spec.seed)
    labels = rng.permutation(np.arange(spec.n) % spec.k).astype(np.int64)
    if spec.kind == "gaussian_mixture":
        centers = rng.uniform(-0.5, 0.5, size=(spec.k, spec.dim))
        x = centers[labels] + spec.spread * rng.standard_normal((spec.n, spec.dim))
        return Dataset(np.clip(x, -1.0, 1.0), labels, centers)
    side = math.isqrt(spec.dim)
    protos = smooth_field(side, spec.max_freq, rng, spec.k)
    own = smooth_field(side, spec.max_freq, rng, spec.n)
    a = math.sqrt(spec.spread)
    b = math.sqrt(1.0 - spec.spread)
    x = np.tanh(spec.gain * (a * protos[labels] + b * own) / 2.0)
    return Dataset(x, labels, np.tanh(spec.gain * a * protos / 2.0))
