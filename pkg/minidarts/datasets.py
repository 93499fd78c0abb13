#!/usr/bin/env python3
"""
Synthetic Datasets
==================

Small labelled datasets standing in for an image benchmark:

- gaussian_blobs: one isotropic Gaussian per class around a random center
- two_spirals: the classic interleaved spirals, lifted isometrically into
  ``input_dim`` dimensions

Every draw comes from one seeded numpy Generator, so a (spec, input_dim)
pair always yields the same arrays.
"""

import logging
from typing import NamedTuple

import numpy as np

from .bilevel_trainer import Split
from .errors import ConfigError
from .run_schema import DatasetSpec

logger = logging.getLogger(__name__)

SPIRAL_TURNS = 8 * np.pi
BLOB_CENTER_SCALE = 3.0


class SyntheticDataset(NamedTuple):
    generator: str
    features: np.ndarray
    labels: np.ndarray
    train: Split
    val: Split


def _class_sizes(n: int, classes: int) -> np.ndarray:
    sizes = np.full(classes, n // classes)
    sizes[: n % classes] += 1
    return sizes


def _blobs(spec: DatasetSpec, input_dim: int, rng: np.random.Generator):
    centers = rng.normal(scale=BLOB_CENTER_SCALE, size=(spec.classes, input_dim))
    sizes = _class_sizes(spec.n_samples, spec.classes)
    labels = np.repeat(np.arange(spec.classes), sizes)
    features = centers[labels] + spec.noise * rng.normal(size=(spec.n_samples, input_dim))
    return features, labels


def _spirals(spec: DatasetSpec, input_dim: int, rng: np.random.Generator):
    if spec.classes != 2:
        raise ConfigError(f"two_spirals has exactly 2 classes, got {spec.classes}")
    if input_dim < 2:
        raise ConfigError("two_spirals needs input_dim >= 2")
    sizes = _class_sizes(spec.n_samples, 2)
    labels = np.repeat(np.arange(2), sizes)

    theta = np.sqrt(rng.random(spec.n_samples)) * SPIRAL_TURNS
    radius = 2 * theta + np.pi
    radius = np.where(labels == 0, radius, -radius)
    points = np.column_stack([np.cos(theta) * radius, np.sin(theta) * radius])
    points = points + spec.noise * rng.normal(size=points.shape)
    points = points / (2 * SPIRAL_TURNS + np.pi)

    # orthonormal columns: distances between points are preserved
    lift, _ = np.linalg.qr(rng.normal(size=(input_dim, 2)))
    return points @ lift.T, labels


GENERATORS = {"gaussian_blobs": _blobs, "two_spirals": _spirals}


def generate_dataset(spec: DatasetSpec, input_dim: int = 16) -> SyntheticDataset:
    """
    Draw the dataset and split it 50/50 into train and val.

    The split shuffles each class separately so both halves contain every
    class, then shuffles each half.
    """
    if spec.n_samples < 2 * spec.classes:
        raise ConfigError(f"n_samples={spec.n_samples} is too small for {spec.classes} classes (need >= {2 * spec.classes})")
    if spec.noise < 0:
        raise ConfigError(f"noise must be >= 0, got {spec.noise}")
    try:
        make = GENERATORS[spec.generator]
    except KeyError:
        raise ConfigError(f"unknown generator {spec.generator!r}; choose from {sorted(GENERATORS)}") from None

    rng = np.random.default_rng(spec.seed)
    features, labels = make(spec, input_dim, rng)

    train_idx, val_idx = [], []
    for c in range(spec.classes):
        members = rng.permutation(np.flatnonzero(labels == c))
        half = (len(members) + 1) // 2
        train_idx.append(members[:half])
        val_idx.append(members[half:])
    train_idx = rng.permutation(np.concatenate(train_idx))
    val_idx = rng.permutation(np.concatenate(val_idx))

    logger.debug("%s: %d train / %d val samples in %d dims", spec.generator, len(train_idx), len(val_idx), input_dim)
    return SyntheticDataset(
        generator=spec.generator,
        features=features,
        labels=labels,
        train=Split(features[train_idx], labels[train_idx]),
        val=Split(features[val_idx], labels[val_idx]),
    )
