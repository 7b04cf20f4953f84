"""Synthetic two-class texture images and patient manifests for testing."""
from __future__ import annotations

import numpy as np

from .data import ArrayDataset, ImageRecord, Manifest


def grating(rng, size: int) -> np.ndarray:
    period = rng.uniform(4.0, 10.0)
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    y, x = np.mgrid[0:size, 0:size]
    wave = np.sin(2 * np.pi * (x * np.cos(theta) + y * np.sin(theta)) / period + phase)
    return 0.5 + 0.4 * wave


def checkerboard(rng, size: int) -> np.ndarray:
    cell = int(rng.integers(3, 9))
    oy, ox = rng.integers(0, cell, size=2)
    y, x = np.mgrid[0:size, 0:size]
    board = ((y + oy) // cell + (x + ox) // cell) % 2
    return 0.1 + 0.8 * board


def texture_dataset(n: int, size: int = 64, seed: int = 0, noise: float = 0.05,
                    patients_per_class: int | None = None) -> ArrayDataset:
    """Alternating gratings (label 0) and checkerboards (label 1) with RGB tint and noise."""
    rng = np.random.default_rng(seed)
    images = np.empty((n, size, size, 3), dtype=np.float32)
    labels = np.arange(n) % 2
    for i, lab in enumerate(labels):
        base = checkerboard(rng, size) if lab else grating(rng, size)
        tint = rng.uniform(0.8, 1.0, size=3)
        img = base[..., None] * tint + rng.normal(0, noise, size=(size, size, 3))
        images[i] = np.clip(img, 0, 1)
    per = patients_per_class or max(1, n // 2)
    patient_ids = [f"{'BM'[lab]}{(i // 2) % per:03d}" for i, lab in enumerate(labels)]
    return ArrayDataset(images, labels, patient_ids, [f"tex{i:04d}" for i in range(n)])


def synthetic_manifest(n_benign: int = 24, n_malignant: int = 58, images_per_patient: int = 3,
                       magnifications=(200,)) -> Manifest:
    """A manifest of fictitious records (no files) with the requested patient mix."""
    records = []
    for cls, n, code, sub in (("benign", n_benign, "B", "fibroadenoma"),
                              ("malignant", n_malignant, "M", "ductal")):
        for p in range(n):
            pid = f"{code}-{p:04d}"
            for mag in magnifications:
                for s in range(images_per_patient):
                    records.append(ImageRecord(f"SOB_{code}_X-{pid}-{mag}-{s + 1:03d}.png", pid, cls,
                                               sub, mag, s + 1))
    return Manifest(records)
