"""Reproducible synthetic non-IID binary classification data.

Each client draws balanced samples from two unit-covariance Gaussians whose
means are separated by class_sep and then moved through a client-specific
random rotation and mean shift. A single heterogeneity dial in [0, 1]
interpolates from one shared distribution (0) to strongly client-specific
distributions (1), emulating per-subject signal variability without any real
recordings. Features are z-scored per client with statistics fitted on the
training split only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


from .errors import ConfigError, ContractError, InputError
from .nn import ModelParams, forward
from .seeding import data_streams

# largest rotation angle (radians) and mean-shift scale reached at heterogeneity 1
ROTATION_ANGLE = 2.0
SHIFT_SCALE = 1.5


@dataclass(frozen=True)
class DataConfig:
    """Generator settings for one federated dataset."""

    n_clients: int = 8
    n_per_client: int = 400
    n_features: int = 16
    heterogeneity: float = 0.7
    class_sep: float = 2.0
    test_fraction: float = 0.25
    label_ratio: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_clients < 2:
            raise ConfigError(f"n_clients must be >= 2 (got {self.n_clients})")
        if self.n_per_client < 8:
            raise ConfigError(f"n_per_client must be >= 8 (got {self.n_per_client})")
        if self.n_features < 2:
            raise ConfigError(f"n_features must be >= 2 (got {self.n_features})")
        if not 0.0 <= self.heterogeneity <= 1.0:
            raise ConfigError(f"heterogeneity must be in [0, 1] (got {self.heterogeneity})")
        if self.class_sep <= 0:
            raise ConfigError(f"class_sep must be > 0 (got {self.class_sep})")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(f"test_fraction must be in (0, 1) (got {self.test_fraction})")
        if not 0.0 < self.label_ratio <= 1.0:
            raise ConfigError(f"label_ratio must be in (0, 1] (got {self.label_ratio})")


@dataclass
class SampleBatch:
    """A labelled batch: x is (n, d) float64, y is (n,) int64 in {0, 1}."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise InputError(f"inconsistent batch shapes x={self.x.shape} y={self.y.shape}")

    def __len__(self) -> int:
        return self.x.shape[0]

    def take(self, idx: np.ndarray) -> "SampleBatch":
        return SampleBatch(self.x[idx], self.y[idx])


def _client_transform(rng: np.random.Generator, d: int, heterogeneity: float):
    """Client-specific rotation and shift; identity transform at heterogeneity 0.

    The rotation turns the class-separation axis by heterogeneity *
    ROTATION_ANGLE radians inside the plane spanned by that axis and a
    client-specific random direction. The component of the decision boundary
    along the common axis stays shared across clients while the rotated
    component is private, so the dial trades shared structure for
    client-specific structure.
    """
    e1 = np.zeros(d)
    e1[0] = 1.0
    u = rng.normal(size=d)
    u -= u[0] * e1
    u /= np.linalg.norm(u)
    theta = heterogeneity * ROTATION_ANGLE
    # Givens rotation in the (e1, u) plane; identity on the orthogonal complement
    rotation = (
        np.eye(d)
        + (np.cos(theta) - 1.0) * (np.outer(e1, e1) + np.outer(u, u))
        + np.sin(theta) * (np.outer(u, e1) - np.outer(e1, u))
    )
    shift = heterogeneity * SHIFT_SCALE * rng.normal(size=d)
    return rotation, shift


def _split_indices(n: int, test_fraction: float, rng: np.random.Generator):
    n_test = max(1, int(round(test_fraction * n)))
    n_test = min(n_test, n - 1)
    perm = rng.permutation(n)
    return perm[n_test:], perm[:n_test]


def generate(config: DataConfig) -> list[tuple[SampleBatch, SampleBatch]]:
    """Per-client (train, test) batches; a pure function of the config."""
    d = config.n_features
    half_sep = config.class_sep / 2.0
    base_means = np.zeros((2, d))
    base_means[0, 0] = -half_sep
    base_means[1, 0] = +half_sep

    out = []
    for rng in data_streams(config.seed, config.n_clients):
        rotation, shift = _client_transform(rng, d, config.heterogeneity)
        centers = base_means @ rotation.T + shift

        n0 = math.ceil(config.n_per_client / 2)
        n1 = config.n_per_client - n0
        parts_x, parts_y = [], []
        for cls, n_cls in ((0, n0), (1, n1)):
            x = centers[cls] + rng.normal(size=(n_cls, d))
            train_idx, test_idx = _split_indices(n_cls, config.test_fraction, rng)
            parts_x.append((x[train_idx], x[test_idx]))
            parts_y.append((np.full(len(train_idx), cls), np.full(len(test_idx), cls)))

        train_x = np.concatenate([parts_x[0][0], parts_x[1][0]])
        train_y = np.concatenate([parts_y[0][0], parts_y[1][0]])
        test_x = np.concatenate([parts_x[0][1], parts_x[1][1]])
        test_y = np.concatenate([parts_y[0][1], parts_y[1][1]])

        # z-score with statistics fitted on the training split only
        mean = train_x.mean(axis=0)
        std = train_x.std(axis=0)
        std = np.where(std > 1e-12, std, 1.0)
        train_x = (train_x - mean) / std
        test_x = (test_x - mean) / std

        order = rng.permutation(len(train_y))
        train = SampleBatch(train_x[order], train_y[order])
        order = rng.permutation(len(test_y))
        test = SampleBatch(test_x[order], test_y[order])

        if config.label_ratio < 1.0:
            train = subsample_labels(train, config.label_ratio, rng)
        out.append((train, test))
    return out


def subsample_labels(train: SampleBatch, ratio: float, rng: np.random.Generator) -> SampleBatch:
    """Class-stratified subsample keeping ceil(ratio * n) samples, >= 1 per class."""
    if not 0.0 < ratio <= 1.0:
        raise ConfigError(f"label ratio must be in (0, 1] (got {ratio})")
    if ratio == 1.0:
        return train
    n = len(train)
    classes = np.unique(train.y)
    n_keep = max(math.ceil(ratio * n), len(classes))

    keep_idx = []
    if len(classes) == 1:
        counts = {int(classes[0]): n_keep}
    else:
        n1 = int((train.y == 1).sum())
        keep1 = int(np.clip(round(n_keep * n1 / n), 1, n_keep - 1))
        counts = {0: n_keep - keep1, 1: keep1}
    for cls, k in counts.items():
        idx_cls = np.flatnonzero(train.y == cls)
        chosen = idx_cls[rng.permutation(len(idx_cls))[:k]]
        keep_idx.append(chosen)
    keep = np.sort(np.concatenate(keep_idx))
    return train.take(keep)


def accuracy(model: ModelParams, test: SampleBatch) -> float:
    """Fraction of correctly classified samples; probability ties predict class 0."""
    if len(test) == 0:
        raise ContractError("cannot evaluate accuracy on an empty test set")
    probs = forward(model, test.x).probs
    preds = (probs[:, 1] > probs[:, 0]).astype(np.int64)
    return float(np.mean(preds == test.y))


def save_dataset(client_data: list[tuple[SampleBatch, SampleBatch]], path: str):
    """Write the dataset as a columnar text file for cross-run fixture sharing."""
    d = client_data[0][0].x.shape[1]
    k = len(client_data)
    lines = [f"d={d},K={k}"]
    lines.append("client_id,split,y," + ",".join(f"x_{j + 1}" for j in range(d)))
    for cid, (train, test) in enumerate(client_data, start=1):
        for split_name, batch in (("train", train), ("test", test)):
            for i in range(len(batch)):
                xs = ",".join(repr(float(v)) for v in batch.x[i])
                lines.append(f"{cid},{split_name},{int(batch.y[i])},{xs}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path: str) -> list[tuple[SampleBatch, SampleBatch]]:
    """Read a dataset written by save_dataset."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    try:
        meta = dict(item.split("=") for item in lines[0].split(","))
        d, k = int(meta["d"]), int(meta["K"])
    except (ValueError, KeyError, IndexError) as exc:
        raise InputError(f"malformed dataset header in {path}") from exc
    rows = {cid: {"train": [], "test": []} for cid in range(1, k + 1)}
    for ln in lines[2:]:
        cells = ln.split(",")
        if len(cells) != 3 + d:
            raise InputError(f"malformed dataset row in {path}: {ln[:60]}")
        cid, split, y = int(cells[0]), cells[1], int(cells[2])
        if cid not in rows or split not in ("train", "test"):
            raise InputError(f"unknown client or split in {path}: {ln[:60]}")
        rows[cid][split].append((y, [float(v) for v in cells[3:]]))
    out = []
    for cid in range(1, k + 1):
        batches = []
        for split in ("train", "test"):
            pairs = rows[cid][split]
            if not pairs:
                raise InputError(f"client {cid} has no {split} rows in {path}")
            y = np.array([p[0] for p in pairs], dtype=np.int64)
            x = np.array([p[1] for p in pairs], dtype=np.float64)
            batches.append(SampleBatch(x, y))
        out.append((batches[0], batches[1]))
    return out
