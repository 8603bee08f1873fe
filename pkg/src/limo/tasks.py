"""Synthetic few-shot tasks, episode splitting and the embedding container.

Container layout (little-endian)::

    offset 0   magic    b"LIMOEMB1"
    offset 8   u32      version (= 1)
    offset 12  u32      N   image rows
    offset 16  u32      d   embedding width
    offset 20  u32      K   classes
    offset 24  f32[N*d] image embeddings, row-major
               f32[K*d] class embeddings, row-major
               u32[N]   labels

Values are widened to float64 on load.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Rng
from .errors import ConfigurationError, EpisodeError, FormatError

MAGIC = b"LIMOEMB1"
VERSION = 1
HEADER = struct.Struct("<8sIIII")
NORM_TOL = 1e-3


@dataclass(frozen=True)
class GeneratorSpec:
    K: int = 10
    input_dim: int = 16
    samples_per_class: int = 29
    concentration: float = 10.0
    class_correlation: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.K < 2:
            raise ConfigurationError(f"need K >= 2 classes, got {self.K}")
        if self.input_dim < 2:
            raise ConfigurationError("input_dim must be >= 2")
        if self.samples_per_class < 2:
            raise ConfigurationError("samples_per_class must be >= 2 (one shot plus one query)")
        if not self.concentration > 0:
            raise ConfigurationError(f"concentration must be > 0, got {self.concentration}")
        if not 0.0 <= self.class_correlation < 1.0:
            raise ConfigurationError("class_correlation must lie in [0, 1)")


@dataclass
class Task:
    labels: np.ndarray
    class_tokens: np.ndarray
    K: int
    mode: str = "raw"  # or "precomputed"
    inputs: np.ndarray | None = None
    embeddings: np.ndarray | None = None

    @property
    def features(self) -> np.ndarray:
        return self.inputs if self.mode == "raw" else self.embeddings

    @property
    def num_samples(self) -> int:
        return len(self.labels)


@dataclass
class Episode:
    support: np.ndarray
    support_labels: np.ndarray
    query: np.ndarray
    K: int
    shots: int = field(default=0)

    @property
    def support_onehot(self) -> np.ndarray:
        z = np.zeros((len(self.support), self.K))
        z[np.arange(len(self.support)), self.support_labels] = 1.0
        return z


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def generate_task(spec: GeneratorSpec, rng: Rng | None = None) -> Task:
    """Clustered points on the unit sphere plus noisy class tokens.

    Class means share a common direction with weight ``class_correlation``,
    so their expected pairwise cosine is about that value.  Samples are
    ``mean + N(0, 1/concentration^2)`` per coordinate, renormalised (an
    approximation of a von Mises-Fisher draw).  Class tokens are the means
    perturbed with half that noise, renormalised.
    """
    spec.validate()
    rng = rng if rng is not None else Rng(spec.seed)
    d, K, n = spec.input_dim, spec.K, spec.samples_per_class
    shared = _unit_rows(rng.normal(d))
    own = _unit_rows(rng.normal((K, d)))
    rho = spec.class_correlation
    means = _unit_rows(np.sqrt(rho) * shared + np.sqrt(1.0 - rho) * own)

    sigma = 1.0 / spec.concentration
    labels = np.repeat(np.arange(K), n)
    inputs = _unit_rows(means[labels] + rng.normal((K * n, d), sigma))
    tokens = _unit_rows(means + rng.normal((K, d), 0.5 * sigma))
    return Task(labels=labels, class_tokens=tokens, K=K, mode="raw", inputs=inputs)


def split_episode(task: Task, shots: int, query_per_class: int, rng: Rng) -> Episode:
    """Draw ``shots`` support and ``query_per_class`` query samples per class
    without replacement; support and query are disjoint."""
    if shots < 1 or query_per_class < 1:
        raise EpisodeError("shots and query_per_class must be >= 1")
    support, support_labels, query = [], [], []
    for k in range(task.K):
        members = np.flatnonzero(task.labels == k)
        if len(members) < shots + query_per_class:
            raise EpisodeError(
                f"class {k} has {len(members)} samples, need {shots + query_per_class}")
        picked = members[rng.permutation(len(members))[: shots + query_per_class]]
        support.extend(picked[:shots])
        support_labels.extend([k] * shots)
        query.extend(picked[shots:])
    return Episode(np.asarray(support, dtype=np.int64), np.asarray(support_labels, dtype=np.int64),
                   np.asarray(query, dtype=np.int64), task.K, shots)


# -- embedding container ------------------------------------------------------------
def write_container(path, image_emb, class_emb, labels) -> None:
    image_emb = np.asarray(image_emb)
    class_emb = np.asarray(class_emb)
    labels = np.asarray(labels)
    n, d = image_emb.shape
    k = class_emb.shape[0]
    if class_emb.shape[1] != d or labels.shape != (n,):
        raise ConfigurationError("inconsistent container shapes")
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, n, d, k))
        fh.write(image_emb.astype("<f4").tobytes())
        fh.write(class_emb.astype("<f4").tobytes())
        fh.write(labels.astype("<u4").tobytes())


def read_container(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Parse a container into ``(image_emb, class_emb, labels)`` without
    normalising; raises :class:`FormatError` and returns nothing on any defect."""
    buf = Path(path).read_bytes()
    if len(buf) < HEADER.size:
        raise FormatError(f"truncated header ({len(buf)} of {HEADER.size} bytes)", len(buf))
    magic, version, n, d, k = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 8)
    if d == 0 or k < 2:
        raise FormatError(f"invalid shape d={d}, K={k}", 16)
    img_off = HEADER.size
    cls_off = img_off + 4 * n * d
    lab_off = cls_off + 4 * k * d
    end = lab_off + 4 * n
    if len(buf) < end:
        raise FormatError(f"truncated body ({len(buf)} of {end} bytes)", len(buf))
    if len(buf) > end:
        raise FormatError(f"{len(buf) - end} trailing bytes", end)
    images = np.frombuffer(buf, "<f4", n * d, img_off).reshape(n, d).astype(np.float64)
    classes = np.frombuffer(buf, "<f4", k * d, cls_off).reshape(k, d).astype(np.float64)
    labels = np.frombuffer(buf, "<u4", n, lab_off).astype(np.int64)
    bad = np.flatnonzero(labels >= k)
    if bad.size:
        i = int(bad[0])
        raise FormatError(f"label {labels[i]} at row {i} outside [0, {k})", lab_off + 4 * i)
    for arr, off, what in ((images, img_off, "image"), (classes, cls_off, "class")):
        if not np.isfinite(arr).all():
            r = int(np.argwhere(~np.isfinite(arr))[0][0])
            raise FormatError(f"non-finite {what} row {r}", off + 4 * d * r)
    return images, classes, labels


def import_embeddings(path) -> Task:
    """Load a container as a precomputed-mode task with unit-norm rows."""
    images, classes, labels = read_container(path)
    d = images.shape[1]
    n = images.shape[0]
    k = classes.shape[0]
    offsets = (HEADER.size, HEADER.size + 4 * n * d)
    for arr, off, what in ((images, offsets[0], "image"), (classes, offsets[1], "class")):
        dev = np.abs(np.linalg.norm(arr, axis=1) - 1.0)
        if dev.size and dev.max() > NORM_TOL:
            r = int(dev.argmax())
            raise FormatError(f"{what} row {r} norm deviates from 1 by {dev[r]:.3g}", off + 4 * d * r)
    missing = np.setdiff1d(np.arange(k), labels)
    if missing.size:
        raise FormatError(f"class {int(missing[0])} has no samples",
                          HEADER.size + 4 * (n * d + k * d))
    return Task(labels=labels, class_tokens=_unit_rows(classes), K=k, mode="precomputed",
                embeddings=_unit_rows(images))
