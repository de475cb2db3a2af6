"""Synthetic paired-encoder datasets and the SPNE embedding file format.

Each class is a point in a latent concept space.  A modality is a fixed
random linear map out of that space followed by tanh, so all modalities
see the same concepts through different nonlinear lenses.  Instances add
modality-specific Gaussian noise around their class image; rows with the
same position are the same underlying instance across modalities.

Vectors are quantized to float32 at generation time because SPNE files
store float32; everything downstream then round-trips bitwise.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ._binio import ByteReader
from .errors import ConfigError, DataError, FormatError
from .tensor import Rng

SPNE_MAGIC = b"SPNE"
SPNE_VERSION = 1
TAG_BYTES = 8


@dataclass(frozen=True)
class ModalitySpec:
    """One synthetic encoder: output width and noise level."""

    tag: str
    dim: int
    noise: float = 0.05

    def __post_init__(self):
        if not self.tag:
            raise ConfigError("modality tag must be non-empty")
        if len(self.tag.encode("utf-8")) > TAG_BYTES:
            raise ConfigError(
                f"modality tag {self.tag!r} exceeds {TAG_BYTES} bytes")
        if self.dim < 2:
            raise ConfigError(f"modality {self.tag!r} dim must be at least 2, "
                              f"got {self.dim}")
        if self.noise < 0.0:
            raise ConfigError(
                f"modality {self.tag!r} noise must be non-negative, got {self.noise}")


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a paired multimodal dataset.

    semantic_tag names the modality whose lens renders class prototypes
    (defaults to the last one, the text-like branch by convention).
    """

    classes: int = 10
    latent_dim: int = 16
    instances_per_class: int = 20
    modalities: tuple[ModalitySpec, ...] = (ModalitySpec("mod_a", 32),
                                            ModalitySpec("mod_b", 32))
    seed: int = 0
    semantic_tag: str | None = None

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.classes}")
        if self.latent_dim < 2:
            raise ConfigError(f"latent_dim must be at least 2, got {self.latent_dim}")
        if self.instances_per_class < 1:
            raise ConfigError(f"instances_per_class must be positive, "
                              f"got {self.instances_per_class}")
        if len(self.modalities) < 1:
            raise ConfigError("need at least one modality")
        tags = [m.tag for m in self.modalities]
        if len(set(tags)) != len(tags):
            raise ConfigError(f"duplicate modality tags in {tags}")
        if self.semantic_tag is not None and self.semantic_tag not in tags:
            raise ConfigError(f"semantic_tag {self.semantic_tag!r} is not one of {tags}")

    @property
    def semantic_source(self) -> str:
        return self.semantic_tag or self.modalities[-1].tag

    def class_names(self) -> list[str]:
        width = len(str(self.classes - 1))
        return [f"class_{c:0{width}d}" for c in range(self.classes)]


@dataclass
class LabeledEmbeddings:
    """Embedding rows with class and instance labels, from one modality."""

    vectors: np.ndarray
    class_ids: np.ndarray
    instance_ids: np.ndarray
    class_names: list[str]
    modality: str

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        self.instance_ids = np.asarray(self.instance_ids, dtype=np.int64)
        n = self.vectors.shape[0]
        if self.vectors.ndim != 2:
            raise DataError(f"vectors must be [rows x dim], got {self.vectors.shape}")
        if self.class_ids.shape != (n,) or self.instance_ids.shape != (n,):
            raise DataError(
                f"label counts {self.class_ids.shape}/{self.instance_ids.shape} "
                f"do not match {n} rows")
        if n and (self.class_ids.min() < 0
                  or self.class_ids.max() >= len(self.class_names)):
            raise DataError(
                f"class id outside [0, {len(self.class_names)}) in modality "
                f"{self.modality!r}")

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def take(self, rows: np.ndarray) -> "LabeledEmbeddings":
        """Subset by row positions, keeping labels aligned."""
        return LabeledEmbeddings(self.vectors[rows], self.class_ids[rows],
                                 self.instance_ids[rows], list(self.class_names),
                                 self.modality)


def _quantize(values: np.ndarray) -> np.ndarray:
    return values.astype(np.float32).astype(np.float64)


def _streams(spec: SyntheticSpec, rng: Rng | None) -> list[Rng]:
    # fixed layout: centers, then (map, noise) per modality in spec order;
    # an explicit rng must be fresh, since splitting the same object twice
    # yields new children
    root = rng if rng is not None else Rng(spec.seed)
    return root.split(1 + 2 * len(spec.modalities))


def gen_synthetic(spec: SyntheticSpec,
                  rng: Rng | None = None) -> dict[str, LabeledEmbeddings]:
    """Paired instance embeddings for every modality in the spec.

    Row i is the same instance in every modality; with zero noise all
    instances of a class collapse onto the class image exactly.
    """
    streams = _streams(spec, rng)
    centers = streams[0].normal((spec.classes, spec.latent_dim))
    names = spec.class_names()
    n = spec.classes * spec.instances_per_class
    class_ids = np.repeat(np.arange(spec.classes), spec.instances_per_class)
    instance_ids = np.arange(n)
    out: dict[str, LabeledEmbeddings] = {}
    for i, modality in enumerate(spec.modalities):
        lens = streams[1 + 2 * i].glorot(spec.latent_dim, modality.dim)
        rows = np.tanh(centers @ lens)[class_ids]
        if modality.noise > 0.0:
            rows = rows + streams[2 + 2 * i].normal((n, modality.dim),
                                                    std=modality.noise)
        out[modality.tag] = LabeledEmbeddings(_quantize(rows), class_ids,
                                              instance_ids, names, modality.tag)
    return out


def semantic_modality(spec: SyntheticSpec,
                      rng: Rng | None = None) -> LabeledEmbeddings:
    """One noise-free prototype row per class, through the semantic lens.

    The rows match what gen_synthetic would produce for the same
    modality at zero noise, so prototypes pair with instances by class.
    """
    streams = _streams(spec, rng)
    centers = streams[0].normal((spec.classes, spec.latent_dim))
    index = [m.tag for m in spec.modalities].index(spec.semantic_source)
    modality = spec.modalities[index]
    lens = streams[1 + 2 * index].glorot(spec.latent_dim, modality.dim)
    images = np.tanh(centers @ lens)
    return LabeledEmbeddings(_quantize(images), np.arange(spec.classes),
                             np.arange(spec.classes), spec.class_names(),
                             modality.tag)


@dataclass
class KShotSplit:
    """Support rows for adaptation and the disjoint query remainder."""

    support: LabeledEmbeddings
    query: LabeledEmbeddings


def kshot_split(data: LabeledEmbeddings, k: int, rng: Rng) -> KShotSplit:
    """Pick k support instances per class at random; the rest query.

    Every class must keep at least one query row, so it needs more than
    k instances.
    """
    if k < 1:
        raise ConfigError(f"k must be positive, got {k}")
    support_rows: list[np.ndarray] = []
    for c in range(len(data.class_names)):
        rows = np.flatnonzero(data.class_ids == c)
        if rows.shape[0] <= k:
            raise DataError(
                f"class {data.class_names[c]!r} has {rows.shape[0]} instances, "
                f"needs more than {k} for a {k}-shot split")
        chosen = rows[rng.permutation(rows.shape[0])[:k]]
        support_rows.append(chosen)
    support = np.sort(np.concatenate(support_rows))
    mask = np.zeros(data.count, dtype=bool)
    mask[support] = True
    return KShotSplit(support=data.take(np.flatnonzero(mask)),
                      query=data.take(np.flatnonzero(~mask)))


def kshot_split_paired(datasets: Mapping[str, LabeledEmbeddings], k: int,
                       rng: Rng) -> dict[str, KShotSplit]:
    """One k-shot selection applied to every modality.

    Support membership is decided on instance ids, so the same
    underlying instances are support everywhere.
    """
    if not datasets:
        raise ConfigError("kshot_split_paired needs at least one modality")
    first = next(iter(datasets.values()))
    reference = kshot_split(first, k, rng)
    support_ids = set(reference.support.instance_ids.tolist())
    out: dict[str, KShotSplit] = {}
    for tag, data in datasets.items():
        mask = np.isin(data.instance_ids, list(support_ids))
        out[tag] = KShotSplit(support=data.take(np.flatnonzero(mask)),
                              query=data.take(np.flatnonzero(~mask)))
    return out


def write_embeddings(data: LabeledEmbeddings, path) -> None:
    """Write one modality's rows as an SPNE file.

    Layout, little-endian: magic, u32 version, u32 rows, u32 dim,
    u32 classes, float32 vectors row-major, u32 class ids, u32 instance
    ids, length-prefixed class names, 8-byte NUL-padded modality tag.
    """
    if data.count < 1:
        raise DataError(f"refusing to write empty embedding set to {path}")
    tag = data.modality.encode("utf-8")
    if len(tag) > TAG_BYTES:
        raise DataError(f"modality tag {data.modality!r} exceeds {TAG_BYTES} bytes")
    if data.instance_ids.min() < 0 or data.instance_ids.max() >= 2 ** 32:
        raise DataError("instance ids must fit in an unsigned 32-bit integer")
    blob = bytearray()
    blob += SPNE_MAGIC
    blob += struct.pack("<IIII", SPNE_VERSION, data.count, data.dim,
                        len(data.class_names))
    blob += np.ascontiguousarray(data.vectors, dtype="<f4").tobytes()
    blob += data.class_ids.astype("<u4").tobytes()
    blob += data.instance_ids.astype("<u4").tobytes()
    for name in data.class_names:
        encoded = name.encode("utf-8")
        blob += struct.pack("<I", len(encoded))
        blob += encoded
    blob += tag.ljust(TAG_BYTES, b"\x00")
    Path(path).write_bytes(bytes(blob))


def read_embeddings(path) -> LabeledEmbeddings:
    """Parse an SPNE file; malformed input reports the failing offset."""
    r = ByteReader(Path(path).read_bytes(), path)
    if r.take(4, "magic") != SPNE_MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0, expected {SPNE_MAGIC!r}")
    version = r.u32("version")
    if version != SPNE_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    rows = r.u32("row count")
    dim = r.u32("dim")
    classes = r.u32("class count")
    if rows < 1:
        raise FormatError(f"{path}: zero rows declared at byte 8")
    if dim < 1:
        raise FormatError(f"{path}: zero dim declared at byte 12")
    if classes < 1:
        raise FormatError(f"{path}: zero classes declared at byte 16")
    vec_at = r.offset
    vectors = np.frombuffer(r.take(4 * rows * dim, "vectors"),
                            dtype="<f4").reshape(rows, dim)
    if not np.all(np.isfinite(vectors)):
        raise FormatError(f"{path}: non-finite vector value at byte {vec_at}")
    ids_at = r.offset
    class_ids = np.frombuffer(r.take(4 * rows, "class ids"), dtype="<u4")
    if class_ids.max() >= classes:
        raise FormatError(
            f"{path}: class id {int(class_ids.max())} at byte {ids_at} "
            f"outside [0, {classes})")
    instance_ids = np.frombuffer(r.take(4 * rows, "instance ids"), dtype="<u4")
    names = []
    for i in range(classes):
        at = r.offset
        length = r.u32(f"class name {i} length")
        try:
            names.append(r.take(length, f"class name {i}").decode("utf-8"))
        except UnicodeDecodeError as err:
            raise FormatError(f"{path}: class name {i} at byte {at} "
                              f"is not UTF-8: {err}")
    tag_at = r.offset
    tag_raw = r.take(TAG_BYTES, "modality tag")
    r.expect_end()
    try:
        tag = tag_raw.rstrip(b"\x00").decode("utf-8")
    except UnicodeDecodeError as err:
        raise FormatError(f"{path}: modality tag at byte {tag_at} "
                          f"is not UTF-8: {err}")
    return LabeledEmbeddings(vectors.astype(np.float64),
                             class_ids.astype(np.int64),
                             instance_ids.astype(np.int64), names, tag)
