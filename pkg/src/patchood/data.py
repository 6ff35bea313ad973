"""Embedding data model, FOBO binary serialization, validation and synthetic fixtures.

A dataset holds per-image embeddings only: one global feature, N patch
features (all unit-norm, so cosine similarity is a plain dot product),
per-patch attention query vectors, the image's global-token key vector,
and an optional class label. OOD records carry no label.

The synthetic fixture generator plants two controllable effects:

* background-class correlation: background patches of class-c images are
  drawn from a class-specific "context" centroid with a configurable
  probability, else from a shared neutral centroid; context patches get
  queries aligned with the global key so the local-to-global attention
  signal is recoverable.
* confusable classes: chosen class-centroid pairs are placed at a fixed
  high cosine similarity.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

MAGIC = b"FOBO"
FORMAT_VERSION = 1
FLAG_HAS_LABELS = 1 << 0
# bits 1-2 of the flags word carry the split tag so round-trips are lossless
_SPLIT_TAGS = ("id_train", "id_test", "ood_test")

NORM_TOL = 1e-5


class DatasetError(ValueError):
    """Raised for malformed datasets or files."""


class FixtureError(ValueError):
    """Raised when a fixture spec cannot be realized."""


@dataclass
class EmbeddingRecord:
    """One image's embeddings: global feature, patch features, attention Q/K."""

    global_feature: np.ndarray   # (d,) unit-norm
    patch_features: np.ndarray   # (N, d) unit-norm rows
    patch_queries: np.ndarray    # (N, d_k) raw attention queries
    global_key: np.ndarray       # (d_k,) raw attention key of the global token
    label: Optional[int] = None  # class index, None for OOD records

    def __eq__(self, other):
        if not isinstance(other, EmbeddingRecord):
            return NotImplemented
        return (
            self.label == other.label
            and np.array_equal(self.global_feature, other.global_feature)
            and np.array_equal(self.patch_features, other.patch_features)
            and np.array_equal(self.patch_queries, other.patch_queries)
            and np.array_equal(self.global_key, other.global_key)
        )


@dataclass
class EmbeddingDataset:
    records: list[EmbeddingRecord]
    class_names: list[str]
    d: int
    d_k: int
    n_patches: int
    split_tag: str = "id_train"

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def __eq__(self, other):
        if not isinstance(other, EmbeddingDataset):
            return NotImplemented
        return (
            self.class_names == other.class_names
            and (self.d, self.d_k, self.n_patches) == (other.d, other.d_k, other.n_patches)
            and self.split_tag == other.split_tag
            and self.records == other.records
        )


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


@dataclass
class FixtureSpec:
    """Knobs for the synthetic embedding generator."""

    n_classes: int = 10
    d: int = 32
    d_k: int = 8
    n_patches: int = 16
    images_per_class: int = 8
    test_images_per_class: int = 8
    ood_images: int = 100
    ood_classes: int = 4
    fg_fraction: float = 0.5
    bg_correlation: float = 0.8
    confusable_pairs: list[tuple[int, int]] = field(default_factory=list)
    confusable_cosine: float = 0.95
    noise_sigma: float = 0.25
    seed: int = 0

    def check(self) -> None:
        if self.n_classes < 2:
            raise FixtureError("need at least 2 classes")
        if not (0.0 < self.fg_fraction <= 1.0):
            raise FixtureError("fg_fraction must be in (0, 1]")
        if not (0.0 <= self.bg_correlation <= 1.0):
            raise FixtureError("bg_correlation must be in [0, 1]")
        if not (0.9 <= self.confusable_cosine < 1.0):
            raise FixtureError("confusable_cosine must be in [0.9, 1)")
        for a, b in self.confusable_pairs:
            if not (0 <= a < self.n_classes and 0 <= b < self.n_classes) or a == b:
                raise FixtureError(f"invalid confusable pair ({a}, {b})")
        if min(self.d, self.d_k, self.n_patches, self.images_per_class, self.ood_classes) < 1:
            raise FixtureError("dimensions and counts must be positive")


@dataclass
class CentroidSet:
    """Unit-norm centroids underlying a fixture; exposed for direct inspection."""

    id_centroids: np.ndarray       # (M, d)
    context_centroids: np.ndarray  # (M, d) per-class background context
    neutral_centroid: np.ndarray   # (d,) shared class-agnostic background
    ood_centroids: np.ndarray      # (K, d)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def validate(ds: EmbeddingDataset) -> ValidationReport:
    """Report every invariant violation with its record index."""
    report = ValidationReport()
    M = ds.n_classes
    want_labels = ds.split_tag != "ood_test"
    for idx, rec in enumerate(ds.records):
        if rec.global_feature.shape != (ds.d,):
            report.violations.append(f"record {idx}: global_feature shape {rec.global_feature.shape} != ({ds.d},)")
            continue
        if rec.patch_features.shape != (ds.n_patches, ds.d):
            report.violations.append(
                f"record {idx}: patch_features shape {rec.patch_features.shape} != ({ds.n_patches}, {ds.d})"
            )
            continue
        if rec.patch_queries.shape != (ds.n_patches, ds.d_k):
            report.violations.append(
                f"record {idx}: patch_queries shape {rec.patch_queries.shape} != ({ds.n_patches}, {ds.d_k})"
            )
            continue
        if rec.global_key.shape != (ds.d_k,):
            report.violations.append(f"record {idx}: global_key shape {rec.global_key.shape} != ({ds.d_k},)")
            continue
        arrays = (rec.global_feature, rec.patch_features, rec.patch_queries, rec.global_key)
        if not all(np.isfinite(a).all() for a in arrays):
            report.violations.append(f"record {idx}: non-finite values")
            continue
        gn = np.linalg.norm(rec.global_feature)
        if abs(gn - 1.0) > NORM_TOL:
            report.violations.append(f"record {idx}: global_feature norm {gn:.6f} deviates from 1")
        pn = np.linalg.norm(rec.patch_features, axis=1)
        bad = np.nonzero(np.abs(pn - 1.0) > NORM_TOL)[0]
        for p in bad:
            report.violations.append(f"record {idx}: patch {p} norm {pn[p]:.6f} deviates from 1")
        if want_labels:
            if rec.label is None:
                report.violations.append(f"record {idx}: missing label in split {ds.split_tag}")
            elif not (0 <= rec.label < M):
                report.violations.append(f"record {idx}: label {rec.label} out of range [0, {M})")
        elif rec.label is not None:
            report.violations.append(f"record {idx}: OOD record carries label {rec.label}")
    return report


# ---------------------------------------------------------------------------
# FOBO binary format (little-endian)
#
# magic "FOBO" | version u32 | flags u32 | M u32 | d u32 | d_k u32 | N u32
# | record_count u64 | M x (name_len u32, UTF-8 bytes)
# | records: label i32 (-1 = none), global_feature d f32,
#            patch_features N*d f32, patch_queries N*d_k f32, global_key d_k f32
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIIIIIIQ")


def record_size(d: int, d_k: int, n_patches: int) -> int:
    """Byte size of one serialized record."""
    return 4 + 4 * (d + n_patches * d + n_patches * d_k + d_k)


def save_dataset(ds: EmbeddingDataset, path) -> None:
    """Write a dataset in the FOBO format. Fails on an invalid dataset."""
    report = validate(ds)
    if not report.ok:
        raise DatasetError("refusing to save invalid dataset: " + report.violations[0])
    flags = 0
    if ds.split_tag != "ood_test":
        flags |= FLAG_HAS_LABELS
    flags |= _SPLIT_TAGS.index(ds.split_tag) << 1
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, flags, ds.n_classes, ds.d, ds.d_k,
                              ds.n_patches, len(ds.records)))
        for name in ds.class_names:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        for rec in ds.records:
            label = -1 if rec.label is None else rec.label
            fh.write(struct.pack("<i", label))
            fh.write(np.ascontiguousarray(rec.global_feature, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(rec.patch_features, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(rec.patch_queries, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(rec.global_key, dtype="<f4").tobytes())


def load_dataset(path) -> EmbeddingDataset:
    """Read a FOBO file; raises DatasetError on any malformed content."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise DatasetError("truncated header")
    magic, version, flags, M, d, d_k, N, count = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DatasetError("bad magic")
    if version != FORMAT_VERSION:
        raise DatasetError(f"unsupported version {version}")
    split_idx = (flags >> 1) & 0x3
    if split_idx >= len(_SPLIT_TAGS):
        raise DatasetError(f"unknown split tag {split_idx}")
    split_tag = _SPLIT_TAGS[split_idx]
    off = _HEADER.size
    class_names = []
    for _ in range(M):
        if off + 4 > len(blob):
            raise DatasetError("truncated class-name table")
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        if off + nlen > len(blob):
            raise DatasetError("truncated class-name table")
        class_names.append(blob[off:off + nlen].decode("utf-8"))
        off += nlen
    rsize = record_size(d, d_k, N)
    if len(blob) - off != count * rsize:
        raise DatasetError(f"truncated payload: expected {count * rsize} record bytes, got {len(blob) - off}")
    records = []
    for i in range(count):
        (label,) = struct.unpack_from("<i", blob, off)
        off += 4
        def take(n):
            nonlocal off
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).copy()
            off += 4 * n
            return arr
        rec = EmbeddingRecord(
            global_feature=take(d),
            patch_features=take(N * d).reshape(N, d),
            patch_queries=take(N * d_k).reshape(N, d_k),
            global_key=take(d_k),
            label=None if label < 0 else int(label),
        )
        records.append(rec)
    ds = EmbeddingDataset(records=records, class_names=class_names, d=d, d_k=d_k,
                          n_patches=N, split_tag=split_tag)
    report = validate(ds)
    if not report.ok:
        raise DatasetError("invalid dataset in file: " + report.violations[0])
    return ds


# ---------------------------------------------------------------------------
# Synthetic fixture generator
# ---------------------------------------------------------------------------

_MAX_TRIES = 2000
_ID_COS_CAP = 0.8    # non-confusable ID centroid pairs stay below this
_OOD_COS_CAP = 0.5   # OOD centroids stay below this cosine to every ID centroid


def make_centroids(spec: FixtureSpec) -> CentroidSet:
    """Construct the deterministic centroid geometry for a fixture spec.

    Uses its own RNG stream (seed) so tests can re-derive centroids without
    replaying record generation.
    """
    spec.check()
    rng = np.random.default_rng(spec.seed)
    confusable_targets = {b: a for a, b in spec.confusable_pairs}

    id_centroids = np.zeros((spec.n_classes, spec.d))
    for c in range(spec.n_classes):
        if c in confusable_targets:
            a = confusable_targets[c]
            if a >= c:
                raise FixtureError(f"confusable pair ({a}, {c}) must list the lower class first")
            base = id_centroids[a]
            for _ in range(_MAX_TRIES):
                v = rng.standard_normal(spec.d)
                v -= (v @ base) * base
                norm = np.linalg.norm(v)
                if norm > 1e-8:
                    break
            else:
                raise FixtureError("could not build orthogonal complement for confusable pair")
            id_centroids[c] = spec.confusable_cosine * base + \
                np.sqrt(1.0 - spec.confusable_cosine ** 2) * (v / norm)
        else:
            for _ in range(_MAX_TRIES):
                v = _unit(rng.standard_normal(spec.d))
                if c == 0 or np.max(id_centroids[:c] @ v) < _ID_COS_CAP:
                    id_centroids[c] = v
                    break
            else:
                raise FixtureError(
                    f"cannot place {spec.n_classes} ID centroids below cosine {_ID_COS_CAP} in dimension {spec.d}"
                )

    context_centroids = np.zeros((spec.n_classes, spec.d))
    for c in range(spec.n_classes):
        for _ in range(_MAX_TRIES):
            v = _unit(rng.standard_normal(spec.d))
            ok = np.max(np.abs(id_centroids @ v)) < _ID_COS_CAP
            if ok and (c == 0 or np.max(context_centroids[:c] @ v) < _ID_COS_CAP):
                context_centroids[c] = v
                break
        else:
            raise FixtureError("cannot place context centroids at required separation")

    neutral = _unit(rng.standard_normal(spec.d))

    ood_centroids = np.zeros((spec.ood_classes, spec.d))
    for k in range(spec.ood_classes):
        for _ in range(_MAX_TRIES):
            v = _unit(rng.standard_normal(spec.d))
            if np.max(id_centroids @ v) < _OOD_COS_CAP:
                ood_centroids[k] = v
                break
        else:
            raise FixtureError(
                f"cannot place OOD centroids below cosine {_OOD_COS_CAP} to all ID centroids in dimension {spec.d}"
            )

    return CentroidSet(id_centroids, context_centroids, neutral, ood_centroids)


def fg_slot_count(spec: FixtureSpec) -> int:
    """Number of leading patch slots drawn near the class centroid."""
    return max(1, int(round(spec.fg_fraction * spec.n_patches)))


# query alignment coefficients: context patches are key-aligned, foreground
# weakly, neutral not at all; this plants the local-to-global attention signal
_Q_ALIGN_CONTEXT = 1.0
_Q_ALIGN_FG = 0.4
_Q_ALIGN_NEUTRAL = 0.0
_Q_NOISE = 0.3


def _make_record(rng, spec, centroids: CentroidSet, fg_centroid, bg_class, label):
    n_fg = fg_slot_count(spec)
    sigma = spec.noise_sigma
    patches = np.zeros((spec.n_patches, spec.d), dtype=np.float64)
    align = np.zeros(spec.n_patches)
    for i in range(spec.n_patches):
        if i < n_fg:
            base, align[i] = fg_centroid, _Q_ALIGN_FG
        elif rng.random() < spec.bg_correlation:
            base, align[i] = centroids.context_centroids[bg_class], _Q_ALIGN_CONTEXT
        else:
            base, align[i] = centroids.neutral_centroid, _Q_ALIGN_NEUTRAL
        patches[i] = _unit(base + sigma * rng.standard_normal(spec.d))
    global_feature = _unit(patches.mean(axis=0) + sigma * rng.standard_normal(spec.d))
    key = rng.standard_normal(spec.d_k)
    queries = align[:, None] * key[None, :] + _Q_NOISE * rng.standard_normal((spec.n_patches, spec.d_k))
    return EmbeddingRecord(
        global_feature=global_feature.astype(np.float32),
        patch_features=patches.astype(np.float32),
        patch_queries=queries.astype(np.float32),
        global_key=key.astype(np.float32),
        label=label,
    )


def generate_fixture(spec: FixtureSpec):
    """Generate (train, id_test, ood_test) datasets; deterministic per seed."""
    centroids = make_centroids(spec)
    rng = np.random.default_rng(spec.seed + 1)
    class_names = [f"class_{c:02d}" for c in range(spec.n_classes)]

    def id_split(n_per_class, tag):
        records = []
        for c in range(spec.n_classes):
            for _ in range(n_per_class):
                records.append(_make_record(rng, spec, centroids, centroids.id_centroids[c], c, c))
        return EmbeddingDataset(records, class_names, spec.d, spec.d_k, spec.n_patches, tag)

    train = id_split(spec.images_per_class, "id_train")
    id_test = id_split(spec.test_images_per_class, "id_test")

    ood_records = []
    for _ in range(spec.ood_images):
        k = int(rng.integers(spec.ood_classes))
        bg_class = int(rng.integers(spec.n_classes))
        ood_records.append(_make_record(rng, spec, centroids, centroids.ood_centroids[k], bg_class, None))
    ood_test = EmbeddingDataset(ood_records, class_names, spec.d, spec.d_k, spec.n_patches, "ood_test")
    return train, id_test, ood_test
