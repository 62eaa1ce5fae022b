"""Few-shot datasets: synthetic generators, DVDS files and episode sampling.

DVDS layout (little-endian)::

    b"DVDS" | version u32 (=1) | class_count u32 | samples_per_class u32 | feature_dim u32
    float32 samples, grouped by class, row-major: [class][sample][feature]
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import EpisodeError, FormatError, SizeMismatchError, SpecError

DVDS_MAGIC = b"DVDS"
DVDS_VERSION = 1
_HEADER = struct.Struct("<4sIIII")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian class-prototype generator.

    Each generator draws a domain centre and, per split, ``class_count``
    prototypes around it, both with standard deviation ``proto_spread``.
    Samples are prototype plus isotropic noise. A spec with ``generators``
    is the union of its sub-specs; their classes are stacked so class-id
    ranges never overlap, and each sub-spec keeps its own domain centre.
    """

    dataset_id: str
    class_count: int = 20
    feature_dim: int = 16
    proto_spread: float = 1.0
    within_class_noise: float = 1.0
    samples_per_class: int = 60
    generators: tuple = ()
    seed: int = 0

    def validate(self):
        if self.generators:
            if len(self.generators) < 2:
                raise SpecError(f"{self.dataset_id}: a union needs at least 2 generators")
            for g in self.generators:
                g.validate()
                if g.feature_dim != self.feature_dim:
                    raise SpecError(
                        f"{self.dataset_id}: generator {g.dataset_id} has feature_dim "
                        f"{g.feature_dim}, union has {self.feature_dim}"
                    )
            return
        if self.class_count < 2:
            raise SpecError(f"{self.dataset_id}: class_count must be >= 2, got {self.class_count}")
        if self.feature_dim < 1 or self.samples_per_class < 1:
            raise SpecError(f"{self.dataset_id}: feature_dim and samples_per_class must be positive")
        if not self.proto_spread >= 0:
            raise SpecError(f"{self.dataset_id}: proto_spread must be >= 0")
        if not self.within_class_noise > 0:
            raise SpecError(f"{self.dataset_id}: within_class_noise must be > 0")

    @property
    def total_classes(self):
        if self.generators:
            return sum(g.total_classes for g in self.generators)
        return self.class_count

    @classmethod
    def union(cls, dataset_id, generators, **kw):
        generators = tuple(generators)
        kw.setdefault("feature_dim", generators[0].feature_dim)
        kw.setdefault("samples_per_class", generators[0].samples_per_class)
        return cls(dataset_id, class_count=sum(g.total_classes for g in generators),
                   generators=generators, **kw)

    def to_dict(self):
        d = {
            "dataset_id": self.dataset_id,
            "class_count": self.class_count,
            "feature_dim": self.feature_dim,
            "proto_spread": self.proto_spread,
            "within_class_noise": self.within_class_noise,
            "samples_per_class": self.samples_per_class,
            "seed": self.seed,
        }
        if self.generators:
            d["generators"] = [g.to_dict() for g in self.generators]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        gens = tuple(cls.from_dict(g) for g in d.pop("generators", ()))
        if gens:
            d.setdefault("feature_dim", gens[0].feature_dim)
            d.setdefault("samples_per_class", gens[0].samples_per_class)
            d["class_count"] = sum(g.total_classes for g in gens)
        return cls(generators=gens, **d)


@dataclass(frozen=True)
class DatasetHandle:
    """Samples of one split, shaped ``(class_count, samples_per_class, feature_dim)``."""

    dataset_id: str
    data: np.ndarray = field(repr=False)
    split: str = "train"
    source: str = "synthetic"

    def __post_init__(self):
        if self.data.ndim != 3:
            raise FormatError(f"dataset array must be 3-D, got shape {self.data.shape}")
        if self.class_count < 2:
            raise SpecError(f"{self.dataset_id}: class_count must be >= 2, got {self.class_count}")
        if self.split not in SPLITS:
            raise SpecError(f"unknown split {self.split!r}")

    @property
    def class_count(self):
        return self.data.shape[0]

    @property
    def samples_per_class(self):
        return self.data.shape[1]

    @property
    def feature_dim(self):
        return self.data.shape[2]

    def flat(self):
        """All samples as float64 rows plus their class labels."""
        x = np.asarray(self.data, dtype=np.float64).reshape(-1, self.feature_dim)
        y = np.repeat(np.arange(self.class_count), self.samples_per_class)
        return x, y

    def subsample(self, fraction, seed):
        """Keep ``fraction`` of each class's samples (at least one)."""
        keep = max(1, int(round(self.samples_per_class * fraction)))
        rng = np.random.default_rng(seed)
        idx = np.stack([np.sort(rng.permutation(self.samples_per_class)[:keep])
                        for _ in range(self.class_count)])
        data = np.take_along_axis(np.asarray(self.data), idx[:, :, None], axis=1)
        return replace(self, data=data, dataset_id=f"{self.dataset_id}@{fraction:g}")


def _draw_generator(spec, split_index, rng_domain_seed=None):
    seed = spec.seed if rng_domain_seed is None else rng_domain_seed
    center = np.random.default_rng([seed, 0]).normal(0.0, spec.proto_spread, spec.feature_dim)
    rng = np.random.default_rng([seed, 1 + split_index])
    protos = center + rng.normal(0.0, spec.proto_spread, (spec.class_count, spec.feature_dim))
    noise = rng.normal(0.0, spec.within_class_noise,
                       (spec.class_count, spec.samples_per_class, spec.feature_dim))
    return protos[:, None, :] + noise


def _draw(spec, split_index):
    if not spec.generators:
        return _draw_generator(spec, split_index)
    parts = []
    for g in spec.generators:
        g = replace(g, samples_per_class=spec.samples_per_class)
        parts.append(_draw(g, split_index))
    return np.concatenate(parts, axis=0)


def generate_synthetic(spec, split="train"):
    """Draw one split of ``spec``; splits have disjoint classes, shared domains.

    Features are standardised per dimension over the split and stored as
    float32, the on-disk precision.
    """
    spec.validate()
    if split not in SPLITS:
        raise SpecError(f"unknown split {split!r}")
    raw = _draw(spec, SPLITS.index(split))
    flat = raw.reshape(-1, raw.shape[-1])
    std = flat.std(axis=0)
    std[std == 0] = 1.0
    data = ((raw - flat.mean(axis=0)) / std).astype(np.float32)
    # float32 rounding leaves ~1e-9 of mean drift; fold it into one sample
    n = flat.shape[0]
    drift = data.reshape(-1, data.shape[-1]).astype(np.float64).mean(axis=0)
    data[-1, -1] = (data[-1, -1].astype(np.float64) - n * drift).astype(np.float32)
    return DatasetHandle(spec.dataset_id, data, split, "synthetic")


# ---------------------------------------------------------------- DVDS files


def save_dataset(handle, path):
    c, s, d = handle.data.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DVDS_MAGIC, DVDS_VERSION, c, s, d))
        fh.write(np.ascontiguousarray(handle.data, dtype="<f4").tobytes())


def load_dataset(path, dataset_id=None, split=None):
    """Open a DVDS file; samples are memory-mapped, not read up front.

    ``dataset_id`` and ``split`` default to the ``<id>.<split>.dvds`` filename
    convention.
    """
    path = os.fspath(path)
    size = os.path.getsize(path)
    if size < _HEADER.size:
        raise SizeMismatchError(_HEADER.size, size, "DVDS header")
    with open(path, "rb") as fh:
        magic, version, c, s, d = _HEADER.unpack(fh.read(_HEADER.size))
    if magic != DVDS_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {DVDS_MAGIC!r}")
    if version != DVDS_VERSION:
        raise FormatError(f"{path}: unsupported DVDS version {version}")
    expected = _HEADER.size + 4 * c * s * d
    if size != expected:
        raise SizeMismatchError(expected, size, f"{path} DVDS file")
    base = os.path.basename(path)
    stem = base[:-5] if base.endswith(".dvds") else base
    if split is None:
        split = stem.rsplit(".", 1)[1] if stem.rsplit(".", 1)[-1] in SPLITS else "train"
    if dataset_id is None:
        dataset_id = stem[: -len(split) - 1] if stem.endswith("." + split) else stem
    data = np.memmap(path, dtype="<f4", mode="r", offset=_HEADER.size, shape=(c, s, d))
    return DatasetHandle(dataset_id, data, split, path)


# ---------------------------------------------------------------- episodes


@dataclass(frozen=True)
class TaskBatch:
    """One n-way k-shot episode with labels relabelled to ``0..n_way-1``.

    ``classes[j]`` is the dataset class behind episode label ``j``;
    ``support_index``/``query_index`` hold (class, sample) pairs.
    """

    support_x: np.ndarray = field(repr=False)
    support_y: np.ndarray = field(repr=False)
    query_x: np.ndarray = field(repr=False)
    query_y: np.ndarray = field(repr=False)
    n_way: int
    k_shot: int
    q_size: int
    batch_id: str
    classes: tuple = ()
    support_index: np.ndarray = field(default=None, repr=False)
    query_index: np.ndarray = field(default=None, repr=False)

    @property
    def x(self):
        """Support and query rows together."""
        return np.concatenate([self.support_x, self.query_x])

    @property
    def y(self):
        return np.concatenate([self.support_y, self.query_y])

    def __len__(self):
        return len(self.support_y) + len(self.query_y)


def _seed_label(seed):
    return "-".join(str(s) for s in np.atleast_1d(seed))


def sample_batch(dataset, n_way, k_shot, q_size, seed):
    """Draw an episode: classes and per-class samples both without replacement."""
    if n_way > dataset.class_count:
        raise EpisodeError(f"n_way={n_way} exceeds class_count={dataset.class_count}")
    if n_way < 1 or k_shot < 0 or q_size < 0:
        raise EpisodeError(f"invalid episode shape n_way={n_way} k_shot={k_shot} q_size={q_size}")
    need = k_shot + q_size
    if need > dataset.samples_per_class:
        raise EpisodeError(
            f"k_shot+q_size={need} exceeds samples_per_class={dataset.samples_per_class}"
        )
    rng = np.random.default_rng(seed)
    classes = rng.choice(dataset.class_count, size=n_way, replace=False)
    picks = np.stack([rng.permutation(dataset.samples_per_class)[:need] for _ in classes])
    rows = np.asarray(dataset.data[classes], dtype=np.float64)
    chosen = np.take_along_axis(rows, picks[:, :, None], axis=1)
    labels = np.repeat(np.arange(n_way), need).reshape(n_way, need)
    cls_ids = np.repeat(classes, need).reshape(n_way, need)
    idx = np.stack([cls_ids, picks], axis=-1)
    sup, qry = slice(0, k_shot), slice(k_shot, need)
    d = dataset.feature_dim
    return TaskBatch(
        support_x=chosen[:, sup].reshape(-1, d),
        support_y=labels[:, sup].reshape(-1),
        query_x=chosen[:, qry].reshape(-1, d),
        query_y=labels[:, qry].reshape(-1),
        n_way=n_way,
        k_shot=k_shot,
        q_size=q_size,
        batch_id=f"{dataset.dataset_id}/{dataset.split}/{_seed_label(seed)}",
        classes=tuple(int(c) for c in classes),
        support_index=idx[:, sup].reshape(-1, 2),
        query_index=idx[:, qry].reshape(-1, 2),
    )


def sample_random_batch(dataset, size, seed):
    """Uniform batch of ``size`` samples; labels relabelled over classes present.

    Everything lands in the support set and the query set is empty.
    """
    total = dataset.class_count * dataset.samples_per_class
    if size > total or size < 1:
        raise EpisodeError(f"batch size {size} not in [1, {total}]")
    rng = np.random.default_rng(seed)
    flat_idx = np.sort(rng.choice(total, size=size, replace=False))
    cls, smp = np.divmod(flat_idx, dataset.samples_per_class)
    present, labels = np.unique(cls, return_inverse=True)
    x = np.asarray(dataset.data, dtype=np.float64).reshape(total, -1)[flat_idx]
    d = dataset.feature_dim
    return TaskBatch(
        support_x=x, support_y=labels.astype(np.int64),
        query_x=np.zeros((0, d)), query_y=np.zeros(0, dtype=np.int64),
        n_way=len(present), k_shot=0, q_size=0,
        batch_id=f"{dataset.dataset_id}/{dataset.split}/rand-{_seed_label(seed)}",
        classes=tuple(int(c) for c in present),
        support_index=np.stack([cls, smp], axis=1),
        query_index=np.zeros((0, 2), dtype=np.int64),
    )
