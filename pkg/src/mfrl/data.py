"""Task generators, episode sampling and the binary feature-dataset format.

All randomness flows through numpy's PCG64 bit generator. Independent streams
are derived from integer keys with :class:`numpy.random.SeedSequence`, so an
episode is fully determined by ``(seed, run, episode)`` regardless of the order
in which episodes are drawn.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SPLITS = ("train", "val", "test")

SINE_AMPLITUDE = (0.1, 5.0)
SINE_PHASE = (0.0, np.pi)
SINE_X = (-5.0, 5.0)
SINE_NOISE_STD = 0.1
SINE_SAMPLES = 200


class EpisodeError(ValueError):
    """The split cannot supply the requested episode."""


class FeatureFileError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def make_rng(*keys: int) -> np.random.Generator:
    """PCG64 generator seeded from a tuple of non-negative integer keys."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in keys])))


# ---------------------------------------------------------------- regression tasks


@dataclass
class SineTask:
    amplitude: float
    phase: float
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        lo, hi = SINE_AMPLITUDE
        if not lo <= self.amplitude <= hi:
            raise ValueError(f"amplitude {self.amplitude} outside [{lo}, {hi}]")
        lo, hi = SINE_PHASE
        if not lo <= self.phase <= hi:
            raise ValueError(f"phase {self.phase} outside [{lo}, {hi}]")
        if self.x.shape != self.y.shape or self.x.ndim != 1:
            raise ValueError("x and y must be 1-D arrays of equal length")

    def true_curve(self, x) -> np.ndarray:
        return self.amplitude * np.sin(np.asarray(x) - self.phase)


def sample_sine_task(rng: np.random.Generator, n: int = SINE_SAMPLES,
                     amplitude: float | None = None, phase: float | None = None) -> SineTask:
    if amplitude is None:
        amplitude = rng.uniform(*SINE_AMPLITUDE)
    if phase is None:
        phase = rng.uniform(*SINE_PHASE)
    x = rng.uniform(*SINE_X, size=n)
    y = amplitude * np.sin(x - phase) + rng.normal(0.0, SINE_NOISE_STD, size=n)
    return SineTask(float(amplitude), float(phase), x, y)


def gen_sine_split(count_per_split: int = 500, seed: int = 0, n_samples: int = SINE_SAMPLES):
    """Draw train/val/test lists of sine tasks with pairwise distinct (A, phase)."""
    rng = make_rng(seed, 0x5117E)
    seen = set()
    splits = []
    for _ in SPLITS:
        tasks = []
        while len(tasks) < count_per_split:
            a = rng.uniform(*SINE_AMPLITUDE)
            p = rng.uniform(*SINE_PHASE)
            if (a, p) in seen:
                continue
            seen.add((a, p))
            tasks.append(sample_sine_task(rng, n_samples, a, p))
        splits.append(tasks)
    return tuple(splits)


@dataclass
class RegressionEpisode:
    task: SineTask
    support_idx: np.ndarray
    query_idx: np.ndarray

    @property
    def support(self):
        return self.task.x[self.support_idx], self.task.y[self.support_idx]

    @property
    def query(self):
        return self.task.x[self.query_idx], self.task.y[self.query_idx]


def sample_regression_episode(task: SineTask, shot: int, rng: np.random.Generator,
                              query: int | None = None) -> RegressionEpisode:
    """Support of ``shot`` points; query defaults to every remaining sample."""
    n = task.x.size
    if query is None:
        query = n - shot
    if shot < 1 or query < 0 or shot + query > n:
        raise EpisodeError(f"task has {n} samples, cannot draw {shot} support + {query} query")
    perm = rng.permutation(n)
    return RegressionEpisode(task, np.sort(perm[:shot]), np.sort(perm[shot:shot + query]))


# ---------------------------------------------------------------- classification data


@dataclass
class SplitSpec:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        self.train, self.val, self.test = (np.asarray(s, dtype=np.int64) for s in (self.train, self.val, self.test))
        sets = [set(s.tolist()) for s in (self.train, self.val, self.test)]
        for i in range(3):
            for j in range(i + 1, 3):
                if sets[i] & sets[j]:
                    raise ValueError(f"splits {SPLITS[i]} and {SPLITS[j]} share classes {sorted(sets[i] & sets[j])}")

    def classes(self, split: str) -> np.ndarray:
        return getattr(self, split)

    def tag_of(self, class_count: int) -> np.ndarray:
        tags = np.full(class_count, 255, dtype=np.uint8)
        for i, name in enumerate(SPLITS):
            tags[self.classes(name)] = i
        return tags


@dataclass
class LabeledDataset:
    """Samples with integer class labels; each class belongs to exactly one split."""
    x: np.ndarray
    labels: np.ndarray
    class_count: int
    splits: SplitSpec

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.x.ndim != 2 or self.x.shape[0] != self.labels.size:
            raise ValueError("x must be (n, d) with one label per row")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("labels must lie in [0, class_count)")
        self._by_class = None

    @property
    def split_tags(self) -> np.ndarray:
        return self.splits.tag_of(self.class_count)[self.labels]

    def class_indices(self, c: int) -> np.ndarray:
        if self._by_class is None:
            order = np.argsort(self.labels, kind="stable")
            bounds = np.searchsorted(self.labels[order], np.arange(self.class_count + 1))
            self._by_class = [order[bounds[k]:bounds[k + 1]] for k in range(self.class_count)]
        return self._by_class[c]

    def subset(self, split: str):
        """Rows of one split with labels remapped densely to 0..C_split-1."""
        classes = self.splits.classes(split)
        remap = np.full(self.class_count, -1, dtype=np.int64)
        remap[classes] = np.arange(classes.size)
        mask = remap[self.labels] >= 0
        return self.x[mask], remap[self.labels[mask]]


def gen_blob_classes(classes: int = 64, dim: int = 32, per_class: int = 100, std: float = 1.0,
                     seed: int = 0, latent_dim: int = 6, mean_scale: float = 3.0,
                     nuisance_dims: int = 0, nuisance_std: float = 0.0, way: int = 5) -> LabeledDataset:
    """Gaussian classes whose means share a low-dimensional structure.

    Each class gets a latent code ``z_c ~ N(0, I_k)``; its mean is ``mean_scale * A z_c``
    for a fixed random ``dim x k`` map ``A`` with orthonormal columns, so class
    identity lives in a ``k``-dimensional subspace shared by all splits. Samples
    add isotropic noise of scale ``std``. ``nuisance_dims`` extra coordinates
    carry class-independent noise of scale ``nuisance_std``.
    Classes are split 60/20/20 into train/val/test at random.
    """
    if classes < 2 * way:
        raise ValueError(f"need at least {2 * way} classes for {way}-way episodes, got {classes}")
    if not 1 <= latent_dim <= dim:
        raise ValueError(f"latent_dim must lie in [1, dim={dim}], got {latent_dim}")
    rng = make_rng(seed, 0xB10B)
    A, _ = np.linalg.qr(rng.standard_normal((dim, latent_dim)))
    z = rng.standard_normal((classes, latent_dim))
    means = mean_scale * z @ A.T
    labels = np.repeat(np.arange(classes), per_class)
    x = means[labels] + std * rng.standard_normal((labels.size, dim))
    if nuisance_dims:
        x = np.hstack([x, nuisance_std * rng.standard_normal((labels.size, nuisance_dims))])
    perm = rng.permutation(classes)
    n_val = max(way, int(round(0.2 * classes)))
    n_test = max(way, int(round(0.2 * classes)))
    n_train = classes - n_val - n_test
    splits = SplitSpec(np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]),
                       np.sort(perm[n_train + n_val:]))
    return LabeledDataset(x, labels, classes, splits)


@dataclass
class Episode:
    way: int
    shot: int
    query_per_class: int
    support_idx: np.ndarray
    support_labels: np.ndarray
    query_idx: np.ndarray
    query_labels: np.ndarray
    classes: np.ndarray  # episode-local index -> global class id


def sample_episode(dataset: LabeledDataset, split: str, way: int, shot: int, query_per_class: int,
                   rng: np.random.Generator) -> Episode:
    """N-way k-shot episode from one split; classes and samples drawn without replacement."""
    pool = dataset.splits.classes(split)
    if pool.size < way:
        raise EpisodeError(f"split {split!r} has {pool.size} classes, episode needs {way}")
    classes = rng.choice(pool, size=way, replace=False)
    s_idx, q_idx = [], []
    for c in classes:
        idx = dataset.class_indices(int(c))
        if idx.size < shot + query_per_class:
            raise EpisodeError(f"class {int(c)} has {idx.size} samples, episode needs {shot + query_per_class}")
        pick = rng.choice(idx, size=shot + query_per_class, replace=False)
        s_idx.append(pick[:shot])
        q_idx.append(pick[shot:])
    local = np.arange(way)
    return Episode(way, shot, query_per_class,
                   np.concatenate(s_idx), np.repeat(local, shot),
                   np.concatenate(q_idx), np.repeat(local, query_per_class),
                   np.asarray(classes, dtype=np.int64))


def episode_stream(dataset: LabeledDataset, split: str, way: int, shot: int, query_per_class: int,
                   seed: int, run: int, episodes: int):
    for e in range(episodes):
        yield sample_episode(dataset, split, way, shot, query_per_class, make_rng(seed, run, e))


# ---------------------------------------------------------------- feature files

FEATURE_MAGIC = b"MFRLFEAT"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<8sIIII")


@dataclass
class FeatureDataset:
    features: np.ndarray
    labels: np.ndarray
    splits: np.ndarray  # per-row tag: 0 train, 1 val, 2 test
    class_count: int

    def to_labeled(self) -> LabeledDataset:
        tags = np.full(self.class_count, 255, dtype=np.uint8)
        tags[self.labels] = self.splits
        spec = SplitSpec(*(np.where(tags == i)[0] for i in range(3)))
        return LabeledDataset(self.features, self.labels, self.class_count, spec)


def write_feature_dataset(path, ds: FeatureDataset) -> None:
    feats = np.ascontiguousarray(ds.features, dtype="<f8")
    n, p = feats.shape
    labels = np.asarray(ds.labels)
    splits = np.asarray(ds.splits)
    if labels.shape != (n,) or splits.shape != (n,):
        raise ValueError("labels and splits need one entry per feature row")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, n, p, int(ds.class_count)))
        f.write(feats.tobytes())
        f.write(labels.astype("<u4").tobytes())
        f.write(splits.astype("u1").tobytes())


def load_feature_dataset(path) -> FeatureDataset:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise FeatureFileError(f"file shorter than the {_HEADER.size}-byte header", len(buf))
    magic, version, n, p, class_count = _HEADER.unpack_from(buf, 0)
    if magic != FEATURE_MAGIC:
        raise FeatureFileError(f"bad magic {magic!r}", 0)
    if version != FEATURE_VERSION:
        raise FeatureFileError(f"unsupported version {version}", 8)
    off = _HEADER.size
    sections = (("features", n * p * 8), ("labels", n * 4), ("split tags", n))
    views = []
    for name, size in sections:
        if len(buf) < off + size:
            raise FeatureFileError(f"truncated {name} section: need {size} bytes, have {len(buf) - off}", off)
        views.append((off, size))
        off += size
    if len(buf) != off:
        raise FeatureFileError(f"{len(buf) - off} trailing bytes after split tags", off)
    (fo, fs), (lo, ls), (so, ss) = views
    feats = np.frombuffer(buf, dtype="<f8", count=n * p, offset=fo).reshape(n, p).astype(np.float64)
    labels = np.frombuffer(buf, dtype="<u4", count=n, offset=lo).astype(np.int64)
    splits = np.frombuffer(buf, dtype="u1", count=n, offset=so).copy()
    if n and labels.max() >= class_count:
        bad = int(np.argmax(labels >= class_count))
        raise FeatureFileError(f"label {labels[bad]} exceeds class_count {class_count}", lo + 4 * bad)
    if n and splits.max() > 2:
        bad = int(np.argmax(splits > 2))
        raise FeatureFileError(f"split tag {splits[bad]} not in {{0,1,2}}", so + bad)
    return FeatureDataset(feats, labels, splits, class_count)
