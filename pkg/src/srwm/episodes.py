"""Episode construction for sequential N-way K-shot learning.

An episode presents N*K labelled support steps, an optional continuation of
N*K' extra labelled steps used for the long-context teaching branch, and M
query steps whose label slot carries the unknown-label token.  Class-to-label
assignments are a fresh permutation per episode, so every episode is a new
few-shot problem for the same parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from srwm import autodiff as ad
from srwm import tensorio
from srwm.autodiff import Tensor
from srwm.model import encode_step, unknown_label

# Sub-stream tags for seed splitting; parallel consumers derive independent
# generators from (seed, tag, ...) tuples and never share generator state.
STREAM_CENTER = 0
STREAM_EXAMPLE = 1
STREAM_EPISODE = 2
STREAM_INIT = 3
STREAM_EVAL = 4


def split_rng(*keys: int) -> np.random.Generator:
    """Deterministic generator derived from an integer key tuple."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


class EpisodeError(ValueError):
    """Raised when a source cannot supply the requested episode."""


@dataclass
class Episode:
    """One few-shot task: support, optional continuation, queries."""

    support_x: np.ndarray  # (n_way * k_shot, dim)
    support_y: np.ndarray  # (n_way * k_shot,) labels in 0..n_way-1
    cont_x: np.ndarray     # (n_way * k_prime, dim)
    cont_y: np.ndarray
    query_x: np.ndarray    # (m_queries, dim)
    query_y: np.ndarray    # (m_queries,) hidden true labels
    n_way: int
    k_shot: int
    k_prime: int
    seed: int | None = None


class TaskSource:
    """Read-only pool of classes with per-class example access."""

    kind = "abstract"
    split = "unspecified"

    @property
    def dim(self) -> int:
        raise NotImplementedError

    def num_classes(self) -> int:
        raise NotImplementedError

    def class_name(self, class_index: int) -> str:
        return str(class_index)

    def examples_per_class(self, class_index: int) -> int | None:
        """Number of available examples, or None when unlimited."""
        raise NotImplementedError

    def example(self, class_index: int, example_index: int) -> np.ndarray:
        raise NotImplementedError


class SyntheticClusterSource(TaskSource):
    """Isotropic Gaussian clusters around unit-norm random centers.

    Class identities are global: a source covering classes
    [first_class, first_class + num_classes) drawn from the same seed shares
    nothing with a source covering a disjoint range, which is how train and
    test pools stay disjoint.
    """

    kind = "synthetic-clusters"

    def __init__(
        self,
        num_classes: int,
        dim: int,
        spread: float,
        seed: int,
        first_class: int = 0,
        split: str = "train",
    ):
        if spread <= 0:
            raise EpisodeError(f"spread must be positive, got {spread}")
        self._num_classes = num_classes
        self._dim = dim
        self.spread = float(spread)
        self.seed = int(seed)
        self.first_class = int(first_class)
        self.split = split
        self._centers: dict[int, np.ndarray] = {}

    @property
    def dim(self) -> int:
        return self._dim

    def num_classes(self) -> int:
        return self._num_classes

    def examples_per_class(self, class_index: int) -> int | None:
        return None

    def center(self, class_index: int) -> np.ndarray:
        cached = self._centers.get(class_index)
        if cached is not None:
            return cached
        global_id = self.first_class + class_index
        rng = split_rng(self.seed, STREAM_CENTER, global_id)
        c = rng.normal(size=self._dim)
        c /= np.linalg.norm(c)
        self._centers[class_index] = c
        return c

    def example(self, class_index: int, example_index: int) -> np.ndarray:
        global_id = self.first_class + class_index
        rng = split_rng(self.seed, STREAM_EXAMPLE, global_id, example_index)
        return self.center(class_index) + self.spread * rng.normal(size=self._dim)


def synthetic_cluster_source(
    num_classes: int, dim: int, spread: float, seed: int
) -> SyntheticClusterSource:
    return SyntheticClusterSource(num_classes, dim, spread, seed)


def synthetic_split_sources(
    train_classes: int, test_classes: int, dim: int, spread: float, seed: int
) -> tuple[SyntheticClusterSource, SyntheticClusterSource]:
    """Train/test pools over disjoint class id ranges of one generator."""
    train = SyntheticClusterSource(train_classes, dim, spread, seed, 0, "train")
    test = SyntheticClusterSource(
        test_classes, dim, spread, seed, train_classes, "test"
    )
    return train, test


class ImageDirectorySource(TaskSource):
    """Tensor files on disk, listed by a manifest, served as flat vectors.

    Values are normalized to [0, 1] (uint8 divided by 255; float payloads
    passed through).  `pool` > 1 average-pools non-overlapping pool x pool
    patches of the trailing two axes before flattening, a parameter-free
    stand-in for a learned image stem.
    """

    kind = "image-directory"

    def __init__(self, root: str | Path, manifest: str | Path, pool: int = 1,
                 split: str = "train"):
        self.root = Path(root)
        self.manifest_path = Path(manifest)
        self.pool = int(pool)
        self.split = split
        classes = tensorio.read_manifest(self.manifest_path)
        self._names = sorted(classes)
        self._files = [classes[name] for name in self._names]
        self._cache: dict[tuple[int, int], np.ndarray] = {}
        if not self._names:
            raise EpisodeError(f"manifest {manifest} lists no classes")
        self._dim = self._load(0, 0).shape[0]

    @property
    def dim(self) -> int:
        return self._dim

    def num_classes(self) -> int:
        return len(self._names)

    def class_name(self, class_index: int) -> str:
        return self._names[class_index]

    def examples_per_class(self, class_index: int) -> int | None:
        return len(self._files[class_index])

    def _load(self, class_index: int, example_index: int) -> np.ndarray:
        key = (class_index, example_index)
        if key in self._cache:
            return self._cache[key]
        rel = self._files[class_index][example_index]
        arr = tensorio.read_tensor(self.root / rel)
        if arr.dtype == np.uint8:
            arr = arr.astype(np.float64) / 255.0
        else:
            arr = arr.astype(np.float64)
        if self.pool > 1:
            arr = _avg_pool(arr, self.pool)
        flat = arr.reshape(-1)
        self._cache[key] = flat
        return flat

    def example(self, class_index: int, example_index: int) -> np.ndarray:
        count = len(self._files[class_index])
        if example_index >= count:
            raise EpisodeError(
                f"class '{self._names[class_index]}' has {count} examples, "
                f"index {example_index} requested"
            )
        return self._load(class_index, example_index)


def _avg_pool(arr: np.ndarray, pool: int) -> np.ndarray:
    if arr.ndim < 2:
        raise EpisodeError(f"pooling needs at least 2 axes, got shape {arr.shape}")
    h, w = arr.shape[-2], arr.shape[-1]
    if h % pool or w % pool:
        raise EpisodeError(
            f"pool size {pool} does not divide trailing axes of {arr.shape}"
        )
    shaped = arr.reshape(arr.shape[:-2] + (h // pool, pool, w // pool, pool))
    return shaped.mean(axis=(-3, -1))


def image_directory_source(
    root: str | Path, manifest: str | Path, pool: int = 1, split: str = "train"
) -> ImageDirectorySource:
    return ImageDirectorySource(root, manifest, pool, split)


# ---------------------------------------------------------------------------
# sampling


def sample_episode(
    source: TaskSource,
    n_way: int,
    k_shot: int,
    k_prime: int,
    m_queries: int,
    rng: np.random.Generator,
    seed: int | None = None,
) -> Episode:
    """Draw one episode with a fresh class-to-label permutation.

    Examples are never repeated between support, continuation, and queries
    within the episode.
    """
    total_classes = source.num_classes()
    if total_classes < n_way:
        raise EpisodeError(
            f"source has {total_classes} classes, episode needs {n_way}"
        )
    per_class_queries = math.ceil(m_queries / n_way)
    chosen = rng.choice(total_classes, size=n_way, replace=False)
    label_of = rng.permutation(n_way)  # chosen[i] plays label label_of[i]
    class_for_label = np.empty(n_way, dtype=int)
    class_for_label[label_of] = chosen

    # balanced-ish random allocation of query labels
    pool = np.tile(np.arange(n_way), per_class_queries)
    query_labels = rng.permutation(pool)[:m_queries]
    query_need = np.bincount(query_labels, minlength=n_way)

    dim = source.dim
    sup_x = np.empty((n_way * k_shot, dim))
    sup_y = np.empty(n_way * k_shot, dtype=int)
    con_x = np.empty((n_way * k_prime, dim))
    con_y = np.empty(n_way * k_prime, dtype=int)
    query_x = np.empty((m_queries, dim))
    query_slots: dict[int, list[np.ndarray]] = {l: [] for l in range(n_way)}

    for label in range(n_way):
        cls = int(class_for_label[label])
        need = k_shot + k_prime + int(query_need[label])
        available = source.examples_per_class(cls)
        if available is None:
            base = int(rng.integers(0, 2**48))
            ids = [base + i for i in range(need)]
        else:
            if available < need:
                raise EpisodeError(
                    f"class '{source.class_name(cls)}' has {available} "
                    f"examples, episode needs {need}"
                )
            ids = [int(i) for i in rng.choice(available, size=need, replace=False)]
        examples = [source.example(cls, i) for i in ids]
        sup_x[label * k_shot : (label + 1) * k_shot] = examples[:k_shot]
        sup_y[label * k_shot : (label + 1) * k_shot] = label
        if k_prime:
            con_x[label * k_prime : (label + 1) * k_prime] = examples[
                k_shot : k_shot + k_prime
            ]
            con_y[label * k_prime : (label + 1) * k_prime] = label
        query_slots[label] = examples[k_shot + k_prime :]

    sup_order = rng.permutation(n_way * k_shot)
    con_order = rng.permutation(n_way * k_prime)
    query_y = np.empty(m_queries, dtype=int)
    for j, label in enumerate(query_labels):
        query_x[j] = query_slots[int(label)].pop()
        query_y[j] = label

    return Episode(
        support_x=sup_x[sup_order],
        support_y=sup_y[sup_order],
        cont_x=con_x[con_order],
        cont_y=con_y[con_order],
        query_x=query_x,
        query_y=query_y,
        n_way=n_way,
        k_shot=k_shot,
        k_prime=k_prime,
        seed=seed,
    )


@dataclass
class EpisodeBatch:
    """Episodes stacked along a batch axis; all share (N, K, K', M)."""

    support_x: np.ndarray  # (n_way * k_shot, batch, dim)
    support_y: np.ndarray  # (n_way * k_shot, batch)
    cont_x: np.ndarray
    cont_y: np.ndarray
    query_x: np.ndarray    # (m_queries, batch, dim)
    query_y: np.ndarray
    n_way: int
    k_shot: int
    k_prime: int

    @property
    def batch(self) -> int:
        return self.support_x.shape[1]


def stack_episodes(episodes: list[Episode]) -> EpisodeBatch:
    first = episodes[0]
    for ep in episodes:
        if (ep.n_way, ep.k_shot, ep.k_prime) != (
            first.n_way,
            first.k_shot,
            first.k_prime,
        ):
            raise EpisodeError("episodes in a batch must share N, K, K'")
    return EpisodeBatch(
        support_x=np.stack([ep.support_x for ep in episodes], axis=1),
        support_y=np.stack([ep.support_y for ep in episodes], axis=1),
        cont_x=np.stack([ep.cont_x for ep in episodes], axis=1),
        cont_y=np.stack([ep.cont_y for ep in episodes], axis=1),
        query_x=np.stack([ep.query_x for ep in episodes], axis=1),
        query_y=np.stack([ep.query_y for ep in episodes], axis=1),
        n_way=first.n_way,
        k_shot=first.k_shot,
        k_prime=first.k_prime,
    )


# ---------------------------------------------------------------------------
# encoding


def rollout_labels(batch: EpisodeBatch, delayed: bool) -> tuple[np.ndarray, np.ndarray]:
    """Label streams for the support and continuation phases.

    Standard mode pairs step t with its own label; delayed mode pairs step t
    with the label of step t-1, starting from the unknown token.  The
    continuation continues the delay across the phase boundary.
    """
    unk = unknown_label(batch.n_way)
    sup = batch.support_y
    con = batch.cont_y
    if not delayed:
        return sup, con
    first = np.full_like(sup[:1], unk)
    sup_delayed = np.concatenate([first, sup[:-1]], axis=0)
    if con.shape[0] == 0:
        return sup_delayed, con
    boundary = sup[-1:] if sup.shape[0] else np.full_like(con[:1], unk)
    con_delayed = np.concatenate([boundary, con[:-1]], axis=0)
    return sup_delayed, con_delayed


def encode_episode(
    episode: Episode,
    params: dict[str, "Tensor"],
    delayed_labels: bool = False,
) -> list[Tensor]:
    """Flatten one episode into rollout-order step vectors.

    Returns n_way*k_shot support steps, then n_way*k_prime continuation
    steps, then m query steps; queries carry the unknown-label token in both
    label modes.  Each element has shape (d_model,).
    """
    batch = stack_episodes([episode])
    sup_y, con_y = rollout_labels(batch, delayed_labels)
    unk = unknown_label(episode.n_way)
    steps: list[Tensor] = []
    for t in range(batch.support_x.shape[0]):
        steps.append(encode_step(params, Tensor(batch.support_x[t]), sup_y[t]))
    for t in range(batch.cont_x.shape[0]):
        steps.append(encode_step(params, Tensor(batch.cont_x[t]), con_y[t]))
    for m in range(batch.query_x.shape[0]):
        unk_labels = np.full(1, unk, dtype=int)
        steps.append(encode_step(params, Tensor(batch.query_x[m]), unk_labels))
    return [ad.reshape(s, (s.data.shape[-1],)) for s in steps]


# ---------------------------------------------------------------------------
# reference ceilings


def nearest_center_accuracy(
    source: SyntheticClusterSource,
    n_way: int,
    episodes: int,
    rng: np.random.Generator,
    queries_per_episode: int = 1,
) -> float:
    """Monte-Carlo accuracy of the true-center nearest-mean classifier.

    For isotropic equal-spread Gaussian classes this is the best achievable
    accuracy, so it serves as the dataset ceiling for trained models.
    """
    correct = 0
    total = 0
    for _ in range(episodes):
        chosen = rng.choice(source.num_classes(), size=n_way, replace=False)
        centers = np.stack([source.center(int(c)) for c in chosen])
        for _ in range(queries_per_episode):
            label = int(rng.integers(n_way))
            x = centers[label] + source.spread * rng.normal(size=source.dim)
            dists = np.linalg.norm(centers - x, axis=1)
            correct += int(np.argmin(dists) == label)
            total += 1
    return correct / total
