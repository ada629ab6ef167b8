"""Datasets, file formats, synthetic generators, augmentation and sampling.

File formats
------------
* LIBSVM: ``<label> <index>:<value> ...`` with 1-based indices and labels
  ``+1``/``-1`` (``1``/``0`` also accepted).
* Ranking CSV: header ``query_id,relevance,f1,...,fd``; rows of one query
  need not be contiguous.
* Contrastive CSV: header ``label,f1,...,fd`` (label may be empty).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


DATASET_KINDS = ("binary", "ranking", "contrastive_pool")


@dataclass(frozen=True)
class AugmentationSpec:
    """Vector-space augmentations applied in order: scaling, dropout, noise."""

    noise_sigma: float = 0.0
    dropout_rate: float = 0.0
    scale_range: tuple[float, float] = (1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scale_range", tuple(float(v) for v in self.scale_range))
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("scale_range must satisfy 0 < low <= high")

    def to_dict(self):
        return {"noise_sigma": self.noise_sigma, "dropout_rate": self.dropout_rate,
                "scale_range": list(self.scale_range), "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d.get("noise_sigma", 0.0)), float(d.get("dropout_rate", 0.0)),
                   tuple(d.get("scale_range", (1.0, 1.0))), int(d.get("seed", 0)))


@dataclass
class Dataset:
    """A binary, ranking or contrastive item collection.

    ``y`` holds labels in {-1, +1}, either shape (n,) or (n, tasks) for
    multi-task data.  Ranking data carries ``qid`` and integer ``rel``.
    Contrastive pools may carry class labels and, for image-text pairs, the
    paired feature matrix ``X_pair`` (row i is the partner of ``X[i]``).
    """

    kind: str
    X: np.ndarray
    y: np.ndarray | None = None
    qid: np.ndarray | None = None
    rel: np.ndarray | None = None
    classes: np.ndarray | None = None
    X_pair: np.ndarray | None = None
    aug: AugmentationSpec = field(default_factory=AugmentationSpec)

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2 or self.X.shape[0] == 0:
            raise ValueError("feature matrix must be 2-D and non-empty")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("features must be finite")
        n = self.X.shape[0]
        if self.kind == "binary":
            if self.y is None:
                raise ValueError("binary dataset needs labels")
            y = np.asarray(self.y, dtype=np.int64)
            if y.shape[0] != n or not np.all(np.isin(y, (-1, 1))):
                raise ValueError("labels must be -1/+1, one row per sample")
            self.y = y
        elif self.kind == "ranking":
            if self.qid is None or self.rel is None:
                raise ValueError("ranking dataset needs qid and rel")
            self.qid = np.asarray(self.qid, dtype=np.int64).ravel()
            self.rel = np.asarray(self.rel, dtype=np.float64).ravel()
            if self.qid.shape[0] != n or self.rel.shape[0] != n:
                raise ValueError("qid/rel length mismatch")
            if np.any(self.rel < 0):
                raise ValueError("relevances must be non-negative")
        else:
            if self.classes is not None:
                self.classes = np.asarray(self.classes, dtype=np.int64).ravel()
                if self.classes.shape[0] != n:
                    raise ValueError("class label length mismatch")
            if self.X_pair is not None:
                self.X_pair = np.asarray(self.X_pair, dtype=np.float64)
                if self.X_pair.shape[0] != n:
                    raise ValueError("paired features must have one row per sample")

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def dim(self):
        return self.X.shape[1]

    @property
    def n_tasks(self):
        return 1 if self.y is None or self.y.ndim == 1 else self.y.shape[1]

    def task_labels(self, k=0):
        return self.y if self.y.ndim == 1 else self.y[:, k]

    @property
    def positives(self):
        return np.flatnonzero(self.task_labels(0) > 0)

    @property
    def negatives(self):
        return np.flatnonzero(self.task_labels(0) < 0)

    def queries(self):
        """Item index arrays per query, in ascending query-id order."""
        return [np.flatnonzero(self.qid == q) for q in np.unique(self.qid)]


# ------------------------------------------------------------------ files

def _line_error(path, lineno, msg):
    return ValueError(f"{path}:{lineno}: {msg}")


def load_libsvm(path, dim=None) -> Dataset:
    rows, labels, max_idx = [], [], 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            toks = line.split()
            try:
                lab = float(toks[0])
            except ValueError:
                raise _line_error(path, lineno, f"bad label {toks[0]!r}") from None
            if lab not in (1.0, -1.0, 0.0):
                raise _line_error(path, lineno, f"label must be +1/-1 (or 1/0), got {toks[0]}")
            feats = {}
            for t in toks[1:]:
                try:
                    k, v = t.split(":")
                    k, v = int(k), float(v)
                except ValueError:
                    raise _line_error(path, lineno, f"bad feature token {t!r}") from None
                if k < 1:
                    raise _line_error(path, lineno, "feature indices are 1-based")
                feats[k] = v
                max_idx = max(max_idx, k)
            rows.append(feats)
            labels.append(1 if lab > 0 else -1)
    if not rows:
        raise ValueError(f"{path}: no samples")
    if dim is None:
        dim = max_idx
    elif max_idx > dim:
        raise ValueError(f"{path}: feature index {max_idx} exceeds dim {dim}")
    X = np.zeros((len(rows), max(dim, 1)))
    for r, feats in enumerate(rows):
        for k, v in feats.items():
            X[r, k - 1] = v
    return Dataset("binary", X, np.array(labels))


def write_libsvm(ds: Dataset, path) -> None:
    with open(path, "w") as fh:
        for x, lab in zip(ds.X, ds.task_labels(0)):
            feats = " ".join(f"{j + 1}:{v:.17g}" for j, v in enumerate(x) if v != 0.0)
            fh.write(f"{'+1' if lab > 0 else '-1'} {feats}".rstrip() + "\n")


def _read_csv(path, first_cols):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if header[:len(first_cols)] != list(first_cols):
            raise ValueError(f"{path}:1: header must start with {','.join(first_cols)}")
        dim = len(header) - len(first_cols)
        if dim < 1:
            raise ValueError(f"{path}:1: no feature columns")
        out = []
        for lineno, row in enumerate(reader, 2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            out.append((lineno, row))
    if not out:
        raise ValueError(f"{path}: no samples")
    return out, dim


def load_csv_ranking(path) -> Dataset:
    rows, _ = _read_csv(path, ("query_id", "relevance"))
    qid, rel, X = [], [], []
    for lineno, row in rows:
        try:
            qid.append(int(row[0]))
            rel.append(float(row[1]))
            X.append([float(v) for v in row[2:]])
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-numeric field") from None
    return Dataset("ranking", np.array(X), qid=np.array(qid), rel=np.array(rel))


def write_csv_ranking(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query_id", "relevance"] + [f"f{j + 1}" for j in range(ds.dim)])
        for q, r, x in zip(ds.qid, ds.rel, ds.X):
            w.writerow([int(q), f"{r:.17g}"] + [f"{v:.17g}" for v in x])


def load_contrastive_csv(path, aug: AugmentationSpec | None = None) -> Dataset:
    rows, _ = _read_csv(path, ("label",))
    labels, X = [], []
    for lineno, row in rows:
        try:
            labels.append(int(row[0]) if row[0].strip() else None)
            X.append([float(v) for v in row[1:]])
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-numeric field") from None
    classes = None
    if all(v is not None for v in labels):
        classes = np.array(labels)
    return Dataset("contrastive_pool", np.array(X), classes=classes, aug=aug or AugmentationSpec())


def write_contrastive_csv(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{j + 1}" for j in range(ds.dim)])
        for i, x in enumerate(ds.X):
            lab = "" if ds.classes is None else str(int(ds.classes[i]))
            w.writerow([lab] + [f"{v:.17g}" for v in x])


# ------------------------------------------------------------- generators

def gen_binary(n_pos, n_neg, d, separation, seed=0) -> Dataset:
    """Positives ~ N(+delta e1, I), negatives ~ N(-delta e1, I)."""
    if n_pos < 1 or n_neg < 1 or d < 1:
        raise ValueError("n_pos, n_neg and d must be positive")
    if separation < 0:
        raise ValueError("separation must be >= 0")
    rng = np.random.default_rng(seed)
    Xp = rng.standard_normal((n_pos, d))
    Xn = rng.standard_normal((n_neg, d))
    Xp[:, 0] += separation
    Xn[:, 0] -= separation
    y = np.concatenate([np.ones(n_pos, dtype=np.int64), -np.ones(n_neg, dtype=np.int64)])
    return Dataset("binary", np.vstack([Xp, Xn]), y)


def gen_multitask(n, d, tasks, separation, pos_rate=0.2, seed=0) -> Dataset:
    """Task k labels positive with probability ``pos_rate``; its positives are
    shifted by ``+delta`` along coordinate ``k mod d``."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    Y = np.where(rng.random((n, tasks)) < pos_rate, 1, -1)
    for k in range(tasks):
        Y[0, k], Y[1, k] = 1, -1  # every task has both classes
        X[:, k % d] += separation * Y[:, k]
    return Dataset("binary", X, Y)


def gen_ranking(n_queries, items_per_query, levels=3, signal=2.0, d=5, seed=0) -> Dataset:
    """Relevance grades from the latent score ``signal * x1 + N(0, 1)``.

    Grades are assigned per query by latent quantiles: the top 30% of items
    are relevant, split evenly into grades ``1..levels-1``.
    """
    if levels < 2:
        raise ValueError("levels must be >= 2")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n_queries * items_per_query, d))
    latent = signal * X[:, 0] + rng.standard_normal(X.shape[0])
    rel = np.zeros(X.shape[0])
    qid = np.repeat(np.arange(n_queries), items_per_query)
    n_rel = max(1, int(round(0.3 * items_per_query)))
    for q in range(n_queries):
        idx = np.flatnonzero(qid == q)
        order = idx[np.argsort(-latent[idx], kind="stable")][:n_rel]
        grades = levels - 1 - (np.arange(n_rel) * (levels - 1)) // n_rel
        rel[order] = grades
    return Dataset("ranking", X, qid=qid, rel=rel)


def gen_contrastive(n, d, n_classes=2, separation=2.0, offset=0.0, aug=None, seed=0) -> Dataset:
    """Class means ``separation * e_c`` (cyclic over coordinates) plus unit
    noise; ``offset`` is added to every coordinate."""
    rng = np.random.default_rng(seed)
    classes = np.arange(n) % n_classes
    X = rng.standard_normal((n, d))
    X[np.arange(n), classes % d] += separation
    return Dataset("contrastive_pool", X + offset, classes=classes, aug=aug or AugmentationSpec())


def gen_pairs(n, d_img, d_txt, noise=0.1, seed=0) -> Dataset:
    """Image-text pairs generated from a shared latent vector."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, max(d_img, d_txt)))
    A = rng.standard_normal((z.shape[1], d_img))
    B = rng.standard_normal((z.shape[1], d_txt))
    X = z @ A + noise * rng.standard_normal((n, d_img))
    T = z @ B + noise * rng.standard_normal((n, d_txt))
    return Dataset("contrastive_pool", X, X_pair=T)


def augment(pool: Dataset, index, draw, spec: AugmentationSpec | None = None) -> np.ndarray:
    """Deterministic augmentation of sample ``index`` for draw number ``draw``."""
    spec = pool.aug if spec is None else spec
    x = pool.X[index].copy()
    rng = np.random.default_rng([spec.seed, int(index), int(draw)])
    lo, hi = spec.scale_range
    if hi > lo:
        x *= rng.uniform(lo, hi)
    if spec.dropout_rate > 0:
        x *= rng.random(x.shape[0]) >= spec.dropout_rate
    if spec.noise_sigma > 0:
        x += spec.noise_sigma * rng.standard_normal(x.shape[0])
    return x


def augmented_views(pool: Dataset, n_views, spec=None) -> np.ndarray:
    """Array (n, n_views, dim) of augmented copies of every sample."""
    return np.stack([np.stack([augment(pool, i, v, spec) for v in range(n_views)])
                     for i in range(pool.n)])


# ----------------------------------------------------------------- sampler

SAMPLER_STRATEGIES = ("uniform_with_replacement", "epoch_shuffle")


class TwoLevelSampler:
    """Draws B1 distinct blocks per step and a size-B2 batch from a block's set.

    ``uniform_with_replacement`` draws fresh uniform blocks each step and inner
    items with replacement.  ``epoch_shuffle`` walks a reshuffled permutation
    of the blocks and draws inner items without replacement.  A request of
    B2 >= |set| returns the whole set in its stored order.
    """

    def __init__(self, B1, B2, seed=0, strategy="uniform_with_replacement"):
        if B1 < 1 or B2 < 1:
            raise ValueError("B1 and B2 must be positive")
        if strategy not in SAMPLER_STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}")
        self.B1, self.B2, self.seed, self.strategy = int(B1), int(B2), seed, strategy
        self.rng = np.random.default_rng(seed)
        self._perm = None
        self._pos = 0

    def blocks(self, m) -> np.ndarray:
        b1 = min(self.B1, m)
        if b1 == m:
            return np.arange(m)
        if self.strategy == "uniform_with_replacement":
            return np.sort(self.rng.choice(m, size=b1, replace=False))
        out = []
        while len(out) < b1:
            if self._perm is None or self._pos >= m:
                self._perm, self._pos = self.rng.permutation(m), 0
            take = self._perm[self._pos:self._pos + b1 - len(out)]
            self._pos += take.size
            out.extend(int(t) for t in take if t not in out)
        return np.sort(np.array(out))

    def inner(self, items, size=None) -> np.ndarray:
        items = np.asarray(items)
        b2 = self.B2 if size is None else size
        if items.size == 0 or b2 >= items.size:
            return items
        if self.strategy == "uniform_with_replacement":
            return items[self.rng.integers(0, items.size, size=b2)]
        return items[self.rng.choice(items.size, size=b2, replace=False)]


def sample_blocks(sampler: TwoLevelSampler, problem):
    """One draw of block ids and the inner batch of every drawn block."""
    blocks = sampler.blocks(problem.m)
    return blocks, [sampler.inner(problem.refs[i]) for i in blocks]


def dataset_from_config(cfg: dict) -> Dataset:
    """Build a dataset from a ``data`` config section (generator or file)."""
    cfg = dict(cfg)
    aug = AugmentationSpec.from_dict(cfg.get("augmentation", {}))
    if "path" in cfg:
        fmt = cfg.get("format") or _guess_format(cfg["path"])
        if fmt == "libsvm":
            return load_libsvm(cfg["path"], cfg.get("dim"))
        if fmt == "ranking_csv":
            return load_csv_ranking(cfg["path"])
        if fmt == "contrastive_csv":
            return load_contrastive_csv(cfg["path"], aug)
        raise ValueError(f"unknown data format {fmt!r}")
    gen = cfg.get("generator")
    seed = int(cfg.get("seed", 0))
    if gen == "gen_binary":
        return gen_binary(int(cfg["n_pos"]), int(cfg["n_neg"]), int(cfg["d"]),
                          float(cfg.get("separation", 1.0)), seed)
    if gen == "gen_multitask":
        return gen_multitask(int(cfg["n"]), int(cfg["d"]), int(cfg["tasks"]),
                             float(cfg.get("separation", 1.0)), float(cfg.get("pos_rate", 0.2)), seed)
    if gen == "gen_ranking":
        return gen_ranking(int(cfg["n_queries"]), int(cfg["items_per_query"]),
                           int(cfg.get("levels", 3)), float(cfg.get("signal", 2.0)),
                           int(cfg.get("d", 5)), seed)
    if gen == "gen_contrastive":
        return gen_contrastive(int(cfg["n"]), int(cfg["d"]), int(cfg.get("n_classes", 2)),
                               float(cfg.get("separation", 2.0)), float(cfg.get("offset", 0.0)),
                               aug, seed)
    if gen == "gen_pairs":
        return gen_pairs(int(cfg["n"]), int(cfg["d_img"]), int(cfg["d_txt"]),
                         float(cfg.get("noise", 0.1)), seed)
    raise ValueError(f"unknown data generator {gen!r}")


def _guess_format(path):
    suffix = Path(path).suffix.lower()
    if suffix in (".svm", ".libsvm", ".txt"):
        return "libsvm"
    if suffix == ".csv":
        with open(path) as fh:
            head = fh.readline()
        return "ranking_csv" if head.startswith("query_id") else "contrastive_csv"
    raise ValueError(f"cannot infer data format of {path}; set data.format")
