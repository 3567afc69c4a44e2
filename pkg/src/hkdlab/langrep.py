"""Language representations and clustering.

Three views of a language are supported: binary typological (KB) feature
vectors read from CSV, the embedding of a language's tag token in a trained
multilingual model, and an SVCCA fusion of the two.  Languages are grouped
with seeded k-means, and each language's *effective clusters* are the clusters
(one per clustering type) that contain it.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import Vocabulary, tag_symbol
from .errors import ConfigurationError, SpecError
from .model import SequenceModel
from .seeds import derive_seed

log = logging.getLogger(__name__)

KINDS = ("kb", "nmt_learned", "fused")


@dataclass
class LanguageVectorSet:
    kind: str
    langs: list[str]
    vectors: np.ndarray
    correlations: np.ndarray | None = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.kind not in KINDS:
            raise SpecError("kind", f"unknown vector kind {self.kind!r}")
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.langs):
            raise SpecError("vectors", "need exactly one row per language")
        if len(set(self.langs)) != len(self.langs):
            raise SpecError("langs", "duplicate language ids")
        if not np.isfinite(self.vectors).all():
            raise SpecError("vectors", "entries must be finite")
        if self.kind == "kb" and not np.isin(self.vectors, (0.0, 1.0)).all():
            raise SpecError("vectors", "KB vectors must be 0/1-valued")

    @property
    def dimension(self) -> int:
        return self.vectors.shape[1]

    def subset(self, langs: Sequence[str]) -> "LanguageVectorSet":
        idx = [self.langs.index(l) for l in langs]
        return LanguageVectorSet(self.kind, list(langs), self.vectors[idx], self.correlations)


@dataclass
class Clustering:
    type_id: int
    assignment: dict[str, int]
    n: int
    objective: float | None = None
    history: list[float] = field(default_factory=list)

    def __post_init__(self):
        used = set(self.assignment.values())
        if used != set(range(1, self.n + 1)):
            raise SpecError("assignment", f"clustering type {self.type_id} must use every cluster 1..{self.n}")

    def members(self, cluster: int) -> list[str]:
        return [l for l, c in self.assignment.items() if c == cluster]

    def clusters(self) -> dict[int, list[str]]:
        return {c: self.members(c) for c in range(1, self.n + 1)}


EffectiveClusters = list[tuple[int, int]]


# ---------------------------------------------------------------------------
# views
# ---------------------------------------------------------------------------


def read_kb_csv(path) -> LanguageVectorSet:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0][0] != "lang":
        raise SpecError("kb_csv", f"{path}: header must start with 'lang'")
    langs = [r[0] for r in rows[1:] if r]
    vecs = np.array([[float(v) for v in r[1:]] for r in rows[1:] if r])
    return LanguageVectorSet("kb", langs, vecs.reshape(len(langs), len(rows[0]) - 1))


def learn_language_embeddings(model: SequenceModel, vocab: Vocabulary, langs: Sequence[str]) -> LanguageVectorSet:
    """Read each language's tag-token row out of the model's source embedding table."""
    missing = [l for l in langs if tag_symbol(l) not in vocab.index]
    if missing:
        raise ConfigurationError(f"model vocabulary has no tag tokens for: {', '.join(missing)}")
    rows = [model.p["src_emb"][vocab.tag_id(l)].copy() for l in langs]
    return LanguageVectorSet("nmt_learned", list(langs), np.array(rows))


def _svd_reduce(x: np.ndarray, keep_fraction: float, name: str, tol: float = 1e-10) -> np.ndarray:
    xc = x - x.mean(axis=0)
    u, s, _ = np.linalg.svd(xc, full_matrices=False)
    rank = int((s > tol * max(1.0, s[0] if s.size else 0.0)).sum())
    if rank < min(xc.shape):
        log.warning("view %s is rank-deficient after centering: keeping %d of %d directions", name, rank, min(xc.shape))
    if rank == 0:
        raise SpecError(name, "view has no variance after centering")
    var = s[:rank] ** 2
    cum = np.cumsum(var) / var.sum()
    k = int(np.searchsorted(cum, keep_fraction - 1e-12) + 1)
    k = min(k, rank)
    return u[:, :k] * s[:k]


def cca(a: np.ndarray, b: np.ndarray):
    """Canonical correlation between column-centered full-rank ``a`` and ``b``.

    Uses orthonormal bases from QR; returns (correlations, projections of a,
    projections of b), columns ordered by descending correlation.
    """
    qa, ra = np.linalg.qr(a)
    qb, rb = np.linalg.qr(b)
    u, rho, vt = np.linalg.svd(qa.T @ qb)
    k = min(a.shape[1], b.shape[1])
    rho = np.clip(rho[:k], 0.0, 1.0)
    wa = np.linalg.solve(ra, u[:, :k])
    wb = np.linalg.solve(rb, vt.T[:, :k])
    return rho, a @ wa, b @ wb


def svcca_fuse(view_a: LanguageVectorSet, view_b: LanguageVectorSet, keep_fraction: float = 0.99) -> LanguageVectorSet:
    """SVD-reduce each view, align them with CCA, and concatenate both projections."""
    if view_a.langs != view_b.langs:
        raise SpecError("view_b", "both views must list the same languages in the same order")
    if not 0.0 < keep_fraction <= 1.0:
        raise SpecError("keep_fraction", "must lie in (0, 1]")
    ra = _svd_reduce(view_a.vectors, keep_fraction, "view_a")
    rb = _svd_reduce(view_b.vectors, keep_fraction, "view_b")
    rho, pa, pb = cca(ra, rb)
    return LanguageVectorSet("fused", list(view_a.langs), np.hstack([pa, pb]), rho)


# ---------------------------------------------------------------------------
# clustering
# ---------------------------------------------------------------------------


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=-1)


def _kmeanspp(x: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    m = len(x)
    chosen = [int(rng.integers(m))]
    for _ in range(1, n):
        d2 = _sq_dists(x, x[chosen]).min(axis=1)
        d2[chosen] = 0.0
        if d2.sum() <= 0:
            rest = [i for i in range(m) if i not in chosen]
            chosen.append(int(rest[int(rng.integers(len(rest)))]))
        else:
            chosen.append(int(rng.choice(m, p=d2 / d2.sum())))
    return x[chosen].copy()


def _repair_empty(x: np.ndarray, labels: np.ndarray, centroids: np.ndarray, n: int) -> np.ndarray:
    labels = labels.copy()
    for k in range(n):
        if (labels == k).any():
            continue
        sizes = np.bincount(labels, minlength=n)
        big = int(sizes.argmax())
        members = np.flatnonzero(labels == big)
        far = members[int(((x[members] - centroids[big]) ** 2).sum(axis=1).argmax())]
        labels[far] = k
    return labels


def objective(x: np.ndarray, labels: np.ndarray) -> float:
    total = 0.0
    for k in np.unique(labels):
        pts = x[labels == k]
        total += float(((pts - pts.mean(axis=0)) ** 2).sum())
    return total


def kmeans(
    vectors: LanguageVectorSet, n: int, seed: int, type_id: int = 1, max_iter: int = 100, n_init: int = 1
) -> Clustering:
    """Lloyd's algorithm from a k-means++ start.

    Stops at an assignment fixpoint or after ``max_iter`` rounds.  Clusters are
    relabelled 1..n in order of first appearance along the language list.
    With ``n_init > 1`` the run is repeated from seeds derived from ``seed`` and
    the lowest-objective result is kept (earliest restart wins ties).
    """
    x = vectors.vectors
    m = len(x)
    if n < 1:
        raise SpecError("n", "cluster count must be >= 1")
    if n > m:
        raise SpecError("n", f"cannot make {n} clusters from {m} languages")
    if n_init < 1:
        raise SpecError("n_init", "must be >= 1")
    if n_init == 1:
        return _lloyd(vectors, n, seed, type_id, max_iter)
    runs = [_lloyd(vectors, n, derive_seed(seed, "kmeans-restart", r), type_id, max_iter) for r in range(n_init)]
    return min(runs, key=lambda c: c.objective)


def _lloyd(vectors: LanguageVectorSet, n: int, seed: int, type_id: int, max_iter: int) -> Clustering:
    x = vectors.vectors
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(x, n, rng)
    labels = _repair_empty(x, _sq_dists(x, centroids).argmin(axis=1), centroids, n)
    history = [objective(x, labels)]
    for _ in range(max_iter):
        centroids = np.array([x[labels == k].mean(axis=0) for k in range(n)])
        new = _repair_empty(x, _sq_dists(x, centroids).argmin(axis=1), centroids, n)
        # Lloyd steps never raise the objective; stop rather than accept one that did
        new_obj = objective(x, new)
        if np.array_equal(new, labels) or new_obj > history[-1] + 1e-12:
            break
        labels = new
        history.append(new_obj)
    return _relabel(vectors.langs, labels, n, type_id, history)


def _relabel(langs, labels, n, type_id, history) -> Clustering:
    mapping: dict[int, int] = {}
    for k in labels:
        mapping.setdefault(int(k), len(mapping) + 1)
    assignment = {l: mapping[int(k)] for l, k in zip(langs, labels)}
    return Clustering(type_id, assignment, n, history[-1] if history else None, list(history))


def random_clustering(langs: Sequence[str], n: int, seed: int, type_id: int = 1) -> Clustering:
    """Balanced random partition (ablation baseline)."""
    if not 1 <= n <= len(langs):
        raise SpecError("n", f"need 1 <= n <= {len(langs)}")
    rng = np.random.default_rng(seed)
    labels = np.arange(len(langs)) % n
    labels = labels[rng.permutation(len(langs))]
    return _relabel(list(langs), labels, n, type_id, [])


def effective_clusters(lang: str, clusterings: Sequence[Clustering]) -> EffectiveClusters:
    out = []
    for c in clusterings:
        if lang not in c.assignment:
            raise KeyError(f"language {lang!r} is missing from clustering type {c.type_id}")
        out.append((c.type_id, c.assignment[lang]))
    return out


def effective_cluster_index(langs: Sequence[str], clusterings: Sequence[Clustering]) -> dict[str, EffectiveClusters]:
    return {l: effective_clusters(l, clusterings) for l in langs}


def write_clusterings_csv(path, clusterings: Sequence[Clustering]) -> None:
    lines = ["lang,type_id,cluster"]
    for c in clusterings:
        lines += [f"{l},{c.type_id},{k}" for l, k in c.assignment.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_clusterings_csv(path) -> list[Clustering]:
    by_type: dict[int, dict[str, int]] = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            by_type.setdefault(int(row["type_id"]), {})[row["lang"]] = int(row["cluster"])
    return [Clustering(t, a, max(a.values())) for t, a in sorted(by_type.items())]


def clusterings_from_mapping(spec: Mapping[int, Mapping[str, int]]) -> list[Clustering]:
    return [Clustering(t, dict(a), max(a.values())) for t, a in sorted(spec.items())]
