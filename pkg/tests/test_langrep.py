import logging

import numpy as np
import pytest

from hkdlab.corpus import build_vocab
from hkdlab.errors import ConfigurationError, SpecError
from hkdlab.langrep import (
    Clustering,
    LanguageVectorSet,
    effective_clusters,
    kmeans,
    learn_language_embeddings,
    objective,
    random_clustering,
    read_clusterings_csv,
    read_kb_csv,
    svcca_fuse,
    write_clusterings_csv,
)
from hkdlab.model import ModelDims, SequenceModel
from hkdlab.seeds import derive_seed


def _langs(n):
    return [f"l{i}" for i in range(n)]


def direct_cca(a, b):
    """Oracle: whiten each centered view by its inverse covariance square root,
    then take singular values of the whitened cross-covariance."""
    a = a - a.mean(0)
    b = b - b.mean(0)

    def inv_sqrt(c):
        w, v = np.linalg.eigh(c)
        return v @ np.diag(w ** -0.5) @ v.T

    caa, cbb, cab = a.T @ a, b.T @ b, a.T @ b
    return np.linalg.svd(inv_sqrt(caa) @ cab @ inv_sqrt(cbb), compute_uv=False)


# --- SVCCA -------------------------------------------------------------------


def test_identical_views_correlate_perfectly():
    x = np.random.default_rng(0).normal(size=(8, 5))
    v = LanguageVectorSet("nmt_learned", _langs(8), x)
    fused = svcca_fuse(v, v, keep_fraction=0.99)
    assert fused.kind == "fused"
    np.testing.assert_allclose(fused.correlations, 1.0, atol=1e-6)


def test_invertible_map_keeps_correlations_at_one():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(10, 4))
    m = rng.normal(size=(4, 4)) + 3 * np.eye(4)
    a = LanguageVectorSet("nmt_learned", _langs(10), x)
    b = LanguageVectorSet("nmt_learned", _langs(10), x @ m)
    fused = svcca_fuse(a, b, keep_fraction=1.0)
    np.testing.assert_allclose(fused.correlations, 1.0, atol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_random_views_match_direct_cca(seed):
    rng = np.random.default_rng(seed)
    xa, xb = rng.normal(size=(8, 5)), rng.normal(size=(8, 5))
    fused = svcca_fuse(LanguageVectorSet("nmt_learned", _langs(8), xa),
                       LanguageVectorSet("nmt_learned", _langs(8), xb), keep_fraction=1.0)
    np.testing.assert_allclose(fused.correlations, direct_cca(xa, xb)[:5], atol=1e-6)


def test_fused_correlations_sorted_in_unit_interval():
    rng = np.random.default_rng(4)
    a = LanguageVectorSet("kb", _langs(9), rng.integers(0, 2, size=(9, 6)))
    b = LanguageVectorSet("nmt_learned", _langs(9), rng.normal(size=(9, 4)))
    f = svcca_fuse(a, b)
    r = f.correlations
    assert np.all((r >= 0) & (r <= 1)) and np.all(np.diff(r) <= 1e-12)
    assert f.vectors.shape[0] == 9 and f.vectors.shape[1] == 2 * len(r)


def test_projections_have_the_reported_correlations():
    rng = np.random.default_rng(8)
    a = LanguageVectorSet("nmt_learned", _langs(12), rng.normal(size=(12, 3)))
    b = LanguageVectorSet("nmt_learned", _langs(12), rng.normal(size=(12, 3)))
    f = svcca_fuse(a, b, keep_fraction=1.0)
    k = len(f.correlations)
    for j in range(k):
        c = np.corrcoef(f.vectors[:, j], f.vectors[:, k + j])[0, 1]
        assert abs(c - f.correlations[j]) < 1e-8


def test_rank_deficient_view_warns(caplog):
    rng = np.random.default_rng(2)
    base = rng.normal(size=(8, 2))
    a = LanguageVectorSet("nmt_learned", _langs(8), np.hstack([base, base]))
    b = LanguageVectorSet("nmt_learned", _langs(8), rng.normal(size=(8, 3)))
    with caplog.at_level(logging.WARNING):
        f = svcca_fuse(a, b, keep_fraction=1.0)
    assert "rank-deficient" in caplog.text
    assert len(f.correlations) == 2


def test_svcca_rejects_mismatched_languages():
    a = LanguageVectorSet("nmt_learned", ["x", "y", "z"], np.eye(3))
    b = LanguageVectorSet("nmt_learned", ["y", "x", "z"], np.eye(3))
    with pytest.raises(SpecError):
        svcca_fuse(a, b)
    with pytest.raises(SpecError):
        svcca_fuse(a, a, keep_fraction=0.0)


def test_vector_set_invariants():
    with pytest.raises(SpecError):
        LanguageVectorSet("kb", ["a"], [[0.5]])
    with pytest.raises(SpecError):
        LanguageVectorSet("nmt_learned", ["a", "b"], [[1.0]])
    with pytest.raises(SpecError):
        LanguageVectorSet("nmt_learned", ["a"], [[np.inf]])


def test_read_kb_csv(tmp_path):
    (tmp_path / "kb.csv").write_text("lang,f1,f2\nxx,0,1\nyy,1,1\n")
    kb = read_kb_csv(tmp_path / "kb.csv")
    assert kb.langs == ["xx", "yy"] and kb.dimension == 2


# --- language embeddings -------------------------------------------------------


def test_untrained_embeddings_are_init_rows():
    v = build_vocab([["ab"]], "char").with_tags(["x", "y"])
    m = SequenceModel.init(ModelDims(len(v), 6, 5), 0)
    e = learn_language_embeddings(m, v, ["x", "y"])
    np.testing.assert_array_equal(e.vectors[1], m.p["src_emb"][v.tag_id("y")])
    assert e.dimension == 6


def test_embeddings_need_tags():
    v = build_vocab([["ab"]], "char")
    m = SequenceModel.init(ModelDims(len(v), 6, 5), 0)
    with pytest.raises(ConfigurationError):
        learn_language_embeddings(m, v, ["x"])


# --- k-means -------------------------------------------------------------------


def brute_force_2partition(x):
    best = np.inf
    n = len(x)
    for mask in range(1, 2 ** (n - 1)):
        labels = np.array([(mask >> i) & 1 for i in range(n)])
        best = min(best, objective(x, labels))
    return best


def test_kmeans_recovers_blobs_and_matches_exhaustive_optimum():
    rng = np.random.default_rng(0)
    x = np.vstack([rng.normal(0, 0.1, size=(3, 2)), rng.normal(5, 0.1, size=(3, 2))])
    c = kmeans(LanguageVectorSet("nmt_learned", _langs(6), x), 2, seed=1)
    assert [c.assignment[l] for l in _langs(6)] == [1, 1, 1, 2, 2, 2]
    assert abs(c.objective - brute_force_2partition(x)) < 1e-12


def test_kmeans_n_equals_m_and_n_one():
    x = np.random.default_rng(3).normal(size=(5, 3))
    v = LanguageVectorSet("nmt_learned", _langs(5), x)
    assert sorted(kmeans(v, 5, 0).assignment.values()) == [1, 2, 3, 4, 5]
    c = kmeans(v, 1, 0)
    assert set(c.assignment.values()) == {1}
    assert abs(c.objective - ((x - x.mean(0)) ** 2).sum()) < 1e-12


def test_kmeans_objective_monotone_and_deterministic():
    rng = np.random.default_rng(5)
    for s in range(10):
        x = rng.normal(size=(20, 3))
        v = LanguageVectorSet("nmt_learned", _langs(20), x)
        c = kmeans(v, 4, s)
        assert all(b <= a + 1e-12 for a, b in zip(c.history, c.history[1:]))
        assert kmeans(v, 4, s).assignment == c.assignment
        assert len(set(c.assignment.values())) == 4


def test_kmeans_restarts_keep_the_best_run():
    rng = np.random.default_rng(6)
    for s in range(5):
        v = LanguageVectorSet("nmt_learned", _langs(12), rng.normal(size=(12, 2)))
        runs = [kmeans(v, 3, derive_seed(s, "kmeans-restart", r)) for r in range(8)]
        assert kmeans(v, 3, s, n_init=8).objective == min(c.objective for c in runs)
    with pytest.raises(SpecError):
        kmeans(v, 2, 0, n_init=0)


def test_kmeans_validation():
    v = LanguageVectorSet("nmt_learned", _langs(3), np.eye(3))
    with pytest.raises(SpecError):
        kmeans(v, 0, 0)
    with pytest.raises(SpecError):
        kmeans(v, 4, 0)


def test_duplicate_points_still_fill_every_cluster():
    v = LanguageVectorSet("nmt_learned", _langs(4), np.zeros((4, 2)))
    c = kmeans(v, 3, 0)
    assert set(c.assignment.values()) == {1, 2, 3}


def test_random_clustering_is_balanced():
    c = random_clustering(_langs(10), 3, 4)
    sizes = sorted(len(m) for m in c.clusters().values())
    assert sizes == [3, 3, 4]


# --- effective clusters -----------------------------------------------------------


def test_figure_two_scenario():
    c1 = Clustering(1, {"a": 1, "b": 1, "c": 2}, 2)
    c2 = Clustering(2, {"a": 1, "b": 2, "c": 2}, 2)
    assert effective_clusters("a", [c1, c2]) == [(1, 1), (2, 1)]
    assert effective_clusters("c", [c1]) == [(1, 2)]


def test_one_entry_per_type():
    langs = _langs(6)
    cs = [random_clustering(langs, 2, s, type_id=s + 1) for s in range(4)]
    for l in langs:
        eff = effective_clusters(l, cs)
        assert [t for t, _ in eff] == [1, 2, 3, 4]


def test_missing_language_names_type():
    c = Clustering(7, {"a": 1}, 1)
    with pytest.raises(KeyError, match="7"):
        effective_clusters("b", [c])


def test_empty_cluster_rejected():
    with pytest.raises(SpecError):
        Clustering(1, {"a": 1, "b": 3}, 3)


def test_clustering_csv_roundtrip(tmp_path):
    cs = [Clustering(1, {"a": 1, "b": 2}, 2), Clustering(2, {"a": 1, "b": 1}, 1)]
    write_clusterings_csv(tmp_path / "c.csv", cs)
    back = read_clusterings_csv(tmp_path / "c.csv")
    assert [(c.type_id, c.assignment, c.n) for c in back] == [(c.type_id, c.assignment, c.n) for c in cs]
