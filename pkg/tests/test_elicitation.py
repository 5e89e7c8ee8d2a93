import numpy as np
import pytest
from hypothesis import given, strategies as st

from routed_steering import elicitation as E
from routed_steering import tasks as T


def planted(d=128, k=6, n=200, sigma=0.2, seed=0):
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    U = Q[:, :k].T
    X = np.concatenate([U[j] + rng.normal(0, sigma, (n, d)) for j in range(k)])
    return X, np.repeat(np.arange(k), n), U


def test_pca_rank_two_subspace():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(50, 2)) @ rng.normal(size=(2, 7))
    r = E.pca_report(X)
    assert abs(r.top(2) - 1.0) < 1e-9
    assert np.all(np.diff(r.fractions) <= 1e-15)
    assert abs(r.fractions.sum() - 1.0) < 1e-12
    assert r.projection.shape == (50, 2)


def test_pca_isotropic_cloud():
    X = np.random.default_rng(1).normal(size=(10000, 8))
    assert np.all(np.abs(E.pca_report(X).fractions - 1 / 8) < 0.02)


def test_pca_rank_zero_is_reported():
    with pytest.raises(ValueError, match="rank-0"):
        E.pca_report(np.ones((5, 3)))


def test_kmeans_single_cluster_is_mean():
    X = np.random.default_rng(2).normal(size=(30, 4))
    km = E.kmeans(X, 1)
    assert np.all(km.assignments == 0)
    np.testing.assert_allclose(km.centroids[0], X.mean(axis=0), atol=1e-12)


def test_kmeans_separates_point_masses():
    X = np.concatenate([np.zeros((10, 3)), np.full((7, 3), 5.0)])
    km = E.kmeans(X, 2, seed=3)
    assert len(set(km.assignments[:10])) == 1 and len(set(km.assignments[10:])) == 1
    assert km.assignments[0] != km.assignments[-1]


def test_kmeans_is_deterministic_and_rejects_large_k():
    X, _, _ = planted(d=16, n=20)
    a, b = E.kmeans(X, 6, seed=5), E.kmeans(X, 6, seed=5)
    assert np.array_equal(a.assignments, b.assignments)
    with pytest.raises(ValueError):
        E.kmeans(X[:3], 4)


def test_kmeans_inertia_never_increases():
    X, _, _ = planted(d=16, n=30, sigma=0.5)
    h = E.kmeans(X, 6, seed=1, restarts=1).history
    assert all(b <= a + 1e-9 for a, b in zip(h, h[1:]))


def test_planted_directions_are_recovered():
    X, labels, U = planted(d=32, n=100, sigma=0.1)
    km = E.kmeans(X, 6, seed=0)
    assert E.cluster_purity(km.assignments, labels) >= 0.95
    lib = E.build_library(X, km.assignments, layer=1)
    assert np.abs(lib.vectors @ U.T).max(axis=1).min() >= 0.95


def test_library_of_identical_vectors():
    u = np.array([3.0, 4.0, 0.0])
    lib = E.build_library(np.tile(u, (4, 1)), np.zeros(4, int), layer=2)
    np.testing.assert_allclose(lib.vectors[0], u / 5.0, atol=1e-15)


def test_cancelling_cluster_is_rejected():
    e1 = np.array([1.0, 0.0])
    X = np.stack([e1, -e1, np.array([0.0, 2.0])])
    lib = E.build_library(X, np.array([0, 0, 1]), layer=1)
    assert lib.K == 1 and lib.rejected[0]["reason"] == "zero-norm centroid"
    with pytest.raises(E.ElicitationError):
        E.build_library(X[:2], np.array([0, 0]), layer=1)


@given(st.integers(1, 6), st.integers(2, 12), st.integers(0, 10_000))
def test_library_vectors_have_unit_norm(K, d, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(3 * K, d))
    lib = E.build_library(X, np.arange(3 * K) % K, layer=1)
    assert np.all(np.abs(np.linalg.norm(lib.vectors, axis=1) - 1.0) < 1e-9)


@given(st.integers(1, 8), st.integers(2, 10), st.integers(0, 10_000))
def test_cosine_matrix_properties(K, d, seed):
    V = np.random.default_rng(seed).normal(size=(K, d))
    C = E.cosine_matrix(V)
    assert np.array_equal(C, C.T)
    assert np.all(np.abs(np.diag(C) - 1.0) < 1e-12)
    assert np.all(np.abs(C) <= 1.0)


def test_orthonormal_library_has_zero_offdiagonal():
    C = E.cosine_matrix(np.eye(5))
    assert E.mean_abs_offdiag(C) == 0.0


def test_degenerate_pair_gives_zero_difference(tiny_model):
    x = T.make_instance(T.SkillSpec("max"), 3)
    pair = T.ContrastPair(x, x.prompt, x.prompt, 0)
    d = E.collect_pairs(tiny_model, [pair, pair], layer=1)
    assert np.all(d[0].diff == 0)
    assert np.array_equal(d[0].h_plus, d[1].h_plus)


def test_empty_accepted_set_aborts(tiny_model):
    stats = E.FilterStats(total=3, reasons={"no reasoning gap": 3})
    with pytest.raises(E.ElicitationError, match="no reasoning gap"):
        E.collect_pairs(tiny_model, [], 1, stats)


def test_filter_counts_every_pair(tiny_model):
    pairs = [T.make_contrast_pair(x) for x in T.generate_tasks(T.SkillSpec("lookup"), 12, 0)]
    kept, stats = E.filter_pairs(tiny_model, pairs, max_steps=4)
    assert stats.total == 12 and stats.accepted == len(kept)
    assert sum(stats.reasons.values()) == 12


def test_zero_alpha_sweep_reproduces_base(tiny_model):
    from routed_steering import model as M
    sets = {"max": T.generate_tasks(T.SkillSpec("max"), 8, 0)}
    V = np.random.default_rng(0).normal(size=(2, tiny_model.config.model_dim))
    lib = E.build_library(V, np.array([0, 1]), layer=1)
    rows = E.static_sweep(tiny_model, lib, sets, [0.0, 1.0], max_steps=4)
    base = M.greedy_many(tiny_model, [x.prompt for x in sets["max"]], max_steps=4, layer=1)
    acc = np.mean([T.verify(g, x) for g, x in zip(base, sets["max"])])
    assert all(r["accuracy"] == acc for r in rows if r["alpha"] == 0.0)
    assert len(rows) == 4


def test_library_save_load_and_binding(tmp_path):
    X, labels, _ = planted(d=16, n=10)
    fp = "ab" * 32
    lib = E.build_library(X, labels, layer=3, provenance={"model_fingerprint": fp})
    p = E.save_library(lib, tmp_path / "lib.bin")
    back = E.load_library(p, model_fingerprint=fp)
    assert back.hash == lib.hash and back.layer == 3 and back.K == 6
    assert np.all(np.abs(np.linalg.norm(back.vectors, axis=1) - 1.0) < 1e-9)
    with pytest.raises(E.LibraryFormatError):
        E.load_library(p, model_fingerprint="cd" * 32)
    raw = bytearray(p.read_bytes())
    raw[60] ^= 1
    p.write_bytes(bytes(raw))
    with pytest.raises(E.LibraryFormatError):
        E.load_library(p)
