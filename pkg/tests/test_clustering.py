import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from diffpmcmc.clustering import (
    ClusterModel,
    ball_partition,
    cluster,
    cluster_by_class,
    load_cluster_model,
    merge_models,
    monitor_fraction,
    precompute_cluster_stats,
    save_cluster_model,
    standardize,
    update_clusters,
)
from diffpmcmc.errors import ValidationError


def greedy_oracle(points, eps):
    """Literal transcription of the greedy scan, one row at a time."""
    n = len(points)
    labels = [-1] * n
    seeds = []
    for i in range(n):
        if labels[i] >= 0:
            continue
        j = len(seeds)
        seeds.append(i)
        for k in range(i, n):
            if labels[k] < 0 and np.linalg.norm(points[k] - points[i]) <= eps:
                labels[k] = j
    return np.array(labels), np.array(seeds)


def test_hand_trace():
    z = np.array([[0.0], [0.1], [1.0]])
    cm = cluster(z, 0.2)
    assert cm.n_clusters == 2
    np.testing.assert_allclose(cm.centroids[:, 0], [0.05, 1.0])
    np.testing.assert_array_equal(cm.counts, [2, 1])
    np.testing.assert_array_equal(cm.assignment, [0, 0, 1])


def test_huge_epsilon_single_cluster():
    z = np.random.default_rng(0).normal(size=(50, 3))
    cm = cluster(z, 100.0)
    assert cm.n_clusters == 1
    np.testing.assert_allclose(cm.centroids[0], z.mean(axis=0))
    assert monitor_fraction(cm) == pytest.approx(1 / 50)


def test_tiny_epsilon_all_singletons():
    z = np.random.default_rng(1).normal(size=(40, 2))
    cm = cluster(z, 1e-12)
    assert cm.n_clusters == 40
    assert np.all(cm.first_moments == 0)
    assert np.all(cm.second_moments == 0)
    assert monitor_fraction(cm) == 1.0


def test_two_point_moments():
    counts, centroids, first, second = precompute_cluster_stats(np.array([0, 0]), np.array([[0.0], [2.0]]))
    assert centroids[0, 0] == 1.0
    assert first[0, 0] == 0.0
    assert second[0, 0, 0] == 2.0


def test_standardize_examples():
    Z = np.array([[1.0, 1.0], [1.0, 2.0], [1.0, 3.0]])
    zs, rec = standardize(Z, exempt=[0])
    np.testing.assert_allclose(zs[:, 1], [-1, 0, 1])
    np.testing.assert_array_equal(zs[:, 0], 1.0)
    assert rec.mean[1] == 2.0 and rec.scale[1] == 1.0
    again, _ = standardize(zs, exempt=[0])
    np.testing.assert_allclose(again, zs, atol=1e-12)


def test_standardize_zero_variance_names_column():
    with pytest.raises(ValidationError, match="age"):
        standardize(np.array([[1.0, 5.0], [2.0, 5.0]]), names=["y", "age"])


def test_monitor_fraction_large_scale():
    assert 173_135 / 4_664_957 == pytest.approx(0.0371, abs=5e-5)
    cm = cluster(np.arange(10.0)[:, None], 0.5)
    assert monitor_fraction(cm) == 1.0


points_strategy = arrays(
    np.float64, st.tuples(st.integers(1, 60), st.integers(1, 3)),
    elements=st.floats(-3, 3, allow_nan=False, width=32),
)


@settings(max_examples=60, deadline=None)
@given(points_strategy, st.floats(0.05, 2.0))
def test_matches_literal_greedy_scan(points, eps):
    labels, seeds = ball_partition(points, eps)
    ref_labels, ref_seeds = greedy_oracle(points, eps)
    np.testing.assert_array_equal(labels, ref_labels)
    np.testing.assert_array_equal(seeds, ref_seeds)


@settings(max_examples=60, deadline=None)
@given(points_strategy, st.floats(0.05, 2.0))
def test_partition_and_radius_properties(points, eps):
    cm = cluster(points, eps)
    assert cm.counts.sum() == len(points)
    assert np.all(cm.assignment >= 0)
    assert np.all(np.bincount(cm.assignment, minlength=cm.n_clusters) == cm.counts)
    seed_pts = points[cm.seeds][cm.assignment]
    assert np.all(np.linalg.norm(points - seed_pts, axis=1) <= eps)
    assert np.all(np.linalg.norm(points - cm.centroids[cm.assignment], axis=1) <= 2 * eps + 1e-12)
    for B in cm.second_moments:
        np.testing.assert_array_equal(B, B.T)
        assert np.linalg.eigvalsh(B).min() > -1e-9
    singletons = cm.counts == 1
    assert np.all(cm.first_moments[singletons] == 0)
    for j in range(cm.n_clusters):
        members = points[cm.assignment == j]
        trace = np.sum((members - cm.centroids[j]) ** 2)
        assert np.trace(cm.second_moments[j]) == pytest.approx(trace, rel=1e-9, abs=1e-12)


def test_index_path_equals_brute_force():
    z = np.random.default_rng(2).normal(size=(3000, 3))
    brute = ball_partition(z, 0.6, index_threshold=10**9)
    indexed = ball_partition(z, 0.6, index_threshold=0)
    np.testing.assert_array_equal(brute[0], indexed[0])
    np.testing.assert_array_equal(brute[1], indexed[1])


def test_deterministic():
    z = np.random.default_rng(3).normal(size=(500, 3))
    a, b = cluster(z, 0.5), cluster(z, 0.5)
    for f in ("centroids", "counts", "first_moments", "second_moments", "seeds", "assignment"):
        assert getattr(a, f).tobytes() == getattr(b, f).tobytes()


def test_moments_use_model_coordinates():
    rng = np.random.default_rng(4)
    z = rng.normal(loc=5, scale=3, size=(200, 2))
    zs, rec = standardize(z)
    cm = cluster(zs, 0.4, z=z, standardization=rec)
    for j in range(cm.n_clusters):
        np.testing.assert_allclose(cm.centroids[j], z[cm.assignment == j].mean(axis=0))


def test_save_load_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    z = rng.normal(size=(300, 4))
    zs, rec = standardize(z)
    rows = np.arange(0, 300, 2)
    cm = cluster(zs, 0.9, z=z, rows=rows, standardization=rec)
    path = tmp_path / "m.clu"
    save_cluster_model(cm, path)
    back = load_cluster_model(path)
    for f in ("centroids", "counts", "first_moments", "second_moments", "seeds", "assignment"):
        np.testing.assert_array_equal(getattr(back, f), getattr(cm, f))
    assert back.epsilon == cm.epsilon
    np.testing.assert_array_equal(back.standardization.scale, rec.scale)
    raw = path.read_bytes()
    assert raw[:8] == b"DPMCCLU\x00"


def test_load_rejects_garbage(tmp_path):
    path = tmp_path / "bad.clu"
    path.write_bytes(b"not a cluster file at all, definitely not")
    with pytest.raises(ValidationError):
        load_cluster_model(path)


def test_by_class_examples():
    zs = np.array([[0.0, 0.0], [1.0, 0.0]])
    per = cluster_by_class(zs, zs[:, 0], 0.5)
    assert {k: v.n_clusters for k, v in per.items()} == {0.0: 1, 1.0: 1}
    rng = np.random.default_rng(6)
    x = rng.normal(size=(100, 2))
    y = (rng.random(100) < 0.5).astype(float)
    z = np.column_stack([y, x])
    per = cluster_by_class(z, y, 100.0)
    assert sum(m.n_clusters for m in per.values()) == 2
    for label, m in per.items():
        assert np.all(m.centroids[:, 0] == label)


def test_by_class_equals_separate_runs():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(400, 2))
    y = rng.permutation(np.repeat([0.0, 1.0], 200))
    z = np.column_stack([y, x])
    per = cluster_by_class(z, y, 0.5)
    for label in (0.0, 1.0):
        separate = cluster(x[y == label], 0.5)
        assert per[label].n_clusters == separate.n_clusters
    merged = merge_models(per.values())
    assert merged.n == 400 and np.all(merged.assignment >= 0)


def test_update_matches_properties():
    rng = np.random.default_rng(8)
    z = rng.normal(size=(600, 2))
    old = cluster(z[:400], 0.5)
    old = ClusterModel(old.centroids, old.counts, old.first_moments, old.second_moments,
                       old.seeds, old.assignment, old.epsilon, old.standardization)
    upd = update_clusters(old, z, z, np.arange(400, 600))
    assert upd.n == 600
    assert np.all(np.linalg.norm(z - z[upd.seeds][upd.assignment], axis=1) <= 0.5)
    for j in range(upd.n_clusters):
        members = z[upd.assignment == j]
        assert upd.counts[j] == len(members)
        np.testing.assert_allclose(upd.centroids[j], members.mean(axis=0), atol=1e-12)
        dev = members - upd.centroids[j]
        np.testing.assert_allclose(upd.second_moments[j], dev.T @ dev, atol=1e-10)
        np.testing.assert_allclose(upd.first_moments[j], dev.sum(axis=0), atol=1e-10)
