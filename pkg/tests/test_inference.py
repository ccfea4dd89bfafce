import numpy as np
import pytest

from stepmetric.embednet import ArchSpec, init_network
from stepmetric.inference import (
    Gallery,
    add_anomaly_entries,
    build_gallery,
    classify_image,
    knn_classify,
    load_gallery,
    save_gallery,
)
from stepmetric.augment import RandomErasingParams
from stepmetric.datagen import load_split
from stepmetric.labels import ERROR_LABEL, step_label


def synthetic_gallery(n=40, dim=6, classes=4, seed=0, metric="squared_euclidean"):
    rng = np.random.default_rng(seed)
    emb = rng.standard_normal((n, dim))
    labels = [step_label(1 + i % classes) for i in range(n)]
    ids = [f"g{i}" for i in range(n)]
    return Gallery(emb, labels, ids, metric)


def brute_force_knn(gallery, query, k):
    """Index-stable reference scan used to pin the kNN implementation."""
    scored = []
    for i in range(len(gallery)):
        diff = gallery.embeddings[i] - np.asarray(query, dtype=np.float64)
        d = float(np.sum(diff * diff))
        if gallery.metric == "euclidean":
            d = float(np.sqrt(d))
        scored.append((d, i))
    scored.sort(key=lambda t: (t[0], t[1]))
    top = scored[:k]
    votes = {}
    for d, i in top:
        votes[gallery.labels[i]] = votes.get(gallery.labels[i], 0) + 1
    return top, votes


class TestKnnClassify:
    def test_exact_gallery_member_at_k1(self):
        g = synthetic_gallery()
        r = knn_classify(g, g.embeddings[13], k=1)
        assert r.predicted == g.labels[13]
        assert r.mean_knn_distance == 0.0
        assert r.knn_votes == {g.labels[13]: 1}

    def test_majority_wins_below_threshold(self):
        emb = np.array([[0.0], [0.1], [0.2], [5.0]])
        labels = [step_label(3), step_label(3), step_label(4), step_label(4)]
        g = Gallery(emb, labels, list("abcd"))
        r = knn_classify(g, np.array([0.05]), k=3, threshold=100.0)
        assert r.predicted == step_label(3)
        assert not r.threshold_applied

    def test_threshold_overrides_unanimous_vote(self):
        g = synthetic_gallery()
        q = g.embeddings[0] + 100.0
        r = knn_classify(g, q, k=5, threshold=1.0)
        assert r.predicted == ERROR_LABEL
        assert r.threshold_applied
        assert r.mean_knn_distance > 1.0
        assert sum(r.knn_votes.values()) == 5

    def test_vote_tie_breaks_by_smaller_mean_distance(self):
        emb = np.array([[0.0], [0.4], [1.0], [1.01]])
        labels = [step_label(2), step_label(2), step_label(1), step_label(1)]
        g = Gallery(emb, labels, list("abcd"))
        r = knn_classify(g, np.array([0.3]), k=4)
        # votes tied 2-2; step_2 voters are closer on average
        # (0.09+0.01)/2 = 0.05 vs (0.49+0.5041)/2 = 0.497
        assert r.knn_votes == {step_label(2): 2, step_label(1): 2}
        assert r.predicted == step_label(2)

    def test_remaining_tie_breaks_to_lower_step(self):
        emb = np.array([[-1.0], [1.0]])
        g = Gallery(emb, [step_label(5), step_label(2)], ["a", "b"])
        r = knn_classify(g, np.array([0.0]), k=2)
        assert r.predicted == step_label(2)

    def test_vote_conservation(self):
        g = synthetic_gallery(n=30, classes=5, seed=3)
        rng = np.random.default_rng(1)
        for _ in range(50):
            q = rng.standard_normal(6)
            for k in (1, 3, 10):
                r = knn_classify(g, q, k=k)
                assert sum(r.knn_votes.values()) == k

    def test_threshold_monotonicity(self):
        # raising the threshold never converts a non-error prediction
        # into an error for a fixed query
        g = synthetic_gallery(seed=4)
        rng = np.random.default_rng(2)
        for _ in range(25):
            q = rng.standard_normal(6) * 3
            rejected_previously = True
            for th in np.linspace(0.01, 50, 30):
                r = knn_classify(g, q, k=5, threshold=float(th))
                if r.predicted != ERROR_LABEL:
                    rejected_previously = False
                else:
                    assert rejected_previously, "rejection reappeared at a higher threshold"

    @pytest.mark.parametrize("metric", ["squared_euclidean", "euclidean"])
    def test_matches_brute_force_scan(self, metric):
        g = synthetic_gallery(n=60, dim=8, classes=5, seed=5, metric=metric)
        rng = np.random.default_rng(6)
        for _ in range(300):
            q = rng.standard_normal(8) * rng.uniform(0.1, 3)
            k = int(rng.integers(1, 12))
            r = knn_classify(g, q, k=k)
            top, votes = brute_force_knn(g, q, k)
            assert r.knn_votes == votes
            assert r.mean_knn_distance == pytest.approx(np.mean([d for d, _ in top]), rel=1e-12)

    def test_k_bounds(self):
        g = synthetic_gallery(n=10)
        with pytest.raises(ValueError):
            knn_classify(g, g.embeddings[0], k=0)
        with pytest.raises(ValueError):
            knn_classify(g, g.embeddings[0], k=11)

    def test_dimension_mismatch(self):
        g = synthetic_gallery()
        with pytest.raises(ValueError):
            knn_classify(g, np.zeros(3), k=1)


class TestBuildGallery:
    def test_one_entry_per_image_and_determinism(self, tiny_dataset):
        root, manifest = tiny_dataset
        images = load_split(root, manifest, "train")
        params = init_network(ArchSpec(input_size=32, conv_channels=(2, 4, 4, 8), embed_dim=8), 0)
        g1 = build_gallery(params, images)
        g2 = build_gallery(params, images)
        assert len(g1) == len(images)
        assert np.array_equal(g1.embeddings, g2.embeddings)
        assert g1.labels == [im.label for im in images]

    def test_empty_rejected(self):
        params = init_network(ArchSpec(input_size=32, conv_channels=(2, 4, 4, 8), embed_dim=8), 0)
        with pytest.raises(ValueError):
            build_gallery(params, [])

    def test_classify_image_round_trip(self, tiny_dataset):
        root, manifest = tiny_dataset
        images = load_split(root, manifest, "train")
        params = init_network(ArchSpec(input_size=32, conv_channels=(2, 4, 4, 8), embed_dim=8), 1)
        gallery = build_gallery(params, images)
        r = classify_image(params, gallery, images[5], k=1)
        assert r.predicted == images[5].label
        # re-embedding goes through a different GEMM shape than the
        # batched gallery pass, so equality is only up to the last ulp
        assert r.mean_knn_distance < 1e-10

    def test_optional_anomaly_entries_extend_gallery(self, tiny_dataset):
        root, manifest = tiny_dataset
        images = load_split(root, manifest, "train")
        params = init_network(ArchSpec(input_size=32, conv_channels=(2, 4, 4, 8), embed_dim=8), 2)
        gallery = build_gallery(params, images)
        extended = add_anomaly_entries(gallery, params, images[:4], RandomErasingParams(), per_image=2, seed=3)
        assert len(extended) == len(gallery) + 8
        assert extended.labels[-1] == ERROR_LABEL
        assert np.array_equal(extended.embeddings[: len(gallery)], gallery.embeddings)


class TestGalleryFile:
    def test_round_trip_bit_exact(self, tmp_path):
        g = synthetic_gallery(n=17, dim=5, seed=9, metric="euclidean")
        path = tmp_path / "g.bin"
        save_gallery(g, path)
        loaded = load_gallery(path)
        assert np.array_equal(loaded.embeddings, g.embeddings)
        assert loaded.labels == g.labels
        assert loaded.ids == g.ids
        assert loaded.metric == g.metric

    def test_truncated_rejected(self, tmp_path):
        g = synthetic_gallery(n=5)
        path = tmp_path / "g.bin"
        save_gallery(g, path)
        data = path.read_bytes()
        bad = tmp_path / "cut.bin"
        bad.write_bytes(data[: len(data) - 7])
        with pytest.raises(ValueError, match="truncated"):
            load_gallery(bad)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"0" * 64)
        with pytest.raises(ValueError, match="magic"):
            load_gallery(path)
