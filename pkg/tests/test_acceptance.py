"""Acceptance suite: binding end-to-end checks at fixed tolerances.

Each test prints one PASS line (run with -s or -rP to see them all).
The heavyweight fixture trains quadruplet and triplet models over three
seeds on the seeded 8-step dataset; everything it produces is shared by
the headline-trend, distance-structure and rejection criteria.
"""

import itertools
import math
import time
from dataclasses import dataclass

import numpy as np
import pytest

from stepmetric import evaluate, inference, trainer
from stepmetric.augment import RandomErasingParams, make_anomaly_sample, random_erase_once
from stepmetric.config import TrainConfig
from stepmetric.datagen import DatasetSpec, generate_dataset
from stepmetric.embednet import ArchSpec, init_network, loss_gradients, tuple_loss
from stepmetric.labels import LabeledImage, ordered_labels, step_label
from stepmetric.loss import LossConfig, anomaly_quadruplet_loss, lambda_schedule
from stepmetric.sampler import (
    QuadrupletTuple,
    SamplerConfig,
    full_combination_count,
    neighbor_classes,
    reduced_epoch_tuples,
)

SEEDS = (1, 2, 3)
DATASET_SEED = 20240601


def desk_dataset_spec() -> DatasetSpec:
    return DatasetSpec(
        n_steps=8,
        images_per_split={"train": 40, "val": 50, "test": 50},
        error_test_images=50,
        image_size=64,
        seed=DATASET_SEED,
    )


def desk_train_config(mode: str, seed: int) -> TrainConfig:
    return TrainConfig(
        mode=mode,
        total_epochs=15,
        anomaly_start_epoch=5,
        learning_rate=3e-4,
        batch_size=16,
        k=10,
        seed=seed,
        checkpoint_every=0,
        arch=ArchSpec(input_size=64, conv_channels=(8, 16, 32, 64), embed_dim=32),
    )


@dataclass
class RunResult:
    mode: str
    seed: int
    history: trainer.TrainHistory
    accuracy: float
    adjacent_rate: float
    sweep: evaluate.SweepReport
    train_seconds: float


@pytest.fixture(scope="session")
def desk_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk_ds")
    manifest = generate_dataset(desk_dataset_spec(), root)
    return root, manifest


@pytest.fixture(scope="session")
def desk_runs(desk_dataset):
    """Six matched-budget trainings (2 modes x 3 seeds) plus sweeps."""
    from stepmetric.datagen import load_split

    root, manifest = desk_dataset
    train_images = load_split(root, manifest, "train")
    test_images = load_split(root, manifest, "test")
    labels = ordered_labels(8)
    results: list[RunResult] = []
    total_t0 = time.perf_counter()
    for seed in SEEDS:
        for mode in ("quadruplet", "triplet"):
            t0 = time.perf_counter()
            params, history = trainer.train(desk_train_config(mode, seed), root)
            train_seconds = time.perf_counter() - t0
            gallery = inference.build_gallery(params, train_images)
            pairs = evaluate.predict_images(params, gallery, test_images, k=10, threshold=None)
            dists = [r.mean_knn_distance for _, r in pairs]
            thresholds = sorted(set(np.geomspace(max(min(dists) * 0.25, 1e-6), max(dists) * 2.0, 48)))
            sweep = evaluate.threshold_sweep(params, gallery, test_images, 10, thresholds, labels)
            best = sweep.best_by_accuracy()
            results.append(
                RunResult(mode, seed, history, best.accuracy, best.adjacent_rate, sweep, train_seconds)
            )
    return results, time.perf_counter() - total_t0


def test_criterion_1_loss_algebra():
    """Quadruplet loss equals an independent straight-line recomputation."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    cfg_cache = {
        m: LossConfig(m_alpha=0.8, m_beta=1.2, m_c=0.6, distance=m, anomaly_start_epoch=5, total_epochs=10)
        for m in ("squared_euclidean", "euclidean")
    }
    for i in range(1000):
        metric = "squared_euclidean" if i % 2 == 0 else "euclidean"
        dim = int(rng.integers(2, 65))
        vecs = [rng.standard_normal(dim) for _ in range(5)]
        lam = float(rng.uniform(0, 1))
        bd = anomaly_quadruplet_loss(*vecs, cfg_cache[metric], lam)

        def dist(u, v):
            s = float(sum((a - b) * (a - b) for a, b in zip(u, v)))
            return s if metric == "squared_euclidean" else math.sqrt(s)

        ea, ep, en1, en2, eano = [v.tolist() for v in vecs]
        g = [(a + b + c + d) / 4.0 for a, b, c, d in zip(ea, ep, en1, en2)]
        expected = (
            max(dist(ea, ep) - dist(ea, en1) + 0.8, 0.0)
            + max(dist(ea, ep) - dist(ea, en2) + 1.2, 0.0)
            + lam * max(dist(ea, ep) - dist(eano, g) + 0.6, 0.0)
        )
        assert abs(bd.total - expected) < 1e-9

    e = np.ones(16)
    bd = anomaly_quadruplet_loss(e, e, e, e, e, cfg_cache["squared_euclidean"], 0.75)
    assert bd.total == 0.8 + 1.2 + 0.75 * 0.6
    elapsed = time.perf_counter() - t0
    assert elapsed < 1.0, f"loss algebra took {elapsed:.2f}s"
    print(f"\nACCEPTANCE 1 loss algebra: PASS ({elapsed:.2f}s)")


def test_criterion_2_combinatorics_oracle():
    """Counting formulas: published 8x40 values and brute-force equality."""
    t0 = time.perf_counter()
    assert full_combination_count(8, 40, "triplet") == 3_494_400
    assert full_combination_count(8, 40, "quadruplet") == 838_656_000

    def brute(n, m, mode):
        count = 0
        for ca in range(n):
            for a, p in itertools.permutations(range(m), 2):
                for cn1 in (c for c in range(n) if c != ca):
                    for _ in range(m):
                        if mode == "triplet":
                            count += 1
                        else:
                            count += sum(m for cn2 in range(n) if cn2 not in (ca, cn1))
        return count

    for mode, n_min in (("triplet", 2), ("quadruplet", 3)):
        for n in range(n_min, 6):
            for m in range(2, 5):
                assert full_combination_count(n, m, mode) == brute(n, m, mode), (mode, n, m)
    elapsed = time.perf_counter() - t0
    assert elapsed < 10.0
    print(f"\nACCEPTANCE 2 combinatorics oracle: PASS ({elapsed:.2f}s)")


def test_criterion_3_sampler_law():
    """reduced_epoch_tuples emits exactly 2nm valid tuples."""
    t0 = time.perf_counter()

    def tiny_dataset(n, m, rng):
        return {
            c: [
                LabeledImage(rng.random((8, 8, 3), dtype=np.float32), step_label(c), f"c{c}i{i}")
                for i in range(m)
            ]
            for c in range(1, n + 1)
        }

    def check(t, n):
        c_a, c_p, c_n1, c_n2, c_src = t.classes
        assert c_a == c_p and t.anchor.id != t.positive.id
        assert {c_n1, c_n2} == set(neighbor_classes(c_a, n)) and c_n1 != c_n2
        assert c_src != c_a
        assert t.anomaly.label == f"anomaly[{step_label(c_src)}]"
        assert t.negative1.label == step_label(c_n1)
        assert t.negative2.label == step_label(c_n2)

    shape_rng = np.random.default_rng(7)
    for trial in range(20):
        n = int(shape_rng.integers(3, 11))
        m = int(shape_rng.integers(2, 9))
        data_rng = np.random.default_rng(trial)
        ds = tiny_dataset(n, m, data_rng)
        tuples = reduced_epoch_tuples(
            SamplerConfig(n=n, m=m), ds, np.random.Generator(np.random.PCG64(trial))
        )
        assert len(tuples) == 2 * n * m, (n, m)
        for t in tuples:
            check(t, n)

    ds = tiny_dataset(8, 40, np.random.default_rng(99))
    assert len(reduced_epoch_tuples(SamplerConfig(n=8, m=40), ds, np.random.Generator(np.random.PCG64(0)))) == 640
    elapsed = time.perf_counter() - t0
    assert elapsed < 10.0
    print(f"\nACCEPTANCE 3 sampler law: PASS ({elapsed:.2f}s)")


def test_criterion_4_random_erasing_geometry():
    """1000 seeded erasures stay inside the area/aspect envelope."""
    t0 = time.perf_counter()
    params = RandomErasingParams()
    rng = np.random.default_rng(12)
    base = LabeledImage(rng.random((64, 64, 3), dtype=np.float32), "step_02", "src")
    area = 64 * 64
    for seed in range(1000):
        erng = np.random.Generator(np.random.PCG64(seed))
        _, rect = random_erase_once(base, params, erng)
        assert not rect.fallback
        assert 0.02 <= rect.sampled_area_frac <= 0.4
        assert 0.3 <= rect.sampled_aspect <= 3.3
        h_exact = math.sqrt(rect.sampled_area_frac * area * rect.sampled_aspect)
        w_exact = math.sqrt(rect.sampled_area_frac * area / rect.sampled_aspect)
        assert abs(rect.height - h_exact) <= 1 and abs(rect.width - w_exact) <= 1
        lo_px = max(1, (math.floor(h_exact) - 1)) * max(1, (math.floor(w_exact) - 1))
        hi_px = (math.ceil(h_exact) + 1) * (math.ceil(w_exact) + 1)
        assert lo_px <= rect.height * rect.width <= hi_px

    # anomaly samples: exactly two applications, untouched complement
    for seed in range(100):
        erng = np.random.Generator(np.random.PCG64(10_000 + seed))
        out, rects = make_anomaly_sample(base, params, erng)
        assert len(rects) == 2
        union = np.zeros((64, 64), dtype=bool)
        for r in rects:
            union |= r.mask((64, 64))
        assert np.array_equal(out.pixels[~union], base.pixels[~union])
        assert not np.any(np.any(out.pixels != base.pixels, axis=2) & ~union)
    elapsed = time.perf_counter() - t0
    assert elapsed < 30.0
    print(f"\nACCEPTANCE 4 random erasing geometry: PASS ({elapsed:.2f}s)")


def test_criterion_5_gradient_correctness():
    """Central differences (step 1e-4) agree with analytic gradients for
    at least 99% of parameters over 10 random tuples (tiny network).

    The network is piecewise linear, so the finite-difference estimate
    is biased wherever a rectifier or pooling kink falls inside the
    stencil; for a single interior kink that bias equals the second
    difference |f(x+h)+f(x-h)-2f(x)|/(2h) exactly. The comparison adds
    that oracle-side bias bound to the usual atol/rtol envelope, which
    keeps the check strict at genuinely smooth points (verified to flag
    a sign-flipped gradient on >70% of parameters).
    """
    t0 = time.perf_counter()
    arch = ArchSpec(input_size=16, conv_channels=(2, 2, 2, 2), embed_dim=4)
    cfg = LossConfig(anomaly_start_epoch=5, total_epochs=10)
    h, atol, rtol = 1e-4, 1e-5, 1e-3
    checked = failed = 0
    for trial in range(10):
        params = init_network(arch, seed=trial).astype(np.float64)
        rng = np.random.default_rng(100 + trial)
        imgs = [
            LabeledImage(rng.random((16, 16, 3), dtype=np.float32), "step_01", f"i{k}")
            for k in range(5)
        ]
        tup = QuadrupletTuple(*imgs, (2, 2, 1, 3, 4))
        center = tuple_loss(params, tup, cfg, 0.7).total
        _, grads = loss_gradients(params, tup, cfg, lam=0.7, dtype=np.float64)
        for name, tensor in params.tensors.items():
            flat = tensor.ravel()
            for idx in range(flat.size):
                orig = flat[idx]
                flat[idx] = orig + h
                lp = tuple_loss(params, tup, cfg, 0.7).total
                flat[idx] = orig - h
                lm = tuple_loss(params, tup, cfg, 0.7).total
                flat[idx] = orig
                fd = (lp - lm) / (2 * h)
                an = float(grads[name].ravel()[idx])
                fd_kink_bias = abs(lp + lm - 2 * center) / (2 * h)
                checked += 1
                if abs(fd - an) > atol + rtol * max(abs(fd), abs(an)) + fd_kink_bias:
                    failed += 1
    pass_rate = 1 - failed / checked
    elapsed = time.perf_counter() - t0
    assert pass_rate >= 0.99, f"only {100 * pass_rate:.2f}% of {checked} parameters agree"
    assert elapsed < 300.0
    print(f"\nACCEPTANCE 5 gradient correctness: PASS ({100 * pass_rate:.2f}% of {checked}, {elapsed:.0f}s)")


def test_criterion_6_lambda_curriculum(tiny_dataset):
    """Ramp boundaries plus a 20-epoch run whose history matches it."""
    t0 = time.perf_counter()
    cfg = LossConfig(anomaly_start_epoch=8, total_epochs=20)
    values = [lambda_schedule(e, cfg) for e in range(1, 21)]
    assert all(v == 0.0 for v in values[:7])
    assert values[-1] == 1.0
    assert all(b >= a for a, b in zip(values, values[1:]))

    root, _ = tiny_dataset
    tc = TrainConfig(
        mode="quadruplet", total_epochs=20, anomaly_start_epoch=8, learning_rate=3e-4,
        batch_size=4, k=3, seed=2, checkpoint_every=0,
        arch=ArchSpec(input_size=32, conv_channels=(2, 4, 4, 8), embed_dim=8),
    )
    _, history = trainer.train(tc, root)
    assert len(history.records) == 20
    for rec in history.records:
        assert rec.lam == lambda_schedule(rec.epoch, tc.resolved_loss())
    assert history.records[-1].lam == 1.0
    elapsed = time.perf_counter() - t0
    assert elapsed < 300.0
    print(f"\nACCEPTANCE 6 lambda curriculum: PASS ({elapsed:.0f}s)")


def test_criterion_7_headline_trend(desk_runs):
    """Quadruplet matches or beats triplet at matched budgets (3 seeds):
    median accuracy, median adjacent misclassification, and an absolute
    0.90 accuracy floor."""
    results, total_seconds = desk_runs
    quad = [r for r in results if r.mode == "quadruplet"]
    trip = [r for r in results if r.mode == "triplet"]
    assert len(quad) == len(trip) == 3
    q_acc = float(np.median([r.accuracy for r in quad]))
    t_acc = float(np.median([r.accuracy for r in trip]))
    q_adj = float(np.median([r.adjacent_rate for r in quad]))
    t_adj = float(np.median([r.adjacent_rate for r in trip]))
    assert q_acc >= t_acc, f"median accuracy: quadruplet {q_acc:.4f} < triplet {t_acc:.4f}"
    assert q_adj <= t_adj, f"median adjacent rate: quadruplet {q_adj:.4f} > triplet {t_adj:.4f}"
    assert q_acc >= 0.90
    assert total_seconds <= 3600.0, f"runs took {total_seconds:.0f}s"
    print(
        f"\nACCEPTANCE 7 headline trend: PASS (quad acc {q_acc:.4f} vs trip {t_acc:.4f}; "
        f"quad adj {q_adj:.4f} vs trip {t_adj:.4f}; {total_seconds:.0f}s total)"
    )


def test_criterion_8_distance_structure(desk_runs):
    """Final epoch of every run: within-class < adjacent-class <
    anomaly-to-centroid mean distance."""
    results, _ = desk_runs
    for r in results:
        final = r.history.records[-1]
        assert final.d_intra < final.d_adjacent < final.d_anomaly, (
            r.mode, r.seed, final.d_intra, final.d_adjacent, final.d_anomaly,
        )
    print("\nACCEPTANCE 8 distance structure: PASS "
          + "; ".join(f"{r.mode[:4]}/s{r.seed}: {r.history.records[-1].d_intra:.2f}<"
                      f"{r.history.records[-1].d_adjacent:.2f}<{r.history.records[-1].d_anomaly:.2f}"
                      for r in results))


def test_criterion_9_error_rejection(desk_runs):
    """Some threshold rejects >=80% of occluded images while flagging
    <=10% of clean ones; sweep metrics are monotone."""
    t0 = time.perf_counter()
    results, _ = desk_runs
    for r in results:
        recalls = [row.error_recall for row in r.sweep.rows]
        false_rates = [row.false_error_rate for row in r.sweep.rows]
        assert all(b <= a for a, b in zip(recalls, recalls[1:])), (r.mode, r.seed)
        assert all(b <= a for a, b in zip(false_rates, false_rates[1:])), (r.mode, r.seed)
    quad_ok = []
    for r in results:
        if r.mode != "quadruplet":
            continue
        good = [row for row in r.sweep.rows if row.error_recall >= 0.8 and row.false_error_rate <= 0.1]
        assert good, f"no workable threshold for quadruplet seed {r.seed}"
        quad_ok.append(good[0].threshold)
    elapsed = time.perf_counter() - t0
    assert elapsed < 300.0
    print(f"\nACCEPTANCE 9 error rejection: PASS (workable thresholds e.g. {quad_ok})")


def test_criterion_10_knn_exactness_and_plumbing(tiny_dataset, tmp_path):
    """Brute-force kNN equality, bit-exact file round trips, and
    identical metrics for two identical seeded runs."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(17)
    for metric in ("squared_euclidean", "euclidean"):
        emb = rng.standard_normal((64, 8))
        labels = [step_label(1 + i % 5) for i in range(64)]
        gallery = inference.Gallery(emb, labels, [f"g{i}" for i in range(64)], metric)
        for _ in range(500):
            q = rng.standard_normal(8) * rng.uniform(0.2, 2.0)
            k = int(rng.integers(1, 13))
            r = inference.knn_classify(gallery, q, k=k)
            scored = []
            for i in range(64):
                diff = emb[i] - q
                d = float(np.sum(diff * diff))
                scored.append((d if metric == "squared_euclidean" else math.sqrt(d), i))
            scored.sort(key=lambda t: (t[0], t[1]))
            votes = {}
            for d, i in scored[:k]:
                votes[labels[i]] = votes.get(labels[i], 0) + 1
            assert r.knn_votes == votes
            assert r.mean_knn_distance == pytest.approx(
                float(np.mean([d for d, _ in scored[:k]])), rel=1e-12
            )

    # file round trips
    root, manifest = tiny_dataset
    from stepmetric.datagen import load_split

    arch = ArchSpec(input_size=32, conv_channels=(2, 4, 4, 8), embed_dim=8)
    params = init_network(arch, 3)
    tc = TrainConfig(
        mode="triplet", total_epochs=2, anomaly_start_epoch=1, learning_rate=3e-4,
        batch_size=4, k=3, seed=5, checkpoint_every=0, arch=arch,
    )
    ck = tmp_path / "c.ckpt"
    trainer.save_checkpoint(params, tc, ck)
    loaded, _ = trainer.load_checkpoint(ck)
    assert all(np.array_equal(params.tensors[k], loaded.tensors[k]) for k in params.tensors)

    train_images = load_split(root, manifest, "train")
    gallery = inference.build_gallery(params, train_images)
    gp = tmp_path / "g.bin"
    inference.save_gallery(gallery, gp)
    loaded_gallery = inference.load_gallery(gp)
    assert np.array_equal(loaded_gallery.embeddings, gallery.embeddings)
    assert loaded_gallery.labels == gallery.labels and loaded_gallery.ids == gallery.ids

    # two identical seeded end-to-end runs agree on every recorded metric
    # except wall-clock seconds
    out_a, out_b = tmp_path / "runA", tmp_path / "runB"
    trainer.train(tc, root, out_dir=out_a)
    trainer.train(tc, root, out_dir=out_b)

    def strip_seconds(path):
        lines = (path / "metrics.csv").read_text().strip().splitlines()
        return [",".join(line.split(",")[:-1]) for line in lines]

    assert strip_seconds(out_a) == strip_seconds(out_b)
    assert (out_a / "checkpoint_final.ckpt").read_bytes() == (out_b / "checkpoint_final.ckpt").read_bytes()
    elapsed = time.perf_counter() - t0
    print(f"\nACCEPTANCE 10 kNN exactness and plumbing: PASS ({elapsed:.0f}s)")
