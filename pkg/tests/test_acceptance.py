"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s` to see the lines as they
complete.  The synthetic end-to-end experiment (criterion 7) trains three
toy encoders and takes a couple of minutes; everything else is fast.
"""

import csv
import itertools
import time

import numpy as np
import pytest

from versionid import alr, cli, cqfp, encoder, fileformats, retrieval, synth, training
from versionid.alr import N_SYMBOLS
from versionid.fileformats import FEATURE_KINDS


def check(number, name, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    print(f"[acceptance] criterion {number} ({name}): {status} {detail}".rstrip())
    assert ok, f"criterion {number} ({name}) failed {detail}"


# -----------------------------------------------------------------------
# 1. fusion identity
# -----------------------------------------------------------------------


def test_criterion_1_fusion_identity():
    # dimension chosen so 1.5M identity evaluations stay within budget;
    # the identity is dimension-independent
    started = time.time()
    rng = np.random.default_rng(1001)
    dim = 64
    total_pairs = 100_000
    chunk = 20_000
    masks = [
        kinds
        for r in range(1, 5)
        for kinds in itertools.combinations(range(4), r)
    ]
    assert len(masks) == 15
    worst = 0.0
    spot_checked = False
    for _ in range(total_pairs // chunk):
        a = rng.standard_normal((chunk, 4, dim))
        b = rng.standard_normal((chunk, 4, dim))
        a /= np.linalg.norm(a, axis=2, keepdims=True)
        b /= np.linalg.norm(b, axis=2, keepdims=True)
        d2 = np.sum((a - b) ** 2, axis=2)  # chunk x 4
        diff = a - b
        for mask in masks:
            fused = np.sqrt(d2[:, mask].mean(axis=1))
            n = len(mask)
            flat = diff[:, mask, :].reshape(chunk, n * dim)
            direct = np.sqrt(np.einsum("ij,ij->i", flat, flat)) / np.sqrt(n)
            worst = max(worst, float(np.abs(fused - direct).max()))
        if not spot_checked:
            # tie the vectorized expression to the package API
            from versionid.fusion import FusedEmbedding, fused_distance

            kinds = FEATURE_KINDS
            for row in range(0, 200):
                fa = FusedEmbedding({k: a[row, i] for i, k in enumerate(kinds)})
                fb = FusedEmbedding({k: b[row, i] for i, k in enumerate(kinds)})
                api = fused_distance(fa, fb, kinds[:3])
                vec = float(np.sqrt(d2[row, :3].mean()))
                assert abs(api - vec) <= 1e-12
            spot_checked = True
    elapsed = time.time() - started
    check(
        1,
        "fusion identity",
        worst <= 1e-9 and elapsed < 10.0,
        f"max |fused - concat| = {worst:.2e}, {elapsed:.1f}s",
    )


# -----------------------------------------------------------------------
# 2. CTC correctness
# -----------------------------------------------------------------------


def test_criterion_2_ctc_correctness():
    started = time.time()
    rng = np.random.default_rng(1002)
    worst_loss_gap = 0.0
    checked = 0
    while checked < 500:
        frames = int(rng.integers(1, 7))
        target = rng.integers(0, 27, size=int(rng.integers(0, 4)))
        if alr.min_frames_for(target) > frames:
            continue
        logits = rng.standard_normal((frames, N_SYMBOLS))
        log_probs = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        loss = alr.ctc_loss(log_probs, target)
        brute = alr.ctc_brute_force(np.exp(log_probs), target)
        worst_loss_gap = max(worst_loss_gap, abs(loss - (-np.log(brute))))
        checked += 1
    worst_grad = 0.0
    h = 1e-6
    for _ in range(8):
        frames = 6
        target = rng.integers(0, 27, size=3)
        logits = rng.standard_normal((frames, N_SYMBOLS))

        def loss_of(lg):
            lp = lg - np.log(np.exp(lg).sum(axis=1, keepdims=True))
            return alr.ctc_loss(lp, target)

        log_probs = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        grad = alr.ctc_gradient(log_probs, target)
        for t in range(frames):
            for k in range(0, N_SYMBOLS, 4):
                bumped = logits.copy()
                bumped[t, k] += h
                up = loss_of(bumped)
                bumped[t, k] -= 2 * h
                down = loss_of(bumped)
                numeric = (up - down) / (2 * h)
                scale = max(abs(grad[t, k]), abs(numeric), 1e-6)
                worst_grad = max(worst_grad, abs(grad[t, k] - numeric) / scale)
    elapsed = time.time() - started
    check(
        2,
        "CTC correctness",
        worst_loss_gap <= 1e-8 and worst_grad <= 1e-5 and elapsed < 60.0,
        f"loss gap {worst_loss_gap:.2e}, grad rel err {worst_grad:.2e}, {elapsed:.1f}s",
    )


# -----------------------------------------------------------------------
# 3. encoder gradients on miniature table configs
# -----------------------------------------------------------------------


def miniature_table_configs():
    from versionid.encoder import EncoderConfig, LayerSpec

    me = EncoderConfig(
        feature_kind="Me",
        layers=tuple(
            LayerSpec(filters=f, kernel=(3, 3), pool=(2, 2)) for f in (2, 2, 3, 3, 4)
        ),
        attention_dim=3,
        output_dim=6,
    )
    ha = EncoderConfig(
        feature_kind="Ha",
        layers=(
            LayerSpec(filters=2, kernel=(6, 4), pool=(1, 4), pool_stride=(1, 1),
                      padding="valid"),
            LayerSpec(filters=2, kernel=(3, 1), padding="valid"),
            LayerSpec(filters=3, kernel=(3, 1), padding="valid", dilation=(20, 1)),
            LayerSpec(filters=3, kernel=(3, 1), padding="valid"),
            LayerSpec(filters=4, kernel=(3, 1), padding="valid", dilation=(13, 1)),
        ),
        attention_dim=3,
        output_dim=6,
    )
    rh = EncoderConfig(
        feature_kind="Rh",
        layers=tuple(
            LayerSpec(filters=f, kernel=(3, 5) if i == 0 else (3, 3), pool=(1, 2))
            for i, f in enumerate((2, 2, 3, 3, 4))
        ),
        attention_dim=3,
        output_dim=6,
    )
    ly = EncoderConfig(
        feature_kind="Ly",
        layers=tuple(
            LayerSpec(filters=f, kernel=(4, 1), pool=(5, 1), pool_stride=(2, 1),
                      pooling="mean")
            for f in (2, 2, 3, 3, 4)
        ),
        attention_dim=3,
        output_dim=6,
    )
    inputs = {"Me": (16, 8), "Ha": (80, 4), "Rh": (10, 12), "Ly": (12, 28)}
    return {"Me": me, "Ha": ha, "Rh": rh, "Ly": ly}, inputs


def test_criterion_3_encoder_gradients():
    started = time.time()
    configs, inputs = miniature_table_configs()
    rng = np.random.default_rng(1003)
    h = 1e-6
    worst = 0.0
    for kind, config in configs.items():
        feature = rng.standard_normal(inputs[kind])
        tensor_shape = encoder.feature_to_tensor(feature, kind).shape
        weights = encoder.init_encoder_weights(config, tensor_shape, rng)
        # move biases off zero so no ReLU sits exactly on its kink
        for name in weights:
            weights[name] = weights[name] + 0.05 * rng.standard_normal(
                weights[name].shape
            )
        upstream = rng.standard_normal(config.output_dim)
        _, cache = encoder.encoder_forward_cached(feature, config, weights)
        norm_cache = cache[4]
        assert norm_cache[1] > 1e-6, f"{kind}: degenerate (dead) forward pass"
        grads = encoder.encoder_backward(feature, config, weights, upstream, cache=cache)
        for name in sorted(weights):
            w = weights[name]
            flat = w.reshape(-1)
            analytic = grads[name].reshape(-1)
            for idx in range(flat.size):
                orig = flat[idx]
                flat[idx] = orig + h
                emb, _ = encoder.encoder_forward_cached(feature, config, weights)
                up = float(upstream @ emb)
                flat[idx] = orig - h
                emb, _ = encoder.encoder_forward_cached(feature, config, weights)
                down = float(upstream @ emb)
                flat[idx] = orig
                numeric = (up - down) / (2 * h)
                scale = max(abs(analytic[idx]), abs(numeric), 1e-6)
                worst = max(worst, abs(analytic[idx] - numeric) / scale)
    elapsed = time.time() - started
    check(
        3,
        "encoder gradients",
        worst <= 1e-4 and elapsed < 120.0,
        f"max rel err {worst:.2e}, {elapsed:.1f}s",
    )


# -----------------------------------------------------------------------
# 4. metric engine equivalence
# -----------------------------------------------------------------------


def naive_reference(dist, works):
    n = len(works)
    sizes = {}
    for w in works:
        sizes[w] = sizes.get(w, 0) + 1
    ap_sum, top_sum, first_sum, queries = 0.0, 0, 0, 0
    for q in range(n):
        if sizes[works[q]] < 2:
            continue
        queries += 1
        order = sorted((float(dist[q][j]), j) for j in range(n) if j != q)
        hits, ap = 0, 0.0
        first = None
        top10 = 0
        for rank, (_, j) in enumerate(order, start=1):
            if works[j] == works[q]:
                hits += 1
                ap += hits / rank
                if first is None:
                    first = rank
                if rank <= 10:
                    top10 += 1
        ap_sum += ap / hits
        top_sum += top10
        first_sum += first
    return ap_sum / queries, top_sum / queries, first_sum / queries, queries


def test_criterion_4_metric_engine_equivalence():
    rng = np.random.default_rng(1004)
    exact = True
    for _ in range(100):
        n = int(rng.integers(5, 51))
        works = [f"w{rng.integers(0, max(2, n // 3))}" for _ in range(n)]
        counts = {}
        for w in works:
            counts[w] = counts.get(w, 0) + 1
        if not any(c >= 2 for c in counts.values()):
            works[1] = works[0]
        d = rng.random((n, n))
        d = 0.5 * (d + d.T)
        np.fill_diagonal(d, 0.0)
        report = retrieval.evaluate(d, works)
        ref = naive_reference(d.tolist(), works)
        exact = exact and (report.map, report.mt10, report.mr1, report.n_queries) == ref
    works_234 = ["a"] * 2 + ["b"] * 3 + ["c"] * 4
    opt = retrieval.optimal_metrics(works_234)
    works_13 = [f"w{i}" for i in range(4) for _ in range(13)]
    opt13 = retrieval.optimal_metrics(works_13)
    ok = (
        exact
        and opt.mt10 == 20 / 9
        and opt.map == 1.0
        and opt.mr1 == 1.0
        and opt13.mt10 == 10.0
    )
    check(
        4,
        "metric engine equivalence",
        ok,
        f"reference exact={exact}, optimal MT@10 {opt.mt10:.6f} / {opt13.mt10:.1f}",
    )


# -----------------------------------------------------------------------
# 5. CQ-FP tempo invariance
# -----------------------------------------------------------------------


def modulation_profile(bpm):
    audio = synth.click_track(bpm, duration_s=40.0)
    return cqfp.extract_cqfp(audio).values.mean(axis=0)


def correlation_lag(reference, shifted, max_lag=20):
    best, best_val = 0, -np.inf
    for lag in range(-max_lag, max_lag + 1):
        if lag >= 0:
            v = float(np.dot(shifted[lag:], reference[: len(reference) - lag]))
        else:
            v = float(np.dot(shifted[:lag], reference[-lag:]))
        if v > best_val:
            best, best_val = lag, v
    return best


def test_criterion_5_tempo_invariance():
    started = time.time()
    p120 = modulation_profile(120)
    p240 = modulation_profile(240)
    p180 = modulation_profile(180)
    lag_double = correlation_lag(p120, p240)
    lag_half = correlation_lag(p120, p180)
    elapsed = time.time() - started
    check(
        5,
        "CQ-FP tempo invariance",
        abs(lag_double - 10) <= 1 and abs(lag_half - 6) <= 1 and elapsed < 30.0,
        f"lags {lag_double} (exp 10), {lag_half} (exp 6), {elapsed:.1f}s",
    )


# -----------------------------------------------------------------------
# 6. oracle dominance
# -----------------------------------------------------------------------


def planted_feature_distances(tmp_path):
    manifest, _ = synth.make_planted_dataset(tmp_path, n_works=20, n_versions=3, seed=6)
    works = manifest.work_labels()
    dists = {}
    for kind in ("Me", "Ha", "Rh"):
        rows = []
        for record in manifest.records:
            values, _ = fileformats.read_feature(record.feature_paths[kind])
            flat = values.astype(np.float64).reshape(-1)
            rows.append(flat / np.linalg.norm(flat))
        dists[kind] = retrieval.embedding_distance_matrix(np.vstack(rows))
    return dists, works


def test_criterion_6_oracle_dominance(tmp_path):
    rng = np.random.default_rng(1006)
    ok = True
    detail = ""
    for case in range(50):
        n = int(rng.integers(8, 30))
        works = [f"w{rng.integers(0, max(2, n // 3))}" for _ in range(n)]
        counts = {}
        for w in works:
            counts[w] = counts.get(w, 0) + 1
        if not any(c >= 2 for c in counts.values()):
            works[1] = works[0]
        if len(set(works)) == 1:
            works[-1] = "solo"
        n_feat = int(rng.integers(2, 5))
        mats = []
        for _ in range(n_feat):
            m = rng.random((n, n))
            m = 0.5 * (m + m.T)
            np.fill_diagonal(m, 0.0)
            mats.append(m)
        oracle = retrieval.oracle_distances(mats, works)
        oracle_map = retrieval.evaluate(oracle, works).map
        single_maps = [retrieval.evaluate(m, works).map for m in mats]
        fused = np.sqrt(sum(m**2 for m in mats) / n_feat)
        fused_map = retrieval.evaluate(fused, works).map
        shares = retrieval.oracle_contributions(mats, works)
        sums_ok = abs(shares["positive"].sum() - 1.0) <= 1e-9 and abs(
            shares["negative"].sum() - 1.0
        ) <= 1e-9
        if not (oracle_map >= max(single_maps) - 1e-12 and oracle_map >= fused_map - 1e-12 and sums_ok):
            ok = False
            detail = f"random case {case} violated dominance"
            break
    if ok:
        dists, works = planted_feature_distances(tmp_path)
        mats = [dists[k] for k in ("Me", "Ha", "Rh")]
        oracle = retrieval.oracle_distances(mats, works)
        oracle_map = retrieval.evaluate(oracle, works).map
        singles = [retrieval.evaluate(m, works).map for m in mats]
        fused_map = retrieval.evaluate(
            np.sqrt(sum(m**2 for m in mats) / 3), works
        ).map
        shares = retrieval.oracle_contributions(mats, works)
        ok = (
            oracle_map >= max(singles) - 1e-12
            and oracle_map >= fused_map - 1e-12
            and abs(shares["positive"].sum() - 1.0) <= 1e-9
            and abs(shares["negative"].sum() - 1.0) <= 1e-9
        )
        detail = f"planted oracle {oracle_map:.3f} vs singles {max(singles):.3f}"
    check(6, "oracle dominance", ok, detail)


# -----------------------------------------------------------------------
# 7. end-to-end synthetic experiment
# -----------------------------------------------------------------------


def test_criterion_7_end_to_end_synthetic(tmp_path):
    started = time.time()
    manifest, _ = synth.make_planted_dataset(tmp_path, n_works=50, n_versions=4, seed=0)
    kinds = ("Me", "Ha", "Rh")
    informative = ("Me", "Ha")
    works = manifest.work_labels()
    track_ids = manifest.track_ids()
    features = {k: training.load_features(manifest, k) for k in kinds}
    configs = {
        k: encoder.toy_encoder_config(k, output_dim=64, attention_dim=16)
        for k in kinds
    }
    train_config = training.TrainConfig(
        learning_rate=1e-4,
        batch_size=64,
        margin=0.3,
        works_per_batch=16,
        versions_per_work=4,
        epochs=10,
        steps_per_epoch=60,
        seed=1,
    )
    weights = {}
    history = {}
    for i, kind in enumerate(kinds):
        shape = encoder.feature_to_tensor(features[kind][track_ids[0]], kind).shape
        weights[kind] = encoder.init_encoder_weights(
            configs[kind], shape, np.random.default_rng(100 + i)
        )
        _, history[kind] = training.train_feature_model(
            manifest, kind, weights[kind], train_config, configs[kind],
            features=features[kind],
        )
    dists = {}
    for kind in kinds:
        embeddings = np.vstack(
            [
                encoder.encode(features[kind][tid], configs[kind], weights[kind]).values
                for tid in track_ids
            ]
        )
        dists[kind] = retrieval.embedding_distance_matrix(embeddings)
    single_map = {k: retrieval.evaluate(dists[k], works).map for k in kinds}
    fused = retrieval.fused_distance_matrix(dists, kinds)
    fused_map = retrieval.evaluate(fused, works).map
    shares = retrieval.oracle_contributions([dists[k] for k in kinds], works)
    rh_pos, rh_neg = shares["positive"][2], shares["negative"][2]
    loss_ratio = {
        k: history[k][-1]["mean_loss"] / history[k][0]["mean_loss"]
        for k in informative
    }
    elapsed = time.time() - started
    ok = (
        fused_map >= 0.9
        and all(fused_map > single_map[k] for k in informative)
        and rh_pos == min(shares["positive"])
        and rh_neg == min(shares["negative"])
        and all(loss_ratio[k] < 0.5 for k in informative)
        and elapsed < 600.0
    )
    check(
        7,
        "end-to-end synthetic experiment",
        ok,
        f"fused {fused_map:.3f} vs singles "
        f"{ {k: round(v, 3) for k, v in single_map.items()} }, "
        f"uninformative shares ({rh_pos:.3f}, {rh_neg:.3f}), "
        f"loss ratios { {k: round(v, 2) for k, v in loss_ratio.items()} }, "
        f"{elapsed:.0f}s",
    )


# -----------------------------------------------------------------------
# 8. pipeline determinism and format round-trips
# -----------------------------------------------------------------------


def run_pipeline(root, seed=4):
    data = root / "data"
    weights = root / "weights"
    emb = root / "emb"
    flags = ["--epochs", "2", "--steps-per-epoch", "3", "--batch-size", "8",
             "--works-per-batch", "4", "--versions-per-work", "2",
             "--embed-dim", "16", "--arch", "toy", "--seed", str(seed)]
    assert cli.main(["synth", "--out", str(data), "--works", "8",
                     "--versions", "3", "--seed", str(seed)]) == 0
    manifest = str(data / "manifest.tsv")
    for kind in ("me", "ha", "rh"):
        assert cli.main(["train", "--manifest", manifest, "--feature", kind,
                         "--out", str(weights)] + flags) == 0
    assert cli.main(["embed", "--manifest", manifest, "--features", "me,ha,rh",
                     "--weights-dir", str(weights), "--out", str(emb)]) == 0
    report = root / "report.csv"
    assert cli.main(["eval", "--manifest", manifest, "--emb-dir", str(emb),
                     "--features", "me,ha,rh", "--out", str(report)]) == 0
    oracle_dir = root / "oracle"
    assert cli.main(["oracle", "--manifest", manifest, "--emb-dir", str(emb),
                     "--features", "me,ha,rh", "--out", str(oracle_dir),
                     "--seed", str(seed)]) == 0
    return (
        report.read_bytes(),
        (oracle_dir / "oracle_report.csv").read_bytes(),
        (oracle_dir / "oracle_contributions.csv").read_bytes(),
    )


def test_criterion_8_determinism_and_round_trips(tmp_path):
    first = run_pipeline(tmp_path / "run1")
    second = run_pipeline(tmp_path / "run2")
    deterministic = first == second

    rng = np.random.default_rng(1008)
    feature = rng.standard_normal((20, 8)).astype(np.float32)
    fpath = tmp_path / "f.vife"
    fileformats.write_feature(fpath, feature, "Ha")
    fbytes = fpath.read_bytes()
    values, kind = fileformats.read_feature(fpath)
    fileformats.write_feature(fpath, values, kind)
    feature_ok = fpath.read_bytes() == fbytes

    parts = {k: rng.standard_normal(32).astype(np.float32) for k in FEATURE_KINDS}
    epath = tmp_path / "e.emb"
    fileformats.write_embedding(epath, parts)
    ebytes = epath.read_bytes()
    fileformats.write_embedding(epath, fileformats.read_embedding(epath))
    embedding_ok = epath.read_bytes() == ebytes

    ckpt = {"conv0/w": rng.standard_normal((3, 3, 1, 4)).astype(np.float32),
            "dense/b": np.zeros(6, dtype=np.float32)}
    cpath = tmp_path / "w.ckpt"
    fileformats.write_checkpoint(cpath, ckpt)
    cbytes = cpath.read_bytes()
    fileformats.write_checkpoint(cpath, fileformats.read_checkpoint(cpath))
    checkpoint_ok = cpath.read_bytes() == cbytes

    check(
        8,
        "pipeline determinism and round-trips",
        deterministic and feature_ok and embedding_ok and checkpoint_ok,
        f"pipeline identical={deterministic}, round-trips "
        f"{feature_ok and embedding_ok and checkpoint_ok}",
    )
