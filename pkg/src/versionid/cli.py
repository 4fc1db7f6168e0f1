"""Command-line pipeline: synth -> extract -> train -> embed -> eval /
oracle / pair, plus prune.

Reports are CSV, written atomically.  Options can come from a plain-text
config file (key = value lines, # comments) with command-line flags taking
precedence; the VI_SEED environment variable overrides any --seed.  Exit
codes: 0 success, 1 validation error, 2 per-item failures.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import alr, cqfp, dsp, encoder, fileformats, retrieval, synth, training
from .fileformats import FEATURE_KINDS
from .fusion import normalize_mask
from .manifest import (
    DatasetManifest,
    ManifestError,
    load_exclusions,
    load_manifest,
    prune,
    write_manifest,
)

log = logging.getLogger("versionid")


class CliError(Exception):
    """Validation problem: wrong flags, missing prerequisites."""


# -----------------------------------------------------------------------
# config file and seeds
# -----------------------------------------------------------------------

CONFIG_KEYS = {
    "learning_rate": float,
    "batch_size": int,
    "margin": float,
    "works_per_batch": int,
    "versions_per_work": int,
    "epochs": int,
    "steps_per_epoch": int,
    "seed": int,
    "jobs": int,
    "embed_dim": int,
}


def load_config_file(path) -> dict:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key = value")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in CONFIG_KEYS:
            raise CliError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = CONFIG_KEYS[key](raw.strip())
        except ValueError:
            raise CliError(f"{path}:{lineno}: bad value for {key}") from None
    return values


def option(args, name, default):
    """Flag value, else config-file value, else default; VI_SEED wins seeds."""
    if name == "seed" and os.environ.get("VI_SEED"):
        return int(os.environ["VI_SEED"])
    flag = getattr(args, name, None)
    if flag is not None:
        return flag
    config = getattr(args, "_config_values", {})
    if name in config:
        return config[name]
    return default


def _load_pruned_manifest(args) -> DatasetManifest:
    manifest = load_manifest(args.manifest)
    if getattr(args, "exclude", None):
        manifest = prune(manifest, load_exclusions(args.exclude))
    return manifest


def _atomic_write_text(path, text: str):
    fileformats.atomic_write_bytes(path, text.encode("utf-8"))


def write_report_csv(path, rows):
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["metric", "value"])
    writer.writerows(rows)
    _atomic_write_text(path, buf.getvalue())


# -----------------------------------------------------------------------
# synth
# -----------------------------------------------------------------------


def cmd_synth(args) -> int:
    seed = option(args, "seed", 0)
    manifest, path = synth.make_planted_dataset(
        args.out, n_works=args.works, n_versions=args.versions, seed=seed
    )
    log.info("planted %d tracks (%d works) under %s", len(manifest), args.works, args.out)
    print(path)
    return 0


# -----------------------------------------------------------------------
# extract
# -----------------------------------------------------------------------


def _extraction_signature(audio_path, params: dict) -> dict:
    digest = hashlib.sha256(Path(audio_path).read_bytes()).hexdigest()
    return {"audio_sha256": digest, "params": params}


def _extract_one(task):
    """Worker: extract one track; returns (track_id, status, message)."""
    track_id, audio_path, kind, out_path, params, weights = task
    sidecar = Path(str(out_path) + ".json")
    signature = _extraction_signature(audio_path, params)
    if Path(out_path).exists() and sidecar.exists():
        try:
            if json.loads(sidecar.read_text()) == signature:
                return track_id, "skipped", ""
        except (json.JSONDecodeError, OSError):
            pass
    try:
        audio = dsp.load_audio(audio_path)
        if kind == "Rh":
            values = cqfp.extract_cqfp(audio).values
        else:
            audio = dsp.resample(audio, dsp.SAMPLE_RATE)
            mel = dsp.mel_spectrogram(audio, n_mels=40, frame_hop_s=0.010)
            config = alr.default_alr_config()
            post = alr.alr_forward(mel.values, config, weights)
            values = post.log_probs
        fileformats.write_feature(out_path, values, kind)
        _atomic_write_text(sidecar, json.dumps(signature, sort_keys=True))
        return track_id, "computed", ""
    except Exception as exc:  # per-track failures are collected, not fatal
        return track_id, "failed", str(exc)


def cmd_extract(args) -> int:
    kind = normalize_mask(args.feature)[0]
    if kind not in ("Rh", "Ly"):
        raise CliError("extraction is audio-based: --feature must be rh or ly")
    manifest = _load_pruned_manifest(args)
    missing = [r.track_id for r in manifest.records if r.audio_path is None]
    if missing:
        raise CliError(f"{len(missing)} track(s) have no audio path, e.g. {missing[:3]}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = option(args, "seed", 0)
    weights = None
    if kind == "Ly":
        if args.weights:
            weights = fileformats.read_checkpoint(args.weights)
        else:
            log.warning("no --weights: using seed-%d random acoustic weights", seed)
            weights = alr.init_alr_weights(
                alr.default_alr_config(), np.random.default_rng(seed)
            )
    params = {"kind": kind, "weights": args.weights or f"random:{seed}", "version": 1}
    tasks = []
    for record in manifest.records:
        out_path = out_dir / f"{record.track_id}.{kind.lower()}.vife"
        tasks.append((record.track_id, record.audio_path, kind, out_path, params, weights))
    jobs = option(args, "jobs", 1)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_extract_one, tasks))
    else:
        results = [_extract_one(t) for t in tasks]
    failures = [(tid, msg) for tid, status, msg in results if status == "failed"]
    computed = sum(1 for _, status, _ in results if status == "computed")
    skipped = sum(1 for _, status, _ in results if status == "skipped")
    log.info("%s extraction: %d computed, %d skipped, %d failed",
             kind, computed, skipped, len(failures))
    for record, (tid, status, _) in zip(manifest.records, results):
        if status != "failed":
            record.feature_paths[kind] = out_dir / f"{tid}.{kind.lower()}.vife"
    write_manifest(
        DatasetManifest(records=[r for r in manifest.records]),
        out_dir / "manifest.tsv",
    )
    if failures:
        for tid, msg in failures:
            log.error("extraction failed for %s: %s", tid, msg)
        return 2
    return 0


# -----------------------------------------------------------------------
# train
# -----------------------------------------------------------------------


def _encoder_config_for(args, kind, manifest):
    if args.arch == "paper":
        return encoder.build_encoder_config(kind)
    embed_dim = option(args, "embed_dim", 64)
    return encoder.toy_encoder_config(kind, output_dim=embed_dim, attention_dim=16)


def cmd_train(args) -> int:
    kind = normalize_mask(args.feature)[0]
    manifest = _load_pruned_manifest(args)
    train_config = training.TrainConfig(
        learning_rate=option(args, "learning_rate", 1e-4),
        batch_size=option(args, "batch_size", 64),
        margin=option(args, "margin", 0.3),
        works_per_batch=option(args, "works_per_batch", 16),
        versions_per_work=option(args, "versions_per_work", 4),
        epochs=option(args, "epochs", 10),
        steps_per_epoch=option(args, "steps_per_epoch", 30),
        seed=option(args, "seed", 0),
    )
    encoder_config = _encoder_config_for(args, kind, manifest)
    features = training.load_features(manifest, kind)
    first = next(iter(features.values()))
    tensor_shape = encoder.feature_to_tensor(first, kind).shape
    rng = np.random.default_rng(train_config.seed)
    weights = encoder.init_encoder_weights(encoder_config, tensor_shape, rng)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _, history = training.train_feature_model(
        manifest, kind, weights, train_config, encoder_config,
        out_dir=out_dir, features=features,
    )
    _atomic_write_text(
        out_dir / f"{kind}.config.json",
        json.dumps(encoder.config_to_dict(encoder_config), indent=2),
    )
    print(f"{kind}: final loss {history[-1]['mean_loss']:.4f} "
          f"(active {history[-1]['active_fraction']:.3f})")
    return 0


# -----------------------------------------------------------------------
# embed
# -----------------------------------------------------------------------


def _embed_one(task):
    track_id, feature_paths, out_path, configs, weight_sets = task
    try:
        parts = {}
        for kind, config in configs.items():
            values, tagged = fileformats.read_feature(feature_paths[kind])
            emb = encoder.encode(
                values.astype(np.float64), config, weight_sets[kind]
            )
            parts[kind] = emb.values
        fileformats.write_embedding(out_path, parts)
        return track_id, "computed", ""
    except Exception as exc:
        return track_id, "failed", str(exc)


def cmd_embed(args) -> int:
    kinds = normalize_mask(args.features)
    manifest = _load_pruned_manifest(args)
    weights_dir = Path(args.weights_dir)
    configs, weight_sets = {}, {}
    for kind in kinds:
        ckpt = weights_dir / f"{kind}.ckpt"
        config_path = weights_dir / f"{kind}.config.json"
        if not ckpt.exists():
            raise CliError(f"missing checkpoint {ckpt} (run train first)")
        if not config_path.exists():
            raise CliError(f"missing encoder config {config_path}")
        weight_sets[kind] = fileformats.read_checkpoint(ckpt)
        configs[kind] = encoder.config_from_dict(json.loads(config_path.read_text()))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = []
    for record in manifest.records:
        for kind in kinds:
            if kind not in record.feature_paths:
                raise CliError(f"track {record.track_id} lacks the {kind} feature")
        tasks.append(
            (
                record.track_id,
                {k: record.feature_paths[k] for k in kinds},
                out_dir / f"{record.track_id}.emb",
                configs,
                weight_sets,
            )
        )
    jobs = option(args, "jobs", 1)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_embed_one, tasks))
    else:
        results = [_embed_one(t) for t in tasks]
    failures = [(tid, msg) for tid, status, msg in results if status == "failed"]
    log.info("embedded %d track(s), %d failed", len(results) - len(failures), len(failures))
    if failures:
        for tid, msg in failures:
            log.error("embedding failed for %s: %s", tid, msg)
        return 2
    return 0


# -----------------------------------------------------------------------
# eval / oracle / pair
# -----------------------------------------------------------------------


def _load_embeddings(manifest, emb_dir, kinds):
    emb_dir = Path(emb_dir)
    by_kind = {k: [] for k in kinds}
    for record in manifest.records:
        path = emb_dir / f"{record.track_id}.emb"
        if not path.exists():
            raise CliError(f"missing embedding file {path} (run embed first)")
        parts = fileformats.read_embedding(path)
        for kind in kinds:
            if kind not in parts:
                raise CliError(f"{path} lacks the {kind} block")
            by_kind[kind].append(parts[kind].astype(np.float64))
    return {k: np.vstack(v) for k, v in by_kind.items()}


def _feature_distance_matrices(manifest, emb_dir, kinds):
    embeddings = _load_embeddings(manifest, emb_dir, kinds)
    return {k: retrieval.embedding_distance_matrix(embeddings[k]) for k in kinds}


def _report_rows(report, prefix=""):
    return [
        (f"{prefix}map", f"{report.map:.6f}"),
        (f"{prefix}mt10", f"{report.mt10:.6f}"),
        (f"{prefix}mr1", f"{report.mr1:.6f}"),
    ]


def cmd_eval(args) -> int:
    kinds = normalize_mask(args.features)
    manifest = _load_pruned_manifest(args)
    dists = _feature_distance_matrices(manifest, args.emb_dir, kinds)
    fused = retrieval.fused_distance_matrix(dists, kinds)
    works = manifest.work_labels()
    report = retrieval.evaluate(fused, works)
    optimal = retrieval.optimal_metrics(works)
    rows = _report_rows(report) + _report_rows(optimal, "optimal_")
    for name, value in rows:
        print(f"{name} = {value}")
    if args.out:
        write_report_csv(args.out, rows)
        log.info("report written to %s", args.out)
    return 0


def cmd_oracle(args) -> int:
    kinds = normalize_mask(args.features)
    if len(kinds) < 2:
        raise CliError("oracle needs at least two features")
    manifest = _load_pruned_manifest(args)
    dists = _feature_distance_matrices(manifest, args.emb_dir, kinds)
    works = manifest.work_labels()
    fused = retrieval.fused_distance_matrix(dists, kinds)
    oracle = retrieval.oracle_distances([dists[k] for k in kinds], works)
    rows = _report_rows(retrieval.evaluate(fused, works))
    rows += _report_rows(retrieval.optimal_metrics(works), "optimal_")
    rows += _report_rows(retrieval.evaluate(oracle, works), "oracle_")
    for kind in kinds:
        single = retrieval.evaluate(dists[kind], works)
        rows.append((f"{kind.lower()}_map", f"{single.map:.6f}"))
    for name, value in rows:
        print(f"{name} = {value}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_report_csv(out_dir / "oracle_report.csv", rows)
    shares = retrieval.oracle_contributions([dists[k] for k in kinds], works)
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["feature", "positive_share", "negative_share"])
    for i, kind in enumerate(kinds):
        writer.writerow(
            [kind, f"{shares['positive'][i]:.6f}", f"{shares['negative'][i]:.6f}"]
        )
    _atomic_write_text(out_dir / "oracle_contributions.csv", buf.getvalue())
    if args.scatter_masks:
        _write_pair_scatter(args, manifest, dists, works, out_dir)
    log.info("oracle report written under %s", out_dir)
    return 0


def _write_pair_scatter(args, manifest, dists, works, out_dir):
    """Random positive/negative pairs with distances under two masks."""
    mask_a, mask_b = (normalize_mask(m) for m in args.scatter_masks.split(":"))
    rng = np.random.default_rng(option(args, "seed", 0))
    n = len(manifest)
    works = np.asarray(works)
    pairs = set()
    target = min(args.scatter_pairs, n * (n - 1) // 2)
    while len(pairs) < target:
        i, j = rng.integers(0, n, size=2)
        if i != j:
            pairs.add((min(int(i), int(j)), max(int(i), int(j))))
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(
        ["track_a", "track_b", "is_version", "+".join(mask_a), "+".join(mask_b)]
    )
    ids = manifest.track_ids()
    for i, j in sorted(pairs):
        d_a = np.sqrt(np.mean([dists[k][i, j] ** 2 for k in mask_a]))
        d_b = np.sqrt(np.mean([dists[k][i, j] ** 2 for k in mask_b]))
        writer.writerow(
            [ids[i], ids[j], int(works[i] == works[j]), f"{d_a:.6f}", f"{d_b:.6f}"]
        )
    _atomic_write_text(out_dir / "pair_scatter.csv", buf.getvalue())


def cmd_pair(args) -> int:
    kinds = normalize_mask(args.features)
    manifest = _load_pruned_manifest(args)
    ids = manifest.track_ids()
    for tid in (args.track_a, args.track_b):
        if tid not in manifest.by_id:
            raise CliError(f"unknown track id {tid!r}")
    dists = _feature_distance_matrices(manifest, args.emb_dir, kinds)
    masks = [normalize_mask(m) for m in args.masks.split(":")] if args.masks else []
    rows = retrieval.pair_report(
        ids.index(args.track_a), ids.index(args.track_b), dists, masks=masks
    )
    for name, value in rows.items():
        print(f"d_{name} = {value:.6f}")
    return 0


def cmd_prune(args) -> int:
    manifest = load_manifest(args.manifest)
    exclusions = load_exclusions(args.exclude) if args.exclude else set()
    instrumental = load_exclusions(args.instrumental) if args.instrumental else set()
    pruned = prune(manifest, exclusions, instrumental)
    write_manifest(pruned, args.out)
    log.info("kept %d of %d tracks -> %s", len(pruned), len(manifest), args.out)
    return 0


# -----------------------------------------------------------------------
# argument parsing
# -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="versionid",
        description="cover-song identification pipeline",
    )
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the planted synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--works", type=int, default=50)
    p.add_argument("--versions", type=int, default=4)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="extract rh or ly features from audio")
    p.add_argument("--manifest", required=True)
    p.add_argument("--feature", required=True, help="rh or ly")
    p.add_argument("--out", required=True)
    p.add_argument("--weights", help="acoustic-model checkpoint for ly")
    p.add_argument("--exclude")
    p.add_argument("--jobs", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train one feature encoder")
    p.add_argument("--manifest", required=True)
    p.add_argument("--feature", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--arch", choices=("toy", "paper"), default="toy")
    p.add_argument("--exclude")
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--margin", type=float)
    p.add_argument("--works-per-batch", dest="works_per_batch", type=int)
    p.add_argument("--versions-per-work", dest="versions_per_work", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps-per-epoch", dest="steps_per_epoch", type=int)
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="embed every track with trained encoders")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True, help="comma list, e.g. me,ha,rh")
    p.add_argument("--weights-dir", dest="weights_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--exclude")
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("eval", help="MAP / MT@10 / MR1 plus optimal bounds")
    p.add_argument("--manifest", required=True)
    p.add_argument("--emb-dir", dest="emb_dir", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", help="report CSV path")
    p.add_argument("--exclude")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("oracle", help="oracle metrics and contribution shares")
    p.add_argument("--manifest", required=True)
    p.add_argument("--emb-dir", dest="emb_dir", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--exclude")
    p.add_argument("--scatter-masks", dest="scatter_masks",
                   help="two masks separated by ':', e.g. me+ha:ly")
    p.add_argument("--scatter-pairs", dest="scatter_pairs", type=int, default=500)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("pair", help="per-feature distances for two tracks")
    p.add_argument("--manifest", required=True)
    p.add_argument("--emb-dir", dest="emb_dir", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--track-a", dest="track_a", required=True)
    p.add_argument("--track-b", dest="track_b", required=True)
    p.add_argument("--masks", help="fused masks separated by ':'")
    p.add_argument("--exclude")
    p.set_defaults(func=cmd_pair)

    p = sub.add_parser("prune", help="drop excluded tracks from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--exclude")
    p.add_argument("--instrumental")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prune)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        args._config_values = load_config_file(args.config) if args.config else {}
        return args.func(args)
    except (CliError, ManifestError, fileformats.FormatError, ValueError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
