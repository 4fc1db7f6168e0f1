"""Dataset manifests: tab-separated track records with work (clique) labels,
optional audio paths, and per-feature file paths.  Paths are stored relative
to the manifest file."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

from .fileformats import FEATURE_KINDS

log = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("track_id", "work_id")
OPTIONAL_COLUMNS = ("audio",) + tuple(k.lower() for k in FEATURE_KINDS)


class ManifestError(Exception):
    """Malformed manifest or exclusion list."""


@dataclass
class TrackRecord:
    track_id: str
    work_id: str
    audio_path: Path | None = None
    feature_paths: dict = field(default_factory=dict)


@dataclass
class DatasetManifest:
    records: list

    def __post_init__(self):
        self.by_id = {r.track_id: r for r in self.records}

    def __len__(self):
        return len(self.records)

    def works(self):
        """Map of work_id -> list of track_ids, in manifest order."""
        out = {}
        for r in self.records:
            out.setdefault(r.work_id, []).append(r.track_id)
        return out

    def track_ids(self):
        return [r.track_id for r in self.records]

    def work_labels(self):
        return [r.work_id for r in self.records]


def load_manifest(path) -> DatasetManifest:
    """Parse and validate a TSV manifest (header line required)."""
    path = Path(path)
    base = path.parent
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from None
    if not lines:
        raise ManifestError(f"{path}: empty manifest (header line required)")
    columns = lines[0].rstrip("\n").split("\t")
    if tuple(columns[:2]) != REQUIRED_COLUMNS:
        raise ManifestError(
            f"{path}: header must start with track_id\twork_id, got {columns[:2]}"
        )
    unknown = [c for c in columns[2:] if c not in OPTIONAL_COLUMNS]
    if unknown:
        raise ManifestError(f"{path}: unknown manifest columns {unknown}")
    records = []
    seen = {}
    missing = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split("\t")
        if len(cells) != len(columns):
            raise ManifestError(
                f"{path}:{lineno}: expected {len(columns)} fields, got {len(cells)}"
            )
        row = dict(zip(columns, cells))
        track_id = row["track_id"]
        if track_id in seen:
            raise ManifestError(
                f"{path}: duplicate track_id {track_id!r} "
                f"(lines {seen[track_id]} and {lineno})"
            )
        seen[track_id] = lineno
        audio = None
        if row.get("audio"):
            audio = base / row["audio"]
            if not audio.exists():
                missing.append(str(audio))
        features = {}
        for kind in FEATURE_KINDS:
            cell = row.get(kind.lower())
            if cell:
                fpath = base / cell
                if not fpath.exists():
                    missing.append(str(fpath))
                features[kind] = fpath
        records.append(
            TrackRecord(
                track_id=track_id,
                work_id=row["work_id"],
                audio_path=audio,
                feature_paths=features,
            )
        )
    if missing:
        raise ManifestError(
            f"{path}: {len(missing)} referenced path(s) missing:\n  "
            + "\n  ".join(missing)
        )
    return DatasetManifest(records=records)


def write_manifest(manifest: DatasetManifest, path):
    """Write a manifest with paths stored relative to its directory."""
    path = Path(path)
    base = path.parent.resolve()
    has_audio = any(r.audio_path for r in manifest.records)
    kinds = [k for k in FEATURE_KINDS if any(k in r.feature_paths for r in manifest.records)]
    columns = list(REQUIRED_COLUMNS)
    if has_audio:
        columns.append("audio")
    columns.extend(k.lower() for k in kinds)

    def rel(p):
        try:
            return str(Path(p).resolve().relative_to(base))
        except ValueError:
            return str(Path(p).resolve())

    rows = ["\t".join(columns)]
    for r in manifest.records:
        cells = [r.track_id, r.work_id]
        if has_audio:
            cells.append(rel(r.audio_path) if r.audio_path else "")
        for kind in kinds:
            fp = r.feature_paths.get(kind)
            cells.append(rel(fp) if fp else "")
        rows.append("\t".join(cells))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(rows) + "\n")


def load_exclusions(path) -> set:
    """One track_id per line; blank lines and # comments ignored."""
    out = set()
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            out.add(line)
    return out


def prune(
    manifest: DatasetManifest, exclusions=frozenset(), instrumental=None
) -> DatasetManifest:
    """Drop excluded (and optionally instrumental) tracks.

    Works reduced to a single track stay in the manifest as distractors:
    they can appear in rankings but are never queries.  Unknown ids only
    produce a warning.
    """
    drop = set(exclusions) | set(instrumental or ())
    known = {r.track_id for r in manifest.records}
    for tid in sorted(drop - known):
        log.warning("prune: unknown track_id %r in exclusion list", tid)
    kept = [r for r in manifest.records if r.track_id not in drop]
    return DatasetManifest(records=kept)
