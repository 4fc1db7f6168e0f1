"""Synthetic test-data generators: click tracks, WAV writing, planted
multi-feature datasets with clique structure, and toy spectrogram/text pairs
for exercising the lyrics model."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.io import wavfile

from . import alr
from .dsp import SAMPLE_RATE, AudioBuffer
from .fileformats import write_feature
from .manifest import DatasetManifest, TrackRecord, write_manifest


def click_track(
    bpm: float,
    duration_s: float = 40.0,
    sample_rate_hz: int = SAMPLE_RATE,
    click_ms: float = 120.0,
    carrier: str = "noise",
    amplitude: float = 0.5,
    seed: int = 0,
) -> AudioBuffer:
    """Metronome-style track: Hann-shaped clicks repeating at the beat rate.

    Soft (wide) clicks keep the energy near the beat fundamental instead of
    spraying it across high modulation harmonics.  carrier is 'noise' for
    broadband clicks or a frequency in Hz for tonal ones.
    """
    n = int(round(duration_s * sample_rate_hz))
    period = 60.0 / bpm
    click_len = int(round(click_ms / 1000.0 * sample_rate_hz))
    envelope = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(click_len) / click_len)
    rng = np.random.default_rng(seed)
    if carrier == "noise":
        fill = rng.standard_normal(click_len) * 0.5
    else:
        t = np.arange(click_len) / sample_rate_hz
        fill = np.sin(2.0 * np.pi * float(carrier) * t)
    click = amplitude * envelope * fill
    samples = np.zeros(n)
    starts = np.arange(0.0, duration_s, period)
    for s in starts:
        i = int(round(s * sample_rate_hz))
        j = min(i + click_len, n)
        samples[i:j] += click[: j - i]
    return AudioBuffer(samples=np.clip(samples, -1.0, 1.0), sample_rate_hz=sample_rate_hz)


def sine(
    freq_hz: float,
    duration_s: float,
    sample_rate_hz: int = SAMPLE_RATE,
    amplitude: float = 0.5,
) -> AudioBuffer:
    t = np.arange(int(round(duration_s * sample_rate_hz))) / sample_rate_hz
    return AudioBuffer(
        samples=amplitude * np.sin(2.0 * np.pi * freq_hz * t),
        sample_rate_hz=sample_rate_hz,
    )


def write_wav(path, audio: AudioBuffer):
    """Write 16-bit PCM."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    pcm = np.clip(np.round(audio.samples * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, audio.sample_rate_hz, pcm)


# -----------------------------------------------------------------------
# planted clique dataset
# -----------------------------------------------------------------------
# Informative features share a random template within each work; versions
# are the template plus noise, so every work is separable but each feature
# makes its own mistakes and fusing them wins.  The uninformative feature
# gets a strong per-TRACK stripe signature: structured, but none of it
# shared within a clique, and spread so its embedding distances land between
# typical trained positive and negative distances.


def make_planted_dataset(
    out_dir,
    n_works: int = 50,
    n_versions: int = 4,
    seed: int = 0,
    shape=(40, 12),
    template_scales={"Me": 2.0, "Ha": 1.8},
    uninformative="Rh",
    stripe_scale: float = 5.0,
    stripe_density: float = 0.25,
    noise_scale: float = 1.0,
):
    """Write feature files plus manifest.tsv; returns (manifest, path)."""
    out_dir = Path(out_dir)
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    kinds = tuple(template_scales) + (uninformative,)
    records = []
    for w in range(n_works):
        templates = {
            kind: scale * np.abs(rng.standard_normal(shape))
            for kind, scale in template_scales.items()
        }
        for v in range(n_versions):
            track_id = f"w{w:03d}v{v}"
            features = {}
            for kind in kinds:
                if kind == uninformative:
                    columns = rng.random((1, shape[1])) < stripe_density
                    signature = (
                        stripe_scale
                        * np.abs(rng.standard_normal((shape[0], 1)))
                        * columns
                    )
                else:
                    signature = templates[kind]
                values = signature + noise_scale * np.abs(rng.standard_normal(shape))
                fpath = feat_dir / f"{track_id}.{kind.lower()}.vife"
                write_feature(fpath, values, kind)
                features[kind] = fpath
            records.append(
                TrackRecord(
                    track_id=track_id, work_id=f"work{w:03d}", feature_paths=features
                )
            )
    manifest = DatasetManifest(records=records)
    manifest_path = out_dir / "manifest.tsv"
    write_manifest(manifest, manifest_path)
    return manifest, manifest_path


# -----------------------------------------------------------------------
# toy lyrics material
# -----------------------------------------------------------------------


def symbol_templates(symbols: str = "abcd ", n_mels: int = 40, seed: int = 7):
    """Fixed random spectral template per symbol."""
    rng = np.random.default_rng(seed)
    return {ch: 2.0 * rng.random(n_mels) for ch in symbols}


def text_to_mel(
    text: str,
    templates: dict,
    frames_per_symbol: int = 8,
    noise: float = 0.05,
    rng=None,
):
    """Render text as a frames x n_mels matrix by stacking symbol templates."""
    if rng is None:
        rng = np.random.default_rng(0)
    rows = []
    for ch in text:
        block = np.tile(templates[ch], (frames_per_symbol, 1))
        rows.append(block)
    mel = np.concatenate(rows, axis=0)
    return mel + noise * rng.standard_normal(mel.shape)


def make_lyrics_pairs(
    n_pairs: int = 50,
    symbols: str = "abcd",
    text_len=(2, 4),
    frames_per_symbol: int = 8,
    noise: float = 0.05,
    n_mels: int = 40,
    seed: int = 7,
):
    """Random (mel, text) training pairs from the fixed symbol->template map."""
    templates = symbol_templates(symbols + " ", n_mels=n_mels, seed=seed)
    rng = np.random.default_rng(seed + 1)
    pairs = []
    for _ in range(n_pairs):
        length = int(rng.integers(text_len[0], text_len[1] + 1))
        text = "".join(rng.choice(list(symbols)) for _ in range(length))
        mel = text_to_mel(
            text, templates, frames_per_symbol=frames_per_symbol, noise=noise, rng=rng
        )
        pairs.append((mel, text))
    return pairs
