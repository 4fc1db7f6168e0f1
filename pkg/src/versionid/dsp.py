"""Signal-processing primitives: WAV I/O, STFT, mel filterbank, per-band
loudness envelopes, and the constant-Q modulation transform.

All extraction runs at a canonical 16 kHz rate.  Band envelopes are computed
from a 40/36-band mel spectrogram at a 10 ms hop (100 Hz envelope rate),
grouped into wider bands toward high frequencies and compressed to dB with a
-80 dB floor.  The constant-Q modulation transform analyzes each envelope
with per-bin windowed complex-sinusoid correlations whose length scales
inversely with modulation frequency (constant Q).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

SAMPLE_RATE = 16000  # canonical processing rate
ENVELOPE_WINDOW = 1024  # 64 ms at 16 kHz
ENVELOPE_HOP = 160  # 10 ms -> 100 Hz envelope rate
ENVELOPE_RATE = SAMPLE_RATE / ENVELOPE_HOP
DB_FLOOR = -80.0
ENVELOPE_MELS = 36
# 36 mel bands grouped into 12 envelope bands; widths grow toward high
# frequencies so the low end keeps its resolution.
BAND_WIDTHS = (1, 1, 1, 1, 1, 2, 2, 3, 5, 6, 6, 7)


class AudioError(Exception):
    """Problem decoding an audio file."""


class UnsupportedCodecError(AudioError):
    """File is not a PCM-16 / float-32 RIFF/WAVE."""


class EmptyAudioError(AudioError):
    """File decoded to zero samples."""


@dataclass(frozen=True)
class AudioBuffer:
    """Mono samples in [-1, 1] at a fixed rate."""

    samples: np.ndarray
    sample_rate_hz: int

    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass(frozen=True)
class Spectrogram:
    """frames x bins power matrix with the bin center frequencies."""

    values: np.ndarray
    frame_hop_s: float
    bin_center_hz: np.ndarray


@dataclass(frozen=True)
class BandEnvelopes:
    """bands x frames nonnegative envelope matrix."""

    values: np.ndarray
    envelope_rate_hz: float


def load_audio(path) -> AudioBuffer:
    """Decode a RIFF/WAVE file to a mono AudioBuffer.

    Supports PCM 16-bit and 32-bit float, 1 or 2 channels; stereo is
    downmixed by channel mean and samples are scaled to [-1, 1].
    """
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise AudioError(f"unreadable file: {path}") from None
    except PermissionError:
        raise AudioError(f"unreadable file: {path}") from None
    except ValueError as exc:
        raise UnsupportedCodecError(f"unsupported codec in {path}: {exc}") from None
    if data.size == 0:
        raise EmptyAudioError(f"zero-length audio: {path}")
    if data.ndim == 2 and data.shape[1] > 2:
        raise UnsupportedCodecError(
            f"{path}: {data.shape[1]} channels, expected 1 or 2"
        )
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        samples = np.asarray(data, dtype=np.float64)
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    else:
        raise UnsupportedCodecError(f"{path}: unsupported sample format {data.dtype}")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    samples = np.clip(samples, -1.0, 1.0)
    return AudioBuffer(samples=samples, sample_rate_hz=int(rate))


def resample(audio: AudioBuffer, target_rate_hz: int) -> AudioBuffer:
    """Band-limited resampling; identity when the rate already matches."""
    if target_rate_hz <= 0:
        raise ValueError("target rate must be positive")
    if audio.sample_rate_hz == target_rate_hz:
        return audio
    g = np.gcd(audio.sample_rate_hz, target_rate_hz)
    out = resample_poly(audio.samples, target_rate_hz // g, audio.sample_rate_hz // g)
    return AudioBuffer(samples=out, sample_rate_hz=target_rate_hz)


def _hann(n: int) -> np.ndarray:
    # periodic Hann
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft_power(audio: AudioBuffer, window_len: int, hop: int) -> Spectrogram:
    """Hann-windowed power spectrogram; frames = 1 + (n - window) // hop."""
    if hop < 1 or window_len < hop:
        raise ValueError("need window_len >= hop >= 1")
    x = audio.samples
    if len(x) < window_len:
        raise ValueError(f"audio ({len(x)} samples) shorter than window {window_len}")
    n_frames = 1 + (len(x) - window_len) // hop
    idx = np.arange(window_len)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * _hann(window_len)
    spec = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    freqs = np.fft.rfftfreq(window_len, d=1.0 / audio.sample_rate_hz)
    return Spectrogram(
        values=spec, frame_hop_s=hop / audio.sample_rate_hz, bin_center_hz=freqs
    )


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate_hz: int):
    """Triangular HTK-mel filterbank.

    Returns (weights (n_mels, n_fft//2+1), band_center_hz (n_mels,)).
    Adjacent triangles overlap so each linear bin feeds at most two bands.
    """
    n_bins = n_fft // 2 + 1
    if n_mels + 2 > n_bins:
        raise ValueError(f"n_mels={n_mels} exceeds available bins ({n_bins})")
    mel_pts = np.linspace(0.0, float(hz_to_mel(sample_rate_hz / 2)), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate_hz)
    weights = np.zeros((n_mels, n_bins))
    for i in range(n_mels):
        lo, mid, hi = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        weights[i] = np.maximum(0.0, np.minimum(up, down))
    if np.any(weights.sum(axis=1) == 0.0):
        raise ValueError(
            f"n_mels={n_mels} too large for {n_bins} linear bins: empty filters"
        )
    return weights, hz_pts[1:-1]


def mel_spectrogram(
    audio: AudioBuffer,
    n_mels: int,
    frame_hop_s: float,
    window_len: int = ENVELOPE_WINDOW,
) -> Spectrogram:
    """Mel power spectrogram (HTK scale); hop given in seconds."""
    if n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    if frame_hop_s <= 0:
        raise ValueError("frame_hop_s must be positive")
    hop = max(1, int(round(frame_hop_s * audio.sample_rate_hz)))
    spec = stft_power(audio, window_len, hop)
    fb, centers = mel_filterbank(n_mels, window_len, audio.sample_rate_hz)
    return Spectrogram(
        values=spec.values @ fb.T, frame_hop_s=spec.frame_hop_s, bin_center_hz=centers
    )


def _band_grouping(n_mels: int, n_bands: int):
    if n_bands > n_mels:
        raise ValueError("n_bands must be <= n_mels")
    if (n_mels, n_bands) == (36, 12):
        widths = BAND_WIDTHS
    else:
        base = n_mels // n_bands
        extra = n_mels - base * n_bands
        # widen the high-frequency end first
        widths = tuple(
            base + (1 if i >= n_bands - extra else 0) for i in range(n_bands)
        )
    edges = np.concatenate([[0], np.cumsum(widths)])
    return edges


def mel_band_envelopes(
    audio: AudioBuffer, n_mels: int = 36, n_bands: int = 12
) -> BandEnvelopes:
    """Per-band loudness envelopes at 100 Hz.

    Mel bands are summed into n_bands groups (widths growing toward high
    frequencies), compressed to dB relative to the track maximum with a
    -80 dB floor, and shifted to be nonnegative.
    """
    mel = mel_spectrogram(audio, n_mels=n_mels, frame_hop_s=ENVELOPE_HOP / SAMPLE_RATE)
    edges = _band_grouping(n_mels, n_bands)
    grouped = np.stack(
        [mel.values[:, edges[i] : edges[i + 1]].sum(axis=1) for i in range(n_bands)]
    )  # bands x frames
    peak = grouped.max()
    if peak <= 0.0:
        values = np.zeros_like(grouped)
    else:
        ratio = np.maximum(grouped / peak, 10.0 ** (DB_FLOOR / 10.0))
        values = 10.0 * np.log10(ratio) - DB_FLOOR
    return BandEnvelopes(values=values, envelope_rate_hz=1.0 / mel.frame_hop_s)


def cq_bin_frequencies(fmin_hz: float, n_octaves: int, bins_per_octave: int):
    k = np.arange(n_octaves * bins_per_octave)
    return fmin_hz * 2.0 ** (k / bins_per_octave)


def cq_quality_factor(bins_per_octave: int) -> float:
    return 1.0 / (2.0 ** (1.0 / bins_per_octave) - 1.0)


def cq_window_lengths(
    fmin_hz: float, n_octaves: int, bins_per_octave: int, rate_hz: float
):
    q = cq_quality_factor(bins_per_octave)
    freqs = cq_bin_frequencies(fmin_hz, n_octaves, bins_per_octave)
    return np.maximum(1, np.round(q * rate_hz / freqs).astype(int))


def cq_modulation_transform(
    envelopes: BandEnvelopes,
    fmin_hz: float = 0.5,
    n_octaves: int = 5,
    bins_per_octave: int = 10,
    hop_frames: int = 100,
):
    """Constant-Q analysis of each band envelope along time.

    Bin k has center fmin * 2^(k / bins_per_octave) and window length
    round(Q * rate / f_k) capped at the envelope length (Q = 1 / (2^(1/b) - 1)).
    Each window is Hann-weighted, mean-removed, correlated with a complex
    sinusoid at the bin frequency and normalized by the window sum.

    Returns a (bands, mod_frames, mod_bins) magnitude tensor.
    """
    if fmin_hz <= 0:
        raise ValueError("fmin_hz must be positive")
    x = envelopes.values
    rate = envelopes.envelope_rate_hz
    n_bands, n_frames = x.shape
    freqs = cq_bin_frequencies(fmin_hz, n_octaves, bins_per_octave)
    lengths = cq_window_lengths(fmin_hz, n_octaves, bins_per_octave, rate)
    if n_frames < lengths[-1]:
        raise ValueError(
            f"envelope ({n_frames} frames) shorter than the smallest analysis "
            f"window ({lengths[-1]} frames)"
        )
    lengths = np.minimum(lengths, n_frames)
    centers = np.arange(0, n_frames, hop_frames)
    out = np.empty((n_bands, len(centers), len(freqs)))
    for k, (f_k, n_k) in enumerate(zip(freqs, lengths)):
        win = _hann(int(n_k))
        phase = np.exp(-2j * np.pi * f_k / rate * np.arange(int(n_k)))
        kernel = win * phase
        for m, c in enumerate(centers):
            start = max(0, min(int(c) - int(n_k) // 2, n_frames - int(n_k)))
            seg = x[:, start : start + int(n_k)]
            seg = seg - seg.mean(axis=1, keepdims=True)
            out[:, m, k] = np.abs(seg @ kernel) / win.sum()
    return out
