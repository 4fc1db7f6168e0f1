"""Constant-Q fluctuation pattern (CQ-FP) rhythm feature.

Pipeline: band loudness envelopes -> constant-Q modulation transform
(0.5..16 Hz, 10 bins/octave by default) -> perceptual weighting peaking at
4 Hz -> mean over bands -> per-track max normalization -> fixed-length time
axis.  Because the modulation axis is log-frequency, a tempo change shifts
the whole pattern instead of stretching it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dsp


@dataclass(frozen=True)
class CqfpParams:
    fmin_hz: float = 0.5
    n_octaves: int = 5
    bins_per_octave: int = 10
    n_bands: int = 12
    mod_hop_s: float = 1.0
    target_frames: int = 180

    def __post_init__(self):
        if self.fmin_hz <= 0:
            raise ValueError("fmin_hz must be positive")
        if min(self.n_octaves, self.bins_per_octave, self.n_bands) < 1:
            raise ValueError("octaves, bins and bands must be >= 1")

    @property
    def n_mod_bins(self) -> int:
        return self.n_octaves * self.bins_per_octave

    @property
    def fmax_hz(self) -> float:
        return self.fmin_hz * 2.0**self.n_octaves


@dataclass(frozen=True)
class CQFPFeature:
    """target_frames x mod_bins nonnegative matrix (time, modulation freq)."""

    values: np.ndarray
    params: CqfpParams


def perceptual_weighting(modulation: np.ndarray, bin_center_hz: np.ndarray):
    """Scale each modulation bin by w(f) = 1 / (f/4 + 4/f).

    The weight peaks at 4 Hz (w = 0.5) where fluctuation strength is
    perceived most intensely, and rolls off symmetrically in log frequency.
    """
    f = np.asarray(bin_center_hz, dtype=np.float64)
    if np.any(f <= 0):
        raise ValueError("bin centers must be positive")
    w = 1.0 / (f / 4.0 + 4.0 / f)
    return modulation * w


def expected_tempo_shift_bins(ratio: float, bins_per_octave: int) -> int:
    """Bin shift a tempo ratio produces on the log modulation axis."""
    if ratio <= 0:
        raise ValueError("ratio must be positive")
    return int(round(bins_per_octave * np.log2(ratio)))


def _resample_time_axis(values: np.ndarray, target_frames: int) -> np.ndarray:
    n = values.shape[0]
    if n == target_frames:
        return values
    if n == 1:
        return np.repeat(values, target_frames, axis=0)
    src = np.arange(n)
    dst = np.linspace(0.0, n - 1.0, target_frames)
    out = np.empty((target_frames, values.shape[1]))
    for j in range(values.shape[1]):
        out[:, j] = np.interp(dst, src, values[:, j])
    return out


def extract_cqfp(audio: dsp.AudioBuffer, params: CqfpParams = CqfpParams()):
    """Extract the CQ-FP rhythm feature; shape target_frames x mod_bins.

    Audio shorter than the longest constant-Q window is zero-padded.
    Scaling the audio by any positive constant leaves the result unchanged.
    """
    if len(audio.samples) == 0:
        raise dsp.EmptyAudioError("empty audio buffer")
    audio = dsp.resample(audio, dsp.SAMPLE_RATE)
    if len(audio.samples) < dsp.ENVELOPE_WINDOW:
        audio = dsp.AudioBuffer(
            samples=np.pad(audio.samples, (0, dsp.ENVELOPE_WINDOW - len(audio.samples))),
            sample_rate_hz=audio.sample_rate_hz,
        )
    env = dsp.mel_band_envelopes(audio, n_mels=36, n_bands=params.n_bands)
    longest = int(
        dsp.cq_window_lengths(
            params.fmin_hz, params.n_octaves, params.bins_per_octave, env.envelope_rate_hz
        )[0]
    )
    if env.values.shape[1] < longest:
        env = dsp.BandEnvelopes(
            values=np.pad(env.values, ((0, 0), (0, longest - env.values.shape[1]))),
            envelope_rate_hz=env.envelope_rate_hz,
        )
    hop_frames = max(1, int(round(params.mod_hop_s * env.envelope_rate_hz)))
    tensor = dsp.cq_modulation_transform(
        env,
        fmin_hz=params.fmin_hz,
        n_octaves=params.n_octaves,
        bins_per_octave=params.bins_per_octave,
        hop_frames=hop_frames,
    )
    centers = dsp.cq_bin_frequencies(
        params.fmin_hz, params.n_octaves, params.bins_per_octave
    )
    weighted = perceptual_weighting(tensor, centers)
    profile = weighted.mean(axis=0)  # mod_frames x mod_bins
    peak = profile.max()
    if peak > 0:
        profile = profile / peak
    values = _resample_time_axis(profile, params.target_frames)
    return CQFPFeature(values=values, params=params)
