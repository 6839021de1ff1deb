"""WAV I/O, sample rate conversion, and the log-mel frontend.

All audio is mono float64 in [-1, 1]. The detector operates at 16 kHz; files
at other rates go through ``resample`` (windowed-sinc, Kaiser window).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MODEL_SAMPLE_RATE = 16000
N_FFT = 400
HOP = 160
N_MELS = 40
LOG_FLOOR = 1e-10

# windowed-sinc resampler: 64 taps (32 each side), Kaiser beta 8
_SINC_HALF_WIDTH = 32
_KAISER_BETA = 8.0


class AudioFormatError(ValueError):
    """Raised for malformed RIFF/WAVE containers."""


class UnsupportedCodecError(AudioFormatError):
    """Raised for WAV codecs other than PCM16 / IEEE float32, 1-2 channels."""


class TooShortError(ValueError):
    """Raised when a waveform is shorter than one analysis window."""


@dataclass(frozen=True)
class Waveform:
    """Mono audio samples in [-1, 1] at a known sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"waveform must be mono (1-D), got shape {samples.shape}")
        if samples.size and not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class MelSpectrogram:
    """Log-mel energies, one row per analysis frame."""

    frames: np.ndarray  # [n_frames, n_mels]
    frame_hop_s: float
    n_mels: int

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def read_wav(path) -> Waveform:
    """Read a RIFF/WAVE file (PCM16 or IEEE float32, 1-2 channels) as mono.

    Stereo is averaged to mono; PCM16 is scaled by 1/32768 so full-scale
    positive samples map to 32767/32768.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise AudioFormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos : pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise AudioFormatError(f"{path}: truncated {chunk_id!r} chunk")
        if chunk_id == b"fmt ":
            if size < 16:
                raise AudioFormatError(f"{path}: fmt chunk too small")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            payload = body
        pos += 8 + size + (size & 1)  # chunks are word aligned

    if fmt is None or payload is None:
        raise AudioFormatError(f"{path}: missing fmt or data chunk")

    audio_format, n_channels, rate, _byte_rate, _block_align, bits = fmt
    if n_channels not in (1, 2):
        raise UnsupportedCodecError(f"{path}: {n_channels} channels unsupported")
    if audio_format == 1 and bits == 16:
        data = np.frombuffer(payload[: len(payload) - len(payload) % (2 * n_channels)], dtype="<i2")
        samples = data.astype(np.float64) / 32768.0
    elif audio_format == 3 and bits == 32:
        data = np.frombuffer(payload[: len(payload) - len(payload) % (4 * n_channels)], dtype="<f4")
        samples = data.astype(np.float64)
    else:
        raise UnsupportedCodecError(
            f"{path}: codec (format={audio_format}, bits={bits}) unsupported"
        )

    if n_channels == 2:
        samples = samples.reshape(-1, 2).mean(axis=1)
    return Waveform(samples=samples, sample_rate=int(rate))


def write_wav(path, w: Waveform) -> None:
    """Write a waveform as PCM16 little-endian mono."""
    clipped = np.clip(w.samples, -1.0, 1.0)
    ints = np.round(clipped * 32767.0).astype("<i2")
    payload = ints.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    fmt = b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, w.sample_rate, w.sample_rate * 2, 2, 16)
    data = b"data" + struct.pack("<I", len(payload)) + payload
    Path(path).write_bytes(header + fmt + data)


def _kaiser(x: np.ndarray) -> np.ndarray:
    inside = np.abs(x) <= _SINC_HALF_WIDTH
    t = np.where(inside, x / _SINC_HALF_WIDTH, 0.0)
    return np.where(inside, np.i0(_KAISER_BETA * np.sqrt(1.0 - t * t)) / np.i0(_KAISER_BETA), 0.0)


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Band-limited sample rate conversion (windowed sinc, 64 taps)."""
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == w.sample_rate:
        return w
    n_in = w.samples.size
    n_out = int(round(n_in * target_rate / w.sample_rate))
    if n_in == 0 or n_out == 0:
        return Waveform(samples=np.zeros(0), sample_rate=target_rate)

    ratio = target_rate / w.sample_rate
    cutoff = min(1.0, ratio)  # anti-alias when downsampling
    padded = np.concatenate([np.zeros(_SINC_HALF_WIDTH + 1), w.samples, np.zeros(_SINC_HALF_WIDTH + 1)])

    out = np.empty(n_out)
    # chunked so the [chunk, taps] scratch arrays stay small
    chunk = 8192
    taps = np.arange(-_SINC_HALF_WIDTH + 1, _SINC_HALF_WIDTH + 1)
    for start in range(0, n_out, chunk):
        idx = np.arange(start, min(start + chunk, n_out))
        t = idx / ratio  # output time in input sample units
        k0 = np.floor(t).astype(np.int64)
        offsets = t[:, None] - (k0[:, None] + taps[None, :])
        kernel = cutoff * np.sinc(cutoff * offsets) * _kaiser(offsets)
        neighborhood = padded[(k0[:, None] + taps[None, :]) + _SINC_HALF_WIDTH + 1]
        out[idx] = np.sum(neighborhood * kernel, axis=1)
    return Waveform(samples=out, sample_rate=target_rate)


def _hann(n: int) -> np.ndarray:
    # periodic Hann, the STFT convention
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_fft: int = N_FFT, n_mels: int = N_MELS, sample_rate: int = MODEL_SAMPLE_RATE) -> np.ndarray:
    """Triangular mel filterbank over 0..sample_rate/2, peak 1 per band."""
    fft_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    mel_pts = np.linspace(_hz_to_mel(0.0), _hz_to_mel(sample_rate / 2.0), n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    fb = np.zeros((n_mels, fft_freqs.size))
    for i in range(n_mels):
        lo, center, hi = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        up = (fft_freqs - lo) / (center - lo)
        down = (hi - fft_freqs) / (hi - center)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
    return fb


def mel_band_centers(n_mels: int = N_MELS, sample_rate: int = MODEL_SAMPLE_RATE) -> np.ndarray:
    """Center frequency (Hz) of each mel band."""
    mel_pts = np.linspace(_hz_to_mel(0.0), _hz_to_mel(sample_rate / 2.0), n_mels + 2)
    return _mel_to_hz(mel_pts)[1:-1]


def log_mel(w: Waveform, n_fft: int = N_FFT, hop: int = HOP, n_mels: int = N_MELS) -> MelSpectrogram:
    """Hann-windowed magnitude STFT (no centering) through a mel filterbank.

    Frame count is 1 + floor((n_samples - n_fft) / hop); energies are floored
    at 1e-10 before the natural log.
    """
    if w.sample_rate != MODEL_SAMPLE_RATE:
        raise ValueError(f"log_mel expects {MODEL_SAMPLE_RATE} Hz input, got {w.sample_rate}")
    n = w.samples.size
    if n < n_fft:
        raise TooShortError(f"need at least {n_fft} samples, got {n}")

    n_frames = 1 + (n - n_fft) // hop
    idx = np.arange(n_frames)[:, None] * hop + np.arange(n_fft)[None, :]
    frames = w.samples[idx] * _hann(n_fft)[None, :]
    spectrum = np.abs(np.fft.rfft(frames, n=n_fft, axis=1))
    energies = spectrum @ mel_filterbank(n_fft, n_mels).T
    return MelSpectrogram(
        frames=np.log(np.maximum(energies, LOG_FLOOR)),
        frame_hop_s=hop / MODEL_SAMPLE_RATE,
        n_mels=n_mels,
    )
