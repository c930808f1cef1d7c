"""WAV ingestion, 48k -> 16k decimation and 256-bin log-mel features."""

from __future__ import annotations

import functools
import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from .tensor import Tensor

SUPPORTED_RATES = (48000, 16000)


class WavFormatError(ValueError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        if self.sample_rate not in SUPPORTED_RATES:
            raise ValueError(f"sample rate {self.sample_rate} not in {SUPPORTED_RATES}")
        if self.samples.ndim != 1:
            raise ValueError("AudioClip holds mono samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class FeatureConfig:
    target_rate: int = 16000
    window_ms: float = 130.0
    hop_ms: float = 30.0
    mel_bins: int = 256
    fft_size: int = 4096
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-10

    def __post_init__(self) -> None:
        if self.fft_size < self.window:
            raise ValueError(f"fft_size {self.fft_size} < window {self.window} samples")
        if not 0 <= self.fmin < self.fmax <= self.target_rate / 2:
            raise ValueError("need 0 <= fmin < fmax <= nyquist")

    @property
    def window(self) -> int:
        return int(round(self.window_ms * self.target_rate / 1000))

    @property
    def hop(self) -> int:
        return int(round(self.hop_ms * self.target_rate / 1000))

    def n_frames(self, n_samples: int) -> int:
        return (n_samples - self.window) // self.hop + 1


# ------------------------------------------------------------------ WAV io

_PCM, _FLOAT, _EXTENSIBLE = 1, 3, 0xFFFE


def load_wav(data: Union[bytes, str, Path]) -> AudioClip:
    """Parse a RIFF/WAVE file (PCM16 or float32, 1-2 channels) into mono."""
    if isinstance(data, (str, Path)):
        data = Path(data).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError("not a RIFF/WAVE file")
    pos = 12
    fmt = None
    payload = None
    while pos + 8 <= len(data):
        cid = data[pos : pos + 4]
        (size,) = struct.unpack("<I", data[pos + 4 : pos + 8])
        body = data[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise WavFormatError(f"chunk {cid!r} truncated")
        if cid == b"fmt ":
            if size < 16:
                raise WavFormatError("fmt chunk too short")
            fmt = struct.unpack("<HHIIHH", body[:16])
            if fmt[0] == _EXTENSIBLE and size >= 26:
                (sub,) = struct.unpack("<H", body[24:26])
                fmt = (sub,) + fmt[1:]
        elif cid == b"data":
            payload = body
        pos += 8 + size + (size & 1)
    if fmt is None or payload is None:
        raise WavFormatError("missing fmt or data chunk")
    codec, channels, rate, _, _, bits = fmt
    if channels not in (1, 2):
        raise WavFormatError(f"unsupported channel count {channels}")
    if codec == _PCM and bits == 16:
        raw = np.frombuffer(payload[: len(payload) // 2 * 2], dtype="<i2").astype(np.float64) / 32768.0
    elif codec == _FLOAT and bits == 32:
        raw = np.frombuffer(payload[: len(payload) // 4 * 4], dtype="<f4").astype(np.float64)
    else:
        raise WavFormatError(f"unsupported codec {codec} with {bits} bits")
    frames = len(raw) // channels
    samples = raw[: frames * channels].reshape(frames, channels).mean(axis=1)
    if rate not in SUPPORTED_RATES:
        raise WavFormatError(f"unsupported sample rate {rate}")
    return AudioClip(samples, rate)


def write_wav(clip: AudioClip, fmt: str = "pcm16", channels: int = 1) -> bytes:
    """Serialize mono samples; ``channels=2`` duplicates them."""
    x = np.repeat(np.asarray(clip.samples)[:, None], channels, axis=1).reshape(-1)
    if fmt == "pcm16":
        payload = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2").tobytes()
        codec, bits = _PCM, 16
    elif fmt == "float32":
        payload = x.astype("<f4").tobytes()
        codec, bits = _FLOAT, 32
    else:
        raise ValueError(f"unknown wav format {fmt!r}")
    block = channels * bits // 8
    out = io.BytesIO()
    out.write(b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE")
    out.write(b"fmt " + struct.pack("<IHHIIHH", 16, codec, channels, clip.sample_rate,
                                    clip.sample_rate * block, block, bits))
    out.write(b"data" + struct.pack("<I", len(payload)) + payload)
    return out.getvalue()


# ------------------------------------------------------------------ resampling


@functools.lru_cache(maxsize=4)
def lowpass_taps(factor: int, half_width: int = 80, beta: float = 8.6) -> np.ndarray:
    """Kaiser-windowed sinc with cutoff at the output Nyquist, unit DC gain."""
    n = np.arange(-half_width * factor, half_width * factor + 1)
    h = np.sinc(n / factor) / factor
    h *= np.kaiser(len(n), beta)
    return h / h.sum()


def resample(clip: AudioClip, target: int = 16000) -> AudioClip:
    if clip.sample_rate == target:
        return clip
    if clip.sample_rate % target:
        raise ValueError(f"resample: {clip.sample_rate} Hz is not an integer multiple of {target} Hz")
    factor = clip.sample_rate // target
    taps = lowpass_taps(factor)
    filtered = np.convolve(clip.samples, taps, mode="same") if len(clip.samples) >= len(taps) else \
        np.convolve(clip.samples, taps, mode="full")[len(taps) // 2 : len(taps) // 2 + len(clip.samples)]
    return AudioClip(filtered[::factor], target)


# ------------------------------------------------------------------ mel features


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(f >= min_log_hz, min_log_mel + np.log(np.maximum(f, 1e-12) / min_log_hz) / logstep, f / f_sp)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), m * f_sp)


def mel_points(cfg: FeatureConfig) -> np.ndarray:
    """mel_bins + 2 band edges in Hz; entry k+1 is the center of filter k."""
    return mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.mel_bins + 2))


@functools.lru_cache(maxsize=8)
def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """(mel_bins, fft_size // 2 + 1) triangular filters with unit peak."""
    fft_freqs = np.arange(cfg.fft_size // 2 + 1) * cfg.target_rate / cfg.fft_size
    pts = mel_points(cfg)
    lower = (fft_freqs[None, :] - pts[:-2, None]) / (pts[1:-1] - pts[:-2])[:, None]
    upper = (pts[2:, None] - fft_freqs[None, :]) / (pts[2:] - pts[1:-1])[:, None]
    fb = np.maximum(0.0, np.minimum(lower, upper))
    fb.setflags(write=False)
    return fb


def mel_centers(cfg: FeatureConfig) -> np.ndarray:
    return mel_points(cfg)[1:-1]


@functools.lru_cache(maxsize=4)
def _hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def power_frames(samples: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """Power spectra of Hann-windowed, uncentered frames: (frames, fft_size//2 + 1)."""
    x = np.asarray(samples, dtype=np.float64)
    if len(x) < cfg.window:
        raise ValueError(f"clip of {len(x)} samples is shorter than one window ({cfg.window})")
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.window)[:: cfg.hop]
    spec = np.fft.rfft(frames * _hann(cfg.window), n=cfg.fft_size, axis=1)
    return spec.real ** 2 + spec.imag ** 2


def log_mel_array(samples: np.ndarray, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """(mel_bins, T) natural-log mel energies, float64."""
    mel = mel_filterbank(cfg) @ power_frames(samples, cfg).T
    return np.log(np.maximum(mel, cfg.log_floor))


def log_mel(clip: AudioClip, cfg: FeatureConfig = FeatureConfig(), dtype=np.float32) -> Tensor:
    if clip.sample_rate != cfg.target_rate:
        raise ValueError(f"log_mel needs {cfg.target_rate} Hz audio, got {clip.sample_rate}")
    feat = log_mel_array(clip.samples, cfg)
    return Tensor(feat[None, None].astype(dtype), dtype=dtype)


def features_from_wav(data: Union[bytes, str, Path], cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    clip = resample(load_wav(data), cfg.target_rate)
    return log_mel_array(clip.samples, cfg).astype(np.float32)


# ------------------------------------------------------------------ LMEL cache files

LMEL_MAGIC = b"LMEL"
LMEL_VERSION = 1
_LMEL_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_lmel(feat: np.ndarray) -> bytes:
    """Header {magic, u16 version, u32 F, u32 T, u8 dtype} + F*T little-endian values."""
    feat = np.asarray(feat)
    if feat.ndim != 2:
        raise ValueError("LMEL stores a 2-D (F, T) array")
    tag = 1 if feat.dtype == np.float64 else 0
    header = LMEL_MAGIC + struct.pack("<HIIB", LMEL_VERSION, feat.shape[0], feat.shape[1], tag)
    return header + np.ascontiguousarray(feat, dtype=_LMEL_DTYPES[tag]).tobytes()


def read_lmel(data: Union[bytes, str, Path]) -> np.ndarray:
    if isinstance(data, (str, Path)):
        data = Path(data).read_bytes()
    if data[:4] != LMEL_MAGIC:
        raise ValueError("bad LMEL magic")
    version, f, t, tag = struct.unpack("<HIIB", data[4:15])
    if version != LMEL_VERSION or tag not in _LMEL_DTYPES:
        raise ValueError(f"unsupported LMEL version {version} / dtype tag {tag}")
    dt = _LMEL_DTYPES[tag]
    body = data[15:]
    if len(body) != f * t * dt.itemsize:
        raise ValueError("LMEL payload length does not match header")
    return np.frombuffer(body, dtype=dt).reshape(f, t).astype(dt.newbyteorder("="))
