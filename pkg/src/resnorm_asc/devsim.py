"""Synthetic scene corpus with recording-device coloration.

Scenes are synthesized as 16 kHz waveforms: spectrally shaped noise, an
amplitude-modulated band, and gated tones. Devices are smooth per-frequency
gain curves. By default they are applied in the log-mel domain, where a
device is an exact per-bin additive shift.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import FeatureSet
from .frontend import AudioClip, FeatureConfig, log_mel_array, mel_centers

DB_TO_NEPER = np.log(10.0) / 10.0  # power dB -> natural-log units


@dataclass
class DeviceProfile:
    device_id: str
    gain_db: np.ndarray
    offset_db: float = 0.0
    noise_floor_db: Optional[float] = None

    def __post_init__(self) -> None:
        self.gain_db = np.asarray(self.gain_db, dtype=np.float64)
        if not np.all(np.isfinite(self.gain_db)):
            raise ValueError("device gain curve must be finite")

    @classmethod
    def identity(cls, device_id: str = "A", bins: int = 256) -> "DeviceProfile":
        return cls(device_id, np.zeros(bins))

    @classmethod
    def random(cls, device_id: str, rng: np.random.Generator, bins: int = 256, max_gain_db: float = 6.0,
               max_offset_db: float = 3.0, components: int = 4) -> "DeviceProfile":
        """Smooth EQ: sum of low-order cosines, peak magnitude drawn in [max/2, max] dB."""
        pos = np.linspace(0.0, 1.0, bins)
        curve = np.zeros(bins)
        for k in range(1, components + 1):
            curve += rng.normal() / k * np.cos(np.pi * k * pos + rng.uniform(0, 2 * np.pi))
        peak = rng.uniform(max_gain_db / 2, max_gain_db)
        curve *= peak / max(np.abs(curve).max(), 1e-12)
        return cls(device_id, curve, float(rng.uniform(-max_offset_db, max_offset_db)))

    @property
    def is_identity(self) -> bool:
        return not np.any(self.gain_db) and self.offset_db == 0 and self.noise_floor_db is None

    def log_shift(self) -> np.ndarray:
        """Per-bin additive shift in natural-log mel units."""
        return (self.gain_db + self.offset_db) * DB_TO_NEPER


@dataclass
class SynthConfig:
    """Knobs for scene synthesis.

    Class envelopes (stationary spectral shape) are the cue devices corrupt;
    the modulated band and gated tones are cues that survive per-bin gain.
    """

    bump_db: Tuple[float, float] = (3.0, 7.0)
    envelope_jitter_db: float = 1.0
    level_jitter_db: float = 6.0
    am_depth: Tuple[float, float] = (0.3, 0.7)
    band_weight: float = 0.5
    tone_weight: float = 0.25


@dataclass
class SceneSpec:
    class_id: int
    bump_centers: np.ndarray  # fractions of the mel axis
    bump_widths: np.ndarray
    bump_heights_db: np.ndarray
    tilt_db: float
    am_rate_hz: float
    am_depth: float
    am_band_hz: Tuple[float, float]
    tone_hz: np.ndarray
    tone_period_s: float
    tone_duty: float


@dataclass
class SplitSpec:
    train_counts: Dict[str, int] = field(default_factory=lambda: {"A": 400, "B": 30, "C": 30})
    unseen: Tuple[str, ...] = ("S4", "S5", "S6")
    test_per_device: int = 10

    @property
    def seen(self) -> Tuple[str, ...]:
        return tuple(self.train_counts)

    @property
    def all_devices(self) -> Tuple[str, ...]:
        return self.seen + tuple(self.unseen)


@dataclass
class Corpus:
    features: FeatureSet
    scenes: List[SceneSpec]
    audio: Optional[List[np.ndarray]] = None
    feature_cfg: FeatureConfig = field(default_factory=FeatureConfig)


# ------------------------------------------------------------------ scene synthesis


def make_scene_specs(n_classes: int = 10, seed: int = 0, min_distance: float = 0.08,
                     synth: SynthConfig = SynthConfig()) -> List[SceneSpec]:
    """Class prototypes; bump-center vectors are kept ``min_distance`` apart."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC1A55]))
    specs: List[SceneSpec] = []
    centers_seen: List[np.ndarray] = []
    am_rates = np.geomspace(0.7, 9.0, n_classes)
    rng.shuffle(am_rates)
    periods = np.geomspace(0.25, 2.0, n_classes)
    rng.shuffle(periods)
    while len(specs) < n_classes:
        centers = np.sort(rng.uniform(0.05, 0.95, 3))
        if any(np.abs(centers - c).max() < min_distance for c in centers_seen):
            continue
        centers_seen.append(centers)
        k = len(specs)
        lo = rng.uniform(150, 3000)
        specs.append(SceneSpec(
            class_id=k,
            bump_centers=centers,
            bump_widths=rng.uniform(0.03, 0.1, 3),
            bump_heights_db=rng.uniform(*synth.bump_db, 3) * rng.choice([-1, 1], 3),
            tilt_db=float(rng.uniform(-12, 0)),
            am_rate_hz=float(am_rates[k]),
            am_depth=float(rng.uniform(*synth.am_depth)),
            am_band_hz=(lo, lo * rng.uniform(1.6, 3.0)),
            tone_hz=np.sort(rng.uniform(200, 6000, 2)),
            tone_period_s=float(periods[k]),
            tone_duty=float(rng.uniform(0.2, 0.6)),
        ))
    return specs


def _envelope_db(spec: SceneSpec, freqs: np.ndarray, rng: np.random.Generator, jitter_db: float) -> np.ndarray:
    from .frontend import hz_to_mel

    m = hz_to_mel(freqs) / hz_to_mel(8000.0)
    env = spec.tilt_db * m
    heights = spec.bump_heights_db + rng.normal(0, jitter_db, len(spec.bump_heights_db))
    for c, w, h in zip(spec.bump_centers, spec.bump_widths, heights):
        env = env + h * np.exp(-0.5 * ((m - c) / w) ** 2)
    return env


def synth_clip(spec: SceneSpec, rng: np.random.Generator, duration: float = 5.0, sr: int = 16000,
               synth: SynthConfig = SynthConfig()) -> np.ndarray:
    """One 16 kHz waveform for scene ``spec``."""
    n = int(round(duration * sr))
    t = np.arange(n) / sr
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    env = _envelope_db(spec, freqs, rng, synth.envelope_jitter_db)
    shaped = np.fft.irfft(np.fft.rfft(rng.standard_normal(n)) * 10 ** (env / 20), n)
    shaped /= shaped.std() + 1e-12

    lo, hi = spec.am_band_hz
    band = np.fft.rfft(rng.standard_normal(n))
    band[(freqs < lo) | (freqs > hi)] = 0
    band_sig = np.fft.irfft(band, n)
    band_sig /= band_sig.std() + 1e-12
    rate = spec.am_rate_hz * rng.uniform(0.9, 1.1)
    am = 1 + spec.am_depth * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
    band_sig *= am

    phase0 = rng.uniform(0, spec.tone_period_s)
    gate = (((t + phase0) % spec.tone_period_s) < spec.tone_duty * spec.tone_period_s).astype(float)
    tones = np.zeros(n)
    for f0 in spec.tone_hz:
        tones += np.sin(2 * np.pi * f0 * rng.uniform(0.97, 1.03) * t + rng.uniform(0, 2 * np.pi))
    tones *= gate

    sig = shaped + synth.band_weight * band_sig + synth.tone_weight * tones
    level = 10 ** (rng.uniform(-synth.level_jitter_db, synth.level_jitter_db) / 20)
    return 0.05 * level * sig / (np.abs(sig).max() + 1e-12)


def gen_dataset(n_per_class: int, scenes: Sequence[SceneSpec], rng: np.random.Generator,
                duration: float = 5.0, cfg: FeatureConfig = FeatureConfig(), keep_audio: bool = False,
                synth: SynthConfig = SynthConfig()) -> Corpus:
    """Clean (device-free) corpus, classes interleaved; clip i uses its own derived stream."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    base = int(rng.integers(0, 2**63 - 1))
    feats, labels, audio = [], [], []
    for i in range(n_per_class * len(scenes)):
        spec = scenes[i % len(scenes)]
        clip_rng = np.random.default_rng(np.random.SeedSequence([base, i]))
        wav = synth_clip(spec, clip_rng, duration, cfg.target_rate, synth)
        feats.append(log_mel_array(wav, cfg).astype(np.float32))
        labels.append(spec.class_id)
        if keep_audio:
            audio.append(wav)
    n = len(feats)
    fs = FeatureSet(np.stack(feats), np.array(labels), np.array(["clean"] * n, dtype=object), np.arange(n))
    return Corpus(fs, list(scenes), audio if keep_audio else None, cfg)


# ------------------------------------------------------------------ device coloration


def apply_device(item, profile: DeviceProfile, cfg: FeatureConfig = FeatureConfig()):
    """Color a log-mel array (..., F, T) or an AudioClip; identity is a no-op."""
    if isinstance(item, AudioClip):
        return AudioClip(apply_device_waveform(item.samples, profile, cfg), item.sample_rate)
    if profile.is_identity:
        return item
    x = np.asarray(item)
    shift = profile.log_shift().astype(x.dtype)[:, None]
    out = x + shift
    if profile.noise_floor_db is not None:
        floor = np.asarray(profile.noise_floor_db * DB_TO_NEPER, dtype=x.dtype)
        out = np.logaddexp(out, floor)
    return out


def apply_device_waveform(samples: np.ndarray, profile: DeviceProfile, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Waveform-domain variant: zero-phase filter whose power response follows the gain curve."""
    n = len(samples)
    freqs = np.fft.rfftfreq(n, 1.0 / cfg.target_rate)
    gain_db = np.interp(freqs, mel_centers(cfg), profile.gain_db) + profile.offset_db
    return np.fft.irfft(np.fft.rfft(samples) * 10 ** (gain_db / 20), n)


def make_devices(split: SplitSpec, seed: int = 0, bins: int = 256, reference_identity: bool = True) -> Dict[str, DeviceProfile]:
    """Profiles for every device in ``split``; the first seen device is the reference."""
    out = {}
    for i, dev in enumerate(split.all_devices):
        if i == 0 and reference_identity:
            out[dev] = DeviceProfile.identity(dev, bins)
            continue
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDE71CE, i]))
        out[dev] = DeviceProfile.random(dev, rng, bins)
    return out


def _class_balanced_take(pool: List[int], labels: np.ndarray, count: int) -> List[int]:
    by_class: Dict[int, List[int]] = {}
    for i in pool:
        by_class.setdefault(int(labels[i]), []).append(i)
    classes = sorted(by_class)
    taken: List[int] = []
    r = 0
    while len(taken) < count:
        progressed = False
        for c in classes:
            if r < len(by_class[c]) and len(taken) < count:
                taken.append(by_class[c][r])
                progressed = True
        if not progressed:
            break
        r += 1
    return taken


def make_splits(corpus, split: SplitSpec, rng: np.random.Generator,
                devices: Optional[Dict[str, DeviceProfile]] = None,
                domain: str = "logmel") -> Tuple[FeatureSet, FeatureSet]:
    """Device-imbalanced train set and equal-bucket test set over disjoint clips.

    Every test clip is rendered through every device (parallel recordings);
    unseen devices appear only in the test set.
    """
    fs = corpus.features if isinstance(corpus, Corpus) else corpus
    devices = devices or make_devices(split, int(rng.integers(0, 2**31)))
    need = sum(split.train_counts.values()) + split.test_per_device
    if len(fs) < need:
        raise ValueError(
            f"corpus has {len(fs)} clips, split needs {need} "
            f"(train {dict(split.train_counts)} + test {split.test_per_device})"
        )
    if domain == "waveform" and (not isinstance(corpus, Corpus) or corpus.audio is None):
        raise ValueError("waveform-domain devices need a corpus generated with keep_audio=True")
    pool = [int(i) for i in rng.permutation(len(fs))]
    test_idx = _class_balanced_take(pool, fs.y, split.test_per_device)
    taken = set(test_idx)
    pool = [i for i in pool if i not in taken]

    def render(idx: List[int], dev: str) -> FeatureSet:
        prof = devices[dev]
        if domain == "waveform":
            cfg = corpus.feature_cfg
            x = np.stack([log_mel_array(apply_device_waveform(corpus.audio[i], prof, cfg), cfg)
                          for i in idx]).astype(np.float32)
        else:
            x = np.stack([apply_device(fs.x[i], prof) for i in idx]).astype(np.float32)
        return FeatureSet(x, fs.y[idx], np.array([dev] * len(idx), dtype=object), fs.clip_ids[idx])

    train_parts = []
    for dev, count in split.train_counts.items():
        idx = _class_balanced_take(pool, fs.y, count)
        if len(idx) < count:
            raise ValueError(f"device {dev}: needs {count} train clips, only {len(idx)} available")
        taken = set(idx)
        pool = [i for i in pool if i not in taken]
        train_parts.append(render(idx, dev))
    test_parts = [render(test_idx, dev) for dev in split.all_devices]
    return FeatureSet.concat(train_parts), FeatureSet.concat(test_parts)


def separability_audit(fs: FeatureSet, min_db: float = 3.0, min_fraction: float = 0.10) -> Dict[Tuple[int, int], float]:
    """Fraction of bins where class-mean log-mel spectra differ by >= ``min_db`` dB, per class pair."""
    classes = sorted(set(fs.y.tolist()))
    means = {c: fs.x[fs.y == c].mean(axis=(0, 2)) / DB_TO_NEPER for c in classes}
    out = {}
    for i, a in enumerate(classes):
        for b in classes[i + 1 :]:
            out[(a, b)] = float(np.mean(np.abs(means[a] - means[b]) >= min_db))
    return out


@dataclass
class Benchmark:
    train: FeatureSet
    test: FeatureSet
    split: SplitSpec
    devices: Dict[str, DeviceProfile]


def make_benchmark(seed: int = 0, n_per_class: Optional[int] = None, split: Optional[SplitSpec] = None,
                   duration: float = 5.0, n_classes: int = 10, scene_seed: int = 0,
                   synth: SynthConfig = SynthConfig()) -> Benchmark:
    """Corpus + devices + splits in one seeded call."""
    split = split or SplitSpec()
    need = sum(split.train_counts.values()) + split.test_per_device
    n_per_class = n_per_class or -(-need // n_classes)
    scenes = make_scene_specs(n_classes, scene_seed, synth=synth)
    rng = np.random.default_rng(seed)
    corpus = gen_dataset(n_per_class, scenes, rng, duration, synth=synth)
    devices = make_devices(split, seed)
    train, test = make_splits(corpus, split, rng, devices)
    return Benchmark(train, test, split, devices)
