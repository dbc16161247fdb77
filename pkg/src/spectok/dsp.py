"""Audio ingestion and Mel-spectrogram feature extraction.

Fixed-rate front end: 32 kHz mono input, 8000-sample Hann windows with a
4000-sample hop (8 frames per second), 768 triangular Mel filters between
20 Hz and 16 kHz, natural-log power output. Everything here is a pure
function of its inputs; clips can be processed in parallel freely.

Conventions the rest of the pipeline relies on:
- frame t covers samples [t*hop, t*hop + window), zero-padded at the clip end,
  so n_frames = ceil(len(samples) / hop);
- Mel filter weights are normalized to unit sum (zero-width filters stay zero);
- log is natural log of (power + log_floor);
- row normalization is L2 and skips rows whose norm is below 1e-12.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.io.wavfile
import scipy.sparse

from .errors import ConfigError, DataError, FormatError, RateMismatchError

ZERO_ROW_NORM = 1e-12


@dataclass
class SpectrogramConfig:
    """STFT/Mel front-end parameters. Defaults give 8 frames per second."""

    sample_rate: int = 32_000
    window_size: int = 8_000
    hop_size: int = 4_000
    n_mels: int = 768
    fmin: float = 20.0
    fmax: float = 16_000.0
    log_floor: float = 1e-10

    def __post_init__(self) -> None:
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        if not 0 < self.hop_size <= self.window_size:
            raise ConfigError(
                f"hop_size must be in (0, window_size]; got hop={self.hop_size} window={self.window_size}"
            )
        if self.n_mels < 1:
            raise ConfigError(f"n_mels must be >= 1, got {self.n_mels}")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ConfigError(
                f"need 0 <= fmin < fmax <= sample_rate/2; got fmin={self.fmin} fmax={self.fmax}"
            )
        if self.log_floor <= 0:
            raise ConfigError(f"log_floor must be positive, got {self.log_floor}")

    @property
    def frames_per_second(self) -> float:
        return self.sample_rate / self.hop_size


@dataclass
class AudioClip:
    """Mono audio in [-1, 1] at a known sample rate."""

    id: str
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DataError(f"clip {self.id!r}: expected mono 1-D samples, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise DataError(f"clip {self.id!r}: sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise DataError(f"clip {self.id!r}: non-finite sample values")

    @property
    def duration_seconds(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class MelFrameMatrix:
    """Log-power Mel frames, one row per hop."""

    frames: np.ndarray            # n_frames x n_mels
    frames_per_second: float
    normalized: bool = False
    clip_id: str = ""

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise DataError(f"frames must be 2-D, got shape {self.frames.shape}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]


def load_audio(path, expected_rate: int) -> AudioClip:
    """Read a PCM WAV file (16-bit int or 32-bit float) as a mono AudioClip.

    Multi-channel input is downmixed by per-sample arithmetic mean. The file
    header rate must equal ``expected_rate``; there is no silent resampling.
    """
    path = str(path)
    try:
        rate, data = scipy.io.wavfile.read(path)
    except ValueError as exc:
        raise FormatError(f"{path}: unsupported or malformed WAV ({exc})") from exc
    if rate != expected_rate:
        raise RateMismatchError(f"{path}: header rate {rate} Hz != expected {expected_rate} Hz")

    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported sample encoding {data.dtype} (need int16 or float32)")

    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    clip_id = path.rsplit("/", 1)[-1]
    if clip_id.lower().endswith(".wav"):
        clip_id = clip_id[:-4]
    return AudioClip(id=clip_id, samples=samples, sample_rate=rate)


def write_wav(path, clip: AudioClip) -> None:
    """Write a clip as 32-bit float WAV (round-trips through load_audio)."""
    scipy.io.wavfile.write(str(path), clip.sample_rate, clip.samples.astype(np.float32))


def synth_clip(
    spec: list[tuple[float, float, float, float]],
    noise_level: float,
    sample_rate: int,
    length: float,
    seed: int,
    clip_id: str | None = None,
) -> AudioClip:
    """Deterministic test signal: a sum of sinusoid bursts plus uniform noise.

    ``spec`` lists (start_s, duration_s, frequency_hz, amplitude) tones. The
    mix must stay inside [-1, 1]; a clipping mix is a parameter error rather
    than being silently truncated.
    """
    n = int(round(length * sample_rate))
    samples = np.zeros(n, dtype=np.float64)
    for start, duration, freq, amplitude in spec:
        if start < 0 or duration < 0 or start + duration > length + 1e-12:
            raise ConfigError(f"tone ({start}, {duration}, {freq} Hz) does not fit in a {length} s clip")
        i0 = int(round(start * sample_rate))
        i1 = min(n, i0 + int(round(duration * sample_rate)))
        t = np.arange(i0, i1, dtype=np.float64) / sample_rate
        samples[i0:i1] += amplitude * np.sin(2.0 * np.pi * freq * t)
    if noise_level:
        rng = np.random.default_rng(seed)
        samples += rng.uniform(-noise_level, noise_level, size=n)
    peak = float(np.max(np.abs(samples))) if n else 0.0
    if peak > 1.0:
        raise ConfigError(f"tone mix clips: peak amplitude {peak:.4f} > 1.0")
    return AudioClip(id=clip_id or f"synth-{seed}", samples=samples, sample_rate=sample_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: SpectrogramConfig) -> np.ndarray:
    """Triangular Mel filterbank, n_mels x (window_size // 2 + 1).

    Filters are spaced uniformly on the Mel scale between fmin and fmax and
    each row is normalized to unit sum. Rows too narrow to cover any FFT bin
    center are left all-zero rather than divided by zero.
    """
    n_bins = cfg.window_size // 2 + 1
    bin_freqs = np.arange(n_bins, dtype=np.float64) * cfg.sample_rate / cfg.window_size
    mel_points = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    hz_points = mel_to_hz(mel_points)

    left = hz_points[:-2, None]
    center = hz_points[1:-1, None]
    right = hz_points[2:, None]
    up = (bin_freqs[None, :] - left) / np.maximum(center - left, 1e-30)
    down = (right - bin_freqs[None, :]) / np.maximum(right - center, 1e-30)
    weights = np.maximum(0.0, np.minimum(up, down))

    sums = weights.sum(axis=1, keepdims=True)
    nonzero = sums[:, 0] > 0
    weights[nonzero] /= sums[nonzero]
    return weights


def _hann_window(n: int) -> np.ndarray:
    # Periodic form, standard for frame-based spectral analysis.
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def mel_spectrogram(clip: AudioClip, cfg: SpectrogramConfig) -> MelFrameMatrix:
    """Hann-windowed power spectrogram pooled through the Mel filterbank.

    Emits ceil(len/hop) frames (the tail frame is zero-padded) and applies
    log(power + log_floor) per band.
    """
    if clip.sample_rate != cfg.sample_rate:
        raise ConfigError(
            f"clip {clip.id!r} is {clip.sample_rate} Hz but config expects {cfg.sample_rate} Hz"
        )
    if not np.all(np.isfinite(clip.samples)):
        raise DataError(f"clip {clip.id!r}: non-finite sample values")

    hop, window = cfg.hop_size, cfg.window_size
    n_frames = -(-clip.samples.size // hop)  # ceil(len / hop); a sub-hop clip gives one padded frame
    padded = np.zeros(max(0, (n_frames - 1) * hop + window), dtype=np.float64)
    padded[: clip.samples.size] = clip.samples

    idx = np.arange(window)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = padded[idx] * _hann_window(window)[None, :]
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2

    # The filterbank is >99% zeros at 768 bands; a sparse product keeps
    # featurization well inside the per-file time budget.
    filt = scipy.sparse.csr_matrix(mel_filterbank(cfg))
    mel_power = np.asarray((filt @ power.T).T)
    log_mel = np.log(mel_power + cfg.log_floor)
    return MelFrameMatrix(
        frames=log_mel,
        frames_per_second=cfg.frames_per_second,
        normalized=False,
        clip_id=clip.id,
    )


def normalize_frames(m: MelFrameMatrix) -> MelFrameMatrix:
    """Scale each row to unit L2 norm; rows with norm < 1e-12 are left as-is."""
    if m.normalized:
        raise ConfigError("frames are already normalized")
    norms = np.linalg.norm(m.frames, axis=1, keepdims=True)
    scale = np.where(norms < ZERO_ROW_NORM, 1.0, norms)
    return MelFrameMatrix(
        frames=m.frames / scale,
        frames_per_second=m.frames_per_second,
        normalized=True,
        clip_id=m.clip_id,
    )
