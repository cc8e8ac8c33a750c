"""STFT analysis/synthesis, feature extraction, and spectral masking.

All functions here are pure: they never mutate their inputs, so they are
safe to call concurrently from any number of workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_WINDOWS = ("hann", "rect")


def _make_window(name: str, length: int) -> np.ndarray:
    """Analysis window samples. ``hann`` is the periodic variant."""
    if name == "hann":
        n = np.arange(length)
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / length)
    if name == "rect":
        return np.ones(length)
    raise ValueError(f"unknown window {name!r}, expected one of {_WINDOWS}")


@dataclass(frozen=True)
class StftConfig:
    """Framing parameters for analysis and synthesis.

    Defaults are the common 16 kHz speech convention: 32 ms frames with
    16 ms hop. ``freq_bins`` is ``fft_size // 2 + 1`` (one-sided spectrum).
    """

    sample_rate: int = 16000
    frame_length: int = 512
    hop: int = 256
    fft_size: int = 512
    window: str = "hann"

    def __post_init__(self):
        if not (0 < self.hop <= self.frame_length <= self.fft_size):
            raise ValueError(
                "require 0 < hop <= frame_length <= fft_size, got "
                f"hop={self.hop}, frame_length={self.frame_length}, "
                f"fft_size={self.fft_size}"
            )
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        win = _make_window(self.window, self.frame_length)
        # Nonzero overlap-add of the squared window guarantees the
        # synthesis normalization below inverts analysis exactly.
        span = 4 * self.frame_length
        acc = np.zeros(span)
        for start in range(0, span - self.frame_length + 1, self.hop):
            acc[start : start + self.frame_length] += win**2
        interior = acc[self.frame_length : span - 2 * self.frame_length]
        if interior.size and interior.min() < 1e-10:
            raise ValueError(
                f"window {self.window!r} with hop {self.hop} does not "
                "satisfy the overlap-add condition; iSTFT would not invert"
            )

    @property
    def freq_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def pad(self) -> int:
        """Zero padding added to each end of the signal before framing."""
        return self.frame_length - self.hop

    def window_array(self) -> np.ndarray:
        return _make_window(self.window, self.frame_length)

    def num_frames(self, num_samples: int) -> int:
        """Hop-spaced frame count covering the padded signal."""
        total = num_samples + 2 * self.pad
        if total <= self.frame_length:
            return 1
        return int(np.ceil((total - self.frame_length) / self.hop)) + 1

    def frames_for_duration(self, seconds: float) -> int:
        """Frames spanned by ``seconds`` of signal at hop spacing."""
        return max(1, int(np.ceil(seconds * self.sample_rate / self.hop)))


@dataclass
class Waveform:
    """Time-domain signal, channels-first ``(C, N)`` real amplitudes."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim == 1:
            self.samples = self.samples[np.newaxis, :]
        if self.samples.ndim != 2:
            raise ValueError("samples must be 1-D or (channels, n)")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.num_samples / self.sample_rate

    def channel(self, c: int) -> np.ndarray:
        return self.samples[c]


@dataclass
class Spectrogram:
    """Complex time-frequency values, shape ``(C, T, F)``."""

    values: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if not np.iscomplexobj(self.values):
            self.values = self.values.astype(np.complex128)
        if self.values.ndim == 2:
            self.values = self.values[np.newaxis, :, :]
        if self.values.ndim != 3:
            raise ValueError("values must have shape (C, T, F)")
        if self.values.shape[2] != self.config.freq_bins:
            raise ValueError(
                f"got {self.values.shape[2]} frequency bins, config "
                f"implies {self.config.freq_bins}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("spectrogram contains non-finite entries")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def num_frames(self) -> int:
        return self.values.shape[1]

    @property
    def num_bins(self) -> int:
        return self.values.shape[2]

    def first_channel(self) -> np.ndarray:
        return self.values[0]


@dataclass
class MaskSet:
    """Per-source time-frequency gains, shape ``(S, T, F)``, open (0, 1)."""

    masks: np.ndarray

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=np.float64)
        if self.masks.ndim != 3:
            raise ValueError("masks must have shape (S, T, F)")
        if not np.all((self.masks > 0.0) & (self.masks < 1.0)):
            raise ValueError("mask entries must lie strictly in (0, 1)")

    @property
    def num_sources(self) -> int:
        return self.masks.shape[0]


def _frame_signal(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Zero-pad and slice one channel into (T, frame_length) frames."""
    padded = np.concatenate([np.zeros(cfg.pad), x, np.zeros(cfg.pad)])
    t = cfg.num_frames(x.shape[0])
    need = (t - 1) * cfg.hop + cfg.frame_length
    if need > padded.shape[0]:
        padded = np.concatenate([padded, np.zeros(need - padded.shape[0])])
    idx = np.arange(cfg.frame_length)[None, :] + cfg.hop * np.arange(t)[:, None]
    return padded[idx]


def stft(w: Waveform, cfg: StftConfig | None = None) -> Spectrogram:
    """Short-time Fourier transform of every channel.

    The signal is zero-padded by ``frame_length - hop`` on both sides, so
    frame 0 is centered near the signal start and reconstruction is exact
    away from the edges.
    """
    cfg = cfg or StftConfig()
    if w.num_samples < cfg.frame_length:
        raise ValueError(
            f"waveform has {w.num_samples} samples, need at least one "
            f"frame ({cfg.frame_length})"
        )
    win = cfg.window_array()
    chans = []
    for c in range(w.channels):
        frames = _frame_signal(w.channel(c), cfg) * win
        chans.append(np.fft.rfft(frames, n=cfg.fft_size, axis=1))
    return Spectrogram(np.stack(chans), cfg)


def istft(
    s: Spectrogram, cfg: StftConfig | None = None, length: int | None = None
) -> Waveform:
    """Inverse STFT by windowed overlap-add with squared-window normalization.

    ``length`` trims or zero-extends the output; the default is the full
    span implied by the frame count, which matches the input length of
    ``stft`` to within one hop.
    """
    cfg = cfg or s.config
    if s.num_bins != cfg.freq_bins:
        raise ValueError(
            f"spectrogram has {s.num_bins} bins but config implies "
            f"{cfg.freq_bins}"
        )
    win = cfg.window_array()
    t = s.num_frames
    span = (t - 1) * cfg.hop + cfg.frame_length
    out = np.zeros((s.channels, span))
    wsum = np.zeros(span)
    for c in range(s.channels):
        frames = np.fft.irfft(s.values[c], n=cfg.fft_size, axis=1)
        frames = frames[:, : cfg.frame_length] * win
        for i in range(t):
            out[c, i * cfg.hop : i * cfg.hop + cfg.frame_length] += frames[i]
    for i in range(t):
        wsum[i * cfg.hop : i * cfg.hop + cfg.frame_length] += win**2
    nz = wsum > 1e-10
    out[:, nz] /= wsum[nz]
    out = out[:, cfg.pad : span - cfg.pad] if span > 2 * cfg.pad else out[:, :0]
    if length is not None:
        if out.shape[1] >= length:
            out = out[:, :length]
        else:
            out = np.pad(out, ((0, 0), (0, length - out.shape[1])))
    return Waveform(out, cfg.sample_rate)


def apply_mask(m: MaskSet, mix: Spectrogram) -> list[Spectrogram]:
    """Scale the mixture's first channel by each source mask.

    The masks are real, so each complex bin keeps its phase and has its
    magnitude scaled.
    """
    y1 = mix.first_channel()
    if m.masks.shape[1:] != y1.shape:
        raise ValueError(
            f"mask shape {m.masks.shape[1:]} does not match mixture "
            f"frames/bins {y1.shape}"
        )
    return [Spectrogram(m.masks[s] * y1, mix.config) for s in range(m.num_sources)]


def features(mix: Spectrogram) -> np.ndarray:
    """Model input features: magnitude of the first channel, ``(T, F)``."""
    if mix.channels < 1:
        raise ValueError("mixture must have at least one channel")
    return np.abs(mix.first_channel())


def reconstruction_snr(
    original: np.ndarray, reconstructed: np.ndarray, skip: int
) -> float:
    """Interior-sample SNR in dB between a signal and its reconstruction."""
    n = min(original.shape[-1], reconstructed.shape[-1])
    a = original[..., skip : n - skip]
    b = reconstructed[..., skip : n - skip]
    err = np.sum((a - b) ** 2)
    if err == 0.0:
        return np.inf
    return 10.0 * np.log10(np.sum(a**2) / err)
