"""WAV reading/writing via scipy, normalized to [-1, 1] amplitudes."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .dsp import Waveform


def read_wav(path: str | Path) -> Waveform:
    """Read a PCM16/PCM32/float WAV into a channels-first Waveform."""
    rate, data = wavfile.read(str(path))
    data = np.atleast_2d(data.T if data.ndim == 2 else data)
    if data.dtype == np.int16:
        data = data / 32768.0
    elif data.dtype == np.int32:
        data = data / 2147483648.0
    elif data.dtype == np.uint8:
        data = (data.astype(np.float64) - 128.0) / 128.0
    else:
        data = data.astype(np.float64)
    return Waveform(data, int(rate))


def write_wav(path: str | Path, w: Waveform, dtype: str = "float32") -> None:
    """Write a Waveform as 32-bit float (default) or 16-bit PCM."""
    samples = w.samples.T if w.channels > 1 else w.samples[0]
    if dtype == "float32":
        wavfile.write(str(path), w.sample_rate, samples.astype(np.float32))
    elif dtype == "int16":
        clipped = np.clip(samples, -1.0, 32767.0 / 32768.0)
        wavfile.write(
            str(path), w.sample_rate, np.round(clipped * 32768.0).astype(np.int16)
        )
    else:
        raise ValueError(f"unsupported dtype {dtype!r}")
