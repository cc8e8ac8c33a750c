"""WAV round-trip tests for both supported encodings."""

import numpy as np
import pytest

from tinysep.dsp import Waveform
from tinysep.wavio import read_wav, write_wav


class TestWavIO:
    def test_float32_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        x = 0.5 * rng.standard_normal(4000)
        write_wav(tmp_path / "x.wav", Waveform(x, 16000), dtype="float32")
        back = read_wav(tmp_path / "x.wav")
        assert back.sample_rate == 16000
        assert back.channels == 1
        np.testing.assert_allclose(back.channel(0), x, atol=1e-6)

    def test_int16_round_trip_quantizes(self, tmp_path):
        rng = np.random.default_rng(1)
        x = 0.9 * rng.standard_normal(2000).clip(-1, 1)
        write_wav(tmp_path / "x.wav", Waveform(x, 8000), dtype="int16")
        back = read_wav(tmp_path / "x.wav")
        np.testing.assert_allclose(back.channel(0), x, atol=1.0 / 32768)
        assert np.max(np.abs(back.samples)) <= 1.0

    def test_multichannel(self, tmp_path):
        rng = np.random.default_rng(2)
        x = 0.3 * rng.standard_normal((3, 1500))
        write_wav(tmp_path / "x.wav", Waveform(x, 16000))
        back = read_wav(tmp_path / "x.wav")
        assert back.channels == 3
        np.testing.assert_allclose(back.samples, x, atol=1e-6)

    def test_int16_write_clips_overrange(self, tmp_path):
        x = np.array([1.5, -1.5, 0.0])
        write_wav(tmp_path / "x.wav", Waveform(x, 8000), dtype="int16")
        back = read_wav(tmp_path / "x.wav")
        assert np.max(np.abs(back.samples)) <= 1.0

    def test_unknown_dtype_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            write_wav(tmp_path / "x.wav", Waveform(np.zeros(10), 8000), dtype="int24")
