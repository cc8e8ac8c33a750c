"""Deterministic synthesis of labeled and unlabeled overlapped-speech corpora.

Mixtures follow the additive model: each reference is gain-scaled and
offset-placed, the mixture is their sum plus optional noise. Per-item
seeds make corpus generation a pure function of its arguments, so items
may be generated on any number of workers in any order.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dsp import Waveform
from .wavio import read_wav, write_wav

OVERLAP_MODES = ("none", "partial", "full")
MIXTURE_TYPES = ("single", "partial", "full", "single_noise")


@dataclass(frozen=True)
class MixSpec:
    """Recipe for one mixture."""

    source_count: int = 2
    overlap_mode: str = "full"
    gain_db: tuple[float, ...] = (0.0, 0.0)
    noise_snr_db: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.source_count not in (1, 2):
            raise ValueError("source_count must be 1 or 2")
        if self.overlap_mode not in OVERLAP_MODES:
            raise ValueError(f"overlap_mode must be one of {OVERLAP_MODES}")
        object.__setattr__(self, "gain_db", tuple(float(g) for g in self.gain_db))
        if len(self.gain_db) != self.source_count:
            raise ValueError("need one gain per source")
        for g in self.gain_db:
            if not -5.0 <= g <= 5.0:
                raise ValueError(f"gain {g} dB outside [-5, +5]")
        if self.noise_snr_db is not None and not 0.0 <= self.noise_snr_db <= 10.0:
            raise ValueError(f"noise SNR {self.noise_snr_db} dB outside [0, 10]")


@dataclass
class MixtureSample:
    """A mixture plus (for labeled data) its aligned reference sources."""

    mixture: Waveform
    references: list[Waveform] | None
    spec: MixSpec
    overlap_ratio: float


def _overlap_samples(intervals: list[tuple[int, int]], total: int) -> int:
    """Samples covered by two or more of the given [start, stop) intervals."""
    if len(intervals) < 2:
        return 0
    (a0, a1), (b0, b1) = intervals[:2]
    return max(0, min(a1, b1) - max(a0, b0))


def _noise(n: int, color: str, rng: np.random.Generator) -> np.ndarray:
    white = rng.standard_normal(n)
    if color == "white":
        return white
    if color == "pink":
        spec = np.fft.rfft(white)
        f = np.arange(spec.shape[0])
        spec = spec / np.sqrt(np.maximum(f, 1.0))
        return np.fft.irfft(spec, n=n)
    raise ValueError(f"unknown noise color {color!r}")


def mix(
    sources: list[Waveform], spec: MixSpec, noise_color: str = "white"
) -> MixtureSample:
    """Place, scale and sum sources per ``spec``; optionally add noise.

    References are stored as the gain-scaled, offset-placed signals, so
    without noise they sum exactly to the mixture.
    """
    if len(sources) == 0:
        raise ValueError("empty source list")
    if len(sources) != spec.source_count:
        raise ValueError(
            f"got {len(sources)} sources, spec says {spec.source_count}"
        )
    rates = {s.sample_rate for s in sources}
    if len(rates) != 1:
        raise ValueError(f"sample-rate mismatch: {sorted(rates)}")
    for s in sources:
        if s.channels != 1:
            raise ValueError("sources must be single-channel")
    rate = rates.pop()
    rng = np.random.default_rng(spec.seed)

    lengths = [s.num_samples for s in sources]
    if spec.source_count == 1:
        offsets = [0]
    elif spec.overlap_mode == "none":
        offsets = [0, lengths[0]]
    elif spec.overlap_mode == "full":
        offsets = [0, 0]
    else:  # partial: any interior offset of source 2 yields partial overlap
        offsets = [0, int(rng.integers(1, max(2, lengths[0])))]

    total = max(off + n for off, n in zip(offsets, lengths))
    refs = []
    for src, off, gain in zip(sources, offsets, spec.gain_db):
        buf = np.zeros(total)
        buf[off : off + src.num_samples] = src.channel(0) * 10.0 ** (gain / 20.0)
        refs.append(Waveform(buf, rate))
    speech = np.sum([r.channel(0) for r in refs], axis=0)

    mixture = speech
    if spec.noise_snr_db is not None:
        e_speech = float(np.sum(speech**2))
        if e_speech == 0.0:
            raise ValueError("cannot set a noise SNR against silent speech")
        noise = _noise(total, noise_color, rng)
        e_noise = float(np.sum(noise**2))
        noise *= np.sqrt(e_speech / (e_noise * 10.0 ** (spec.noise_snr_db / 10.0)))
        mixture = speech + noise

    intervals = [(off, off + n) for off, n in zip(offsets, lengths)]
    ratio = _overlap_samples(intervals, total) / total
    return MixtureSample(Waveform(mixture, rate), refs, spec, ratio)


@dataclass(frozen=True)
class CorpusTemplate:
    """Distribution the per-item mixture recipes are drawn from.

    ``type_weights`` orders the four mixture types (single speaker,
    partial-overlap two-speaker, full-overlap two-speaker, single
    speaker plus noise). The default weights put the corpus mean overlap
    ratio near 50%.
    """

    sample_rate: int = 16000
    duration_range: tuple[float, float] = (1.0, 2.0)
    gain_range_db: tuple[float, float] = (-5.0, 5.0)
    noise_snr_range_db: tuple[float, float] = (0.0, 10.0)
    type_weights: tuple[float, float, float, float] = (0.14, 0.36, 0.36, 0.14)
    low_f0_range: tuple[float, float] = (90.0, 150.0)
    high_f0_range: tuple[float, float] = (190.0, 320.0)
    noise_color: str = "white"
    source_dir: str | None = None

    def __post_init__(self):
        if len(self.type_weights) != len(MIXTURE_TYPES):
            raise ValueError("need one weight per mixture type")
        if min(self.type_weights) < 0 or sum(self.type_weights) <= 0:
            raise ValueError("type weights must be non-negative, not all zero")


def synth_voice(
    duration_s: float,
    sample_rate: int,
    rng: np.random.Generator,
    f0_range: tuple[float, float],
) -> np.ndarray:
    """Speech-like source: amplitude-modulated harmonic tone with a
    formant-shaped envelope and a small noise floor. RMS-normalized."""
    n = max(1, int(round(duration_s * sample_rate)))
    t = np.arange(n) / sample_rate
    f0 = rng.uniform(*f0_range)
    vib_rate = rng.uniform(4.0, 7.0)
    vib_phase = rng.uniform(0.0, 2.0 * np.pi)
    inst_f0 = f0 * (1.0 + 0.01 * np.sin(2.0 * np.pi * vib_rate * t + vib_phase))
    phase_cycles = np.cumsum(inst_f0) / sample_rate

    formant = rng.uniform(350.0, 2400.0)
    bandwidth = rng.uniform(300.0, 900.0)
    tilt = rng.uniform(0.4, 1.0)
    num_harmonics = int(min(12, np.floor(0.45 * sample_rate / f0)))
    x = np.zeros(n)
    for k in range(1, num_harmonics + 1):
        amp = k**-tilt * (0.25 + np.exp(-(((k * f0 - formant) / bandwidth) ** 2)))
        x += amp * np.sin(2.0 * np.pi * k * phase_cycles + rng.uniform(0, 2 * np.pi))

    syllable_rate = rng.uniform(2.0, 6.0)
    env = 0.35 + 0.65 * (
        0.5 + 0.5 * np.sin(2.0 * np.pi * syllable_rate * t + rng.uniform(0, 2 * np.pi))
    ) ** 2
    x *= env
    x += 0.005 * np.std(x) * rng.standard_normal(n)
    rms = np.sqrt(np.mean(x**2))
    return 0.1 * x / rms if rms > 0 else x


def _list_source_files(source_dir: str) -> list[Path]:
    files = sorted(Path(source_dir).glob("*.wav"))
    if not files:
        raise ValueError(f"no .wav files in {source_dir}")
    return files


def _draw_source(
    template: CorpusTemplate,
    duration: float,
    rng: np.random.Generator,
    f0_range: tuple[float, float],
) -> Waveform:
    if template.source_dir is None:
        return Waveform(
            synth_voice(duration, template.sample_rate, rng, f0_range),
            template.sample_rate,
        )
    files = _list_source_files(template.source_dir)
    w = read_wav(files[int(rng.integers(0, len(files)))])
    if w.sample_rate != template.sample_rate:
        raise ValueError(
            f"source file rate {w.sample_rate} != template rate "
            f"{template.sample_rate}"
        )
    n = min(w.num_samples, max(1, int(round(duration * template.sample_rate))))
    start = int(rng.integers(0, max(1, w.num_samples - n + 1)))
    return Waveform(w.channel(0)[start : start + n], w.sample_rate)


def make_sample(
    template: CorpusTemplate, labeled: bool, seed: int
) -> MixtureSample:
    """One corpus item; a pure function of (template, labeled, seed)."""
    rng = np.random.default_rng(seed)
    if labeled:
        weights = np.asarray(template.type_weights, dtype=np.float64)
        mtype = MIXTURE_TYPES[
            int(rng.choice(len(MIXTURE_TYPES), p=weights / weights.sum()))
        ]
    else:
        # Unlabeled data mirrors plain two-utterance mixing: full overlap,
        # no noise reference retained.
        mtype = "full"

    duration = rng.uniform(*template.duration_range)
    if mtype in ("single", "single_noise"):
        f0_pool = (
            template.low_f0_range if rng.uniform() < 0.5 else template.high_f0_range
        )
        sources = [_draw_source(template, duration, rng, f0_pool)]
        gains = (0.0,)
        overlap_mode = "full"
    else:
        pools = [template.low_f0_range, template.high_f0_range]
        if rng.uniform() < 0.5:
            pools.reverse()
        sources = [_draw_source(template, duration, rng, p) for p in pools]
        ratio_db = rng.uniform(*template.gain_range_db)
        gains = (ratio_db / 2.0, -ratio_db / 2.0)
        overlap_mode = mtype

    snr = (
        float(rng.uniform(*template.noise_snr_range_db))
        if mtype == "single_noise"
        else None
    )
    spec = MixSpec(
        source_count=len(sources),
        overlap_mode=overlap_mode,
        gain_db=gains,
        noise_snr_db=snr,
        seed=seed,
    )
    sample = mix(sources, spec, noise_color=template.noise_color)
    if not labeled:
        sample.references = None
    return sample


def make_corpus(
    n: int,
    template: CorpusTemplate | None = None,
    labeled: bool = True,
    master_seed: int = 0,
) -> list[MixtureSample]:
    """Generate ``n`` samples; item ``i`` uses seed ``master_seed ^ i``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    template = template or CorpusTemplate()
    return [make_sample(template, labeled, master_seed ^ i) for i in range(n)]


def write_corpus(
    samples: list[MixtureSample], out_dir: str | Path, dtype: str = "float32"
) -> Path:
    """Write WAV payloads plus a line-delimited JSON manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for i, s in enumerate(samples):
            mix_name = f"mix_{i:05d}.wav"
            write_wav(out / mix_name, s.mixture, dtype)
            ref_names = None
            if s.references is not None:
                ref_names = [f"ref_{i:05d}_{j}.wav" for j in range(len(s.references))]
                for name, ref in zip(ref_names, s.references):
                    write_wav(out / name, ref, dtype)
            record = {
                "index": i,
                "mixture": mix_name,
                "references": ref_names,
                "seed": s.spec.seed,
                "overlap_ratio": s.overlap_ratio,
                "spec": asdict(s.spec),
            }
            fh.write(json.dumps(record) + "\n")
    return manifest


def read_corpus(manifest_path: str | Path) -> list[MixtureSample]:
    """Load a corpus written by :func:`write_corpus`."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    samples = []
    with open(manifest_path) as fh:
        for line in fh:
            rec = json.loads(line)
            spec_dict = dict(rec["spec"])
            spec_dict["gain_db"] = tuple(spec_dict["gain_db"])
            refs = None
            if rec["references"] is not None:
                refs = [read_wav(base / name) for name in rec["references"]]
            samples.append(
                MixtureSample(
                    mixture=read_wav(base / rec["mixture"]),
                    references=refs,
                    spec=MixSpec(**spec_dict),
                    overlap_ratio=float(rec["overlap_ratio"]),
                )
            )
    return samples
