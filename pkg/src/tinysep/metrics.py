"""Separation quality metrics: scale-invariant SNR with permutation
search, and comparative corpus-level reporting."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from statistics import median

import numpy as np

from .css import CssConfig, separate_continuous
from .dsp import StftConfig, Waveform
from .mixer import MixtureSample

SNR_CAP_DB = 80.0

OVERLAP_BUCKETS = ("0", "(0,0.25]", "(0.25,0.5]", ">0.5")


def _as_array(x) -> np.ndarray:
    if isinstance(x, Waveform):
        if x.channels != 1:
            raise ValueError("SI-SNR expects single-channel signals")
        return x.channel(0)
    return np.asarray(x, dtype=np.float64)


def si_snr(est, ref) -> float:
    """Scale-invariant SNR in dB, capped to +/-80.

    The target is the projection of the estimate onto the reference; the
    residual is everything else. Any positive rescaling of a perfect
    estimate therefore stays at the cap.
    """
    e = _as_array(est)
    r = _as_array(ref)
    if e.shape != r.shape:
        raise ValueError(f"length mismatch: {e.shape} vs {r.shape}")
    denom = float(np.dot(r, r))
    if denom == 0.0:
        raise ValueError("reference is identically zero")
    target = (float(np.dot(e, r)) / denom) * r
    resid = e - target
    p_t = float(np.dot(target, target))
    p_r = float(np.dot(resid, resid))
    if p_r == 0.0:
        return SNR_CAP_DB
    if p_t == 0.0:
        return -SNR_CAP_DB
    return float(np.clip(10.0 * np.log10(p_t / p_r), -SNR_CAP_DB, SNR_CAP_DB))


def best_permutation_si_snr(
    estimates: list, references: list
) -> tuple[float, tuple[int, ...]]:
    """Best mean SI-SNR over injective assignments of estimates to
    references. References may be fewer than estimates."""
    n_est, n_ref = len(estimates), len(references)
    if n_ref == 0 or n_ref > n_est:
        raise ValueError(f"need 1..{n_est} references, got {n_ref}")
    best_perm, best_val = None, None
    for perm in itertools.permutations(range(n_est), n_ref):
        val = float(
            np.mean([si_snr(estimates[p], references[i]) for i, p in enumerate(perm)])
        )
        if best_val is None or val > best_val:
            best_perm, best_val = perm, val
    return best_val, best_perm


def overlap_bucket(ratio: float) -> str:
    if ratio <= 0.0:
        return OVERLAP_BUCKETS[0]
    if ratio <= 0.25:
        return OVERLAP_BUCKETS[1]
    if ratio <= 0.5:
        return OVERLAP_BUCKETS[2]
    return OVERLAP_BUCKETS[3]


@dataclass
class SampleEval:
    index: int
    overlap_ratio: float
    si_snr_db: float
    permutation: tuple[int, ...]


@dataclass
class EvalReport:
    run_id: str
    samples: list[SampleEval] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean([s.si_snr_db for s in self.samples]))

    @property
    def median(self) -> float:
        return float(median(s.si_snr_db for s in self.samples))

    def bucket_means(self) -> dict[str, float]:
        """Mean per overlap bucket; only non-empty buckets appear."""
        out: dict[str, list[float]] = {}
        for s in self.samples:
            out.setdefault(overlap_bucket(s.overlap_ratio), []).append(s.si_snr_db)
        return {k: float(np.mean(v)) for k, v in out.items() if v}

    def format(self) -> str:
        lines = [
            f"run: {self.run_id}",
            f"samples: {len(self.samples)}",
            f"mean SI-SNR: {self.mean:.2f} dB",
            f"median SI-SNR: {self.median:.2f} dB",
        ]
        for bucket in OVERLAP_BUCKETS:
            means = self.bucket_means()
            if bucket in means:
                lines.append(f"overlap {bucket}: {means[bucket]:.2f} dB")
        return "\n".join(lines)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write("index,overlap_ratio,si_snr_db,permutation\n")
            for s in self.samples:
                perm = " ".join(str(p) for p in s.permutation)
                fh.write(f"{s.index},{s.overlap_ratio!r},{s.si_snr_db!r},{perm}\n")

    def write_json(self, path: str | Path) -> None:
        payload = {
            "run_id": self.run_id,
            "mean": self.mean,
            "median": self.median,
            "buckets": self.bucket_means(),
            "samples": [
                {
                    "index": s.index,
                    "overlap_ratio": s.overlap_ratio,
                    "si_snr_db": s.si_snr_db,
                    "permutation": list(s.permutation),
                }
                for s in self.samples
            ],
        }
        Path(path).write_text(json.dumps(payload, indent=2))


def evaluate(
    separator,
    corpus: list[MixtureSample],
    css_cfg: CssConfig | None = None,
    stft_cfg: StftConfig | None = None,
    run_id: str = "run",
) -> EvalReport:
    """Best-permutation SI-SNR of a separator over a labeled corpus.

    ``separator`` is either a model (anything `separate_continuous`
    accepts) or a callable mapping a mixture Waveform to a list of
    estimated Waveforms.
    """
    css_cfg = css_cfg or CssConfig()
    stft_cfg = stft_cfg or StftConfig()
    if callable(separator) and not hasattr(separator, "forward"):
        separate = separator
    else:
        def separate(mixture: Waveform) -> list[Waveform]:
            return separate_continuous(separator, mixture, css_cfg, stft_cfg)

    report = EvalReport(run_id=run_id)
    for i, sample in enumerate(corpus):
        if sample.references is None:
            raise ValueError(f"sample {i} has no references; corpus is unlabeled")
        estimates = separate(sample.mixture)
        val, perm = best_permutation_si_snr(estimates, sample.references)
        report.samples.append(SampleEval(i, sample.overlap_ratio, val, perm))
    return report
