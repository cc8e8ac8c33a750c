"""Continuous separation: sliding-window inference, cross-window source
alignment, and cross-faded stitching into per-source output streams.

Window forward passes are independent; alignment and stitching are a
sequential left-to-right fold over window order.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import torch

from .dsp import MaskSet, Spectrogram, StftConfig, Waveform, apply_mask, features, istft, stft
from .model import MaskEstimator

CROSSFADES = ("linear", "none")


@dataclass(frozen=True)
class CssConfig:
    window_seconds: float = 2.4
    hop_seconds: float = 1.2
    crossfade: str = "linear"

    def __post_init__(self):
        if not 0 < self.hop_seconds <= self.window_seconds:
            raise ValueError("require 0 < hop_seconds <= window_seconds")
        if self.crossfade not in CROSSFADES:
            raise ValueError(f"crossfade must be one of {CROSSFADES}")

    def window_frames(self, stft_cfg: StftConfig) -> int:
        return stft_cfg.frames_for_duration(self.window_seconds)

    def hop_frames(self, stft_cfg: StftConfig) -> int:
        return stft_cfg.frames_for_duration(self.hop_seconds)


@dataclass
class WindowOutput:
    """Per-window model output plus what alignment needs."""

    index: int
    start_frame: int
    masks: np.ndarray  # (S, T_w, F)
    mix_mag: np.ndarray  # (T_w, F) mixture magnitude of the window

    @property
    def num_frames(self) -> int:
        return self.masks.shape[1]

    @property
    def stop_frame(self) -> int:
        return self.start_frame + self.num_frames

    def masked(self) -> np.ndarray:
        """Masked magnitudes; alignment compares these rather than raw
        masks so silent regions cannot dominate."""
        return self.masks * self.mix_mag[np.newaxis]


def split_windows(
    spec: Spectrogram, cfg: CssConfig, stft_cfg: StftConfig | None = None
) -> list[tuple[int, int]]:
    """Frame-aligned (start, stop) windows at hop spacing; the final
    window is right-aligned to cover the tail. Inputs shorter than one
    window become a single window."""
    stft_cfg = stft_cfg or spec.config
    t = spec.num_frames
    w = cfg.window_frames(stft_cfg)
    h = cfg.hop_frames(stft_cfg)
    if t <= w:
        return [(0, t)]
    starts = list(range(0, t - w, h))
    starts.append(t - w)  # right-align the final window to cover the tail
    return [(s, s + w) for s in starts]


def _permutations_by_closeness(n: int):
    """All permutations ordered by how far they are from identity, then
    lexicographically; used for tie-breaking."""
    perms = list(itertools.permutations(range(n)))
    return sorted(perms, key=lambda p: (sum(i != j for i, j in enumerate(p)), p))


def align_adjacent(
    prev: WindowOutput, cur: WindowOutput
) -> tuple[tuple[int, ...], bool]:
    """Permutation of ``cur``'s sources minimizing summed MSE against
    ``prev`` over the overlapped frames of masked magnitudes.

    Returns ``(permutation, warned)``; zero overlap returns identity with
    the warning flag set.
    """
    s = prev.masks.shape[0]
    if cur.masks.shape[0] != s:
        raise ValueError("windows disagree on source count")
    overlap = prev.stop_frame - cur.start_frame
    identity = tuple(range(s))
    if overlap <= 0:
        return identity, True
    a = prev.masked()[:, prev.num_frames - overlap :]
    b = cur.masked()[:, :overlap]
    best, best_cost = identity, None
    for perm in _permutations_by_closeness(s):
        cost = float(np.mean((b[list(perm)] - a) ** 2))
        if best_cost is None or cost < best_cost:
            best, best_cost = perm, cost
    return best, False


def stitch(outputs: list[WindowOutput], cfg: CssConfig) -> np.ndarray:
    """Combine aligned windows into continuous (S, T, F) mask streams.

    Overlaps are blended with weights that sum to 1 per frame: a linear
    cross-fade, or nearest-window-center hard assignment for ``none``.
    """
    if not outputs:
        raise ValueError("no windows to stitch")
    for a, b in zip(outputs, outputs[1:]):
        if b.start_frame > a.stop_frame:
            raise ValueError(
                f"gap between windows {a.index} and {b.index} "
                f"({a.stop_frame} < {b.start_frame})"
            )
    total = max(o.stop_frame for o in outputs)
    s, _, f = outputs[0].masks.shape
    acc = np.zeros((s, total, f))
    wsum = np.zeros(total)
    if cfg.crossfade == "linear":
        for o in outputs:
            n = o.num_frames
            ramp = np.minimum(np.arange(1, n + 1), np.arange(n, 0, -1)).astype(float)
            acc[:, o.start_frame : o.stop_frame] += ramp[None, :, None] * o.masks
            wsum[o.start_frame : o.stop_frame] += ramp
    else:
        centers = np.array([(o.start_frame + o.stop_frame) / 2 for o in outputs])
        owner = np.abs(np.arange(total)[:, None] - centers[None, :]).argmin(axis=1)
        for i, o in enumerate(outputs):
            sel = np.zeros(total)
            sel[o.start_frame : o.stop_frame] = 1.0
            sel *= owner == i
            acc += sel[None, :, None] * np.pad(
                o.masks,
                ((0, 0), (o.start_frame, total - o.stop_frame), (0, 0)),
            )
            wsum += sel
    if np.any(wsum <= 0):
        raise ValueError("stitching left uncovered frames")
    return acc / wsum[None, :, None]


def separate_continuous(
    model: MaskEstimator,
    w: Waveform,
    css_cfg: CssConfig | None = None,
    stft_cfg: StftConfig | None = None,
    alignment_log: list | None = None,
) -> list[Waveform]:
    """Full pipeline: STFT, windowed mask estimation, alignment,
    stitching, masking, and per-source iSTFT.

    ``alignment_log``, when given, collects one record per window with
    the permutation applied to it (for debugging stitch behavior).
    """
    css_cfg = css_cfg or CssConfig()
    stft_cfg = stft_cfg or StftConfig()
    if w.channels != 1:
        raise ValueError("continuous separation expects a single channel")
    spec = stft(w, stft_cfg)
    feat = features(spec)
    dtype = next(model.parameters()).dtype

    model.eval()
    outputs = []
    with torch.no_grad():
        for i, (start, stop) in enumerate(split_windows(spec, css_cfg, stft_cfg)):
            chunk = torch.from_numpy(feat[start:stop]).to(dtype)
            masks, _ = model(chunk)
            outputs.append(
                WindowOutput(
                    index=i,
                    start_frame=start,
                    masks=masks.double().numpy(),
                    mix_mag=feat[start:stop],
                )
            )
    if alignment_log is not None and outputs:
        first = outputs[0]
        alignment_log.append(
            {
                "window": 0,
                "start_frame": first.start_frame,
                "permutation": list(range(first.masks.shape[0])),
                "zero_overlap": False,
            }
        )
    for prev, cur in zip(outputs, outputs[1:]):
        perm, warned = align_adjacent(prev, cur)
        cur.masks = cur.masks[list(perm)]
        if alignment_log is not None:
            alignment_log.append(
                {
                    "window": cur.index,
                    "start_frame": cur.start_frame,
                    "permutation": list(perm),
                    "zero_overlap": warned,
                }
            )

    streams = stitch(outputs, css_cfg)
    # model masks are sigmoid outputs in the open interval, but stitching
    # averages stay within it; clip guards exact 0/1 from rounding
    streams = np.clip(streams, 1e-9, 1.0 - 1e-9)
    masked = apply_mask(MaskSet(streams), spec)
    return [istft(m, stft_cfg, length=w.num_samples) for m in masked]
