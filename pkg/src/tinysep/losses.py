"""Distillation losses and schedules.

Covers the mask-output teacher-student loss, layer-wise matching with
triangular weighting, permutation-invariant training against references,
and the sigmoid-annealed objective shift between the two. All losses are
pure functions of tensors and may be evaluated concurrently.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .model import init_parameters

LAYER_MAP_VARIANTS = ("multi6to16", "single12to16", "uniform")


@dataclass(frozen=True)
class LayerMapSpec:
    """Which teacher layer each student layer is matched against."""

    variant: str
    num_student_layers: int
    num_teacher_layers: int

    def __post_init__(self):
        if self.variant not in LAYER_MAP_VARIANTS:
            raise ValueError(f"variant must be one of {LAYER_MAP_VARIANTS}")
        if self.num_student_layers < 1 or self.num_teacher_layers < 1:
            raise ValueError("layer counts must be >= 1")
        idx = [self._raw(i) for i in range(self.num_student_layers + 1)]
        if idx[0] != 0 or idx[-1] != self.num_teacher_layers:
            raise ValueError(
                f"map {self.variant} sends 0 -> {idx[0]} and "
                f"{self.num_student_layers} -> {idx[-1]}; expected endpoints "
                f"0 and {self.num_teacher_layers}"
            )
        if any(b < a for a, b in zip(idx, idx[1:])):
            raise ValueError(f"map {self.variant} is not non-decreasing")
        if min(idx) < 0 or max(idx) > self.num_teacher_layers:
            raise ValueError("mapped indices fall outside the teacher trace")

    def _raw(self, i: int) -> int:
        if self.variant == "multi6to16":
            return max(3 * i - 2, 0)
        if self.variant == "single12to16":
            return min(2 * i, i + 4)
        # round half away from zero, so the mapping is monotone in i
        return int(
            math.floor(i * self.num_teacher_layers / self.num_student_layers + 0.5)
        )


def layer_map(i: int, spec: LayerMapSpec) -> int:
    """Teacher trace index matched to student trace index ``i``."""
    if not 0 <= i <= spec.num_student_layers:
        raise ValueError(
            f"student index {i} outside [0, {spec.num_student_layers}]"
        )
    return spec._raw(i)


class ProjectionSet(nn.Module):
    """Per-matched-layer affine maps from student width to teacher width.

    Trained jointly with the student and discarded after distillation.
    Identity (parameter-free) when the widths already agree.
    """

    def __init__(self, num_student_layers: int, student_dim: int, teacher_dim: int):
        super().__init__()
        if student_dim == teacher_dim:
            maps = [nn.Identity() for _ in range(num_student_layers + 1)]
        else:
            maps = [
                nn.Linear(student_dim, teacher_dim)
                for _ in range(num_student_layers + 1)
            ]
        self.maps = nn.ModuleList(maps)

    def __len__(self) -> int:
        return len(self.maps)

    def __getitem__(self, i: int) -> nn.Module:
        return self.maps[i]


def build_projections(
    num_student_layers: int,
    student_dim: int,
    teacher_dim: int,
    seed: int,
    dtype: torch.dtype = torch.float32,
) -> ProjectionSet:
    proj = ProjectionSet(num_student_layers, student_dim, teacher_dim).to(dtype)
    init_parameters(proj, seed)
    return proj


@dataclass(frozen=True)
class ShiftSchedule:
    """Sigmoid annealing: weight(t) = sigmoid(-k * (t - t0))."""

    k: float
    t0: int

    def __post_init__(self):
        if self.k <= 0:
            raise ValueError("k must be positive")
        if self.t0 < 0:
            raise ValueError("t0 must be >= 0")


def _sigmoid(x: float) -> float:
    # branch keeps exp argument non-positive: stable and exactly
    # symmetric, sigmoid(x) + sigmoid(-x) == 1 up to one rounding
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def lambda_weight(t: float, sched: ShiftSchedule) -> float:
    """Annealing weight at step ``t``; strictly decreasing, in (0, 1)."""
    if t < 0:
        raise ValueError("t must be >= 0")
    return _sigmoid(-sched.k * (t - sched.t0))


def _magnitude(mixture: torch.Tensor) -> torch.Tensor:
    return mixture.abs() if mixture.is_complex() else mixture


def ts_loss(
    masks_stu: torch.Tensor, masks_tea: torch.Tensor, mixture: torch.Tensor
) -> torch.Tensor:
    """Mean squared error between student- and teacher-masked mixtures.

    Masks are (…, S, T, F); ``mixture`` is the complex first channel or
    its magnitude, (…, T, F). No permutation search: the source order is
    the teacher's.
    """
    if masks_stu.shape != masks_tea.shape:
        raise ValueError(
            f"mask shapes differ: {tuple(masks_stu.shape)} vs "
            f"{tuple(masks_tea.shape)}"
        )
    mag = _magnitude(mixture)
    if mag.shape[-2:] != masks_stu.shape[-2:]:
        raise ValueError("mixture frames/bins do not match the masks")
    diff = (masks_stu - masks_tea) * mag.unsqueeze(-3)
    return diff.square().mean()


def layer_loss(
    h_stu: torch.Tensor, h_tea: torch.Tensor, proj: nn.Module | None = None
) -> torch.Tensor:
    """Mean squared error between (projected) student and teacher hidden
    maps, normalized by frames times teacher width."""
    p = proj(h_stu) if proj is not None else h_stu
    if p.shape != h_tea.shape:
        raise ValueError(
            f"hidden shapes differ after projection: {tuple(p.shape)} vs "
            f"{tuple(h_tea.shape)}"
        )
    return (p - h_tea).square().mean()


def lts_weights(num_student_layers: int) -> np.ndarray:
    """Triangular weights for [L_0, .., L_I, L_TS]; positive, sum to 1."""
    if num_student_layers < 1:
        raise ValueError("num_student_layers must be >= 1")
    raw = np.array(
        [i + 1 for i in range(num_student_layers + 1)] + [num_student_layers + 1],
        dtype=np.float64,
    )
    return raw / raw.sum()


def lts_loss(
    trace_stu: list[torch.Tensor],
    trace_tea: list[torch.Tensor],
    spec: LayerMapSpec,
    projections: ProjectionSet | None,
    ts: torch.Tensor,
    return_terms: bool = False,
):
    """Weighted average of per-layer losses and the output-level loss.

    Higher layers get larger weights; the output term gets the largest.
    """
    if len(trace_stu) != spec.num_student_layers + 1:
        raise ValueError(
            f"student trace has {len(trace_stu)} entries, map expects "
            f"{spec.num_student_layers + 1}"
        )
    if len(trace_tea) != spec.num_teacher_layers + 1:
        raise ValueError(
            f"teacher trace has {len(trace_tea)} entries, map expects "
            f"{spec.num_teacher_layers + 1}"
        )
    weights = lts_weights(spec.num_student_layers)
    terms = []
    for i in range(spec.num_student_layers + 1):
        proj = projections[i] if projections is not None else None
        terms.append(layer_loss(trace_stu[i], trace_tea[layer_map(i, spec)], proj))
    total = None
    for w, term in zip(weights, terms + [ts]):
        total = w * term if total is None else total + w * term
    if return_terms:
        return total, terms
    return total


def pit_loss(
    masks: torch.Tensor, ref_mags: torch.Tensor, mixture: torch.Tensor
):
    """Permutation-invariant magnitude MSE against reference sources.

    ``masks`` (…, S, T, F), ``ref_mags`` reference magnitudes (…, S, T, F)
    (complex references are reduced to magnitudes), ``mixture`` (…, T, F).
    Searches all S! assignments of estimates to references and returns
    ``(loss, permutation)``; ties take the lexicographically smallest
    permutation. Batched inputs return one permutation per item and the
    batch-mean best loss.
    """
    s = masks.shape[-3]
    if s > 4:
        raise ValueError(f"unsupported source cardinality {s} (max 4)")
    refs = _magnitude(ref_mags)
    if refs.shape != masks.shape:
        raise ValueError(
            f"references {tuple(refs.shape)} do not match masks "
            f"{tuple(masks.shape)}"
        )
    est = masks * _magnitude(mixture).unsqueeze(-3)
    perms = list(itertools.permutations(range(s)))
    # per-permutation, per-item mean over (S, T, F)
    losses = torch.stack(
        [
            (est[..., list(p), :, :] - refs).square().mean(dim=(-1, -2, -3))
            for p in perms
        ]
    )
    if losses.dim() == 1:  # unbatched
        best = int(losses.argmin())
        return losses[best], perms[best]
    flat = losses.reshape(len(perms), -1)
    best = flat.argmin(dim=0)
    loss = flat.gather(0, best.unsqueeze(0)).mean()
    return loss, [perms[int(b)] for b in best]


def combined_loss(
    l_pit: torch.Tensor | float,
    l_lts: torch.Tensor | float,
    t: float,
    sched: ShiftSchedule,
):
    """Objective shift: the annealing weight multiplies the teacher-side
    loss, so training starts teacher-dominated and ends reference-dominated.
    """
    lam = lambda_weight(t, sched)
    return lam * l_lts + (1.0 - lam) * l_pit
