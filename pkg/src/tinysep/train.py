"""Optimization loop, learning-rate schedule, and the two-stage pipeline.

Single-process training: one optimizer writes the student parameters,
batch assembly is a pure function of (seed, step), and the teacher stays
frozen throughout distillation, so identical manifests reproduce
identical loss logs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .dsp import StftConfig, features, stft
from .losses import (
    LayerMapSpec,
    ProjectionSet,
    ShiftSchedule,
    build_projections,
    combined_loss,
    lambda_weight,
    lts_loss,
    pit_loss,
    ts_loss,
)
from .mixer import MixtureSample, read_corpus
from .model import MaskEstimator, ModelConfig, build_model

# Reference-scale schedule constants; desk-scale runs keep their shape.
REFERENCE_TOTAL_STEPS = 260_000
REFERENCE_WARMUP_STEPS = 10_000
REFERENCE_T0 = 150_000
REFERENCE_K_GRID = (1e-4, 5e-4)
REFERENCE_T0_GRID_UNLABELED = (10_000, 20_000)

MODES = ("teacher", "baseline", "vanilla_ts", "lts", "os", "lts_os", "unlabeled_lts_os")
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class OptimConfig:
    peak_lr: float = 1e-4
    weight_decay: float = 1e-2
    warmup_steps: int = 200
    total_steps: int = 5000
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        for name in ("peak_lr", "weight_decay", "warmup_steps", "total_steps", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.warmup_steps >= self.total_steps:
            raise ValueError("warmup_steps must be < total_steps")


def scaled_warmup(total_steps: int) -> int:
    """Warm-up step count keeping the reference schedule's shape."""
    return max(1, round(total_steps * REFERENCE_WARMUP_STEPS / REFERENCE_TOTAL_STEPS))


def desk_schedule(total_steps: int, k: float = 1e-4, t0: int | None = None) -> ShiftSchedule:
    """Annealing schedule rescaled so its shape in normalized time matches
    the reference run: k grows by (reference total / desk total) and t0
    keeps its fractional position."""
    if t0 is None:
        t0 = round(total_steps * REFERENCE_T0 / REFERENCE_TOTAL_STEPS)
    return ShiftSchedule(k=k * REFERENCE_TOTAL_STEPS / total_steps, t0=t0)


def lr_at(step: int, cfg: OptimConfig) -> float:
    """Linear ramp 0..peak over warmup, then linear decay to 0 at total."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    return cfg.peak_lr * (cfg.total_steps - step) / (cfg.total_steps - cfg.warmup_steps)


@dataclass
class RunManifest:
    """Everything one training run needs.

    Corpora may be in-memory sample lists or manifest paths; only
    path-backed manifests serialize (``to_json``/``from_json``).
    """

    mode: str
    model: ModelConfig
    optim: OptimConfig
    stft: StftConfig = field(default_factory=StftConfig)
    schedule: ShiftSchedule | None = None
    labeled_corpus: list[MixtureSample] | str | None = None
    unlabeled_corpus: list[MixtureSample] | str | None = None
    teacher_checkpoint: str | None = None
    student_init: str | None = None
    checkpoint_dir: str | None = None
    segment_frames: int = 150
    stage1_steps: int | None = None
    layer_map_variant: str = "uniform"
    val_fraction: float = 0.1
    dtype: str = "float32"

    def to_json(self) -> str:
        def corpus_field(c):
            return c if (c is None or isinstance(c, (str, Path))) else None

        payload = {
            "mode": self.mode,
            "model": asdict(self.model),
            "optim": asdict(self.optim),
            "stft": asdict(self.stft),
            "schedule": asdict(self.schedule) if self.schedule else None,
            "labeled_corpus": corpus_field(self.labeled_corpus),
            "unlabeled_corpus": corpus_field(self.unlabeled_corpus),
            "teacher_checkpoint": self.teacher_checkpoint,
            "student_init": self.student_init,
            "checkpoint_dir": self.checkpoint_dir,
            "segment_frames": self.segment_frames,
            "stage1_steps": self.stage1_steps,
            "layer_map_variant": self.layer_map_variant,
            "val_fraction": self.val_fraction,
            "dtype": self.dtype,
        }
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        d = json.loads(text)
        d["model"] = ModelConfig(**d["model"])
        d["optim"] = OptimConfig(**d["optim"])
        d["stft"] = StftConfig(**d["stft"])
        if d.get("schedule"):
            d["schedule"] = ShiftSchedule(**d["schedule"])
        return cls(**d)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.mode in ("vanilla_ts", "lts", "os", "lts_os", "unlabeled_lts_os"):
            if self.teacher_checkpoint is None:
                raise ValueError(f"mode {self.mode} requires teacher_checkpoint")
        if self.mode == "unlabeled_lts_os" and self.unlabeled_corpus is None:
            raise ValueError("mode unlabeled_lts_os requires unlabeled_corpus")
        needs_labels = self.mode in ("teacher", "baseline", "os", "lts_os", "unlabeled_lts_os")
        if needs_labels and self.labeled_corpus is None:
            raise ValueError(f"mode {self.mode} requires labeled_corpus")
        if self.mode in ("vanilla_ts", "lts") and (
            self.labeled_corpus is None and self.unlabeled_corpus is None
        ):
            raise ValueError(f"mode {self.mode} requires a corpus")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {tuple(_DTYPES)}")


@dataclass
class SegmentSet:
    """Fixed-length spectral segments ready for batching."""

    feats: torch.Tensor  # (N, T, F) mixture magnitudes (model input)
    refmags: torch.Tensor | None  # (N, S, T, F) reference magnitudes

    @property
    def size(self) -> int:
        return self.feats.shape[0]


def _crop_pad(mat: np.ndarray, frames: int) -> np.ndarray:
    if mat.shape[0] >= frames:
        return mat[:frames]
    return np.pad(mat, ((0, frames - mat.shape[0]), (0, 0)))


def prepare_segments(
    samples: list[MixtureSample],
    stft_cfg: StftConfig,
    segment_frames: int,
    num_sources: int,
    dtype: torch.dtype,
) -> SegmentSet:
    """STFT magnitudes cropped/zero-padded to a fixed frame count.

    Missing references (unlabeled corpora) yield ``refmags=None``; short
    reference lists are padded with silent sources.
    """
    feats, refs = [], []
    labeled = samples[0].references is not None
    for s in samples:
        spec = stft(s.mixture, stft_cfg)
        feats.append(_crop_pad(features(spec), segment_frames))
        if labeled:
            if s.references is None:
                raise ValueError("corpus mixes labeled and unlabeled samples")
            mags = [
                _crop_pad(features(stft(r, stft_cfg)), segment_frames)
                for r in s.references[:num_sources]
            ]
            while len(mags) < num_sources:
                mags.append(np.zeros((segment_frames, stft_cfg.freq_bins)))
            refs.append(np.stack(mags))
    feats_t = torch.from_numpy(np.stack(feats)).to(dtype)
    refs_t = torch.from_numpy(np.stack(refs)).to(dtype) if labeled else None
    return SegmentSet(feats_t, refs_t)


def batch_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    """Stateless batch assembly: a pure function of (seed, step)."""
    rng = np.random.default_rng([seed, step])
    return rng.integers(0, n, size=batch_size)


def split_validation(
    samples: list[MixtureSample], seed: int, fraction: float = 0.1
) -> tuple[list[MixtureSample], list[MixtureSample]]:
    """Deterministic held-out split; validation gets ceil(fraction * n),
    never the whole corpus."""
    n = len(samples)
    n_val = min(max(1, int(np.ceil(fraction * n))), n - 1) if n > 1 else 0
    order = np.random.default_rng(seed).permutation(n)
    val = [samples[i] for i in order[:n_val]]
    train = [samples[i] for i in order[n_val:]]
    return train, val


@dataclass
class TrainResult:
    checkpoint: Path | None
    history: list[dict]
    val_loss: float


def _resolve_corpus(c) -> list[MixtureSample]:
    return read_corpus(c) if isinstance(c, (str, Path)) else c


def _model_from_checkpoint(ckpt: Checkpoint, dtype: torch.dtype) -> MaskEstimator:
    model = MaskEstimator(ckpt.config).to(dtype)
    state = {k: v.to(dtype) for k, v in ckpt.state_dict("model.").items()}
    model.load_state_dict(state)
    return model


def load_model(path: str | Path, dtype: torch.dtype = torch.float32) -> MaskEstimator:
    """Restore a MaskEstimator from a checkpoint file."""
    return _model_from_checkpoint(load_checkpoint(path), dtype)


def _named_params(model, projections):
    named = [("model." + n, p) for n, p in model.named_parameters()]
    if projections is not None:
        named += [("proj." + n, p) for n, p in projections.named_parameters()]
    return named


def _save_run(
    path: Path,
    model: MaskEstimator,
    projections: ProjectionSet | None,
    optimizer: torch.optim.AdamW | None,
    named: list,
    step: int,
    extra: dict,
) -> Path:
    tensors = {"model." + n: p for n, p in model.state_dict().items()}
    if projections is not None:
        tensors.update({"proj." + n: p for n, p in projections.state_dict().items()})
    if optimizer is not None:
        for name, p in named:
            state = optimizer.state.get(p)
            if state:
                tensors["optim." + name + ".exp_avg"] = state["exp_avg"]
                tensors["optim." + name + ".exp_avg_sq"] = state["exp_avg_sq"]
    return save_checkpoint(path, model.config, tensors, step=step, extra=extra)


def _restore_optimizer(optimizer, named, ckpt: Checkpoint, dtype) -> None:
    for name, p in named:
        key = "optim." + name + ".exp_avg"
        if key in ckpt.tensors:
            optimizer.state[p] = {
                "step": torch.tensor(float(ckpt.step)),
                "exp_avg": torch.from_numpy(ckpt.tensors[key].copy()).to(dtype),
                "exp_avg_sq": torch.from_numpy(
                    ckpt.tensors["optim." + name + ".exp_avg_sq"].copy()
                ).to(dtype),
            }


def _eval_loss(
    model: MaskEstimator,
    data: SegmentSet,
    kind: str,
    teacher: MaskEstimator | None = None,
    map_spec: LayerMapSpec | None = None,
    projections: ProjectionSet | None = None,
) -> float:
    """Held-out loss of the mode's own flavor: PIT against references,
    or the (layer-wise) distillation loss against the teacher."""
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for lo in range(0, data.size, 32):
            feats = data.feats[lo : lo + 32]
            masks, trace = model(feats)
            if kind == "pit":
                loss, _ = pit_loss(masks, data.refmags[lo : lo + 32], feats)
            else:
                t_masks, t_trace = teacher(feats)
                loss = ts_loss(masks, t_masks, feats)
                if kind == "lts":
                    loss = lts_loss(trace, t_trace, map_spec, projections, loss)
            total += loss.item() * feats.shape[0]
            count += feats.shape[0]
    model.train()
    return total / max(count, 1)


def _train_loop(
    mode: str,
    student: MaskEstimator,
    data: SegmentSet,
    optim_cfg: OptimConfig,
    schedule: ShiftSchedule | None,
    teacher: MaskEstimator | None,
    map_spec: LayerMapSpec | None,
    projections: ProjectionSet | None,
    start_step: int = 0,
    stop_step: int | None = None,
    resume_ckpt: Checkpoint | None = None,
    log_file: Path | None = None,
) -> tuple[list[dict], torch.optim.AdamW, list]:
    dtype = next(student.parameters()).dtype
    named = _named_params(student, projections)
    optimizer = torch.optim.AdamW(
        [p for _, p in named],
        lr=optim_cfg.peak_lr,
        betas=(0.9, 0.999),
        eps=1e-8,
        weight_decay=optim_cfg.weight_decay,
    )
    if resume_ckpt is not None:
        _restore_optimizer(optimizer, named, resume_ckpt, dtype)
    if teacher is not None:
        teacher.eval()
        teacher.requires_grad_(False)
    student.train()

    history: list[dict] = []
    log_fh = open(log_file, "a") if log_file is not None else None
    stop = stop_step if stop_step is not None else optim_cfg.total_steps
    try:
        for step in range(start_step, stop):
            lr = lr_at(step, optim_cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            idx = torch.from_numpy(
                batch_indices(optim_cfg.seed, step, data.size, optim_cfg.batch_size)
            )
            feats = data.feats[idx]
            record: dict = {"step": step, "lr": lr}

            masks, trace = student(feats)
            if mode in ("teacher", "baseline"):
                total, _ = pit_loss(masks, data.refmags[idx], feats)
                record["pit"] = total.item()
            else:
                with torch.no_grad():
                    masks_tea, trace_tea = teacher(feats)
                ts = ts_loss(masks, masks_tea, feats)
                record["ts"] = ts.item()
                if mode == "vanilla_ts":
                    total = ts
                elif mode in ("lts", "lts_os"):
                    lts, terms = lts_loss(
                        trace, trace_tea, map_spec, projections, ts, return_terms=True
                    )
                    for i, term in enumerate(terms):
                        record[f"layer_{i}"] = term.item()
                    record["lts"] = lts.item()
                    total = lts
                if mode in ("os", "lts_os"):
                    pit, _ = pit_loss(masks, data.refmags[idx], feats)
                    record["pit"] = pit.item()
                    teacher_side = ts if mode == "os" else total
                    record["lambda"] = lambda_weight(step, schedule)
                    total = combined_loss(pit, teacher_side, step, schedule)

            record["total"] = total.item()
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            history.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
    finally:
        if log_fh is not None:
            log_fh.close()
    return history, optimizer, named


def run(
    manifest: RunManifest,
    resume: str | Path | None = None,
    stop_step: int | None = None,
) -> TrainResult:
    """Execute one training run per the manifest and write a checkpoint.

    ``resume`` continues a previous run of the same manifest from its
    saved step, reproducing the uninterrupted trajectory; ``stop_step``
    pauses early (the checkpoint then records that step).
    """
    manifest.validate()
    if manifest.mode == "unlabeled_lts_os":
        if resume is not None or stop_step is not None:
            raise ValueError("resume/stop_step are per-stage; run stages directly")
        return _run_two_stage(manifest)
    if manifest.mode in ("os", "lts_os") and manifest.schedule is None:
        manifest = replace(manifest, schedule=desk_schedule(manifest.optim.total_steps))
    dtype = _DTYPES[manifest.dtype]

    needs_refs = manifest.mode in ("teacher", "baseline", "os", "lts_os")
    corpus = _resolve_corpus(
        manifest.labeled_corpus
        if manifest.labeled_corpus is not None
        else manifest.unlabeled_corpus
    )
    train_set, val_set = split_validation(corpus, manifest.optim.seed, manifest.val_fraction)

    teacher = None
    map_spec = None
    projections = None
    if manifest.mode in ("vanilla_ts", "lts", "os", "lts_os"):
        teacher = _model_from_checkpoint(load_checkpoint(manifest.teacher_checkpoint), dtype)

    start_step = 0
    resume_ckpt = None
    if resume is not None:
        resume_ckpt = load_checkpoint(resume)
        student = _model_from_checkpoint(resume_ckpt, dtype)
        start_step = resume_ckpt.step
    elif manifest.student_init is not None:
        init_ckpt = load_checkpoint(manifest.student_init)
        student = _model_from_checkpoint(init_ckpt, dtype)
    else:
        student = build_model(manifest.model, manifest.optim.seed, dtype)

    if manifest.mode in ("lts", "lts_os"):
        map_spec = LayerMapSpec(
            manifest.layer_map_variant,
            student.config.num_layers,
            teacher.config.num_layers,
        )
        projections = build_projections(
            student.config.num_layers,
            student.config.attn_dim,
            teacher.config.attn_dim,
            manifest.optim.seed + 1,
            dtype,
        )
        source = resume_ckpt or (
            load_checkpoint(manifest.student_init) if manifest.student_init else None
        )
        if source is not None and any(k.startswith("proj.") for k in source.tensors):
            projections.load_state_dict(
                {k: v.to(dtype) for k, v in source.state_dict("proj.").items()}
            )

    num_sources = student.config.num_outputs
    data = prepare_segments(
        train_set, manifest.stft, manifest.segment_frames, num_sources, dtype
    )
    val_data = prepare_segments(
        val_set, manifest.stft, manifest.segment_frames, num_sources, dtype
    ) if val_set else None

    out_dir = Path(manifest.checkpoint_dir) if manifest.checkpoint_dir else None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{manifest.mode}_manifest.json").write_text(manifest.to_json())
        log_file = out_dir / f"{manifest.mode}_log.jsonl"
        if start_step == 0 and log_file.exists():
            log_file.unlink()

    history, optimizer, named = _train_loop(
        manifest.mode,
        student,
        data,
        manifest.optim,
        manifest.schedule,
        teacher,
        map_spec,
        projections,
        start_step=start_step,
        stop_step=stop_step,
        resume_ckpt=resume_ckpt,
        log_file=log_file,
    )

    val_loss = float("nan")
    if val_data is not None:
        val_kind = "pit" if needs_refs else ("lts" if manifest.mode == "lts" else "ts")
        val_loss = _eval_loss(
            student, val_data, val_kind, teacher, map_spec, projections
        )

    ckpt_path = None
    if out_dir is not None:
        ckpt_path = _save_run(
            out_dir / f"{manifest.mode}.ckpt",
            student,
            projections,
            optimizer,
            named,
            step=stop_step if stop_step is not None else manifest.optim.total_steps,
            extra={"mode": manifest.mode, "val_loss": val_loss},
        )
    return TrainResult(ckpt_path, history, val_loss)


def _run_two_stage(manifest: RunManifest) -> TrainResult:
    """Unlabeled layer-wise pretraining, then objective-shifted training."""
    if manifest.checkpoint_dir is None:
        raise ValueError("mode unlabeled_lts_os requires checkpoint_dir")
    out_dir = Path(manifest.checkpoint_dir)
    stage1_total = manifest.stage1_steps or manifest.optim.total_steps
    stage1 = replace(
        manifest,
        mode="lts",
        labeled_corpus=None,
        optim=replace(
            manifest.optim,
            total_steps=stage1_total,
            warmup_steps=min(manifest.optim.warmup_steps, max(1, stage1_total - 1)),
        ),
        checkpoint_dir=str(out_dir / "stage1"),
    )
    r1 = run(stage1)
    stage2 = replace(
        manifest,
        mode="lts_os",
        student_init=str(r1.checkpoint),
        checkpoint_dir=str(out_dir),
    )
    r2 = run(stage2)
    final = out_dir / "unlabeled_lts_os.ckpt"
    r2.checkpoint.replace(final)
    return TrainResult(final, r1.history + r2.history, r2.val_loss)


def train_teacher(manifest: RunManifest) -> TrainResult:
    if manifest.mode != "teacher":
        manifest = replace(manifest, mode="teacher")
    return run(manifest)


def train_baseline(manifest: RunManifest) -> TrainResult:
    if manifest.mode != "baseline":
        manifest = replace(manifest, mode="baseline")
    return run(manifest)


def distill_stage1(
    manifest: RunManifest, teacher_checkpoint: str | Path | None = None
) -> TrainResult:
    """Layer-wise pretraining on unlabeled data; no references are read."""
    manifest = replace(
        manifest,
        mode="lts",
        labeled_corpus=None,
        teacher_checkpoint=str(teacher_checkpoint or manifest.teacher_checkpoint),
    )
    return run(manifest)


def distill_stage2(
    manifest: RunManifest,
    teacher_checkpoint: str | Path | None = None,
    student_init: str | Path | None = None,
) -> TrainResult:
    """Objective-shifted distillation on labeled data."""
    manifest = replace(
        manifest,
        mode="lts_os",
        teacher_checkpoint=str(teacher_checkpoint or manifest.teacher_checkpoint),
        student_init=str(student_init) if student_init else manifest.student_init,
    )
    return run(manifest)
