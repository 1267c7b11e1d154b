"""Alternating adversarial training, checkpointing and cohort evaluation."""

from __future__ import annotations

import csv
import enum
import logging
import math
import warnings
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import dosimetry
from .arch import (
    CHANNEL_LAYOUT,
    ArchConfig,
    advnet_forward,
    init_advnet,
    init_prenet,
    prenet_forward,
)
from .dosimetry import MetricReport, Volume
from .losses import (
    LossReport,
    LossWeights,
    deep_supervision_terms,
    discriminator_loss,
    generator_adversarial_loss,
    generator_loss,
    smooth_l1_loss,
    total_generator_loss,
)
from .persist import load_checkpoint, save_checkpoint
from .phantom import Sample
from .tensor import Tensor, add, avgpool2x, no_grad

logger = logging.getLogger(__name__)


class Arm(enum.Enum):
    UNET = "unet"
    AUNET = "aunet"
    RAUNET = "raunet"
    FULL = "full"


class ArmSettings(NamedTuple):
    attention_enabled: bool
    residual_enabled: bool
    lambda2: float
    ds_scales: int


def ablation_arm(arm: Arm | str) -> ArmSettings:
    """Switches for each rung of the ablation ladder.

    Every arm keeps deep supervision; RAU-Net supervises only the finest
    auxiliary scale while the full model uses all three.
    """
    arm = Arm(arm)
    return {
        Arm.UNET: ArmSettings(False, False, 0.0, 3),
        Arm.AUNET: ArmSettings(False, False, 1.0, 3),
        Arm.RAUNET: ArmSettings(True, True, 1.0, 1),
        Arm.FULL: ArmSettings(True, True, 1.0, 3),
    }[arm]


@dataclass(frozen=True)
class TrainConfig:
    arch: ArchConfig = field(default_factory=ArchConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    ablation: Arm = Arm.FULL
    lr: float = 1e-3
    batch_size: int = 2
    steps: int | None = None
    epochs: int | None = None
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "ablation", Arm(self.ablation))
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size}")

    @classmethod
    def paper_scale(cls, **overrides) -> TrainConfig:
        """Hyper-parameters as published: lr 1e-5, batch 16, 100 epochs, 512x512 inputs."""
        base = dict(arch=ArchConfig(input_size=512), lr=1e-5, batch_size=16, epochs=100)
        base.update(overrides)
        return cls(**base)

    def resolved_arch(self) -> ArchConfig:
        s = ablation_arm(self.ablation)
        ds = min(s.ds_scales, self.arch.depth)
        return replace(self.arch, attention_enabled=s.attention_enabled,
                       residual_enabled=s.residual_enabled, ds_scales=ds)

    def resolved_weights(self) -> LossWeights:
        s = ablation_arm(self.ablation)
        return replace(self.weights, lambda2=self.weights.lambda2 if s.lambda2 > 0 else 0.0)


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, last_report: LossReport | None):
        super().__init__(f"non-finite loss at step {step}; last finite report: {last_report}")
        self.step = step
        self.last_report = last_report


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, params: dict[str, Tensor]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainState:
    gen: dict[str, Tensor]
    disc: dict[str, Tensor]
    gen_opt: Adam
    disc_opt: Adam
    step: int = 0
    history: list[LossReport] = field(default_factory=list)


def init_state(cfg: TrainConfig) -> TrainState:
    arch = cfg.resolved_arch()
    gen = init_prenet(arch, seed=cfg.seed)
    disc = init_advnet(arch, seed=cfg.seed + 1)
    return TrainState(
        gen=gen, disc=disc,
        gen_opt=Adam(gen, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps),
        disc_opt=Adam(disc, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps),
    )


# ---------------------------------------------------------------- data


def sample_slices(sample: Sample, prescription: float, in_channels: int = 7) -> tuple[np.ndarray, np.ndarray]:
    """Per-z 2D inputs [D, C, H, W] and normalized dose targets [D, 1, H, W]."""
    d, h, w = sample.ct.shape
    by_label = {m.label: m.values for m in sample.masks}
    chans = [sample.ct.values]
    for label in CHANNEL_LAYOUT[1:in_channels]:
        chans.append(by_label.get(label, np.zeros((d, h, w), dtype=np.uint8)).astype(np.float32))
    x = np.stack(chans, axis=1).astype(np.float32)
    y = (sample.dose.values / np.float32(prescription)).astype(np.float32)[:, None]
    return x, y


def build_slices(samples: Sequence[Sample], prescription: float, in_channels: int = 7):
    xs, ys = zip(*(sample_slices(s, prescription, in_channels) for s in samples))
    return np.concatenate(xs), np.concatenate(ys)


def batch_indices(step: int, n: int, batch_size: int, seed: int) -> np.ndarray:
    """Slice indices for a 0-based step; each epoch is a seeded permutation."""
    take = min(batch_size, n)
    per_epoch = max(1, n // take)
    epoch, b = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return perm[b * take:(b + 1) * take]


def downsampled_targets(y: np.ndarray, scales: int) -> list[np.ndarray]:
    """Ground truth averaged over 2x2 blocks i times, i = 1..scales."""
    out = []
    cur = Tensor(y)
    with no_grad():
        for _ in range(scales):
            cur = avgpool2x(cur)
            out.append(cur.data)
    return out


# ---------------------------------------------------------------- training


def _zero(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def train_step(state: TrainState, x: np.ndarray, y: np.ndarray, cfg: TrainConfig) -> LossReport:
    """One discriminator update on detached fakes, then one generator update."""
    arch = cfg.resolved_arch()
    w = cfg.resolved_weights()
    xt, yt = Tensor(x), Tensor(y)
    targets = [Tensor(t) for t in downsampled_targets(y, arch.ds_scales)]

    out = prenet_forward(xt, arch, state.gen)
    adversarial = w.lambda2 > 0

    l_adv_d = 0.0
    if adversarial:
        _zero(state.disc)
        loss_d = discriminator_loss(advnet_forward(yt, xt, state.disc, arch.slope),
                                    advnet_forward(out.final.detach(), xt, state.disc, arch.slope))
        if not math.isfinite(loss_d.item()):
            raise TrainingDivergedError(state.step + 1, state.history[-1] if state.history else None)
        loss_d.backward()
        state.disc_opt.step(state.disc)
        l_adv_d = loss_d.item()

    l_final = smooth_l1_loss(out.final, yt, w.delta)
    terms = deep_supervision_terms(out.heads, targets)
    l_ds = terms[0]
    for t in terms[1:]:
        l_ds = add(l_ds, t)
    if adversarial:
        l_adv_g = generator_adversarial_loss(advnet_forward(out.final, xt, state.disc, arch.slope))
    else:
        l_adv_g = Tensor(np.zeros((), dtype=x.dtype))
    total = total_generator_loss(l_final, l_ds, l_adv_g, w)
    if not math.isfinite(total.item()):
        raise TrainingDivergedError(state.step + 1, state.history[-1] if state.history else None)

    _zero(state.gen)
    total.backward()
    state.gen_opt.step(state.gen)
    _zero(state.disc)
    _zero(state.gen)

    state.step += 1
    report = LossReport(
        total=total.item(),
        l_g=generator_loss(l_final, l_ds, w).item(),
        l_final=l_final.item(),
        l_ds=l_ds.item(),
        l_adv_g=l_adv_g.item(),
        l_adv_d=l_adv_d,
        ds_terms=[t.item() for t in terms],
    )
    state.history.append(report)
    return report


LOG_HEADER = ("step",) + LossReport.FIELDS


class LossLog:
    """CSV loss log; floats use repr so a re-read is bit-exact."""

    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        if not append or not self.path.exists():
            self.path.write_text(",".join(LOG_HEADER) + "\n", encoding="utf-8")

    def write(self, step: int, report: LossReport) -> None:
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(",".join([str(step)] + [repr(float(v)) for v in report.as_row()]) + "\n")

    @staticmethod
    def read(path) -> list[dict[str, str]]:
        with open(path, encoding="utf-8", newline="") as fh:
            return list(csv.DictReader(fh))


def total_steps(cfg: TrainConfig, n_slices: int) -> int:
    if cfg.steps is not None:
        return cfg.steps
    take = min(cfg.batch_size, n_slices)
    per_epoch = max(1, n_slices // take)
    return (cfg.epochs or 1) * per_epoch


def fit(state: TrainState, cfg: TrainConfig, inputs: np.ndarray, targets: np.ndarray,
        log: LossLog | None = None, checkpoint: Callable[[TrainState], None] | None = None,
        checkpoint_every: int = 0, stop_at: int | None = None) -> TrainState:
    """Run steps from ``state.step`` up to the configured total (or ``stop_at``)."""
    end = total_steps(cfg, len(inputs))
    if stop_at is not None:
        end = min(end, stop_at)
    while state.step < end:
        idx = batch_indices(state.step, len(inputs), cfg.batch_size, cfg.seed)
        report = train_step(state, inputs[idx], targets[idx], cfg)
        if log is not None:
            log.write(state.step, report)
        if state.step % 50 == 0:
            logger.info("step %d total=%.5f l_final=%.5f", state.step, report.total, report.l_final)
        if checkpoint is not None and checkpoint_every and state.step % checkpoint_every == 0:
            checkpoint(state)
    if checkpoint is not None:
        checkpoint(state)
    return state


# ---------------------------------------------------------------- checkpoints

_ARCH_FIELDS = ("in_channels", "base_channels", "depth", "ds_scales", "attention_enabled",
                "residual_enabled", "input_size", "disc_channels")


def state_tensors(state: TrainState, arch: ArchConfig, prescription: float | None = None) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for prefix, params, opt in (("gen", state.gen, state.gen_opt), ("disc", state.disc, state.disc_opt)):
        for k, p in params.items():
            out[f"{prefix}/{k}"] = p.data
        for k in params:
            out[f"opt.{prefix}.m/{k}"] = opt.m[k]
            out[f"opt.{prefix}.v/{k}"] = opt.v[k]
        out[f"meta/opt.{prefix}.t"] = np.array([opt.t])
    out["meta/step"] = np.array([state.step])
    for name in _ARCH_FIELDS:
        out[f"meta/arch.{name}"] = np.array([int(getattr(arch, name))])
    if prescription is not None:
        out["meta/prescription_gy"] = np.array([prescription])
    return out


def arch_from_tensors(tensors: dict[str, np.ndarray]) -> ArchConfig:
    kwargs = {}
    for f in fields(ArchConfig):
        key = f"meta/arch.{f.name}"
        if key in tensors:
            val = int(tensors[key][0])
            kwargs[f.name] = bool(val) if f.name.endswith("enabled") else val
    return ArchConfig(**kwargs)


def save_state(path, state: TrainState, arch: ArchConfig, prescription: float | None = None) -> None:
    save_checkpoint(path, state_tensors(state, arch, prescription))


def load_state(path, cfg: TrainConfig) -> tuple[TrainState, ArchConfig, float | None]:
    tensors = load_checkpoint(path)
    arch = arch_from_tensors(tensors)
    state = init_state(replace(cfg, arch=arch))
    for prefix, params, opt in (("gen", state.gen, state.gen_opt), ("disc", state.disc, state.disc_opt)):
        for k, p in params.items():
            key = f"{prefix}/{k}"
            if key not in tensors:
                raise KeyError(f"checkpoint {path} lacks tensor {key!r}")
            p.data = tensors[key]
            if f"opt.{prefix}.m/{k}" in tensors:
                opt.m[k] = tensors[f"opt.{prefix}.m/{k}"]
                opt.v[k] = tensors[f"opt.{prefix}.v/{k}"]
        opt.t = int(tensors.get(f"meta/opt.{prefix}.t", [0])[0])
    state.step = int(tensors.get("meta/step", [0])[0])
    presc = tensors.get("meta/prescription_gy")
    return state, arch, (float(presc[0]) if presc is not None else None)


def load_generator(path) -> tuple[dict[str, Tensor], ArchConfig, float | None]:
    tensors = load_checkpoint(path)
    arch = arch_from_tensors(tensors)
    gen = {k[len("gen/"):]: Tensor(v) for k, v in tensors.items() if k.startswith("gen/")}
    presc = tensors.get("meta/prescription_gy")
    return gen, arch, (float(presc[0]) if presc is not None else None)


# ---------------------------------------------------------------- inference & evaluation


def predict_volume(gen: dict[str, Tensor], arch: ArchConfig, sample: Sample, prescription: float,
                   batch_size: int = 4) -> Volume:
    """Slice-wise prediction reassembled into a clamped dose volume in Gy."""
    x, _ = sample_slices(sample, prescription, arch.in_channels)
    outs = []
    with no_grad():
        for i in range(0, len(x), batch_size):
            outs.append(prenet_forward(Tensor(x[i:i + batch_size]), arch, gen).final.data[:, 0])
    pred = np.concatenate(outs).astype(np.float64) * prescription
    return Volume(np.maximum(pred, 0.0).astype(np.float32), sample.dose.spacing_mm)


APE_METRICS = (("D95", "d95"), ("D50", "d50"), ("Dmean", "d_mean"))


@dataclass
class Evaluation:
    truth: list[MetricReport]
    predicted: list[MetricReport]
    ape: dict[str, tuple[float, float]]


def cohort_ape(truth: Sequence[MetricReport], predicted: Sequence[MetricReport],
               structure: str = "ptv") -> dict[str, tuple[float, float]]:
    """(APE, std of per-case percent errors) for D95, D50 and Dmean of one structure.

    A zero predicted value leaves the percent error undefined; that row is
    reported as NaN with a warning rather than aborting the table.
    """
    table = {}
    for name, attr in APE_METRICS:
        t = [getattr(r.structures[structure], attr) for r in truth]
        p = [getattr(r.structures[structure], attr) for r in predicted]
        try:
            terms = dosimetry.ape_terms(t, p)
        except ZeroDivisionError:
            warnings.warn(f"{name}: a predicted value is 0 Gy, APE undefined", RuntimeWarning, stacklevel=2)
            table[name] = (math.nan, math.nan)
            continue
        table[name] = (dosimetry.ape(t, p), float(np.std(terms)))
    return table


def evaluate(gen: dict[str, Tensor] | None, arch: ArchConfig, samples: Sequence[Sample], prescription: float,
             vx: float = 50.0, predictions: Sequence[Volume] | None = None) -> Evaluation:
    """Metrics for every sample and the cohort APE table.

    ``predictions`` overrides the network (e.g. to score the ground truth against itself).
    """
    if not samples:
        raise ValueError("evaluation split is empty")
    truth, pred = [], []
    for i, s in enumerate(samples):
        vol = predictions[i] if predictions is not None else predict_volume(gen, arch, s, prescription)
        truth.append(dosimetry.evaluate_structures(s.dose, s.masks, prescription, vx, sample=s.sample_id))
        pred.append(dosimetry.evaluate_structures(vol, s.masks, prescription, vx, sample=s.sample_id))
    return Evaluation(truth, pred, cohort_ape(truth, pred))
