"""Three-stage knowledge distillation from a teacher pair into prefix students.

Stage 1 matches the early teacher snapshot, stage 2 blends the early and the
final teacher with a shift weight that decays from 1 to 0, and stage 3 matches
the final teacher. All stages use temperature-softened KL divergence with the
student distribution as the weighting term; ``weighting="teacher"`` switches to
the conventional KL(teacher || student).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn import LabeledSet, MicroNet, backward, evaluate_accuracy, forward, minibatches, sgd_step

KL_WEIGHTINGS = ("student", "teacher")


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""


def linear_shift(progress: float) -> float:
    return 1.0 - progress


def cosine_shift(progress: float) -> float:
    return 0.5 * (1.0 + math.cos(math.pi * progress))


SHIFT_SCHEDULES = {"linear": linear_shift, "cosine": cosine_shift}


@dataclass(frozen=True)
class DistillSchedule:
    temperature: float = 2.0
    stage_epochs: tuple[int, int, int] = (10, 10, 20)
    learning_rate: float = 0.001
    batch_size: int = 4
    shift: str = "linear"
    weighting: str = "student"

    def validate(self) -> list[str]:
        errors = []
        if not self.temperature > 0:
            errors.append("distill.temperature must be > 0")
        if len(self.stage_epochs) != 3 or any(e < 0 for e in self.stage_epochs):
            errors.append("distill.stage_epochs must be three non-negative counts")
        if self.learning_rate < 0:
            errors.append("distill.learning_rate must be >= 0")
        if self.batch_size < 1:
            errors.append("distill.batch_size must be >= 1")
        if self.shift not in SHIFT_SCHEDULES:
            errors.append(f"distill.shift must be one of {sorted(SHIFT_SCHEDULES)}")
        if self.weighting not in KL_WEIGHTINGS:
            errors.append(f"distill.weighting must be one of {list(KL_WEIGHTINGS)}")
        return errors

    def alpha(self, epoch: int) -> float:
        """Shift weight for a stage-2 epoch; 1 at the first epoch, 0 at the last."""
        n = self.stage_epochs[1]
        progress = epoch / (n - 1) if n > 1 else 0.0
        return SHIFT_SCHEDULES[self.shift](progress)


@dataclass
class TeacherPair:
    initial: MicroNet
    final: MicroNet
    initial_accuracy: float
    final_accuracy: float

    @classmethod
    def from_nets(cls, initial: MicroNet, final: MicroNet, val: LabeledSet) -> TeacherPair:
        if initial.architecture_id != final.architecture_id:
            raise ValueError("teacher snapshots must share one architecture")
        acc_init = evaluate_accuracy(initial, val)
        acc_final = evaluate_accuracy(final, val)
        if acc_final < acc_init:
            raise ValueError(f"final teacher ({acc_final:.4f}) is less accurate than its "
                             f"warmup snapshot ({acc_init:.4f})")
        return cls(initial, final, acc_init, acc_final)


def _log_softened(logits: np.ndarray, temperature: float) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softened_distribution(logits: np.ndarray, temperature: float) -> np.ndarray:
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    return np.exp(_log_softened(logits, temperature))


def kl_loss_and_grad(student_logits, teacher_logits, temperature: float,
                     weighting: str = "student") -> tuple[float, np.ndarray]:
    """Batch-mean softened KL and its gradient w.r.t. the student logits."""
    s_logits = np.atleast_2d(np.asarray(student_logits, dtype=np.float64))
    t_logits = np.atleast_2d(np.asarray(teacher_logits, dtype=np.float64))
    if s_logits.shape != t_logits.shape:
        raise ValueError(f"logit shapes differ: {s_logits.shape} vs {t_logits.shape}")
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    if not (np.all(np.isfinite(s_logits)) and np.all(np.isfinite(t_logits))):
        raise ValueError("logits must be finite")
    n = s_logits.shape[0]
    log_s = _log_softened(s_logits, temperature)
    log_t = _log_softened(t_logits, temperature)
    s = np.exp(log_s)
    if weighting == "student":
        # sum_i s_i log(s_i / t_i); d/dz_j = s_j (r_j - L) / T
        ratio = log_s - log_t
        per_sample = (s * ratio).sum(axis=1)
        grad = s * (ratio - per_sample[:, None]) / temperature
    elif weighting == "teacher":
        t = np.exp(log_t)
        per_sample = (t * (log_t - log_s)).sum(axis=1)
        grad = (s - t) / temperature
    else:
        raise ValueError(f"unknown KL weighting {weighting!r}")
    # rounding can leave tiny negatives at equality
    loss = max(float(per_sample.mean()), 0.0)
    return loss, grad / n


def kl_loss(student_logits, teacher_logits, temperature: float, weighting: str = "student") -> float:
    return kl_loss_and_grad(student_logits, teacher_logits, temperature, weighting)[0]


def transitional_loss_and_grad(student_logits, initial_logits, final_logits, alpha: float,
                               temperature: float, weighting: str = "student"):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"shift weight must lie in [0, 1], got {alpha}")
    l_init, g_init = kl_loss_and_grad(student_logits, initial_logits, temperature, weighting)
    l_final, g_final = kl_loss_and_grad(student_logits, final_logits, temperature, weighting)
    return alpha * l_init + (1.0 - alpha) * l_final, alpha * g_init + (1.0 - alpha) * g_final


def transitional_loss(student_logits, initial_logits, final_logits, alpha: float,
                      temperature: float, weighting: str = "student") -> float:
    return transitional_loss_and_grad(student_logits, initial_logits, final_logits, alpha,
                                      temperature, weighting)[0]


def build_student(teacher: MicroNet, n_distilled: int, rng: np.random.Generator) -> MicroNet:
    """Copy the teacher's stem and first ``n_distilled`` blocks; the head is freshly initialised."""
    if not 1 <= n_distilled <= teacher.n_blocks:
        raise ValueError(f"n_distilled must lie in [1, {teacher.n_blocks}], got {n_distilled}")
    student = MicroNet.init(teacher.input_dim, teacher.width, n_distilled, teacher.classes, rng)
    for name, _, _ in student.shapes:
        if name == "head":
            continue
        w, b = student.layer(name)
        tw, tb = teacher.layer(name)
        w[...] = tw
        b[...] = tb
    return student


@dataclass
class DistillTrace:
    """Per-epoch mean losses for each stage plus stage-3 loss before and after training."""

    stage_losses: list[list[float]] = field(default_factory=lambda: [[], [], []])
    alphas: list[float] = field(default_factory=list)
    initial_final_kl: float = float("nan")
    final_final_kl: float = float("nan")

    @property
    def total_loss(self) -> float:
        return float(sum(sum(stage) for stage in self.stage_losses))

    def rows(self):
        for stage, losses in enumerate(self.stage_losses, start=1):
            for epoch, loss in enumerate(losses):
                yield stage, epoch, loss


def train_three_stage(student: MicroNet, teachers: TeacherPair, data: LabeledSet,
                      schedule: DistillSchedule, rng: np.random.Generator) -> tuple[MicroNet, DistillTrace]:
    """Run stages 1-3 in order with minibatch SGD; returns the trained copy and its loss trace."""
    errors = schedule.validate()
    if errors:
        raise ValueError("; ".join(errors))
    if student.input_dim != teachers.final.input_dim or student.classes != teachers.final.classes:
        raise ValueError("student and teacher disagree on input or class dimension")
    net = student.copy()
    temp, weighting = schedule.temperature, schedule.weighting
    z_init = forward(teachers.initial, data.inputs).logits
    z_final = forward(teachers.final, data.inputs).logits
    trace = DistillTrace()
    trace.initial_final_kl = kl_loss(forward(net, data.inputs).logits, z_final, temp, weighting)

    def epoch_pass(stage: int, alpha: float):
        losses = []
        for idx in minibatches(len(data), schedule.batch_size, rng):
            fp = forward(net, data.inputs[idx])
            if stage == 1:
                loss, dlogits = kl_loss_and_grad(fp.logits, z_init[idx], temp, weighting)
            elif stage == 2:
                loss, dlogits = transitional_loss_and_grad(fp.logits, z_init[idx], z_final[idx],
                                                           alpha, temp, weighting)
            else:
                loss, dlogits = kl_loss_and_grad(fp.logits, z_final[idx], temp, weighting)
            if not np.isfinite(loss):
                raise DivergenceError(f"stage {stage} loss became non-finite")
            losses.append(loss)
            net.params = sgd_step(net.params, backward(net, fp, dlogits), schedule.learning_rate)
        if not np.all(np.isfinite(net.params)):
            raise DivergenceError(f"stage {stage} produced non-finite parameters")
        trace.stage_losses[stage - 1].append(float(np.mean(losses)))

    e1, e2, e3 = schedule.stage_epochs
    for _ in range(e1):
        epoch_pass(1, 1.0)
    for epoch in range(e2):
        alpha = schedule.alpha(epoch)
        trace.alphas.append(alpha)
        epoch_pass(2, alpha)
    for _ in range(e3):
        epoch_pass(3, 0.0)
    trace.final_final_kl = kl_loss(forward(net, data.inputs).logits, z_final, temp, weighting)
    return net, trace
