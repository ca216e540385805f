"""Weighted two-task loss, GradNorm loss-weight balancing and soft-target distillation.

GradNorm keeps the gradient norm each weighted task loss induces on a shared
layer close to a common target, the mean norm scaled by the task's relative
inverse training rate raised to ``alpha``. Weights move by a sign step on the
L1 gap between actual and target norms; targets are held constant during the
step, and weights are renormalised to sum to the number of tasks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mcgcn import autodiff as ad

TASKS = ("morphology", "distribution")
WEIGHT_FLOOR = 1e-4


@dataclass
class TaskLosses:
    L_m: object
    L_d: object

    def values(self) -> np.ndarray:
        return np.array([_as_float(self.L_m), _as_float(self.L_d)])


def _as_float(x) -> float:
    return float(x.data) if isinstance(x, ad.Tensor) else float(x)


@dataclass
class GradNormState:
    w: np.ndarray = field(default_factory=lambda: np.ones(2))
    alpha: float = 1.5
    weight_lr: float = 0.025
    shared_layer: str = "fusion.weight"
    L0: np.ndarray | None = None

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64).copy()
        if np.any(self.w <= 0):
            raise ValueError("task weights must be positive")

    @property
    def total(self) -> float:
        return float(len(self.w))

    def record_initial(self, losses) -> None:
        """Capture L_i(0). Later calls are ignored."""
        if self.L0 is not None:
            return
        L0 = np.asarray(losses.values() if isinstance(losses, TaskLosses) else losses, dtype=np.float64)
        if np.any(L0 <= 0):
            raise ValueError(f"initial task losses must be positive, got {L0.tolist()}")
        self.L0 = L0.copy()
        self.L0.setflags(write=False)


def multitask_loss(losses: TaskLosses, w):
    """w_m * L_m + w_d * L_d; tensors in, tensor out, floats in, float out."""
    w = np.asarray(w, dtype=np.float64)
    if np.any(w <= 0):
        raise ValueError("task weights must be positive")
    if isinstance(losses.L_m, ad.Tensor):
        return ad.add(ad.scalar_mul(losses.L_m, w[0]), ad.scalar_mul(losses.L_d, w[1]))
    return float(w[0] * losses.L_m + w[1] * losses.L_d)


def task_gradient_norms(tape: ad.Tape, losses: TaskLosses, w, shared_layer: ad.Tensor) -> np.ndarray:
    """(G_m, G_d): L2 norm of the gradient of w_i * L_i with respect to the shared layer."""
    w = np.asarray(w, dtype=np.float64)
    norms = []
    for wi, loss in zip(w, (losses.L_m, losses.L_d)):
        try:
            g = ad.backward(tape, loss, wrt=[shared_layer], strict=True)[shared_layer]
        except ad.DisconnectedError as exc:
            raise ValueError("shared layer is not used by every task loss") from exc
        norms.append(wi * np.linalg.norm(g))
    return np.array(norms)


def gradnorm_targets(G, L, state: GradNormState) -> np.ndarray:
    """mean(G) * r_i ** alpha with r_i the loss ratio L_i / L_i(0) over its task mean."""
    if state.L0 is None:
        raise ValueError("initial losses not recorded")
    G = np.asarray(G, dtype=np.float64)
    L = np.asarray(L, dtype=np.float64)
    if np.any(L <= 0):
        raise ValueError("current losses must be positive")
    ratio = L / state.L0
    r = ratio / ratio.mean()
    return G.mean() * r**state.alpha


def gradnorm_loss(G, targets) -> float:
    return float(np.abs(np.asarray(G) - np.asarray(targets)).sum())


def project_weights(w, total: float = 2.0, floor: float = WEIGHT_FLOOR) -> np.ndarray:
    """Rescale to sum ``total`` with every entry at least ``floor``."""
    w = np.asarray(w, dtype=np.float64)
    w = np.maximum(w, 0.0)
    if w.sum() <= 0:
        return np.full(len(w), total / len(w))
    w = w * (total / w.sum())
    low = w < floor
    while np.any(low):
        rest = total - floor * low.sum()
        free = w * ~low
        w = np.where(low, floor, free * (rest / free.sum()))
        new_low = w < floor
        if not np.any(new_low & ~low):
            break
        low |= new_low
    return w


def gradnorm_update(state: GradNormState, G, targets) -> np.ndarray:
    """One sign-gradient step on L_grad over the task weights; updates ``state.w``.

    d G_i / d w_i = G_i / w_i because G_i is linear in w_i.
    """
    G = np.asarray(G, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    dL = np.sign(G - targets) * G / state.w
    state.w = project_weights(state.w - state.weight_lr * dL, state.total)
    return state.w.copy()


def distill_loss(student_logits: ad.Tensor, teacher_logits, temperature: float) -> ad.Tensor:
    """T^2 times the cross-entropy of softened student against softened teacher."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    teacher = np.asarray(teacher_logits.data if isinstance(teacher_logits, ad.Tensor) else teacher_logits, dtype=np.float64)
    if teacher.shape != student_logits.shape:
        raise ad.ShapeError("distill_loss", student_logits.shape, teacher.shape)
    z = teacher / temperature
    z = z - z.max(axis=1, keepdims=True)
    soft = np.exp(z)
    soft /= soft.sum(axis=1, keepdims=True)
    ce = ad.cross_entropy(ad.scalar_mul(student_logits, 1.0 / temperature), soft)
    return ad.scalar_mul(ce, temperature * temperature)
