"""Feature-space adversarial samples: FGSM, gradient-scaled PGD and their k-step variants.

All attacks ascend the classifier's cross-entropy loss for the given labels and
project every iterate back into a per-feature box of admissible values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError
from .nn import MlpModel, backward, cross_entropy, forward


@dataclass(frozen=True)
class ProjectionBox:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        if self.lo.shape != self.hi.shape or np.any(self.lo > self.hi):
            raise ValueError("projection box needs lo <= hi with matching shapes")

    def contains(self, x: np.ndarray) -> bool:
        return bool(np.all((x >= self.lo) & (x <= self.hi)))


@dataclass(frozen=True)
class AttackConfig:
    method: str = "fgsm"
    epsilon: float = 0.1
    steps: int = 1

    def __post_init__(self):
        if self.method not in ("fgsm", "pgd"):
            raise ValueError(f"unknown attack method {self.method!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


def fit_projection_box(X: np.ndarray) -> ProjectionBox:
    """Per-feature min/max over a (normalized) training pool."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("cannot fit a projection box on an empty pool")
    return ProjectionBox(X.min(axis=0), X.max(axis=0))


def project(box: ProjectionBox, x: np.ndarray) -> np.ndarray:
    return np.clip(x, box.lo, box.hi)


def input_gradient(model: MlpModel, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample gradient of the cross-entropy loss w.r.t. the inputs, taken in eval mode."""
    was_training = model.training
    model.eval()
    try:
        logits, trace = forward(model, x)
        _, g_logits = cross_entropy(logits, y, reduction="sum")
        _, gx = backward(model, trace, g_logits)
    finally:
        model.training = was_training
    if not np.all(np.isfinite(gx)):
        raise NumericalError("non-finite input gradient")
    return gx


def _within_ball(x: np.ndarray, stepped: np.ndarray, epsilon: float) -> np.ndarray:
    # x + eps can round one ulp past the ball; walk those coordinates back toward x
    out = stepped.copy()
    bad = np.abs(out - x) > epsilon
    while np.any(bad):
        out[bad] = np.nextafter(out[bad], x[bad])
        bad = np.abs(out - x) > epsilon
    return out


def fgsm(model: MlpModel, x: np.ndarray, y: np.ndarray, epsilon: float, box: ProjectionBox) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    g = input_gradient(model, x, y)
    return project(box, _within_ball(x, x + epsilon * np.sign(g), epsilon))


def pgd_step(model: MlpModel, x: np.ndarray, y: np.ndarray, epsilon: float, box: ProjectionBox) -> np.ndarray:
    g = input_gradient(model, x, y)
    return project(box, x + epsilon * g)


_STEPS = {"fgsm": fgsm, "pgd": pgd_step}


def multi_step(
    method: str,
    k: int,
    model: MlpModel,
    x: np.ndarray,
    y: np.ndarray,
    epsilon: float,
    box: ProjectionBox,
) -> np.ndarray:
    """Repeat the single-step attack k times, re-taking the gradient at each iterate."""
    if k < 1:
        raise ValueError("k must be >= 1")
    step = _STEPS[method]
    out = np.asarray(x, dtype=np.float64)
    for _ in range(k):
        out = step(model, out, y, epsilon, box)
    return out


def attack(config: AttackConfig, model: MlpModel, x: np.ndarray, y: np.ndarray, box: ProjectionBox) -> np.ndarray:
    return multi_step(config.method, config.steps, model, x, y, config.epsilon, box)
