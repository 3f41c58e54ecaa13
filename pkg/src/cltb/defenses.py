"""Adversarial-training defenses pluggable into any strategy's stage loop.

All three modes are deliberate approximations of published ideas and are
labeled "-like": inner-loop adversarial training (at-pgd), boundary-buffer
mixup (taba-like), and split logit distillation with a flatness surrogate
(flair-like). Reductions are exact: flair-like with zero weights is at-pgd,
and at-pgd with zero inner iterations is the undefended strategy, bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import models
from .attacks import AttackSpec, loss_and_input_grad, pgd
from .autodiff import Tensor
from .seeding import rng_for

DEFENSE_MODES = ("none", "at-pgd", "taba-like", "flair-like")

FLATNESS_FD_STEP = 1e-2  # pixel-space magnitude of the directional probe


class DefenseConfigError(ValueError):
    pass


@dataclass
class DefenseConfig:
    mode: str = "none"
    inner_epsilon: float = 0.3
    inner_iterations: int = 10
    inner_step_size: float | None = None
    boundary_capacity: int = 200
    mixup_alpha: float = 1.0       # Beta(alpha, alpha) mixing coefficient
    distill_weight: float = 1.0
    kd_temperature: float = 2.0
    flatness_weight: float = 0.01

    def __post_init__(self):
        if self.mode not in DEFENSE_MODES:
            raise DefenseConfigError(f"unknown defense mode {self.mode!r}")
        if self.inner_epsilon <= 0:
            raise DefenseConfigError("inner epsilon must be positive")
        if self.inner_iterations < 0:
            raise DefenseConfigError("inner iteration count must be >= 0")
        for name in ("mixup_alpha", "distill_weight", "kd_temperature",
                     "flatness_weight"):
            if getattr(self, name) < 0:
                raise DefenseConfigError(f"{name} must be non-negative")
        if self.boundary_capacity < 1:
            raise DefenseConfigError("boundary capacity must be >= 1")


@dataclass
class BoundaryRecord:
    stage: int
    label: int
    predicted: int


class DefenseRuntime:
    """Stateful hooks a strategy's training loop calls around each batch."""

    def __init__(self, cfg: DefenseConfig, master_seed: int):
        self.cfg = cfg
        self.rng = rng_for(master_seed, "defense")
        self.stage = 0
        self.boundary_images: list[np.ndarray] = []
        self.boundary_labels: list[int] = []
        self._boundary_next = 0
        self.insertion_trace: list[BoundaryRecord] = []

    def stage_begin(self, stage: int):
        self.stage = stage

    # -- hook 1: replace the batch with its inner-PGD version ---------------
    def transform_batch(self, model, x, y, seen) -> np.ndarray:
        if self.cfg.inner_iterations == 0:
            return x
        spec = AttackSpec(method="pgd", epsilon=self.cfg.inner_epsilon,
                          iterations=self.cfg.inner_iterations,
                          step_size=self.cfg.inner_step_size)
        x_adv = pgd(model, x, y, spec, seen)
        model.zero_grad()  # crafting gradients must not leak into the update
        return x_adv

    # -- hook 2: add defense loss terms to the strategy loss ----------------
    def augment_loss(self, loss: Tensor, model, prev_model, x_adv, y, seen,
                     current) -> Tensor:
        if self.cfg.mode == "taba-like":
            extra = self._mixup_loss(model, x_adv, y, seen)
            if extra is not None:
                loss = ad.add(loss, extra)
        elif self.cfg.mode == "flair-like":
            if self.stage >= 2 and prev_model is None and self.cfg.distill_weight > 0:
                raise DefenseConfigError(
                    "flair-like distillation needs the previous-stage model")
            if prev_model is not None and self.cfg.distill_weight > 0:
                loss = ad.add(loss, self._split_kd_loss(model, prev_model, x_adv,
                                                        seen, current))
        return loss

    def _mixup_loss(self, model, x_adv, y, seen) -> Tensor | None:
        if not self.boundary_images:
            return None  # falls back to plain adversarial training
        nb = min(len(y), len(self.boundary_images))
        pick = self.rng.integers(0, len(self.boundary_images), size=nb)
        xb = np.stack([self.boundary_images[i] for i in pick])
        yb = np.asarray([self.boundary_labels[i] for i in pick])
        lam = self.rng.beta(self.cfg.mixup_alpha, self.cfg.mixup_alpha,
                            size=nb).astype(x_adv.dtype)
        lam_x = lam.reshape((nb,) + (1,) * (x_adv.ndim - 1))
        x_mix = lam_x * xb + (1.0 - lam_x) * x_adv[:nb]
        width = model.head_width
        targets = np.zeros((nb, width), dtype=np.float32)
        targets[np.arange(nb), yb] += lam
        targets[np.arange(nb), y[:nb]] += 1.0 - lam
        if model.loss_kind == "bce":
            class_mask = np.zeros(width, dtype=np.float32)
            class_mask[list(seen)] = 1.0
            per = ad.sigmoid_bce(model.forward(x_mix), targets, class_mask)
        else:
            masked = models.masked_logits(model, x_mix, seen)
            per = ad.softmax_cross_entropy_soft(masked, targets)
        return ad.mean(per)

    def _split_kd_loss(self, model, prev_model, x_adv, seen, current) -> Tensor:
        """Temperature KL between current and previous logits, distilled
        separately over old-class and new-class logit groups."""
        logits = model.forward(x_adv)
        with ad.no_grad():
            prev_z = prev_model.forward(x_adv).data
        old = sorted(set(int(c) for c in seen) - set(int(c) for c in current))
        new = sorted(int(c) for c in current)
        term = None
        for group in (old, new):
            if len(group) < 2:
                continue
            idx = np.asarray(group)
            part = ad.mean(ad.kl_div_logits(ad.take_cols(logits, idx),
                                            prev_z[:, idx], self.cfg.kd_temperature))
            term = part if term is None else ad.add(term, part)
        if term is None:
            return ad.scale(ad.mean(logits), 0.0)  # no distillable group
        return ad.scale(term, self.cfg.distill_weight)

    # -- hook 3: add the flatness surrogate's parameter gradient ------------
    def inject_gradients(self, model, x_adv, y, seen):
        if self.cfg.mode != "flair-like" or self.cfg.flatness_weight == 0:
            return
        params = model.parameters()
        main_grads = {name: (None if p.grad is None else p.grad.copy())
                      for name, p in params.items()}
        _, gx = loss_and_input_grad(model, x_adv, y, seen)
        scale = float(np.abs(gx).max())
        if scale == 0.0:
            for name, p in params.items():
                p.grad = main_grads[name]
            return
        h = FLATNESS_FD_STEP / scale
        gp = _param_grads(model, x_adv + h * gx, y, seen)
        gm = _param_grads(model, x_adv - h * gx, y, seen)
        n = len(y)
        coeff = self.cfg.flatness_weight * 2.0 / n
        for name, p in params.items():
            fd = (gp[name] - gm[name]) / (2.0 * h)
            base = main_grads[name] if main_grads[name] is not None \
                else np.zeros_like(p.data)
            p.grad = base + (coeff * fd).astype(p.data.dtype)

    # -- hook 4: boundary-buffer upkeep --------------------------------------
    def after_batch(self, model, x_adv, y, seen):
        if self.cfg.mode != "taba-like":
            return
        pred = models.predict(model, x_adv, seen)
        for i in np.flatnonzero(pred != y):
            record = BoundaryRecord(self.stage, int(y[i]), int(pred[i]))
            if record.predicted == record.label:
                raise RuntimeError("boundary insert of a correctly classified sample")
            self.insertion_trace.append(record)
            if len(self.boundary_images) < self.cfg.boundary_capacity:
                self.boundary_images.append(x_adv[i].copy())
                self.boundary_labels.append(int(y[i]))
            else:
                slot = self._boundary_next % self.cfg.boundary_capacity
                self.boundary_images[slot] = x_adv[i].copy()
                self.boundary_labels[slot] = int(y[i])
                self._boundary_next += 1


def _param_grads(model, x, y, seen) -> dict[str, np.ndarray]:
    model.zero_grad()
    _sum_head_loss(model, Tensor(np.ascontiguousarray(x)), y, seen).backward()
    out = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
           for name, p in model.parameters().items()}
    model.zero_grad()
    return out


def _sum_head_loss(model, xt: Tensor, y, seen) -> Tensor:
    if model.loss_kind == "bce":
        width = model.head_width
        class_mask = np.zeros(width, dtype=np.float32)
        class_mask[list(seen)] = 1.0
        targets = np.zeros((len(y), width), dtype=np.float32)
        targets[np.arange(len(y)), y] = 1.0
        return ad.total(ad.sigmoid_bce(model.forward(xt), targets, class_mask))
    masked = models.apply_mask(model.forward(xt), seen, model.head_width)
    return ad.total(ad.softmax_cross_entropy(masked, y))


def runtime_for(cfg: DefenseConfig, master_seed: int) -> DefenseRuntime | None:
    return None if cfg.mode == "none" else DefenseRuntime(cfg, master_seed)


def input_gradient_sq_norm(model, x, y, seen) -> float:
    """Mean over the batch of ||grad_x J||^2 (the flatness surrogate's value)."""
    _, gx = loss_and_input_grad(model, x, y, seen)
    n = len(y)
    return float((gx.reshape(n, -1).astype(np.float64) ** 2).sum() / n)
