"""White-box evasion attacks under an L-infinity pixel budget.

All attacks operate in raw [0,1] pixel space (normalization sits inside the
model graph, so input gradients pass through it) and mask the crafting loss to
the attacker model's seen classes. Every returned example satisfies
||x' - x||_inf <= eps and x' in [0,1] under plain clamp arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import models
from .autodiff import Tensor
from .seeding import rng_for

ATTACK_METHODS = ("fgsm", "pgd", "apgd-ce", "apgd-dlr", "square", "autoattack")

# adaptive step-size schedule constants from the published APGD recipe
APGD_P1 = 0.22
APGD_MIN_FRAC = 0.06
APGD_DECR = 0.03
APGD_RHO = 0.75
APGD_MOMENTUM = 0.75

SQUARE_P_INIT = 0.8

_CHUNK = 256


class AttackSpecError(ValueError):
    pass


class AttackCapabilityError(RuntimeError):
    """Sub-attack cannot run on this model (e.g. DLR with < 3 seen classes)."""


class AttackNumericError(ad.NumericError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    """Attack method plus budget: eps, iterations K, step size alpha, seed."""

    method: str = "pgd"
    epsilon: float = 0.3
    iterations: int = 40
    step_size: float | None = None  # None -> epsilon / iterations
    random_start: bool = False
    query_budget: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.method not in ATTACK_METHODS:
            raise AttackSpecError(f"unknown attack method {self.method!r}")
        if self.epsilon <= 0:
            raise AttackSpecError("epsilon must be positive")
        if self.iterations < 1:
            raise AttackSpecError("iteration count must be >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise AttackSpecError("step size must be positive")
        if self.query_budget < 1:
            raise AttackSpecError("query budget must be >= 1")

    @property
    def alpha(self) -> float:
        return self.epsilon / self.iterations if self.step_size is None else self.step_size

    def replace(self, **kw) -> "AttackSpec":
        payload = {f: getattr(self, f) for f in (
            "method", "epsilon", "iterations", "step_size", "random_start",
            "query_budget", "seed")}
        payload.update(kw)
        return AttackSpec(**payload)


@dataclass
class AdversarialBatch:
    """Originals, perturbed pixels and per-sample success on the crafting model."""

    originals: np.ndarray
    perturbed: np.ndarray
    success: np.ndarray
    crafting_stage: int = 0


def mnist_spec(method: str, seed: int = 0) -> AttackSpec:
    return AttackSpec(method=method, epsilon=0.3, iterations=40, seed=seed)


def cifar_spec(method: str, seed: int = 0) -> AttackSpec:
    return AttackSpec(method=method, epsilon=8 / 255, iterations=10, seed=seed)


# ---------------------------------------------------------------------------
# crafting loss


def _per_sample_loss(model: models.Network, xt: Tensor, y: np.ndarray, seen) -> Tensor:
    """Masked softmax-CE, or sigmoid-BCE over seen classes for the BCE head."""
    logits = model.forward(xt)
    if model.loss_kind == "bce":
        width = model.head_width
        class_mask = np.zeros(width, dtype=logits.dtype)
        class_mask[list(seen)] = 1.0
        targets = np.zeros((len(y), width), dtype=logits.dtype)
        targets[np.arange(len(y)), y] = 1.0
        return ad.sigmoid_bce(logits, targets, class_mask)
    return ad.softmax_cross_entropy(
        models.apply_mask(logits, seen, model.head_width), y)


def _dlr_per_sample(model: models.Network, xt: Tensor, y: np.ndarray, seen) -> Tensor:
    masked = models.apply_mask(model.forward(xt), seen, model.head_width)
    return ad.dlr_loss(masked, y)


def loss_and_input_grad(model: models.Network, x: np.ndarray, y: np.ndarray,
                        seen, loss: str = "head") -> tuple[np.ndarray, np.ndarray]:
    """Per-sample crafting losses and the input gradient of their sum.

    loss: "head" follows the model's head (CE, or BCE for iCaRL-style heads);
    "ce" forces masked softmax-CE; "dlr" is the margin-ratio loss.
    """
    xt = Tensor(x, requires_grad=True)
    if loss == "dlr":
        per = _dlr_per_sample(model, xt, y, seen)
    elif loss == "ce":
        per = ad.softmax_cross_entropy(
            models.apply_mask(model.forward(xt), seen, model.head_width), y)
    else:
        per = _per_sample_loss(model, xt, y, seen)
    ad.total(per).backward()
    grad = xt.grad
    if not np.all(np.isfinite(grad)):
        bad = int(np.flatnonzero(~np.isfinite(grad.reshape(len(y), -1)).all(axis=1))[0])
        raise AttackNumericError(f"non-finite input gradient for sample {bad}")
    return per.data, grad


def _project(x_adv: np.ndarray, x: np.ndarray, eps: np.float32) -> np.ndarray:
    return np.clip(np.clip(x_adv, x - eps, x + eps), 0.0, 1.0)


# ---------------------------------------------------------------------------
# FGSM / PGD


def fgsm(model: models.Network, x: np.ndarray, y: np.ndarray, epsilon: float,
         seen=None) -> np.ndarray:
    """Single sign-gradient step of size epsilon, clipped to [0,1]."""
    seen = model.seen_classes if seen is None else seen
    eps = x.dtype.type(epsilon)
    out = np.empty_like(x)
    for lo in range(0, len(y), _CHUNK):
        hi = lo + min(_CHUNK, len(y) - lo)
        _, grad = loss_and_input_grad(model, x[lo:hi], y[lo:hi], seen)
        out[lo:hi] = np.clip(x[lo:hi] + eps * np.sign(grad), 0.0, 1.0)
    return out


def pgd(model: models.Network, x: np.ndarray, y: np.ndarray, spec: AttackSpec,
        seen=None, init: np.ndarray | None = None) -> np.ndarray:
    """Iterated sign steps projected onto the eps-ball intersected with [0,1].

    `init` warm-starts the iterate (projected into the ball first); otherwise
    the start is x, or a seeded uniform draw when spec.random_start is set.
    """
    seen = model.seen_classes if seen is None else seen
    eps = x.dtype.type(spec.epsilon)
    alpha = x.dtype.type(spec.alpha)
    out = np.empty_like(x)
    for lo in range(0, len(y), _CHUNK):
        hi = lo + min(_CHUNK, len(y) - lo)
        xc, yc = x[lo:hi], y[lo:hi]
        if init is not None:
            xa = _project(init[lo:hi].astype(x.dtype), xc, eps)
        elif spec.random_start:
            rng = rng_for(spec.seed, "pgd-start", lo)
            noise = rng.uniform(-spec.epsilon, spec.epsilon, xc.shape).astype(x.dtype)
            xa = np.clip(xc + noise, 0.0, 1.0)
        else:
            xa = xc.copy()
        for _ in range(spec.iterations):
            _, grad = loss_and_input_grad(model, xa, yc, seen)
            xa = _project(xa + alpha * np.sign(grad), xc, eps)
        out[lo:hi] = xa
    return out


# ---------------------------------------------------------------------------
# APGD


def _apgd_checkpoints(k: int) -> list[int]:
    fracs = [0.0, APGD_P1]
    while fracs[-1] < 1.0:
        fracs.append(fracs[-1] + max(fracs[-1] - fracs[-2] - APGD_DECR, APGD_MIN_FRAC))
    points = sorted({int(math.ceil(p * k)) for p in fracs if 0 < p < 1})
    return [w for w in points if 0 < w < k]


def apgd(model: models.Network, x: np.ndarray, y: np.ndarray, spec: AttackSpec,
         loss: str = "ce", seen=None) -> np.ndarray:
    """Momentum PGD with the halve-and-restart step-size schedule.

    Starts from x with step 2*eps; at schedule checkpoints the per-sample step
    halves (restarting from the best point) when the loss stopped climbing.
    Returns the best-loss iterate inside the ball.
    """
    seen = model.seen_classes if seen is None else seen
    if loss == "dlr" and len(list(seen)) < 3:
        raise AttackCapabilityError("dlr loss needs at least 3 seen classes")
    loss_tag = "dlr" if loss == "dlr" else "head"
    eps = x.dtype.type(spec.epsilon)
    k = spec.iterations
    checkpoints = _apgd_checkpoints(k)
    out = np.empty_like(x)

    for lo in range(0, len(y), _CHUNK):
        hi = lo + min(_CHUNK, len(y) - lo)
        xc, yc = x[lo:hi], y[lo:hi]
        n = len(yc)
        bshape = (n,) + (1,) * (x.ndim - 1)
        step = np.full(bshape, 2.0 * spec.epsilon, dtype=x.dtype)
        x_adv = xc.copy()
        f, g = loss_and_input_grad(model, x_adv, yc, seen, loss_tag)
        x_best, f_best, g_best = x_adv.copy(), f.copy(), g.copy()
        x_prev = x_adv.copy()
        loss_steps = np.zeros((k + 1, n))
        loss_steps[0] = f
        last_ckpt = 0
        step_at_ckpt = step.copy()
        best_at_ckpt = f_best.copy()

        for it in range(1, k + 1):
            a = APGD_MOMENTUM if it > 1 else 1.0
            z = _project(x_adv + step * np.sign(g), xc, eps)
            x_new = _project(x_adv + a * (z - x_adv) + (1 - a) * (x_adv - x_prev),
                             xc, eps)
            x_prev = x_adv
            x_adv = x_new
            f, g = loss_and_input_grad(model, x_adv, yc, seen, loss_tag)
            loss_steps[it] = f
            improved = f > f_best
            if improved.any():
                x_best[improved] = x_adv[improved]
                g_best[improved] = g[improved]
                f_best[improved] = f[improved]
            if it in checkpoints:
                window = loss_steps[last_ckpt:it + 1]
                climbs = (window[1:] > window[:-1]).sum(axis=0)
                cond1 = climbs < APGD_RHO * (it - last_ckpt)
                cond2 = (step[:, 0].reshape(-1) == step_at_ckpt[:, 0].reshape(-1)) & \
                        (f_best <= best_at_ckpt)
                halve = (cond1 | cond2.reshape(cond1.shape))
                if halve.any():
                    step[halve] /= 2.0
                    x_adv[halve] = x_best[halve]
                    g[halve] = g_best[halve]
                last_ckpt = it
                step_at_ckpt = step.copy()
                best_at_ckpt = f_best.copy()
        out[lo:hi] = x_best
    return out


# ---------------------------------------------------------------------------
# Square attack (gradient-free random search)


def _square_p(it: int, budget: int) -> float:
    scaled = int(it / budget * 10000)
    if 10 < scaled <= 50:
        return SQUARE_P_INIT / 2
    if 50 < scaled <= 200:
        return SQUARE_P_INIT / 4
    if 200 < scaled <= 500:
        return SQUARE_P_INIT / 8
    if 500 < scaled <= 1000:
        return SQUARE_P_INIT / 16
    if 1000 < scaled <= 2000:
        return SQUARE_P_INIT / 32
    if 2000 < scaled <= 4000:
        return SQUARE_P_INIT / 64
    if 4000 < scaled <= 6000:
        return SQUARE_P_INIT / 128
    if 6000 < scaled <= 8000:
        return SQUARE_P_INIT / 256
    if 8000 < scaled:
        return SQUARE_P_INIT / 512
    return SQUARE_P_INIT


def _margin(model: models.Network, x: np.ndarray, y: np.ndarray, seen) -> np.ndarray:
    """max_{i != y} z_i - z_y over masked logits; > 0 is an attacker win."""
    with ad.no_grad():
        z = models.masked_logits(model, x, seen).data.copy()
    rows = np.arange(len(y))
    zy = z[rows, y].copy()
    z[rows, y] = -np.inf
    return z.max(axis=1) - zy


def square_attack(model: models.Network, x: np.ndarray, y: np.ndarray,
                  spec: AttackSpec, seen=None,
                  sample_indices: np.ndarray | None = None) -> np.ndarray:
    """Random-search attack proposing +/-eps square patches of shrinking size.

    A proposal is kept only when it increases the margin loss, so the final
    loss never falls below the stripe-initialized starting point. Each sample
    owns an RNG stream keyed by (seed, sample index), making results
    independent of batch composition. `query_budget` counts proposal queries.
    """
    seen = model.seen_classes if seen is None else seen
    eps = x.dtype.type(spec.epsilon)
    n, c, h, w = x.shape
    if sample_indices is None:
        sample_indices = np.arange(n)
    rngs = [rng_for(spec.seed, "square", int(sample_indices[i])) for i in range(n)]

    x_best = np.empty_like(x)
    for i in range(n):
        stripes = eps * rngs[i].choice(np.array([-1.0, 1.0], dtype=x.dtype),
                                       size=(c, 1, w))
        x_best[i] = np.clip(x[i] + stripes, 0.0, 1.0)
    margin_best = _margin(model, x_best, y, seen)
    active = margin_best <= 0.0

    for it in range(spec.query_budget):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        proposals = x_best[idx].copy()
        p = _square_p(it, spec.query_budget)
        s = max(1, int(round(math.sqrt(p * h * w))))
        s = min(s, h, w)
        for j, i in enumerate(idx):
            rng = rngs[i]
            vh = int(rng.integers(0, h - s + 1))
            vw = int(rng.integers(0, w - s + 1))
            signs = rng.choice(np.array([-1.0, 1.0], dtype=x.dtype), size=(c, 1, 1))
            window = proposals[j][:, vh:vh + s, vw:vw + s] + 2.0 * eps * signs
            proposals[j][:, vh:vh + s, vw:vw + s] = window
            proposals[j] = _project(proposals[j], x[i], eps)
        margins = _margin(model, proposals, y[idx], seen)
        better = margins > margin_best[idx]
        take = idx[better]
        x_best[take] = proposals[better]
        margin_best[take] = margins[better]
        active[take] = margin_best[take] <= 0.0
    return x_best


# ---------------------------------------------------------------------------
# ensemble


def autoattack(model: models.Network, x: np.ndarray, y: np.ndarray,
               spec: AttackSpec, seen=None, crafting_stage: int = 0) -> AdversarialBatch:
    """First-success ensemble: apgd-ce, apgd-dlr (skipped under 3 classes), square.

    Samples the crafting model already misclassifies keep x' = x and count as
    successes; samples no sub-attack fools keep x' = x with success False.
    """
    seen = model.seen_classes if seen is None else seen
    x_adv = x.copy()
    pred = models.predict(model, x, seen)
    success = pred != y
    todo = np.flatnonzero(~success)

    sub_attacks = ["apgd-ce"]
    if len(list(seen)) >= 3:
        sub_attacks.append("apgd-dlr")
    sub_attacks.append("square")

    for name in sub_attacks:
        if todo.size == 0:
            break
        if name == "square":
            # keying the RNG on the sample's own index keeps the standalone
            # and in-ensemble runs identical per sample
            candidates = square_attack(model, x[todo], y[todo], spec, seen,
                                       sample_indices=todo)
        else:
            candidates = apgd(model, x[todo], y[todo], spec,
                              "dlr" if name == "apgd-dlr" else "ce", seen)
        fooled = models.predict(model, candidates, seen) != y[todo]
        hit = todo[fooled]
        x_adv[hit] = candidates[fooled]
        success[hit] = True
        todo = todo[~fooled]
    return AdversarialBatch(x, x_adv, success, crafting_stage)


def craft(model: models.Network, x: np.ndarray, y: np.ndarray, spec: AttackSpec,
          seen=None, crafting_stage: int = 0) -> AdversarialBatch:
    """Dispatch one attack method; success is judged on the crafting model."""
    seen = model.seen_classes if seen is None else seen
    if spec.method == "autoattack":
        return autoattack(model, x, y, spec, seen, crafting_stage)
    if spec.method == "fgsm":
        x_adv = fgsm(model, x, y, spec.epsilon, seen)
    elif spec.method == "pgd":
        x_adv = pgd(model, x, y, spec, seen)
    elif spec.method == "apgd-ce":
        x_adv = apgd(model, x, y, spec, "ce", seen)
    elif spec.method == "apgd-dlr":
        x_adv = apgd(model, x, y, spec, "dlr", seen)
    elif spec.method == "square":
        x_adv = square_attack(model, x, y, spec, seen)
    else:  # pragma: no cover - guarded by AttackSpec
        raise AttackSpecError(spec.method)
    success = models.predict(model, x_adv, seen) != y
    return AdversarialBatch(x, x_adv, success, crafting_stage)
