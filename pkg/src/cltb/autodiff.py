"""Reverse-mode automatic differentiation over numpy arrays.

Small tape-based engine sized for the MLPs and plain conv nets used in this
benchmark. Gradients flow both to parameters and to inputs: the attack code
differentiates the loss with respect to pixels, so every primitive registers
an adjoint for each differentiable argument. Float32 is the working precision
for training and attacks; gradient-check tests run the same graphs in float64.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "GraphError", "NumericError", "no_grad",
    "affine", "conv2d", "relu", "avg_pool2d", "flatten",
    "add", "scale", "shift", "take_rows", "take_cols",
    "total", "mean",
    "softmax_cross_entropy", "softmax_cross_entropy_soft",
    "sigmoid_bce", "kl_div_logits", "dlr_loss",
    "l2_normalize", "supcon_loss",
    "softmax", "grad_check", "SGD",
]


class GraphError(RuntimeError):
    """Backward invoked on an ill-formed or not-yet-evaluated graph."""


class NumericError(ArithmeticError):
    """A loss or gradient became non-finite."""


_grad_enabled = True


class no_grad:
    """Context manager that disables graph construction (pure inference)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """N-d value node. ``data`` is a numpy array; ``grad`` fills on backward."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Reverse sweep from a scalar loss, filling grads of reachable leaves."""
        if self.data.size != 1:
            raise GraphError("backward requires a scalar loss")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor requiring grad")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={'set' if self.grad is not None else 'none'})"


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


# ---------------------------------------------------------------------------
# structural ops


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x [n, d_in] -> x @ W^T + b with W [d_out, d_in], b [d_out]."""
    if x.data.ndim != 2 or x.data.shape[1] != weight.data.shape[1]:
        raise GraphError(
            f"affine shape mismatch: input {x.data.shape}, weight {weight.data.shape}")
    y = x.data @ weight.data.T + bias.data

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data)
        if weight.requires_grad:
            weight._accumulate(g.T @ x.data)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    return _node(y, (x, weight, bias), backward)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """x [n,C,H,W], weight [O,C,kh,kw] -> [n,O,H',W']. Fixed accumulation order."""
    n, c, h, w = x.data.shape
    o, cw, kh, kw = weight.data.shape
    if c != cw:
        raise GraphError(f"conv2d channel mismatch: input {c}, weight {cw}")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    y = np.zeros((n, o, ho, wo), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            y += np.einsum("oc,nchw->nohw", weight.data[:, :, i, j], patch)
    y += bias.data[None, :, None, None]

    def backward(g):
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        np.einsum("oc,nohw->nchw", weight.data[:, :, i, j], g)
            if padding:
                gxp = gxp[:, :, padding:padding + h, padding:padding + w]
            x._accumulate(gxp)
        if weight.requires_grad:
            gw = np.zeros_like(weight.data)
            for i in range(kh):
                for j in range(kw):
                    patch = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
                    gw[:, :, i, j] = np.einsum("nohw,nchw->oc", g, patch)
            weight._accumulate(gw)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    return _node(y, (x, weight, bias), backward)


def relu(x: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = x.data > 0
    y = np.where(mask, x.data, x.data.dtype.type(0))

    def backward(g):
        x._accumulate(g * mask)

    return _node(y, (x,), backward)


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    n, c, h, w = x.data.shape
    if h % k or w % k:
        raise GraphError(f"avg_pool2d: spatial dims {h}x{w} not divisible by {k}")
    y = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def backward(g):
        gx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        x._accumulate(gx.astype(x.data.dtype, copy=False))

    return _node(y, (x,), backward)


def flatten(x: Tensor) -> Tensor:
    n = x.data.shape[0]
    y = x.data.reshape(n, -1)

    def backward(g):
        x._accumulate(g.reshape(x.data.shape))

    return _node(y, (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise GraphError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    y = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _node(y, (a, b), backward)


def scale(x: Tensor, c) -> Tensor:
    """Multiply by a constant scalar or broadcastable array (no grad to c)."""
    c = np.asarray(c, dtype=x.data.dtype)
    y = x.data * c

    def backward(g):
        x._accumulate(g * c)

    return _node(y, (x,), backward)


def shift(x: Tensor, c) -> Tensor:
    """Add a constant scalar or broadcastable array (no grad to c)."""
    c = np.asarray(c, dtype=x.data.dtype)
    y = x.data + c

    def backward(g):
        x._accumulate(g)

    return _node(y, (x,), backward)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx)
    y = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        x._accumulate(gx)

    return _node(y, (x,), backward)


def take_cols(x: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx)
    y = x.data[:, idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx.T, idx, g.T)
        x._accumulate(gx)

    return _node(y, (x,), backward)


def total(x: Tensor) -> Tensor:
    y = np.asarray(x.data.sum())

    def backward(g):
        x._accumulate(np.broadcast_to(g, x.data.shape).astype(x.data.dtype, copy=False))

    return _node(y, (x,), backward)


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    y = np.asarray(x.data.mean())

    def backward(g):
        x._accumulate(np.broadcast_to(g / n, x.data.shape).astype(x.data.dtype, copy=False))

    return _node(y, (x,), backward)


# ---------------------------------------------------------------------------
# losses (per-sample vectors unless stated otherwise)


def softmax(z: np.ndarray) -> np.ndarray:
    zm = z - z.max(axis=1, keepdims=True)
    e = np.exp(zm)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Per-sample CE against integer labels; returns a [n] tensor."""
    z = logits.data
    n = z.shape[0]
    labels = np.asarray(labels)
    zm = z.max(axis=1, keepdims=True)
    lse = zm[:, 0] + np.log(np.exp(z - zm).sum(axis=1))
    losses = lse - z[np.arange(n), labels]
    p = softmax(z)

    def backward(g):
        gz = p * g[:, None]
        gz[np.arange(n), labels] -= g
        logits._accumulate(gz)

    return _node(losses, (logits,), backward)


def softmax_cross_entropy_soft(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-sample CE against probability-vector targets (constants)."""
    z = logits.data
    zm = z.max(axis=1, keepdims=True)
    lse = zm[:, 0] + np.log(np.exp(z - zm).sum(axis=1))
    losses = lse * targets.sum(axis=1) - (targets * z).sum(axis=1)
    p = softmax(z)

    def backward(g):
        logits._accumulate((p * targets.sum(axis=1, keepdims=True) - targets) * g[:, None])

    return _node(losses, (logits,), backward)


def sigmoid_bce(logits: Tensor, targets: np.ndarray, class_mask: np.ndarray | None = None) -> Tensor:
    """Per-sample sum of binary cross-entropies over classes.

    ``targets`` in [0,1] are constants; ``class_mask`` (0/1, broadcastable to
    [n, C]) restricts which classes contribute.
    """
    z = logits.data
    m = np.ones_like(z) if class_mask is None else np.broadcast_to(
        np.asarray(class_mask, dtype=z.dtype), z.shape)
    # stable: max(z,0) - z*t + log1p(exp(-|z|))
    per = np.maximum(z, 0) - z * targets + np.log1p(np.exp(-np.abs(z)))
    losses = (per * m).sum(axis=1)
    ez = np.exp(-np.abs(z))
    sig = np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))

    def backward(g):
        logits._accumulate((sig - targets) * m * g[:, None])

    return _node(losses, (logits,), backward)


def kl_div_logits(logits: Tensor, teacher_logits: np.ndarray, temperature: float) -> Tensor:
    """Per-sample T^2-scaled KL(softmax(teacher/T) || softmax(student/T))."""
    t = float(temperature)
    ps = softmax(logits.data / t)
    pt = softmax(np.asarray(teacher_logits) / t)
    eps = np.finfo(logits.data.dtype).tiny
    losses = (t * t) * (pt * (np.log(pt + eps) - np.log(ps + eps))).sum(axis=1)

    def backward(g):
        logits._accumulate(t * (ps - pt) * g[:, None])

    return _node(losses, (logits,), backward)


def dlr_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Per-sample difference-of-logits-ratio loss (scale-invariant margin).

    -(z_y - max_{i!=y} z_i) / (z_top1 - z_top3 + 1e-12); needs >= 3 classes
    with finite logits to be meaningful.
    """
    z = logits.data
    n, c = z.shape
    if c < 3:
        raise GraphError("dlr_loss requires at least 3 classes")
    labels = np.asarray(labels)
    rows = np.arange(n)
    order = np.argsort(z, axis=1)  # ascending
    top1 = order[:, -1]
    top3 = order[:, -3]
    zy = z[rows, labels]
    # strongest class other than y
    other = np.where(top1 == labels, order[:, -2], top1)
    zo = z[rows, other]
    denom = z[rows, top1] - z[rows, top3] + 1e-12
    num = zy - zo
    losses = -num / denom

    def backward(g):
        gz = np.zeros_like(z)
        gn = -g / denom                   # d/d(num)
        gd = g * num / (denom * denom)    # d/d(denom)
        np.add.at(gz, (rows, labels), gn)
        np.add.at(gz, (rows, other), -gn)
        np.add.at(gz, (rows, top1), gd)
        np.add.at(gz, (rows, top3), -gd)
        logits._accumulate(gz)

    return _node(losses, (logits,), backward)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Row-wise L2 normalization."""
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    norms = np.maximum(norms, eps)
    y = x.data / norms

    def backward(g):
        dot = (y * g).sum(axis=1, keepdims=True)
        x._accumulate((g - y * dot) / norms)

    return _node(y, (x,), backward)


def supcon_loss(z: Tensor, labels: np.ndarray, temperature: float) -> Tensor:
    """Supervised contrastive loss over unit-norm rows; scalar mean over anchors.

    Positives are same-label rows; anchors without a positive are skipped and
    contribute nothing. Returns a constant 0 when no anchor has a positive.
    """
    zd = z.data
    n = zd.shape[0]
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    pos_counts = same.sum(axis=1)
    valid = pos_counts > 0
    n_valid = int(valid.sum())
    if n_valid == 0:
        return Tensor(np.asarray(zd.dtype.type(0.0)))

    s = (zd @ zd.T) / temperature
    np.fill_diagonal(s, -np.inf)
    smax = s.max(axis=1, keepdims=True)
    lse = smax[:, 0] + np.log(np.exp(s - smax).sum(axis=1))
    logq = s - lse[:, None]
    safe_counts = np.maximum(pos_counts, 1)
    per_anchor = -(np.where(same, logq, 0.0)).sum(axis=1) / safe_counts
    loss = np.asarray(per_anchor[valid].mean().astype(zd.dtype))

    def backward(g):
        q = np.exp(logq)
        np.fill_diagonal(q, 0.0)
        gmat = q - same / safe_counts[:, None]
        gmat[~valid] = 0.0
        gmat /= n_valid
        gz = ((gmat + gmat.T) @ zd) / temperature
        z._accumulate((gz * g).astype(zd.dtype, copy=False))

    return _node(loss, (z,), backward)


# ---------------------------------------------------------------------------
# verification and optimization


def grad_check(loss_fn, tensors: list[Tensor], step: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` re-evaluates the graph and returns a scalar Tensor; ``tensors``
    are the leaves to check (mutated in place during probing). Relative error
    is |analytic - numeric| / max(|analytic|, |numeric|, 1e-12) per coordinate.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    for t in tensors:
        t.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data):
        raise NumericError("non-finite loss at evaluation point")
    loss.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in tensors]
    worst = 0.0
    for t, ga in zip(tensors, analytic):
        for i in range(t.data.size):
            idx = np.unravel_index(i, t.data.shape)
            orig = t.data[idx]
            t.data[idx] = orig + step
            lp = float(loss_fn().data)
            t.data[idx] = orig - step
            lm = float(loss_fn().data)
            t.data[idx] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericError(f"non-finite loss while probing coordinate {i}")
            numeric = (lp - lm) / (2 * step)
            denom = max(abs(ga[idx]), abs(numeric), 1e-12)
            worst = max(worst, abs(ga[idx] - numeric) / denom)
    return worst


class SGD:
    """SGD with classical momentum: v <- mu*v + g + wd*theta; theta <- theta - lr*v."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise GraphError(f"gradient shape mismatch for {name}")
            v = self.velocity[name]
            v *= self.momentum
            v += g
            if self.weight_decay:
                v += self.weight_decay * p.data
            p.data -= self.lr * v
