"""Measurement layer: stage-aware attack success, similarity and complexity.

ASR counts flips among clean-correct samples on the cumulative test data of
the attacker's stage. Similarity (parameter cosine, linear CKA) and complexity
(input-gradient norms, last-layer Hessian spectral norm) are evaluated on the
first stage's test data, the only split every stage model has seen.

Undefined statistics (0/0 counts, zero variance) are reported as None, never
silently coerced to 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import models
from . import strategies
from .attacks import AdversarialBatch, AttackSpec, craft, loss_and_input_grad
from .data import LabeledImages, StageStream, cumulative_test
from .seeding import rng_for


class MetricInputError(ValueError):
    pass


# ---------------------------------------------------------------------------
# attack success rate


def asr(target_model: models.Network, clean: LabeledImages,
        adversarial: AdversarialBatch,
        nme_means: dict[int, np.ndarray] | None = None
        ) -> tuple[float | None, int, int]:
    """(asr, clean_correct, flipped); asr is None when no clean sample is correct."""
    if len(clean) != len(adversarial.perturbed):
        raise MetricInputError("adversarial batch not aligned with clean data")
    if nme_means:
        pred_clean = strategies.nme_predict(target_model, nme_means, clean.images)
        pred_adv = strategies.nme_predict(target_model, nme_means, adversarial.perturbed)
    else:
        pred_clean = models.predict(target_model, clean.images)
        pred_adv = models.predict(target_model, adversarial.perturbed)
    correct = pred_clean == clean.labels
    flipped = correct & (pred_adv != clean.labels)
    n_correct = int(correct.sum())
    n_flipped = int(flipped.sum())
    if n_correct == 0:
        return None, 0, 0
    return n_flipped / n_correct, n_correct, n_flipped


@dataclass
class ASRCell:
    attacker_stage: int
    method: str
    asr: float | None
    clean_correct: int
    flipped: int
    n: int
    dataset: str


@dataclass
class ASRMatrix:
    target_stage: int
    methods: list[str]
    attacker_stages: list[int]
    cells: dict[tuple[int, str], ASRCell] = field(default_factory=dict)

    def row(self, method: str) -> list[float | None]:
        return [self.cells[(a, method)].asr for a in self.attacker_stages]


def _as_checkpoints(scenario) -> list[models.Checkpoint]:
    return scenario.checkpoints if hasattr(scenario, "checkpoints") else list(scenario)


def transfer_matrix(scenario, stream: StageStream, attack_specs: list[AttackSpec],
                    use_nme: bool = False, workers: int = 1) -> ASRMatrix:
    """ASR of every (attacker stage, method) cell against the final checkpoint.

    Crafting for stage a uses the cumulative test data of stages 1..a and the
    stage-a model's own seen-class mask; the a = T column is the direct attack.
    `scenario` is a ScenarioResult or a plain checkpoint list. Cells are
    independent; `workers` > 1 evaluates them in a thread pool, with results
    always collected in (stage, method) order.
    """
    checkpoints = _as_checkpoints(scenario)
    t_final = len(checkpoints)
    target_ckpt = checkpoints[-1]
    target = target_ckpt.model()
    nme = _ckpt_nme_means(target_ckpt) if use_nme else None
    matrix = ASRMatrix(t_final, [s.method for s in attack_specs],
                       list(range(1, t_final + 1)))

    def cell(a: int, spec: AttackSpec) -> ASRCell:
        attacker = checkpoints[a - 1].model()
        data = cumulative_test(stream, a)
        batch = craft(attacker, data.images, data.labels, spec, crafting_stage=a)
        value, n_correct, n_flipped = asr(target, data, batch, nme)
        return ASRCell(a, spec.method, value, n_correct, n_flipped, len(data),
                       f"D_1:{a}")

    jobs = [(a, spec) for a in range(1, t_final + 1) for spec in attack_specs]
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda job: cell(*job), jobs))
    else:
        results = [cell(a, spec) for a, spec in jobs]
    for c in results:
        matrix.cells[(c.attacker_stage, c.method)] = c
    return matrix


def _ckpt_nme_means(ckpt: models.Checkpoint) -> dict[int, np.ndarray] | None:
    if "nme_means" not in ckpt.aux:
        return None
    rows = ckpt.aux["nme_means"]
    return {cls: rows[i] for i, cls in enumerate(sorted(ckpt.seen_classes))}


def asymmetric_transfer(scenario, stream: StageStream, spec: AttackSpec,
                        s1: int, s2: int
                        ) -> tuple[tuple[float | None, int, int],
                                   tuple[float | None, int, int]]:
    """(ASR s1->s2, ASR s2->s1), both crafted on the common data D_{1:min(s1,s2)}."""
    if s1 == s2:
        raise MetricInputError("asymmetric transfer needs two distinct stages")
    checkpoints = _as_checkpoints(scenario)
    data = cumulative_test(stream, min(s1, s2))
    out = []
    for src, dst in ((s1, s2), (s2, s1)):
        attacker = checkpoints[src - 1].model()
        target = checkpoints[dst - 1].model()
        batch = craft(attacker, data.images, data.labels, spec, crafting_stage=src)
        out.append(asr(target, data, batch))
    return out[0], out[1]


# ---------------------------------------------------------------------------
# model similarity


def cosine_similarity(params_a: dict[str, np.ndarray], params_b: dict[str, np.ndarray],
                      head_rows=None, head_prefix: str = "head.") -> float | None:
    """Cosine between concatenated parameter vectors.

    `head_rows` restricts head weight rows / bias entries to the given class
    ids (pass the earlier stage's seen classes); None compares full vectors.
    """
    if set(params_a) != set(params_b):
        raise MetricInputError("parameter name sets differ")
    vec_a, vec_b = [], []
    rows = None if head_rows is None else sorted(int(c) for c in head_rows)
    for name in sorted(params_a):
        a, b = params_a[name], params_b[name]
        if a.shape != b.shape:
            raise MetricInputError(f"{name}: shape {a.shape} vs {b.shape}")
        if rows is not None and name.startswith(head_prefix):
            a, b = a[rows], b[rows]
        vec_a.append(a.astype(np.float64).reshape(-1))
        vec_b.append(b.astype(np.float64).reshape(-1))
    va, vb = np.concatenate(vec_a), np.concatenate(vec_b)
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        return None
    return float(np.dot(va, vb) / (na * nb))


def linear_cka(features_a: np.ndarray, features_b: np.ndarray) -> float | None:
    """Centered linear kernel alignment: |A^T B|_F^2 / (|A^T A|_F |B^T B|_F)."""
    if features_a.shape[0] != features_b.shape[0]:
        raise MetricInputError("feature matrices need matching sample counts")
    if features_a.shape[0] < 2:
        raise MetricInputError("CKA needs at least 2 samples")
    a = features_a.astype(np.float64)
    b = features_b.astype(np.float64)
    a = a - a.mean(axis=0, keepdims=True)
    b = b - b.mean(axis=0, keepdims=True)
    cross = np.linalg.norm(a.T @ b, "fro") ** 2
    denom = np.linalg.norm(a.T @ a, "fro") * np.linalg.norm(b.T @ b, "fro")
    if denom == 0.0:
        return None
    return float(cross / denom)


@dataclass
class SimilarityRow:
    stage: int
    cosine: float | None
    cka: float | None
    asr_ratio: float | None


@dataclass
class SimilarityReport:
    rows: list[SimilarityRow]
    pearson_cosine: float | None
    pearson_cka: float | None


def similarity_report(checkpoints: list[models.Checkpoint], stream: StageStream,
                      matrix: ASRMatrix, method: str) -> SimilarityReport:
    """Per-stage cosine/CKA against the final model plus ASR-ratio correlation."""
    final = checkpoints[-1]
    final_model = final.model()
    stage1 = cumulative_test(stream, 1)
    feats_final = models.features_of(final_model, stage1.images)
    ratios = asr_ratio(matrix, method)
    rows = []
    for ckpt in checkpoints:
        stage_model = ckpt.model()
        cos = cosine_similarity(ckpt.params, final.params, head_rows=ckpt.seen_classes)
        cka = linear_cka(models.features_of(stage_model, stage1.images), feats_final)
        rows.append(SimilarityRow(ckpt.stage, cos, cka, ratios[ckpt.stage - 1]))
    kept = [(r.cosine, r.cka, r.asr_ratio) for r in rows
            if r.cosine is not None and r.cka is not None and r.asr_ratio is not None]
    p_cos = p_cka = None
    if len(kept) >= 3:
        cos_s, cka_s, ratio_s = (np.array([k[i] for k in kept]) for i in range(3))
        p_cos = pearson(cos_s, ratio_s)
        p_cka = pearson(cka_s, ratio_s)
    return SimilarityReport(rows, p_cos, p_cka)


def asr_ratio(matrix: ASRMatrix, method: str) -> list[float | None]:
    """Each stage's ASR over the direct attack's; None when direct is 0/undefined."""
    direct = matrix.cells[(matrix.target_stage, method)].asr
    if direct is None or direct == 0.0:
        return [None] * len(matrix.attacker_stages)
    return [None if c is None else c / direct
            for c in (matrix.cells[(a, method)].asr for a in matrix.attacker_stages)]


# ---------------------------------------------------------------------------
# model complexity


def local_lipschitz(model: models.Network, data: LabeledImages, n: int | None = None,
                    batch_size: int = 512) -> float:
    """Mean L2 norm of the input gradient of the masked-CE loss over n samples."""
    count = len(data) if n is None else n
    if count > len(data):
        raise MetricInputError(f"requested {count} samples, dataset has {len(data)}")
    norms = []
    for lo in range(0, count, batch_size):
        hi = min(lo + batch_size, count)
        _, grad = loss_and_input_grad(
            model, data.images[lo:hi], data.labels[lo:hi], model.seen_classes,
            loss="ce")
        norms.append(np.sqrt((grad.reshape(hi - lo, -1).astype(np.float64) ** 2)
                             .sum(axis=1)))
    return float(np.concatenate(norms).mean())


def power_iteration(hvp, shape, iters: int = 100, tol: float = 1e-6,
                    seed: int = 0) -> tuple[float, bool]:
    """Dominant |eigenvalue| of a symmetric operator given via hvp(v).

    Returns (|Rayleigh quotient|, converged); converged means the quotient's
    relative change dropped below tol before the iteration budget ran out.
    """
    rng = rng_for(seed, "power-iteration")
    v = rng.standard_normal(shape)
    v /= np.linalg.norm(v)
    lam_prev = None
    for _ in range(iters):
        hv = np.asarray(hvp(v))
        lam = float(abs((v * hv).sum()))
        norm = np.linalg.norm(hv)
        if norm == 0.0:
            return 0.0, True
        v = hv / norm
        if lam_prev is not None and abs(lam - lam_prev) <= tol * max(lam, 1e-12):
            return lam, True
        lam_prev = lam
    return lam_prev if lam_prev is not None else 0.0, False


def hessian_spectral_norm(model: models.Network, data: LabeledImages,
                          iters: int = 100, tol: float = 1e-6, seed: int = 0,
                          per_sample: bool = False) -> tuple[float, bool]:
    """Spectral norm of the masked-CE Hessian restricted to head weights.

    The Hessian of the mean loss admits per-sample blocks
    (diag(p) - p p^T) kron (h h^T); HVPs use this closed form. With
    `per_sample`, returns the max over per-sample spectral norms instead.
    """
    head = model.layers[-1]
    if not isinstance(head, models.Linear):
        raise MetricInputError("last layer must be affine")
    feats = models.features_of(model, data.images).astype(np.float64)
    w = head.weight.data.astype(np.float64)
    b = head.bias.data.astype(np.float64)
    logits = feats @ w.T + b
    logits += models.mask_vector(model.seen_classes, model.head_width, np.float64)
    p = ad.softmax(logits)
    n = feats.shape[0]

    if per_sample:
        best = 0.0
        for i in range(n):
            a_mat = np.diag(p[i]) - np.outer(p[i], p[i])
            lam_a = float(np.linalg.eigvalsh(a_mat)[-1])
            best = max(best, lam_a * float(feats[i] @ feats[i]))
        return best, True

    def hvp(v):
        u = feats @ v.T                      # [n, C]
        au = p * u - p * (p * u).sum(axis=1, keepdims=True)
        return (au.T @ feats) / n

    return power_iteration(hvp, w.shape, iters, tol, seed)


@dataclass
class ComplexityRow:
    stage: int
    lipschitz: float
    hessian_lmax: float
    hessian_converged: bool


def complexity_report(checkpoints: list[models.Checkpoint], stream: StageStream,
                      n: int | None = None, iters: int = 100, tol: float = 1e-6,
                      seed: int = 0) -> list[ComplexityRow]:
    stage1 = cumulative_test(stream, 1)
    rows = []
    for ckpt in checkpoints:
        model = ckpt.model()
        lip = local_lipschitz(model, stage1, n)
        lam, ok = hessian_spectral_norm(model, stage1, iters, tol, seed)
        rows.append(ComplexityRow(ckpt.stage, lip, lam, ok))
    return rows


# ---------------------------------------------------------------------------
# correlation


def _validate_series(xs, ys):
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise MetricInputError("series must be 1-d and equally long")
    if xs.size < 3:
        raise MetricInputError("need at least 3 points")
    return xs, ys


def pearson(xs, ys) -> float | None:
    xs, ys = _validate_series(xs, ys)
    dx = xs - xs.mean()
    dy = ys - ys.mean()
    denom = np.sqrt((dx * dx).sum() * (dy * dy).sum())
    if denom == 0.0:
        return None
    return float((dx * dy).sum() / denom)


def _average_ranks(v: np.ndarray) -> np.ndarray:
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(xs, ys) -> float | None:
    xs, ys = _validate_series(xs, ys)
    return pearson(_average_ranks(xs), _average_ranks(ys))


def correlation(xs, ys, kind: str = "pearson") -> float | None:
    if kind == "pearson":
        return pearson(xs, ys)
    if kind == "spearman":
        return spearman(xs, ys)
    raise MetricInputError(f"unknown correlation kind {kind!r}")
