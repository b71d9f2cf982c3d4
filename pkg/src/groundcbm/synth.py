"""Planted ground-truth fixtures and independent reference oracles.

Nothing in here calls into the solvers it is used to check: the coordinate
descent oracle has its own softmax and objective, and the brute-force helpers
are deliberately written as plain loops.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .formats import BoundingBox, ConceptVocabulary, DetectionRecord, EmbeddingMatrix
from .sparse_final import SparseFinalLayer

@dataclass(frozen=True, eq=False)
class PlantedModel:
    """Ground truth for synthetic fixtures.

    Every concept ``j`` has a latent bit with rate ``positive_rate`` that
    shifts ``z`` along ``mixing[:, j]`` so that the concept score
    ``concept_directions[j] @ z`` sits ``separation`` score standard
    deviations higher when the bit is on.  ``concept_thresholds`` is the
    midpoint between the two modes.
    """

    d: int
    k: int
    C: int
    s: int
    sigma: np.ndarray
    concept_directions: np.ndarray  # k x d
    concept_thresholds: np.ndarray  # k
    true_final: np.ndarray  # C x k, exactly s nonzeros per row
    noise_rate: float = 0.05
    positive_rate: float = 0.3
    separation: float = 16.0
    class_noise: float = 0.5
    false_box_rate: float = 0.5
    crop_shrink: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.noise_rate < 0.5:
            raise ValueError("noise_rate must lie in [0, 0.5)")
        if not 0.0 < self.positive_rate < 1.0:
            raise ValueError("positive_rate must lie in (0, 1)")
        counts = np.count_nonzero(self.true_final, axis=1)
        if not np.all(counts == self.s):
            raise ValueError(f"true_final rows must have exactly s={self.s} nonzeros")
        if np.linalg.eigvalsh(self.sigma).min() <= 0:
            raise ValueError("sigma must be positive definite")

    @property
    def concept_names(self) -> list[str]:
        return [f"concept_{j:02d}" for j in range(self.k)]

    @property
    def score_std(self) -> np.ndarray:
        """Within-mode standard deviation of each concept score."""
        U = self.concept_directions
        return np.sqrt(np.einsum("ij,jk,ik->i", U, self.sigma, U))

    @property
    def mixing(self) -> np.ndarray:
        """``d x k`` right inverse of ``concept_directions``."""
        return np.linalg.pinv(self.concept_directions)

    def vocabulary(self) -> ConceptVocabulary:
        cand = {c: np.flatnonzero(self.true_final[c]).tolist() for c in range(self.C)}
        return ConceptVocabulary(self.concept_names, cand)


def random_spd(d: int, rng, scale: float = 1.0, ridge: float = 0.1) -> np.ndarray:
    """``scale * A^T A + ridge * I`` with Gaussian ``A``."""
    A = rng.standard_normal((d, d))
    S = scale * (A.T @ A) + ridge * np.eye(d)
    return 0.5 * (S + S.T)


def _supports(rng, k: int, C: int, s: int) -> list[list[int]]:
    """Class supports with as little overlap as ``k`` allows.

    Concepts are shuffled and dealt into ``C`` blocks; a class takes up to
    ``s - 1`` concepts from its own block and fills the rest from the tail
    of the following blocks, so neighbouring classes share a concept.
    """
    perm = rng.permutation(k).tolist()
    block = k // C
    if block == 0:
        return [sorted(rng.choice(k, size=s, replace=False).tolist()) for _ in range(C)]
    out = []
    for c in range(C):
        own = perm[c * block:(c + 1) * block]
        cols = own[:min(s - 1, block)] if s > 1 else own[:1]
        step = 1
        while len(cols) < s:
            nxt = perm[((c + step) % C) * block:((c + step) % C + 1) * block][::-1]
            cols += [j for j in nxt if j not in cols][:s - len(cols)]
            step += 1
            if step > C:
                cols += [j for j in perm if j not in cols][:s - len(cols)]
        out.append(sorted(cols))
    return out


def make_planted(d: int = 64, k: int = 24, C: int = 6, s: int = 5,
                 noise_rate: float = 0.05, seed: int = 0, weight_low: float = 3.5,
                 weight_high: float = 4.0, **kwargs) -> PlantedModel:
    """Random planted model with the default desk-scale dimensions.

    Concept directions are orthonormal up to scale.  Every class row of
    ``true_final`` holds a shuffled copy of ``s`` evenly spaced weights in
    ``[weight_low, weight_high]`` on the supports of :func:`_supports`, so
    no class is favoured a priori.  Extra keyword arguments go to
    :class:`PlantedModel`.
    """
    if s > k:
        raise ValueError("s must not exceed k")
    if k > d:
        raise ValueError("k must not exceed d")
    rng = np.random.default_rng(seed)
    sigma = random_spd(d, rng, scale=1.0 / d)
    # orthonormal rows scaled to the norm of a Gaussian direction
    U = np.linalg.qr(rng.standard_normal((d, k)))[0].T * math.sqrt(d)
    F = np.zeros((C, k))
    levels = np.linspace(weight_low, weight_high, s)
    for c, cols in enumerate(_supports(rng, k, C, s)):
        F[c, cols] = rng.permutation(levels)
    p = kwargs.get("positive_rate", 0.3)
    sep = kwargs.get("separation", 16.0)
    sd = np.sqrt(np.einsum("ij,jk,ik->i", U, sigma, U))
    thresholds = (0.5 - p) * sep * sd
    return PlantedModel(d, k, C, s, sigma, U, thresholds, F, noise_rate, **kwargs)


@dataclass(eq=False)
class GeneratedData:
    embeddings: EmbeddingMatrix
    clean_concepts: np.ndarray  # n x k, noise-free threshold test
    concept_labels: np.ndarray  # n x k, after annotation noise
    class_labels: np.ndarray
    detections: list[DetectionRecord]
    crop_embeddings: EmbeddingMatrix


def _random_box(rng):
    x0, y0 = rng.uniform(0, 200, size=2)
    w, h = rng.uniform(10, 100, size=2)
    return (float(x0), float(y0), float(x0 + w), float(y0 + h))


def generate(planted: PlantedModel, n: int, seed: int = 0,
             id_prefix: str = "img") -> GeneratedData:
    """Draw ``n`` images from the planted model.

    ``z = mixing @ (separation * score_std * (latent - positive_rate)) + e``
    with ``e ~ N(0, sigma)`` and Bernoulli latent bits.  The clean concept
    bits are the threshold test ``concept_directions @ z > thresholds``; the
    class is the argmax of ``true_final @ clean + class_noise * N(0, 1)``.
    Observed concept labels flip each clean bit with probability
    ``noise_rate``.  Each observed positive gets one detection box with
    confidence ``U(0.5, 1)``; with probability ``false_box_rate`` an image
    also gets one injected box for an absent concept with confidence
    ``U(0, 0.3)``.  Every box has a crop embedding in which its concept is
    pushed above threshold.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    P = planted
    L = np.linalg.cholesky(P.sigma)
    M = P.mixing
    sd = P.score_std
    latent = rng.random((n, P.k)) < P.positive_rate
    shift = (latent - P.positive_rate) * (P.separation * sd)
    Z = rng.standard_normal((n, P.d)) @ L.T + shift @ M.T
    scores = Z @ P.concept_directions.T
    clean = (scores > P.concept_thresholds).astype(np.uint8)
    flips = rng.random(clean.shape) < P.noise_rate
    observed = clean ^ flips.astype(np.uint8)
    class_scores = clean @ P.true_final.T + P.class_noise * rng.standard_normal((n, P.C))
    classes = np.argmax(class_scores, axis=1).astype(np.int64)

    Z32 = Z.astype(np.float32)
    ids = [f"{id_prefix}{i:05d}" for i in range(n)]
    names = P.concept_names
    records, crop_ids, crop_rows = [], [], []
    for i in range(n):
        boxes = []
        for j in np.flatnonzero(observed[i]):
            boxes.append(BoundingBox(_random_box(rng), float(rng.uniform(0.5, 1.0)),
                                     names[j]))
        if rng.random() < P.false_box_rate:
            absent = np.flatnonzero(observed[i] == 0)
            if absent.size:
                j = int(rng.choice(absent))
                boxes.append(BoundingBox(_random_box(rng), float(rng.uniform(0.0, 0.3)),
                                         names[j]))
        for bi, box in enumerate(boxes):
            j = names.index(box.concept)
            fresh = rng.standard_normal(P.d) @ L.T
            zc = P.crop_shrink * Z[i] + math.sqrt(1 - P.crop_shrink ** 2) * fresh
            target = P.concept_thresholds[j] + sd[j] * (1.0 + abs(rng.standard_normal()))
            current = zc @ P.concept_directions[j]
            if current < target:
                zc = zc + (target - current) * M[:, j]
            crop_ids.append(f"{ids[i]}#{bi}")
            crop_rows.append(zc)
        records.append(DetectionRecord(ids[i], int(classes[i]), tuple(boxes)))

    crops = np.array(crop_rows, dtype=np.float32).reshape(-1, P.d)
    return GeneratedData(EmbeddingMatrix(ids, Z32), clean, observed, classes,
                         records, EmbeddingMatrix(crop_ids, crops))


# ---------------------------------------------------------------------------
# Coordinate descent oracle for the elastic-net multinomial problem
# ---------------------------------------------------------------------------


def _ce_value(Z, y):
    m = Z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(Z - m).sum(axis=1)) + m[:, 0]
    return float(np.mean(lse - Z[np.arange(y.size), y]))


def _softmax(Z):
    E = np.exp(Z - Z.max(axis=1, keepdims=True))
    return E / E.sum(axis=1, keepdims=True)


def coordinate_descent_oracle(concept_logits, labels, lam: float, alpha_mix: float,
                              sweeps: int = 20000, tol: float = 1e-10,
                              n_classes: Optional[int] = None) -> SparseFinalLayer:
    """Cyclic coordinate descent on the elastic-net multinomial objective.

    Each weight takes a one-dimensional proximal Newton step; when that step
    fails to decrease the objective a majorise-minimise step with the
    curvature bound ``p(1-p) <= 1/4`` is used instead.  The bias is updated
    the same way without a penalty.  Stops when a full sweep lowers the
    objective by less than ``tol``.
    """
    X = np.asarray(concept_logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n, k = X.shape
    C = int(y.max()) + 1 if n_classes is None else n_classes
    Y = np.zeros((n, C))
    Y[np.arange(n), y] = 1.0
    ridge = lam * (1.0 - alpha_mix)
    l1 = lam * alpha_mix
    W = np.zeros((C, k))
    b = np.zeros(C)
    Z = np.zeros((n, C))

    def full(Zm, Wm):
        return _ce_value(Zm, y) + ridge * 0.5 * np.sum(Wm * Wm) + l1 * np.sum(np.abs(Wm))

    def soft(v, t):
        return math.copysign(max(abs(v) - t, 0.0), v)

    obj = full(Z, W)
    bound_h = 0.25 * np.mean(X * X, axis=0)
    for sweep in range(sweeps):
        start = obj
        for c in range(C):
            # bias
            P = _softmax(Z)
            g = float(np.mean(P[:, c] - Y[:, c]))
            h = float(np.mean(P[:, c] * (1 - P[:, c])))
            for curv in (h, 0.25):
                if curv <= 0:
                    continue
                step = -g / curv
                Zt = Z.copy()
                Zt[:, c] += step
                new = full(Zt, W)
                if new <= obj:
                    b[c] += step
                    Z, obj = Zt, new
                    break
            for j in range(k):
                P = _softmax(Z)
                x = X[:, j]
                w = W[c, j]
                g = float(np.mean((P[:, c] - Y[:, c]) * x)) + ridge * w
                h = float(np.mean(P[:, c] * (1 - P[:, c]) * x * x)) + ridge
                hb = float(bound_h[j]) + ridge
                for curv in (h, hb):
                    if curv <= 0:
                        continue
                    w_new = soft(curv * w - g, l1) / curv
                    if w_new == w:
                        break
                    Zt = Z.copy()
                    Zt[:, c] += (w_new - w) * x
                    Wt = W.copy()
                    Wt[c, j] = w_new
                    new = full(Zt, Wt)
                    if new <= obj:
                        W, Z, obj = Wt, Zt, new
                        break
        if start - obj < tol:
            return SparseFinalLayer(W, b, float(lam), alpha_mix, sweep + 1)
    raise ArithmeticError(f"coordinate descent did not converge in {sweeps} sweeps")


# ---------------------------------------------------------------------------
# Monte Carlo oracle for the linear-approximation error
# ---------------------------------------------------------------------------


def mc_error_oracle(W_c, sigma, mu, w, b, w_tilde, b_tilde, samples: int = 10 ** 6,
                    seed: int = 0, chunk: int = 100_000) -> tuple[float, float]:
    """Monte Carlo estimate of ``E_z |w^T z + b - (w_tilde^T W_c z + b_tilde)|^2``
    for ``z ~ N(mu, sigma)``.  Returns ``(estimate, standard_error)``."""
    if samples < 10 ** 4:
        raise ValueError("use at least 10^4 samples")
    rng = np.random.default_rng(seed)
    sigma = np.asarray(sigma, dtype=np.float64)
    d = sigma.shape[0]
    L = np.linalg.cholesky(sigma)
    W_c = np.asarray(W_c, dtype=np.float64).reshape(-1, d)
    w_tilde = np.asarray(w_tilde, dtype=np.float64).reshape(-1)
    eff = np.asarray(w, dtype=np.float64) - W_c.T @ w_tilde
    offset = float(b) - float(b_tilde)
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < samples:
        m = min(chunk, samples - done)
        z = rng.standard_normal((m, d)) @ L.T + mu
        e = (z @ eff + offset) ** 2
        total += float(e.sum())
        total_sq += float((e * e).sum())
        done += m
    mean = total / samples
    var = max(total_sq / samples - mean * mean, 0.0)
    return mean, math.sqrt(var / samples)


# ---------------------------------------------------------------------------
# Brute-force helpers
# ---------------------------------------------------------------------------


def brute_force_nec(W) -> float:
    count = 0
    for row in W:
        for v in row:
            if v != 0.0:
                count += 1
    return count / len(W) if len(W) else 0.0


def brute_force_prune(W, keep: int) -> np.ndarray:
    """Keep the ``keep`` largest-|w| nonzeros; ties removed in (row, col) order."""
    entries = []
    for i, row in enumerate(W):
        for j, v in enumerate(row):
            if v != 0.0:
                entries.append((abs(v), i, j))
    entries.sort()
    out = np.array(W, dtype=np.float64, copy=True)
    for _, i, j in entries[:max(len(entries) - keep, 0)]:
        out[i, j] = 0.0
    return out


def naive_matvec(W, z) -> np.ndarray:
    out = np.zeros(len(W))
    for i, row in enumerate(W):
        acc = 0.0
        for a, b in zip(row, z):
            acc += a * b
        out[i] = acc
    return out


def naive_bce(logits, targets, pos_scale: float) -> float:
    total = 0.0
    count = 0
    for lrow, orow in zip(np.atleast_2d(logits), np.atleast_2d(targets)):
        for l, o in zip(lrow, orow):
            p = 1.0 / (1.0 + math.exp(-l))
            total += -(pos_scale * o * math.log(p) + (1 - o) * math.log(1 - p))
            count += 1
    return total / count


def naive_objective(W, b, X, y, lam: float, alpha_mix: float) -> float:
    n = len(X)
    ce = 0.0
    for xi, yi in zip(X, y):
        logits = [sum(W[c][j] * xi[j] for j in range(len(xi))) + b[c] for c in range(len(W))]
        m = max(logits)
        ce += m + math.log(sum(math.exp(v - m) for v in logits)) - logits[yi]
    sq = sum(v * v for row in W for v in row)
    ab = sum(abs(v) for row in W for v in row)
    return ce / n + lam * ((1 - alpha_mix) * 0.5 * sq + alpha_mix * ab)


def two_pass_mean_std(values) -> tuple[np.ndarray, np.ndarray]:
    values = np.asarray(values, dtype=np.float64)
    mean = values.sum(axis=0) / values.shape[0]
    var = ((values - mean) ** 2).sum(axis=0) / values.shape[0]
    return mean, np.sqrt(var)


def brute_force_concept_set(records, vocab: ConceptVocabulary, T: float) -> list[str]:
    present = set()
    for r in records:
        for bx in r.boxes:
            if bx.confidence > T:
                present.add(bx.concept)
    return [s for s in vocab.concepts if s in present]


def reference_labels(records, concept_set, T: float) -> np.ndarray:
    """Single-pass labelling straight from unfiltered records."""
    out = np.zeros((len(records), len(concept_set)), dtype=np.uint8)
    for i, r in enumerate(records):
        for j, s in enumerate(concept_set):
            out[i, j] = int(any(bx.concept == s and bx.confidence > T for bx in r.boxes))
    return out
