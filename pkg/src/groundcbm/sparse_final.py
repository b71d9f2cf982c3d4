"""Sparse final layer: multinomial logistic regression with an elastic-net
penalty, solved along a regularisation path, plus NEC control by path
selection and magnitude pruning.

The penalised objective is::

    mean CE(X W^T + b, y) + lam * ((1 - alpha) / 2 * ||W||_F^2 + alpha * ||W||_1)

with the bias ``b`` unpenalised.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .formats import ModelBundle

DEFAULT_ALPHA_MIX = 0.99
DEFAULT_PATH_POINTS = 50
DEFAULT_MIN_RATIO = 1.0 / 500.0


class ConvergenceError(ArithmeticError):
    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True, eq=False)
class SparseFinalLayer:
    weights: np.ndarray  # C x k
    bias: np.ndarray  # C
    lam: float = 0.0
    alpha_mix: float = DEFAULT_ALPHA_MIX
    iterations: int = 0
    kkt_residual: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.alpha_mix <= 1.0:
            raise ValueError(f"alpha_mix={self.alpha_mix} outside (0, 1]")
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError("bias length must equal number of classes")

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def k(self) -> int:
        return self.weights.shape[1]

    @property
    def nec(self) -> float:
        return nec(self.weights)

    def class_logits(self, concept_logits) -> np.ndarray:
        return np.asarray(concept_logits, dtype=np.float64) @ self.weights.T + self.bias

    def predict(self, concept_logits) -> np.ndarray:
        # np.argmax returns the lowest index among ties
        return np.argmax(self.class_logits(concept_logits), axis=1)


@dataclass(frozen=True)
class PathEntry:
    lam: float
    layer: SparseFinalLayer
    nec: float
    train_accuracy: float
    val_accuracy: float


@dataclass
class RegularizationPath:
    entries: list[PathEntry]
    lambda_max: float
    lambda_min: float
    num_points: int
    alpha_mix: float

    @property
    def decay(self) -> float:
        """Ratio between consecutive lambdas."""
        if self.num_points < 2:
            return 1.0
        return (self.lambda_min / self.lambda_max) ** (1.0 / (self.num_points - 1))

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([e.lam for e in self.entries])

    @property
    def necs(self) -> np.ndarray:
        return np.array([e.nec for e in self.entries])


# ---------------------------------------------------------------------------
# Objective pieces
# ---------------------------------------------------------------------------


def _one_hot(labels, n_classes):
    Y = np.zeros((labels.size, n_classes))
    Y[np.arange(labels.size), labels] = 1.0
    return Y


def _check_inputs(X, labels, n_classes=None):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(labels)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError(f"concept logits {X.shape} and labels {y.shape} disagree")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("labels must be integers")
    y = y.astype(np.int64)
    C = int(y.max()) + 1 if n_classes is None else int(n_classes)
    if y.size and (y.min() < 0 or y.max() >= C):
        raise ValueError(f"labels outside [0, {C})")
    if np.isnan(X).any():
        raise ValueError("NaN in concept logits")
    return X, y, C


def cross_entropy(X, Y, W, b) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean CE and its gradients w.r.t. ``W`` and ``b`` (one-hot ``Y``)."""
    # class-major (C x n) layout: reductions run along the long axis
    Z = W @ X.T + b[:, None]
    Z -= Z.max(axis=0)
    E = np.exp(Z)
    s = E.sum(axis=0)
    Yt = Y.T
    n = X.shape[0]
    # sum_i [log s_i - Z[y_i, i]]; Y is one-hot
    loss = float((np.log(s).sum() - np.vdot(Z, Yt)) / n)
    R = (E / s - Yt) / n
    return loss, R @ X, R.sum(axis=1)


def penalty(W, lam: float, alpha_mix: float) -> float:
    return lam * ((1.0 - alpha_mix) * 0.5 * float(np.sum(W * W))
                  + alpha_mix * float(np.sum(np.abs(W))))


def objective(layer: SparseFinalLayer, concept_logits, labels, lam: float,
              alpha_mix: float) -> float:
    """Mean multinomial cross-entropy plus the elastic-net penalty on
    ``layer.weights`` (bias unpenalised)."""
    X, y, _ = _check_inputs(concept_logits, labels, layer.n_classes)
    ce, _, _ = cross_entropy(X, _one_hot(y, layer.n_classes), layer.weights, layer.bias)
    val = ce + penalty(layer.weights, lam, alpha_mix)
    if math.isnan(val):
        raise ValueError("objective is NaN")
    return val


def kkt_residual(X, Y, W, b, lam, alpha_mix, grads=None) -> float:
    """Largest violation of the elastic-net optimality conditions."""
    if grads is None:
        _, gW, gb = cross_entropy(X, Y, W, b)
    else:
        gW, gb = grads
    gW = gW + lam * (1.0 - alpha_mix) * W
    l1 = lam * alpha_mix
    nz = W != 0
    viol = np.where(nz, np.abs(gW + l1 * np.sign(W)), np.maximum(np.abs(gW) - l1, 0.0))
    res = float(viol.max()) if viol.size else 0.0
    if gb.size:
        res = max(res, float(np.abs(gb).max()))
    return res


def class_prior_bias(labels, n_classes) -> np.ndarray:
    """Centred log class frequencies: the optimal bias when ``W = 0``."""
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise ValueError(f"classes {missing} have no training samples")
    logp = np.log(counts / counts.sum())
    return logp - logp.mean()


def compute_lambda_max(concept_logits, labels, alpha_mix: float = DEFAULT_ALPHA_MIX,
                       n_classes: Optional[int] = None) -> float:
    """Smallest lambda whose solution has ``W = 0``.

    This is ``max |dCE/dW|`` at ``W = 0`` with the bias at the class-prior
    optimum, divided by ``alpha_mix``; nudged up by ulps so that
    ``lambda_max * alpha_mix`` dominates every gradient entry in floating
    point.
    """
    if alpha_mix <= 0:
        raise ValueError("alpha_mix must be > 0: a pure ridge penalty never zeroes weights")
    X, y, C = _check_inputs(concept_logits, labels, n_classes)
    b0 = class_prior_bias(y, C)
    _, gW, _ = cross_entropy(X, _one_hot(y, C), np.zeros((C, X.shape[1])), b0)
    gmax = float(np.abs(gW).max()) if gW.size else 0.0
    lam = gmax / alpha_mix
    while lam * alpha_mix < gmax:
        lam = np.nextafter(lam, np.inf)
    return float(lam)


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------


def _soft_threshold(v, t):
    # entries with |v| <= t become literal 0.0
    return np.where(np.abs(v) > t, v - t * np.sign(v), 0.0)


def solve_elastic_net(concept_logits, labels, lam: float,
                      alpha_mix: float = DEFAULT_ALPHA_MIX,
                      warm_start: Optional[SparseFinalLayer] = None,
                      tol: float = 1e-7, max_iter: int = 50000,
                      n_classes: Optional[int] = None) -> SparseFinalLayer:
    """Accelerated proximal gradient (FISTA) with backtracking and
    gradient-based adaptive restart.

    The ridge part is folded into the smooth gradient and the l1 part is
    handled by soft-thresholding, so zero weights are exact zeros.
    Iterates until the KKT residual (see :func:`kkt_residual`) is at most
    ``tol``.

    Raises
    ------
    ConvergenceError
        If ``max_iter`` iterations do not reach ``tol``.
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    if tol <= 0:
        raise ValueError("tol must be > 0")
    if not 0.0 < alpha_mix <= 1.0:
        raise ValueError(f"alpha_mix={alpha_mix} outside (0, 1]")
    X, y, C = _check_inputs(concept_logits, labels, n_classes)
    n, k = X.shape
    Y = _one_hot(y, C)
    ridge = lam * (1.0 - alpha_mix)
    l1 = lam * alpha_mix

    if warm_start is not None:
        if warm_start.weights.shape != (C, k):
            raise ValueError("warm start has the wrong shape")
        W = warm_start.weights.astype(np.float64).copy()
        b = warm_start.bias.astype(np.float64).copy()
    else:
        W = np.zeros((C, k))
        b = class_prior_bias(y, C)

    def smooth(W_, b_):
        f, gW, gb = cross_entropy(X, Y, W_, b_)
        return f + 0.5 * ridge * float(np.sum(W_ * W_)), gW + ridge * W_, gb, gW

    fx, gWx, gbx, ceW = smooth(W, b)
    res = kkt_residual(X, Y, W, b, lam, alpha_mix, grads=(ceW, gbx))
    if res <= tol:
        return SparseFinalLayer(W, b, float(lam), alpha_mix, 0, res)

    # softmax CE Hessian is bounded by ||[X 1]||^2 / (2n)
    L = 0.5 * (np.linalg.norm(X, 2) ** 2 + n) / n + ridge
    L = max(L * 0.25, 1e-12)
    yW, yb = W.copy(), b.copy()
    t = 1.0
    for it in range(1, max_iter + 1):
        fy, gWy, gby, _ = smooth(yW, yb)
        while True:
            nW = _soft_threshold(yW - gWy / L, l1 / L)
            nb = yb - gby / L
            dW, db = nW - yW, nb - yb
            fn, gWn, gbn, ceWn = smooth(nW, nb)
            quad = (fy + float(np.sum(gWy * dW) + np.sum(gby * db))
                    + 0.5 * L * float(np.sum(dW * dW) + np.sum(db * db)))
            if fn <= quad + 1e-15 * max(1.0, abs(fy)):
                break
            L *= 2.0
        res = kkt_residual(X, Y, nW, nb, lam, alpha_mix, grads=(ceWn, gbn))
        if res <= tol:
            return SparseFinalLayer(nW, nb, float(lam), alpha_mix, it, res)
        # restart momentum when it points uphill
        if float(np.sum((yW - nW) * (nW - W)) + np.sum((yb - nb) * (nb - b))) > 0:
            t = 1.0
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        beta = (t - 1.0) / t_next
        yW = nW + beta * (nW - W)
        yb = nb + beta * (nb - b)
        W, b, t = nW, nb, t_next
        L *= 0.95
    raise ConvergenceError(
        f"no convergence in {max_iter} iterations at lam={lam:.3g}: "
        f"KKT residual {res:.3g} > tol {tol:.3g}", residual=res, iterations=max_iter)


def accuracy_of(layer: SparseFinalLayer, concept_logits, labels) -> float:
    y = np.asarray(labels)
    if y.size == 0:
        return float("nan")
    return float(np.mean(layer.predict(concept_logits) == y))


def path_lambdas(lambda_max: float, num_points: int = DEFAULT_PATH_POINTS,
                 min_ratio: float = DEFAULT_MIN_RATIO) -> np.ndarray:
    """``lambda_max * min_ratio ** (t / (num_points - 1))`` for t = 0..num_points-1."""
    if num_points < 1:
        raise ValueError("num_points must be >= 1")
    if not 0.0 < min_ratio < 1.0:
        raise ValueError("min_ratio must lie in (0, 1)")
    if num_points == 1:
        return np.array([lambda_max])
    t = np.arange(num_points)
    return lambda_max * min_ratio ** (t / (num_points - 1))


def solve_path(train_logits, train_labels, val_logits=None, val_labels=None,
               alpha_mix: float = DEFAULT_ALPHA_MIX,
               num_points: int = DEFAULT_PATH_POINTS,
               min_ratio: float = DEFAULT_MIN_RATIO, tol: float = 1e-7,
               max_iter: int = 50000, n_classes: Optional[int] = None,
               ) -> RegularizationPath:
    """Warm-started solutions from ``lambda_max`` down to
    ``lambda_max * min_ratio`` on a log-even grid."""
    X, y, C = _check_inputs(train_logits, train_labels, n_classes)
    have_val = val_logits is not None and val_labels is not None
    lam_max = compute_lambda_max(X, y, alpha_mix, C)
    lams = path_lambdas(lam_max, num_points, min_ratio)
    entries = []
    prev = None
    for lam in lams:
        layer = solve_elastic_net(X, y, float(lam), alpha_mix, warm_start=prev,
                                  tol=tol, max_iter=max_iter, n_classes=C)
        entries.append(PathEntry(
            lam=float(lam), layer=layer, nec=layer.nec,
            train_accuracy=accuracy_of(layer, X, y),
            val_accuracy=accuracy_of(layer, val_logits, val_labels) if have_val
            else float("nan")))
        prev = layer
    return RegularizationPath(entries, float(lams[0]), float(lams[-1]),
                              int(num_points), float(alpha_mix))


# ---------------------------------------------------------------------------
# NEC control
# ---------------------------------------------------------------------------


def nec(W) -> float:
    """Mean number of exactly-nonzero weights per class row."""
    W = np.asarray(W)
    if W.shape[0] == 0:
        return 0.0
    return float(np.count_nonzero(W)) / W.shape[0]


def _target_count(target_nec: float, n_classes: int) -> int:
    return int(math.floor(target_nec * n_classes + 0.5))


def prune_to_nec(layer: SparseFinalLayer, target_nec: float,
                 per_row: bool = False) -> SparseFinalLayer:
    """Zero the smallest-magnitude weights until NEC equals ``target_nec``.

    Global pruning keeps ``round(target_nec * C)`` weights over the whole
    matrix.  ``per_row=True`` instead keeps the ``round(target_nec)``
    largest weights of every row (rows already below that are untouched).
    Equal magnitudes are removed in (row, column) order.
    """
    if target_nec < 0:
        raise ValueError("target_nec must be >= 0")
    W = layer.weights
    C, k = W.shape
    out = W.copy()
    if per_row:
        keep = int(math.floor(target_nec + 0.5))
        for i in range(C):
            cols = np.flatnonzero(W[i])
            if cols.size <= keep:
                continue
            # stable sort on |w| keeps column order among ties
            order = cols[np.argsort(np.abs(W[i, cols]), kind="stable")]
            out[i, order[:cols.size - keep]] = 0.0
    else:
        have = np.count_nonzero(W)
        want = _target_count(target_nec, C)
        if want > have:
            raise ValueError(
                f"cannot prune upward: layer NEC {have / C:g} < target {target_nec:g}")
        flat = np.flatnonzero(W.ravel())  # row-major == (row, column) order
        order = flat[np.argsort(np.abs(W.ravel()[flat]), kind="stable")]
        out.ravel()[order[:have - want]] = 0.0
    return SparseFinalLayer(out, layer.bias.copy(), layer.lam, layer.alpha_mix,
                            layer.iterations, layer.kkt_residual)


def select_for_nec(path: RegularizationPath, target_nec: float) -> SparseFinalLayer:
    """Entry with the smallest NEC not below ``target_nec``, pruned to
    exactly ``target_nec``.  Among entries of equal NEC the one with the
    smallest lambda (least shrinkage) wins.  If every entry is below the
    target, the densest entry is returned unpruned."""
    if not path.entries:
        raise ValueError("empty regularisation path")
    above = [e for e in path.entries if e.nec >= target_nec]
    if above:
        best = min(above, key=lambda e: (e.nec, e.lam))
        return prune_to_nec(best.layer, target_nec)
    best = max(path.entries, key=lambda e: e.nec)
    return best.layer


# ---------------------------------------------------------------------------
# Serialisation
# ---------------------------------------------------------------------------


def layer_bundle_parts(layer: SparseFinalLayer) -> tuple[dict, dict[str, np.ndarray]]:
    meta = {"dims": {"C": layer.n_classes, "k": layer.k}, "lambda": layer.lam,
            "alpha_mix": layer.alpha_mix, "nec": layer.nec}
    return meta, {"W_F": layer.weights, "b_F": layer.bias}


def layer_from_bundle(bundle: ModelBundle) -> SparseFinalLayer:
    meta = bundle.metadata
    return SparseFinalLayer(
        weights=bundle.arrays["W_F"].astype(np.float64),
        bias=bundle.arrays["b_F"].astype(np.float64),
        lam=float(meta.get("lambda", 0.0)),
        alpha_mix=float(meta.get("alpha_mix", DEFAULT_ALPHA_MIX)))


def path_to_bundle(path: RegularizationPath, extra: Optional[dict] = None) -> ModelBundle:
    meta = {
        "kind": "regularization-path",
        "lambda_max": path.lambda_max, "lambda_min": path.lambda_min,
        "num_points": path.num_points, "alpha_mix": path.alpha_mix,
        "entries": [{"lambda": e.lam, "nec": e.nec,
                     "train_accuracy": e.train_accuracy,
                     "val_accuracy": None if math.isnan(e.val_accuracy) else e.val_accuracy}
                    for e in path.entries],
    }
    if extra:
        meta.update(extra)
    arrays = {}
    for t, e in enumerate(path.entries):
        arrays[f"W_F/{t:03d}"] = e.layer.weights
        arrays[f"b_F/{t:03d}"] = e.layer.bias
    return ModelBundle(meta, arrays)


def path_from_bundle(bundle: ModelBundle) -> RegularizationPath:
    meta = bundle.metadata
    if meta.get("kind") != "regularization-path":
        raise ValueError("bundle does not hold a regularisation path")
    alpha = float(meta["alpha_mix"])
    entries = []
    for t, rec in enumerate(meta["entries"]):
        layer = SparseFinalLayer(
            bundle.arrays[f"W_F/{t:03d}"].astype(np.float64),
            bundle.arrays[f"b_F/{t:03d}"].astype(np.float64),
            float(rec["lambda"]), alpha)
        val = rec["val_accuracy"]
        entries.append(PathEntry(float(rec["lambda"]), layer, layer.nec,
                                 float(rec["train_accuracy"]),
                                 float("nan") if val is None else float(val)))
    return RegularizationPath(entries, float(meta["lambda_max"]),
                              float(meta["lambda_min"]), int(meta["num_points"]), alpha)


def path_table(path: RegularizationPath) -> tuple[list[str], list[tuple]]:
    rows = [(t, e.lam, e.nec, e.train_accuracy,
             "" if math.isnan(e.val_accuracy) else e.val_accuracy)
            for t, e in enumerate(path.entries)]
    return ["index", "lambda", "nec", "train_accuracy", "val_accuracy"], rows
