"""Concept bottleneck layer: a linear map from backbone embeddings to concept
logits, trained with multi-label binary cross-entropy."""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .dataset import AuxiliaryDataset, emit_augmentations
from .formats import EmbeddingMatrix, ModelBundle

STD_FLOOR = 1e-6


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True, eq=False)
class ConceptBottleneck:
    """``g(z) = W_c z + b_c`` plus per-concept normalisation statistics."""

    weights: np.ndarray
    bias: Optional[np.ndarray] = None
    norm_mean: Optional[np.ndarray] = None
    norm_std: Optional[np.ndarray] = None

    def __post_init__(self):
        k, d = np.shape(self.weights)
        for name in ("bias", "norm_mean", "norm_std"):
            v = getattr(self, name)
            if v is not None and np.shape(v) != (k,):
                raise ValueError(f"{name} has shape {np.shape(v)}, expected ({k},)")
        if self.norm_std is not None and not np.all(self.norm_std > 0):
            raise ValueError("norm_std must be strictly positive")

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    @property
    def d(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class CblTrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    epochs: int = 30
    batch_size: int = 32
    pos_loss_scale: Optional[float] = None  # None: derived from label balance
    augmentation_prob: float = 0.2
    val_fraction: float = 0.1
    use_bias: bool = True
    init: str = "zeros"  # or "uniform": U(-1/sqrt(d), 1/sqrt(d))
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("learning_rate must be > 0 and weight_decay >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.pos_loss_scale is not None and self.pos_loss_scale <= 0:
            raise ValueError("pos_loss_scale must be > 0")
        if not 0.0 <= self.augmentation_prob <= 1.0:
            raise ValueError("augmentation_prob must lie in [0, 1]")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.init not in ("zeros", "uniform"):
            raise ValueError(f"init must be 'zeros' or 'uniform', got {self.init!r}")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def bce_multilabel_loss(logits, targets, pos_scale: float = 1.0) -> float:
    """Mean over samples and concepts of
    ``-[s*o*log(sigmoid(l)) + (1-o)*log(1-sigmoid(l))]``."""
    return bce_loss_and_grad(logits, targets, pos_scale)[0]


def bce_loss_and_grad(logits, targets, pos_scale: float = 1.0):
    """Loss as in :func:`bce_multilabel_loss` and its gradient w.r.t. logits."""
    logits = np.asarray(logits, dtype=np.float64)
    o = np.asarray(targets, dtype=np.float64)
    if logits.shape != o.shape:
        raise ValueError(f"logits {logits.shape} vs targets {o.shape}")
    if pos_scale <= 0:
        raise ValueError("pos_scale must be > 0")
    if np.isnan(logits).any():
        raise NumericalError("NaN in logits")
    # -log sigmoid(l) = softplus(-l); -log(1 - sigmoid(l)) = softplus(l)
    sp_neg = np.logaddexp(0.0, -logits)
    sp_pos = np.logaddexp(0.0, logits)
    per = pos_scale * o * sp_neg + (1.0 - o) * sp_pos
    count = per.size
    loss = float(per.sum() / count) if count else 0.0
    s = _sigmoid(logits)
    grad = (pos_scale * o * (s - 1.0) + (1.0 - o) * s) / max(count, 1)
    return loss, grad


def default_pos_scale(labels) -> float:
    """Median over concepts of #neg/#pos, clamped to [1, 100]."""
    labels = np.asarray(labels)
    pos = labels.sum(axis=0).astype(np.float64)
    neg = labels.shape[0] - pos
    with np.errstate(divide="ignore"):
        ratio = np.where(pos > 0, neg / np.maximum(pos, 1), np.inf)
    return float(np.median(np.clip(ratio, 1.0, 100.0)))


def concept_auc(scores, labels) -> np.ndarray:
    """Per-concept ROC AUC (Mann-Whitney form); NaN where a concept has only
    one label value."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    out = np.full(scores.shape[1], np.nan)
    for j in range(scores.shape[1]):
        y = labels[:, j]
        n_pos = int(y.sum())
        n_neg = y.size - n_pos
        if n_pos == 0 or n_neg == 0:
            continue
        r = rankdata(scores[:, j])
        out[j] = (r[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)
    return out


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


class _Adam:
    """Adam with L2 weight decay added to the gradient."""

    def __init__(self, params, lr, weight_decay, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr, self.wd, self.eps = lr, weight_decay, eps
        self.b1, self.b2 = betas
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if self.wd:
                g = g + self.wd * p
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def split_indices(n: int, val_fraction: float, seed) -> tuple[np.ndarray, np.ndarray]:
    """Uniform (unstratified) train/validation split of ``range(n)``."""
    n_val = int(round(val_fraction * n))
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def train_val_split(n: int, cfg: "CblTrainConfig") -> tuple[np.ndarray, np.ndarray]:
    """The train/validation split :func:`train_cbl` uses for ``cfg``."""
    return split_indices(n, cfg.val_fraction, np.random.SeedSequence(cfg.seed).spawn(3)[0])


def train_cbl(dataset: AuxiliaryDataset, crop_embeddings: Optional[EmbeddingMatrix],
              cfg: CblTrainConfig = CblTrainConfig(), history: Optional[list] = None,
              ) -> ConceptBottleneck:
    """Fit ``W_c`` (and ``b_c``) by minibatch Adam on the BCE loss.

    Each epoch, every training image whose filtered record has at least one
    box is replaced with probability ``cfg.augmentation_prob`` by the
    embedding of a uniformly drawn box crop, with a one-hot target for that
    box's concept.  A fraction ``cfg.val_fraction`` of images is held out for
    the per-epoch AUC in ``history``.

    If ``history`` is a list, one dict per epoch is appended with keys
    ``epoch``, ``loss`` (full training-split loss without augmentation),
    ``batch_loss`` (mean minibatch loss as optimised) and ``val_auc``
    (per-concept array, empty when there is no validation split).
    """
    n, k = dataset.n, dataset.k
    if n < 1 or k < 1:
        raise ValueError(f"need n >= 1 and k >= 1, got n={n} k={k}")
    X = dataset.features()
    O = dataset.concept_labels.astype(np.float64)
    d = X.shape[1]
    if crop_embeddings is not None and crop_embeddings.d != d:
        raise ValueError(f"crop embeddings have d={crop_embeddings.d}, dataset d={d}")

    _, init_seed, loop_seed = np.random.SeedSequence(cfg.seed).spawn(3)
    train_idx, val_idx = train_val_split(n, cfg)
    if train_idx.size == 0:
        raise ValueError("empty training split")
    pos_scale = (cfg.pos_loss_scale if cfg.pos_loss_scale is not None
                 else default_pos_scale(O[train_idx]))

    if cfg.init == "uniform":
        bound = 1.0 / np.sqrt(d)
        W = np.random.default_rng(init_seed).uniform(-bound, bound, size=(k, d))
    else:
        # the BCE problem is convex; starting at zero keeps concepts from
        # inheriting random cross-talk that a short run cannot remove
        W = np.zeros((k, d))
    b = np.zeros(k)
    params = [W, b] if cfg.use_bias else [W]
    opt = _Adam(params, cfg.learning_rate, cfg.weight_decay)

    augment = cfg.augmentation_prob > 0 and crop_embeddings is not None
    train_records = [dataset.records[i] for i in train_idx] if augment else []
    loop_rng = np.random.default_rng(loop_seed)

    for epoch in range(cfg.epochs):
        Xe = X[train_idx].copy()
        Oe = O[train_idx].copy()
        if augment:
            crops = emit_augmentations(
                train_records, dataset.concept_set,
                seed=[cfg.seed, epoch, 0x5eed])
            by_image = {a.image_id: a for a in crops}
            apply = loop_rng.random(train_idx.size) < cfg.augmentation_prob
            for pos in np.flatnonzero(apply):
                a = by_image.get(dataset.ids[train_idx[pos]])
                if a is None:
                    continue
                Xe[pos] = crop_embeddings.values[
                    crop_embeddings.index_of(a.crop_embedding_id)]
                Oe[pos] = 0.0
                Oe[pos, a.concept_index] = 1.0
        order = loop_rng.permutation(train_idx.size)
        batch_losses = []
        for bi, start in enumerate(range(0, order.size, cfg.batch_size)):
            sel = order[start:start + cfg.batch_size]
            logits = Xe[sel] @ W.T + b
            loss, G = bce_loss_and_grad(logits, Oe[sel], pos_scale)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch} batch {bi}")
            batch_losses.append(loss)
            grads = [G.T @ Xe[sel], G.sum(axis=0)] if cfg.use_bias else [G.T @ Xe[sel]]
            opt.step(grads)
        if history is not None:
            full = bce_multilabel_loss(X[train_idx] @ W.T + b, O[train_idx], pos_scale)
            auc = (concept_auc(X[val_idx] @ W.T + b, O[val_idx])
                   if val_idx.size else np.array([]))
            history.append({"epoch": epoch, "loss": full,
                            "batch_loss": float(np.mean(batch_losses)),
                            "val_auc": auc})

    return ConceptBottleneck(weights=W, bias=b.copy() if cfg.use_bias else None)


# ---------------------------------------------------------------------------
# Inference and normalisation
# ---------------------------------------------------------------------------


def predict_concepts(cb: ConceptBottleneck, z, normalized: bool = False) -> np.ndarray:
    """Concept logits for one embedding (``d``) or a batch (``n x d``)."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != cb.d:
        raise ValueError(f"embedding dim {z.shape[-1]} != CBL input dim {cb.d}")
    raw = z @ cb.weights.T
    if cb.bias is not None:
        raw = raw + cb.bias
    if not normalized:
        return raw
    if cb.norm_mean is None:
        raise ValueError("normalisation statistics not fitted")
    return (raw - cb.norm_mean) / cb.norm_std


def fit_normalization(cb: ConceptBottleneck, embeddings, chunk_size: int = 4096
                      ) -> ConceptBottleneck:
    """Per-concept mean and (population) std of raw logits over
    ``embeddings``, accumulated chunk by chunk with the pairwise
    Chan et al. update.  ``embeddings`` is an ``(n, d)`` array or an
    :class:`AuxiliaryDataset`."""
    if isinstance(embeddings, AuxiliaryDataset):
        embeddings = embeddings.features()
    Z = np.asarray(embeddings, dtype=np.float64)
    count = 0
    mean = np.zeros(cb.k)
    m2 = np.zeros(cb.k)
    for start in range(0, Z.shape[0], chunk_size):
        raw = predict_concepts(cb, Z[start:start + chunk_size])
        nb = raw.shape[0]
        mb = raw.mean(axis=0)
        m2b = ((raw - mb) ** 2).sum(axis=0)
        delta = mb - mean
        tot = count + nb
        mean = mean + delta * (nb / tot)
        m2 = m2 + m2b + delta ** 2 * (count * nb / tot)
        count = tot
    if count == 0:
        raise ValueError("no embeddings to fit normalisation on")
    std = np.maximum(np.sqrt(m2 / count), STD_FLOOR)
    return replace(cb, norm_mean=mean, norm_std=std)


def to_bundle_parts(cb: ConceptBottleneck) -> tuple[dict, dict[str, np.ndarray]]:
    """Header metadata and float32 payloads for a :class:`ModelBundle`.

    Normalisation statistics travel in the (float64-exact JSON) header.
    """
    meta = {"dims": {"k": cb.k, "d": cb.d}, "has_cbl_bias": cb.bias is not None}
    if cb.norm_mean is not None:
        meta["norm_mean"] = [float(v) for v in cb.norm_mean]
        meta["norm_std"] = [float(v) for v in cb.norm_std]
    arrays = {"W_c": cb.weights}
    if cb.bias is not None:
        arrays["b_c"] = cb.bias
    return meta, arrays


def from_bundle(bundle: ModelBundle) -> ConceptBottleneck:
    meta, a = bundle.metadata, bundle.arrays
    if "W_c" not in a:
        raise ValueError("bundle has no W_c payload")
    mean = meta.get("norm_mean")
    std = meta.get("norm_std")
    return ConceptBottleneck(
        weights=a["W_c"].astype(np.float64),
        bias=a["b_c"].astype(np.float64) if "b_c" in a else None,
        norm_mean=None if mean is None else np.array(mean, dtype=np.float64),
        norm_std=None if std is None else np.array(std, dtype=np.float64))
