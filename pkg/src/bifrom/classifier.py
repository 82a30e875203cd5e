"""Multilayer-perceptron cluster classifiers written directly in numpy.

Hidden layers use ReLU, the output layer softmax; training minimizes mean
cross-entropy with full-batch Adam.  Samples are rows.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DimensionMismatchError, DivergenceError, ValidationError
from .snapshot_store import format_float, read_matrix_csv, write_matrix_csv

log = logging.getLogger(__name__)

DEFAULT_HIDDEN = (512, 512, 512, 512, 512)


@dataclass(frozen=True)
class MlpClassifier:
    sizes: tuple
    weights: tuple    # W[l] has shape (sizes[l], sizes[l+1])
    biases: tuple
    seed: int = 0
    loss_history: tuple = ()
    train_accuracy: float = float("nan")

    @property
    def k(self) -> int:
        return self.sizes[-1]

    @property
    def n_inputs(self) -> int:
        return self.sizes[0]

    def params(self) -> list:
        return [*self.weights, *self.biases]


def init_mlp(sizes, seed=0) -> MlpClassifier:
    """He-scaled Gaussian weights, zero biases."""
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise ValidationError(f"invalid layer sizes {sizes}")
    rng = np.random.default_rng(seed)
    Ws = tuple(rng.standard_normal((a, b)) * np.sqrt(2.0 / a) for a, b in zip(sizes[:-1], sizes[1:]))
    bs = tuple(np.zeros(b) for b in sizes[1:])
    return MlpClassifier(sizes, Ws, bs, seed)


def softmax(Z):
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


def forward(clf: MlpClassifier, X):
    """Return (logits, cache) where cache holds every pre-activation and activation."""
    A = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if A.shape[1] != clf.n_inputs:
        raise DimensionMismatchError(f"expected {clf.n_inputs} inputs, got {A.shape[1]}")
    acts, pre = [A], []
    last = len(clf.weights) - 1
    for l, (W, b) in enumerate(zip(clf.weights, clf.biases)):
        Z = A @ W + b
        pre.append(Z)
        A = Z if l == last else np.maximum(Z, 0.0)
        acts.append(A)
    return A, (acts, pre)


def predict_proba(clf, X):
    return softmax(forward(clf, X)[0])


def cross_entropy(logits, y) -> float:
    Z = logits - logits.max(axis=1, keepdims=True)
    logp = Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(y)), y].mean())


def loss_and_grads(clf: MlpClassifier, X, y):
    logits, (acts, pre) = forward(clf, X)
    n = logits.shape[0]
    P = softmax(logits)
    loss = cross_entropy(logits, y)
    delta = P
    delta[np.arange(n), y] -= 1.0
    delta /= n
    gW, gb = [None] * len(clf.weights), [None] * len(clf.weights)
    for l in range(len(clf.weights) - 1, -1, -1):
        gW[l] = acts[l].T @ delta
        gb[l] = delta.sum(axis=0)
        if l:
            delta = (delta @ clf.weights[l].T) * (pre[l - 1] > 0)
    return loss, gW, gb


def train(clf: MlpClassifier, features, labels, epochs=2000, lr=1e-3, seed=None,
          beta1=0.9, beta2=0.999, eps=1e-8) -> MlpClassifier:
    """Full-batch Adam on mean cross-entropy; returns a new trained classifier."""
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64)
    if X.shape[0] != y.size:
        raise DimensionMismatchError("features and labels differ in length")
    if y.size and (y.min() < 0 or y.max() >= clf.k):
        raise ValidationError(f"labels must lie in [0, {clf.k})")
    Ws = [W.copy() for W in clf.weights]
    bs = [b.copy() for b in clf.biases]
    params = Ws + bs
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    cur = replace(clf, weights=tuple(Ws), biases=tuple(bs))
    history = []
    for t in range(1, epochs + 1):
        loss, gW, gb = loss_and_grads(cur, X, y)
        if not np.isfinite(loss):
            raise DivergenceError(t, "training loss is not finite")
        history.append(loss)
        for p, g, mi, vi in zip(params, gW + gb, m, v):
            mi *= beta1
            mi += (1 - beta1) * g
            vi *= beta2
            vi += (1 - beta2) * g * g
            mhat = mi / (1 - beta1 ** t)
            vhat = vi / (1 - beta2 ** t)
            p -= lr * mhat / (np.sqrt(vhat) + eps)
    acc = float(np.mean(predict(cur, X) == y)) if y.size else float("nan")
    misfit = int(np.sum(predict(cur, X) != y)) if y.size else 0
    if misfit:
        log.info("classifier misfits %d of %d training points", misfit, y.size)
    return replace(cur, weights=tuple(p.copy() for p in Ws), biases=tuple(p.copy() for p in bs),
                   loss_history=tuple(history), train_accuracy=acc,
                   seed=clf.seed if seed is None else seed)


def predict(clf: MlpClassifier, X) -> np.ndarray:
    """Arg-max class per row; ties go to the lowest id."""
    logits, _ = forward(clf, X)
    return np.argmax(logits, axis=1)


def predict_cluster(clf: MlpClassifier, parameter) -> int:
    return int(predict(clf, np.asarray(parameter, dtype=np.float64).reshape(1, -1))[0])


def _nudge_off_kinks(clf, X, margin, rng, tries=50):
    X = X.copy()
    for _ in range(tries):
        _, (_, pre) = forward(clf, X)
        near = np.zeros(X.shape[0], dtype=bool)
        for Z in pre[:-1]:
            near |= np.any(np.abs(Z) < margin, axis=1)
        if not near.any():
            return X
        X[near] += margin * 10 * rng.standard_normal((near.sum(), X.shape[1]))
    return X


def _loss_shift(clf, acts, pre, y, li, idx, d) -> float:
    """L(theta + d e_idx) - L(theta), propagated as small deltas to avoid cancellation."""
    nW = len(clf.weights)
    layer = li if li < nW else li - nW
    da = None
    for l in range(layer, nW):
        if l == layer:
            dz = np.zeros_like(pre[l])
            if li < nW:
                dz[:, idx[1]] += acts[l][:, idx[0]] * d
            else:
                dz[:, idx[0]] += d
        else:
            dz = da @ clf.weights[l]
        if l < nW - 1:
            z = pre[l]
            zn = z + dz
            same = (z > 0) == (zn > 0)
            da = np.where(same, np.where(z > 0, dz, 0.0), np.maximum(zn, 0.0) - np.maximum(z, 0.0))
    P = softmax(acts[-1])
    rows = np.arange(len(y))
    per = np.log1p((P * np.expm1(dz)).sum(axis=1)) - dz[rows, y]
    return float(per.mean())


def gradient_check(clf: MlpClassifier, X, y, n_weights=100, step=1e-6, seed=0) -> float:
    """Max relative discrepancy between backprop and central differences.

    Inputs whose hidden pre-activations sit within 1e-4 of the ReLU kink are
    nudged first, since the loss is not differentiable there.  Each loss
    difference is accumulated from layerwise activation deltas rather than by
    subtracting two nearly equal losses, so float64 roundoff does not swamp
    small gradients.
    """
    rng = np.random.default_rng(seed)
    X = _nudge_off_kinks(clf, np.atleast_2d(np.asarray(X, dtype=np.float64)), 1e-4, rng)
    y = np.asarray(y, dtype=np.int64)
    _, (acts, pre) = forward(clf, X)
    _, gW, gb = loss_and_grads(clf, X, y)
    params = [*clf.weights, *clf.biases]
    grads = gW + gb
    sizes = [p.size for p in params]
    picks = rng.choice(sum(sizes), size=min(n_weights, sum(sizes)), replace=False)
    offsets = np.cumsum([0] + sizes)
    worst = 0.0
    for flat in picks:
        li = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = np.unravel_index(flat - offsets[li], params[li].shape)
        num = (_loss_shift(clf, acts, pre, y, li, idx, step)
               - _loss_shift(clf, acts, pre, y, li, idx, -step)) / (2 * step)
        ana = grads[li][idx]
        denom = max(abs(num), abs(ana), 1e-7)
        worst = max(worst, abs(num - ana) / denom)
    return worst


# ---------------------------------------------------------------------------
# dual (one classifier per branch)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DualClassifier:
    upper: MlpClassifier
    lower: MlpClassifier

    def predict(self, q):
        """(upper-branch cluster, lower-branch cluster) for one normalized parameter."""
        return predict_cluster(self.upper, q), predict_cluster(self.lower, q)


def branch_labels(table, branch):
    """Rows of ``table`` on {single, branch} and their best (lowest-error) clusters."""
    tags = np.array(table.branches)
    rows = np.flatnonzero(np.isin(tags, ("single", branch)))
    return rows, table.best_clusters()[rows]


def train_dual(table, features, hidden=DEFAULT_HIDDEN, epochs=2000, lr=1e-3, seed=0) -> DualClassifier:
    """Train the upper-branch and lower-branch classifiers on error-table argmin labels.

    ``features`` are the snapshot parameters normalized to [0, 1], one row per
    table row.  Both nets start from the same initialization.
    """
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    k = table.errors.shape[1]
    sizes = (features.shape[1], *hidden, k)
    out = []
    for branch in ("upper", "lower"):
        rows, labels = branch_labels(table, branch)
        clf = init_mlp(sizes, seed)
        out.append(train(clf, features[rows], labels, epochs, lr, seed))
        log.info("%s-branch classifier: training accuracy %.4f", branch, out[-1].train_accuracy)
    return DualClassifier(*out)


def save_mlp(clf: MlpClassifier, path, stem="mlp", lo=None, hi=None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for l, (W, b) in enumerate(zip(clf.weights, clf.biases)):
        write_matrix_csv(path / f"{stem}_W{l}.csv", W)
        write_matrix_csv(path / f"{stem}_b{l}.csv", b[None, :])
    header = {"sizes": list(clf.sizes), "seed": clf.seed,
              "train_accuracy": format_float(clf.train_accuracy),
              "final_loss": format_float(clf.loss_history[-1]) if clf.loss_history else None,
              "normalization": None if lo is None else {
                  "lo": [format_float(v) for v in lo], "hi": [format_float(v) for v in hi]}}
    (path / f"{stem}.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def load_mlp(path, stem="mlp") -> MlpClassifier:
    path = Path(path)
    header = json.loads((path / f"{stem}.json").read_text())
    sizes = tuple(header["sizes"])
    Ws = tuple(read_matrix_csv(path / f"{stem}_W{l}.csv") for l in range(len(sizes) - 1))
    bs = tuple(read_matrix_csv(path / f"{stem}_b{l}.csv")[0] for l in range(len(sizes) - 1))
    for l, W in enumerate(Ws):
        if W.shape != (sizes[l], sizes[l + 1]):
            raise DimensionMismatchError(f"layer {l} weight has shape {W.shape}")
    return MlpClassifier(sizes, Ws, bs, header["seed"], (), float(header["train_accuracy"]))
