"""Extremely randomized trees for vector regression and classification.

Both tasks share one tree grower. Classification targets are one-hot encoded,
which makes the Gini criterion and the summed per-output variance criterion
the same quantity up to constants: at a candidate split the grower maximizes

    sum_k SL_k**2 / nL + sum_k SR_k**2 / nR

where SL, SR are the per-output target sums of the two children. Leaves store
the mean target vector (class frequencies for classification).

Every tree draws from its own stream seeded by ``(seed, tree_index)``, so
fits are reproducible and independent of whether trees are grown serially or
on a thread pool. Growing and traversal run in numba-compiled kernels.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
import math
from typing import Optional

import numpy as np
from numba import njit

from . import binio

MAGIC = b"XTEN"
FORMAT_VERSION = 1

# Redraws allowed when every candidate cut of a node violates min_samples_leaf.
_MAX_DRAWS = 4


class TreeError(ValueError):
    pass


@dataclass(frozen=True)
class TreeEnsembleParams:
    n_trees: int = 50
    k_features: Optional[int] = None  # None -> ceil(sqrt(input_dim))
    min_samples_leaf: int = 20
    max_depth: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise TreeError("n_trees must be >= 1")
        if self.min_samples_leaf < 1:
            raise TreeError("min_samples_leaf must be >= 1")
        if self.k_features is not None and self.k_features < 1:
            raise TreeError("k_features must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise TreeError("max_depth must be >= 0")

    def resolve_k(self, input_dim: int) -> int:
        k = self.k_features if self.k_features is not None else math.ceil(math.sqrt(input_dim))
        if k > input_dim:
            raise TreeError(f"k_features={k} exceeds input dimension {input_dim}")
        return k


@dataclass
class Tree:
    """One fitted tree. ``feature[i] < 0`` marks node ``i`` as a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray
    importances: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def leaf_sizes(self) -> np.ndarray:
        return self.n_samples[self.feature < 0]


@njit(cache=True, nogil=True)
def _grow_tree_kernel(X, Y, k, min_leaf, max_depth, seed):
    np.random.seed(seed)
    n, p = X.shape
    d = Y.shape[1]
    cap = 2 * n + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros((cap, d))
    n_samples = np.zeros(cap, dtype=np.int64)
    importances = np.zeros(p)

    idx = np.arange(n)
    st_node = np.empty(cap, dtype=np.int64)
    st_lo = np.empty(cap, dtype=np.int64)
    st_hi = np.empty(cap, dtype=np.int64)
    st_depth = np.empty(cap, dtype=np.int64)
    top = 0
    st_node[0] = 0
    st_lo[0] = 0
    st_hi[0] = n
    st_depth[0] = 0
    top = 1
    n_nodes = 1

    lo_f = np.empty(p)
    hi_f = np.empty(p)
    active = np.empty(p, dtype=np.int64)
    total = np.empty(d)
    ymin = np.empty(d)
    ymax = np.empty(d)
    feats = np.empty(k, dtype=np.int64)
    cuts = np.empty(k)
    n_left = np.empty(k, dtype=np.int64)
    sum_left = np.empty((k, d))

    while top > 0:
        top -= 1
        node = st_node[top]
        a = st_lo[top]
        b = st_hi[top]
        depth = st_depth[top]
        m = b - a

        for j in range(d):
            total[j] = 0.0
            ymin[j] = np.inf
            ymax[j] = -np.inf
        for r in range(a, b):
            row = idx[r]
            for j in range(d):
                v = Y[row, j]
                total[j] += v
                if v < ymin[j]:
                    ymin[j] = v
                if v > ymax[j]:
                    ymax[j] = v
        for j in range(d):
            value[node, j] = total[j] / m
        n_samples[node] = m

        if m < 2 * min_leaf or (max_depth >= 0 and depth >= max_depth):
            continue
        pure = True
        for j in range(d):
            if ymax[j] > ymin[j]:
                pure = False
                break
        if pure:
            continue

        for f in range(p):
            lo_f[f] = np.inf
            hi_f[f] = -np.inf
        for r in range(a, b):
            row = idx[r]
            for f in range(p):
                v = X[row, f]
                if v < lo_f[f]:
                    lo_f[f] = v
                if v > hi_f[f]:
                    hi_f[f] = v
        n_active = 0
        for f in range(p):
            if hi_f[f] > lo_f[f]:
                active[n_active] = f
                n_active += 1
        if n_active == 0:
            continue
        kk = min(k, n_active)

        found = False
        for _ in range(_MAX_DRAWS):
            # partial Fisher-Yates over the active features
            for i in range(kk):
                jsw = i + int(np.random.random() * (n_active - i))
                if jsw >= n_active:
                    jsw = n_active - 1
                tmp = active[i]
                active[i] = active[jsw]
                active[jsw] = tmp
                feats[i] = active[i]
                f = feats[i]
                cuts[i] = lo_f[f] + (hi_f[f] - lo_f[f]) * np.random.random()
            for i in range(kk):
                n_left[i] = 0
                for j in range(d):
                    sum_left[i, j] = 0.0
            for r in range(a, b):
                row = idx[r]
                for i in range(kk):
                    if X[row, feats[i]] < cuts[i]:
                        n_left[i] += 1
                        for j in range(d):
                            sum_left[i, j] += Y[row, j]
            for i in range(kk):
                if n_left[i] >= min_leaf and m - n_left[i] >= min_leaf:
                    found = True
            if found:
                break
        if not found:
            continue

        best = -1
        best_score = -np.inf
        for i in range(kk):
            nl = n_left[i]
            nr = m - nl
            if nl < min_leaf or nr < min_leaf:
                continue
            sl = 0.0
            sr = 0.0
            for j in range(d):
                sl += sum_left[i, j] * sum_left[i, j]
                rj = total[j] - sum_left[i, j]
                sr += rj * rj
            score = sl / nl + sr / nr
            if score > best_score:
                best_score = score
                best = i
        parent = 0.0
        for j in range(d):
            parent += total[j] * total[j]
        gain = best_score - parent / m
        f = feats[best]
        cut = cuts[best]
        if gain > 0.0:
            importances[f] += gain

        # in-place partition of idx[a:b] on X[:, f] < cut
        i0 = a
        i1 = b - 1
        while i0 <= i1:
            if X[idx[i0], f] < cut:
                i0 += 1
            else:
                tmp = idx[i0]
                idx[i0] = idx[i1]
                idx[i1] = tmp
                i1 -= 1
        mid = i0

        lnode = n_nodes
        rnode = n_nodes + 1
        n_nodes += 2
        feature[node] = f
        threshold[node] = cut
        left[node] = lnode
        right[node] = rnode
        st_node[top] = rnode
        st_lo[top] = mid
        st_hi[top] = b
        st_depth[top] = depth + 1
        top += 1
        st_node[top] = lnode
        st_lo[top] = a
        st_hi[top] = mid
        st_depth[top] = depth + 1
        top += 1

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy(), n_samples[:n_nodes].copy(),
            importances)


@njit(cache=True, nogil=True)
def _apply_kernel(X, roots, feature, threshold, left, right):
    n = X.shape[0]
    T = roots.shape[0]
    out = np.empty((n, T), dtype=np.int64)
    for i in range(n):
        for t in range(T):
            node = roots[t]
            while feature[node] >= 0:
                if X[i, feature[node]] < threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            out[i, t] = node
    return out


@njit(cache=True, nogil=True)
def _mean_value_kernel(X, roots, feature, threshold, left, right, value):
    n = X.shape[0]
    T = roots.shape[0]
    d = value.shape[1]
    out = np.zeros((n, d))
    for i in range(n):
        for t in range(T):
            node = roots[t]
            while feature[node] >= 0:
                if X[i, feature[node]] < threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            for j in range(d):
                out[i, j] += value[node, j]
        for j in range(d):
            out[i, j] /= T
    return out


def _tree_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint32)[0])


def _grow_tree(X, Y, k, min_leaf, max_depth, seed) -> Tree:
    depth = -1 if max_depth is None else max_depth
    parts = _grow_tree_kernel(X, Y, k, min_leaf, depth, seed)
    return Tree(*parts)


class FittedEnsemble:
    """Immutable ensemble of fitted trees.

    Trees are flattened into shared node arrays with global child indices so
    that prediction walks every (row, tree) pair in one vectorized loop.
    """

    def __init__(self, task: str, trees, input_dim: int, params: TreeEnsembleParams):
        if task not in ("regression", "classification"):
            raise TreeError(f"unknown task {task!r}")
        if not trees:
            raise TreeError("ensemble needs at least one tree")
        self.task = task
        self.params = params
        self.input_dim = int(input_dim)
        self.output_dim = int(trees[0].value.shape[1])
        self.trees = list(trees)

        sizes = np.array([t.n_nodes for t in self.trees])
        self.roots = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        self._feature = np.concatenate([t.feature for t in self.trees])
        self._threshold = np.concatenate([t.threshold for t in self.trees])
        shifted = []
        for off, t in zip(self.roots, self.trees):
            shifted.append((np.where(t.left >= 0, t.left + off, -1),
                            np.where(t.right >= 0, t.right + off, -1)))
        self._left = np.concatenate([s[0] for s in shifted])
        self._right = np.concatenate([s[1] for s in shifted])
        self._value = np.vstack([t.value for t in self.trees])

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @property
    def n_classes(self) -> int:
        return self.output_dim

    def _check_x(self, X):
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        if single:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise TreeError(f"expected {self.input_dim} features, got shape {X.shape}")
        return X, single

    def apply(self, X) -> np.ndarray:
        """Global leaf index reached by each row in each tree, shape (n, n_trees)."""
        X, _ = self._check_x(X)
        return _apply_kernel(X, self.roots, self._feature, self._threshold, self._left, self._right)

    def _mean_leaf_value(self, X):
        X, single = self._check_x(X)
        res = _mean_value_kernel(X, self.roots, self._feature, self._threshold,
                                 self._left, self._right, self._value)
        return res, single

    # serialization ---------------------------------------------------------

    def to_bytes(self) -> bytes:
        arrays = {}
        for i, t in enumerate(self.trees):
            for name in ("feature", "threshold", "left", "right", "value", "n_samples", "importances"):
                arrays[f"t{i:05d}.{name}"] = getattr(t, name)
        meta = {"task": self.task, "input_dim": self.input_dim,
                "n_trees": self.n_trees, "params": asdict(self.params)}
        return binio.dumps(MAGIC, FORMAT_VERSION, meta, arrays)

    @classmethod
    def from_bytes(cls, data: bytes) -> "FittedEnsemble":
        _, meta, arrays = binio.loads(data, MAGIC, FORMAT_VERSION)
        trees = []
        for i in range(meta["n_trees"]):
            trees.append(Tree(**{name: arrays[f"t{i:05d}.{name}"] for name in
                                 ("feature", "threshold", "left", "right", "value",
                                  "n_samples", "importances")}))
        return cls(meta["task"], trees, meta["input_dim"], TreeEnsembleParams(**meta["params"]))

    def __eq__(self, other):
        if not isinstance(other, FittedEnsemble):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()

    __hash__ = None


def _fit(task, X, Y, params, n_jobs):
    k = params.resolve_k(X.shape[1])

    def grow(i):
        return _grow_tree(X, Y, k, params.min_samples_leaf, params.max_depth,
                          _tree_seed(params.seed, i))

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            trees = list(pool.map(grow, range(params.n_trees)))
    else:
        trees = [grow(i) for i in range(params.n_trees)]
    return FittedEnsemble(task, trees, X.shape[1], params)


def fit_regressor(X, Y, params: TreeEnsembleParams = TreeEnsembleParams(), n_jobs: int = 1) -> FittedEnsemble:
    """Fit a vector-valued Extra-Trees regressor.

    Parameters
    ----------
    X : array of shape (n, input_dim)
    Y : array of shape (n,) or (n, output_dim)
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.ndim != 2 or len(X) == 0:
        raise TreeError("need a non-empty 2-D feature matrix")
    if len(Y) != len(X):
        raise TreeError(f"row count mismatch: {len(X)} features vs {len(Y)} targets")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise TreeError("non-finite values in training data")
    return _fit("regression", X, Y, params, n_jobs)


def predict_regressor(model: FittedEnsemble, X) -> np.ndarray:
    if model.task != "regression":
        raise TreeError("model is not a regressor")
    res, single = model._mean_leaf_value(X)
    return res[0] if single else res


def fit_classifier(X, y, params: TreeEnsembleParams = TreeEnsembleParams(),
                   n_classes: Optional[int] = None, n_jobs: int = 1) -> FittedEnsemble:
    """Fit an Extra-Trees classifier on integer labels ``0 .. n_classes-1``.

    Labels absent from the data still get a (zero-frequency) slot when
    ``n_classes`` is given, so probability vectors always span the full label set.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or len(X) == 0:
        raise TreeError("need a non-empty 2-D feature matrix")
    if y.shape != (len(X),):
        raise TreeError(f"label shape {y.shape} does not match {len(X)} rows")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == np.round(y)):
            raise TreeError("labels must be integers")
        y = y.astype(np.int64)
    if y.min() < 0:
        raise TreeError("labels must be non-negative")
    K = int(y.max()) + 1 if n_classes is None else int(n_classes)
    if y.max() >= K:
        raise TreeError(f"label {int(y.max())} outside 0..{K - 1}")
    Y = np.zeros((len(y), K))
    Y[np.arange(len(y)), y] = 1.0
    return _fit("classification", X, Y, params, n_jobs)


def predict_proba(model: FittedEnsemble, X, p_min: float = 1e-3) -> np.ndarray:
    """Averaged leaf class frequencies, floored at ``p_min``.

    The floor is applied as ``p_min + (1 - K * p_min) * p``, which keeps every
    class at or above ``p_min`` and the row sum at exactly one.
    """
    if model.task != "classification":
        raise TreeError("model is not a classifier")
    K = model.n_classes
    if not 0.0 <= p_min * K < 1.0:
        raise TreeError(f"p_min={p_min} too large for {K} classes")
    res, single = model._mean_leaf_value(X)
    res = p_min + (1.0 - K * p_min) * res
    res /= res.sum(axis=1, keepdims=True)
    return res[0] if single else res


def predict_class(model: FittedEnsemble, X) -> np.ndarray:
    return np.argmax(predict_proba(model, X, p_min=0.0), axis=-1)


def feature_importances(model: FittedEnsemble) -> np.ndarray:
    """Total impurity decrease per feature, normalized to sum to one (all zeros if no split)."""
    total = np.sum([t.importances for t in model.trees], axis=0)
    s = total.sum()
    return total / s if s > 0 else np.zeros(model.input_dim)
