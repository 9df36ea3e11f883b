"""Multi-objective fitted Q-iteration with strict Pareto pruning.

The Q-function maps (state, binary action vector) to one value per reward
component. At every iteration the bootstrap over next actions is restricted
to actions that are (a) not strictly dominated in every component and (b)
expressible by a tree classifier fit to the logged state/action pairs of the
batch. Among the surviving candidates the backup takes the componentwise
maximum.

The learned Q is then collapsed into one deterministic order/skip policy per
lab, and a budget rule guarantees a minimum order frequency.
"""

from dataclasses import asdict, dataclass, field, replace
import json
import logging
from typing import Optional

import numpy as np

from . import binio
from .mdp import all_actions, action_ids
from .trees import (FittedEnsemble, TreeEnsembleParams, fit_classifier, fit_regressor,
                    predict_class, predict_proba, predict_regressor)

logger = logging.getLogger(__name__)

Q_MAGIC = b"MOFQ"
POLICY_MAGIC = b"LPOL"
FORMAT_VERSION = 1


class FqiError(RuntimeError):
    pass


def _derive_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint32)[0])


@dataclass
class FqiConfig:
    gamma: float = 0.9
    iterations: int = 200
    batch_size: int = 100_000
    epsilon: tuple = (0.0, 0.0, 0.0, 0.0)
    q_trees: TreeEnsembleParams = field(default_factory=TreeEnsembleParams)
    consistency_trees: TreeEnsembleParams = field(default_factory=TreeEnsembleParams)
    # actions with classifier probability below this are treated as inexpressible
    consistency_threshold: float = 0.05
    standardize_targets: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if any(e < 0 for e in self.epsilon):
            raise ValueError("epsilon entries must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["epsilon"] = list(self.epsilon)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FqiConfig":
        d = dict(d)
        for k in ("q_trees", "consistency_trees"):
            if isinstance(d.get(k), dict):
                d[k] = TreeEnsembleParams(**d[k])
        if "epsilon" in d:
            d["epsilon"] = tuple(d["epsilon"])
        return cls(**d)


# Pareto pruning -------------------------------------------------------------

@dataclass(frozen=True)
class NondominatedSet:
    actions: tuple
    q_vectors: np.ndarray


def nondominated_mask(Q) -> np.ndarray:
    """Boolean mask of actions not strictly dominated in every component.

    ``Q`` has shape (..., n_actions, n_objectives); the mask drops the last axis.
    """
    Q = np.asarray(Q, dtype=np.float64)
    # dom[..., a, b] is True when b beats a in every objective
    out = np.empty(Q.shape[:-1], dtype=bool)
    flat_q = Q.reshape(-1, Q.shape[-2], Q.shape[-1])
    flat_o = out.reshape(-1, Q.shape[-2])
    step = 4096
    for lo in range(0, len(flat_q), step):
        q = flat_q[lo:lo + step]
        dom = np.all(q[:, None, :, :] > q[:, :, None, :], axis=-1)
        flat_o[lo:lo + step] = ~dom.any(axis=-1)
    return out


def pareto_front(q_vectors) -> NondominatedSet:
    """Strictly nondominated subset of ``{action: q_vector}`` (or rows of a 2-D array)."""
    if isinstance(q_vectors, dict):
        keys = list(q_vectors)
        Q = np.array([np.asarray(q_vectors[k], dtype=np.float64) for k in keys])
    else:
        Q = np.asarray(q_vectors, dtype=np.float64)
        keys = list(range(len(Q)))
    if len(keys) == 0:
        raise ValueError("need at least one action")
    keep = nondominated_mask(Q)
    return NondominatedSet(tuple(k for k, m in zip(keys, keep) if m), Q[keep])


# batch sampling -----------------------------------------------------------------

def sample_batch(actions, n: int, seed) -> np.ndarray:
    """Row indices drawn with replacement, weight inversely proportional to action frequency.

    ``actions`` is a vector of joint action ids or a binary (rows, labs) matrix.
    """
    actions = np.asarray(actions)
    if actions.ndim == 2:
        actions = action_ids(actions)
    if len(actions) == 0:
        raise ValueError("cannot sample from an empty dataset")
    _, inverse, counts = np.unique(actions, return_inverse=True, return_counts=True)
    w = 1.0 / counts[inverse]
    w /= w.sum()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.choice(len(actions), size=n, replace=True, p=w)


# Q-function --------------------------------------------------------------------------

class QEnsemble:
    """Vector Q-function over (state, binary action). ``model=None`` is Q = 0."""

    def __init__(self, model: Optional[FittedEnsemble], state_dim: int, n_labs: int, n_objectives: int,
                 scale=None):
        self.model = model
        self.state_dim = int(state_dim)
        self.n_labs = int(n_labs)
        self.n_objectives = int(n_objectives)
        self.scale = np.ones(n_objectives) if scale is None else np.asarray(scale, dtype=np.float64)
        self.actions = all_actions(n_labs)

    def __call__(self, states, actions) -> np.ndarray:
        states = np.asarray(states, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.float64)
        if self.model is None:
            return np.zeros((len(states), self.n_objectives))
        return predict_regressor(self.model, np.hstack([states, actions])) * self.scale

    def all_actions(self, states) -> np.ndarray:
        """Q for every joint action, shape (n, 2**n_labs, n_objectives)."""
        states = np.asarray(states, dtype=np.float64)
        n, A = len(states), len(self.actions)
        if self.model is None:
            return np.zeros((n, A, self.n_objectives))
        X = np.hstack([np.repeat(states, A, axis=0), np.tile(self.actions, (n, 1))])
        return self(X[:, :self.state_dim], X[:, self.state_dim:]).reshape(n, A, self.n_objectives)

    def to_bytes(self, meta: Optional[dict] = None) -> bytes:
        arrays = {"scale": self.scale}
        if self.model is not None:
            arrays["model"] = np.frombuffer(self.model.to_bytes(), dtype=np.uint8)
        m = {"state_dim": self.state_dim, "n_labs": self.n_labs, "n_objectives": self.n_objectives,
             "extra": meta or {}}
        return binio.dumps(Q_MAGIC, FORMAT_VERSION, m, arrays)

    @classmethod
    def from_bytes(cls, data: bytes):
        _, m, arrays = binio.loads(data, Q_MAGIC, FORMAT_VERSION)
        model = FittedEnsemble.from_bytes(arrays["model"].tobytes()) if "model" in arrays else None
        return cls(model, m["state_dim"], m["n_labs"], m["n_objectives"], arrays["scale"]), m["extra"]


@dataclass
class FqiResult:
    q: QEnsemble
    history: list


def train_mo_fqi(dataset, config: FqiConfig, callback=None, n_jobs: int = 1) -> FqiResult:
    """Run MO-FQI on a transition dataset.

    ``dataset`` needs ``states``, ``actions`` (binary, one column per lab),
    ``next_states``, ``rewards`` (one column per objective) and optionally a
    boolean ``done`` marking transitions whose next state is terminal.
    """
    S = np.asarray(dataset.states, dtype=np.float64)
    A = np.asarray(dataset.actions, dtype=np.int64)
    S2 = np.asarray(dataset.next_states, dtype=np.float64)
    R = np.asarray(dataset.rewards, dtype=np.float64)
    done = np.asarray(getattr(dataset, "done", np.zeros(len(S), dtype=bool)), dtype=bool)
    if len(S) == 0:
        raise ValueError("empty dataset")
    n_labs = A.shape[1]
    d = R.shape[1]
    n_actions = 2 ** n_labs
    ids = action_ids(A)
    X_all = np.hstack([S, A.astype(np.float64)])

    q = QEnsemble(None, S.shape[1], n_labs, d)
    history = []
    logger.info("MO-FQI: gamma=%s iterations=%d batch=%d transitions=%d",
                config.gamma, config.iterations, config.batch_size, len(S))
    for k in range(1, config.iterations + 1):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, k]))
        idx = sample_batch(ids, config.batch_size, rng)
        s, a_ids, s2, r, dn = S[idx], ids[idx], S2[idx], R[idx], done[idx]
        x = X_all[idx]

        clf = fit_classifier(s, a_ids, replace(config.consistency_trees, seed=_derive_seed(config.seed, k, 1)),
                             n_classes=n_actions, n_jobs=n_jobs)
        proba = predict_proba(clf, s2, p_min=0.0)
        consistent = proba >= config.consistency_threshold
        top = np.argmax(proba, axis=1)
        consistent[np.arange(len(s2)), top] = True

        q_next = q.all_actions(s2)
        cand = nondominated_mask(q_next) & consistent
        empty = ~cand.any(axis=1)
        if empty.any():
            cand[empty, top[empty]] = True
        if not cand.any(axis=1).all():
            raise FqiError("empty candidate action set after fallback")
        backup = np.where(cand[:, :, None], q_next, -np.inf).max(axis=1)
        target = r + config.gamma * np.where(dn[:, None], 0.0, backup)

        scale = np.ones(d)
        if config.standardize_targets:
            sd = target.std(axis=0)
            scale = np.where(sd > 0, sd, 1.0)
        model = fit_regressor(x, target / scale, replace(config.q_trees, seed=_derive_seed(config.seed, k, 2)),
                              n_jobs=n_jobs)
        q_new = QEnsemble(model, S.shape[1], n_labs, d, scale)

        delta = np.abs(q_new(s, x[:, S.shape[1]:]) - q(s, x[:, S.shape[1]:])).mean(axis=0)
        row = {
            "iteration": k,
            "mean_abs_delta_q": [float(v) for v in delta],
            "action_histogram": np.bincount(a_ids, minlength=n_actions).tolist(),
            "mean_candidates": float(cand.sum(axis=1).mean()),
            "fallbacks": int(empty.sum()),
        }
        history.append(row)
        if callback is not None:
            callback(row)
        logger.debug("iteration %d: mean |dQ| %s", k, row["mean_abs_delta_q"])
        q = q_new
    return FqiResult(q, history)


# deterministic policies ---------------------------------------------------------------

def _lab_q_pairs(q: QEnsemble, states):
    """Q(s, skip-all) and Q(s, order lab l only) for every lab: shapes (n, d), (n, L, d)."""
    states = np.asarray(states, dtype=np.float64)
    n, L = len(states), q.n_labs
    q_skip = q(states, np.zeros((n, L)))
    q_order = np.empty((n, L, q.n_objectives))
    for lab in range(L):
        a = np.zeros((n, L))
        a[:, lab] = 1
        q_order[:, lab] = q(states, a)
    return q_skip, q_order


def order_labels(q_skip, q_order, epsilon) -> np.ndarray:
    """Order label per (state, lab): 1 iff Q_d(skip) < Q_d(order) + eps_d for every objective d.

    ``epsilon`` is a length-d vector or an (L, d) matrix of per-lab slacks.
    """
    eps = np.asarray(epsilon, dtype=np.float64)
    if eps.ndim == 1:
        eps = np.broadcast_to(eps, q_order.shape[1:])
    return np.all(q_skip[:, None, :] < q_order + eps[None, :, :], axis=-1).astype(np.int64)


class PolicySet:
    """One binary order/skip classifier per lab plus the budget period."""

    def __init__(self, classifiers, epsilon, budget_period: int = 24, meta: Optional[dict] = None):
        if budget_period <= 0:
            raise ValueError("budget period must be positive")
        self.classifiers = list(classifiers)
        self.epsilon = np.asarray(epsilon, dtype=np.float64)
        self.budget_period = int(budget_period)
        self.meta = dict(meta or {})

    @property
    def n_labs(self) -> int:
        return len(self.classifiers)

    def recommend(self, states) -> np.ndarray:
        """Deterministic (n, L) order recommendations."""
        states = np.asarray(states, dtype=np.float64)
        return np.column_stack([predict_class(c, states) for c in self.classifiers]).astype(np.int8)

    def to_bytes(self) -> bytes:
        arrays = {"epsilon": self.epsilon}
        for i, c in enumerate(self.classifiers):
            arrays[f"clf{i:02d}"] = np.frombuffer(c.to_bytes(), dtype=np.uint8)
        meta = {"n_labs": self.n_labs, "budget_period": self.budget_period, "meta": self.meta}
        return binio.dumps(POLICY_MAGIC, FORMAT_VERSION, meta, arrays)

    @classmethod
    def from_bytes(cls, data: bytes) -> "PolicySet":
        _, meta, arrays = binio.loads(data, POLICY_MAGIC, FORMAT_VERSION)
        clfs = [FittedEnsemble.from_bytes(arrays[f"clf{i:02d}"].tobytes()) for i in range(meta["n_labs"])]
        return cls(clfs, arrays["epsilon"], meta["budget_period"], meta["meta"])


def collapse_policy(q: QEnsemble, states, epsilon, tree_params: TreeEnsembleParams = TreeEnsembleParams(),
                    budget_period: int = 24, n_jobs: int = 1) -> PolicySet:
    """Label training states with the order rule and fit one classifier per lab."""
    states = np.asarray(states, dtype=np.float64)
    q_skip, q_order = _lab_q_pairs(q, states)
    labels = order_labels(q_skip, q_order, epsilon)
    clfs = []
    for lab in range(q.n_labs):
        params = replace(tree_params, seed=_derive_seed(tree_params.seed, lab, 3))
        clfs.append(fit_classifier(states, labels[:, lab], params, n_classes=2, n_jobs=n_jobs))
    eps = np.asarray(epsilon, dtype=np.float64)
    if eps.ndim == 1:
        eps = np.tile(eps, (q.n_labs, 1))
    meta = {"label_counts": labels.sum(axis=0).tolist(), "n_states": len(states)}
    return PolicySet(clfs, eps, budget_period, meta)


@dataclass
class EpsilonTuning:
    epsilon_cost: np.ndarray
    counts: np.ndarray
    targets: np.ndarray
    eps_max: np.ndarray
    reached: np.ndarray


def tune_epsilon_cost(q: QEnsemble, states, target_counts, base_epsilon=(0.0, 0.0, 0.0, 0.0),
                      cost_index: int = 3, tolerance: float = 0.05, max_iter: int = 30,
                      eps_max=None) -> EpsilonTuning:
    """Bisect the per-lab cost slack until the number of order labels is near the target."""
    states = np.asarray(states, dtype=np.float64)
    q_skip, q_order = _lab_q_pairs(q, states)
    return tune_epsilon_from_pairs(q_skip, q_order, target_counts, base_epsilon, cost_index,
                                   tolerance, max_iter, eps_max)


def tune_epsilon_from_pairs(q_skip, q_order, target_counts, base_epsilon=(0.0, 0.0, 0.0, 0.0),
                            cost_index: int = 3, tolerance: float = 0.05, max_iter: int = 30,
                            eps_max=None) -> EpsilonTuning:
    L = q_order.shape[1]
    targets = np.asarray(target_counts, dtype=np.float64)
    if np.any(targets <= 0):
        raise ValueError("target counts must be positive")
    base = np.asarray(base_epsilon, dtype=np.float64)
    if eps_max is None:
        # smallest slack that satisfies the cost condition in every state
        eps_max = np.maximum((q_skip[:, None, cost_index] - q_order[:, :, cost_index]).max(axis=0), 0.0) + 1e-9
    eps_max = np.broadcast_to(np.asarray(eps_max, dtype=np.float64), (L,)).copy()

    def count(lab, e):
        eps = base.copy()
        eps[cost_index] = e
        return int(np.all(q_skip < q_order[:, lab] + eps, axis=-1).sum())

    out = np.zeros(L)
    counts = np.zeros(L, dtype=np.int64)
    reached = np.zeros(L, dtype=bool)
    for lab in range(L):
        tgt = targets[lab]
        ok = lambda c: abs(c - tgt) <= tolerance * tgt
        c0 = count(lab, 0.0)
        if c0 >= tgt or ok(c0):
            out[lab], counts[lab], reached[lab] = 0.0, c0, ok(c0)
            continue
        chi = count(lab, eps_max[lab])
        if chi < tgt and not ok(chi):
            logger.warning("lab %d: target %d orders unreachable (max %d at eps %.4g)", lab, tgt, chi, eps_max[lab])
            out[lab], counts[lab] = eps_max[lab], chi
            continue
        lo, hi = 0.0, float(eps_max[lab])
        best_e, best_c = hi, chi
        for _ in range(max_iter):
            mid = 0.5 * (lo + hi)
            c = count(lab, mid)
            if abs(c - tgt) < abs(best_c - tgt):
                best_e, best_c = mid, c
            if ok(c):
                break
            if c < tgt:
                lo = mid
            else:
                hi = mid
        out[lab], counts[lab], reached[lab] = best_e, best_c, ok(best_c)
    return EpsilonTuning(out, counts, targets, eps_max, reached)


# budget rule --------------------------------------------------------------------------------

def apply_budget(recommendations, period: int = 24, observed=None):
    """Insert an order whenever ``period`` consecutive hours pass without one.

    The window rolls from the most recent order (recommended, inserted, or, if
    ``observed`` is given, actually placed). Works on a 1-D series or an
    (hours, labs) matrix. Returns ``(augmented, inserted)`` boolean arrays.
    """
    if period <= 0:
        raise ValueError("period must be positive")
    rec = np.asarray(recommendations).astype(bool)
    squeeze = rec.ndim == 1
    if squeeze:
        rec = rec[:, None]
    obs = np.zeros_like(rec) if observed is None else np.asarray(observed).astype(bool).reshape(rec.shape)
    out = rec.copy()
    inserted = np.zeros_like(rec)
    for lab in range(rec.shape[1]):
        last = -1
        for t in range(rec.shape[0]):
            if rec[t, lab] or obs[t, lab]:
                last = t
            elif t - last >= period:
                out[t, lab] = True
                inserted[t, lab] = True
                last = t
    if squeeze:
        return out[:, 0], inserted[:, 0]
    return out, inserted


def history_to_jsonl(history, header: Optional[dict] = None) -> str:
    lines = []
    if header is not None:
        lines.append(json.dumps({"header": header}, sort_keys=True))
    lines.extend(json.dumps(row, sort_keys=True) for row in history)
    return "\n".join(lines) + "\n"
