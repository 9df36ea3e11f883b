"""Small tabular MDPs with independent reference solutions."""

from types import SimpleNamespace

import numpy as np

GAMMA = 0.9


def chain_dataset(copies=100, n_objectives=4):
    """Deterministic 3-state chain: action 1 moves right, 0 moves left; reward 1 in state 2.

    Every (state, action) pair appears ``copies`` times. The reward sits in
    objective 0; the other objectives are identically zero.
    """
    s, a = np.meshgrid(np.arange(3), np.arange(2), indexing="ij")
    s, a = np.repeat(s.ravel(), copies), np.repeat(a.ravel(), copies)
    s2 = np.where(a == 1, np.minimum(s + 1, 2), np.maximum(s - 1, 0))
    r = np.zeros((len(s), n_objectives))
    r[:, 0] = (s == 2).astype(float)
    return SimpleNamespace(states=s[:, None].astype(float), actions=a[:, None],
                           next_states=s2[:, None].astype(float), rewards=r,
                           done=np.zeros(len(s), dtype=bool))


def chain_value_iteration(iterations, gamma=GAMMA):
    """Q_k(s, a) for the chain after ``iterations`` Bellman backups from zero."""
    q = np.zeros((3, 2))
    nxt = np.array([[0, 1], [0, 2], [1, 2]])
    r = np.array([0.0, 0.0, 1.0])
    for _ in range(iterations):
        q = r[:, None] + gamma * q.max(axis=1)[nxt]
    return q


# stochastic 3-state toy for importance sampling ------------------------------

P_MOVE = np.array([[0.7, 0.3], [0.5, 0.5], [0.2, 0.8]])  # P(advance | state, action)
REWARD = np.array([[0.0, 1.0], [2.0, 0.5], [1.0, 3.0]])  # reward(state, action)
HORIZON = 5


def rollout(policy, n, rng):
    """Episodes of fixed length under ``policy[state] = P(action 1)``.

    Returns states, actions, rewards as (n, HORIZON) arrays.
    """
    S = np.zeros((n, HORIZON), dtype=int)
    A = np.zeros((n, HORIZON), dtype=int)
    R = np.zeros((n, HORIZON))
    s = np.zeros(n, dtype=int)
    for t in range(HORIZON):
        a = (rng.random(n) < policy[s]).astype(int)
        S[:, t], A[:, t], R[:, t] = s, a, REWARD[s, a]
        move = rng.random(n) < P_MOVE[s, a]
        s = np.where(move, np.minimum(s + 1, 2), 0)
    return S, A, R


def exact_value(policy):
    """Expected undiscounted return by dynamic programming."""
    v = np.zeros(3)
    for _ in range(HORIZON):
        new = np.zeros(3)
        for s in range(3):
            for a, pa in ((0, 1 - policy[s]), (1, policy[s])):
                adv = min(s + 1, 2)
                new[s] += pa * (REWARD[s, a] + P_MOVE[s, a] * v[adv] + (1 - P_MOVE[s, a]) * v[0])
        v = new
    return v[0]
