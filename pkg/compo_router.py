"""compo_router - inter-component importance and top-k routing for compo

Every component's anchor token is projected into a router query and a router
key (two separate linear maps, split into heads).  The importance of
component j for component i, per head, is

    o[h, i, j] = sigmoid(Qbar_i . Kbar_j / sqrt(d_head))

Inference routes deterministically to the k highest-scoring other
components.  Training samples the k components without replacement with
probabilities proportional to the normalized scores, which keeps every
component in play without an auxiliary balancing loss.  Routing indices are
constants for the backward pass; the router learns only through the key
gains applied in compo_moc.


Requirements
------------
math : sqrt and floor.
numpy : sorting and sampling.
compo_numerics : tensors and parameters.
compo_globals : debugger.
compo_errors : RoutingError.

Classes
-------
ImportanceMatrix : o scores for every (head, i, j).
RoutingDecision : selected full-context components per (head, i).

Functions
---------
importance_scores(anchors, params, heads, activation) : ImportanceMatrix.
route_deterministic(O, k) : top-k selection.
route_stochastic(O, k, rng) : load-balanced sampled selection.
default_k(N, k_fraction) : clamp(round(k_fraction * N), 1, N - 1).
"""

import math
import numpy as np
import compo_numerics as cn
from compo_globals import debugger
from compo_errors import RoutingError

ACTIVATIONS = ('sigmoid', 'softmax')


class ImportanceMatrix(object):
    def __init__(self, scores, activation='sigmoid'):
        self.scores = scores  # Tensor [H, N, N]
        self.activation = activation

    @property
    def heads(self):
        return self.scores.shape[0]

    @property
    def n_components(self):
        return self.scores.shape[-1]

    @property
    def values(self):
        return self.scores.value


class RoutingDecision(object):
    def __init__(self, selected, k, mode):
        self.selected = np.asarray(selected, dtype=np.int64)  # [H, N, k]
        self.k = k
        self.mode = mode

    @property
    def heads(self):
        return self.selected.shape[0]

    @property
    def n_components(self):
        return self.selected.shape[1]

    def selected_for(self, h, i):
        return [int(j) for j in self.selected[h, i]]

    def full_mask(self):
        heads, n_components, _ = self.selected.shape
        mask = np.zeros((heads, n_components, n_components), dtype=bool)
        for h in range(heads):
            for i in range(n_components):
                mask[h, i, self.selected[h, i]] = True
        return mask

    def broadcast_heads(self, heads):
        """Shared single-head routing repeated over every attention head."""
        if self.heads == heads:
            return self
        if self.heads != 1:
            raise RoutingError("cannot broadcast {} routing heads to {}".
                               format(self.heads, heads))
        return RoutingDecision(np.repeat(self.selected, heads, axis=0),
                               self.k, self.mode)

    def __eq__(self, other):
        return isinstance(other, RoutingDecision) and \
            self.k == other.k and \
            np.array_equal(self.selected, other.selected)


def init_router(scope, width, rng):
    cn.init_linear(scope, 'wq', width, width, rng, bias=False)
    cn.init_linear(scope, 'wk', width, width, rng, bias=False)


def default_k(N, k_fraction=0.25):
    if N <= 1:
        return 0
    k = int(math.floor(k_fraction * N + 0.5))
    return min(max(k, 1), N - 1)


def importance_logits(anchors, params, heads):
    """anchors : Tensor [N, D] -> Tensor [H, N, N] of scaled dot products"""
    width = anchors.shape[-1]
    if width % heads:
        raise RoutingError("width {} not divisible by {} router heads".
                           format(width, heads))
    q = cn.split_heads(cn.linear(anchors, params, 'wq', bias=False), heads)
    k = cn.split_heads(cn.linear(anchors, params, 'wk', bias=False), heads)
    dots = cn.matmul(q, cn.transpose(k, (0, 2, 1)))
    return cn.mul(dots, 1.0 / math.sqrt(width // heads))


def activate(logits, activation='sigmoid'):
    if activation not in ACTIVATIONS:
        raise RoutingError("unknown router activation: {}".format(
            activation))
    n_components = logits.shape[-1]
    if activation == 'sigmoid' or n_components == 1:
        return cn.sigmoid(logits)
    # Softmax over the other components only.
    return cn.softmax(logits, mask=~np.eye(n_components, dtype=bool))


def importance_scores(anchors, params, heads, activation='sigmoid'):
    return ImportanceMatrix(
        activate(importance_logits(anchors, params, heads), activation),
        activation)


def _scores(O):
    if isinstance(O, ImportanceMatrix):
        return O.values
    if isinstance(O, cn.Tensor):
        return O.value
    return np.asarray(O, dtype=np.float64)


def route_deterministic(O, k):
    if k < 1:
        raise RoutingError("k must be >= 1, got {}".format(k))
    scores = _scores(O)
    heads, n_components, _ = scores.shape
    k_eff = min(k, n_components - 1)
    ranked = scores.astype(np.float64)
    diagonal = np.arange(n_components)
    ranked[:, diagonal, diagonal] = -np.inf
    # stable sort on -score: equal scores keep the smaller index first
    order = np.argsort(-ranked, axis=-1, kind='stable')
    selected = np.sort(order[..., :k_eff], axis=-1)
    return RoutingDecision(selected, k_eff, 'deterministic')


def _draw(weights, available, rng):
    masked = np.where(available, weights, 0.0)
    total = masked.sum()
    if not np.isfinite(total) or total <= 0:
        masked = available.astype(np.float64)
        total = masked.sum()
    cumulative = np.cumsum(masked)
    index = int(np.searchsorted(cumulative, rng.random() * total,
                                side='right'))
    index = min(index, len(weights) - 1)
    while not available[index]:
        index -= 1
    return index


def route_stochastic(O, k, rng):
    scores = _scores(O)
    heads, n_components, _ = scores.shape
    if k > n_components - 1:
        raise RoutingError("k = {} exceeds the {} other components".format(
            k, n_components - 1))
    if k < 1:
        raise RoutingError("k must be >= 1, got {}".format(k))
    selected = np.zeros((heads, n_components, k), dtype=np.int64)
    uniform_rows = 0
    for h in range(heads):
        for i in range(n_components):
            candidates = np.array([j for j in range(n_components) if j != i])
            weights = scores[h, i, candidates].astype(np.float64)
            total = weights.sum()
            if not np.isfinite(total) or total <= 0:
                uniform_rows += 1
            available = np.ones(candidates.size, dtype=bool)
            picks = []
            for _ in range(k):
                index = _draw(weights, available, rng)
                available[index] = False
                picks.append(candidates[index])
            selected[h, i] = np.sort(picks)
    if uniform_rows:
        debugger.message("ROUT", "{} score rows without positive weight "
                         "drew uniformly".format(uniform_rows))
    return RoutingDecision(selected, k, 'stochastic')
