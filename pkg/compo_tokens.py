"""compo_tokens - per-component token sequences for compo

Each component's noisy latents z_i (L tokens) are compressed by shared
learnable queries through one cross-attention layer into N_p compressed
tokens p_i plus a single anchor token, and the three segments are
concatenated into x_i = [z_i ; p_i ; anchor_i].  Every token of x_i then
receives the component's random ID embedding.


Requirements
------------
numpy : index arrays and random draws.
compo_numerics : tensors, attention and parameters.
compo_errors : TokenError.

Classes
-------
Segments : offsets of the z / p / anchor segments.
LearnableQueries : the shared p and anchor queries.
IdCodebook : learnable ID embeddings.
PackedTokens : tokens of all components plus their segments and IDs.

Functions
---------
compressed_count(L, sigma) : N_p = ceil(L / sigma).
pack_component(z, queries, packer) : cross-attention packing.
assign_id_embeddings(N, codebook, rng) : distinct random ID indices.
split_component(x) : (z, p, anchor) views.
"""

import math
import numpy as np
import compo_numerics as cn
from compo_errors import TokenError

CODEBOOK_SIZE = 50
INIT_STD = 0.02


def compressed_count(L, sigma):
    if sigma < 1:
        raise TokenError("compression ratio must be >= 1, got {}".
                         format(sigma))
    if L < 1:
        raise TokenError("empty component")
    return int(math.ceil(L / sigma))


class Segments(object):
    def __init__(self, L, n_p):
        if L < 1:
            raise TokenError("empty component")
        if n_p < 1:
            raise TokenError("need at least one compressed token")
        self.L = L
        self.n_p = n_p
        self.total = L + n_p + 1
        self.z = slice(0, L)
        self.p = slice(L, L + n_p)
        self.anchor = slice(L + n_p, L + n_p + 1)

    def lengths(self):
        return self.L, self.n_p, 1

    def __eq__(self, other):
        return isinstance(other, Segments) and \
            (self.L, self.n_p) == (other.L, other.n_p)

    def __repr__(self):
        return "Segments(L={}, n_p={})".format(self.L, self.n_p)


class LearnableQueries(object):
    def __init__(self, scope):
        self.p = scope['p']
        self.p_bar = scope['p_bar']

    @property
    def n_p(self):
        return self.p.shape[0]

    def tensor(self):
        return cn.concat([self.p, self.p_bar], axis=0)


class IdCodebook(object):
    def __init__(self, scope):
        self.embeddings = scope['codebook']

    @property
    def size(self):
        return self.embeddings.shape[0]


class PackedTokens(object):
    """tokens : Tensor [..., L + N_p + 1, D] (one row block per component)"""

    def __init__(self, tokens, segments, ids=None):
        if tokens.shape[-2] != segments.total:
            raise TokenError("token count {} does not match segments {}".
                             format(tokens.shape[-2], segments))
        self.tokens = tokens
        self.segments = segments
        self.ids = ids

    @property
    def n_components(self):
        return self.tokens.shape[0] if self.tokens.ndim == 3 else 1

    @property
    def width(self):
        return self.tokens.shape[-1]

    def with_tokens(self, tokens):
        return PackedTokens(tokens, self.segments, self.ids)


def init_packer(scope, width, n_p, rng):
    scope.add('p', rng.normal(0.0, INIT_STD, size=(n_p, width)))
    scope.add('p_bar', rng.normal(0.0, INIT_STD, size=(1, width)))
    for name in ('wq', 'wk', 'wv'):
        scope.add(name, rng.normal(0.0, 1.0 / math.sqrt(width),
                                   size=(width, width)))


def init_id_codebook(scope, width, rng, size=CODEBOOK_SIZE):
    scope.add('codebook', rng.normal(0.0, INIT_STD, size=(size, width)))


def pack_component(z, queries, packer):
    """p_i = CrossAttn(p, z_i, z_i), anchor_i = CrossAttn(p_bar, z_i, z_i)

    z : Tensor [L, D] or [N, L, D]; single-head, full width, no output
    projection.  Each component only sees its own z rows.
    """
    z = cn.as_tensor(z)
    if z.ndim < 2 or z.shape[-2] == 0:
        raise TokenError("empty component")
    q = cn.matmul(queries.tensor(), packer['wq'])
    k = cn.matmul(z, packer['wk'])
    v = cn.matmul(z, packer['wv'])
    packed = cn.attention(q, k, v)
    n_p = queries.n_p
    return packed[..., :n_p, :], packed[..., n_p:, :]


def assign_id_embeddings(N, codebook, rng):
    size = codebook.size if isinstance(codebook, IdCodebook) else \
        int(codebook)
    if N > size:
        raise TokenError("component count exceeds ID codebook ({} > {})".
                         format(N, size))
    return [int(i) for i in rng.choice(size, size=N, replace=False)]


def add_id_embeddings(tokens, codebook, ids):
    ids = np.asarray(ids, dtype=np.int64)
    if len(set(ids.tolist())) != ids.size:
        raise TokenError("ID indices within a sample must be distinct")
    rows = cn.take(codebook.embeddings, (ids,))
    rows = cn.reshape(rows, (ids.size, 1, rows.shape[-1]))
    return cn.add(tokens, rows)


def pack_tokens(z, queries, packer, codebook=None, ids=None):
    """Build x = [z ; p ; anchor] for all N components, then add IDs."""
    p, p_bar = pack_component(z, queries, packer)
    tokens = cn.concat([z, p, p_bar], axis=-2)
    if codebook is not None and ids is not None:
        tokens = add_id_embeddings(tokens, codebook, ids)
    return PackedTokens(tokens, Segments(z.shape[-2], queries.n_p), ids)


def split_component(x):
    segments = x.segments
    return (x.tokens[..., segments.z, :],
            x.tokens[..., segments.p, :],
            x.tokens[..., segments.anchor, :])
