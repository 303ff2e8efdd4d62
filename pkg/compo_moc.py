"""compo_moc - Mixture-of-Components global attention for compo

Every token of component i queries a context built from

* its own vecset tokens z_i (ungated),
* the full vecset tokens z_j of the k components routed to it,
* the compressed tokens p_j of every other component,

with the keys of segment j scaled by the importance o[h, i, j].  The
context therefore holds L + k*L + (N - k - 1) * N_p keys instead of the
N * L keys of dense global attention.  Anchor tokens query but are never
keys, and component i's own p_i is not part of its context.

The vectorized path gathers every (head, component) context out of one
pooled key / value buffer with a precomputed index, so the whole block is a
handful of batched tensor ops.  dense_reference() is the slow per-(head,
component) loop it is checked against.


Requirements
------------
math : sqrt.
concurrent.futures : optional thread pool over component chunks.
numpy : index construction and the reference loop.
compo_numerics : tensors, attention and parameters.
compo_tokens : Segments and compressed_count.
compo_local : block modulation and feed-forward.
compo_router : importance scores and routing.
compo_errors : RoutingError.

Classes
-------
ContextSegment : one (component, kind, token range) piece of a context.
AttentionContext : the ordered key list of one (head, component).

Functions
---------
context_length(N, L, k, sigma) : L + k*L + (N - k - 1) * ceil(L / sigma).
assemble_context(i, h, segments, O, routing) : AttentionContext.
moc_attention_forward(x, O, routing, params, heads) : gathered attention.
dense_reference(x, O, routing, params, heads) : naive oracle.
dense_global_attention(x, params, heads) : z tokens over all z tokens.
global_block_forward(x, mod, params, cfg, rng) : one MoC block.
"""

import math
from concurrent.futures import ThreadPoolExecutor
import numpy as np
import compo_numerics as cn
import compo_local
import compo_router
from compo_tokens import compressed_count
from compo_errors import RoutingError

GATE_TARGETS = ('key', 'value')


def context_length(N, L, k, sigma):
    if N < 1:
        raise RoutingError("need at least one component")
    if k < 0 or k > N - 1:
        raise RoutingError("k = {} out of range for N = {}".format(k, N))
    return L + k * L + (N - k - 1) * compressed_count(L, sigma)


def effective_context_length(N, L, k, sigma, use_routing=True,
                             use_compressed_context=True):
    """context_length() with the ablation switches applied."""
    k = k if use_routing else 0
    length = context_length(N, L, k, sigma)
    if not use_compressed_context:
        length -= (N - k - 1) * compressed_count(L, sigma)
    return length


class ContextSegment(object):
    def __init__(self, component, kind, start, stop):
        self.component = component
        self.kind = kind  # 'own', 'full' or 'compressed'
        self.start = start
        self.stop = stop

    def __len__(self):
        return self.stop - self.start


class AttentionContext(object):
    def __init__(self, i, h, sources, gains):
        self.i = i
        self.h = h
        self.sources = sources
        self.gains = gains  # [key_count]
        self.components = np.concatenate(
            [np.full(len(s), s.component, dtype=np.int64) for s in sources])
        self.tokens = np.concatenate(
            [np.arange(s.start, s.stop, dtype=np.int64) for s in sources])

    @property
    def key_count(self):
        return self.tokens.size

    @property
    def provenance(self):
        return [(s.component, s.kind) for s in self.sources for _ in range(
            len(s))]

    def take(self, rows):
        """rows : array [N, T, ...] -> the context rows [key_count, ...]"""
        return rows[self.components, self.tokens]


def context_sources(i, selected, n_components, segments,
                    use_compressed_context=True):
    selected = [int(j) for j in selected]
    if i in selected or len(set(selected)) != len(selected):
        raise RoutingError("duplicate component in context of {}".format(i))
    sources = [ContextSegment(i, 'own', segments.z.start, segments.z.stop)]
    for j in range(n_components):
        if j == i:
            continue
        if j in selected:
            sources.append(ContextSegment(j, 'full', segments.z.start,
                                          segments.z.stop))
        elif use_compressed_context:
            sources.append(ContextSegment(j, 'compressed', segments.p.start,
                                          segments.p.stop))
    return sources


def _gain_head(O, h):
    return h if O.heads > 1 else 0


def assemble_context(i, h, segments, O, routing,
                     use_compressed_context=True):
    n_components = O.n_components
    if routing.n_components != n_components:
        raise RoutingError("routing covers {} components, scores {}".format(
            routing.n_components, n_components))
    sources = context_sources(i, routing.selected_for(h, i), n_components,
                              segments, use_compressed_context)
    row = O.values[_gain_head(O, h), i]
    gains = np.concatenate(
        [np.full(len(s), 1.0 if s.kind == 'own' else row[s.component])
         for s in sources])
    return AttentionContext(i, h, sources, gains)


def context_index(segments, routing, use_compressed_context=True):
    """Pool positions and gain sources of every (head, component) context.

    Returns (positions, sources), both int arrays [H, N, key_count];
    positions index the flattened [N * T] token pool."""
    heads, n_components = routing.heads, routing.n_components
    positions, sources = [], []
    for h in range(heads):
        for i in range(n_components):
            pieces = context_sources(i, routing.selected_for(h, i),
                                     n_components, segments,
                                     use_compressed_context)
            positions.append(np.concatenate(
                [s.component * segments.total +
                 np.arange(s.start, s.stop) for s in pieces]))
            sources.append(np.concatenate(
                [np.full(len(s), s.component) for s in pieces]))
    if len({p.size for p in positions}) != 1:
        raise RoutingError("contexts of unequal length")
    shape = (heads, n_components, positions[0].size)
    return (np.stack(positions).reshape(shape).astype(np.int64),
            np.stack(sources).reshape(shape).astype(np.int64))


def _gains(O, sources, heads):
    """o[h, i, j] for every key, with 1.0 on the component's own keys."""
    n_components = O.n_components
    eye = np.eye(n_components)
    gain_source = cn.add(cn.mul(O.scores, 1.0 - eye), eye)
    if O.heads == heads:
        head_index = np.arange(heads)[:, None, None]
    else:
        head_index = np.zeros((heads, 1, 1), dtype=np.int64)
    row_index = np.arange(n_components)[None, :, None]
    return cn.getitem(gain_source, (head_index, row_index, sources))


def _check_gate_target(gate_target):
    if gate_target not in GATE_TARGETS:
        raise RoutingError("unknown gate target: {}".format(gate_target))


def attend_chunks(attend, n_components, chunk=None, workers=1):
    """Run attend(slice) over component chunks and join along axis 1.

    Chunks go to a thread pool when workers > 1, except while a Tape is
    recording (tapes are per thread)."""
    step = chunk or n_components
    parts = [slice(start, min(start + step, n_components))
             for start in range(0, n_components, step)]
    if workers > 1 and len(parts) > 1 and not cn.recording():
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(attend, parts))
    else:
        outputs = [attend(part) for part in parts]
    return outputs[0] if len(outputs) == 1 else cn.concat(outputs, axis=1)


def moc_attention_forward(x, O, routing, params, heads, gate_target='key',
                          use_compressed_context=True, chunk=None,
                          workers=1):
    """Attention sublayer of a global block.

    x : PackedTokens [N, T, D] (already modulated), O : ImportanceMatrix,
    routing : RoutingDecision over `heads` heads.  Returns PackedTokens with
    the attention output after the output projection.  chunk bounds the
    number of components attended at once; workers > 1 spreads the chunks
    over threads."""
    _check_gate_target(gate_target)
    routing = routing.broadcast_heads(heads)
    n_components, total, width = x.tokens.shape
    positions, sources = context_index(x.segments, routing,
                                       use_compressed_context)
    gains = _gains(O, sources, heads)

    q, k, v = compo_local.qkv_heads(x.tokens, params, heads)  # [N, H, T, dh]
    q = cn.transpose(q, (1, 0, 2, 3))
    pool_shape = (heads, n_components * total, width // heads)
    k_pool = cn.reshape(cn.transpose(k, (1, 0, 2, 3)), pool_shape)
    v_pool = cn.reshape(cn.transpose(v, (1, 0, 2, 3)), pool_shape)
    head_index = np.arange(heads)[:, None, None]

    def attend(part):
        index = (head_index, positions[:, part])
        gain = gains[:, part]
        return cn.attention(
            q[:, part], cn.getitem(k_pool, index), cn.getitem(v_pool, index),
            key_gains=gain if gate_target == 'key' else None,
            value_gains=gain if gate_target == 'value' else None)

    attended = attend_chunks(attend, n_components, chunk, workers)
    merged = cn.merge_heads(cn.transpose(attended, (1, 0, 2, 3)))
    return x.with_tokens(cn.linear(merged, params, 'out'))


def _project(h, params, heads):
    qkv = h @ params['qkv.w'].value
    n_components, total, width = h.shape
    return [qkv[..., n * width:(n + 1) * width].reshape(
        n_components, total, heads, width // heads) for n in range(3)]


def _softmax_rows(logits):
    logits = logits - logits.max(axis=-1, keepdims=True)
    weights = np.exp(logits)
    return weights / weights.sum(axis=-1, keepdims=True)


def dense_reference(x, O, routing, params, heads, gate_target='key',
                    use_compressed_context=True):
    """Per-(head, component) loop over explicitly built K_i and V_i."""
    _check_gate_target(gate_target)
    routing = routing.broadcast_heads(heads)
    h = x.tokens.value
    n_components, total, width = h.shape
    q, k, v = _project(h, params, heads)
    head_width = width // heads
    out = np.zeros((n_components, total, heads, head_width))
    for head in range(heads):
        for i in range(n_components):
            context = assemble_context(i, head, x.segments, O, routing,
                                       use_compressed_context)
            keys = context.take(k[:, :, head, :])
            values = context.take(v[:, :, head, :])
            if gate_target == 'key':
                keys = context.gains[:, None] * keys
            else:
                values = context.gains[:, None] * values
            logits = (q[i, :, head, :] @ keys.T) / math.sqrt(head_width)
            out[i, :, head, :] = _softmax_rows(logits) @ values
    merged = out.reshape(n_components, total, width)
    result = merged @ params['out.w'].value + params['out.b'].value
    return x.with_tokens(cn.Tensor(result))


def dense_global_attention(x, params, heads, chunk=None, workers=1):
    """Every z token attends to the z tokens of all components, ungated.

    Returns Tensor [N, L, D] after the output projection."""
    z = x.tokens[:, x.segments.z, :]
    n_components, length, width = z.shape
    q, k, v = compo_local.qkv_heads(z, params, heads)  # [N, H, L, dh]
    q = cn.transpose(q, (1, 0, 2, 3))
    pool_shape = (heads, n_components * length, width // heads)
    k_pool = cn.reshape(cn.transpose(k, (1, 0, 2, 3)), pool_shape)
    v_pool = cn.reshape(cn.transpose(v, (1, 0, 2, 3)), pool_shape)
    k_pool, v_pool = k_pool[:, None], v_pool[:, None]

    def attend(part):
        return cn.attention(q[:, part], k_pool, v_pool)

    attended = attend_chunks(attend, n_components, chunk, workers)
    merged = cn.merge_heads(cn.transpose(attended, (1, 0, 2, 3)))
    return cn.linear(merged, params, 'out')


def init_global_block(scope, width, rng):
    compo_local.init_block(scope, width, rng)
    compo_router.init_router(scope.scope('router'), width, rng)


def route(O, cfg, rng=None):
    """Stochastic top-k while training with load balance, else top-k."""
    n_components = O.n_components
    k = compo_router.default_k(n_components, cfg.k_fraction) \
        if cfg.use_routing else 0
    if k == 0:
        routing = compo_router.RoutingDecision(
            np.zeros((O.heads, n_components, 0), dtype=np.int64), 0, 'none')
    elif rng is not None and cfg.load_balance:
        routing = compo_router.route_stochastic(O, k, rng)
    else:
        routing = compo_router.route_deterministic(O, k)
    return routing.broadcast_heads(cfg.heads)


def router_heads(cfg):
    return cfg.heads if cfg.multi_head else 1


def global_block_forward(x, mod, params, cfg, rng=None, routing=None):
    """One MoC block.  Returns (PackedTokens, RoutingDecision).

    The router reads the modulated anchor tokens.  A given routing is
    reused as is (the unconditional branch of guided sampling)."""
    compo_local.check_width(x, params)
    shift_a, scale_a, gate_a, shift_f, scale_f, gate_f = \
        compo_local.block_modulation(mod, params)
    h = x.with_tokens(compo_local.modulate(x.tokens, shift_a, scale_a))
    anchors = h.tokens[:, x.segments.anchor.start, :]
    O = compo_router.importance_scores(anchors, params.scope('router'),
                                       router_heads(cfg),
                                       cfg.router_activation)
    if routing is None:
        routing = route(O, cfg, rng)
    attended = moc_attention_forward(
        h, O, routing, params, cfg.heads, gate_target=cfg.gate_target,
        use_compressed_context=cfg.use_compressed_context,
        chunk=getattr(cfg, 'chunk', None))
    tokens = cn.add(x.tokens, cn.mul(gate_a, attended.tokens))
    ffn_in = compo_local.modulate(tokens, shift_f, scale_f)
    tokens = cn.add(tokens, cn.mul(gate_f, compo_local.feed_forward(
        ffn_in, params)))
    return x.with_tokens(tokens), routing
