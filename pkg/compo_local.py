"""compo_local - per-component transformer block for compo

Pre-norm block: adaptive-modulated masked multi-head self-attention, then a
GELU feed-forward (hidden = 4D), each added back through a modulation gate.
The timestep + condition vector produces the six shift / scale / gate vectors
through a zero-initialized projection, so the block starts as the identity.

The attention mask is band-blocked inside one component's sequence
x_i = [z_i ; p_i ; anchor_i]:

* vecset rows see vecset columns only,
* compressed rows see vecset and compressed columns,
* the anchor row sees every column.


Requirements
------------
numpy : the boolean mask.
compo_numerics : tensors, attention and parameters.
compo_errors : NumericsError.

Functions
---------
build_local_mask(L, N_p) : the band-blocked mask.
init_block(scope, width, rng) : parameters shared by local and global blocks.
block_modulation(mod, scope) : six modulation vectors.
local_block_forward(x, mod, params, heads) : one local block.
"""

import numpy as np
import compo_numerics as cn
from compo_errors import NumericsError


def build_local_mask(L, n_p):
    total = L + n_p + 1
    mask = np.zeros((total, total), dtype=bool)
    mask[:L, :L] = True
    mask[L:L + n_p, :L + n_p] = True
    mask[L + n_p, :] = True
    return mask


def local_mask_count(L, n_p):
    return L * L + n_p * (L + n_p) + (L + n_p + 1)


def init_block(scope, width, rng):
    cn.init_linear(scope, 'ada', width, 6 * width, rng, zero=True)
    # No bias: a key bias only shifts each softmax row
    cn.init_linear(scope, 'qkv', width, 3 * width, rng, bias=False)
    cn.init_linear(scope, 'out', width, width, rng)
    cn.init_linear(scope, 'ffn1', width, 4 * width, rng)
    cn.init_linear(scope, 'ffn2', 4 * width, width, rng)


def block_modulation(mod, scope):
    """(shift_attn, scale_attn, gate_attn, shift_ffn, scale_ffn, gate_ffn)"""
    ada = cn.linear(cn.silu(mod), scope, 'ada')
    width = ada.shape[-1] // 6
    return tuple(ada[..., n * width:(n + 1) * width] for n in range(6))


def modulate(x, shift, scale):
    return cn.add(cn.mul(cn.layernorm(x), cn.add(scale, 1.0)), shift)


def feed_forward(h, scope):
    return cn.linear(cn.gelu(cn.linear(h, scope, 'ffn1')), scope, 'ffn2')


def qkv_heads(h, scope, heads):
    qkv = cn.linear(h, scope, 'qkv', bias=False)
    width = qkv.shape[-1] // 3
    return tuple(cn.split_heads(qkv[..., n * width:(n + 1) * width], heads)
                 for n in range(3))


def check_width(x, scope):
    width = scope['qkv.w'].shape[0]
    if x.width != width:
        raise NumericsError("token width {} does not match block width {}".
                            format(x.width, width))


def local_block_forward(x, mod, params, heads):
    check_width(x, params)
    segments = x.segments
    mask = build_local_mask(segments.L, segments.n_p)
    shift_a, scale_a, gate_a, shift_f, scale_f, gate_f = \
        block_modulation(mod, params)

    h = modulate(x.tokens, shift_a, scale_a)
    q, k, v = qkv_heads(h, params, heads)
    attended = cn.merge_heads(cn.attention(q, k, v, mask=mask))
    tokens = cn.add(x.tokens,
                    cn.mul(gate_a, cn.linear(attended, params, 'out')))

    h = modulate(tokens, shift_f, scale_f)
    tokens = cn.add(tokens, cn.mul(gate_f, feed_forward(h, params)))
    return x.with_tokens(tokens)
