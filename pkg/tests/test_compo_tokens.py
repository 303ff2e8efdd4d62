"""Compressed-token packing, segments and ID embeddings."""

import numpy as np
import pytest

import compo_numerics as cn
import compo_tokens as ct
from compo_errors import TokenError


def make_packer(width, n_p, seed=0):
    params = cn.ParamStore()
    rng = np.random.default_rng(seed)
    ct.init_packer(params.scope('pack'), width, n_p, rng)
    ct.init_id_codebook(params.scope('ids'), width, rng)
    return params


def naive_pack(z, params, scope='pack'):
    queries = np.concatenate([params[scope + '.p'].value,
                              params[scope + '.p_bar'].value])
    q = queries @ params[scope + '.wq'].value
    k = z @ params[scope + '.wk'].value
    v = z @ params[scope + '.wv'].value
    out = np.zeros((q.shape[0], v.shape[1]))
    for row in range(q.shape[0]):
        logits = np.array([q[row] @ k[col] for col in range(k.shape[0])])
        logits /= np.sqrt(q.shape[1])
        weights = np.exp(logits - logits.max())
        weights /= weights.sum()
        out[row] = weights @ v
    return out


class TestSegments:
    @pytest.mark.parametrize("L, sigma, n_p, total", [
        (512, 8, 64, 577),
        (7, 8, 1, 9),
        (1024, 8, 128, 1153),
        (32, 1, 32, 65),
    ])
    def test_compressed_count(self, L, sigma, n_p, total):
        assert ct.compressed_count(L, sigma) == n_p
        assert ct.Segments(L, n_p).total == total

    def test_lengths(self):
        assert ct.Segments(4, 2).lengths() == (4, 2, 1)

    def test_empty_component(self):
        with pytest.raises(TokenError, match="empty component"):
            ct.compressed_count(0, 8)
        with pytest.raises(TokenError, match="empty component"):
            ct.Segments(0, 1)

    def test_split_concat_is_exact(self):
        rng = np.random.default_rng(0)
        tokens = cn.Tensor(rng.standard_normal((3, 7, 4)))
        x = ct.PackedTokens(tokens, ct.Segments(4, 2))
        z, p, anchor = ct.split_component(x)
        assert (z.shape[1], p.shape[1], anchor.shape[1]) == (4, 2, 1)
        joined = np.concatenate([z.value, p.value, anchor.value], axis=1)
        assert np.array_equal(joined, tokens.value)

    def test_token_count_must_match(self):
        with pytest.raises(TokenError):
            ct.PackedTokens(cn.Tensor(np.ones((2, 6, 4))), ct.Segments(4, 2))


class TestPackComponent:
    def test_identical_rows_pack_to_the_row(self):
        width = 4
        params = make_packer(width, 2)
        params['pack.wq'].value[...] = 0.0
        params['pack.wk'].value[...] = 0.0
        params['pack.wv'].value[...] = np.eye(width)
        v = np.array([0.5, -1.0, 2.0, 0.25])
        z = cn.Tensor(np.tile(v, (6, 1)))
        p, anchor = ct.pack_component(
            z, ct.LearnableQueries(params.scope('pack')),
            params.scope('pack'))
        np.testing.assert_allclose(p.value, np.tile(v, (2, 1)), atol=1e-12)
        np.testing.assert_allclose(anchor.value, v[None], atol=1e-12)

    def test_row_order_does_not_matter(self):
        params = make_packer(4, 2, seed=1)
        z = np.random.default_rng(1).standard_normal((8, 4))
        queries = ct.LearnableQueries(params.scope('pack'))
        p, anchor = ct.pack_component(z, queries, params.scope('pack'))
        p_perm, anchor_perm = ct.pack_component(
            z[np.random.default_rng(2).permutation(8)], queries,
            params.scope('pack'))
        np.testing.assert_allclose(p.value, p_perm.value, atol=1e-12)
        np.testing.assert_allclose(anchor.value, anchor_perm.value,
                                   atol=1e-12)

    def test_matches_three_matmul_oracle(self):
        # L=8, D=4, sigma=4
        n_p = ct.compressed_count(8, 4)
        params = make_packer(4, n_p, seed=3)
        params['pack.p'].value[...] = np.random.default_rng(4).standard_normal(
            (n_p, 4))
        z = np.random.default_rng(5).standard_normal((8, 4))
        p, anchor = ct.pack_component(
            z, ct.LearnableQueries(params.scope('pack')),
            params.scope('pack'))
        expected = naive_pack(z, params)
        np.testing.assert_allclose(
            np.concatenate([p.value, anchor.value]), expected, atol=1e-10)

    def test_components_pack_independently(self):
        params = make_packer(4, 2, seed=6)
        queries = ct.LearnableQueries(params.scope('pack'))
        z = np.random.default_rng(7).standard_normal((3, 8, 4))
        p, _ = ct.pack_component(z, queries, params.scope('pack'))
        changed = z.copy()
        changed[2] += 5.0
        p_changed, _ = ct.pack_component(changed, queries,
                                         params.scope('pack'))
        assert np.array_equal(p.value[:2], p_changed.value[:2])
        assert not np.allclose(p.value[2], p_changed.value[2])

    def test_empty_component(self):
        params = make_packer(4, 2)
        with pytest.raises(TokenError, match="empty component"):
            ct.pack_component(np.zeros((0, 4)),
                              ct.LearnableQueries(params.scope('pack')),
                              params.scope('pack'))


class TestIdEmbeddings:
    def test_full_codebook_is_a_permutation(self):
        ids = ct.assign_id_embeddings(50, 50, np.random.default_rng(0))
        assert sorted(ids) == list(range(50))

    def test_single_component(self):
        ids = ct.assign_id_embeddings(1, 50, np.random.default_rng(0))
        assert len(ids) == 1 and 0 <= ids[0] < 50

    def test_seeded(self):
        first = ct.assign_id_embeddings(8, 50, np.random.default_rng(9))
        second = ct.assign_id_embeddings(8, 50, np.random.default_rng(9))
        assert first == second
        assert len(set(first)) == 8

    def test_too_many_components(self):
        params = make_packer(4, 1)
        codebook = ct.IdCodebook(params.scope('ids'))
        with pytest.raises(TokenError,
                           match="component count exceeds ID codebook"):
            ct.assign_id_embeddings(51, codebook, np.random.default_rng(0))

    def test_draws_are_uniform(self):
        rng = np.random.default_rng(11)
        draws, N = 10000, 5
        counts = np.zeros(50)
        for _ in range(draws):
            counts[ct.assign_id_embeddings(N, 50, rng)] += 1
        expected = N / 50.0
        # 4.5 sigma: the bound has to hold for all 50 indices at once
        bound = 4.5 * np.sqrt(expected * (1 - expected) / draws)
        assert np.all(np.abs(counts / draws - expected) < bound)

    def test_embedding_reaches_every_token(self):
        params = make_packer(4, 2, seed=12)
        codebook = ct.IdCodebook(params.scope('ids'))
        z = np.random.default_rng(13).standard_normal((2, 5, 4))
        queries = ct.LearnableQueries(params.scope('pack'))
        bare = ct.pack_tokens(cn.Tensor(z), queries, params.scope('pack'))
        tagged = ct.pack_tokens(cn.Tensor(z), queries, params.scope('pack'),
                                codebook, [7, 3])
        delta = tagged.tokens.value - bare.tokens.value
        rows = codebook.embeddings.value
        np.testing.assert_allclose(delta[0], np.tile(rows[7], (8, 1)),
                                   atol=1e-12)
        np.testing.assert_allclose(delta[1], np.tile(rows[3], (8, 1)),
                                   atol=1e-12)
        assert tagged.segments == ct.Segments(5, 2)

    def test_ids_must_be_distinct(self):
        params = make_packer(4, 2)
        codebook = ct.IdCodebook(params.scope('ids'))
        with pytest.raises(TokenError):
            ct.add_id_embeddings(cn.Tensor(np.zeros((2, 3, 4))), codebook,
                                 [1, 1])
