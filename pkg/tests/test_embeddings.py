"""Tests for tokenization, providers, patch splitting, and input assembly."""

import numpy as np
import pytest

from camenn import autograd as ag
from camenn import embeddings as emb
from camenn.autograd import Tensor
from camenn.errors import ContractError


@pytest.fixture
def vocab():
    return emb.Vocab(["fresh", "carrots", "berries", "local"])


class TestTokenize:
    def test_empty_text(self, vocab):
        assert emb.tokenize("", vocab) == []

    def test_known_words(self, vocab):
        ids = emb.tokenize("fresh carrots", vocab)
        assert ids == [vocab.id_of("fresh"), vocab.id_of("carrots")]
        assert 0 not in ids

    def test_unknown_maps_to_unk(self, vocab):
        assert emb.tokenize("zucchini", vocab) == [vocab.unk_id]

    def test_truncation(self, vocab):
        text = " ".join(["fresh"] * 80)
        assert len(emb.tokenize(text, vocab, max_text_len=50)) == 50

    def test_lowercases_and_splits_punctuation(self, vocab):
        assert emb.tokenize("Fresh, CARROTS!", vocab) == [
            vocab.id_of("fresh"), vocab.id_of("carrots")]


class TestProviders:
    def test_text_provider_deterministic(self, vocab):
        a = emb.TextProvider(len(vocab), 8, seed=3)
        b = emb.TextProvider(len(vocab), 8, seed=3)
        np.testing.assert_array_equal(a.table.data, b.table.data)
        c = emb.TextProvider(len(vocab), 8, seed=4)
        assert not np.array_equal(a.table.data, c.table.data)

    def test_text_provider_is_frozen(self, vocab):
        p = emb.TextProvider(len(vocab), 8, seed=0)
        assert not p.table.requires_grad

    def test_image_provider_deterministic_and_dim(self):
        p = emb.ImageProvider(100, 8, seed=1)
        patch = np.linspace(0, 1, 100).reshape(10, 10)
        out1 = p.embed([patch]).data
        out2 = p.embed([patch]).data
        np.testing.assert_array_equal(out1, out2)
        assert out1.shape == (1, 8)
        assert np.all(np.abs(out1) <= 1.0)  # tanh squashing


class TestSplitPatches:
    def test_3x3_grid(self):
        img = np.random.default_rng(0).random((300, 300, 3))
        grid = emb.split_patches(img, 3, 3)
        assert len(grid.patches) == 9
        assert grid.patches[0].shape == (100, 100, 3)

    def test_2x2_single_channel_enumeration(self):
        img = np.array([[1.0, 2.0], [3.0, 4.0]])
        grid = emb.split_patches(img, 2, 2)
        vals = [float(p.reshape(())) for p in grid.patches]
        assert vals == [1.0, 2.0, 3.0, 4.0]  # row-major

    def test_round_trip_reassembly(self):
        img = np.random.default_rng(1).random((30, 30, 1))
        grid = emb.split_patches(img, 3, 3)
        np.testing.assert_array_equal(emb.reassemble_patches(grid), img)

    def test_non_divisible_rejected(self):
        with pytest.raises(ContractError):
            emb.split_patches(np.zeros((10, 10, 1)), 3, 3)


class TestEncode:
    def make_tables(self, d, n, zero=False):
        rng = np.random.default_rng(7)
        if zero:
            return Tensor(np.zeros((n, d))), Tensor(np.zeros(d))
        return Tensor(rng.standard_normal((n, d))), Tensor(rng.standard_normal(d))

    def test_zero_tables_identity_text(self, vocab):
        provider = emb.TextProvider(len(vocab), 6, seed=0)
        pos, seg = self.make_tables(6, 10, zero=True)
        ids = [1, 2, 3]
        out = emb.encode_text(ids, provider, pos, seg)
        np.testing.assert_array_equal(out.data, provider.table.data[ids].T)

    def test_single_token_hand_sum(self, vocab):
        provider = emb.TextProvider(len(vocab), 6, seed=0)
        pos, seg = self.make_tables(6, 10)
        out = emb.encode_text([2], provider, pos, seg)
        expected = provider.table.data[2] + pos.data[0] + seg.data
        np.testing.assert_allclose(out.data[:, 0], expected)

    def test_position_term_fixed_per_index(self, vocab):
        provider = emb.TextProvider(len(vocab), 6, seed=0)
        pos, seg = self.make_tables(6, 10)
        a = emb.encode_text([1, 2], provider, pos, seg).data
        b = emb.encode_text([2, 1], provider, pos, seg).data
        # column difference equals provider difference only; position fixed
        np.testing.assert_allclose(a[:, 0] - b[:, 0],
                                   provider.table.data[1] - provider.table.data[2])

    def test_empty_tokens(self, vocab):
        provider = emb.TextProvider(len(vocab), 6, seed=0)
        pos, seg = self.make_tables(6, 10)
        assert emb.encode_text([], provider, pos, seg).shape == (6, 0)

    def test_zero_tables_identity_image(self):
        provider = emb.ImageProvider(100, 6, seed=0)
        pos, seg = self.make_tables(6, 9, zero=True)
        img = np.random.default_rng(2).random((30, 30, 1))
        grid = emb.split_patches(img, 3, 3)
        out = emb.encode_image(grid, provider, pos, seg)
        np.testing.assert_array_equal(out.data, provider.embed(grid.patches).data.T)

    def test_identical_patches_differ_by_position(self):
        provider = emb.ImageProvider(4, 6, seed=0)
        pos, seg = self.make_tables(6, 9)
        patch = np.ones((2, 2, 1))
        grid = emb.ImagePatchGrid([patch, patch.copy()], 1, 2, patch.shape)
        out = emb.encode_image(grid, provider, pos, seg).data
        np.testing.assert_allclose(out[:, 0] - out[:, 1], pos.data[0] - pos.data[1])

    def test_full_grid_vs_manual_sum(self):
        provider = emb.ImageProvider(100, 6, seed=3)
        pos, seg = self.make_tables(6, 9)
        img = np.random.default_rng(5).random((30, 30, 1))
        grid = emb.split_patches(img, 3, 3)
        out = emb.encode_image(grid, provider, pos, seg).data
        for p in range(9):
            expected = (provider.embed([grid.patches[p]]).data[0]
                        + pos.data[p] + seg.data)
            np.testing.assert_allclose(out[:, p], expected)


class TestAssembleInput:
    def make_block(self, d, n_t, n_p, seed):
        rng = np.random.default_rng(seed)
        return emb.ItemBlock(Tensor(rng.standard_normal(d)),
                             Tensor(rng.standard_normal((d, n_t))),
                             Tensor(rng.standard_normal(d)),
                             Tensor(rng.standard_normal((d, n_p))))

    def test_empty_behavior(self):
        target = self.make_block(4, 3, 2, 0)
        other = Tensor(np.zeros((4, 2)))
        seq = emb.assemble_input(other, [], target)
        assert seq.length == 2 + target.length
        assert [b[0] for b in seq.block_boundaries] == ["other", "target"]
        assert seq.cls_index == 2

    def test_boundaries_by_prefix_sums(self):
        b1 = self.make_block(4, 2, 2, 1)   # length 6
        b2 = self.make_block(4, 3, 1, 2)   # length 6
        target = self.make_block(4, 1, 2, 3)  # length 5
        seq = emb.assemble_input(Tensor(np.zeros((4, 2))), [b1, b2], target)
        assert seq.block_boundaries == [("other", 0, 2), ("item0", 2, 8),
                                        ("item1", 8, 14), ("target", 14, 19)]
        assert seq.cls_index == 14

    def test_round_trip_slicing(self):
        blocks = [self.make_block(4, 2, 3, s) for s in range(3)]
        target = self.make_block(4, 4, 1, 9)
        other = Tensor(np.random.default_rng(10).standard_normal((4, 2)))
        seq = emb.assemble_input(other, blocks, target)
        data = seq.embeddings.data
        for (label, start, end), block in zip(seq.block_boundaries[1:-1], blocks):
            np.testing.assert_array_equal(data[:, start:end], block.columns().data)
        _, ts, te = seq.block_boundaries[-1]
        np.testing.assert_array_equal(data[:, ts:te], target.columns().data)
        np.testing.assert_array_equal(data[:, 0:2], other.data)

    def test_segment_ids_match_positions(self):
        target = self.make_block(4, 2, 3, 0)
        seq = emb.assemble_input(None, [], target)
        assert seq.segment_ids == ["C", "T", "T", "S", "I", "I", "I"]
        # 'T' only at text positions, 'I' only at image positions
        data = target.columns().data
        np.testing.assert_array_equal(seq.embeddings.data, data)

    def test_dimension_mismatch_rejected(self):
        target = self.make_block(4, 2, 2, 0)
        with pytest.raises(ContractError):
            emb.assemble_input(Tensor(np.zeros((5, 2))), [], target)

    def test_gradient_flows_through_assembly(self):
        d = 3
        cls = Tensor(np.random.default_rng(0).standard_normal(d), requires_grad=True)
        block = emb.ItemBlock(cls, Tensor(np.zeros((d, 2))),
                              Tensor(np.zeros(d)), Tensor(np.zeros((d, 1))))
        seq = emb.assemble_input(None, [], block)
        ag.backward(ag.tensor_sum(seq.embeddings))
        np.testing.assert_array_equal(cls.grad, np.ones(d))


def test_position_injectivity_check():
    good = Tensor(np.arange(12).reshape(4, 3).astype(float))
    emb.check_position_injectivity(good)
    bad = Tensor(np.ones((3, 2)))
    with pytest.raises(ContractError):
        emb.check_position_injectivity(bad)
