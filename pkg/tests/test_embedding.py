import json

import numpy as np
import numpy.testing as npt
import pytest

from cellformer.embedding import (
    EmbeddedSample,
    HashEmbedder,
    StoreProvider,
    content_key,
    embed_sample,
    hash_embed,
    lookup,
    open_store,
    write_store,
)
from cellformer.errors import DataError, StoreError, StoreMissError
from cellformer.prompts import PromptedSample


def corpus_100():
    """Fixed 100-sentence corpus of distinct 20-token sentences
    (deterministic; max observed off-diagonal cosine is 0.4231)."""
    rng = np.random.default_rng(1234)
    vocab = [f"word{i}" for i in range(2000)]
    return [
        " ".join(vocab[int(k)] for k in rng.integers(0, 2000, size=20))
        for _ in range(100)
    ]


class TestHashEmbed:
    def test_deterministic(self):
        a = hash_embed("The weight of patient is 70 kilograms", 32, seed=5)
        b = hash_embed("The weight of patient is 70 kilograms", 32, seed=5)
        npt.assert_array_equal(a, b)

    def test_unit_norm(self):
        for text in ("some text", "a", "many different tokens in this one"):
            vec = hash_embed(text, 64)
            assert abs(np.linalg.norm(vec) - 1.0) < 1e-6

    def test_empty_text_zero_vector(self):
        npt.assert_array_equal(hash_embed("", 16), np.zeros(16))
        npt.assert_array_equal(hash_embed("!!! ...", 16), np.zeros(16))

    def test_seed_changes_vector(self):
        a = hash_embed("hello world", 32, seed=0)
        b = hash_embed("hello world", 32, seed=1)
        assert np.linalg.norm(a - b) > 0.1

    def test_case_and_punctuation_insensitive(self):
        npt.assert_array_equal(hash_embed("Hello, World!", 16),
                               hash_embed("hello world", 16))

    def test_corpus_cosines_stay_low(self):
        # distinct 20-token sentences should not collide: max off-diagonal
        # cosine over a fixed 100-sentence corpus stays under 0.5 at dim=64
        vectors = np.stack([hash_embed(s, 64) for s in corpus_100()])
        gram = vectors @ vectors.T
        off_diag = gram - np.eye(len(gram))
        assert off_diag.max() < 0.5

    def test_dim_validated(self):
        with pytest.raises(DataError):
            hash_embed("x", 0)


class TestStore:
    def entries(self):
        rng = np.random.default_rng(7)
        return [(f"prompt number {i}", rng.normal(size=8)) for i in range(3)]

    def test_round_trip_bit_equal_float32(self, tmp_path):
        path = tmp_path / "store.cemb"
        entries = self.entries()
        write_store(entries, path, normalize=False, producer="test")
        store = open_store(path)
        assert len(store) == 3
        assert store.dim == 8
        for text, vec in entries:
            npt.assert_array_equal(
                lookup(store, text), np.asarray(vec, dtype=np.float32).astype(np.float64))

    def test_duplicate_texts_collapse(self, tmp_path):
        path = tmp_path / "store.cemb"
        vec = np.ones(4)
        write_store([("same", vec), ("same", vec), ("other", vec)], path)
        store = open_store(path)
        assert len(store) == 2

    def test_normalized_flag_validated(self, tmp_path):
        path = tmp_path / "store.cemb"
        write_store(self.entries(), path, normalize=True)
        store = open_store(path)
        assert store.normalized
        for vec in store.entries.values():
            assert abs(np.linalg.norm(vec.astype(np.float64)) - 1.0) < 1e-4

    def test_unknown_version_named_in_error(self, tmp_path):
        path = tmp_path / "store.cemb"
        path.write_text(json.dumps({"version": "CEMB999", "dim": 2, "count": 0,
                                    "normalized": False, "producer": "x"}) + "\n")
        with pytest.raises(StoreError, match="CEMB999"):
            open_store(path)

    def test_inconsistent_dims_rejected(self, tmp_path):
        path = tmp_path / "store.cemb"
        header = {"version": "CEMB1", "dim": 2, "count": 1,
                  "normalized": False, "producer": "x"}
        record = {"key": "0" * 64, "vec": [1.0, 2.0, 3.0]}
        path.write_text(json.dumps(header) + "\n" + json.dumps(record) + "\n")
        with pytest.raises(StoreError, match="length"):
            open_store(path)

    def test_count_mismatch_rejected(self, tmp_path):
        path = tmp_path / "store.cemb"
        header = {"version": "CEMB1", "dim": 1, "count": 5,
                  "normalized": False, "producer": "x"}
        record = {"key": "0" * 64, "vec": [1.0]}
        path.write_text(json.dumps(header) + "\n" + json.dumps(record) + "\n")
        with pytest.raises(StoreError, match="count"):
            open_store(path)

    def test_mixed_dim_write_rejected(self, tmp_path):
        with pytest.raises(StoreError, match="inconsistent"):
            write_store([("a", np.zeros(3)), ("b", np.zeros(4))],
                        tmp_path / "bad.cemb")

    def test_lookup_semantics(self, tmp_path):
        path = tmp_path / "store.cemb"
        write_store([("present", np.arange(4.0))], path)
        store = open_store(path)
        npt.assert_array_equal(lookup(store, ""), np.zeros(4))
        with pytest.raises(StoreMissError, match="absent"):
            lookup(store, "absent")

    def test_keys_are_content_hashes(self, tmp_path):
        path = tmp_path / "store.cemb"
        write_store([("hello", np.zeros(2))], path)
        store = open_store(path)
        assert content_key("hello") in store.entries

    def test_extra_metadata_preserved(self, tmp_path):
        path = tmp_path / "store.cemb"
        write_store([("a", np.zeros(2))], path,
                    extra_metadata={"model": "some-encoder", "max_tokens": 128})
        store = open_store(path)
        assert store.metadata["model"] == "some-encoder"
        assert store.metadata["max_tokens"] == 128


class TestEmbedSample:
    def test_rows_and_mask(self):
        provider = HashEmbedder(16, seed=0)
        sample = PromptedSample(prompts=("alpha beta", "", "gamma"),
                                presence=(True, False, True))
        out = embed_sample(provider, sample)
        assert out.matrix.shape == (3, 16)
        npt.assert_array_equal(out.matrix[1], np.zeros(16))
        assert out.mask == (True, False, True)
        assert np.linalg.norm(out.matrix[0]) > 0

    def test_deterministic(self):
        provider = HashEmbedder(8, seed=3)
        sample = PromptedSample(prompts=("a b c", "d e"), presence=(True, True))
        first = embed_sample(provider, sample)
        second = embed_sample(provider, sample)
        npt.assert_array_equal(first.matrix, second.matrix)
        assert first.mask == second.mask

    def test_store_miss_carries_context(self, tmp_path):
        path = tmp_path / "store.cemb"
        write_store([("known", np.zeros(4))], path)
        provider = StoreProvider(open_store(path))
        sample = PromptedSample(prompts=("known", "unknown"), presence=(True, True))
        with pytest.raises(StoreMissError, match="row 12, column 1"):
            embed_sample(provider, sample, row_index=12)

    def test_mask_length_validated(self):
        with pytest.raises(DataError):
            EmbeddedSample(matrix=np.zeros((2, 4)), mask=(True,))
