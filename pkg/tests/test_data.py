import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from captionkit import data


class TestTokenize:
    def test_lowercase_split_strip(self):
        assert data.tokenize("A red Ball, on the TABLE.") == [
            "a", "red", "ball", "on", "the", "table",
        ]

    def test_pure_punctuation_dropped(self):
        assert data.tokenize("!! ... ok") == ["ok"]


class TestBuildVocab:
    def test_hand_counted_min_count_one(self):
        vocab = data.build_vocab([["a", "b"], ["a"]], min_count=1)
        assert vocab.size == 5
        assert vocab.encode_token("a") == 3
        assert vocab.encode_token("b") == 4

    def test_hand_counted_min_count_two(self):
        vocab = data.build_vocab([["a", "b"], ["a"]], min_count=2)
        assert vocab.size == 4
        assert vocab.encode_token("b") == data.UNK_ID

    def test_reserved_ids_fixed(self):
        vocab = data.build_vocab([["x"]])
        assert vocab.decode_id(0) == "<S>"
        assert vocab.decode_id(1) == "<E>"
        assert vocab.decode_id(2) == "<UNK>"

    def test_deterministic_tie_break_is_lexicographic(self):
        vocab = data.build_vocab([["zeta", "alpha"], ["alpha", "zeta"]])
        assert vocab.encode_token("alpha") == 3
        assert vocab.encode_token("zeta") == 4

    def test_empty_corpus_rejected(self):
        with pytest.raises(data.EmptyCorpusError):
            data.build_vocab([])

    def test_file_round_trip(self, tmp_path):
        vocab = data.build_vocab([["a", "b", "c"], ["a", "b"], ["a"]], min_count=2)
        path = tmp_path / "vocab.txt"
        vocab.to_file(path)
        assert data.Vocabulary.from_file(path) == vocab


class TestEncodeDecode:
    def test_round_trip_running_example(self):
        caption = data.tokenize("a woman is playing tennis")
        vocab = data.build_vocab([caption])
        seq = data.encode(caption, vocab, max_steps=15)
        assert data.decode(seq.target_ids, vocab) == caption
        assert data.decode(seq.input_ids, vocab) == caption  # leading <S> skipped
        assert seq.valid_len == 6
        assert len(seq.input_ids) == 16

    def test_teacher_forcing_alignment(self):
        vocab = data.build_vocab([["x", "y"]])
        seq = data.encode(["x", "y"], vocab, max_steps=4)
        assert list(seq.input_ids) == [data.START_ID, 3, 4, data.END_ID, data.END_ID]
        assert list(seq.target_ids) == [3, 4, data.END_ID, data.END_ID, data.END_ID]
        assert seq.valid_len == 3

    def test_empty_caption(self):
        vocab = data.build_vocab([["x"]])
        seq = data.encode([], vocab, max_steps=3)
        assert list(seq.input_ids) == [data.START_ID, data.END_ID, data.END_ID, data.END_ID]
        assert list(seq.target_ids) == [data.END_ID] * 4
        assert seq.valid_len == 1

    def test_truncation(self):
        tokens = [f"w{i}" for i in range(20)]
        vocab = data.build_vocab([tokens])
        seq = data.encode(tokens, vocab, max_steps=15)
        assert seq.valid_len == 16
        assert data.decode(seq.target_ids, vocab) == tokens[:15]

    def test_oov_encodes_to_unk(self):
        vocab = data.build_vocab([["known"]])
        seq = data.encode(["mystery"], vocab, max_steps=2)
        assert seq.target_ids[0] == data.UNK_ID

    @given(st.lists(st.sampled_from(["cat", "dog", "sat", "mat", "ran"]), min_size=0, max_size=8))
    @settings(max_examples=40, deadline=None)
    def test_round_trip_property(self, caption):
        vocab = data.build_vocab([["cat", "dog", "sat", "mat", "ran"]])
        assert data.decode(data.encode(caption, vocab, 8).target_ids, vocab) == caption


class TestFeatureFile:
    def _features(self, with_spatial=True):
        rng = np.random.default_rng(0)
        out = {}
        for i in range(2):
            g = rng.normal(size=6).astype("<f4").astype(np.float64)
            s = None
            if with_spatial:
                s = rng.normal(size=(3, 3, 4)).astype("<f4").astype(np.float64)
            out[f"img{i}"] = data.ImageFeatures(g, s)
        return out

    def test_round_trip_bit_exact(self, tmp_path):
        feats = self._features()
        path = tmp_path / "f.ccf"
        data.write_features(feats, path)
        loaded = data.read_features(path)
        assert loaded.keys() == feats.keys()
        for key in feats:
            assert np.array_equal(loaded[key].global_vec, feats[key].global_vec)
            assert np.array_equal(loaded[key].spatial, feats[key].spatial)

    def test_file_level_round_trip(self, tmp_path):
        p1, p2 = tmp_path / "a.ccf", tmp_path / "b.ccf"
        data.write_features(self._features(), p1)
        data.write_features(data.read_features(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_no_spatial_variant(self, tmp_path):
        feats = self._features(with_spatial=False)
        path = tmp_path / "f.ccf"
        data.write_features(feats, path)
        loaded = data.read_features(path)
        assert loaded["img0"].spatial is None

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "f.ccf"
        path.write_bytes(b"XXXX" + b"\x00" * 32)
        with pytest.raises(data.FormatError, match="magic"):
            data.read_features(path)

    def test_truncated_payload_reports_offset(self, tmp_path):
        path = tmp_path / "f.ccf"
        data.write_features(self._features(), path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-7])
        with pytest.raises(data.FormatError, match="offset"):
            data.read_features(path)

    def test_trailing_garbage_rejected(self, tmp_path):
        path = tmp_path / "f.ccf"
        data.write_features(self._features(), path)
        path.write_bytes(path.read_bytes() + b"zz")
        with pytest.raises(data.FormatError, match="trailing"):
            data.read_features(path)

    def test_full_scale_header_accepted(self, tmp_path):
        # F=4096, G=7, C=512 -- one image keeps the file small enough.
        feat = data.ImageFeatures(np.zeros(4096), np.zeros((7, 7, 512)))
        path = tmp_path / "big.ccf"
        data.write_features({"img": feat}, path)
        loaded = data.read_features(path)
        assert loaded["img"].global_vec.shape == (4096,)
        assert loaded["img"].spatial.shape == (7, 7, 512)

    def test_non_finite_rejected(self):
        with pytest.raises(data.InvalidFeatureError):
            data.ImageFeatures(np.array([1.0, np.nan]))


class TestCaptionFile:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "caps.tsv"
        items = [("img0", ["a", "red", "ball"]), ("img1", ["the", "cat"])]
        data.write_caption_file(path, items)
        assert data.read_caption_file(path) == items

    def test_missing_tab_rejected(self, tmp_path):
        path = tmp_path / "caps.tsv"
        path.write_text("no tab here\n")
        with pytest.raises(data.FormatError, match="caps.tsv:1"):
            data.read_caption_file(path)


class TestSynthCorpus:
    def test_same_seed_bit_identical(self):
        a_records, a_vocab = data.synth_corpus(20, seed=7)
        b_records, b_vocab = data.synth_corpus(20, seed=7)
        assert a_vocab == b_vocab
        for a, b in zip(a_records, b_records):
            assert a.image_id == b.image_id
            assert a.caption == b.caption
            assert np.array_equal(a.features.global_vec, b.features.global_vec)
            assert np.array_equal(a.features.spatial, b.features.spatial)

    def test_different_seed_differs(self):
        a_records, _ = data.synth_corpus(20, seed=7)
        b_records, _ = data.synth_corpus(20, seed=8)
        assert any(a.caption != b.caption for a, b in zip(a_records, b_records))

    def test_caption_is_pure_function_of_attributes(self):
        records, _ = data.synth_corpus(50, seed=3)
        for rec in records:
            m = rec.meta
            assert rec.caption == data.caption_for_scene(
                m["color"], m["object"], m["relation"], m["place"]
            )

    def test_distinct_tuples_have_distinct_global_features(self):
        records, _ = data.synth_corpus(60, seed=5)
        min_dist = np.inf
        for i, a in enumerate(records):
            for b in records[i + 1:]:
                ka = (a.meta["color"], a.meta["object"], a.meta["relation"], a.meta["place"])
                kb = (b.meta["color"], b.meta["object"], b.meta["relation"], b.meta["place"])
                if ka != kb:
                    min_dist = min(
                        min_dist,
                        float(np.linalg.norm(a.features.global_vec - b.features.global_vec)),
                    )
        assert min_dist > 0.0

    def test_object_signature_localized_in_block(self):
        records, _ = data.synth_corpus(10, seed=11)
        for rec in records:
            grid = rec.features.spatial
            block = set(map(tuple, rec.meta["block"]))
            g = grid.shape[0]
            inside = np.mean([grid[r, c] for (r, c) in block], axis=0)
            outside = np.mean(
                [grid[r, c] for r in range(g) for c in range(g) if (r, c) not in block],
                axis=0,
            )
            assert np.linalg.norm(inside - outside) > 1.0

    def test_vocabulary_is_compact(self):
        _, vocab = data.synth_corpus(300, seed=1)
        assert 20 <= vocab.size <= 35

    def test_round_trips_through_files(self, tmp_path):
        records, vocab = data.synth_corpus(5, seed=2)
        feats = {r.image_id: r.features for r in records}
        data.write_features(feats, tmp_path / "f.ccf")
        data.write_caption_file(tmp_path / "c.tsv", [(r.image_id, r.caption) for r in records])
        assert data.read_features(tmp_path / "f.ccf").keys() == feats.keys()
        assert [c for _, c in data.read_caption_file(tmp_path / "c.tsv")] == [
            r.caption for r in records
        ]
