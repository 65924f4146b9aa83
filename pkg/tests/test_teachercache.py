import numpy as np
import pytest

from fuselab.errors import CorruptFileError, SampleNotFoundError
from fuselab.losses import pairwise_fusion_loss, topk_select
from fuselab.merging import MergeSpec
from fuselab.pipeline import CachedTeacher, FusionConfig, LiveTeacher, fuse_unified
from fuselab.teachercache import CacheReader, CacheWriter, extract_cache, read_cache
from fuselab.toylab import (
    ModelShapes,
    forward_logits,
    gen_corpus,
    get_tokenizer,
    init_model,
    mixed_corpus,
    response_contexts,
)


def teacher_and_corpus(n=12, tokenizer="shufchar24", task="math-mod"):
    tok = get_tokenizer(tokenizer)
    shapes = ModelShapes(vocab=tok.vocab_size, embed_dim=6, context=8, hidden=10)
    model = init_model(shapes, tokenizer, seed=4)
    return model, gen_corpus(task, n, 2)


class TestWriteRead:
    def test_empty_corpus_header_only(self, tmp_path):
        model, _ = teacher_and_corpus()
        path = tmp_path / "empty.iftc"
        summary = extract_cache(model, [], path)
        assert summary.records == 0
        with CacheReader(path) as reader:
            assert len(reader) == 0
            assert reader.model_id == "shufchar24"

    def test_record_count_and_determinism(self, tmp_path):
        model, corpus = teacher_and_corpus(n=13)
        samples = corpus.train  # 10 samples at an 8:2 split of 13
        a, b = tmp_path / "a.iftc", tmp_path / "b.iftc"
        summary = extract_cache(model, samples, a)
        extract_cache(model, samples, b)
        assert summary.records == len(samples) == 10
        assert a.read_bytes() == b.read_bytes()

    def test_round_trip_matches_live_forward(self, tmp_path):
        model, corpus = teacher_and_corpus()
        tok = get_tokenizer(model.tokenizer_id)
        path = tmp_path / "cache.iftc"
        extract_cache(model, corpus.train, path)
        with CacheReader(path) as reader:
            for sample in corpus.train:
                frames = reader.read(sample.sid).frames()
                contexts, _ = response_contexts(tok, sample, model.shapes.context)
                assert len(frames) == len(contexts)
                for frame, ctx in zip(frames, contexts):
                    live = forward_logits(model, ctx)
                    np.testing.assert_allclose(frame, live, rtol=1e-6, atol=1e-6)

    def test_one_shot_read(self, tmp_path):
        model, corpus = teacher_and_corpus()
        path = tmp_path / "cache.iftc"
        extract_cache(model, corpus.train, path)
        sid = corpus.train[0].sid
        record = read_cache(path, sid)
        assert record.sample_id == sid
        assert record.vocab == model.shapes.vocab

    def test_missing_sample(self, tmp_path):
        model, corpus = teacher_and_corpus()
        path = tmp_path / "cache.iftc"
        extract_cache(model, corpus.train, path)
        with pytest.raises(SampleNotFoundError):
            read_cache(path, "nope:000000000000")

    def test_truncated_file(self, tmp_path):
        model, corpus = teacher_and_corpus()
        path = tmp_path / "cache.iftc"
        extract_cache(model, corpus.train, path)
        path.write_bytes(path.read_bytes()[:-7])
        with pytest.raises(CorruptFileError):
            CacheReader(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.iftc"
        path.write_bytes(b"WRONG" + b"\x00" * 40)
        with pytest.raises(CorruptFileError):
            CacheReader(path)

    def test_payload_corruption_detected_by_crc(self, tmp_path):
        model, corpus = teacher_and_corpus()
        path = tmp_path / "cache.iftc"
        extract_cache(model, corpus.train, path)
        raw = bytearray(path.read_bytes())
        # flip one byte inside the first record's payload
        sid_len = len(corpus.train[0].sid)
        offset = 4 + 3 + 2 + len("shufchar24") + 8 + 2 + sid_len + 8 + 5
        raw[offset] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CorruptFileError):
            read_cache(path, corpus.train[0].sid)

    def test_duplicate_sample_id_rejected(self, tmp_path):
        writer = CacheWriter(tmp_path / "dup.iftc", "m", vocab=4)
        writer.add("s1", np.zeros((2, 4)))
        with pytest.raises(ValueError):
            writer.add("s1", np.zeros((2, 4)))
        writer.close()


class TestTopkMode:
    def test_selected_values_exact_and_tail_mass_preserved(self, tmp_path):
        model, corpus = teacher_and_corpus()
        tok = get_tokenizer(model.tokenizer_id)
        path = tmp_path / "topk.iftc"
        extract_cache(model, corpus.train, path, mode="topk", k=8)
        with CacheReader(path) as reader:
            assert reader.k == 8
            sample = corpus.train[0]
            contexts, _ = response_contexts(tok, sample, model.shapes.context)
            for frame, ctx in zip(reader.read(sample.sid).frames(), contexts):
                live = forward_logits(model, ctx)
                sel_live = topk_select(live, 8)
                sel_cache = topk_select(frame, 8)
                np.testing.assert_allclose(sel_cache.values, sel_live.values, rtol=1e-6, atol=1e-6)
                # total mass is conserved: logsumexp of surrogate ~ logsumexp of live
                def lse(z):
                    m = np.max(z)
                    return m + np.log(np.sum(np.exp(z - m)))
                assert lse(frame) == pytest.approx(lse(live), abs=1e-5)

    def test_pairwise_loss_agrees_with_live_teacher(self, tmp_path):
        model, corpus = teacher_and_corpus()
        path = tmp_path / "topk.iftc"
        extract_cache(model, corpus.train, path, mode="topk", k=10)
        rng = np.random.default_rng(0)
        with CacheReader(path) as reader:
            cached = CachedTeacher(reader)
            live = LiveTeacher(model)
            for sample in corpus.train[:5]:
                pivot_frames = [rng.normal(size=32) for _ in live.frames(sample)]
                a = pairwise_fusion_loss(pivot_frames, live.frames(sample), k=6)
                b = pairwise_fusion_loss(pivot_frames, cached.frames(sample), k=6)
                assert b.loss == pytest.approx(a.loss, rel=1e-5, abs=1e-6)


class TestTrainingEquivalence:
    def _setup(self):
        pivot_tok = get_tokenizer("char32")
        pivot = init_model(
            ModelShapes(vocab=pivot_tok.vocab_size, embed_dim=8, context=8, hidden=16),
            "char32",
            seed=1,
        )
        teacher, _ = teacher_and_corpus()
        mixed = mixed_corpus([gen_corpus("math-mod", 30, 5), gen_corpus("kv-lookup", 30, 5)])
        return pivot, teacher, mixed

    def test_cache_vs_live_final_parameters(self, tmp_path):
        pivot, teacher, mixed = self._setup()
        path = tmp_path / "teacher.iftc"
        extract_cache(teacher, mixed.train, path)
        config = FusionConfig(lam=0.5, topk=10, epochs=2, early_stop_epoch=2, batch_size=16, seed=3)
        live_run = fuse_unified(pivot, [teacher], mixed, config)
        with CacheReader(path) as reader:
            cache_run = fuse_unified(pivot, [reader], mixed, config)
        rel = np.max(np.abs(live_run.model.params - cache_run.model.params)) / np.max(
            np.abs(live_run.model.params)
        )
        assert rel < 1e-5

    def test_record_order_does_not_matter(self, tmp_path):
        pivot, teacher, mixed = self._setup()
        tok = get_tokenizer(teacher.tokenizer_id)
        forward_order = tmp_path / "fwd.iftc"
        reverse_order = tmp_path / "rev.iftc"
        extract_cache(teacher, mixed.train, forward_order)
        writer = CacheWriter(reverse_order, teacher.tokenizer_id, teacher.shapes.vocab)
        for sample in reversed(mixed.train):
            contexts, _ = response_contexts(tok, sample, teacher.shapes.context)
            writer.add(sample.sid, np.stack([forward_logits(teacher, c) for c in contexts]))
        writer.close()
        config = FusionConfig(lam=0.5, epochs=1, early_stop_epoch=1, batch_size=16, seed=3)
        with CacheReader(forward_order) as a, CacheReader(reverse_order) as b:
            run_a = fuse_unified(pivot, [a], mixed, config)
            run_b = fuse_unified(pivot, [b], mixed, config)
        np.testing.assert_array_equal(run_a.model.params, run_b.model.params)
