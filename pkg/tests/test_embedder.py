"""Embedding training: objective math, kernels, inference, persistence."""

import math
from dataclasses import replace

import numpy as np
import pytest

from claimvec import _kernels
from claimvec.claims_data import Cohort, MemberRecord, PatientDocument, Sex
from claimvec.embedder import (EmbedConfig, EmbedModel, _mix_seed as _mix,
                               cosine_similarity, export_vectors, infer_doc_vector,
                               init_model, load_model, ns_loss_and_grads, save_model,
                               train, train_embeddings)
from claimvec.vocab import build_vocab


def toy_cohort(token_lists, base_year=2015):
    docs = []
    for i, tokens in enumerate(token_lists):
        pid = f"P{i}"
        member = MemberRecord(pid, 1980, Sex.FEMALE, 0.05, {2015: 12, 2016: 12})
        docs.append(PatientDocument(pid, list(tokens), member, {}, []))
    return Cohort(base_year=base_year, target_year=base_year + 1, documents=docs)


def two_doc_cohort(n_tokens=20, seed=5):
    rng = np.random.default_rng(seed)
    alphabet = ["A", "B", "C", "D", "E", "F"]
    return toy_cohort([
        [alphabet[i] for i in rng.integers(0, len(alphabet), n_tokens)],
        [alphabet[i] for i in rng.integers(0, len(alphabet), n_tokens)],
    ])


class TestInitModel:
    def test_entries_bounded_by_half_over_dim(self):
        cohort = two_doc_cohort()
        vocab = build_vocab(cohort, min_count=1)
        model = init_model(EmbedConfig(dim=100, seed=3), vocab, 4)
        assert np.abs(model.doc_vectors).max() <= 0.5 / 100
        assert np.abs(model.word_in).max() <= 0.5 / 100

    def test_output_matrix_starts_at_zero(self):
        cohort = two_doc_cohort()
        vocab = build_vocab(cohort, min_count=1)
        model = init_model(EmbedConfig(dim=8, seed=3), vocab, 2)
        assert not model.word_out.any()
        # zero scores mean sigmoid(0) = 0.5 on every example
        loss, grad_c, _ = ns_loss_and_grads(model.doc_vectors[0], 0, [1], model.word_out)
        assert loss == pytest.approx(2 * math.log(2))

    def test_same_seed_identical(self):
        cohort = two_doc_cohort()
        vocab = build_vocab(cohort, min_count=1)
        a = init_model(EmbedConfig(dim=8, seed=3), vocab, 2)
        b = init_model(EmbedConfig(dim=8, seed=3), vocab, 2)
        np.testing.assert_array_equal(a.doc_vectors, b.doc_vectors)
        np.testing.assert_array_equal(a.word_in, b.word_in)


class TestNsLossAndGrads:
    def test_all_zero_vectors_loss_is_six_log_two(self):
        word_out = np.zeros((10, 4))
        center = np.zeros(4)
        loss, grad_c, grad_rows = ns_loss_and_grads(center, 0, [1, 2, 3, 4, 5], word_out)
        assert loss == pytest.approx(6 * math.log(2), rel=1e-12)
        np.testing.assert_array_equal(grad_c, np.zeros(4))

    def test_grad_rows_shape_and_order(self):
        rng = np.random.default_rng(0)
        word_out = rng.normal(size=(6, 3))
        center = rng.normal(size=3)
        loss, grad_c, grad_rows = ns_loss_and_grads(center, 2, [0, 4], word_out)
        assert grad_rows.shape == (3, 3)
        # target row gradient is -(1 - sigmoid(s)) * center
        s = word_out[2] @ center
        expected = -(1 - 1 / (1 + math.exp(-s))) * center
        np.testing.assert_allclose(grad_rows[0], expected, rtol=1e-12)

    def test_target_among_negatives_rejected(self):
        word_out = np.zeros((4, 2))
        with pytest.raises(ValueError, match="negatives"):
            ns_loss_and_grads(np.ones(2), 1, [1, 2], word_out)

    @pytest.mark.parametrize("seed", [1, 2, 3])
    def test_gradients_match_central_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        dim = int(rng.integers(2, 17))
        V = 12
        word_out = rng.normal(scale=0.7, size=(V, dim))
        center = rng.normal(scale=0.7, size=dim)
        target = int(rng.integers(V))
        negatives = [int(x) for x in rng.choice([i for i in range(V) if i != target], 5)]
        loss, grad_c, grad_rows = ns_loss_and_grads(center, target, negatives, word_out)
        h = 1e-5

        for d in range(dim):
            bumped = center.copy()
            bumped[d] += h
            up, _, _ = ns_loss_and_grads(bumped, target, negatives, word_out)
            bumped[d] -= 2 * h
            down, _, _ = ns_loss_and_grads(bumped, target, negatives, word_out)
            fd = (up - down) / (2 * h)
            assert grad_c[d] == pytest.approx(fd, rel=1e-4, abs=1e-8)

        ids = [target] + negatives
        for pos, wid in enumerate(ids):
            if wid in ids[:pos]:
                continue  # duplicate negative: analytic rows are per occurrence
            for d in range(dim):
                bumped = word_out.copy()
                bumped[wid, d] += h
                up, _, _ = ns_loss_and_grads(center, target, negatives, bumped)
                bumped[wid, d] -= 2 * h
                down, _, _ = ns_loss_and_grads(center, target, negatives, bumped)
                fd = (up - down) / (2 * h)
                total = sum(grad_rows[p, d] for p, w in enumerate(ids) if w == wid)
                assert total == pytest.approx(fd, rel=1e-4, abs=1e-8)


class TestCosine:
    def test_self_similarity_is_one(self):
        x = np.array([0.3, -2.0, 5.0])
        assert cosine_similarity(x, x) == pytest.approx(1.0)

    def test_opposite_is_minus_one(self):
        x = np.array([1.0, 2.0])
        assert cosine_similarity(x, -x) == pytest.approx(-1.0)

    def test_forty_five_degrees(self):
        assert cosine_similarity([1.0, 0.0], [1.0, 1.0]) == pytest.approx(1 / math.sqrt(2))

    def test_zero_vector_rejected(self):
        with pytest.raises(ValueError, match="zero"):
            cosine_similarity([0.0, 0.0], [1.0, 0.0])


def softplus(x):
    return x + math.log1p(math.exp(-x)) if x > 0 else math.log1p(math.exp(x))


def sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def encode(cohort, vocab):
    flat, offsets, rows = [], [0], []
    for row, doc in enumerate(cohort.documents):
        ids = [vocab.index_of[t] for t in doc.tokens if t in vocab.index_of]
        if not ids:
            continue
        flat.extend(ids)
        offsets.append(len(flat))
        rows.append(row)
    return np.array(flat), np.array(offsets), np.array(rows)


def ref_ns_pair(center, t, word_out, cdf, k, lr, state, apply_center=True):
    """Python mirror of the compiled ns_pair, consuming the same rng state."""
    loss = 0.0
    grad = np.zeros_like(center)
    for i in range(k + 1):
        if i == 0:
            wid, label = t, 1.0
        else:
            wid = t
            while wid == t:
                wid = int(_kernels.cdf_search(cdf, _kernels.rand_uniform(state)))
            label = 0.0
        row = word_out[wid]
        s = float(row @ center)
        loss += softplus(-s) if label == 1.0 else softplus(s)
        g = (label - sigmoid(s)) * lr
        grad += g * row
        row += g * center
    if apply_center:
        center += grad
    return loss, grad


def ref_train_dbow(model, cohort, joint=False):
    cfg = model.config
    cdf = model.vocab.noise_table
    flat, offsets, rows = encode(cohort, model.vocab)
    total = cfg.epochs * len(flat)
    for epoch in range(cfg.epochs):
        state = _kernels.make_state(_mix(cfg.seed, epoch, 0))
        u = epoch * len(flat)
        for di in range(len(rows)):
            c = model.doc_vectors[rows[di]]
            start, end = offsets[di], offsets[di + 1]
            for pos in range(start, end):
                t = int(flat[pos])
                lr = cfg.lr_start + (cfg.lr_end - cfg.lr_start) * (u / total)
                u += 1
                ref_ns_pair(c, t, model.word_out, cdf, cfg.negatives, lr, state)
                if joint:
                    b = 1 + int(_kernels.rand_below(state, cfg.window))
                    for p2 in range(max(start, pos - b), min(end - 1, pos + b) + 1):
                        if p2 == pos:
                            continue
                        ref_ns_pair(model.word_in[int(flat[p2])], t, model.word_out,
                                    cdf, cfg.negatives, lr, state)


def ref_train_dm(model, cohort):
    cfg = model.config
    cdf = model.vocab.noise_table
    flat, offsets, rows = encode(cohort, model.vocab)
    total = cfg.epochs * len(flat)
    for epoch in range(cfg.epochs):
        state = _kernels.make_state(_mix(cfg.seed, epoch, 0))
        u = epoch * len(flat)
        for di in range(len(rows)):
            dvec = model.doc_vectors[rows[di]]
            start, end = offsets[di], offsets[di + 1]
            for pos in range(start, end):
                t = int(flat[pos])
                b = 1 + int(_kernels.rand_below(state, cfg.window))
                lo, hi = max(start, pos - b), min(end - 1, pos + b)
                lr = cfg.lr_start + (cfg.lr_end - cfg.lr_start) * (u / total)
                u += 1
                ctx = [int(flat[p2]) for p2 in range(lo, hi + 1) if p2 != pos]
                comp = dvec.copy()
                for w in ctx:
                    comp = comp + model.word_in[w]
                comp /= len(ctx) + 1
                _, grad = ref_ns_pair(comp, t, model.word_out, cdf, cfg.negatives,
                                      lr, state, apply_center=False)
                share = grad / (len(ctx) + 1)
                dvec += share
                for w in ctx:
                    model.word_in[w] += share

class TestKernelParity:
    """The compiled kernels must apply exactly the reference update math."""

    def test_dbow_matches_python_reference(self):
        cohort = two_doc_cohort(n_tokens=25)
        vocab = build_vocab(cohort, min_count=1)
        cfg = EmbedConfig(model=EmbedModel.PV_DBOW, dim=8, window=4, epochs=2, seed=11)
        fast = train(init_model(cfg, vocab, [d.patient_id for d in cohort.documents]), cohort)
        ref = init_model(cfg, vocab, [d.patient_id for d in cohort.documents])
        ref_train_dbow(ref, cohort, joint=False)
        np.testing.assert_allclose(fast.doc_vectors, ref.doc_vectors, atol=1e-9)
        np.testing.assert_allclose(fast.word_out, ref.word_out, atol=1e-9)
        np.testing.assert_array_equal(fast.word_in, ref.word_in)  # untouched without joint

    def test_dbow_joint_matches_python_reference(self):
        cohort = two_doc_cohort(n_tokens=18, seed=9)
        vocab = build_vocab(cohort, min_count=1)
        cfg = EmbedConfig(model=EmbedModel.PV_DBOW, dim=6, window=3, epochs=2, seed=4,
                          joint_word_training=True)
        fast = train(init_model(cfg, vocab, [d.patient_id for d in cohort.documents]), cohort)
        ref = init_model(cfg, vocab, [d.patient_id for d in cohort.documents])
        ref_train_dbow(ref, cohort, joint=True)
        np.testing.assert_allclose(fast.doc_vectors, ref.doc_vectors, atol=1e-9)
        np.testing.assert_allclose(fast.word_in, ref.word_in, atol=1e-9)
        np.testing.assert_allclose(fast.word_out, ref.word_out, atol=1e-9)

    def test_dm_matches_python_reference(self):
        cohort = two_doc_cohort(n_tokens=18, seed=13)
        vocab = build_vocab(cohort, min_count=1)
        cfg = EmbedConfig(model=EmbedModel.PV_DM, dim=6, window=3, epochs=2, seed=8)
        fast = train(init_model(cfg, vocab, [d.patient_id for d in cohort.documents]), cohort)
        ref = init_model(cfg, vocab, [d.patient_id for d in cohort.documents])
        ref_train_dm(ref, cohort)
        np.testing.assert_allclose(fast.doc_vectors, ref.doc_vectors, atol=1e-9)
        np.testing.assert_allclose(fast.word_in, ref.word_in, atol=1e-9)
        np.testing.assert_allclose(fast.word_out, ref.word_out, atol=1e-9)


class TestTrain:
    def test_zero_epochs_is_a_no_op(self):
        cohort = two_doc_cohort()
        vocab = build_vocab(cohort, min_count=1)
        cfg = EmbedConfig(dim=8, epochs=0, seed=3)
        fresh = init_model(cfg, vocab, [d.patient_id for d in cohort.documents])
        before = fresh.doc_vectors.copy()
        trained = train(fresh, cohort)
        np.testing.assert_array_equal(trained.doc_vectors, before)
        assert trained.training_losses == []

    @pytest.mark.parametrize("model_kind", [EmbedModel.PV_DBOW, EmbedModel.PV_DM])
    def test_loss_descends_on_tiny_corpus(self, model_kind):
        cohort = two_doc_cohort(n_tokens=20)
        vocab = build_vocab(cohort, min_count=1)
        cfg = EmbedConfig(model=model_kind, dim=8, window=4, epochs=10, seed=5)
        model = train_embeddings(cfg, vocab, cohort)
        assert len(model.training_losses) == 10
        assert model.training_losses[-1] < model.training_losses[0]

    def test_single_worker_training_is_bit_deterministic(self):
        cohort = two_doc_cohort()
        vocab = build_vocab(cohort, min_count=1)
        cfg = EmbedConfig(dim=8, epochs=3, seed=5)
        a = train_embeddings(cfg, vocab, cohort)
        b = train_embeddings(cfg, vocab, cohort)
        np.testing.assert_array_equal(a.doc_vectors, b.doc_vectors)
        np.testing.assert_array_equal(a.word_out, b.word_out)
        assert a.training_losses == b.training_losses

    def test_all_matrices_finite_after_training(self, small_cohort):
        vocab = build_vocab(small_cohort, min_count=5)
        cfg = EmbedConfig(dim=16, window=5, epochs=2, seed=5)
        model = train_embeddings(cfg, vocab, small_cohort)
        for mat in (model.doc_vectors, model.word_in, model.word_out):
            assert np.isfinite(mat).all()

    def test_documents_without_vocab_tokens_are_skipped_and_counted(self, caplog):
        cohort = toy_cohort([["A"] * 10, ["OOV1", "OOV2"]])
        vocab = build_vocab([["A"] * 10, ["B"] * 5], min_count=5)
        cfg = EmbedConfig(dim=4, epochs=1, seed=2)
        model = init_model(cfg, vocab, [d.patient_id for d in cohort.documents])
        before = model.doc_vectors[1].copy()
        import logging
        with caplog.at_level(logging.WARNING, logger="claimvec.embedder"):
            train(model, cohort)
        assert model.skipped_docs == 1
        assert "skipped 1 documents" in caplog.text
        np.testing.assert_array_equal(model.doc_vectors[1], before)

    def test_single_token_vocabulary_rejected(self):
        cohort = toy_cohort([["A"] * 10])
        vocab = build_vocab(cohort, min_count=1)
        cfg = EmbedConfig(dim=4, epochs=1, seed=2)
        with pytest.raises(ValueError, match="at least 2"):
            train(init_model(cfg, vocab, 1), cohort)

    def test_multiworker_smoke(self, small_cohort):
        vocab = build_vocab(small_cohort, min_count=5)
        cfg = EmbedConfig(dim=8, window=5, epochs=2, seed=5, workers=3)
        model = train_embeddings(cfg, vocab, small_cohort)
        assert np.isfinite(model.doc_vectors).all()
        assert len(model.training_losses) == 2

    def test_window_accepted_by_pure_dbow_even_though_unused(self):
        # window only drives PV_DM and the joint mode, but the headline
        # bag-of-words setting (dim 100, window 15) must be expressible
        cfg = EmbedConfig(model=EmbedModel.PV_DBOW, dim=100, window=15)
        assert (cfg.model, cfg.dim, cfg.window) == (EmbedModel.PV_DBOW, 100, 15)


@pytest.fixture(scope="module")
def trained():
    cohort = two_doc_cohort(n_tokens=30)
    vocab = build_vocab(cohort, min_count=1)
    cfg = EmbedConfig(dim=8, window=4, epochs=20, seed=5)
    return train_embeddings(cfg, vocab, cohort), cohort


class TestInfer:

    def test_zero_epochs_returns_seeded_initialization(self, trained):
        model, cohort = trained
        vec = infer_doc_vector(model, cohort.documents[0].tokens, infer_epochs=0, seed=3)
        rng = np.random.default_rng([model.config.seed, 3])
        expected = (rng.random(model.config.dim) - 0.5) / model.config.dim
        np.testing.assert_array_equal(vec, expected)

    def test_inference_is_deterministic(self, trained):
        model, cohort = trained
        a = infer_doc_vector(model, cohort.documents[0].tokens, infer_epochs=5, seed=3)
        b = infer_doc_vector(model, cohort.documents[0].tokens, infer_epochs=5, seed=3)
        np.testing.assert_array_equal(a, b)

    def test_objective_descends_on_a_training_document(self, trained):
        model, cohort = trained
        _, losses = infer_doc_vector(model, cohort.documents[0].tokens,
                                     infer_epochs=20, seed=1, return_losses=True)
        assert losses[-1] <= losses[0]

    def test_word_matrices_are_frozen(self, trained):
        model, cohort = trained
        before_in = model.word_in.copy()
        before_out = model.word_out.copy()
        infer_doc_vector(model, cohort.documents[1].tokens, infer_epochs=5, seed=2)
        np.testing.assert_array_equal(model.word_in, before_in)
        np.testing.assert_array_equal(model.word_out, before_out)

    def test_no_vocab_tokens_is_an_error(self, trained):
        model, _ = trained
        with pytest.raises(ValueError, match="no in-vocabulary"):
            infer_doc_vector(model, ["OOV"])


class TestPersistence:
    @pytest.fixture()
    def model(self):
        cohort = two_doc_cohort()
        vocab = build_vocab(cohort, min_count=1)
        return train_embeddings(EmbedConfig(dim=8, epochs=2, seed=5), vocab, cohort)

    def test_save_load_save_is_byte_identical(self, tmp_path, model):
        p1, p2 = tmp_path / "m1.bin", tmp_path / "m2.bin"
        save_model(model, p1)
        loaded = load_model(p1)
        save_model(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_roundtrip_is_lossless(self, tmp_path, model):
        p = tmp_path / "m.bin"
        save_model(model, p)
        loaded = load_model(p)
        np.testing.assert_array_equal(loaded.doc_vectors, model.doc_vectors)
        np.testing.assert_array_equal(loaded.word_in, model.word_in)
        np.testing.assert_array_equal(loaded.word_out, model.word_out)
        assert loaded.config == model.config
        assert loaded.vocab.tokens == model.vocab.tokens
        assert loaded.doc_index == model.doc_index
        np.testing.assert_array_equal(loaded.doc_vector("P0"), model.doc_vector("P0"))

    def test_truncated_file_is_a_corruption_error(self, tmp_path, model):
        p = tmp_path / "m.bin"
        save_model(model, p)
        data = p.read_bytes()
        p.write_bytes(data[: len(data) - 40])
        with pytest.raises(ValueError, match="truncated"):
            load_model(p)

    def test_version_mismatch_names_versions(self, tmp_path, model):
        p = tmp_path / "m.bin"
        save_model(model, p)
        data = p.read_bytes().replace(b"claimvec-embed/1", b"claimvec-embed/9", 1)
        p.write_bytes(data)
        with pytest.raises(ValueError) as err:
            load_model(p)
        assert "claimvec-embed/9" in str(err.value)
        assert "claimvec-embed/1" in str(err.value)


class TestExport:
    def test_plain_text_vector_format(self, tmp_path):
        cohort = two_doc_cohort()
        vocab = build_vocab(cohort, min_count=1)
        model = train_embeddings(EmbedConfig(dim=4, epochs=1, seed=5), vocab, cohort)
        p = tmp_path / "vectors.txt"
        export_vectors(model, p)
        lines = p.read_text().splitlines()
        n, dim = lines[0].split()
        assert (int(n), int(dim)) == (2 + len(vocab), 4)
        assert lines[1].startswith("doc:P0 ")
        assert any(line.startswith("word:") for line in lines[1:])
        assert all(len(line.split()) == 5 for line in lines[1:])


class TestSubsampling:
    def test_subsampled_training_runs_and_differs_from_off(self):
        cohort = two_doc_cohort(n_tokens=40)
        vocab_off = build_vocab(cohort, min_count=1)
        vocab_on = build_vocab(cohort, min_count=1, subsample=1e-3)
        assert (vocab_on.keep_probs() < 1.0).any()
        cfg = EmbedConfig(dim=8, epochs=3, seed=5)
        off = train_embeddings(cfg, vocab_off, cohort)
        on = train_embeddings(cfg, vocab_on, cohort)
        assert np.isfinite(on.doc_vectors).all()
        assert not np.array_equal(off.doc_vectors, on.doc_vectors)

    def test_invalid_configs_rejected(self):
        with pytest.raises(ValueError, match="window"):
            EmbedConfig(window=0)
        with pytest.raises(ValueError, match="lr_end"):
            EmbedConfig(lr_start=0.01, lr_end=0.02)
        with pytest.raises(ValueError, match="dm_combine"):
            EmbedConfig(dm_combine="concat")
