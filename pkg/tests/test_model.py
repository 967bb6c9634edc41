import numpy as np
import numpy.testing as npt
import pytest

import memaug.autodiff as ad
from memaug import (EncoderConfig, EncoderModel, FusionSpec, LogitsFusionModel,
                    MemoryAugmentedModel, Tensor, Vocab, ensemble_predict,
                    fusion_added_trainable, param_census)
from memaug.data import CLS_ID, SEP_ID
from memaug.errors import ConfigError
from memaug.model import predict_class_logits
from memaug.training import TrainConfig, finetune_classify

from conftest import random_batch
from oracles import ref_softmax_row


def build_pair(vocab, layers=3, d=8, heads=2, seed=0):
    config = EncoderConfig(layers, d, heads, d * 2, len(vocab), 16)
    general = EncoderModel(config, vocab, seed=seed)
    domain = EncoderModel(config, vocab, seed=seed + 1)
    return general, domain


class TestAssembly:
    def test_vocab_mismatch_rejected(self, tiny_vocab):
        other = Vocab([f"v{i}" for i in range(20)])
        config = EncoderConfig(2, 8, 2, 16, 25, 16)
        general = EncoderModel(config, tiny_vocab, seed=0)
        domain = EncoderModel(config, other, seed=1)
        with pytest.raises(ConfigError, match="vocabulary"):
            MemoryAugmentedModel(general, domain, FusionSpec("single"))

    def test_general_side_is_frozen(self, tiny_vocab):
        general, domain = build_pair(tiny_vocab)
        MemoryAugmentedModel(general, domain, FusionSpec("single"))
        assert all(general.store.is_frozen(n) for n in general.store.names())
        assert not any(domain.store.is_frozen(n)
                       for n in domain.store.names())

    def test_unfrozen_ablation_flag(self, tiny_vocab):
        general, domain = build_pair(tiny_vocab)
        fused = MemoryAugmentedModel(general, domain, FusionSpec("single"),
                                     frozen=False)
        assert not any(general.store.is_frozen(n)
                       for n in general.store.names())
        assert "general.embed.tok" in fused.named_trainables()


class TestFusedForward:
    def test_zero_column_memory_override_equals_bare_model(self, tiny_vocab):
        general, domain = build_pair(tiny_vocab, layers=3)
        fused = MemoryAugmentedModel(general, domain, FusionSpec("single", dst=2))
        ids = np.array([[CLS_ID, 7, 9, SEP_ID]])
        bare = domain.forward(ids).final.data
        override = {2: Tensor(np.zeros((0, domain.config.d_model)))}
        acts, _ = fused.forward(ids, memory_override=override)
        assert acts.final.data.tobytes() == bare.tobytes()

    def test_duplication_identity_on_constructed_weights(self, tiny_vocab):
        # same weights on both sides, fusing H_{L-1} as memory at the last
        # layer reproduces the unhooked model via the duplication identity
        general, _ = build_pair(tiny_vocab, layers=2)
        domain = general.copy()
        fused = MemoryAugmentedModel(general, domain, FusionSpec("single", dst=2))
        ids = np.array([[CLS_ID, 7, 9, SEP_ID]])
        bare = domain.forward(ids).final.data
        prev = domain.forward(ids).layers[0]
        acts, _ = fused.forward(ids, memory_override={2: prev})
        npt.assert_allclose(acts.final.data, bare, atol=1e-9)

    def test_frozen_checksum_unchanged_by_training(self, tiny_vocab):
        from memaug import pretrain_mlm
        general, domain = build_pair(tiny_vocab)
        fused = MemoryAugmentedModel(general, domain, FusionSpec("gated"))
        before = general.store.fingerprint()
        corpus = ["w05 w06 w07 w08 w09", "w10 w11 w12 w13"] * 4
        pretrain_mlm(fused, corpus, TrainConfig(epochs=2, batch_size=4,
                                                seed=0, max_steps=10))
        assert general.store.fingerprint() == before

    def test_gate_diagnostics_normalized(self, tiny_vocab):
        general, domain = build_pair(tiny_vocab)
        fused = MemoryAugmentedModel(general, domain,
                                     FusionSpec("chunk_gated", split=1,
                                                dst_low=1, dst_high=3))
        rng = np.random.default_rng(0)
        ids, pad = random_batch(tiny_vocab, rng, batch=2, length=5)
        _, diag = fused.forward(ids, pad)
        for key in ("alpha_low", "alpha_high"):
            npt.assert_allclose(diag[key].sum(axis=1), 1.0, atol=1e-9)

    def test_deterministic_forward(self, tiny_vocab):
        general, domain = build_pair(tiny_vocab)
        fused = MemoryAugmentedModel(general, domain, FusionSpec("multi"))
        ids = np.array([[CLS_ID, 7, 9, SEP_ID]])
        a, _ = fused.forward(ids)
        b, _ = fused.forward(ids)
        npt.assert_array_equal(a.final.data, b.final.data)


class TestLogitsFusion:
    def make(self, vocab, num_classes=3, seed=0):
        general, domain = build_pair(vocab, seed=seed)
        return LogitsFusionModel(general, domain, num_classes, 1, seed=seed)

    def test_zero_general_logits_gives_domain(self, tiny_vocab):
        model = self.make(tiny_vocab)
        for name in ("head.w0", "head.b0"):
            model.general.store[name].data[:] = 0.0
        ids = np.array([[CLS_ID, 6, SEP_ID]])
        fused, _ = model.forward(ids)
        acts = model.domain.forward(ids)
        dom = model.domain.classify_logits(acts, ids)
        npt.assert_array_equal(fused.data, dom.data)

    def test_both_heads_zero_init_zero_logits(self, tiny_vocab):
        model = self.make(tiny_vocab)
        for side in (model.general, model.domain):
            for name in ("head.w0", "head.b0"):
                side.store[name].data[:] = 0.0
        ids = np.array([[CLS_ID, 6, SEP_ID]])
        fused, _ = model.forward(ids)
        npt.assert_array_equal(fused.data, np.zeros((1, 3)))

    def test_matches_two_forward_and_add_oracle(self, tiny_vocab):
        model = self.make(tiny_vocab, seed=3)
        rng = np.random.default_rng(1)
        ids, pad = random_batch(tiny_vocab, rng, batch=2, length=4)
        fused, _ = model.forward(ids, pad)
        gen = model.general.classify_logits(
            model.general.forward(ids, pad), ids).data
        dom = model.domain.classify_logits(
            model.domain.forward(ids, pad), ids).data
        npt.assert_array_equal(fused.data, gen + dom)

    def test_general_body_frozen_head_trainable(self, tiny_vocab):
        model = self.make(tiny_vocab)
        trainables = model.named_trainables()
        general_names = [n for n in trainables if n.startswith("general.")]
        assert general_names and all(".head." in n for n in general_names)

    def test_end_to_end_training_moves_both_heads(self, tiny_vocab):
        from memaug.data import ClassificationTask, LabeledExample
        rng = np.random.default_rng(5)
        examples = [LabeledExample(i, i % 2,
                                   " ".join(rng.choice(tiny_vocab.content_tokens, 5)))
                    for i in range(12)]
        task = ClassificationTask(2, examples[:8], examples[8:10],
                                  examples[10:])
        model = self.make(tiny_vocab, num_classes=2)
        gen_head_before = model.general.store["head.w0"].data.copy()
        body_before = model.general.store.fingerprint("layer1.")
        finetune_classify(model, task, TrainConfig(epochs=1, batch_size=4,
                                                   seed=0))
        assert np.abs(model.general.store["head.w0"].data -
                      gen_head_before).max() > 0
        assert model.general.store.fingerprint("layer1.") == body_before


class TestEnsemble:
    def finetuned_pair(self, vocab, seed=0):
        a, b = build_pair(vocab, seed=seed)
        a.add_classifier(2, 1, seed=seed)
        b.add_classifier(2, 1, seed=seed + 1)
        return a, b

    def test_identical_models_average_to_themselves(self, tiny_vocab):
        a, _ = self.finetuned_pair(tiny_vocab)
        ids = np.array([[CLS_ID, 6, SEP_ID]])
        probs = ensemble_predict(a, a, ids)
        logits = predict_class_logits(a, ids)
        npt.assert_allclose(probs[0], ref_softmax_row(logits[0]), atol=1e-12)

    def test_symmetric_tie(self, tiny_vocab):
        a, b = self.finetuned_pair(tiny_vocab)
        ids = np.array([[CLS_ID, 6, SEP_ID]])
        # drive each model to certainty on opposite classes via the bias
        a.store["head.w0"].data[:] = 0.0
        a.store["head.b0"].data[:] = [1e3, -1e3]
        b.store["head.w0"].data[:] = 0.0
        b.store["head.b0"].data[:] = [-1e3, 1e3]
        probs = ensemble_predict(a, b, ids)
        npt.assert_allclose(probs, [[0.5, 0.5]], atol=1e-12)

    def test_matches_loop_oracle(self, tiny_vocab):
        a, b = self.finetuned_pair(tiny_vocab, seed=4)
        rng = np.random.default_rng(2)
        ids, pad = random_batch(tiny_vocab, rng, batch=3, length=4)
        probs = ensemble_predict(a, b, ids, pad)
        la = predict_class_logits(a, ids, pad)
        lb = predict_class_logits(b, ids, pad)
        for r in range(3):
            want = 0.5 * (np.array(ref_softmax_row(la[r]))
                          + np.array(ref_softmax_row(lb[r])))
            npt.assert_allclose(probs[r], want, atol=1e-12)


class TestCensus:
    def test_single_and_multi_add_nothing(self, tiny_vocab):
        for strategy in ("single", "multi"):
            general, domain = build_pair(tiny_vocab)
            bare = domain.store.num_params(trainable=True)
            fused = MemoryAugmentedModel(general, domain, FusionSpec(strategy))
            assert fusion_added_trainable(fused) == 0
            assert domain.store.num_params(trainable=True) == bare

    def test_gated_adds_d_plus_one(self, tiny_vocab):
        config = EncoderConfig(2, 32, 2, 64, len(tiny_vocab), 16)
        general = EncoderModel(config, tiny_vocab, seed=0)
        domain = EncoderModel(config, tiny_vocab, seed=1)
        fused = MemoryAugmentedModel(general, domain, FusionSpec("gated"))
        assert fusion_added_trainable(fused) == 33

    def test_chunk_gated_adds_twice_that(self, tiny_vocab):
        config = EncoderConfig(2, 32, 2, 64, len(tiny_vocab), 16)
        general = EncoderModel(config, tiny_vocab, seed=0)
        domain = EncoderModel(config, tiny_vocab, seed=1)
        fused = MemoryAugmentedModel(general, domain,
                                     FusionSpec("chunk_gated", split=1,
                                                dst_low=1, dst_high=2))
        assert fusion_added_trainable(fused) == 66

    def test_census_rows_cover_components(self, tiny_vocab):
        general, domain = build_pair(tiny_vocab)
        fused = MemoryAugmentedModel(general, domain, FusionSpec("gated"))
        rows = {component: (trainable, frozen)
                for component, trainable, frozen in param_census(fused)}
        assert rows["general encoder"][0] == 0
        assert rows["general encoder"][1] > 0
        assert rows["domain encoder"][1] == 0
        assert rows["fusion"][0] == domain.config.d_model + 1
