import json
import math

import numpy as np
import pytest

from scalefusion.core import Hypothesis, NBestList, ScaleSet, UsageError
from scalefusion.decode import BeamConfig, beam_search
from scalefusion.metrics import corpus_wer
from scalefusion.objectives import fd_gradient_flat
from scalefusion.providers import (
    GeneratorConfig,
    generate_synthetic_corpus,
    train_ngram,
    uniform_noise,
)
from scalefusion.train import (
    Adam,
    TrainConfig,
    TrainReport,
    grid_search_scales,
    init_scales,
    joint_train,
    train_scales,
)


def small_world(seed=5, k=12, sizes=(60, 0, 20), noise=0.25, conc=0.15):
    cfg = GeneratorConfig(vocab_size=k, len_range=(3, 6), sizes=sizes,
                          noise=uniform_noise(k, noise), seed=seed,
                          chain_concentration=conc)
    vocab, splits = generate_synthetic_corpus(cfg)
    lm = train_ngram([u.reference for u in splits["train"]], order=2, k_s=0.1,
                     vocab_size=vocab.k)
    return vocab, splits, lm


def decode_corpus(utts, lm, scales, eos_id, beam=8):
    return [beam_search(u.am, lm, scales, BeamConfig(beam, 2 * len(u.reference), eos_id=eos_id),
                        u.utt_id, u.reference) for u in utts]


class TestAdam:
    def test_quadratic_convergence(self):
        adam = Adam(1, lr=0.1)
        theta = np.array([0.0])
        for _ in range(200):
            theta = adam.step(theta, 2.0 * (theta - 3.0))
        assert abs(theta[0] - 3.0) < 1e-3

    def test_zero_gradient_never_moves_parameters(self):
        adam = Adam(3, lr=0.5)
        theta = np.array([1.0, -2.0, 0.3])
        for _ in range(10):
            theta = adam.step(theta, np.zeros(3))
        assert np.array_equal(theta, [1.0, -2.0, 0.3])

    def test_invalid_hyperparameters_rejected(self):
        with pytest.raises(UsageError):
            Adam(1, lr=-0.1)
        with pytest.raises(UsageError):
            Adam(1, beta1=1.0)
        with pytest.raises(UsageError):
            Adam(1, eps=0.0)


class TestInitScales:
    def test_zero_stddev_is_exactly_one(self):
        s = init_scales("subword", 5, seed=0, stddev=0.0)
        assert np.all(s.alpha == 1.0) and np.all(s.beta == 1.0)
        a = init_scales("agnostic", 5, seed=0, stddev=0.0)
        assert a.alpha == 1.0 and a.beta == 1.0

    def test_same_seed_is_identical(self):
        s1 = init_scales("subword", 40, seed=9)
        s2 = init_scales("subword", 40, seed=9)
        assert np.array_equal(s1.alpha, s2.alpha)
        assert np.array_equal(s1.beta, s2.beta)

    def test_sample_mean_close_to_one(self):
        # stddev 0.01, k=1000: standard error 3 sigma / sqrt(k) < 0.001
        s = init_scales("subword", 1000, seed=123, stddev=0.01)
        assert abs(float(np.mean(s.alpha)) - 1.0) < 0.002
        assert abs(float(np.mean(s.beta)) - 1.0) < 0.002

    def test_negative_stddev_rejected(self):
        with pytest.raises(UsageError):
            init_scales("agnostic", 4, seed=0, stddev=-1.0)


class TestTrainConfig:
    def test_json_roundtrip(self):
        cfg = TrainConfig(criterion="minwer", mode="subword", epochs=7, lr=0.02,
                          batch_size=16, seed=3)
        assert TrainConfig.from_json_dict(cfg.to_json_dict()) == cfg

    def test_unknown_field_rejected(self):
        with pytest.raises(UsageError, match="momentum"):
            TrainConfig.from_json_dict({"criterion": "ce", "momentum": 0.9})

    def test_invalid_values_rejected(self):
        with pytest.raises(UsageError):
            TrainConfig(epochs=0)
        with pytest.raises(UsageError):
            TrainConfig(lr=-1.0)
        with pytest.raises(UsageError):
            TrainConfig(criterion="mmi")


class TestTrainScales:
    def test_lr_zero_keeps_initial_scales(self):
        vocab, splits, lm = small_world()
        scales0 = init_scales("agnostic", vocab.k, 1)
        cfg = TrainConfig(criterion="ce", mode="agnostic", epochs=3, lr=0.0)
        report = train_scales(cfg, scales0, corpus=splits["train"], lm=lm)
        assert report.final_scales.alpha == scales0.alpha
        assert report.final_scales.beta == scales0.beta
        assert len(report.loss_per_epoch) == 3

    def test_ce_full_batch_loss_non_increasing(self):
        vocab, splits, lm = small_world()
        cfg = TrainConfig(criterion="ce", mode="agnostic", epochs=25, lr=1e-3)
        report = train_scales(cfg, init_scales("agnostic", vocab.k, 1),
                              corpus=splits["train"], lm=lm)
        losses = report.loss_per_epoch
        assert all(l1 >= l2 - 1e-12 for l1, l2 in zip(losses, losses[1:]))

    def test_identical_config_gives_identical_report(self):
        vocab, splits, lm = small_world()
        nbests = decode_corpus(splits["train"], lm, ScaleSet("agnostic", 1.0, 0.5),
                               vocab.eos_id)
        cfg = TrainConfig(criterion="minwer", mode="subword", epochs=8, lr=0.01,
                          batch_size=16, seed=11)
        runs = []
        for _ in range(2):
            scales0 = init_scales("subword", vocab.k, 2)
            runs.append(train_scales(cfg, scales0, nbests=nbests))
        assert runs[0].loss_per_epoch == runs[1].loss_per_epoch
        assert np.array_equal(runs[0].final_scales.alpha, runs[1].final_scales.alpha)
        assert np.array_equal(runs[0].final_scales.beta, runs[1].final_scales.beta)

    def test_subword_nesting_never_worse_than_converged_agnostic(self):
        vocab, splits, lm = small_world()
        corpus = splits["train"]
        agn_cfg = TrainConfig(criterion="ce", mode="agnostic", epochs=120, lr=0.02)
        agn = train_scales(agn_cfg, init_scales("agnostic", vocab.k, 1),
                           corpus=corpus, lm=lm)
        broadcast = ScaleSet("subword",
                             np.full(vocab.k, agn.final_scales.alpha),
                             np.full(vocab.k, agn.final_scales.beta))
        sub_cfg = TrainConfig(criterion="ce", mode="subword", epochs=120, lr=0.02)
        sub = train_scales(sub_cfg, broadcast, corpus=corpus, lm=lm)
        assert sub.loss_per_epoch[-1] <= agn.loss_per_epoch[-1] + 1e-9

    def test_trained_ratio_matches_grid_optimum_on_planted_world(self):
        vocab, splits, lm = small_world(seed=8, k=16, sizes=(300, 0, 0), conc=0.1)
        nbests = decode_corpus(splits["train"], lm, ScaleSet("agnostic", 1.0, 0.5),
                               vocab.eos_id)
        grid = grid_search_scales(nbests, np.arange(0.0, 1.5001, 0.05),
                                  eos_id=vocab.eos_id)
        cfg = TrainConfig(criterion="minwer", mode="agnostic", epochs=300, lr=0.05)
        rep = train_scales(cfg, init_scales("agnostic", vocab.k, 1), nbests=nbests)
        ratio = rep.final_scales.beta / rep.final_scales.alpha
        assert abs(ratio - grid.best_beta) <= 0.1  # the full-scale bound lives in acceptance

    def test_regenerate_nbest_uses_current_scales(self):
        vocab, splits, lm = small_world(sizes=(25, 0, 0))
        corpus = splits["train"]
        beam_cfg = BeamConfig(4, 12, eos_id=vocab.eos_id)
        cfg = TrainConfig(criterion="minwer", mode="agnostic", epochs=3, lr=0.05,
                          regenerate_nbest=True)
        report = train_scales(cfg, init_scales("agnostic", vocab.k, 1),
                              corpus=corpus, lm=lm, beam_cfg=beam_cfg)
        assert len(report.loss_per_epoch) == 3

    def test_checkpoint_callback_runs_every_epoch(self):
        vocab, splits, lm = small_world(sizes=(20, 0, 0))
        seen = []
        cfg = TrainConfig(criterion="ce", mode="agnostic", epochs=4, lr=0.01)
        train_scales(cfg, init_scales("agnostic", vocab.k, 1), corpus=splits["train"],
                     lm=lm, checkpoint_cb=lambda epoch, s: seen.append(epoch))
        assert seen == [0, 1, 2, 3]

    def test_missing_inputs_rejected(self):
        cfg = TrainConfig(criterion="ce")
        with pytest.raises(UsageError):
            train_scales(cfg, init_scales("agnostic", 4, 0))
        cfg = TrainConfig(criterion="minwer")
        with pytest.raises(UsageError):
            train_scales(cfg, init_scales("agnostic", 4, 0))

    def test_mode_mismatch_rejected(self):
        cfg = TrainConfig(criterion="ce", mode="subword")
        with pytest.raises(UsageError):
            train_scales(cfg, init_scales("agnostic", 4, 0))


class TestJointTrain:
    def test_all_flags_false_changes_nothing(self):
        vocab, splits, lm = small_world(sizes=(10, 0, 0))
        corpus = splits["train"]
        scales0 = init_scales("agnostic", vocab.k, 1)
        cfg = TrainConfig(criterion="ce", mode="agnostic", epochs=3, lr=0.1,
                          train_scales=False, train_toy_am=False)
        report, ams, final = joint_train(cfg, scales0, corpus, lm)
        assert final.alpha == scales0.alpha and final.beta == scales0.beta
        for utt, am in zip(corpus, ams):
            assert np.allclose(am.log_matrix(), utt.am.log_matrix[:len(utt.reference)],
                               atol=1e-12)
        assert len(report.loss_per_epoch) == 3
        assert report.loss_per_epoch[0] == pytest.approx(report.loss_per_epoch[-1])

    def test_toy_am_gradient_matches_finite_differences(self):
        vocab, splits, lm = small_world(sizes=(1, 0, 0))
        corpus = splits["train"][:1]
        utt = corpus[0]
        scales = ScaleSet("agnostic", 1.1, 0.7)
        from scalefusion.train import _joint_ce_utterance, teacher_forced_lm_matrix

        logits0 = utt.am.log_matrix[:len(utt.reference)].copy()
        lm_rows = teacher_forced_lm_matrix(lm, utt.reference)
        targets = np.asarray(utt.reference)
        _, _, _, d_logits = _joint_ce_utterance(logits0, lm_rows, targets, scales)

        def loss_at(flat):
            loss, _, _, _ = _joint_ce_utterance(flat.reshape(logits0.shape),
                                                lm_rows, targets, scales)
            return loss

        fd = fd_gradient_flat(loss_at, logits0.ravel(), h=1e-5).reshape(logits0.shape)
        denom = np.maximum(1.0, np.maximum(np.abs(fd), np.abs(d_logits)))
        assert float(np.max(np.abs(fd - d_logits) / denom)) < 1e-5

    def test_joint_training_beats_scales_only_and_keeps_lm_fixed(self):
        vocab, splits, lm = small_world(sizes=(30, 0, 0))
        corpus = splits["train"]
        lm_before = json.dumps(lm.to_json_dict(), sort_keys=True)

        scales_cfg = TrainConfig(criterion="ce", mode="agnostic", epochs=80, lr=0.02)
        scales_only = train_scales(scales_cfg, init_scales("agnostic", vocab.k, 1),
                                   corpus=corpus, lm=lm)
        joint_cfg = TrainConfig(criterion="ce", mode="agnostic", epochs=80, lr=0.02,
                                train_toy_am=True)
        joint_rep, _, _ = joint_train(joint_cfg, scales_only.final_scales, corpus, lm)
        assert joint_rep.loss_per_epoch[-1] < scales_only.loss_per_epoch[-1]
        assert json.dumps(lm.to_json_dict(), sort_keys=True) == lm_before

    def test_frozen_scales_stay_frozen(self):
        vocab, splits, lm = small_world(sizes=(8, 0, 0))
        scales0 = init_scales("agnostic", vocab.k, 3)
        cfg = TrainConfig(criterion="ce", mode="agnostic", epochs=5, lr=0.05,
                          train_scales=False, train_toy_am=True)
        _, _, final = joint_train(cfg, scales0, splits["train"], lm)
        assert final.alpha == scales0.alpha and final.beta == scales0.beta

    def test_minwer_joint_rejected(self):
        vocab, splits, lm = small_world(sizes=(5, 0, 0))
        cfg = TrainConfig(criterion="minwer", mode="agnostic", epochs=1, lr=0.01,
                          train_toy_am=True)
        with pytest.raises(UsageError):
            joint_train(cfg, init_scales("agnostic", vocab.k, 1), splits["train"], lm)


class TestGridSearch:
    def make_nbests(self):
        vocab, splits, lm = small_world(seed=20, sizes=(50, 0, 0))
        nbests = decode_corpus(splits["train"], lm, ScaleSet("agnostic", 1.0, 0.5),
                               vocab.eos_id)
        return vocab, nbests

    def test_singleton_grid_reports_am_only_rate(self):
        vocab, nbests = self.make_nbests()
        result = grid_search_scales(nbests, [0.0], eos_id=vocab.eos_id)
        assert result.best_beta == 0.0
        from scalefusion.decode import rescore_nbest, strip_trailing_eos
        refs = [strip_trailing_eos(nb.reference, vocab.eos_id) for nb in nbests]
        hyps = [strip_trailing_eos(
            rescore_nbest(nb, ScaleSet("agnostic", 1.0, 0.0)).hypotheses[0].tokens,
            vocab.eos_id) for nb in nbests]
        assert result.best_error_rate == pytest.approx(corpus_wer(refs, hyps).error_rate)

    def test_near_one_hot_lm_ties_resolve_to_smaller_beta(self):
        # an LM that all but pins the reference: every positive beta reaches
        # error 0, so the tie rule must return the smallest positive value
        floor = math.log(1e-30)
        h_ref = Hypothesis((0, 1), np.array([-2.0, -2.0]), np.array([-1e-9, -1e-9]))
        h_bad = Hypothesis((1, 0), np.array([-0.5, -0.5]), np.array([floor, floor]))
        nb = NBestList("u", (0, 1), (h_bad, h_ref))
        result = grid_search_scales([nb], [0.0, 0.05, 0.1, 0.5, 1.0])
        assert result.best_beta == 0.05
        assert result.best_error_rate == 0.0
        assert result.table[0]["error_rate"] > 0  # beta = 0 picks the AM winner

    def test_best_beta_reproduced_by_independent_recomputation(self):
        from scalefusion.decode import rescore_nbest, strip_trailing_eos
        vocab, nbests = self.make_nbests()
        grid = [round(b, 2) for b in np.arange(0.0, 1.01, 0.1)]
        result = grid_search_scales(nbests, grid, eos_id=vocab.eos_id)
        recomputed = []
        for beta in grid:
            scales = ScaleSet("agnostic", 1.0, beta)
            refs = [strip_trailing_eos(nb.reference, vocab.eos_id) for nb in nbests]
            hyps = [strip_trailing_eos(rescore_nbest(nb, scales).hypotheses[0].tokens,
                                       vocab.eos_id) for nb in nbests]
            recomputed.append((corpus_wer(refs, hyps).error_rate, beta))
        best_rate = min(r for r, _ in recomputed)
        best_beta = min(b for r, b in recomputed if r == best_rate)
        assert result.best_beta == pytest.approx(best_beta)
        assert result.best_error_rate == pytest.approx(best_rate)
        for row, (rate, beta) in zip(result.table, recomputed):
            assert row["beta"] == pytest.approx(beta)
            assert row["error_rate"] == pytest.approx(rate)

    def test_empty_grid_rejected(self):
        vocab, nbests = self.make_nbests()
        with pytest.raises(UsageError):
            grid_search_scales(nbests, [], eos_id=vocab.eos_id)
