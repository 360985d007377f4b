"""Losses, batching, student training, teacher training and distillation"""

import json

import numpy as np
import pytest

from src.core.corpus import TrainGroup
from src.learning.autodiff import Parameter, Tensor, log_softmax
from src.learning.models import MIN_JOINT_LENGTH, ModelConfig, init_student, init_teacher
from src.learning.training import (
    Batch, TrainConfig, TrainingError, build_distill_batches, check_teachers, contrastive_loss,
    contrastive_loss_matrix, distill_loss, distill_student, distill_terms, sample_batch, score_matrix,
    softened, student_scores, student_step, teacher_examples, teacher_loss, train_student, train_teacher,
)
from src.utils.text import Vocabulary


def model_config(vocab, d=8, seed=0):
    return ModelConfig(vocab_size=vocab.size, d_e=d, d=d, d_h=d, max_len=MIN_JOINT_LENGTH, seed=seed)


class TestLosses:

    def test_single_positive_is_cross_entropy(self):
        scores = [2.0, 0.5, -1.0, 0.3]
        expected = -log_softmax(Tensor([scores])).data[0, 0]
        assert contrastive_loss(scores[:1], scores[1:]).item() == pytest.approx(expected)

    def test_several_positives(self):
        pos, neg = [1.0, 0.5], [0.2, -0.4]
        expected = -np.log(np.exp(pos).sum() / np.exp(pos + neg).sum())
        assert contrastive_loss(pos, neg).item() == pytest.approx(expected)

    def test_matrix_form_averages_rows(self):
        scores = np.array([[1.0, 0.0], [0.5, 2.0]])
        mask = np.eye(2, dtype=bool)
        per_row = [contrastive_loss([1.0], [0.0]).item(), contrastive_loss([2.0], [0.5]).item()]
        assert contrastive_loss_matrix(Tensor(scores), mask).item() == pytest.approx(np.mean(per_row))

    @pytest.mark.parametrize("pos, neg, expected", [
        ([2.0], [0.0], 0.126928),
        ([1.3], [1.3], np.log(2.0)),
        ([0.4], [], 0.0),
    ])
    def test_reference_values(self, pos, neg, expected):
        assert contrastive_loss(pos, neg).item() == pytest.approx(expected, abs=1e-6)

    def test_cross_entropy_equivalence_on_random_scores(self, rng):
        for _ in range(100):
            z = rng.standard_normal(6) * 3.0
            ce = -(z[0] - np.log(np.exp(z).sum()))
            assert abs(contrastive_loss(z[:1], z[1:]).item() - ce) < 1e-12

    def test_invariant_to_negative_order_and_shift(self):
        base = contrastive_loss([0.9], [0.1, -0.3, 2.0]).item()
        assert contrastive_loss([0.9], [2.0, 0.1, -0.3]).item() == pytest.approx(base, abs=1e-12)
        assert contrastive_loss([5.9], [5.1, 4.7, 7.0]).item() == pytest.approx(base, abs=1e-12)

    def test_needs_a_positive(self):
        with pytest.raises(TrainingError):
            contrastive_loss([], [1.0])
        with pytest.raises(TrainingError):
            contrastive_loss_matrix(Tensor([[1.0, 2.0]]), np.array([[False, False]]))

    def test_teacher_loss(self):
        assert teacher_loss(0.7, 1).item() == pytest.approx(np.log1p(np.exp(-0.7)))
        assert teacher_loss(0.7, 0).item() == pytest.approx(np.log1p(np.exp(0.7)))
        with pytest.raises(TrainingError):
            teacher_loss(0.0, 2)

    def test_teacher_loss_reference_values(self):
        assert teacher_loss(0.0, 0).item() == pytest.approx(np.log(2.0))
        assert teacher_loss(0.0, 1).item() == pytest.approx(np.log(2.0))
        assert teacher_loss(20.0, 1).item() == pytest.approx(2.06e-9, rel=1e-2)

    def test_teacher_loss_gradient(self, gradcheck):
        z = Parameter('z', [[0.35]])
        assert gradcheck(lambda: teacher_loss(z, 0), [z]) < 1e-5

    def test_softened_reference(self):
        np.testing.assert_allclose(softened(np.array([[2.0, 0.0]]), 2.0)[0], [0.731059, 0.268941], atol=1e-6)

    def test_softened_flattens_with_temperature(self):
        scores = np.array([[3.0, 1.0, 0.0]])
        assert softened(scores, 3.0).max() < softened(scores, 1.0).max()
        assert softened(scores, 3.0).sum() == pytest.approx(1.0)

    def test_kl_vanishes_for_equal_scores(self):
        z = np.array([[1.5, -0.3, 0.2], [0.0, 0.4, -1.0]])
        terms = distill_terms(z, z, np.eye(3)[:2], temperature=3.0, rate=1.0)
        assert terms.kl.item() == pytest.approx(0.0, abs=1e-12)

    def test_kl_matches_definition(self):
        zs, zt = np.array([0.2, 1.0, -0.5]), np.array([1.2, 0.1, 0.3])
        temperature = 2.0
        pt, ps = softened([zt], temperature)[0], softened([zs], temperature)[0]
        expected_kl = float(np.sum(pt * np.log(pt / ps)))
        terms = distill_terms(zs, zt, [1, 0, 0], temperature=temperature, rate=0.5)
        assert terms.kl.item() == pytest.approx(expected_kl)
        expected_total = terms.hard.item() + 0.5 * temperature ** 2 * expected_kl
        assert terms.total.item() == pytest.approx(expected_total)

    def test_zero_rate_is_hard_loss(self):
        zs, zt, y = [0.2, 1.0, -0.5], [1.2, 0.1, 0.3], [0, 1, 0]
        assert distill_loss(zs, zt, y, 3.0, 0.0).item() == pytest.approx(contrastive_loss([1.0], [0.2, -0.5]).item())

    def test_distill_validation(self):
        with pytest.raises(TrainingError):
            distill_terms([1.0, 2.0], [1.0, 2.0, 3.0], [1, 0], 3.0, 1.0)
        with pytest.raises(TrainingError):
            distill_terms([1.0], [1.0], [1], 0.0, 1.0)

    def test_distill_gradient(self, gradcheck):
        z = Parameter('z', [[0.3, -0.2, 0.9], [1.1, 0.0, -0.4]])
        zt = np.array([[1.0, 0.5, -0.5], [0.2, 0.8, 0.1]])
        y = np.eye(3)[:2]
        assert gradcheck(lambda: distill_loss(z, zt, y, 3.0, 0.7), [z]) < 1e-5


class TestBatches:

    def test_distinct_groups(self, small_groups, rng):
        batch = sample_batch(small_groups, 4, rng)
        indices = [inst.group_index for inst in batch.instances]
        assert len(set(indices)) == 4
        for inst in batch.instances:
            group = small_groups[inst.group_index]
            assert inst.query in group.contexts
            assert inst.positive_context in group.contexts
            assert inst.response == group.response

    def test_without_replacement_contexts_differ(self, small_groups, rng):
        for _ in range(5):
            batch = sample_batch(small_groups, 3, rng, with_replacement=False)
            assert all(inst.query != inst.positive_context for inst in batch.instances)

    def test_too_few_groups(self, small_groups, rng):
        with pytest.raises(TrainingError):
            sample_batch(small_groups, 7, rng)
        with pytest.raises(TrainingError):
            sample_batch(small_groups, 1, rng)

    def test_single_instance_batch_rejected(self, small_groups, rng):
        with pytest.raises(TrainingError):
            Batch(sample_batch(small_groups, 2, rng).instances[:1])

    def test_teacher_negatives_come_from_other_groups(self, small_groups, small_vocab, rng):
        batch = sample_batch(small_groups, 4, rng)
        examples = teacher_examples(batch, small_groups, 'response', small_vocab, rng)
        assert [label for _, _, label in examples] == [1, 0] * 4
        for i, inst in enumerate(batch.instances):
            positive, negative = examples[2 * i][1], examples[2 * i + 1][1]
            assert negative != positive


class TestStudentScores:

    def test_dqs_joint_layout(self, small_groups, small_vocab, rng):
        model = init_student(model_config(small_vocab), 'dqs')
        batch = sample_batch(small_groups, 3, rng)
        scores = student_scores(model, batch, small_vocab, lam=0.5)
        assert scores.joint.shape == (3, 6)
        np.testing.assert_allclose(scores.joint.data[:, :3], scores.blocks['context'].data)
        np.testing.assert_allclose(scores.joint.data[:, 3:], scores.blocks['response'].data)
        assert scores.positive_mask.sum() == 6

    def test_lambda_scales_response_block(self, small_groups, small_vocab, rng):
        model = init_student(model_config(small_vocab), 'dqs')
        batch = sample_batch(small_groups, 3, rng)
        full = student_scores(model, batch, small_vocab, lam=1.0).blocks['response'].data
        half = student_scores(model, batch, small_vocab, lam=0.5).blocks['response'].data
        np.testing.assert_allclose(half, 0.5 * full, rtol=1e-12)

    def test_student_gradients(self, small_groups, small_vocab, rng, gradcheck):
        model = init_student(ModelConfig(vocab_size=small_vocab.size, d_e=3, d=2, max_len=MIN_JOINT_LENGTH), 'dqs')
        batch = sample_batch(small_groups, 3, rng)
        for p in model.parameters():
            p.data[...] = rng.uniform(-0.5, 0.5, size=p.shape)

        def loss():
            scores = student_scores(model, batch, small_vocab, lam=0.7)
            return contrastive_loss_matrix(scores.joint, scores.positive_mask)

        assert gradcheck(loss, model.parameters()) < 1e-5


class TestTraining:

    def test_overfits_one_batch(self, small_groups, small_vocab, rng):
        model = init_student(model_config(small_vocab, d=32), 'qc')
        cfg = TrainConfig(batch_size=4, lr=0.05, warmup=0)
        batch = sample_batch(small_groups, 4, rng, with_replacement=False)
        losses = [student_step(model, batch, small_vocab, cfg)['loss'] for _ in range(50)]
        assert losses[-1] < 0.1 * losses[0]

    def test_loss_falls_and_is_logged(self, small_groups, small_vocab, tmp_path):
        model = init_student(model_config(small_vocab, d=32), 'qs')
        cfg = TrainConfig(batch_size=4, epochs=2, steps_per_epoch=25, lr=0.05, warmup=0)
        history = train_student(model, small_groups, small_vocab, cfg, log_path=tmp_path / "log.jsonl")
        assert len(history.steps) == 50
        assert history.epoch_losses[1] < history.epoch_losses[0]
        lines = (tmp_path / "log.jsonl").read_text(encoding='utf-8').splitlines()
        assert json.loads(lines[-1])['step'] == 50

    def test_zero_lr_changes_nothing(self, small_groups, small_vocab):
        model = init_student(model_config(small_vocab), 'qs')
        before = {name: p.data.copy() for name, p in model.named_parameters().items()}
        train_student(model, small_groups, small_vocab, TrainConfig(batch_size=3, epochs=1, steps_per_epoch=3, lr=0.0))
        for name, p in model.named_parameters().items():
            np.testing.assert_array_equal(p.data, before[name])

    def test_same_seed_same_weights(self, small_groups, small_vocab):
        results = []
        for _ in range(2):
            model = init_student(model_config(small_vocab), 'qr')
            train_student(model, small_groups, small_vocab, TrainConfig(batch_size=3, epochs=1, steps_per_epoch=4, lr=0.01))
            results.append(model.query_tower.embedding.data.copy())
        np.testing.assert_array_equal(results[0], results[1])

    def test_non_finite_parameters_stop_training(self, small_groups, small_vocab):
        model = init_student(model_config(small_vocab), 'qc')
        model.query_tower.embedding.data[...] = np.nan
        with pytest.raises(TrainingError, match="non-finite"):
            train_student(model, small_groups, small_vocab, TrainConfig(batch_size=3, epochs=1, steps_per_epoch=2))

    def test_invalid_config(self, small_groups, small_vocab):
        model = init_student(model_config(small_vocab), 'qc')
        with pytest.raises(TrainingError):
            train_student(model, small_groups, small_vocab, TrainConfig(temperature=0.0))

    def test_teacher_training_runs(self, small_groups, small_vocab):
        teacher = init_teacher(model_config(small_vocab, d=4), 'response')
        cfg = TrainConfig(teacher_batch_size=3, teacher_epochs=1, steps_per_epoch=3, lr=0.01, warmup=0)
        history = train_teacher(teacher, small_groups, small_vocab, cfg)
        assert len(history.steps) == 3
        assert all(np.isfinite(step['loss']) for step in history.steps)


class TestDistillation:

    @pytest.fixture
    def teachers(self, small_vocab):
        cfg = model_config(small_vocab, d=4)
        return {field: init_teacher(cfg, field) for field in ('context', 'session', 'response')}

    def test_missing_teacher(self, small_vocab, teachers):
        student = init_student(model_config(small_vocab), 'dqs')
        with pytest.raises(TrainingError, match="response teacher"):
            check_teachers(student, {'context': teachers['context']})

    def test_vocab_mismatch(self, small_vocab, teachers):
        student = init_student(ModelConfig(vocab_size=small_vocab.size + 1, d_e=4, d=4, max_len=MIN_JOINT_LENGTH), 'qr')
        with pytest.raises(TrainingError, match="vocab_size"):
            check_teachers(student, teachers)

    def test_same_size_different_vocabulary(self, small_vocab):
        tokens = small_vocab.id_to_token[2:]
        swapped = Vocabulary(tokens[1::-1] + tokens[2:])
        assert swapped.size == small_vocab.size
        assert swapped.fingerprint != small_vocab.fingerprint

        def cfg(vocab):
            return ModelConfig(vocab_size=vocab.size, d_e=4, d=4, d_h=4, max_len=MIN_JOINT_LENGTH,
                               vocab_fingerprint=vocab.fingerprint)

        student = init_student(cfg(small_vocab), 'qc')
        teacher = init_teacher(cfg(swapped), 'context')
        with pytest.raises(TrainingError, match="different vocabulary"):
            check_teachers(student, {'context': teacher})
        with pytest.raises(TrainingError, match="different vocabulary"):
            check_teachers(student, {'context': init_teacher(cfg(small_vocab), 'context')}, swapped)
        check_teachers(student, {'context': init_teacher(cfg(small_vocab), 'context')}, small_vocab)

    def test_field_mismatch(self, small_vocab, teachers):
        student = init_student(model_config(small_vocab), 'qc')
        with pytest.raises(TrainingError):
            check_teachers(student, {'context': teachers['response']})

    def test_teacher_scores_align_with_candidates(self, small_groups, small_vocab, teachers, rng):
        student = init_student(model_config(small_vocab), 'qs')
        batch = sample_batch(small_groups, 3, rng)
        batches = build_distill_batches(student, teachers, batch, small_vocab, workers=2)
        z = batches['session'].z_teacher
        assert z.shape == (3, 3)
        queries = batch.query_ids(small_vocab)
        candidates = batch.candidate_ids('session', small_vocab)
        assert z[1, 2] == teachers['session'].score(queries[1], candidates[2]).item()
        np.testing.assert_array_equal(score_matrix(teachers['session'], queries, candidates, workers=1), z)

    def test_dqs_distillation_records_kl(self, small_groups, small_vocab, teachers):
        student = init_student(model_config(small_vocab), 'dqs')
        cfg = TrainConfig(batch_size=3, epochs=1, steps_per_epoch=3, lr=0.01, warmup=0)
        history = distill_student(student, teachers, small_groups, small_vocab, cfg)
        assert len(history.steps) == 3
        assert all(step['kl'] >= -1e-12 for step in history.steps)
        assert all(np.isfinite(step['loss']) for step in history.steps)

    def test_teachers_stay_frozen(self, small_groups, small_vocab, teachers):
        before = {f: {n: p.data.copy() for n, p in t.named_parameters().items()} for f, t in teachers.items()}
        student = init_student(model_config(small_vocab), 'qc')
        cfg = TrainConfig(batch_size=3, epochs=1, steps_per_epoch=2, lr=0.01, warmup=0)
        distill_student(student, teachers, small_groups, small_vocab, cfg)
        for field, teacher in teachers.items():
            for name, param in teacher.named_parameters().items():
                np.testing.assert_array_equal(param.data, before[field][name])
                assert not param.grad.any()

    def test_pure_replacement_keeps_only_kl(self, small_groups, small_vocab, teachers):
        student = init_student(model_config(small_vocab), 'qr')
        cfg = TrainConfig(batch_size=3, epochs=1, steps_per_epoch=1, lr=0.0, hard_weight=0.0, temperature=2.0)
        step = distill_student(student, teachers, small_groups, small_vocab, cfg).steps[0]
        assert step['loss'] == pytest.approx(4.0 * step['kl'])


def test_groups_round_trip_contexts_as_tuples():
    group = TrainGroup.from_dict({'response': 'r', 'contexts': [['a', 'b'], ['c']]})
    assert group.contexts == [('a', 'b'), ('c',)]
