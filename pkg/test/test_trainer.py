import unittest

import numpy as np
import torch
from pydantic import ValidationError

from speakerid.embedding import length_normalize
from speakerid.identification import CosineIdentifier, build_sequence
from speakerid.rmc import RmcConfig, build_model
from speakerid.trainer import (
	ExamplePool,
	TrainingConfig,
	Utterance,
	check_compatible,
	dataset_loss,
	evaluate,
	make_training_examples,
	train,
)


DIM = 4

TINY = RmcConfig(n_max=4, input_dim=DIM, slot_width=8, heads=2, attention_mlp_width=8, mlp_head_layers=1, mlp_head_width=16)


def make_pool(speakers=6, utterances=3, windows=4, seed=0):
	rng = np.random.default_rng(seed)
	profiles = {f'spk{k}': length_normalize(rng.standard_normal(DIM)) for k in range(speakers)}
	pool = []
	for speaker, profile in profiles.items():
		for _ in range(utterances):
			pool.append(Utterance(speaker, profile + 0.1 * rng.standard_normal((windows, DIM))))
	return ExamplePool(pool, profiles)


class TestTrainingConfig(unittest.TestCase):
	def test_seq_len_range(self):
		for lo, hi in [(1, 3), (4, 3)]:
			with self.subTest(lo=lo, hi=hi):
				with self.assertRaises(ValidationError):
					TrainingConfig(seq_len_range=(lo, hi))

	def test_unknown_key(self):
		with self.assertRaises(ValidationError):
			TrainingConfig(learnig_rate=0.1)

	def test_learning_rate_zero_allowed(self):
		self.assertEqual(TrainingConfig(learning_rate=0).learning_rate, 0)

	def test_compatible(self):
		model = build_model(TINY)
		check_compatible(TrainingConfig(seq_len_range=(2, 4)), model)
		with self.assertRaises(ValueError):
			check_compatible(TrainingConfig(seq_len_range=(2, 5)), model)


class TestMakeExamples(unittest.TestCase):
	def test_construction(self):
		"""The label points at the true speaker's profile and the profiles are distinct."""
		pool = make_pool()
		cfg = TrainingConfig(seq_len_range=(2, 4), context=1)
		examples = make_training_examples(pool, cfg, 300, np.random.default_rng(0))
		self.assertEqual(len(examples), 300)
		for seq in examples:
			self.assertTrue(2 <= seq.n_profiles <= 4)
			self.assertEqual(seq.context.shape, (3, DIM))
			true_profile = pool.profiles[seq.meeting]
			np.testing.assert_array_equal(seq.profiles[seq.label], true_profile)
			self.assertEqual(len({tuple(p) for p in seq.profiles}), seq.n_profiles)

	def test_context_from_same_utterance(self):
		pool = make_pool()
		examples = make_training_examples(pool, TrainingConfig(context=2), 100, np.random.default_rng(1))
		windows = {tuple(w) for utt in pool.utterances for w in utt.windows}
		for seq in examples:
			owners = {utt.speaker_id for utt in pool.utterances for w in seq.context if any(np.array_equal(w, x) for x in utt.windows)}
			self.assertEqual(owners, {seq.meeting})
			self.assertTrue(all(tuple(w) in windows for w in seq.context))

	def test_all_lengths_drawn(self):
		examples = make_training_examples(make_pool(), TrainingConfig(seq_len_range=(2, 4)), 300, np.random.default_rng(2))
		self.assertEqual({seq.n_profiles for seq in examples}, {2, 3, 4})

	def test_uniform_label_position(self):
		examples = make_training_examples(make_pool(), TrainingConfig(seq_len_range=(4, 4)), 10000, np.random.default_rng(3))
		counts = np.bincount([seq.label for seq in examples], minlength=4)
		np.testing.assert_allclose(counts / 10000, 0.25, atol=0.02)

	def test_without_permutation(self):
		"""Profiles are sorted by speaker id when augmentation is off."""
		pool = make_pool()
		order = {speaker: i for i, speaker in enumerate(pool.speakers)}
		examples = make_training_examples(pool, TrainingConfig(permute=False), 50, np.random.default_rng(4))
		for seq in examples:
			positions = [next(order[s] for s, p in pool.profiles.items() if np.array_equal(p, row)) for row in seq.profiles]
			self.assertEqual(positions, sorted(positions))

	def test_deterministic(self):
		pool = make_pool()
		first = make_training_examples(pool, TrainingConfig(), 20, np.random.default_rng(5))
		second = make_training_examples(pool, TrainingConfig(), 20, np.random.default_rng(5))
		for a, b in zip(first, second):
			np.testing.assert_array_equal(a.elements, b.elements)
			self.assertEqual(a.label, b.label)

	def test_too_few_speakers(self):
		with self.assertRaises(ValueError):
			make_training_examples(make_pool(speakers=3), TrainingConfig(seq_len_range=(2, 4)), 1, np.random.default_rng(0))

	def test_speaker_without_profile(self):
		pool = make_pool()
		pool = pool._replace(utterances=pool.utterances + [Utterance('nobody', np.ones((2, DIM)))])
		with self.assertRaises(ValueError):
			make_training_examples(pool, TrainingConfig(), 1, np.random.default_rng(0))


class TestTrain(unittest.TestCase):
	def setUp(self):
		self.examples = make_training_examples(make_pool(), TrainingConfig(), 40, np.random.default_rng(0))

	def test_zero_learning_rate(self):
		model = build_model(TINY)
		before = {name: value.clone() for name, value in model.state_dict().items()}
		train(model, self.examples, TrainingConfig(learning_rate=0, epochs=2, batch_size=8))
		for name, value in model.state_dict().items():
			with self.subTest(name):
				self.assertTrue(torch.equal(value, before[name]))

	def test_log(self):
		model = build_model(TINY)
		_, log = train(model, self.examples, TrainingConfig(epochs=3, batch_size=8))
		self.assertEqual([record.epoch for record in log], [0, 1, 2, 3])
		loss, accuracy = dataset_loss(build_model(TINY), self.examples)
		self.assertAlmostEqual(log[0].loss, loss, delta=1e-12)
		self.assertEqual(log[0].accuracy, accuracy)
		self.assertFalse(model.training)

	def test_deterministic(self):
		cfg = TrainingConfig(epochs=2, batch_size=8, seed=3)
		_, first = train(build_model(TINY), self.examples, cfg)
		_, second = train(build_model(TINY), self.examples, cfg)
		self.assertEqual(first, second)

	def test_loss_goes_down(self):
		_, log = train(build_model(TINY), self.examples, TrainingConfig(epochs=30, batch_size=8, learning_rate=1e-2))
		self.assertLess(log[-1].loss, log[0].loss)

	def test_sgd(self):
		model = build_model(TINY)
		before = model.head[-1].weight.clone()
		train(model, self.examples, TrainingConfig(epochs=1, optimizer='sgd', learning_rate=0.1))
		self.assertFalse(torch.equal(before, model.head[-1].weight))

	def test_errors(self):
		model = build_model(TINY)
		with self.assertRaises(ValueError):
			train(model, [], TrainingConfig())
		unlabelled = build_sequence(np.eye(DIM)[:1], 0, 0, np.eye(DIM)[:2])
		with self.assertRaises(ValueError):
			train(model, [unlabelled], TrainingConfig())
		wide = build_sequence(np.eye(5)[:1], 0, 0, np.eye(5)[:2], label=0)
		with self.assertRaises(ValueError):
			train(model, [wide], TrainingConfig())


class TestEvaluate(unittest.TestCase):
	def test_counting(self):
		profiles = np.eye(3)
		sequences = [build_sequence(profiles[[k]], 0, 0, profiles, label=k) for k in range(3)]
		sequences.append(build_sequence(profiles[[0]], 0, 0, profiles, label=2))
		self.assertEqual(evaluate(CosineIdentifier(), sequences), 0.75)
		self.assertEqual(evaluate(CosineIdentifier(), sequences[:3]), 1.0)
		self.assertEqual(evaluate(CosineIdentifier(), sequences[3:]), 0.0)

	def test_model(self):
		accuracy = evaluate(build_model(TINY), make_training_examples(make_pool(), TrainingConfig(), 10, np.random.default_rng(0)))
		self.assertTrue(0 <= accuracy <= 1)

	def test_errors(self):
		with self.assertRaises(ValueError):
			evaluate(CosineIdentifier(), [])
		with self.assertRaises(ValueError):
			evaluate(CosineIdentifier(), [build_sequence(np.eye(2)[:1], 0, 0, np.eye(2))])
