import os
import unittest

import numpy as np

from speakerid.benchmarks import BENCHMARKS, above_chance, chance, inject_flips, make_corpus, median_flips, model_config, overfit
from speakerid.identification import LabelTrajectory
from speakerid.synth import MeetingParams


# Training benchmarks take minutes; run them with SPEAKERID_SLOW=1 (`hatch run slow`).
SLOW = os.getenv('SPEAKERID_SLOW', '') not in ('', '0')


class TestMedianFlips(unittest.TestCase):
	def test_inject_flips(self):
		truth = np.array([0] * 10 + [1] * 10)
		traj = LabelTrajectory('m', np.arange(20.0), np.arange(20.0) + 1.5, truth)
		noisy, flipped = inject_flips(traj, truth, 0.2, 2, np.random.default_rng(0))
		self.assertEqual(len(flipped), 4)
		for i in flipped:
			self.assertNotEqual(noisy.labels[i], truth[i])
			self.assertEqual(noisy.labels[i - 1], truth[i - 1])
			self.assertEqual(noisy.labels[i + 1], truth[i + 1])
		self.assertEqual(int(np.sum(noisy.labels != truth)), len(flipped))

	def test_median_removes_isolated_flips(self):
		result = median_flips()
		self.assertTrue(result.passed, result.table())
		self.assertEqual(len(result.rows), 5)
		self.assertIn('median-flips', result.table())

	def test_registry(self):
		self.assertEqual(set(BENCHMARKS), {'overfit', 'mismatch', 'context', 'seq-len', 'ablation', 'median-flips'})


class TestCorpus(unittest.TestCase):
	def test_small_corpus(self):
		corpus = make_corpus(0, dim=6, train_speakers=5, unseen_speakers=4, utterances_per_speaker=1, windows_per_utterance=2,
		                     eval_meetings=2, meeting=MeetingParams(speakers_per_meeting=3, turns=4))
		self.assertEqual(len(corpus.pool.profiles), 5)
		self.assertEqual(len(corpus.meetings), 2)
		self.assertEqual(model_config(corpus).input_dim, 6)
		pool_speakers = set(corpus.pool.profiles)
		for meeting in corpus.meetings:
			self.assertFalse(pool_speakers & {p.speaker_id for p in meeting.profiles})

	def test_without_meetings(self):
		corpus = make_corpus(0, dim=6, train_speakers=4, unseen_speakers=0, utterances_per_speaker=1, windows_per_utterance=2, eval_meetings=0)
		self.assertEqual(corpus.meetings, [])
		self.assertEqual(len(corpus.pool.profiles), 4)

	def test_chance(self):
		corpus = make_corpus(0, dim=6, train_speakers=5, unseen_speakers=4, utterances_per_speaker=1, windows_per_utterance=2,
		                     eval_meetings=2, meeting=MeetingParams(speakers_per_meeting=3, turns=4))
		self.assertAlmostEqual(chance(corpus), 1 / 3)
		self.assertFalse(above_chance(0.4, corpus))
		self.assertTrue(above_chance(0.6, corpus))

	def test_overfit_runs(self):
		"""A few epochs on two speakers; the untrained model is at ln(2)."""
		result = overfit(examples=16, epochs=2, speakers=2)
		self.assertEqual(result.name, 'overfit')
		self.assertAlmostEqual(result.rows[0]['loss'], np.log(2), delta=0.1)


@unittest.skipUnless(SLOW, 'set SPEAKERID_SLOW=1 to run training benchmarks')
class TestTrainingBenchmarks(unittest.TestCase):
	def test_overfit(self):
		result = overfit()
		self.assertTrue(result.passed, result.table())

	def test_mismatch(self):
		result = BENCHMARKS['mismatch']()
		self.assertTrue(result.passed, result.table())

	def test_context(self):
		result = BENCHMARKS['context']()
		self.assertTrue(result.passed, result.table())

	def test_seq_len(self):
		result = BENCHMARKS['seq-len']()
		self.assertTrue(result.passed, result.table())

	def test_ablation(self):
		result = BENCHMARKS['ablation']()
		self.assertTrue(result.passed, result.table())
		self.assertTrue(all(row['rmc parameters'] > 0 and row['lstm parameters'] > 0 for row in result.rows))
