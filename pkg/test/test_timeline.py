import unittest

import numpy as np

from speakerid.identification import LabelTrajectory
from speakerid.timeline import (
	MeetingScore,
	ScoreReport,
	Segment,
	Timeline,
	TimelineError,
	UndefinedScore,
	compute_ser,
	make_timeline,
	merge_segments,
	overlap_fraction,
	score_meeting,
	score_meetings,
	speaker_at,
	speaker_changes_per_minute,
	speakers_of,
	speech_time,
	to_annotation,
	trajectory_to_segments,
	window_accuracy,
	window_segments,
)


def timeline(*segments, meeting='m'):
	return make_timeline(meeting, [Segment(*segment) for segment in segments])


def trajectory(windows, labels, meeting='m'):
	windows = np.asarray(windows, dtype=np.float64).reshape(-1, 2)
	return LabelTrajectory(meeting, windows[:, 0], windows[:, 1], np.asarray(labels, dtype=np.int64))


FRAME = 0.01


def speaker_turns(tl):
	"""Each speaker's segments with overlapping or touching ones joined."""
	turns = []
	for speaker in sorted(speakers_of(tl)):
		current = None
		for s in sorted(s for s in tl.segments if s.speaker == speaker):
			if current and s.start <= current[1]:
				current[1] = max(current[1], s.end)
			else:
				if current:
					turns.append(tuple(current))
				current = [s.start, s.end]
		turns.append(tuple(current))
	return turns


def brute_force_score(reference, hypothesis, collar, exclude_overlap, duration):
	"""Frame-level scorer at 10 ms resolution, one frame at a time. Every
	reference speaker of a frame is scored and is correct when the hypothesis
	has the same speaker."""
	boundaries = [t for turn in speaker_turns(reference) for t in turn]
	scored = errors = 0
	for k in range(int(round(duration / FRAME))):
		t = (k + 0.5) * FRAME
		ref = {s.speaker for s in reference.segments if s.start < t < s.end}
		if not ref:
			continue
		if any(abs(t - b) < collar for b in boundaries):
			continue
		if exclude_overlap and len(ref) > 1:
			continue
		hyp = {s.speaker for s in hypothesis.segments if s.start < t < s.end}
		scored += len(ref)
		errors += len(ref - hyp)
	return scored * FRAME, errors * FRAME


def random_timeline(rng, speakers, duration, count):
	"""Segments on a 50 ms grid so frame midpoints never hit a boundary."""
	segments = []
	for _ in range(count):
		start = rng.integers(0, int(duration / 0.05) - 1)
		end = rng.integers(start + 1, int(duration / 0.05) + 1)
		segments.append((start * 0.05, end * 0.05, str(rng.choice(speakers))))
	return timeline(*segments)


class TestMakeTimeline(unittest.TestCase):
	def test_sorted(self):
		tl = timeline((2, 3, 'a'), (0, 1, 'b'))
		self.assertEqual([s.start for s in tl.segments], [0, 2])

	def test_invalid(self):
		for segment in [(1, 1, 'a'), (2, 1, 'a'), (-1, 1, 'a'), (0, np.inf, 'a')]:
			with self.subTest(segment=segment):
				with self.assertRaises(TimelineError):
					timeline(segment)


class TestMerge(unittest.TestCase):
	def test_examples(self):
		cases = [
			([(0, 1.0), (1.4, 2.0)], [(0, 2.0)]),
			([(0, 1.0), (1.5, 2.0)], [(0, 1.0), (1.5, 2.0)]),
			([(0, 1), (1.2, 2), (2.3, 3)], [(0, 3)]),
			([], []),
		]
		for segments, expected in cases:
			with self.subTest(segments=segments):
				merged = merge_segments(timeline(*segments), 0.5)
				self.assertEqual([(s.start, s.end) for s in merged.segments], expected)

	def test_touching_merges(self):
		merged = merge_segments(timeline((0, 1, 'a'), (1, 2, 'b')), 0.0)
		self.assertEqual(merged.segments, [Segment(0, 2, None)])

	def test_overlap_always_merges(self):
		merged = merge_segments(timeline((0, 2, 'a'), (1, 3, 'a')), 0.0)
		self.assertEqual(merged.segments, [Segment(0, 3, 'a')])

	def test_speaker(self):
		self.assertEqual(merge_segments(timeline((0, 1, 'a'), (1.1, 2, 'a')), 0.5).segments[0].speaker, 'a')
		self.assertIsNone(merge_segments(timeline((0, 1, 'a'), (1.1, 2, 'b')), 0.5).segments[0].speaker)

	def test_unsorted(self):
		with self.assertRaises(TimelineError):
			merge_segments(Timeline('m', [Segment(2, 3, 'a'), Segment(0, 1, 'a')]), 0.5)

	def test_negative_gap(self):
		with self.assertRaises(TimelineError):
			merge_segments(timeline((0, 1)), -0.1)

	def test_idempotent(self):
		rng = np.random.default_rng(0)
		for _ in range(20):
			tl = random_timeline(rng, ['a'], 20, 6)
			once = merge_segments(tl, 0.5)
			self.assertEqual(merge_segments(once, 0.5).segments, once.segments)


class TestAnnotation(unittest.TestCase):
	def test_speaker_turns(self):
		annotation = to_annotation(timeline((0, 2, 'a'), (1, 3, 'a'), (3, 4, 'a'), (2, 5, 'b'), (6, 7), meeting='m1'))
		self.assertEqual(annotation.uri, 'm1')
		turns = sorted((s.start, s.end, label) for s, _, label in annotation.itertracks(yield_label=True))
		self.assertEqual(turns, [(0, 4, 'a'), (2, 5, 'b')])

	def test_empty(self):
		self.assertEqual(len(to_annotation(timeline())), 0)


class TestWindows(unittest.TestCase):
	def test_examples(self):
		self.assertEqual(window_segments(timeline((0, 3.0)), 1.5, 0.75), [(0, 1.5, 0), (0.75, 2.25, 0), (1.5, 3.0, 0)])
		self.assertEqual(window_segments(timeline((0, 1.0)), 1.5, 0.75), [(0, 1.0, 0)])

	def test_tail(self):
		"""Short tails stretch the last window, long ones get a flush window."""
		self.assertEqual(window_segments(timeline((0, 2.5)), 1.5, 0.75), [(0, 1.5, 0), (0.75, 2.5, 0)])
		windows = window_segments(timeline((0, 2.7)), 1.5, 0.75)
		np.testing.assert_allclose([w[:2] for w in windows], [(0, 1.5), (0.75, 2.25), (1.2, 2.7)])
		self.assertEqual(window_segments(timeline((0, 2.5)), 1.5, 1.0), [(0, 1.5, 0), (1.0, 2.5, 0)])
		self.assertEqual(window_segments(timeline((0, 1.8)), 1.5, 0.75), [(0, 1.8, 0)])

	def test_cover_and_bounds(self):
		rng = np.random.default_rng(1)
		for _ in range(50):
			start = float(rng.uniform(0, 5))
			tl = timeline((start, start + float(rng.uniform(0.1, 10))))
			windows = window_segments(tl, 1.5, 0.75)
			segment = tl.segments[0]
			self.assertAlmostEqual(windows[0][0], segment.start)
			self.assertAlmostEqual(windows[-1][1], segment.end)
			for (s1, e1, _), (s2, e2, _) in zip(windows, windows[1:]):
				self.assertLessEqual(s2, e1 + 1e-9)
				self.assertLess(s1, s2)
			for s, e, _ in windows:
				self.assertGreaterEqual(s, segment.start - 1e-9)
				self.assertLessEqual(e, segment.end + 1e-9)

	def test_segment_index(self):
		windows = window_segments(timeline((0, 1), (2, 5)), 1.5, 0.75)
		self.assertEqual(windows[0][2], 0)
		self.assertTrue(all(index == 1 for _, _, index in windows[1:]))

	def test_invalid(self):
		for win, shift in [(1.0, 1.5), (0, 0), (1.5, 0), (-1, -1)]:
			with self.subTest(win=win, shift=shift):
				with self.assertRaises(TimelineError):
					window_segments(timeline((0, 3)), win, shift)


class TestTrajectoryToSegments(unittest.TestCase):
	def test_single_window(self):
		tl = trajectory_to_segments(trajectory([(0, 1.5)], [2]), ['a', 'b', 'c'])
		self.assertEqual(tl.segments, [Segment(0, 1.5, 'c')])

	def test_disjoint_same_label(self):
		tl = trajectory_to_segments(trajectory([(0, 1.5), (1.5, 3.0)], [0, 0]), ['a'])
		self.assertEqual(tl.segments, [Segment(0, 3.0, 'a')])

	def test_gap_stays_unlabelled(self):
		tl = trajectory_to_segments(trajectory([(0, 1), (2, 3)], [0, 0]), ['a'])
		self.assertEqual(tl.segments, [Segment(0, 1, 'a'), Segment(2, 3, 'a')])

	def test_touching_same_label(self):
		tl = trajectory_to_segments(trajectory([(0, 1.5), (0.75, 2.25)], [0, 0]), ['a', 'b'])
		self.assertEqual(tl.segments, [Segment(0, 2.25, 'a')])

	def test_handover_at_midpoint_of_centres(self):
		tl = trajectory_to_segments(trajectory([(0, 1.5), (0.75, 2.25)], [0, 1]), ['a', 'b'])
		self.assertEqual(tl.segments, [Segment(0, 1.125, 'a'), Segment(1.125, 2.25, 'b')])

	def test_three_windows(self):
		tl = trajectory_to_segments(trajectory([(0, 1.5), (0.75, 2.25), (1.5, 3.0)], [0, 1, 0]), ['a', 'b'])
		self.assertEqual(tl.segments, [Segment(0, 1.125, 'a'), Segment(1.125, 1.875, 'b'), Segment(1.875, 3.0, 'a')])

	def test_empty(self):
		self.assertEqual(trajectory_to_segments(trajectory([], []), ['a']).segments, [])

	def test_label_without_speaker(self):
		with self.assertRaises(TimelineError):
			trajectory_to_segments(trajectory([(0, 1)], [1]), ['a'])


class TestScoring(unittest.TestCase):
	def test_identity(self):
		ref = timeline((0, 4, 'a'), (4, 7, 'b'), (8, 10, 'a'))
		self.assertEqual(compute_ser(ref, ref, 0.25, True).ser, 0.0)

	def test_half_wrong(self):
		report = compute_ser(timeline((0, 10, 'A')), timeline((0, 5, 'A'), (5, 10, 'B')), 0.0, True)
		self.assertAlmostEqual(report.ser, 0.5)
		self.assertAlmostEqual(report.scored_time, 10)

	def test_overlap_excluded(self):
		ref = timeline((0, 10, 'A'), (4, 6, 'B'))
		report = compute_ser(ref, timeline((0, 10, 'A')), 0.0, True)
		self.assertAlmostEqual(report.scored_time, 8)
		self.assertEqual(report.ser, 0.0)

	def test_overlap_included(self):
		"""Overlapped speech is scored once per reference speaker."""
		ref = timeline((0, 10, 'A'), (4, 6, 'B'))
		report = compute_ser(ref, timeline((0, 5, 'A'), (5, 10, 'B')), 0.0, False)
		self.assertAlmostEqual(report.scored_time, 12)
		self.assertAlmostEqual(report.speaker_error_time, 6)

	def test_same_speaker_overlap_counts_once(self):
		ref = timeline((0, 6, 'A'), (4, 10, 'A'))
		report = compute_ser(ref, timeline((0, 10, 'A')), 0.0, False)
		self.assertAlmostEqual(report.scored_time, 10)
		self.assertEqual(report.speaker_error_time, 0.0)
		self.assertAlmostEqual(compute_ser(ref, timeline((0, 10, 'A')), 0.0, True).scored_time, 10)

	def test_unlabelled_hypothesis_is_missed(self):
		report = compute_ser(timeline((0, 10, 'A')), timeline((0, 10)), 0.0, True)
		self.assertAlmostEqual(report.ser, 1.0)

	def test_missed_speech_is_error(self):
		report = compute_ser(timeline((0, 10, 'A')), timeline((0, 6, 'A')), 0.0, True)
		self.assertAlmostEqual(report.ser, 0.4)

	def test_hypothesis_outside_reference_is_ignored(self):
		report = compute_ser(timeline((0, 10, 'A')), timeline((0, 12, 'A'), (20, 30, 'B')), 0.0, True)
		self.assertEqual(report.ser, 0.0)
		self.assertAlmostEqual(report.scored_time, 10)

	def test_collar(self):
		ref = timeline((0, 4, 'A'), (4, 10, 'B'))
		hyp = timeline((0, 4.2, 'A'), (4.2, 10, 'B'))
		report = compute_ser(ref, hyp, 0.25, True)
		self.assertEqual(report.speaker_error_time, 0.0)
		self.assertAlmostEqual(report.scored_time, 10 - 0.25 - 0.5 - 0.25)
		self.assertAlmostEqual(compute_ser(ref, hyp, 0.0, True).ser, 0.02)

	def test_undefined(self):
		report = compute_ser(timeline((0, 0.4, 'A')), timeline(), 0.25, True)
		self.assertEqual(report.scored_time, 0.0)
		with self.assertRaises(UndefinedScore):
			report.ser
		self.assertIsNone(list(report.records())[-1]['ser'])

	def test_errors(self):
		with self.assertRaises(TimelineError):
			compute_ser(timeline((0, 1, 'A')), timeline(), -0.1, True)
		with self.assertRaises(TimelineError):
			compute_ser(timeline((0, 1)), timeline(), 0.0, True)

	def test_collar_monotonic(self):
		"""Widening the collar never adds scored time."""
		rng = np.random.default_rng(2)
		for _ in range(20):
			ref = random_timeline(rng, ['a', 'b', 'c'], 30, 8)
			hyp = random_timeline(rng, ['a', 'b', 'c'], 30, 8)
			scored = [score_meeting(ref, hyp, collar, True).scored_time for collar in (0, 0.1, 0.25, 0.5, 1.0)]
			self.assertTrue(all(a >= b - 1e-9 for a, b in zip(scored, scored[1:])), scored)

	def test_matches_frame_scorer(self):
		rng = np.random.default_rng(3)
		for case in range(50):
			ref = random_timeline(rng, ['a', 'b', 'c'], 20, int(rng.integers(1, 7)))
			hyp = random_timeline(rng, ['a', 'b', 'c', 'd'], 20, int(rng.integers(0, 7)))
			collar = float(rng.choice([0.0, 0.1, 0.25]))
			exclude = bool(rng.integers(2))
			with self.subTest(case=case):
				score = score_meeting(ref, hyp, collar, exclude)
				scored, errors = brute_force_score(ref, hyp, collar, exclude, 20)
				self.assertAlmostEqual(score.scored_time, scored, delta=1e-6)
				self.assertAlmostEqual(score.speaker_error_time, errors, delta=1e-6)

	def test_combine_sums_times(self):
		pairs = [
			(timeline((0, 10, 'A'), meeting='m2'), timeline((0, 5, 'A'), meeting='m2')),
			(timeline((0, 30, 'A'), meeting='m1'), timeline((0, 30, 'A'), meeting='m1')),
		]
		report = score_meetings(pairs, 0.0, True)
		self.assertAlmostEqual(report.ser, 5 / 40)
		self.assertEqual([m.meeting for m in report.meetings], ['m1', 'm2'])
		self.assertEqual(report, score_meetings(pairs[::-1], 0.0, True))
		records = list(report.records())
		self.assertEqual(records[-1]['meeting'], 'ALL')
		self.assertIn('ALL', report.table())

	def test_meeting_score(self):
		self.assertEqual(MeetingScore('m', 4.0, 1.0).ser, 0.25)
		with self.assertRaises(UndefinedScore):
			ScoreReport.combine([]).ser


class TestAccuracy(unittest.TestCase):
	def setUp(self):
		self.ref = timeline((0, 3, 'a'), (3, 6, 'b'))
		self.windows = [(0, 1.5), (1.5, 3.0), (3, 4.5), (4.5, 6)]

	def test_window_accuracy(self):
		self.assertEqual(window_accuracy(trajectory(self.windows, [0, 0, 1, 1]), self.ref, ['a', 'b']), 1.0)
		self.assertEqual(window_accuracy(trajectory(self.windows, [0, 0, 1, 0]), self.ref, ['a', 'b']), 0.75)

	def test_empty(self):
		with self.assertRaises(TimelineError):
			window_accuracy(trajectory([], []), self.ref, ['a'])

	def test_speaker_at(self):
		self.assertEqual(speaker_at(self.ref, 3.0), 'b')
		with self.assertRaises(TimelineError):
			speaker_at(self.ref, 7)


class TestStats(unittest.TestCase):
	def test_speech_time(self):
		self.assertAlmostEqual(speech_time(timeline((0, 2, 'a'), (1, 3, 'b'), (5, 6, 'a'))), 4)

	def test_overlap_fraction(self):
		self.assertAlmostEqual(overlap_fraction(timeline((0, 10, 'A'), (4, 6, 'B'))), 0.2)
		self.assertEqual(overlap_fraction(timeline()), 0.0)

	def test_speaker_changes(self):
		tl = timeline((0, 20, 'a'), (20, 40, 'b'), (40, 60, 'a'))
		self.assertAlmostEqual(speaker_changes_per_minute(tl), 2.0)

	def test_speakers_of(self):
		self.assertEqual(speakers_of(timeline((0, 1, 'a'), (1, 2), (2, 3, 'b'))), {'a', 'b'})
		self.assertIsInstance(Timeline('m', []), Timeline)
