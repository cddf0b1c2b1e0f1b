import io
import json
import threading
import unittest

import numpy as np

from speakerid import logging
from speakerid._util import ThreadPool, derive_seed


class TestDeriveSeed(unittest.TestCase):
	def test_stable(self):
		self.assertEqual(derive_seed(0, 'meeting', 3), derive_seed(0, 'meeting', 3))
		self.assertGreaterEqual(derive_seed(0, 'meeting', 3), 0)
		self.assertLess(derive_seed(0, 'meeting', 3), 2**63)

	def test_distinct(self):
		seeds = {derive_seed(seed, key, k) for seed in range(3) for key in ('pool', 'meeting') for k in range(10)}
		self.assertEqual(len(seeds), 60)


class TestThreadPool(unittest.TestCase):
	def test_results(self):
		results = {}

		def work(index):
			results[index] = index * index

		with ThreadPool(max_workers=2) as pool:
			for index in range(10):
				pool.start(work, index)
			pool.join()
		self.assertEqual(results, {index: index * index for index in range(10)})

	def test_exception(self):
		def fail():
			raise RuntimeError('worker failed')

		with self.assertRaisesRegex(RuntimeError, 'worker failed'):
			with ThreadPool() as pool:
				pool.start(fail)
				pool.join()


class TestLogging(unittest.TestCase):
	def _records(self, fh: io.StringIO):
		return [json.loads(line) for line in fh.getvalue().splitlines()]

	def test_span_and_event(self):
		fh = io.StringIO()
		with logging.Context(file=fh):
			with logging.span('outer'):
				logging.event('epoch', epoch=1, loss=np.float32(0.5), weights=np.array([1, 2]))
				logging.update(done=True)
		records = self._records(fh)
		span = records[0]
		self.assertEqual(span['name'], 'outer')
		self.assertEqual(span['type'], 'span')
		event = records[1]
		self.assertEqual(event['parent'], span['id'])
		self.assertEqual(event['loss'], 0.5)
		self.assertEqual(event['weights'], [1, 2])
		updates = [record for record in records[2:] if record['id'] == span['id']]
		self.assertTrue(any(record.get('done') for record in updates))
		self.assertTrue(any('end' in record for record in updates))

	def test_trace(self):
		@logging.trace
		def step(x):
			return x + 1

		fh = io.StringIO()
		with logging.Context(file=fh):
			self.assertEqual(step(1), 2)
		self.assertEqual(self._records(fh)[0]['name'], 'step')

	def test_worker_threads(self):
		"""Records from other threads land in the same stream, under the span
		the main thread is in."""
		fh = io.StringIO()
		with logging.Context(file=fh):
			span_id = logging.get_logger().push('main')
			thread = threading.Thread(target=logging.event, args=['worker'])
			thread.start()
			thread.join()
		records = self._records(fh)
		worker = next(record for record in records if record.get('name') == 'worker')
		self.assertEqual(worker['parent'], str(span_id))

	def test_without_context(self):
		with logging.span('nothing'):
			logging.event('dropped')
			logging.update(ignored=True)
