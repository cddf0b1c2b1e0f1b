from typing import Any, Optional
from threading import Thread
from queue import SimpleQueue

from xxhash import xxh64_intdigest


def derive_seed(seed: int, *keys: Any) -> int:
    """Seed for an independent random stream identified by `keys`, e.g.
    `derive_seed(seed, 'meeting', 3)`. Stable across processes and platforms,
    unlike `hash()`."""
    return xxh64_intdigest(repr((seed, *keys)).encode()) & 0x7fff_ffff_ffff_ffff


def _thread_pool_worker(id:int, exc_queue:SimpleQueue, target, args, kwargs):
    try:
        target(*args, **kwargs)
        exc_queue.put((id, None))
    except Exception as exc:
        exc_queue.put((id, exc))


class ThreadPool:
    """Threadpool that can join() all started threads at the same time, but if
    any of those threads got caught in an exception, join() will reraise that
    exception as soon as it is received. The other threads are waited for when
    the pool exits the context.
    Workers should write their results into a dict keyed by their own index so
    the caller can reassemble them in order.
    """
    def __init__(self, max_workers:Optional[int]=None):
        self.threads = {}
        self.queue = SimpleQueue()
        self.max_workers = max_workers
        self.running = 0

    def start(self, func, *args, **kwargs):
        # Keep at most `max_workers` threads alive; wait for one to finish
        # (and reraise its exception) before starting another.
        if self.max_workers is not None and self.running >= self.max_workers:
            self._join_one()

        thread_id = len(self.threads)
        while thread_id in self.threads:
            thread_id += 1
        self.threads[thread_id] = Thread(
            target=_thread_pool_worker,
            kwargs={
                "id": thread_id,
                "exc_queue": self.queue,
                "target": func,
                "args": args,
                "kwargs": kwargs,
            },
            name=func.__name__)
        self.threads[thread_id].start()
        self.running += 1

    def _join_one(self):
        thread_id, exc = self.queue.get()
        self.threads[thread_id].join()
        del self.threads[thread_id]
        self.running -= 1
        if exc is not None:
            raise exc

    def join(self):
        while len(self.threads) > 0:
            self._join_one()

    def __enter__(self):
        return self

    def __exit__(self, *args, **kwargs):
        for thread in self.threads.values():
            thread.join()
        self.threads = {}
        self.running = 0
