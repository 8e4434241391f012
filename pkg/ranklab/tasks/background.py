# ranklab/tasks/background.py
"""
Background batch prefetching:
- one producer thread walks a shuffled epoch and fills a bounded queue
- the training loop consumes batches in exactly the producer's order

Batch order depends only on the epoch's generator, never on thread timing,
so prefetching does not change any logged number.
"""
import logging
import queue
import threading
from typing import Iterator, Optional

import numpy as np

from tasks.synthetic import Batch, Split

logger = logging.getLogger("background_tasks")

_DONE = object()


class BatchPrefetcher:
    def __init__(self, split: Split, batch_size: int, rng: Optional[np.random.Generator], depth: int = 4):
        self.split = split
        self.batch_size = batch_size
        self.rng = rng
        self._queue: "queue.Queue" = queue.Queue(maxsize=depth)
        self._stop = threading.Event()
        self._error: Optional[BaseException] = None
        self._thread = threading.Thread(target=self._produce, name=f"prefetch-{split.name}", daemon=True)

    def _produce(self) -> None:
        try:
            for batch in self.split.batches(self.batch_size, self.rng):
                while not self._stop.is_set():
                    try:
                        self._queue.put(batch, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if self._stop.is_set():
                    return
        except BaseException as e:  # surfaced to the consumer
            self._error = e
        finally:
            self._queue.put(_DONE)

    def __iter__(self) -> Iterator[Batch]:
        self._thread.start()
        try:
            while True:
                item = self._queue.get()
                if item is _DONE:
                    break
                yield item
        finally:
            self.close()
        if self._error is not None:
            logger.error(f"[prefetch] producer for {self.split.name} failed: {self._error}")
            raise self._error

    def close(self) -> None:
        self._stop.set()
        # drain so a blocked producer can post its sentinel
        while self._thread.is_alive():
            try:
                self._queue.get_nowait()
            except queue.Empty:
                self._thread.join(timeout=0.05)
