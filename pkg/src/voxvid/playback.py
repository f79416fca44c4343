"""Two-tier frame cache for playback: a bounded resident tier of decoded
per-frame resources and a staging tier of prefetched compressed blobs, driven
by the playhead.

Policy: after seek(p), the target resident set is {p, p+1, ..., p+P} modulo
n_frames (truncated to capacity); staging prefetches the frames after that.
Eviction drops the frame whose next playback is farthest away, i.e. maximal
(frame - playhead) mod n_frames, so just-played frames go before upcoming
ones. One background worker performs loads; the hit path never blocks on it.
"""

from __future__ import annotations

import threading
import time
from typing import Callable

__all__ = ["FrameCache"]


class FrameCache:
    def __init__(
        self,
        load_blob: Callable[[int], bytes],
        decode: Callable[[int, bytes], object],
        n_frames: int,
        resident_capacity: int = 8,
        staging_capacity: int = 32,
        prefetch_depth: int = 4,
    ):
        if n_frames < 1 or resident_capacity < 1 or staging_capacity < 0:
            raise ValueError("bad cache geometry")
        self.load_blob = load_blob
        self.decode = decode
        self.n_frames = n_frames
        self.resident_capacity = resident_capacity
        self.staging_capacity = staging_capacity
        self.prefetch_depth = prefetch_depth

        self._resident: dict[int, object] = {}
        self._staging: dict[int, bytes] = {}
        self._playhead = 0
        self._hits = 0
        self._misses = 0
        self._evictions = 0
        self._eviction_log: list[int] = []
        self._stalls = 0
        self._stall_ms = 0.0
        self._queue: list[tuple[int, bool]] = []  # (frame, promote_to_resident)
        self._lock = threading.Lock()
        self._wake = threading.Condition(self._lock)
        self._idle = threading.Condition(self._lock)
        self._busy = False
        self._closed = False
        self._worker = threading.Thread(target=self._prefetch_loop, daemon=True)
        self._worker.start()

    # ------------------------------------------------------------------ policy

    def _distance(self, frame: int) -> int:
        """Steps until the playhead reaches ``frame`` going forward (mod n)."""
        return (frame - self._playhead) % self.n_frames

    def _resident_target(self) -> list[int]:
        depth = min(self.prefetch_depth + 1, self.resident_capacity, self.n_frames)
        return [(self._playhead + k) % self.n_frames for k in range(depth)]

    def _staging_target(self) -> list[int]:
        start = min(self.prefetch_depth + 1, self.resident_capacity, self.n_frames)
        count = min(self.staging_capacity, max(self.n_frames - start, 0))
        return [(self._playhead + start + k) % self.n_frames for k in range(count)]

    def _evict_resident_for(self, incoming: int):
        """Make room before inserting ``incoming``; capacity is never exceeded."""
        while len(self._resident) >= self.resident_capacity:
            victim = max(
                (f for f in self._resident if f != incoming), key=self._distance, default=None
            )
            if victim is None:
                return
            del self._resident[victim]
            self._evictions += 1
            self._eviction_log.append(victim)

    def _insert_resident(self, frame: int, resource):
        if frame in self._resident:
            return
        self._evict_resident_for(frame)
        self._staging.pop(frame, None)  # promotion moves, never copies
        self._resident[frame] = resource

    def _insert_staging(self, frame: int, blob: bytes):
        if frame in self._resident or frame in self._staging:
            return
        while len(self._staging) >= self.staging_capacity:
            victim = max((f for f in self._staging if f != frame), key=self._distance, default=None)
            if victim is None:
                return
            del self._staging[victim]
        self._staging[frame] = blob

    # ------------------------------------------------------------------ api

    def seek(self, playhead: int) -> list[int]:
        """Move the playhead and schedule asynchronous prefetch.

        Returns the frames scheduled for promotion to the resident tier, in
        load order. Never blocks on loading.
        """
        with self._lock:
            self._playhead = playhead % self.n_frames
            resident_target = self._resident_target()
            staging_target = self._staging_target()
            schedule = [f for f in resident_target if f not in self._resident]
            # staging jobs are filtered at processing time, after the promote
            # jobs above have run their evictions
            self._queue = [(f, True) for f in schedule] + [(f, False) for f in staging_target]
            self._wake.notify()
            return schedule

    def get_frame(self, frame: int):
        """Resident hit returns immediately; a miss loads synchronously."""
        frame %= self.n_frames
        with self._lock:
            if frame in self._resident:
                self._hits += 1
                return self._resident[frame]
            self._misses += 1
            self._stalls += 1
            blob = self._staging.get(frame)
        t0 = time.perf_counter()
        if blob is None:
            blob = self.load_blob(frame)
        resource = self.decode(frame, blob)
        with self._lock:
            self._stall_ms += (time.perf_counter() - t0) * 1000.0
            if frame in self._resident:  # a concurrent load won the race
                return self._resident[frame]
            self._insert_resident(frame, resource)
            return resource

    def stats(self) -> dict:
        with self._lock:
            return {
                "hits": self._hits,
                "misses": self._misses,
                "evictions": self._evictions,
                "stalls": self._stalls,
                "stall_ms": self._stall_ms,
                "resident": sorted(self._resident),
                "staging": sorted(self._staging),
                "eviction_log": tuple(self._eviction_log),
                "playhead": self._playhead,
            }

    def drain(self, timeout: float = 30.0):
        """Block until all scheduled prefetch work has completed (for tests
        and simulated real-time playback)."""
        deadline = time.monotonic() + timeout
        with self._lock:
            while self._queue or self._busy:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise TimeoutError("prefetch queue did not drain")
                self._idle.wait(remaining)

    def close(self):
        with self._lock:
            self._closed = True
            self._queue = []
            self._wake.notify()
        self._worker.join(timeout=5)

    # ------------------------------------------------------------------ worker

    def _prefetch_loop(self):
        while True:
            with self._lock:
                while not self._queue and not self._closed:
                    self._idle.notify_all()
                    self._wake.wait()
                if self._closed:
                    self._idle.notify_all()
                    return
                frame, promote = self._queue.pop(0)
                self._busy = True
                if promote and frame in self._resident:
                    self._busy = False
                    continue
                if not promote and (frame in self._staging or frame in self._resident):
                    self._busy = False
                    continue
                blob = self._staging.get(frame)
            try:
                if blob is None:
                    blob = self.load_blob(frame)
                resource = self.decode(frame, blob) if promote else None
            except Exception:
                with self._lock:
                    self._busy = False
                    self._idle.notify_all()
                continue
            with self._lock:
                if promote:
                    self._insert_resident(frame, resource)
                else:
                    self._insert_staging(frame, blob)
                self._busy = False
                if not self._queue:
                    self._idle.notify_all()
