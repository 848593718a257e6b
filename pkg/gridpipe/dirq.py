"""Directory queue: one plain file per element, shared safely by concurrent processes.

Layout under the queue root::

    556ba080/                  bucket: epoch seconds rounded down to the granularity (%08x)
        556ba080000000         element: %08x seconds, %05x microseconds, %01x counter
        556ba080000001.lck     element owned by a consumer
        556ba0800003e80.tmp    element still being written

Every state change is a single rename (or link) inside one directory, so a reader
never observes a partially written payload and at most one consumer owns an element.
"""
from __future__ import annotations

import errno
import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterator, Union

from .errors import GridpipeError

log = logging.getLogger(__name__)

TMP_SUFFIX = ".tmp"
LOCK_SUFFIX = ".lck"
DEFAULT_GRANULARITY = 60
DEFAULT_MAX_TMP_AGE = 300
DEFAULT_MAX_LOCK_AGE = 600

_MAX_NAME_ATTEMPTS = 64
_BUCKET_RE = re.compile(r"^[0-9a-f]{8}$")
_ELEMENT_RE = re.compile(r"^[0-9a-f]{14}$")
_ENTRY_RE = re.compile(r"^([0-9a-f]{14})(\.tmp|\.lck)?$")
_NAME_RE = re.compile(r"^[0-9a-f]{8}/[0-9a-f]{14}$")

PathLike = Union[str, "os.PathLike[str]"]


class DirQueueError(GridpipeError):
    pass


class ElementState(str, Enum):
    READY = "ready"
    LOCKED = "locked"
    TMP = "tmp"


@dataclass(frozen=True)
class ElementInfo:
    name: str
    state: ElementState
    size: int
    mtime: float


def element_name(seconds: int, microseconds: int, counter: int,
                 granularity: int = DEFAULT_GRANULARITY) -> str:
    """Canonical ``bucket/file`` name for a timestamp and per-process counter."""
    if not 0 <= microseconds < 1_000_000 or not 0 <= counter < 16:
        raise ValueError("microseconds or counter out of range")
    bucket = seconds - seconds % granularity
    return f"{bucket:08x}/{seconds:08x}{microseconds:05x}{counter:01x}"


def _fsync_dir(directory: Path) -> None:
    try:
        fd = os.open(directory, os.O_RDONLY)
    except OSError:
        return
    try:
        os.fsync(fd)
    except OSError:
        pass
    finally:
        os.close(fd)


class DirQueue:
    """Handle on a directory queue.

    Handles are cheap; any number of them, in any number of processes, may point at
    the same root. The only per-handle state is the name counter and the set of
    elements this handle has locked.
    """

    def __init__(self, path: PathLike, granularity: int = DEFAULT_GRANULARITY,
                 file_mode: int = 0o640, dir_mode: int = 0o750, fsync: bool = True) -> None:
        if int(granularity) <= 0:
            raise DirQueueError(f"granularity must be a positive number of seconds, got {granularity!r}")
        self.root = Path(path)
        self.granularity = int(granularity)
        self.file_mode = file_mode
        self.dir_mode = dir_mode
        self.fsync = fsync
        self._mutex = threading.Lock()
        self._last_tick: tuple[int, int] = (-1, -1)
        self._counter = 0
        self._locked: set[str] = set()
        try:
            self.root.mkdir(parents=True, exist_ok=True, mode=dir_mode)
        except FileExistsError as exc:
            raise DirQueueError(f"{self.root} exists and is not a directory") from exc
        except OSError as exc:
            raise DirQueueError(f"cannot open queue at {self.root}: {exc}") from exc
        if not self.root.is_dir():
            raise DirQueueError(f"{self.root} exists and is not a directory")

    def __repr__(self) -> str:
        return f"DirQueue({str(self.root)!r}, granularity={self.granularity})"

    # -- naming -----------------------------------------------------------

    def _next_name(self) -> str:
        with self._mutex:
            while True:
                secs, usecs = divmod(time.time_ns() // 1000, 1_000_000)
                if (secs, usecs) != self._last_tick:
                    self._last_tick = (secs, usecs)
                    self._counter = 0
                elif self._counter < 15:
                    self._counter += 1
                else:
                    # counter exhausted inside one microsecond
                    time.sleep(0)
                    continue
                return element_name(secs, usecs, self._counter, self.granularity)

    def _path(self, name: str) -> Path:
        if not _NAME_RE.match(name):
            raise DirQueueError(f"invalid element name {name!r}")
        return self.root / name

    def _require_lock(self, name: str) -> Path:
        path = self._path(name)
        with self._mutex:
            if name not in self._locked:
                raise DirQueueError(f"element {name} is not locked by this handle")
        return path

    # -- producer side ----------------------------------------------------

    def add(self, payload: bytes) -> str:
        """Publish ``payload`` as a new element and return its name."""
        if not isinstance(payload, (bytes, bytearray, memoryview)):
            raise TypeError("payload must be bytes")
        for _ in range(_MAX_NAME_ATTEMPTS):
            name = self._next_name()
            bucket, file_name = name.split("/")
            bucket_dir = self.root / bucket
            final = bucket_dir / file_name
            tmp = bucket_dir / (file_name + TMP_SUFFIX)
            try:
                bucket_dir.mkdir(exist_ok=True, mode=self.dir_mode)
                fd = os.open(tmp, os.O_WRONLY | os.O_CREAT | os.O_EXCL, self.file_mode)
            except (FileExistsError, FileNotFoundError):
                # name taken by another process, or bucket purged under us
                continue
            except OSError as exc:
                raise DirQueueError(f"add to {self.root} failed: {exc}") from exc
            try:
                with os.fdopen(fd, "wb") as fh:
                    fh.write(payload)
                    fh.flush()
                    if self.fsync:
                        os.fsync(fh.fileno())
                if os.path.lexists(str(final) + LOCK_SUFFIX):
                    continue
                self._publish(tmp, final)
            except FileExistsError:
                continue
            except OSError as exc:
                raise DirQueueError(f"add to {self.root} failed: {exc}") from exc
            finally:
                try:
                    os.unlink(tmp)
                except FileNotFoundError:
                    pass
            if self.fsync:
                _fsync_dir(bucket_dir)
            return name
        raise DirQueueError(f"could not allocate a unique element name in {self.root}")

    @staticmethod
    def _publish(tmp: Path, final: Path) -> None:
        # link refuses to overwrite; rename would silently clobber a concurrent writer
        try:
            os.link(tmp, final)
        except OSError as exc:
            if exc.errno not in (errno.EPERM, errno.ENOTSUP, errno.EOPNOTSUPP):
                raise
            if os.path.lexists(final):
                raise FileExistsError(errno.EEXIST, "element exists", str(final)) from exc
            os.rename(tmp, final)

    # -- consumer side ----------------------------------------------------

    def _buckets(self) -> list[str]:
        try:
            entries = os.listdir(self.root)
        except FileNotFoundError:
            return []
        return sorted(e for e in entries if _BUCKET_RE.match(e) and (self.root / e).is_dir())

    def iterate(self) -> Iterator[str]:
        """Yield committed, unlocked element names in lexicographic (time) order."""
        for bucket in self._buckets():
            try:
                entries = sorted(os.listdir(self.root / bucket))
            except FileNotFoundError:
                continue
            for entry in entries:
                if _ELEMENT_RE.match(entry):
                    yield f"{bucket}/{entry}"

    __iter__ = iterate

    def lock(self, name: str) -> bool:
        """Take exclusive ownership of ``name``; False if locked elsewhere or gone."""
        path = self._path(name)
        locked = Path(str(path) + LOCK_SUFFIX)
        try:
            os.rename(path, locked)
        except FileNotFoundError:
            return False
        except OSError as exc:
            raise DirQueueError(f"lock {name} failed: {exc}") from exc
        try:
            # lock age is measured from now, not from the add
            os.utime(locked)
        except FileNotFoundError:
            return False
        with self._mutex:
            self._locked.add(name)
        return True

    def get(self, name: str) -> bytes:
        path = self._require_lock(name)
        try:
            with open(str(path) + LOCK_SUFFIX, "rb") as fh:
                return fh.read()
        except FileNotFoundError as exc:
            self._forget(name)
            raise DirQueueError(f"lock on {name} was lost") from exc

    def remove(self, name: str) -> None:
        path = self._require_lock(name)
        try:
            os.unlink(str(path) + LOCK_SUFFIX)
        except FileNotFoundError as exc:
            raise DirQueueError(f"lock on {name} was lost") from exc
        finally:
            self._forget(name)

    def unlock(self, name: str) -> None:
        path = self._require_lock(name)
        try:
            os.rename(str(path) + LOCK_SUFFIX, path)
        except FileNotFoundError as exc:
            raise DirQueueError(f"lock on {name} was lost") from exc
        finally:
            self._forget(name)

    def _forget(self, name: str) -> None:
        with self._mutex:
            self._locked.discard(name)

    # -- bookkeeping ------------------------------------------------------

    def count(self) -> int:
        return sum(1 for _ in self.iterate())

    def locked_count(self) -> int:
        return sum(1 for info in self.inspect() if info.state is ElementState.LOCKED)

    def inspect(self) -> Iterator[ElementInfo]:
        """Every element file, including locked and in-flight ones."""
        for bucket in self._buckets():
            bucket_dir = self.root / bucket
            try:
                entries = sorted(os.listdir(bucket_dir))
            except FileNotFoundError:
                continue
            for entry in entries:
                match = _ENTRY_RE.match(entry)
                if not match:
                    continue
                try:
                    st = (bucket_dir / entry).stat()
                except FileNotFoundError:
                    continue
                suffix = match.group(2)
                state = (ElementState.TMP if suffix == TMP_SUFFIX
                         else ElementState.LOCKED if suffix == LOCK_SUFFIX
                         else ElementState.READY)
                yield ElementInfo(f"{bucket}/{match.group(1)}", state, st.st_size, st.st_mtime)

    def purge(self, max_tmp_age: float = DEFAULT_MAX_TMP_AGE,
              max_lock_age: float = DEFAULT_MAX_LOCK_AGE) -> tuple[int, int]:
        """Crash recovery: drop stale temporaries, release stale locks, prune old buckets.

        Returns ``(tmp_removed, locks_broken)``.
        """
        now = time.time()
        tmp_removed = locks_broken = 0
        for bucket in self._buckets():
            bucket_dir = self.root / bucket
            try:
                entries = os.listdir(bucket_dir)
            except FileNotFoundError:
                continue
            for entry in entries:
                match = _ENTRY_RE.match(entry)
                if not match or not match.group(2):
                    continue
                path = bucket_dir / entry
                try:
                    age = now - path.stat().st_mtime
                except FileNotFoundError:
                    continue
                if match.group(2) == TMP_SUFFIX and age >= max_tmp_age:
                    try:
                        os.unlink(path)
                    except FileNotFoundError:
                        continue
                    tmp_removed += 1
                    log.warning("[DirQueue] removed stale temporary %s/%s (%.0fs old)", bucket, entry, age)
                elif match.group(2) == LOCK_SUFFIX and age >= max_lock_age:
                    try:
                        os.rename(path, bucket_dir / match.group(1))
                    except FileNotFoundError:
                        continue
                    locks_broken += 1
                    self._forget(f"{bucket}/{match.group(1)}")
                    log.warning("[DirQueue] broke stale lock on %s/%s (%.0fs old)", bucket, match.group(1), age)
            if int(bucket, 16) + self.granularity <= now:
                try:
                    os.rmdir(bucket_dir)
                except OSError:
                    pass
        return tmp_removed, locks_broken
