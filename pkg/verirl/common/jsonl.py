"""
JSONL helpers

Every batch file of verirl (datasets, grading input, reports, metrics)
is one JSON object per line. "-" stands for stdin/stdout.
"""
import json
import sys
from contextlib import contextmanager
from typing import Iterable, Iterator, Tuple

from verirl.models import DatasetIOError, SchemaError


@contextmanager
def _open(path: str, mode: str):
    if path == "-":
        yield sys.stdin if "r" in mode else sys.stdout
        return
    try:
        handle = open(path, mode, encoding="utf-8")  # pylint: disable=consider-using-with
    except OSError as error:
        raise DatasetIOError(f"Cannot open '{path}': {error.strerror}") from error
    with handle:
        yield handle


def read_jsonl(path: str) -> Iterator[Tuple[int, dict]]:
    """Yields (line number, record) for every non-blank line"""
    with _open(path, "r") as handle:
        try:
            for number, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as error:
                    raise SchemaError(f"Invalid JSON: {error.msg}", None, number) from error
                if not isinstance(record, dict):
                    raise SchemaError("Each JSONL line must be an object", None, number)
                yield number, record
        except (OSError, UnicodeDecodeError) as error:
            raise DatasetIOError(f"Cannot read '{path}': {error}") from error


def dumps(record: dict) -> str:
    """Compact, stable single-line JSON"""
    return json.dumps(record, ensure_ascii=False, separators=(",", ":"))


def write_jsonl(records: Iterable[dict], path: str) -> int:
    """Writes records one per line, returning how many were written"""
    count = 0
    with _open(path, "w") as handle:
        try:
            for record in records:
                handle.write(dumps(record) + "\n")
                count += 1
            handle.flush()
        except OSError as error:
            raise DatasetIOError(f"Cannot write '{path}': {error.strerror}") from error
    return count


class JsonlWriter:
    """Appends records one line at a time, flushing each so partial runs survive"""

    def __init__(self, path: str):
        self.path = path
        self._handle = None

    def __enter__(self) -> "JsonlWriter":
        try:
            self._handle = open(self.path, "w", encoding="utf-8")  # pylint: disable=consider-using-with
        except OSError as error:
            raise DatasetIOError(f"Cannot open '{self.path}': {error.strerror}") from error
        return self

    def write(self, record: dict) -> None:
        """Writes and flushes one record"""
        self._handle.write(dumps(record) + "\n")
        self._handle.flush()

    def __exit__(self, *exc_info):
        self._handle.close()
        return False
