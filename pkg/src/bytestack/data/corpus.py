"""Raw byte corpora and context-window sampling."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

import numpy as np
import torch

from bytestack.config import PAD_ID


@dataclass
class ByteSample:
    inputs: np.ndarray  # (L,) int64 byte ids, PAD_ID allowed
    targets: np.ndarray  # (L,) int64
    mask: np.ndarray  # (L,) bool, positions that count towards the loss
    provenance: dict[str, Any] = field(default_factory=dict)


@dataclass
class ByteCorpus:
    data: np.ndarray  # uint8, every document concatenated as-is
    offsets: tuple[int, ...]  # start of each document
    names: tuple[str, ...] = ()
    split: str = "train"

    def __len__(self) -> int:
        return len(self.data)

    def to_bytes(self) -> bytes:
        return self.data.tobytes()

    def document(self, i: int) -> bytes:
        end = self.offsets[i + 1] if i + 1 < len(self.offsets) else len(self.data)
        return self.data[self.offsets[i]:end].tobytes()


def _files(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    return sorted(p for p in path.rglob("*") if p.is_file() and not p.name.startswith("."))


def load_corpus(path: str | Path, split: str = "train", suffixes: tuple[str, ...] = ()) -> ByteCorpus:
    """Concatenate every file under ``path`` byte for byte, in sorted order."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError("data: corpus path not found")
    files = [f for f in _files(path) if not suffixes or f.suffix in suffixes]
    if not files:
        raise FileNotFoundError(f"data: no corpus files under {path}")
    chunks, offsets, pos = [], [], 0
    for f in files:
        blob = f.read_bytes()
        offsets.append(pos)
        chunks.append(blob)
        pos += len(blob)
    data = np.frombuffer(b"".join(chunks), dtype=np.uint8).copy()
    return ByteCorpus(data, tuple(offsets), tuple(f.name for f in files), split)


def sample_window(corpus: ByteCorpus, length: int, offset: int) -> ByteSample:
    if offset < 0 or offset + length > len(corpus):
        raise IndexError(f"window [{offset}, {offset + length}) outside corpus of {len(corpus)} bytes")
    window = corpus.data[offset:offset + length].astype(np.int64)
    return ByteSample(window, window.copy(), np.ones(length, dtype=bool),
                      {"split": corpus.split, "offset": offset})


def stack(samples: list[ByteSample]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    inputs = torch.from_numpy(np.stack([s.inputs for s in samples]))
    targets = torch.from_numpy(np.stack([s.targets for s in samples]))
    mask = torch.from_numpy(np.stack([s.mask for s in samples]))
    return inputs, targets, mask


class WindowSampler:
    """Uniformly random windows; reproducible and resumable through ``state``."""

    def __init__(self, corpus: ByteCorpus, length: int, batch_size: int, seed: int = 0):
        if length > len(corpus):
            raise ValueError(f"context {length} longer than corpus ({len(corpus)} bytes)")
        self.corpus = corpus
        self.length = length
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)

    def offsets(self) -> np.ndarray:
        return self.rng.integers(0, len(self.corpus) - self.length + 1, size=self.batch_size)

    def next_batch(self):
        return stack([sample_window(self.corpus, self.length, int(o)) for o in self.offsets()])

    def state(self) -> dict:
        return self.rng.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state


def eval_batches(corpus: ByteCorpus, length: int, batch_size: int,
                 max_windows: int | None = None) -> Iterator[tuple[torch.Tensor, torch.Tensor, torch.Tensor]]:
    """Consecutive non-overlapping windows from the start of the corpus."""
    count = len(corpus) // length
    if max_windows is not None:
        count = min(count, max_windows)
    for start in range(0, count, batch_size):
        idx = range(start, min(start + batch_size, count))
        yield stack([sample_window(corpus, length, i * length) for i in idx])


def byte_histogram(data: bytes | np.ndarray) -> np.ndarray:
    """Relative frequency of each of the 256 byte values."""
    arr = np.frombuffer(data, dtype=np.uint8) if isinstance(data, (bytes, bytearray)) else np.asarray(data, np.uint8)
    counts = np.bincount(arr, minlength=256).astype(np.float64)
    return counts / max(1, counts.sum())


def pad_left(ids: list[int] | bytes, length: int) -> np.ndarray:
    ids = list(ids)
    if len(ids) > length:
        raise ValueError(f"sequence of {len(ids)} does not fit in {length}")
    return np.asarray([PAD_ID] * (length - len(ids)) + ids, dtype=np.int64)


class SampleSampler:
    """Random batches (with replacement) from a fixed list of samples."""

    def __init__(self, samples: list[ByteSample], batch_size: int, seed: int = 0):
        if not samples:
            raise ValueError("no samples")
        self.samples = samples
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)

    def next_batch(self):
        idx = self.rng.integers(0, len(self.samples), size=self.batch_size)
        return stack([self.samples[int(i)] for i in idx])

    def state(self) -> dict:
        return self.rng.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state
