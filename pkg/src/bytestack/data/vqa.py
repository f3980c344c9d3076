"""Visual question answering as a byte-prediction task.

A sample is a single byte sequence ``[image bytes][pad][question][answer]``
left-padded to the context length. The answer slot holds one of 28 answer ids
(0-27) which the model predicts with its ordinary 257-way byte head.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from bytestack.config import PAD_ID
from bytestack.data.corpus import ByteSample, pad_left

QUESTION_TYPES = ("E", "C", "CI", "CA", "QA")
QUESTION_TYPE_NAMES = {
    "E": "exists",
    "C": "count",
    "CI": "compare_integer",
    "CA": "compare_attribute",
    "QA": "query_attribute",
}


def load_answers(path: str | Path | None = None) -> tuple[str, ...]:
    """Answer table: one answer per line, line index is the answer id."""
    if path is None:
        text = resources.files("bytestack.data").joinpath("answers.txt").read_text()
    else:
        text = Path(path).read_text()
    return tuple(line.strip() for line in text.splitlines() if line.strip())


ANSWERS = load_answers()
ANSWER_IDS = {a: i for i, a in enumerate(ANSWERS)}


class VqaFormatError(ValueError):
    pass


@dataclass
class VqaRecord:
    question: bytes
    answer_id: int
    question_type: str
    rgb: np.ndarray | None = None  # (H, W, 3) uint8
    filestream: bytes | None = None  # opaque encoded image file

    def __post_init__(self):
        if not 0 <= self.answer_id < len(ANSWERS):
            raise VqaFormatError(f"answer out of range 0–{len(ANSWERS) - 1}: {self.answer_id}")
        if not self.question:
            raise VqaFormatError("empty question")
        if self.question_type not in QUESTION_TYPES:
            raise VqaFormatError(f"unknown question type {self.question_type!r}")


def flatten_image(rgb: np.ndarray | bytes, dims: tuple[int, int] | None = None) -> bytes:
    """Row-major raster scan with interleaved R, G, B per pixel."""
    if isinstance(rgb, (bytes, bytearray)):
        if dims is None:
            raise ValueError("raw bytes need explicit (height, width)")
        h, w = dims
        if len(rgb) != h * w * 3:
            raise ValueError(f"payload of {len(rgb)} bytes does not match {h}x{w}x3")
        return bytes(rgb)
    arr = np.asarray(rgb)
    if arr.ndim != 3 or arr.shape[2] != 3 or min(arr.shape) < 1:
        raise ValueError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    if dims is not None and tuple(dims) != arr.shape[:2]:
        raise ValueError(f"declared dims {tuple(dims)} do not match image {arr.shape[:2]}")
    return np.ascontiguousarray(arr, dtype=np.uint8).tobytes()


def unflatten_image(data: bytes, height: int, width: int) -> np.ndarray:
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3).copy()


def discretize_colors(data: bytes | np.ndarray, bits: int = 3) -> bytes:
    """Quantize every byte to ``2**bits`` evenly spaced levels spanning 0-255."""
    if not 1 <= bits <= 8:
        raise ValueError("bits must lie in 1..8")
    arr = np.frombuffer(bytes(data), dtype=np.uint8) if not isinstance(data, np.ndarray) else data.astype(np.uint8).ravel()
    level = arr.astype(np.int64) >> (8 - bits)
    # odd denominator: the scaled level is never exactly halfway between integers
    values = np.rint(level * 255.0 / (2 ** bits - 1)).astype(np.uint8)
    return values.tobytes()


def ingest_filestream(path: str | Path) -> bytes:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"filestream not found: {path}") from None
    if not data:
        raise ValueError("empty filestream")
    return data


def parse_image_mode(mode: str) -> tuple[str, int]:
    """'raw', 'filestream', 'disc' (3 bits) or 'discretized:<k>' / 'disc<k>'."""
    if mode in ("raw", "filestream"):
        return mode, 8
    match = re.fullmatch(r"disc(?:retized)?:?(\d)?", mode)
    if match:
        return "discretized", int(match.group(1) or 3)
    raise ValueError(f"unknown image mode {mode!r}")


def image_bytes(record: VqaRecord, image_mode: str) -> bytes:
    kind, bits = parse_image_mode(image_mode)
    if kind == "filestream":
        if record.filestream is None:
            raise VqaFormatError("record has no filestream")
        return record.filestream
    if record.rgb is None:
        raise VqaFormatError("record has no RGB payload")
    flat = flatten_image(record.rgb)
    return discretize_colors(flat, bits) if kind == "discretized" else flat


def assemble_vqa_sample(record: VqaRecord, length: int, image_mode: str = "raw",
                        loss_on: str = "answer") -> ByteSample:
    """Left-padded ``[image][pad][question][answer slot]`` of exactly ``length`` ids.

    The answer slot input is the pad id; its target is the answer id. With
    ``loss_on='answer'`` only the final position is in the loss mask.
    """
    image = image_bytes(record, image_mode)
    body = list(image) + [PAD_ID] + list(record.question) + [PAD_ID]
    if len(body) > length:
        raise ValueError(f"image ({len(image)} B) + question ({len(record.question)} B) exceed context {length}")
    inputs = pad_left(body, length)
    targets = inputs.copy()
    targets[-1] = record.answer_id
    if loss_on == "answer":
        mask = np.zeros(length, dtype=bool)
        mask[-1] = True
    elif loss_on == "full":
        mask = inputs != PAD_ID
        mask[-1] = True
    else:
        raise ValueError(f"loss_on must be answer or full, got {loss_on!r}")
    return ByteSample(inputs, targets, mask, {"question_type": record.question_type, "answer_id": record.answer_id})


# -- JSON-lines records ---------------------------------------------------------

def _answer_id(value) -> int:
    if isinstance(value, int):
        return value
    if isinstance(value, str) and value in ANSWER_IDS:
        return ANSWER_IDS[value]
    raise VqaFormatError(f"unknown answer {value!r}")


def read_vqa_jsonl(path: str | Path) -> list[VqaRecord]:
    """Records ``{image_path | rgb_dims + raw_path, question, answer, question_type}``.

    Relative paths resolve against the JSON-lines file's directory.
    """
    path = Path(path)
    base = path.parent
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
            rgb = filestream = None
            if "raw_path" in raw:
                h, w = raw["rgb_dims"]
                rgb = unflatten_image(flatten_image((base / raw["raw_path"]).read_bytes(), (h, w)), h, w)
            if "image_path" in raw:
                filestream = ingest_filestream(base / raw["image_path"])
            if rgb is None and filestream is None:
                raise VqaFormatError("record needs image_path or rgb_dims + raw_path")
            records.append(VqaRecord(raw["question"].encode("utf-8"), _answer_id(raw["answer"]),
                                     raw["question_type"], rgb, filestream))
        except (KeyError, ValueError, TypeError, OSError) as e:
            raise VqaFormatError(f"{path}:{lineno}: {e}") from None
    return records


# -- sample shards ----------------------------------------------------------------

def write_shard(path: str | Path, samples: Sequence[ByteSample]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(
        path,
        inputs=np.stack([s.inputs for s in samples]).astype(np.int16),
        targets=np.stack([s.targets for s in samples]).astype(np.int16),
        mask=np.stack([s.mask for s in samples]),
        question_type=np.array([s.provenance.get("question_type", "") for s in samples]),
    )
    return path if path.suffix == ".npz" else path.with_suffix(path.suffix + ".npz")


def read_shard(path: str | Path) -> list[ByteSample]:
    with np.load(Path(path)) as z:
        inputs = z["inputs"].astype(np.int64)
        targets = z["targets"].astype(np.int64)
        mask = z["mask"].astype(bool)
        qtypes = z["question_type"].tolist()
    return [
        ByteSample(i, t, m, {"question_type": q, "answer_id": int(t[-1])})
        for i, t, m, q in zip(inputs, targets, mask, qtypes)
    ]


# -- toy colored-squares generator ----------------------------------------------

PALETTE = {
    "red": (173, 35, 35),
    "blue": (42, 75, 215),
    "green": (29, 105, 20),
    "yellow": (255, 238, 51),
    "purple": (129, 38, 192),
    "cyan": (41, 208, 208),
    "brown": (129, 74, 25),
    "gray": (87, 87, 87),
}
BACKGROUND = (200, 200, 200)


def encode_ppm(rgb: np.ndarray) -> bytes:
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode() + flatten_image(rgb)


def make_toy_vqa(n: int, seed: int = 0, grid: int = 3, cell: int = 1, n_colors: int = 4,
                 p_empty: float = 0.4, noise: int = 24) -> list[VqaRecord]:
    """Colored squares on a ``grid`` x ``grid`` board with Exists / Count questions.

    ``noise`` adds uniform per-channel jitter so that raw pixels are noisy while
    3-bit discretization mostly recovers the palette.
    """
    rng = np.random.default_rng(seed)
    colors = list(PALETTE)[:n_colors]
    records = []
    for _ in range(n):
        cells = [None if rng.random() < p_empty else colors[rng.integers(n_colors)] for _ in range(grid * grid)]
        img = np.empty((grid * cell, grid * cell, 3), dtype=np.int64)
        for idx, name in enumerate(cells):
            r, c = divmod(idx, grid)
            img[r * cell:(r + 1) * cell, c * cell:(c + 1) * cell] = PALETTE[name] if name else BACKGROUND
        if noise:
            img += rng.integers(-noise, noise + 1, size=img.shape)
        img = np.clip(img, 0, 255).astype(np.uint8)
        present = sorted({c for c in cells if c})
        if rng.random() < 0.5:
            absent = [c for c in colors if c not in present]
            pick_present = bool(present) and (rng.random() < 0.5 or not absent)
            color = rng.choice(present) if pick_present else rng.choice(absent)
            question, answer, qtype = f"Is there a {color} square?", "yes" if color in present else "no", "E"
        else:
            color = rng.choice(colors)
            question, answer, qtype = f"How many {color} squares are there?", str(cells.count(color)), "C"
        records.append(VqaRecord(question.encode(), ANSWER_IDS[answer], qtype, img, encode_ppm(img)))
    return records


def write_vqa_jsonl(records: Iterable[VqaRecord], out_dir: str | Path, name: str = "records.jsonl") -> Path:
    """Write records plus their raw RGB and PPM files under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, r in enumerate(records):
        entry = {"question": r.question.decode("utf-8"), "answer": ANSWERS[r.answer_id],
                 "question_type": r.question_type}
        if r.rgb is not None:
            raw_path = f"images/{i:06d}.rgb"
            (out_dir / raw_path).write_bytes(flatten_image(r.rgb))
            entry.update(raw_path=raw_path, rgb_dims=list(r.rgb.shape[:2]))
        if r.filestream is not None:
            image_path = f"images/{i:06d}.ppm"
            (out_dir / image_path).write_bytes(r.filestream)
            entry["image_path"] = image_path
        lines.append(json.dumps(entry))
    path = out_dir / name
    path.write_text("\n".join(lines) + "\n")
    return path

