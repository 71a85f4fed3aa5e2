"""Synthetic shape/color VQA data and the on-disk dataset format.

A dataset directory holds ``manifest.jsonl`` (one header record, then one row
per sample) and the referenced 32x32 RGB PNG files under ``images/``.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from .tokenizer import LEXICON, MiniTokenizer

IMAGE_SIZE = 32
N_MERGES = 200

COLORS = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.75, 0.15),
    "blue": (0.10, 0.25, 0.95),
    "yellow": (0.95, 0.90, 0.10),
    "purple": (0.55, 0.10, 0.70),
    "orange": (1.00, 0.55, 0.00),
    "pink": (1.00, 0.55, 0.80),
    "cyan": (0.10, 0.85, 0.90),
}
SHAPES = ("circle", "square", "triangle", "cross")
COLOR_TEMPLATES = (
    "what color is the {shape}?",
    "which color is the {shape}?",
    "what is the color of the {shape}?",
)
SHAPE_TEMPLATES = (
    "what shape is shown?",
    "which shape is in the image?",
    "name the shape in the picture?",
)
TEMPLATES = COLOR_TEMPLATES + SHAPE_TEMPLATES
# answer words are kept out of triggers so a trigger never spells the label
TRIGGER_WORDS = tuple(sorted(
    (set(LEXICON) | {w.strip("?") for t in TEMPLATES for w in t.split() if "{" not in w}) - set(COLORS) - set(SHAPES)
))


class DatasetError(Exception):
    pass


@dataclass
class Sample:
    id: str
    image: np.ndarray  # float64 (32, 32, 3) in [0, 1]
    text: str
    answer: str
    meta: dict = field(default_factory=dict)


@dataclass
class Dataset:
    samples: list[Sample]
    tokenizer: MiniTokenizer
    header: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def by_id(self) -> dict[str, Sample]:
        return {s.id: s for s in self.samples}


SIZE_RANGE = (18.0, 22.0)
JITTER = 1.5


def render(shape: str, color: str, cx: float, cy: float, size: float, rng: np.random.Generator) -> np.ndarray:
    """Draw one filled shape on a textured gray background."""
    n = IMAGE_SIZE
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    # low-frequency texture plus fine grain
    phase = rng.uniform(0, 2 * np.pi, size=2)
    freq = rng.uniform(0.15, 0.35, size=2)
    base = 0.45 + 0.06 * np.sin(freq[0] * xx + phase[0]) * np.cos(freq[1] * yy + phase[1])
    img = np.repeat(base[..., None], 3, axis=2) + rng.normal(0, 0.025, size=(n, n, 3))
    dx, dy = xx - cx, yy - cy
    r = size / 2
    if shape == "circle":
        mask = dx**2 + dy**2 <= r**2
    elif shape == "square":
        mask = (np.abs(dx) <= r * 0.85) & (np.abs(dy) <= r * 0.85)
    elif shape == "triangle":
        mask = (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 2)
    elif shape == "cross":
        w = r * 0.35
        mask = ((np.abs(dx) <= w) & (np.abs(dy) <= r)) | ((np.abs(dy) <= w) & (np.abs(dx) <= r))
    else:
        raise ValueError(shape)
    rgb = np.asarray(COLORS[color])
    img[mask] = rgb + rng.normal(0, 0.02, size=(int(mask.sum()), 3))
    return quantize8(np.clip(img, 0.0, 1.0))


def admissible_vocab(tok: MiniTokenizer) -> list[int]:
    """Trigger vocabulary: whole non-answer words that are single tokens."""
    return tok.admissible_ids(words=TRIGGER_WORDS)


def quantize8(img: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(img, dtype=np.float64) * 255.0) / 255.0


def make_sample(sample_id: str, rng: np.random.Generator) -> Sample:
    shape = SHAPES[rng.integers(len(SHAPES))]
    color = list(COLORS)[rng.integers(len(COLORS))]
    size = rng.uniform(SIZE_RANGE[0], SIZE_RANGE[1])
    cx, cy = IMAGE_SIZE / 2 + rng.uniform(-JITTER, JITTER, size=2)
    image = render(shape, color, cx, cy, size, rng)
    t = int(rng.integers(len(TEMPLATES)))
    text = TEMPLATES[t].format(shape=shape)
    answer = color if t < len(COLOR_TEMPLATES) else shape
    return Sample(sample_id, image, text, answer, {"shape": shape, "color": color, "template": t})


def tokenizer_corpus(samples: Iterable[Sample]) -> list[str]:
    corpus = []
    for s in samples:
        corpus.append(s.text)
        corpus.append(" " + s.answer)
    corpus.extend(" " + w for w in LEXICON for _ in range(4))
    return corpus


def generate(n_train: int, n_eval: int, seed: int) -> tuple[Dataset, Dataset]:
    if n_train < 1 or n_eval < 1:
        raise ValueError("n_train and n_eval must be >= 1")
    ss = np.random.SeedSequence(seed)
    train_ss, eval_ss = ss.spawn(2)
    train = [make_sample(f"train-{i:05d}", np.random.default_rng(s)) for i, s in enumerate(train_ss.spawn(n_train))]
    evals = [make_sample(f"eval-{i:05d}", np.random.default_rng(s)) for i, s in enumerate(eval_ss.spawn(n_eval))]
    tok = MiniTokenizer.train(tokenizer_corpus(train + evals), N_MERGES)
    header = {"generator_seed": seed, "tokenizer_hash": tok.hash, "merges": tok.to_json()}
    return Dataset(train, tok, dict(header, split="train")), Dataset(evals, tok, dict(header, split="eval"))


# ---------------------------------------------------------------- file format


def save_png(path: Path, image: np.ndarray) -> None:
    arr = np.round(np.clip(image, 0, 1) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", optimize=False, compress_level=6)


def load_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "RGB" or im.size != (IMAGE_SIZE, IMAGE_SIZE):
            raise DatasetError(f"{path}: expected {IMAGE_SIZE}x{IMAGE_SIZE} RGB, got {im.mode} {im.size}")
        return np.asarray(im, dtype=np.float64) / 255.0


def _check_out_dir(out_dir: Path, force: bool) -> None:
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise DatasetError(f"{out_dir} exists and is not empty (use --force)")


def save_dataset(ds: Dataset, out_dir: str | os.PathLike, force: bool = False, extra_header: dict | None = None) -> Path:
    out = Path(out_dir)
    _check_out_dir(out, force)
    (out / "images").mkdir(parents=True, exist_ok=True)
    header = dict(ds.header)
    header["tokenizer_hash"] = ds.tokenizer.hash
    header["merges"] = ds.tokenizer.to_json()
    if extra_header:
        header.update(extra_header)
    seen = set()
    lines = [json.dumps({"header": header}, sort_keys=True)]
    for s in ds.samples:
        if s.id in seen:
            raise DatasetError(f"duplicate id {s.id}")
        seen.add(s.id)
        rel = f"images/{s.id}.png"
        save_png(out / rel, s.image)
        row = {"id": s.id, "image": rel, "text": s.text, "answer": s.answer}
        if s.meta:
            row["meta"] = s.meta
        lines.append(json.dumps(row, sort_keys=True))
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    return out


def load_dataset(path: str | os.PathLike, skip_bad: bool = False, errors: list | None = None) -> Dataset:
    root = Path(path)
    mf = root / "manifest.jsonl"
    if not mf.is_file():
        raise DatasetError(f"{root}: missing manifest.jsonl")
    rows = [json.loads(line) for line in mf.read_text().splitlines() if line.strip()]
    if not rows or "header" not in rows[0]:
        raise DatasetError(f"{mf}: first record must be the header")
    header = rows[0]["header"]
    tok = MiniTokenizer(header["merges"])
    if tok.hash != header.get("tokenizer_hash"):
        raise DatasetError(f"{mf}: tokenizer hash mismatch")
    samples, seen = [], set()
    for row in rows[1:]:
        if row["id"] in seen:
            raise DatasetError(f"{mf}: duplicate id {row['id']}")
        seen.add(row["id"])
        try:
            image = load_png(root / row["image"])
        except (OSError, DatasetError) as exc:
            if not skip_bad:
                raise DatasetError(f"{row['id']}: {exc}") from exc
            if errors is not None:
                errors.append((row["id"], str(exc)))
            continue
        samples.append(Sample(row["id"], image, row["text"], row["answer"], row.get("meta", {})))
    return Dataset(samples, tok, header)


def gen_toy_data(n_train: int, n_eval: int, seed: int, out_dir: str | os.PathLike, force: bool = False) -> tuple[Path, Path]:
    out = Path(out_dir)
    _check_out_dir(out, force)
    train, evals = generate(n_train, n_eval, seed)
    return save_dataset(train, out / "train", force=True), save_dataset(evals, out / "eval", force=True)


def tree_digest(root: str | os.PathLike) -> str:
    """sha256 over relative paths and bytes of every file below ``root``."""
    h = hashlib.sha256()
    base = Path(root)
    for p in sorted(base.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(base)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
