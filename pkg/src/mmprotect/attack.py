"""Attacker simulation: fine-tuning recipes, data transformations, mixing and evaluation."""
from __future__ import annotations

import copy
import math
import re
import string
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .config import AttackConfig
from .data import Dataset, Sample
from .model import SurrogateModel, build_layout, run_batch
from .tokenizer import BOS, EOS, PAD, SEP, MiniTokenizer

IMAGE_OPS = ("quantize4", "blur3", "croppad2")
TEXT_OPS = ("punct", "case", "whitespace")
_PUNCT_RE = re.compile("[" + re.escape(string.punctuation) + "]")
_WS_RE = re.compile(r"\s+")


# ---------------------------------------------------------------- transforms


def parse_transforms(spec: str | Sequence[str] | None) -> tuple[str, ...]:
    if not spec:
        return ()
    ops = tuple(o.strip() for o in spec.split(",")) if isinstance(spec, str) else tuple(spec)
    ops = tuple(o for o in ops if o)
    bad = [o for o in ops if o not in IMAGE_OPS + TEXT_OPS]
    if bad:
        raise ValueError(f"unknown transforms {bad}")
    return ops


def blur3(img: np.ndarray) -> np.ndarray:
    p = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="reflect")
    h, w = img.shape[:2]
    return sum(p[i : i + h, j : j + w] for i in range(3) for j in range(3)) / 9.0


def croppad2(img: np.ndarray) -> np.ndarray:
    out = np.zeros_like(img)
    out[2:-2, 2:-2] = img[2:-2, 2:-2]
    return out


def transform_image(img: np.ndarray, op: str) -> np.ndarray:
    if op == "quantize4":
        return np.round(img * 15.0) / 15.0
    if op == "blur3":
        return blur3(img)
    if op == "croppad2":
        return croppad2(img)
    raise ValueError(op)


def transform_text(text: str, op: str) -> str:
    if op == "punct":
        return _PUNCT_RE.sub("", text)
    if op == "case":
        return text.lower()
    if op == "whitespace":
        return _WS_RE.sub(" ", text).strip()
    raise ValueError(op)


def apply_transforms(sample: Sample, ops: Sequence[str]) -> Sample:
    """Apply ops in order; the answer is never touched."""
    img, text = sample.image, sample.text
    for op in parse_transforms(ops):
        if op in IMAGE_OPS:
            img = transform_image(img, op)
        else:
            text = transform_text(text, op)
    return Sample(sample.id, img, text, sample.answer, dict(sample.meta))


def normalize_answer(s: str) -> str:
    return _PUNCT_RE.sub("", s.lower()).strip()


# ---------------------------------------------------------------- mixing


def mix(protected: Dataset, clean: Dataset, ratio: float, seed: int = 0) -> Dataset:
    """Keep ceil(ratio * n) protected samples (seeded choice), clean ones elsewhere."""
    if not 0 <= ratio <= 1:
        raise ValueError("ratio must lie in [0, 1]")
    p_map = protected.by_id()
    if set(p_map) != {s.id for s in clean}:
        raise ValueError("protected and clean sets must share ids")
    n = len(clean)
    k = math.ceil(ratio * n - 1e-12)
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(n, size=k, replace=False).tolist()) if k else set()
    samples = [p_map[s.id] if i in chosen else s for i, s in enumerate(clean.samples)]
    return Dataset(samples, clean.tokenizer, dict(clean.header, mix_ratio=ratio))


# ---------------------------------------------------------------- fine-tuning


def recipe_parameters(model: SurrogateModel, cfg: AttackConfig) -> list[str]:
    if cfg.recipe == "full":
        return [n for n in model.trainable() if ".lora." not in n]
    if cfg.recipe == "projector_only":
        return [n for n in model.trainable() if n.startswith("projector.")]
    if cfg.recipe == "low_rank":
        return [n for n in model.trainable() if ".lora." in n]
    raise ValueError(cfg.recipe)


def training_batches(tok: MiniTokenizer, dataset: Dataset):
    pixels, layouts = [], []
    for s in dataset:
        ans = tok.encode(" " + s.answer) if s.answer else []
        layouts.append(build_layout(tok.encode(s.text), ans))
        pixels.append(s.image)
    return np.stack(pixels), layouts


def finetune(model: SurrogateModel, dataset: Dataset, cfg: AttackConfig) -> tuple[SurrogateModel, list[float]]:
    """Adam fine-tuning under a recipe mask. Returns the new model and per-step losses."""
    model = copy.deepcopy(model)
    if cfg.recipe == "low_rank" and model.blocks[0].lora is None:
        model.add_low_rank(cfg.rank, seed=cfg.seed)
    names = set(recipe_parameters(model, cfg))
    params = [p for n, p in model.named_parameters() if n in names]
    for n, p in model.named_parameters():
        p.requires_grad_(n in names)
    curve: list[float] = []
    if cfg.epochs == 0 or len(dataset) == 0:
        return model, curve
    pixels, layouts = training_batches(dataset.tokenizer, dataset)
    pixels = torch.as_tensor(pixels, dtype=model.pos_emb.dtype)
    opt = torch.optim.Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    n = len(layouts)
    model.train()
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            out = run_batch(model, pixels[idx], [layouts[i] for i in idx])
            loss = out.losses.mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            curve.append(float(loss.detach()))
    model.eval()
    return model, curve


# ---------------------------------------------------------------- evaluation


@torch.no_grad()
def generate_answers(model: SurrogateModel, dataset: Dataset, max_new_tokens: int = 8) -> list[str]:
    """Greedy decoding after ``[BOS] image [SEP] text [SEP]``, batched by prefix length."""
    tok = dataset.tokenizer
    prefixes = []
    for s in dataset:
        lay = build_layout(tok.encode(s.text), [])
        prefixes.append(list(lay.ids[:-1]))  # drop EOS, keep second SEP
    groups: dict[int, list[int]] = {}
    for i, p in enumerate(prefixes):
        groups.setdefault(len(p), []).append(i)
    answers = [""] * len(prefixes)
    dt = model.pos_emb.dtype
    for _, members in sorted(groups.items()):
        ids = torch.tensor([prefixes[i] for i in members], dtype=torch.long)
        pixels = torch.as_tensor(np.stack([dataset.samples[i].image for i in members]), dtype=dt)
        out_tokens = [[] for _ in members]
        done = [False] * len(members)
        for _ in range(max_new_tokens):
            if ids.shape[1] > model.dims.max_len:
                break
            logits, _ = model(pixels, ids)
            nxt = logits[:, -1].argmax(-1)
            for b, t in enumerate(nxt.tolist()):
                if done[b]:
                    continue
                if t in (EOS, PAD, BOS, SEP):
                    done[b] = True
                else:
                    out_tokens[b].append(t)
            if all(done):
                break
            ids = torch.cat([ids, nxt.unsqueeze(1)], dim=1)
        for b, i in enumerate(members):
            answers[i] = tok.decode(out_tokens[b])
    return answers


def evaluate_accuracy(model: SurrogateModel, dataset: Dataset, max_new_tokens: int = 8) -> float:
    """Normalized exact match of greedy answers against gold."""
    if len(dataset) == 0:
        return 0.0
    preds = generate_answers(model, dataset, max_new_tokens)
    hits = sum(normalize_answer(p) == normalize_answer(s.answer) for p, s in zip(preds, dataset))
    return hits / len(dataset)


def accuracy_drop(clean_ft_acc: float, protected_ft_acc: float) -> float:
    for v in (clean_ft_acc, protected_ft_acc):
        if not 0 <= v <= 1:
            raise ValueError("accuracies must lie in [0, 1]")
    return clean_ft_acc - protected_ft_acc


@dataclass
class AttackReport:
    accuracy: float
    loss_curve: list[float]
    recipe: dict
    transforms: list[str]
    mix_ratio: float
    n_train: int
    n_eval: int
    clean_ft_accuracy: float | None = None
    delta_acc: float | None = None
    clean_loss_curve: list[float] | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def final_train_loss(self) -> float:
        return final_loss(self.loss_curve)

    def to_json(self) -> dict:
        d = dict(self.__dict__)
        d["final_train_loss"] = self.final_train_loss
        if self.clean_loss_curve is not None:
            d["clean_final_train_loss"] = final_loss(self.clean_loss_curve)
        return d


def final_loss(curve: Sequence[float], window: int = 16) -> float:
    """Mean of the last ``window`` steps (about one epoch at the default batch size)."""
    if not curve:
        return math.nan
    return float(np.mean(curve[-window:]))


def run_attack(base: SurrogateModel, train: Dataset, eval_set: Dataset, cfg: AttackConfig,
               clean_train: Dataset | None = None, max_new_tokens: int = 8) -> tuple[AttackReport, SurrogateModel]:
    """Transform, optionally mix with clean data, fine-tune and score on clean eval."""
    data = train
    if clean_train is not None and cfg.mix_ratio < 1:
        data = mix(train, clean_train, cfg.mix_ratio, cfg.seed)
    ops = parse_transforms(cfg.transforms)
    data = Dataset([apply_transforms(s, ops) for s in data], data.tokenizer, data.header)
    model, curve = finetune(base, data, cfg)
    acc = evaluate_accuracy(model, eval_set, max_new_tokens)
    report = AttackReport(acc, curve, cfg.model_dump(mode="json"), list(ops), cfg.mix_ratio, len(data), len(eval_set))
    return report, model
