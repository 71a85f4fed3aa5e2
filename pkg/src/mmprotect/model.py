"""Toy vision-language surrogate with exposed attention.

Joint sequence layout::

    [BOS] image tokens x64 [SEP] text (+ trigger) [SEP] answer [EOS]

The patch projection, positional table and token embedding table are frozen
at construction; the projector, transformer blocks and output head train.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .tokenizer import BOS, EOS, PAD, SEP

IMAGE = 32
PATCH = 4
N_PATCH = (IMAGE // PATCH) ** 2
PATCH_FEAT = PATCH * PATCH * 3
IMG_START = 1
TEXT_START = IMG_START + N_PATCH + 1
MAX_LEN = 160

FROZEN_PREFIXES = ("patch_proj.", "pos_emb", "tok_emb")
PROJECTOR_PREFIX = "projector."

CKPT_MAGIC = b"MMPCKPT1"
POS_SCALE = 1.0


class SequenceOverflow(ValueError):
    pass


class FrozenParameterError(ValueError):
    pass


# ---------------------------------------------------------------- image processor


def quantize(pixels: torch.Tensor) -> torch.Tensor:
    # torch.round is round-half-to-even
    return torch.round(pixels * 255.0) / 255.0


def process_image(pixels: torch.Tensor, mode: str = "deploy") -> torch.Tensor:
    """Quantize to the 8-bit grid and cut into 4x4 patches.

    ``pixels`` is (32, 32, 3) or (B, 32, 32, 3); returns (B?, 64, 48) with the
    patch features ordered (row, col, channel). In ``differentiable`` mode the
    forward value is identical but quantization passes gradients unchanged.
    ``continuous`` skips quantization entirely; it exists for finite-difference
    checks of the straight-through path.
    """
    if mode == "deploy":
        x = quantize(pixels.detach())
    elif mode == "differentiable":
        x = pixels + (quantize(pixels) - pixels).detach()
    elif mode == "continuous":
        x = pixels
    else:
        raise ValueError(f"unknown processor mode {mode!r}")
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    b = x.shape[0]
    g = IMAGE // PATCH
    x = x.reshape(b, g, PATCH, g, PATCH, 3).permute(0, 1, 3, 2, 4, 5).reshape(b, N_PATCH, PATCH_FEAT)
    return x[0] if squeeze else x


# ---------------------------------------------------------------- sequence layout


@dataclass(frozen=True)
class TokenPartition:
    image: tuple[int, ...]
    text: tuple[int, ...]
    trigger: tuple[int, ...]
    answer: tuple[int, ...]
    template: tuple[int, ...]

    @property
    def length(self) -> int:
        return len(self.image) + len(self.text) + len(self.trigger) + len(self.answer) + len(self.template)

    def as_dict(self) -> dict[str, list[int]]:
        return {k: list(v) for k, v in asdict(self).items()}


@dataclass(frozen=True)
class Layout:
    ids: tuple[int, ...]
    partition: TokenPartition
    target_pos: tuple[int, ...]  # positions whose next-token prediction is scored

    @property
    def length(self) -> int:
        return len(self.ids)

    @property
    def trigger_slice(self) -> slice:
        t = self.partition.trigger
        return slice(t[0], t[-1] + 1) if t else slice(0, 0)


def build_layout(text_ids: Sequence[int], answer_ids: Sequence[int], trigger_span: tuple[int, int] | None = None,
                 max_len: int = MAX_LEN) -> Layout:
    """Lay out one sample. ``trigger_span`` is a half-open range into ``text_ids``."""
    t, m = len(text_ids), len(answer_ids)
    length = TEXT_START + t + 1 + m + 1
    if length > max_len:
        raise SequenceOverflow(f"sequence length {length} exceeds {max_len}")
    ids = [BOS] + [PAD] * N_PATCH + [SEP] + list(text_ids) + [SEP] + list(answer_ids) + [EOS]
    sep2 = TEXT_START + t
    if trigger_span is not None and trigger_span[1] > trigger_span[0]:
        a, b = trigger_span
        if not (0 <= a <= b <= t):
            raise ValueError(f"trigger span {trigger_span} outside text of length {t}")
        trig = tuple(range(TEXT_START + a, TEXT_START + b))
    else:
        trig = ()
    text = tuple(p for p in range(TEXT_START, sep2) if p not in set(trig))
    part = TokenPartition(
        image=tuple(range(IMG_START, IMG_START + N_PATCH)),
        text=text,
        trigger=trig,
        answer=tuple(range(sep2 + 1, sep2 + 1 + m)),
        template=(0, IMG_START + N_PATCH, sep2, length - 1),
    )
    target_pos = tuple(range(sep2, sep2 + m + 1)) if m else ()
    return Layout(tuple(ids), part, target_pos)


# ---------------------------------------------------------------- model


def _sincos(pos: torch.Tensor, dim: int, base: float) -> torch.Tensor:
    freq = base ** (-torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    ang = pos[:, None].double() * freq[None]
    return torch.stack([ang.sin(), ang.cos()], dim=-1).reshape(len(pos), dim)


def sincos_positions(n: int, d: int) -> torch.Tensor:
    """Fixed positional table: 2-D (row, col) codes on image slots, 1-D elsewhere.

    Smooth spatial codes let shape cues generalize across small translations.
    """
    out = _sincos(torch.arange(n), d, 1000.0)
    g = IMAGE // PATCH
    idx = torch.arange(N_PATCH)
    img = torch.cat([_sincos(idx // g, d // 2, 16.0), _sincos(idx % g, d // 2, 16.0)], dim=1)
    out[IMG_START : IMG_START + N_PATCH] = img
    return out.float()


@dataclass
class ModelDims:
    vocab: int
    d: int = 32
    layers: int = 2
    heads: int = 4
    mlp: int = 128
    max_len: int = MAX_LEN


class Block(nn.Module):
    def __init__(self, d: int, heads: int, mlp: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, mlp)
        self.fc2 = nn.Linear(mlp, d)
        self.lora: nn.ParameterDict | None = None
        self.lora_scale = 1.0

    def add_low_rank(self, rank: int, gen: torch.Generator) -> None:
        d = self.proj.in_features
        dt = self.proj.weight.dtype
        self.lora = nn.ParameterDict({
            "q_a": nn.Parameter(torch.randn(d, rank, generator=gen, dtype=dt) / math.sqrt(d)),
            "q_b": nn.Parameter(torch.zeros(rank, d, dtype=dt)),
            "v_a": nn.Parameter(torch.randn(d, rank, generator=gen, dtype=dt) / math.sqrt(d)),
            "v_b": nn.Parameter(torch.zeros(rank, d, dtype=dt)),
        })
        self.lora_scale = 2.0 / rank

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, n, d = x.shape
        h = self.ln1(x)
        q, k, v = self.qkv(h).split(d, dim=-1)
        if self.lora is not None:
            q = q + (h @ self.lora["q_a"] @ self.lora["q_b"]) * self.lora_scale
            v = v + (h @ self.lora["v_a"] @ self.lora["v_b"]) * self.lora_scale
        hd = d // self.heads
        q = q.view(b, n, self.heads, hd).transpose(1, 2)
        k = k.view(b, n, self.heads, hd).transpose(1, 2)
        v = v.view(b, n, self.heads, hd).transpose(1, 2)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
        attn = torch.softmax(scores.masked_fill(mask, float("-inf")), dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, n, d)
        x = x + self.proj(y)
        x = x + self.fc2(F.gelu(self.fc1(self.ln2(x))))
        return x, attn


class SurrogateModel(nn.Module):
    def __init__(self, dims: ModelDims, seed: int = 0):
        super().__init__()
        self.dims = dims
        self.seed = seed
        d = dims.d
        self.patch_proj = nn.Linear(PATCH_FEAT, d)
        self.pos_emb = nn.Parameter(torch.zeros(dims.max_len, d))
        self.tok_emb = nn.Parameter(torch.zeros(dims.vocab, d))
        self.projector = nn.Linear(d, d)
        self.blocks = nn.ModuleList(Block(d, dims.heads, dims.mlp) for _ in range(dims.layers))
        self.ln_f = nn.LayerNorm(d)
        self.head = nn.Linear(d, dims.vocab)
        self._init(seed)
        for name, p in self.named_parameters():
            if is_frozen(name):
                p.requires_grad_(False)
        self._masks: dict[tuple[int, torch.device], torch.Tensor] = {}

    def _init(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name == "tok_emb":
                    p.copy_(torch.randn(p.shape, generator=gen) * 0.5)
                elif name == "pos_emb":
                    p.copy_(sincos_positions(p.shape[0], p.shape[1]) * POS_SCALE)
                elif name.endswith("weight") and p.dim() == 2:
                    p.copy_(torch.randn(p.shape, generator=gen) / math.sqrt(p.shape[1]))
                elif ".ln" in name or name.startswith("ln_f"):
                    p.fill_(1.0 if name.endswith("weight") else 0.0)
                else:
                    p.zero_()

    def _causal(self, n: int) -> torch.Tensor:
        key = (n, self.pos_emb.device)
        m = self._masks.get(key)
        if m is None:
            m = torch.ones(n, n, dtype=torch.bool, device=self.pos_emb.device).triu(1)
            self._masks[key] = m
        return m

    def embed(self, pixels: torch.Tensor, ids: torch.Tensor, mode: str = "deploy") -> torch.Tensor:
        """Token embeddings before positional encoding, with image slots filled in."""
        feats = process_image(pixels.to(self.pos_emb.dtype), mode)
        img = self.projector(self.patch_proj(feats))
        tok = self.tok_emb[ids]
        return torch.cat([tok[:, :IMG_START], img, tok[:, IMG_START + N_PATCH:]], dim=1)

    def forward(self, pixels: torch.Tensor, ids: torch.Tensor, mode: str = "deploy",
                embeds: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns logits (B, L, V) and attention (B, layers, heads, L, L)."""
        if embeds is None:
            embeds = self.embed(pixels, ids, mode)
        n = embeds.shape[1]
        if n > self.dims.max_len:
            raise SequenceOverflow(f"sequence length {n} exceeds {self.dims.max_len}")
        x = embeds + self.pos_emb[:n]
        mask = self._causal(n)
        attns = []
        for blk in self.blocks:
            x, a = blk(x, mask)
            attns.append(a)
        return self.head(self.ln_f(x)), torch.stack(attns, dim=1)

    # parameter bookkeeping
    def trainable(self) -> dict[str, nn.Parameter]:
        return {n: p for n, p in self.named_parameters() if not is_frozen(n)}

    def add_low_rank(self, rank: int, seed: int = 0) -> None:
        gen = torch.Generator().manual_seed(seed)
        for blk in self.blocks:
            blk.add_low_rank(rank, gen)


def is_frozen(name: str) -> bool:
    return name.startswith(FROZEN_PREFIXES)


def build_model(vocab: int, seed: int = 0, **dims) -> SurrogateModel:
    return SurrogateModel(ModelDims(vocab=vocab, **dims), seed=seed)


# ---------------------------------------------------------------- traces


@dataclass
class ForwardTrace:
    logits: torch.Tensor  # (L, V)
    attention: torch.Tensor  # (layers, heads, L, L)
    partition: TokenPartition
    loss: torch.Tensor  # scalar


@dataclass
class BatchOutput:
    logits: torch.Tensor
    attention: torch.Tensor
    losses: torch.Tensor  # (B,)
    layouts: list[Layout]

    def trace(self, i: int) -> ForwardTrace:
        n = self.layouts[i].length
        return ForwardTrace(self.logits[i, :n], self.attention[i, :, :, :n, :n], self.layouts[i].partition, self.losses[i])


def pad_ids(layouts: Sequence[Layout]) -> torch.Tensor:
    n = max(l.length for l in layouts)
    out = torch.full((len(layouts), n), PAD, dtype=torch.long)
    for i, l in enumerate(layouts):
        out[i, : l.length] = torch.tensor(l.ids)
    return out


def answer_nll(logits: torch.Tensor, layouts: Sequence[Layout], ids: torch.Tensor) -> torch.Tensor:
    """Mean next-token NLL over each layout's answer targets (0 when none)."""
    b, n, _ = logits.shape
    target = torch.full((b, n), -100, dtype=torch.long)
    for i, l in enumerate(layouts):
        if l.target_pos:
            pos = torch.tensor(l.target_pos)
            target[i, pos] = ids[i, pos + 1]
    nll = F.cross_entropy(logits.reshape(b * n, -1), target.reshape(-1), ignore_index=-100, reduction="none").view(b, n)
    counts = (target != -100).sum(1)
    return nll.sum(1) / counts.clamp(min=1)


def run_batch(model: SurrogateModel, pixels: torch.Tensor, layouts: Sequence[Layout], mode: str = "deploy",
              embeds: torch.Tensor | None = None) -> BatchOutput:
    """Teacher-forced forward over right-padded layouts.

    Right padding is safe without a key mask: under the causal mask no real
    position can attend to a later pad.
    """
    ids = pad_ids(layouts)
    if pixels.dim() == 3:
        pixels = pixels.unsqueeze(0)
    logits, attn = model(pixels, ids, mode, embeds=embeds)
    return BatchOutput(logits, attn, answer_nll(logits, layouts, ids), list(layouts))


def forward(model: SurrogateModel, image, text_ids: Sequence[int], trigger_span: tuple[int, int] | None,
            answer_ids: Sequence[int], mode: str = "deploy") -> ForwardTrace:
    layout = build_layout(text_ids, answer_ids, trigger_span, model.dims.max_len)
    pixels = torch.as_tensor(np.asarray(image), dtype=model.pos_emb.dtype)
    return run_batch(model, pixels, [layout], mode).trace(0)


# ---------------------------------------------------------------- gradients


LEAVES = ("pixels", "trigger", "theta")


def gradients(model: SurrogateModel, image, layout: Layout, loss_fn: Callable[[ForwardTrace], torch.Tensor],
              leaves: Iterable[str], mode: str = "differentiable") -> dict:
    """Reverse-mode gradients of ``loss_fn(trace)`` for the requested leaves.

    Returns a dict holding only the requested keys: ``pixels`` (32, 32, 3),
    ``trigger`` (n_trigger, d) and ``theta`` (name -> tensor over trainable
    parameters). The returned ``loss`` entry is the detached scalar.
    """
    leaves = set(leaves)
    unknown = leaves - set(LEAVES)
    if unknown:
        raise ValueError(f"unknown leaves {sorted(unknown)}")
    if "pixels" in leaves and mode != "differentiable":
        raise ValueError("pixel gradients require the differentiable processor")
    dt = model.pos_emb.dtype
    pixels = torch.as_tensor(np.asarray(image), dtype=dt).clone().unsqueeze(0)
    if "pixels" in leaves:
        pixels.requires_grad_(True)
    ids = pad_ids([layout])
    embeds = model.embed(pixels, ids, mode)
    trig = None
    if "trigger" in leaves:
        sl = layout.trigger_slice
        trig = embeds[:, sl].detach().clone().requires_grad_(True)
        embeds = torch.cat([embeds[:, : sl.start], trig, embeds[:, sl.stop:]], dim=1)
    out = run_batch(model, pixels, [layout], mode, embeds=embeds)
    loss = loss_fn(out.trace(0))
    targets: list[torch.Tensor] = []
    names: list[str] = []
    if "pixels" in leaves:
        targets.append(pixels)
        names.append("pixels")
    if trig is not None:
        targets.append(trig)
        names.append("trigger")
    theta = model.trainable() if "theta" in leaves else {}
    targets.extend(theta.values())
    result: dict = {"loss": loss.detach()}
    if not targets:
        return result
    if loss.requires_grad:
        grads = torch.autograd.grad(loss, targets, allow_unused=True)
    else:
        grads = [None] * len(targets)
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(targets, grads)]
    for name, g in zip(names, grads):
        result[name] = g[0]
    if theta:
        result["theta"] = dict(zip(theta.keys(), grads[len(names):]))
    return result


def sgd_step(model: SurrogateModel, grads: Mapping[str, torch.Tensor], lr: float,
             mask: Iterable[str] | None = None) -> SurrogateModel:
    """In-place ``p -= lr * grad`` over the masked trainable parameters."""
    params = dict(model.named_parameters())
    names = list(grads) if mask is None else list(mask)
    bad = [n for n in names if is_frozen(n)]
    if bad:
        raise FrozenParameterError(f"mask touches frozen parameters: {bad}")
    with torch.no_grad():
        for n in names:
            if n not in params:
                raise KeyError(n)
            g = grads.get(n)
            if g is not None and lr != 0:
                params[n].sub_(lr * g)
    return model


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: SurrogateModel, path: str | Path, tokenizer_hash: str = "") -> None:
    """Write magic, u64 header length, JSON header, then little-endian f32 parameters.

    Parameters appear in ``state_dict`` order, each flattened row-major; the
    header's ``fields`` list records (name, shape) in that same order.
    """
    sd = model.state_dict()
    header = {
        "format": 1,
        "dims": asdict(model.dims),
        "seed": model.seed,
        "tokenizer_hash": tokenizer_hash,
        "low_rank": model.blocks[0].lora["q_a"].shape[1] if model.blocks[0].lora is not None else 0,
        "fields": [[k, list(v.shape)] for k, v in sd.items()],
    }
    hb = json.dumps(header, sort_keys=True).encode()
    blob = b"".join(v.detach().cpu().numpy().astype("<f4").tobytes() for v in sd.values())
    Path(path).write_bytes(CKPT_MAGIC + struct.pack("<Q", len(hb)) + hb + blob)


def load_checkpoint(path: str | Path) -> tuple[SurrogateModel, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen])
    model = SurrogateModel(ModelDims(**header["dims"]), seed=header["seed"])
    if header.get("low_rank"):
        model.add_low_rank(header["low_rank"], seed=header["seed"])
    off = 16 + hlen
    sd = {}
    for name, shape in header["fields"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
        sd[name] = torch.from_numpy(arr.astype(np.float32))
        off += 4 * count
    model.load_state_dict(sd)
    return model, header
