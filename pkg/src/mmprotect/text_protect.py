"""Discrete trigger search: insertion, HotFlip screening, exact verification."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .tokenizer import MiniTokenizer

log = logging.getLogger(__name__)


@dataclass
class Trigger:
    tokens: list[int] = field(default_factory=list)
    position: str | int = "append"  # "append", "prepend" or an insertion index


def insertion_index(n_text: int, position: str | int) -> int:
    if position == "append":
        return n_text
    if position == "prepend":
        return 0
    if isinstance(position, int) and 0 <= position <= n_text:
        return position
    raise ValueError(f"insertion position {position!r} invalid for text of length {n_text}")


def insert(text_ids: Sequence[int], trigger: Trigger) -> tuple[list[int], tuple[int, int]]:
    """Insert the trigger without replacing anything; returns ids and the half-open span."""
    k = insertion_index(len(text_ids), trigger.position)
    ids = list(text_ids[:k]) + list(trigger.tokens) + list(text_ids[k:])
    return ids, (k, k + len(trigger.tokens))


def remove_span(ids: Sequence[int], span: tuple[int, int]) -> list[int]:
    return list(ids[: span[0]]) + list(ids[span[1]:])


def is_feasible(trigger: Trigger, admissible: set[int], max_len: int) -> bool:
    return len(trigger.tokens) <= max_len and all(t in admissible for t in trigger.tokens)


# ---------------------------------------------------------------- surface strings


def surface(tok: MiniTokenizer, text_ids: Sequence[int], trigger: Trigger) -> tuple[str, tuple[int, int]]:
    """Released text and the character span the trigger occupies in it."""
    ids, (a, b) = insert(text_ids, trigger)
    start = len(tok.decode(ids[:a]))
    return tok.decode(ids), (start, start + len(tok.decode(ids[a:b])))


def retokenize(tok: MiniTokenizer, text: str, char_span: tuple[int, int]) -> tuple[list[int], tuple[int, int]]:
    """Encode a released string and locate the tokens overlapping the trigger characters.

    Boundary merges can fold trigger characters into a neighbouring token; such a
    token counts as part of the trigger span.
    """
    ids = tok.encode(text)
    c0, c1 = char_span
    if c1 <= c0:
        return ids, (0, 0)
    pos, first, last = 0, None, None
    for i, t in enumerate(ids):
        end = pos + len(tok.token_string(t))
        if end > c0 and pos < c1:
            first = i if first is None else first
            last = i
        pos = end
    return ids, (first, last + 1)


# ---------------------------------------------------------------- screening


def hotflip_scores(grad: np.ndarray, current_id: int, candidates: Sequence[int], embeddings: np.ndarray) -> dict[int, float]:
    """First-order loss change (e_v - e_current) . grad for each candidate."""
    grad = np.asarray(grad, np.float64)
    emb = np.asarray(embeddings, np.float64)
    cand = list(candidates)
    s = (emb[cand] - emb[current_id]) @ grad
    out = {v: float(x) for v, x in zip(cand, s)}
    if current_id in out:
        out[current_id] = 0.0
    return out


def screen_candidates(scores: Mapping[int, float], k: int) -> list[int]:
    """The k most negative scores, ties broken by ascending id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return sorted(scores, key=lambda v: (scores[v], v))[:k]


def verify_candidates(current: int, shortlist: Sequence[int],
                      loss_evaluator: Callable[[list[int]], Sequence[float]]) -> tuple[int, dict[int, float]]:
    """Exact argmin over the shortlist plus the incumbent.

    ``loss_evaluator`` maps a candidate list to exact losses; a non-finite loss
    (e.g. an overflowing re-tokenization) drops the candidate. Ties keep the
    incumbent, then prefer the lower id.
    """
    cands = [current] + sorted(set(shortlist) - {current})
    losses = dict(zip(cands, (float(x) for x in loss_evaluator(cands))))
    valid = {v: l for v, l in losses.items() if math.isfinite(l)}
    if not valid:
        return current, losses
    best = min(valid, key=lambda v: (valid[v], v != current, v))
    return best, losses


# ---------------------------------------------------------------- optimality-gap oracle


def lemma1_oracle(trials: int, seed: int = 0, k: int = 1, vocab: int = 80, dim: int = 8,
                  score_fn: Callable = hotflip_scores, target: str = "random") -> dict:
    """Screen-and-verify against exhaustive search on l(e) = 0.5 * ||e - e*||^2.

    The loss is 1-smooth, so the gap must stay below R^2 with
    R = max_v ||e_v - e_current||. ``target="embedding"`` places e* on a
    vocabulary embedding; ``"random"`` draws it far from the cloud so that the
    gradient dominates the curvature.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    gaps, radii, violations, zero_when_exhaustive = [], [], 0, True
    for _ in range(trials):
        emb = rng.normal(size=(vocab, dim))
        cur = int(rng.integers(vocab))
        if target == "embedding":
            e_star = emb[int(rng.integers(vocab))].copy()
        else:
            e_star = rng.normal(size=dim) * rng.uniform(0.5, 6.0)
        loss = lambda v: 0.5 * float(np.sum((emb[v] - e_star) ** 2))
        grad = emb[cur] - e_star
        cands = [v for v in range(vocab)]
        scores = score_fn(grad, cur, cands, emb)
        shortlist = screen_candidates(scores, k)
        chosen, _ = verify_candidates(cur, shortlist, lambda vs: [loss(v) for v in vs])
        best = min(loss(v) for v in cands)
        r_emb = float(np.max(np.linalg.norm(emb - emb[cur], axis=1)))
        gap = loss(chosen) - best
        gaps.append(gap)
        radii.append(r_emb)
        if gap > r_emb**2 + 1e-12:
            violations += 1
        if k >= vocab and gap != 0.0:
            zero_when_exhaustive = False
    return {
        "trials": trials,
        "k": k,
        "max_gap": float(max(gaps)),
        "max_gap_over_bound": float(max(g / r**2 for g, r in zip(gaps, radii))),
        "violations": violations,
        "holds": violations == 0 and zero_when_exhaustive,
        "gaps": gaps,
    }


def exhaustive_argmin(candidates: Sequence[int], loss_evaluator: Callable[[list[int]], Sequence[float]]) -> int:
    cands = sorted(candidates)
    losses = list(loss_evaluator(cands))
    return cands[int(np.argmin(losses))]
