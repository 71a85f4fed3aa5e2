"""Stealthiness metrics and distribution distances."""
from __future__ import annotations

import math
from collections import Counter

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LUMA = np.array([0.299, 0.587, 0.114])


def psnr(x: np.ndarray, y: np.ndarray) -> float:
    """PSNR in dB on the unit range; identical images give +inf."""
    x, y = np.asarray(x, np.float64), np.asarray(y, np.float64)
    if x.shape != y.shape:
        raise ValueError("shape mismatch")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _luma(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, np.float64)
    return img @ LUMA if img.ndim == 3 else img


def ssim(x: np.ndarray, y: np.ndarray, win: int = 8, c1: float = 0.01**2, c2: float = 0.03**2) -> float:
    """Mean SSIM over all 8x8 sliding windows of the luma channel."""
    a, b = _luma(x), _luma(y)
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    wa, wb = sliding_window_view(a, (win, win)), sliding_window_view(b, (win, win))
    mu_a, mu_b = wa.mean(axis=(-1, -2)), wb.mean(axis=(-1, -2))
    var_a = wa.var(axis=(-1, -2))
    var_b = wb.var(axis=(-1, -2))
    cov = (wa * wb).mean(axis=(-1, -2)) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


def edit_distance(a: str, b: str) -> int:
    """Character-level Levenshtein distance."""
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def bleu(reference: str, hypothesis: str, max_n: int = 4) -> float:
    """Sentence BLEU-4 on whitespace tokens with add-one smoothing."""
    ref, hyp = reference.split(), hypothesis.split()
    if not hyp:
        return 0.0
    log_p = 0.0
    for n in range(1, max_n + 1):
        h = Counter(tuple(hyp[i : i + n]) for i in range(len(hyp) - n + 1))
        r = Counter(tuple(ref[i : i + n]) for i in range(len(ref) - n + 1))
        match = sum(min(c, r[g]) for g, c in h.items())
        total = sum(h.values())
        log_p += math.log((match + 1) / (total + 1))
    bp = 1.0 if len(hyp) >= len(ref) else math.exp(1 - len(ref) / len(hyp))
    return bp * math.exp(log_p / max_n)


def kl(p, q) -> float:
    """KL(p || q) in nats; +inf when q misses mass that p has."""
    p, q = np.asarray(p, np.float64), np.asarray(q, np.float64)
    m = p > 0
    if np.any(q[m] <= 0):
        return math.inf
    return float(np.sum(p[m] * np.log(p[m] / q[m])))


def tv(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p, np.float64) - np.asarray(q, np.float64)).sum())


def pinsker_check(p, q, tol: float = 1e-12) -> bool:
    k = kl(p, q)
    if not math.isfinite(k):
        return True
    return tv(p, q) <= math.sqrt(k / 2.0) + tol


def stealth_record(clean_img, prot_img, clean_text: str, prot_text: str) -> dict:
    return {
        "psnr_db": psnr(clean_img, prot_img),
        "ssim": ssim(clean_img, prot_img),
        "edit_distance": edit_distance(clean_text, prot_text),
        "bleu": bleu(clean_text, prot_text),
    }


def stealth_summary(records: list[dict]) -> dict:
    out = {}
    for key in ("psnr_db", "ssim", "edit_distance", "bleu"):
        vals = [r[key] for r in records]
        finite = [v for v in vals if math.isfinite(v)]
        out[key] = float(np.mean(finite)) if finite else math.inf
        out[key + "_min"] = float(min(vals)) if vals else math.nan
    return out
