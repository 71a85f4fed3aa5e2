"""Executable oracle suites for the formal guarantees and the autodiff paths.

Each suite returns a report dict with at least ``suite``, ``passed`` and
``seconds``; ``run_verify`` runs a selection and aggregates.
"""
from __future__ import annotations

import math
import time
from typing import Callable

import numpy as np
import torch

from . import text_protect as tp
from .binding import (BindingWeights, bph_loss, contrastive_identity_check, joint_loss, select_perturbation_tokens,
                      tv_bound_check, tv_bound_from_distributions)
from .metrics import kl, pinsker_check, tv
from .model import IMG_START, N_PATCH, build_layout, build_model, gradients, pad_ids, run_batch

SUITES = ("lemma1", "proposition", "theorem", "gradients", "pinsker")


def random_stack(rng: np.random.Generator, layers: int, heads: int, n: int, sparsity: float = 0.0) -> np.ndarray:
    """Row-stochastic (layers, heads, n, n) stack, optionally with zeroed entries."""
    logits = rng.normal(size=(layers, heads, n, n)) * rng.uniform(0.5, 3.0)
    a = np.exp(logits - logits.max(-1, keepdims=True))
    if sparsity:
        a = a * (rng.random(a.shape) >= sparsity)
        a[..., 0] += (a.sum(-1) == 0)
    return a / a.sum(-1, keepdims=True)


# ---------------------------------------------------------------- suites


def suite_lemma1(seed: int = 0, trials: int = 1000, score_fn: Callable = tp.hotflip_scores) -> dict:
    vocab = 80
    res_k1 = tp.lemma1_oracle(trials, seed=seed, k=1, vocab=vocab, score_fn=score_fn)
    res_emb = tp.lemma1_oracle(trials // 4, seed=seed + 1, k=4, vocab=vocab, score_fn=score_fn, target="embedding")
    res_full = tp.lemma1_oracle(trials // 10, seed=seed + 2, k=vocab, vocab=vocab, score_fn=score_fn)
    full_zero = res_full["max_gap"] == 0.0
    passed = res_k1["holds"] and res_emb["holds"] and res_full["holds"] and full_zero
    return {
        "passed": bool(passed),
        "trials": trials,
        "k1_max_gap_over_bound": res_k1["max_gap_over_bound"],
        "k1_violations": res_k1["violations"],
        "embedding_target_violations": res_emb["violations"],
        "exhaustive_max_gap": res_full["max_gap"],
    }


def suite_proposition(seed: int = 0, trials: int = 100) -> dict:
    rng = np.random.default_rng(seed)
    gaps, inapplicable = [], 0
    for _ in range(trials):
        n = int(rng.integers(6, 24))
        layers = int(rng.integers(1, 4))
        a = random_stack(rng, layers, int(rng.integers(1, 5)), n)
        src = sorted(rng.choice(n, size=int(rng.integers(1, n // 2 + 1)), replace=False).tolist())
        tgt = sorted(rng.choice(n, size=int(rng.integers(1, n // 2 + 1)), replace=False).tolist())
        rep = contrastive_identity_check(a, src, tgt, list(range(layers)))
        if rep["status"] == "inapplicable":
            inapplicable += 1
            continue
        gaps.append(rep["gap"])
    max_gap = float(max(gaps)) if gaps else math.nan
    return {"passed": bool(gaps) and max_gap <= 1e-9, "trials": trials, "max_gap": max_gap,
            "inapplicable": inapplicable}


def _synthetic_theorem_case(rng: np.random.Generator) -> dict:
    """Random protected/clean layer distributions; the clean side is zero on the target set."""
    n = int(rng.integers(6, 30))
    layers = int(rng.integers(1, 4))
    m = int(rng.integers(1, max(2, n // 3)))
    target = sorted(rng.choice(n, size=m, replace=False).tolist())
    prot, clean = [], []
    for _ in range(layers):
        p = rng.dirichlet(np.full(n, rng.uniform(0.2, 2.0)))
        # pull a random share of the mass onto the target set
        share = rng.uniform(0.0, 1.0)
        on = np.zeros(n)
        on[target] = rng.dirichlet(np.ones(m))
        p = (1 - share) * p + share * on
        q = rng.dirichlet(np.ones(n))
        q[target] = 0.0
        q /= q.sum()
        prot.append(torch.as_tensor(p))
        clean.append(torch.as_tensor(q))
    return tv_bound_from_distributions(prot, clean, target)


def theorem_on_release(tok, results, cfg, base) -> list[dict]:
    """Bound check for released samples under the inner-adapted surrogate.

    The target set is the trigger plus the perturbation tokens: both exist
    only on the protected side.
    """
    from .optimizer import answer_ids, clean_traces, inner_adapt

    reports = []
    for r in results:
        ids, span = tp.retokenize(tok, r.released_text, r.trigger_chars)
        lay = build_layout(ids, answer_ids(tok, r.clean.answer), span)
        model = inner_adapt(base, [(r.released_image, lay)], cfg.inner_steps, cfg.inner_lr, cfg.inner_low_rank)
        with torch.no_grad():
            px = torch.as_tensor(r.released_image, dtype=model.pos_emb.dtype)
            prot = run_batch(model, px, [lay]).trace(0)
        clean = clean_traces(tok, r.clean, [model])[0]
        omega = select_perturbation_tokens(r.released_image - r.clean.image, cfg.tau_delta)
        target = sorted(set(prot.partition.trigger) | set(omega))
        rep = tv_bound_check(prot.attention, prot.partition, clean.attention, clean.partition, target, cfg.layers)
        rep["id"] = r.id
        reports.append(rep)
    return reports


def protected_theorem_cases(n_samples: int = 5, seed: int = 0) -> list[dict]:
    """Protect a few toy samples with a short schedule and check the bound on them."""
    from .config import ProtectionConfig
    from .data import admissible_vocab, generate
    from .optimizer import protect_sample

    train, _ = generate(n_samples, 1, seed)
    tok = train.tokenizer
    cfg = ProtectionConfig(rounds=2, surrogate_seeds=(seed,), seed=seed)
    base = build_model(tok.vocab_size, seed)
    base.eval()
    admissible = admissible_vocab(tok)
    results = [protect_sample(tok, s, [base], cfg, admissible) for s in train]
    return theorem_on_release(tok, results, cfg, base)


def suite_theorem(seed: int = 0, trials: int = 100, n_protected: int = 5) -> dict:
    rng = np.random.default_rng(seed)
    synthetic = [_synthetic_theorem_case(rng) for _ in range(trials)]
    protected = protected_theorem_cases(n_protected, seed) if n_protected else []
    n_ok = sum(r["holds"] for r in synthetic)
    p_ok = sum(r["holds"] for r in protected)
    return {
        "passed": n_ok == trials and p_ok == len(protected),
        "synthetic_holds": n_ok,
        "synthetic_trials": trials,
        "protected_holds": p_ok,
        "protected_samples": len(protected),
        "min_margin_synthetic": float(min(r["mean_tv"] - r["bound"] for r in synthetic)),
        "protected": [{k: r[k] for k in ("id", "eta", "mean_tv", "bound", "holds")} for r in protected],
    }


def _rel_err(a: float, b: float, floor: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def gradient_check(seed: int = 0, coords: int = 50, step: float = 1e-4, rtol: float = 1e-3,
                   floor: float = 1e-5) -> dict:
    """Reverse-mode vs central differences for pixel, trigger-embedding and parameter leaves.

    Runs in float64 on the joint BPH objective. Pixel differences use the
    continuous processor at an 8-bit image, where the straight-through
    gradient coincides with the true derivative.
    """
    rng = np.random.default_rng(seed)
    model = build_model(40, seed).double()
    model.eval()
    img = np.round(rng.uniform(0.1, 0.9, size=(32, 32, 3)) * 255) / 255
    text = rng.integers(4, 40, size=6).tolist()
    layout = build_layout(text + [10, 11, 12], [20, 21], (6, 9))
    omega = tuple(IMG_START + b for b in sorted(rng.choice(N_PATCH, 16, replace=False).tolist()))
    weights = BindingWeights()

    def objective(trace):
        bind = bph_loss(trace.attention, trace.partition, omega, weights)
        return joint_loss(trace.loss, bind, 1.0, 1.0)

    rev = gradients(model, img, layout, objective, ("pixels", "trigger", "theta"), mode="differentiable")

    def loss_at(pixels=None, embeds=None) -> float:
        px = torch.as_tensor(img if pixels is None else pixels, dtype=torch.float64)
        with torch.no_grad():
            out = run_batch(model, px, [layout], "continuous", embeds=embeds)
            return float(objective(out.trace(0)))

    report: dict = {}
    # pixels
    errs = []
    flat = rng.choice(img.size, coords, replace=False)
    g_rev = rev["pixels"].numpy().reshape(-1)
    for i in flat:
        up, dn = img.copy().reshape(-1), img.copy().reshape(-1)
        up[i] += step
        dn[i] -= step
        fd = (loss_at(up.reshape(img.shape)) - loss_at(dn.reshape(img.shape))) / (2 * step)
        errs.append(_rel_err(float(g_rev[i]), fd, floor))
    report["pixels"] = errs
    # trigger embeddings
    px = torch.as_tensor(img, dtype=torch.float64)
    with torch.no_grad():
        base_emb = model.embed(px.unsqueeze(0), pad_ids([layout]), "continuous")
    sl = layout.trigger_slice
    errs = []
    g_trig = rev["trigger"].numpy()
    n_trig = sl.stop - sl.start
    picks = rng.choice(n_trig * model.dims.d, min(coords, n_trig * model.dims.d), replace=False)
    for c in picks:
        r, j = divmod(int(c), model.dims.d)
        up, dn = base_emb.clone(), base_emb.clone()
        up[0, sl.start + r, j] += step
        dn[0, sl.start + r, j] -= step
        fd = (loss_at(embeds=up) - loss_at(embeds=dn)) / (2 * step)
        errs.append(_rel_err(float(g_trig[r, j]), fd, floor))
    report["trigger"] = errs
    # trainable parameters
    errs = []
    params = model.trainable()
    names = list(params)
    for _ in range(coords):
        name = names[int(rng.integers(len(names)))]
        p = params[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        with torch.no_grad():
            orig = float(p[idx])
            p[idx] = orig + step
            lp = loss_at()
            p[idx] = orig - step
            lm = loss_at()
            p[idx] = orig
        fd = (lp - lm) / (2 * step)
        errs.append(_rel_err(float(rev["theta"][name][idx]), fd, floor))
    report["theta"] = errs
    summary = {k: {"coords": len(v), "max_rel_err": float(max(v))} for k, v in report.items()}
    passed = all(len(v) >= coords and max(v) <= rtol for v in report.values())
    return {"passed": passed, "leaves": summary, "rtol": rtol, "abs_floor": floor, "step": step}


def suite_gradients(seed: int = 0) -> dict:
    return gradient_check(seed)


def suite_pinsker(seed: int = 0, trials: int = 1000) -> dict:
    rng = np.random.default_rng(seed)
    fails, max_ratio = 0, 0.0
    for _ in range(trials):
        n = int(rng.integers(2, 20))
        p = rng.dirichlet(np.full(n, rng.uniform(0.1, 3.0)))
        q = rng.dirichlet(np.full(n, rng.uniform(0.1, 3.0)))
        if not pinsker_check(p, q):
            fails += 1
        k = kl(p, q)
        if k > 0:
            max_ratio = max(max_ratio, tv(p, q) / math.sqrt(k / 2))
    return {"passed": fails == 0, "trials": trials, "failures": fails, "max_tv_over_bound": max_ratio}


_SUITE_FNS = {
    "lemma1": suite_lemma1,
    "proposition": suite_proposition,
    "theorem": suite_theorem,
    "gradients": suite_gradients,
    "pinsker": suite_pinsker,
}


def run_suite(name: str, seed: int = 0, **kwargs) -> dict:
    if name not in _SUITE_FNS:
        raise ValueError(f"unknown suite {name!r}; choose from {SUITES}")
    t0 = time.perf_counter()
    rep = _SUITE_FNS[name](seed=seed, **kwargs)
    rep["suite"] = name
    rep["seconds"] = time.perf_counter() - t0
    return rep


def run_verify(suites=SUITES, seed: int = 0) -> dict:
    reports = [run_suite(s, seed) for s in suites]
    return {"passed": all(r["passed"] for r in reports), "seed": seed, "suites": reports}
