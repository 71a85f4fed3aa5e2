"""Alternating constrained optimization of image perturbations and text triggers.

Each sample is protected independently: every outer round adapts fresh copies
of the base surrogates to the current protected sample, takes signed PGD steps
on the pixels, then sweeps the trigger slots left to right with
screen-and-verify. Feasibility is re-checked after every update.
"""
from __future__ import annotations

import copy
import json
import logging
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import image_protect as ip
from . import text_protect as tp
from .binding import BindingWeights, bph_loss, crs_loss, joint_loss, select_perturbation_tokens
from .config import ProtectionConfig, config_hash
from .data import Dataset, Sample, admissible_vocab, quantize8, save_dataset
from .model import (ForwardTrace, Layout, SequenceOverflow, SurrogateModel, build_layout,
                    build_model, gradients, run_batch, sgd_step)
from .tokenizer import MiniTokenizer

log = logging.getLogger(__name__)


def binding_weights(cfg: ProtectionConfig) -> BindingWeights:
    return BindingWeights(beta=tuple(cfg.beta), lambda_train=cfg.lambda_train, lambda_bind=cfg.lambda_bind,
                          layers=tuple(cfg.layers), tau_delta=cfg.tau_delta)


def build_surrogates(cfg: ProtectionConfig, vocab: int) -> list[SurrogateModel]:
    models = [build_model(vocab, seed=s) for s in cfg.surrogate_seeds]
    for m in models:
        m.eval()
    return models


def sample_rng(master_seed: int, sample_id: str) -> np.random.Generator:
    return np.random.default_rng([master_seed, zlib.crc32(sample_id.encode())])


def _pixels(img: np.ndarray, model: SurrogateModel) -> torch.Tensor:
    return torch.as_tensor(np.asarray(img), dtype=model.pos_emb.dtype)


# ---------------------------------------------------------------- inner adaptation


def inner_adapt(model: SurrogateModel, batch: Sequence[tuple[np.ndarray, Layout]], steps: int, lr: float,
                low_rank: int = 0) -> SurrogateModel:
    """Fresh copy of ``model`` advanced by ``steps`` SGD steps on the batch training loss."""
    adapted = copy.deepcopy(model)
    if low_rank:
        adapted.add_low_rank(low_rank, seed=model.seed)
    if steps == 0 or not batch:
        return adapted
    names = [n for n in adapted.trainable() if (".lora." in n) or not low_rank]
    pixels = torch.stack([_pixels(img, adapted) for img, _ in batch])
    layouts = [lay for _, lay in batch]
    for _ in range(steps):
        params = dict(adapted.named_parameters())
        loss = run_batch(adapted, pixels, layouts).losses.mean()
        if not loss.requires_grad:
            break
        grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
        sgd_step(adapted, {n: g for n, g in zip(names, grads) if g is not None}, lr)
    return adapted


# ---------------------------------------------------------------- per-sample state


@dataclass
class SampleState:
    sample: Sample
    text_ids: list[int]
    answer_ids: list[int]
    delta: np.ndarray
    trigger: tp.Trigger
    round_log: list[dict] = field(default_factory=list)
    violations: list[str] = field(default_factory=list)
    checks: int = 0

    @property
    def image(self) -> np.ndarray:
        return self.sample.image

    @property
    def protected_image(self) -> np.ndarray:
        return self.sample.image + self.delta


def answer_ids(tok: MiniTokenizer, answer: str) -> list[int]:
    return tok.encode(" " + answer) if answer else []


def clean_layout(tok: MiniTokenizer, sample: Sample) -> Layout:
    return build_layout(tok.encode(sample.text), answer_ids(tok, sample.answer))


def assumed_layout(state: SampleState, trigger: tp.Trigger | None = None) -> Layout:
    """Trigger spliced in id space: the single-slot view used for gradients."""
    ids, span = tp.insert(state.text_ids, trigger or state.trigger)
    return build_layout(ids, state.answer_ids, span)


def exact_layout(tok: MiniTokenizer, state: SampleState, trigger: tp.Trigger | None = None) -> Layout:
    """Layout of the released surface string after re-tokenization."""
    text, cspan = tp.surface(tok, state.text_ids, trigger or state.trigger)
    ids, span = tp.retokenize(tok, text, cspan)
    return build_layout(ids, state.answer_ids, span)


class Objective:
    """Per-surrogate joint loss for one sample under a fixed perturbation-token set."""

    def __init__(self, cfg: ProtectionConfig, omega_delta: Sequence[int], clean: ForwardTrace | None = None):
        self.cfg = cfg
        self.weights = binding_weights(cfg)
        self.omega_delta = tuple(omega_delta)
        self.clean = clean

    def __call__(self, trace: ForwardTrace) -> torch.Tensor:
        cfg = self.cfg
        if cfg.lambda_bind == 0:
            bind = trace.loss.new_zeros(())
        elif cfg.binding == "bph":
            bind = bph_loss(trace.attention, trace.partition, self.omega_delta, self.weights)
        else:
            bind = crs_loss(self.clean.attention, self.clean.partition, trace.attention, trace.partition, cfg.layers)
        return joint_loss(trace.loss, bind, cfg.lambda_train, cfg.lambda_bind, cfg.objective)


def clean_traces(tok: MiniTokenizer, sample: Sample, models: Sequence[SurrogateModel]) -> list[ForwardTrace]:
    lay = clean_layout(tok, sample)
    out = []
    with torch.no_grad():
        for m in models:
            out.append(run_batch(m, _pixels(sample.image, m), [lay]).trace(0))
    return out


def ensemble_protection_loss(state: SampleState, models: Sequence[SurrogateModel], weights: Sequence[float],
                             cfg: ProtectionConfig, layout: Layout, leaves: Sequence[str] = (),
                             clean: Sequence[ForwardTrace] | None = None) -> dict:
    """Weighted joint loss over surrogates, with pixel / trigger gradients if requested.

    Pixel gradients are summed with the ensemble weights. Surrogates carry their
    own embedding tables, so trigger gradients are returned per surrogate as
    (weight, model index, grad) for score-level aggregation.
    """
    if len(models) != len(weights):
        raise ValueError("weight/model count mismatch")
    omega = select_perturbation_tokens(state.delta, cfg.tau_delta)
    total, pix, trig = 0.0, None, []
    mode = "differentiable" if "pixels" in leaves else "deploy"
    for i, (m, w) in enumerate(zip(models, weights)):
        if w == 0:
            continue
        obj = Objective(cfg, omega, clean[i] if clean else None)
        g = gradients(m, state.protected_image, layout, obj, leaves, mode=mode)
        total += w * float(g["loss"])
        if "pixels" in leaves:
            gp = g["pixels"].detach().double().numpy() * w
            pix = gp if pix is None else pix + gp
        if "trigger" in leaves:
            trig.append((w, i, g["trigger"].detach().double().numpy()))
    out = {"loss": total}
    if "pixels" in leaves:
        out["pixels"] = pix if pix is not None else np.zeros_like(state.delta)
    if "trigger" in leaves:
        out["trigger"] = trig
    return out


def exact_losses(tok: MiniTokenizer, state: SampleState, models: Sequence[SurrogateModel], weights: Sequence[float],
                 cfg: ProtectionConfig, triggers: Sequence[tp.Trigger],
                 clean: Sequence[ForwardTrace] | None = None) -> list[float]:
    """Ensemble protection loss of each candidate trigger on its true re-tokenization."""
    layouts, keep = [], []
    for j, trig in enumerate(triggers):
        try:
            layouts.append(exact_layout(tok, state, trig))
            keep.append(j)
        except SequenceOverflow:
            log.warning("%s: candidate trigger overflows the sequence; skipped", state.sample.id)
    losses = [float("inf")] * len(triggers)
    if not layouts:
        return losses
    omega = select_perturbation_tokens(state.delta, cfg.tau_delta)
    acc = np.zeros(len(layouts))
    with torch.no_grad():
        for i, (m, w) in enumerate(zip(models, weights)):
            if w == 0:
                continue
            obj = Objective(cfg, omega, clean[i] if clean else None)
            px = _pixels(state.protected_image, m).unsqueeze(0).expand(len(layouts), -1, -1, -1)
            out = run_batch(m, px, layouts)
            acc += w * np.array([float(obj(out.trace(b))) for b in range(len(layouts))])
    for j, v in zip(keep, acc):
        losses[j] = float(v)
    return losses


# ---------------------------------------------------------------- feasibility


def check_feasible(state: SampleState, cfg: ProtectionConfig, admissible: set[int], where: str) -> None:
    state.checks += 1
    if cfg.eps_x > 0 or np.any(state.delta):
        if not ip.is_feasible(state.delta, state.image, cfg.eps_x):
            state.violations.append(f"delta infeasible after {where}")
    if not tp.is_feasible(state.trigger, admissible, cfg.eps_t):
        state.violations.append(f"trigger infeasible after {where}")


# ---------------------------------------------------------------- outer loop


def outer_round(tok: MiniTokenizer, state: SampleState, surrogates: Sequence[SurrogateModel],
                cfg: ProtectionConfig, admissible: Sequence[int], round_index: int) -> SampleState:
    weights = cfg.weights
    adm_set = set(admissible)
    lay = exact_layout(tok, state)
    adapted = [inner_adapt(m, [(state.protected_image, lay)], cfg.inner_steps, cfg.inner_lr, cfg.inner_low_rank)
               if w else m for m, w in zip(surrogates, weights)]
    clean = clean_traces(tok, state.sample, adapted) if (cfg.binding == "crs" and cfg.lambda_bind) else None
    entry: dict = {"round": round_index}

    if cfg.eps_x > 0:
        for _ in range(cfg.pgd_iters):
            res = ensemble_protection_loss(state, adapted, weights, cfg, exact_layout(tok, state), ("pixels",), clean)
            state.delta = ip.pgd_step(state.delta, res["pixels"], cfg.alpha_x, state.image, cfg.eps_x)
            check_feasible(state, cfg, adm_set, f"round {round_index} pgd")
    entry["after_pgd"] = exact_losses(tok, state, adapted, weights, cfg, [state.trigger], clean)[0]

    sweep = []
    cand_all = list(admissible)
    for j in range(len(state.trigger.tokens)):
        res = ensemble_protection_loss(state, adapted, weights, cfg, assumed_layout(state), ("trigger",), clean)
        cur = state.trigger.tokens[j]
        scores = dict.fromkeys(cand_all, 0.0)
        for w, i, g in res["trigger"]:
            emb = adapted[i].tok_emb.detach().double().numpy()
            for v, s in tp.hotflip_scores(g[j], cur, cand_all, emb).items():
                scores[v] += w * s
        shortlist = tp.screen_candidates(scores, cfg.top_k)

        def evaluate(cands: list[int]) -> list[float]:
            trigs = []
            for v in cands:
                toks = list(state.trigger.tokens)
                toks[j] = v
                trigs.append(tp.Trigger(toks, state.trigger.position))
            return exact_losses(tok, state, adapted, weights, cfg, trigs, clean)

        best, losses = tp.verify_candidates(cur, shortlist, evaluate)
        state.trigger.tokens[j] = best
        sweep.append({"slot": j, "before": losses[cur], "after": losses[best], "token": best})
        check_feasible(state, cfg, adm_set, f"round {round_index} slot {j}")
    entry["sweep"] = sweep
    entry["after_sweep"] = sweep[-1]["after"] if sweep else entry["after_pgd"]
    state.round_log.append(entry)
    return state


@dataclass
class ProtectedSample:
    id: str
    clean: Sample
    delta: np.ndarray
    trigger: tp.Trigger
    released_image: np.ndarray
    released_text: str
    trigger_chars: tuple[int, int]
    record: dict


def init_state(tok: MiniTokenizer, sample: Sample, cfg: ProtectionConfig, admissible: Sequence[int]) -> SampleState:
    rng = sample_rng(cfg.seed, sample.id)
    if cfg.eps_x > 0:
        delta = ip.init_perturbation(sample.image, cfg.init_mode, cfg.eps_x, rng)
    else:
        delta = np.zeros_like(sample.image)
    n = min(cfg.eps_t, len(admissible))
    tokens = [int(t) for t in rng.choice(np.asarray(admissible), size=n, replace=False)] if n else []
    return SampleState(sample, tok.encode(sample.text), answer_ids(tok, sample.answer), delta,
                       tp.Trigger(tokens, cfg.trigger_position))


def released_loss(tok: MiniTokenizer, clean_image: np.ndarray, released_image: np.ndarray, released_text: str,
                  trigger_chars: tuple[int, int], answer: str, surrogates: Sequence[SurrogateModel],
                  cfg: ProtectionConfig) -> float:
    """Ensemble protection loss recomputed from released artifacts only."""
    delta = np.asarray(released_image, np.float64) - np.asarray(clean_image, np.float64)
    ids, span = tp.retokenize(tok, released_text, tuple(trigger_chars))
    lay = build_layout(ids, answer_ids(tok, answer), span)
    sample = Sample("released", np.asarray(clean_image, np.float64), "", answer)
    weights = cfg.weights
    adapted = [inner_adapt(m, [(released_image, lay)], cfg.inner_steps, cfg.inner_lr, cfg.inner_low_rank)
               if w else m for m, w in zip(surrogates, weights)]
    clean = None
    if cfg.binding == "crs" and cfg.lambda_bind:
        clean_text = released_text[: trigger_chars[0]] + released_text[trigger_chars[1]:]
        clean = clean_traces(tok, Sample("clean", sample.image, clean_text, answer), adapted)
    omega = select_perturbation_tokens(delta, cfg.tau_delta)
    total = 0.0
    with torch.no_grad():
        for i, (m, w) in enumerate(zip(adapted, weights)):
            if w == 0:
                continue
            out = run_batch(m, _pixels(released_image, m), [lay])
            total += w * float(Objective(cfg, omega, clean[i] if clean else None)(out.trace(0)))
    return total


def protect_sample(tok: MiniTokenizer, sample: Sample, surrogates: Sequence[SurrogateModel],
                   cfg: ProtectionConfig, admissible: Sequence[int]) -> ProtectedSample:
    state = init_state(tok, sample, cfg, admissible)
    check_feasible(state, cfg, set(admissible), "init")
    for r in range(cfg.rounds):
        outer_round(tok, state, surrogates, cfg, admissible, r)
    text, cspan = tp.surface(tok, state.text_ids, state.trigger)
    released = quantize8(state.protected_image)
    final = released_loss(tok, sample.image, released, text, cspan, sample.answer, surrogates, cfg)
    record = {
        "id": sample.id,
        "trigger_ids": list(state.trigger.tokens),
        "trigger_text": tok.decode(state.trigger.tokens),
        "trigger_position": state.trigger.position,
        "trigger_chars": list(cspan),
        "released_text": text,
        "rounds": state.round_log,
        "final_loss": final,
        "feasibility_checks": state.checks,
        "violations": state.violations,
        "delta_linf": float(np.abs(state.delta).max(initial=0.0)),
    }
    return ProtectedSample(sample.id, sample, state.delta, state.trigger, released, text, cspan, record)


# ---------------------------------------------------------------- dataset driver


def _worker_init() -> None:
    torch.set_num_threads(1)


def _protect_one(args):
    tok_merges, sample, surrogates, cfg_json, admissible = args
    cfg = ProtectionConfig.model_validate_json(cfg_json)
    return protect_sample(MiniTokenizer(tok_merges), sample, surrogates, cfg, admissible)


def protect_dataset(dataset: Dataset, cfg: ProtectionConfig, out_dir: str | os.PathLike | None = None,
                    surrogates: Sequence[SurrogateModel] | None = None, workers: int = 1,
                    force: bool = False, save_deltas: bool = True) -> tuple[list[ProtectedSample], dict]:
    """Protect every sample and, if ``out_dir`` is given, write the release.

    The release directory is a regular dataset (manifest.jsonl + PNGs) whose
    header embeds the resolved config; ``protection.json`` carries per-sample
    triggers, per-round losses and feasibility counters.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    tok = dataset.tokenizer
    if surrogates is None:
        surrogates = build_surrogates(cfg, tok.vocab_size)
    admissible = admissible_vocab(tok)
    if workers > 1:
        jobs = [(tok.to_json(), s, list(surrogates), cfg.model_dump_json(), admissible) for s in dataset]
        with ProcessPoolExecutor(workers, initializer=_worker_init) as ex:
            results = list(ex.map(_protect_one, jobs))
    else:
        results = [protect_sample(tok, s, surrogates, cfg, admissible) for s in dataset]
    manifest = {
        "config": cfg.model_dump(mode="json"),
        "config_hash": config_hash(cfg),
        "tokenizer_hash": tok.hash,
        "admissible_ids": admissible,
        "samples": [r.record for r in results],
        "total_violations": sum(len(r.record["violations"]) for r in results),
        "total_checks": sum(r.record["feasibility_checks"] for r in results),
    }
    if out_dir is not None:
        write_release(dataset, results, manifest, out_dir, force=force, save_deltas=save_deltas)
    return results, manifest


def write_release(dataset: Dataset, results: Sequence[ProtectedSample], manifest: dict, out_dir,
                  force: bool = False, save_deltas: bool = True) -> Path:
    released = Dataset(
        [Sample(r.id, r.released_image, r.released_text, r.clean.answer, r.clean.meta) for r in results],
        dataset.tokenizer,
        {k: v for k, v in dataset.header.items() if k not in ("merges", "tokenizer_hash")},
    )
    out = save_dataset(released, out_dir, force=force,
                       extra_header={"protection_config_hash": manifest["config_hash"], "protected": True})
    if save_deltas:
        (out / "deltas").mkdir(exist_ok=True)
        for r in results:
            ip.save_delta(out / "deltas" / f"{r.id}.f32", r.delta)
    (out / "protection.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out
