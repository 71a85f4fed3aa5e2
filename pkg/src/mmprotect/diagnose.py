"""Stealth and attention-routing diagnostics for a protected release."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import text_protect as tp
from .binding import ROUTE_NAMES, routing_masses, select_perturbation_tokens
from .config import ProtectionConfig
from .data import Dataset, load_dataset
from .metrics import stealth_record, stealth_summary
from .model import ForwardTrace, SurrogateModel, build_layout, build_model, run_batch
from .optimizer import answer_ids

CATEGORIES = ROUTE_NAMES + ("answer->template", "answer->answer")


def routing_report(clean: ForwardTrace, protected: ForwardTrace, omega_delta: Sequence[int],
                   layers: Sequence[int]) -> dict:
    """Per-layer route masses for a clean/protected pair of the same sample.

    The clean side has no trigger and no perturbation tokens, so its first
    three routes are exactly zero.
    """
    return {
        "clean": routing_masses(clean.attention, clean.partition, (), layers),
        "protected": routing_masses(protected.attention, protected.partition, omega_delta, layers),
    }


def _trace(model: SurrogateModel, image: np.ndarray, layout) -> ForwardTrace:
    with torch.no_grad():
        px = torch.as_tensor(np.asarray(image), dtype=model.pos_emb.dtype)
        return run_batch(model, px, [layout]).trace(0)


def diagnose(protected: Dataset, clean: Dataset, protection: dict | None = None,
             model: SurrogateModel | None = None, cfg: ProtectionConfig | None = None) -> dict:
    """Stealth metrics for every shared id plus routing reports under one surrogate.

    ``protection`` is the release's ``protection.json``; without it trigger
    positions are unknown and routing is skipped.
    """
    cfg = cfg or ProtectionConfig(**(protection or {}).get("config", {}))
    tok = clean.tokenizer
    if model is None:
        model = build_model(tok.vocab_size, seed=cfg.surrogate_seeds[0])
        model.eval()
    layers = list(range(model.dims.layers))
    clean_by_id = clean.by_id()
    records = {r["id"]: r for r in (protection or {}).get("samples", [])}
    stealth, routing = [], []
    for p in protected:
        c = clean_by_id.get(p.id)
        if c is None:
            continue
        rec = stealth_record(c.image, p.image, c.text, p.text)
        rec["id"] = p.id
        stealth.append(rec)
        meta = records.get(p.id)
        if meta is None:
            continue
        ans = answer_ids(tok, c.answer)
        ids, span = tp.retokenize(tok, p.text, tuple(meta["trigger_chars"]))
        prot_trace = _trace(model, p.image, build_layout(ids, ans, span))
        clean_trace = _trace(model, c.image, build_layout(tok.encode(c.text), ans))
        omega = select_perturbation_tokens(np.asarray(p.image) - np.asarray(c.image), cfg.tau_delta)
        rep = routing_report(clean_trace, prot_trace, omega, layers)
        rep["id"] = p.id
        routing.append(rep)
    summary = stealth_summary(stealth) if stealth else {}
    return {
        "stealth": {"samples": stealth, "summary": summary},
        "routing": {"layers": layers, "samples": routing, "mean": mean_routing(routing, layers)},
    }


def mean_routing(reports: Sequence[dict], layers: Sequence[int]) -> dict:
    out: dict = {}
    for side in ("clean", "protected"):
        out[side] = {c: [float(np.mean([r[side][c][i] for r in reports])) if reports else math.nan
                         for i in range(len(layers))] for c in CATEGORIES}
    return out


def write_csvs(report: dict, out_dir: str | Path, loss_curves: dict[str, Sequence[float]] | None = None) -> list[Path]:
    """stealth.csv, routing.csv (one row per sample/side/layer) and optional loss_curves.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    path = out / "stealth.csv"
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "psnr_db", "ssim", "edit_distance", "bleu"])
        for r in report["stealth"]["samples"]:
            w.writerow([r["id"], r["psnr_db"], r["ssim"], r["edit_distance"], r["bleu"]])
    written.append(path)
    path = out / "routing.csv"
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "side", "layer", *CATEGORIES])
        layers = report["routing"]["layers"]
        for r in report["routing"]["samples"]:
            for side in ("clean", "protected"):
                for i, k in enumerate(layers):
                    w.writerow([r["id"], side, k, *(r[side][c][i] for c in CATEGORIES)])
    written.append(path)
    if loss_curves:
        path = out / "loss_curves.csv"
        names = sorted(loss_curves)
        n = max(len(loss_curves[k]) for k in names)
        with path.open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", *names])
            for i in range(n):
                w.writerow([i, *(loss_curves[k][i] if i < len(loss_curves[k]) else "" for k in names)])
        written.append(path)
    return written


def diagnose_dirs(protected_dir: str | Path, clean_dir: str | Path, model: SurrogateModel | None = None) -> dict:
    protected_dir = Path(protected_dir)
    prot_json = protected_dir / "protection.json"
    protection = json.loads(prot_json.read_text()) if prot_json.exists() else None
    return diagnose(load_dataset(protected_dir), load_dataset(clean_dir), protection, model)
