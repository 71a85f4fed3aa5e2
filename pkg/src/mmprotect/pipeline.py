"""Protect -> attack -> evaluate -> diagnose orchestration for the two desk profiles."""
from __future__ import annotations

import json
import logging
import time
from pathlib import Path

import numpy as np

from .attack import final_loss, run_attack
from .config import RunConfig, config_hash
from .data import Dataset, Sample, generate, save_dataset
from .diagnose import diagnose, write_csvs
from .metrics import stealth_record, stealth_summary
from .model import build_model
from .optimizer import build_surrogates, protect_dataset
from .verify import theorem_on_release

log = logging.getLogger(__name__)

PROFILES = {
    "smoke": {"n_train": 32, "n_eval": 32, "rounds": 2},
    "full-desk": {"n_train": 256, "n_eval": 128, "rounds": None},
}
VARIANTS = (("bph", "minmin"), ("bph", "max"))


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class _Stage:
    def __init__(self, name: str, timings: dict):
        self.name, self.timings = name, timings

    def __enter__(self):
        self.t0 = time.perf_counter()
        log.info("stage %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        self.timings[self.name] = time.perf_counter() - self.t0
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


def released_dataset(results, tokenizer, header) -> Dataset:
    return Dataset([Sample(r.id, r.released_image, r.released_text, r.clean.answer, r.clean.meta) for r in results],
                   tokenizer, header)


def resolve_config(cfg: RunConfig, profile: str) -> RunConfig:
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}")
    p = PROFILES[profile]
    data = cfg.data.model_copy(update={"n_train": p["n_train"], "n_eval": p["n_eval"]})
    prot = cfg.protection
    if p["rounds"] is not None:
        prot = prot.model_copy(update={"rounds": p["rounds"]})
    return cfg.model_copy(update={"data": data, "protection": prot})


def end_to_end(profile: str = "smoke", cfg: RunConfig | None = None, out_dir: str | Path | None = None,
               workers: int = 1, variants=VARIANTS, theorem_samples: int = 5) -> dict:
    """Run every stage and return the summary (also written to ``out_dir/summary.json``)."""
    cfg = resolve_config(cfg or RunConfig(), profile)
    timings: dict[str, float] = {}
    out = Path(out_dir) if out_dir is not None else None
    with _Stage("gen-toy-data", timings):
        train, evals = generate(cfg.data.n_train, cfg.data.n_eval, cfg.data.seed)
        if out is not None:
            save_dataset(train, out / "data" / "train", force=True)
            save_dataset(evals, out / "data" / "eval", force=True)
    tok = train.tokenizer
    base = build_model(tok.vocab_size, cfg.attack.model_seed)
    base.eval()
    with _Stage("attack:clean", timings):
        clean_report, _ = run_attack(base, train, evals, cfg.attack)
    clean_acc, clean_loss = clean_report.accuracy, final_loss(clean_report.loss_curve)
    summary: dict = {
        "profile": profile,
        "config": cfg.model_dump(mode="json"),
        "config_hash": config_hash(cfg),
        "clean_ft": {"accuracy": clean_acc, "final_train_loss": clean_loss},
        "variants": {},
        "timings": timings,
    }
    curves = {"clean_ft": clean_report.loss_curve}
    for binding, objective in variants:
        name = f"{binding}-{objective}"
        pcfg = cfg.protection.model_copy(update={"binding": binding, "objective": objective})
        with _Stage(f"protect:{name}", timings):
            surrogates = build_surrogates(pcfg, tok.vocab_size)
            rel_dir = out / name / "release" if out is not None else None
            results, manifest = protect_dataset(train, pcfg, rel_dir, surrogates, workers=workers, force=True)
        released = released_dataset(results, tok, train.header)
        with _Stage(f"attack:{name}", timings):
            report, _ = run_attack(base, released, evals, cfg.attack)
        with _Stage(f"diagnose:{name}", timings):
            stealth = stealth_summary([stealth_record(r.clean.image, r.released_image, r.clean.text, r.released_text)
                                       for r in results])
            theorem = theorem_on_release(tok, results[:theorem_samples], pcfg, surrogates[0])
            if out is not None:
                diag = diagnose(released, train, manifest, surrogates[0], pcfg)
                (out / name / "diagnose.json").write_text(json.dumps(diag, indent=1))
                write_csvs(diag, out / name / "csv", {"clean_ft": clean_report.loss_curve, name: report.loss_curve})
        curves[name] = report.loss_curve
        summary["variants"][name] = {
            "accuracy": report.accuracy,
            "delta_acc": clean_acc - report.accuracy,
            "final_train_loss": final_loss(report.loss_curve),
            "violations": manifest["total_violations"],
            "feasibility_checks": manifest["total_checks"],
            "stealth": stealth,
            "theorem": {"samples": len(theorem), "holds": sum(r["holds"] for r in theorem)},
        }
    summary["criteria"] = criteria(summary)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.json").write_text(json.dumps(summary, indent=1, default=_json_default))
        (out / "loss_curves.json").write_text(json.dumps(curves))
    return summary


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(type(x))


def criteria(summary: dict) -> dict:
    """Direction checks on whatever variants were run."""
    out: dict = {"clean_ft_accuracy>=0.85": summary["clean_ft"]["accuracy"] >= 0.85}
    v = summary["variants"]
    clean_loss = summary["clean_ft"]["final_train_loss"]
    if "bph-minmin" in v:
        out["minmin_delta_acc>=0.10"] = v["bph-minmin"]["delta_acc"] >= 0.10
        out["minmin_final_loss<clean"] = v["bph-minmin"]["final_train_loss"] < clean_loss
    if "bph-max" in v:
        out["max_final_loss>clean"] = v["bph-max"]["final_train_loss"] > clean_loss
    for name, rec in v.items():
        out[f"{name}_zero_violations"] = rec["violations"] == 0
        out[f"{name}_psnr>=30.07"] = rec["stealth"]["psnr_db_min"] >= 30.07
        out[f"{name}_ssim>=0.80"] = rec["stealth"]["ssim_min"] >= 0.80
        out[f"{name}_theorem"] = rec["theorem"]["holds"] == rec["theorem"]["samples"]
    out["all"] = all(bool(x) for x in out.values())
    return out
