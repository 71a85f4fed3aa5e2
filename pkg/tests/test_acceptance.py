"""Acceptance criteria at their stated tolerances.

The module prints one PASS/FAIL line per criterion at teardown. The full-desk
protect/attack run is shared by criteria 5 through 9 and takes roughly ten
minutes on one core.
"""
import time

import numpy as np
import pytest

from mmprotect.attack import run_attack
from mmprotect.config import ProtectionConfig, RunConfig
from mmprotect.data import Dataset, generate, load_dataset, tree_digest
from mmprotect.optimizer import build_surrogates, protect_dataset
from mmprotect.pipeline import end_to_end, resolve_config
from mmprotect.verify import gradient_check, suite_lemma1, suite_proposition, suite_theorem

RESULTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="module", autouse=True)
def report(request):
    yield
    tr = request.config.pluginmanager.get_plugin("terminalreporter")
    lines = ["", "acceptance criteria:"]
    for k in range(1, 11):
        ok, detail = RESULTS.get(k, (False, "not run"))
        lines.append(f"  criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    text = "\n".join(lines)
    if tr is not None:
        tr.write_line(text)
    else:
        print(text)


def _record(k: int, ok: bool, detail: str) -> None:
    RESULTS[k] = (bool(ok), detail)
    assert ok, f"criterion {k}: {detail}"


@pytest.fixture(scope="module")
def full_desk(tmp_path_factory):
    out = tmp_path_factory.mktemp("full_desk")
    t0 = time.perf_counter()
    summary = end_to_end("full-desk", RunConfig(), out, theorem_samples=5)
    return summary, out, time.perf_counter() - t0


def test_c1_mass_nce_identity():
    t0 = time.perf_counter()
    rep = suite_proposition(seed=0, trials=100)
    dt = time.perf_counter() - t0
    _record(1, rep["passed"] and dt < 10, f"max gap {rep['max_gap']:.2e} over {rep['trials']} stacks, {dt:.1f}s")


def test_c2_screen_and_verify_bound():
    t0 = time.perf_counter()
    rep = suite_lemma1(seed=0, trials=1000)
    dt = time.perf_counter() - t0
    ok = rep["passed"] and rep["k1_violations"] == 0 and rep["exhaustive_max_gap"] == 0.0 and dt < 30
    _record(2, ok, f"max gap/bound {rep['k1_max_gap_over_bound']:.3f}, exhaustive gap "
                   f"{rep['exhaustive_max_gap']}, {dt:.1f}s")


def test_c3_tv_bound():
    t0 = time.perf_counter()
    rep = suite_theorem(seed=0, trials=100, n_protected=5)
    dt = time.perf_counter() - t0
    ok = (rep["passed"] and rep["synthetic_holds"] == 100 and rep["protected_samples"] >= 5 and dt < 60)
    _record(3, ok, f"synthetic {rep['synthetic_holds']}/100, protected "
                   f"{rep['protected_holds']}/{rep['protected_samples']}, {dt:.1f}s")


def test_c4_gradients_match_finite_differences():
    t0 = time.perf_counter()
    rep = gradient_check(seed=0, coords=50, step=1e-4, rtol=1e-3, floor=1e-5)
    dt = time.perf_counter() - t0
    leaves = rep["leaves"]
    ok = rep["passed"] and all(v["coords"] >= 50 for v in leaves.values()) and dt < 60
    errs = ", ".join(f"{k} {v['max_rel_err']:.1e}" for k, v in leaves.items())
    _record(4, ok, f"max rel err {errs}, {dt:.1f}s")


def test_c5_feasibility(full_desk):
    summary, _, _ = full_desk
    cfg = resolve_config(RunConfig(), "full-desk").protection
    per_sample = 1 + cfg.rounds * (cfg.pgd_iters + cfg.eps_t)
    details, ok = [], True
    for name, v in summary["variants"].items():
        ok &= v["violations"] == 0 and v["feasibility_checks"] == 256 * per_sample
        details.append(f"{name} {v['violations']} violations in {v['feasibility_checks']} checks")
    ok &= cfg.rounds == 5 and summary["config"]["data"]["n_train"] == 256
    _record(5, ok, "; ".join(details))


def test_c6_accuracy_drop(full_desk):
    summary, _, _ = full_desk
    t = summary["timings"]
    runtime = t["gen-toy-data"] + t["attack:clean"] + t["protect:bph-minmin"] + t["attack:bph-minmin"]
    clean = summary["clean_ft"]["accuracy"]
    drop = summary["variants"]["bph-minmin"]["delta_acc"]
    ok = clean >= 0.85 and drop >= 0.10 and runtime <= 15 * 60
    _record(6, ok, f"clean FT {clean:.3f}, minmin delta {drop:.3f}, {runtime / 60:.1f} min")


def test_c7_loss_regimes(full_desk):
    summary, _, _ = full_desk
    c = summary["clean_ft"]["final_train_loss"]
    mm = summary["variants"]["bph-minmin"]["final_train_loss"]
    mx = summary["variants"]["bph-max"]["final_train_loss"]
    _record(7, mm < c < mx, f"minmin {mm:.4f} < clean {c:.4f} < max {mx:.4f}")


def test_c8_stealth_floor(full_desk):
    summary, _, _ = full_desk
    ok, details = True, []
    for name, v in summary["variants"].items():
        s = v["stealth"]
        ok &= s["psnr_db_min"] >= 30.07 and s["ssim_min"] >= 0.80
        details.append(f"{name} psnr_min {s['psnr_db_min']:.2f} dB ssim_min {s['ssim_min']:.3f}")
    _record(8, ok, "; ".join(details))


def test_c9_mixing_endpoints(full_desk):
    summary, out, _ = full_desk
    cfg = resolve_config(RunConfig(), "full-desk")
    train, evals = generate(cfg.data.n_train, cfg.data.n_eval, cfg.data.seed)
    released = load_dataset(out / "bph-minmin" / "release")
    base_seed = cfg.attack.model_seed
    from mmprotect.model import build_model

    base = build_model(train.tokenizer.vocab_size, base_seed)
    accs = {}
    for ratio in (0.0, 1.0):
        acfg = cfg.attack.model_copy(update={"mix_ratio": ratio})
        rep, _ = run_attack(base, released, evals, acfg, clean_train=train)
        accs[ratio] = rep.accuracy
    ok = accs[1.0] <= accs[0.0] and accs[0.0] == pytest.approx(summary["clean_ft"]["accuracy"])
    _record(9, ok, f"acc at ratio 1.0 {accs[1.0]:.3f} <= ratio 0.0 {accs[0.0]:.3f}")


def test_c10_determinism_and_linear_scaling(tmp_path):
    train, _ = generate(16, 1, 0)
    cfg = ProtectionConfig()
    models = build_surrogates(cfg, train.tokenizer.vocab_size)
    first = Dataset(train.samples[:8], train.tokenizer, train.header)
    protect_dataset(first, cfg, tmp_path / "a", surrogates=models)
    protect_dataset(first, cfg, tmp_path / "b", surrogates=build_surrogates(cfg, train.tokenizer.vocab_size))
    same = tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    def timed(ds):
        t0 = time.perf_counter()
        protect_dataset(ds, cfg, surrogates=models)
        return time.perf_counter() - t0

    # two disjoint halves against the whole: 2n vs n on the same sample distribution
    second = Dataset(train.samples[8:], train.tokenizer, train.header)
    t_n = np.mean([timed(first), timed(second)])
    t_2n = timed(train)
    ratio = t_2n / t_n
    _record(10, same and 1.4 <= ratio <= 2.6, f"byte-identical {same}, time ratio 2n/n {ratio:.2f}")
