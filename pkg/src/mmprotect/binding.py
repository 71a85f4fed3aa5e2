"""Attention-routing objectives: mass distributions, KL routing loss, BPH, CRS.

All functions work on an attention stack ``attn`` of shape
(layers, heads, L, L) whose rows are distributions over key positions, plus
index sets into the joint sequence. Everything is torch so the losses can be
differentiated back to pixels or trigger embeddings.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .model import IMG_START, PATCH, TokenPartition

log = logging.getLogger(__name__)

KL_FLOOR = 1e-12


@dataclass
class BindingWeights:
    beta: tuple[float, float, float] = (1.0, 1.0, 1.0)
    lambda_train: float = 1.0
    lambda_bind: float = 1.0
    layers: tuple[int, ...] = (0,)
    heads: tuple[int, ...] | None = None  # None -> all heads
    tau_delta: float = 0.25
    kl_floor: float = KL_FLOOR

    def __post_init__(self) -> None:
        if not 0 < self.tau_delta <= 1:
            raise ValueError("tau_delta must lie in (0, 1]")
        if min(self.beta) < 0 or self.lambda_train < 0 or self.lambda_bind < 0:
            raise ValueError("weights must be nonnegative")


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x), dtype=torch.float64)


# ---------------------------------------------------------------- perturbation tokens


def patch_scores(delta: np.ndarray, patch: int = PATCH) -> np.ndarray:
    """Mean |delta| over each non-overlapping patch, row-major patch order."""
    d = np.abs(np.asarray(delta, dtype=np.float64))
    h, w, c = d.shape
    g, gw = h // patch, w // patch
    return d.reshape(g, patch, gw, patch, c).mean(axis=(1, 3, 4)).reshape(-1)


def top_fraction(scores: Sequence[float], tau: float) -> list[int]:
    """Indices of the ceil(tau * n) largest scores; ties go to the lower index."""
    if not 0 < tau <= 1:
        raise ValueError("tau must lie in (0, 1]")
    s = np.asarray(scores, dtype=np.float64)
    k = math.ceil(tau * len(s) - 1e-12)
    order = np.argsort(-s, kind="stable")
    return sorted(int(i) for i in order[:k])


def select_perturbation_tokens(delta: np.ndarray, tau: float) -> tuple[int, ...]:
    """Sequence positions of the perturbation-heavy image tokens.

    An all-zero delta degenerates to the lowest-index patches, which keeps
    text-only ablations runnable.
    """
    return tuple(IMG_START + b for b in top_fraction(patch_scores(delta), tau))


# ---------------------------------------------------------------- attention mass


def attention_mass(attn, source: Sequence[int], layer: int, heads: Sequence[int] | None = None) -> torch.Tensor:
    """Head- and source-averaged attention row at ``layer``."""
    if len(source) == 0:
        raise ValueError("source set is empty")
    a = _as_tensor(attn)[layer]
    if heads is not None:
        a = a[list(heads)]
    return a[:, list(source), :].mean(dim=(0, 1))


def kl_uniform(target: Sequence[int], dist: torch.Tensor, floor: float | None = KL_FLOOR) -> torch.Tensor:
    """KL(U_target || dist). With ``floor=None`` a zero target mass yields +inf."""
    r = list(target)
    m = dist[r]
    if floor is None:
        if bool((m <= 0).any()):
            return torch.tensor(math.inf, dtype=dist.dtype)
    else:
        m = m.clamp(min=floor)
    return -torch.log(m).mean() - math.log(len(r))


def mass_loss(attn, source: Sequence[int], target: Sequence[int], layers: Sequence[int],
              floor: float | None = KL_FLOOR, heads: Sequence[int] | None = None) -> torch.Tensor:
    """Layer-averaged KL from the uniform target distribution to the source's attention mass."""
    if len(target) == 0:
        raise ValueError("target set is empty")
    vals = [kl_uniform(target, attention_mass(attn, source, k, heads), floor) for k in layers]
    return torch.stack(vals).mean()


def contrastive_identity_check(attn, source: Sequence[int], target: Sequence[int], layers: Sequence[int],
                               tol: float = 1e-9) -> dict:
    """Compare the unfloored mass loss against its multi-positive softmax form."""
    a = _as_tensor(attn).to(torch.float64)
    target = list(target)
    nce = []
    for k in layers:
        dist = attention_mass(a, source, k)
        support = torch.nonzero(dist > 0).flatten().tolist()
        if not set(target) <= set(support):
            return {"status": "inapplicable", "lhs": math.inf, "rhs": math.nan, "gap": math.nan}
        z = torch.log(dist[support])
        log_soft = z - torch.logsumexp(z, dim=0)
        pos = [support.index(r) for r in target]
        nce.append(-log_soft[pos].mean())
    lhs = float(mass_loss(a, source, target, layers, floor=None))
    rhs = float(torch.stack(nce).mean()) - math.log(len(target))
    gap = abs(lhs - rhs)
    return {"status": "ok" if gap <= tol else "fail", "lhs": lhs, "rhs": rhs, "gap": gap}


# ---------------------------------------------------------------- objectives


def bph_loss(attn, partition: TokenPartition, omega_delta: Sequence[int], weights: BindingWeights,
             floor: float | None = None) -> torch.Tensor:
    """Weighted trigger->perturbation, answer->trigger and answer->perturbation routing loss."""
    floor = weights.kl_floor if floor is None else floor
    trig, ans = partition.trigger, partition.answer
    paths = ((weights.beta[0], trig, omega_delta, "trigger->perturbation"),
             (weights.beta[1], ans, trig, "answer->trigger"),
             (weights.beta[2], ans, omega_delta, "answer->perturbation"))
    a = _as_tensor(attn)
    total = a.new_zeros(())
    for beta, src, dst, name in paths:
        if beta == 0:
            continue
        if not src or not dst:
            log.debug("skipping %s term: empty token set", name)
            continue
        total = total + beta * mass_loss(a, src, dst, weights.layers, floor, weights.heads)
    return total


def align_distributions(prot: torch.Tensor, prot_part: TokenPartition, clean: torch.Tensor,
                        clean_part: TokenPartition, disjoint: Sequence[int] = ()) -> tuple[torch.Tensor, torch.Tensor]:
    """Place a clean-side distribution on the protected token universe.

    Clean positions are matched to protected positions category by category in
    order. Protected positions without a clean counterpart (the trigger) get
    zero clean mass. Clean positions whose counterpart is listed in
    ``disjoint``, or that have no counterpart, get their own extra slot where
    the protected side is zero.
    """
    disjoint = set(disjoint)
    idx_map: list[int] = []
    src: list[int] = []
    extra = 0
    n_p = prot.shape[0]
    for cat in ("image", "text", "answer", "template"):
        c_pos, p_pos = getattr(clean_part, cat), getattr(prot_part, cat)
        for i, c in enumerate(c_pos):
            if i < len(p_pos) and p_pos[i] not in disjoint:
                idx_map.append(p_pos[i])
            else:
                idx_map.append(n_p + extra)
                extra += 1
            src.append(c)
    p_ext = torch.cat([prot, prot.new_zeros(extra)])
    q_ext = clean.new_zeros(n_p + extra)
    q_ext = q_ext.index_add(0, torch.tensor(idx_map, dtype=torch.long), clean[torch.tensor(src, dtype=torch.long)])
    return p_ext, q_ext


def kl(p: torch.Tensor, q: torch.Tensor, floor: float | None = KL_FLOOR) -> torch.Tensor:
    """KL(p || q) with 0 log 0 = 0; unfloored zero q under positive p gives +inf."""
    mask = p > 0
    pm, qm = p[mask], q[mask]
    if floor is None:
        if bool((qm <= 0).any()):
            return torch.tensor(math.inf, dtype=p.dtype)
    else:
        qm = qm.clamp(min=floor)
    return (pm * (torch.log(pm) - torch.log(qm))).sum()


def crs_loss(clean_attn, clean_part: TokenPartition, prot_attn, prot_part: TokenPartition,
             layers: Sequence[int], floor: float = KL_FLOOR) -> torch.Tensor:
    """Negative layer-averaged KL(sg(clean answer mass) || protected answer mass)."""
    ca, pa = _as_tensor(clean_attn), _as_tensor(prot_attn)
    if len(clean_part.answer) != len(prot_part.answer):
        raise ValueError("clean and protected traces must share answer length")
    if not prot_part.answer:
        return pa.new_zeros(())
    vals = []
    for k in layers:
        p = attention_mass(pa, prot_part.answer, k)
        c = attention_mass(ca, clean_part.answer, k).detach()
        p_ext, c_ext = align_distributions(p, prot_part, c, clean_part)
        vals.append(kl(c_ext, p_ext, floor))
    return -torch.stack(vals).mean()


def joint_loss(train_loss, bind_loss, lambda_train: float, lambda_bind: float, variant: str = "minmin"):
    """Min-min keeps the training term; the max variant flips only its sign."""
    if variant == "minmin":
        return lambda_train * train_loss + lambda_bind * bind_loss
    if variant == "max":
        return -lambda_train * train_loss + lambda_bind * bind_loss
    raise ValueError(f"unknown objective {variant!r}")


# ---------------------------------------------------------------- attention-shift bound


def tv(p: torch.Tensor, q: torch.Tensor) -> float:
    return 0.5 * float((p - q).abs().sum())


def tv_bound_from_distributions(prot: Sequence[torch.Tensor], clean: Sequence[torch.Tensor],
                                target: Sequence[int], tol: float = 1e-9) -> dict:
    """Check mean TV >= 1 - sqrt(eta / 2) for per-layer distributions on a common universe.

    ``clean`` must put zero mass on ``target``.
    """
    target = list(target)
    for q in clean:
        if float(q[target].sum()) != 0.0:
            raise ValueError("clean side must be zero on the target set")
    etas = [float(kl_uniform(target, p, floor=None)) for p in prot]
    eta = float(np.mean(etas))
    mean_tv = float(np.mean([tv(p, q) for p, q in zip(prot, clean)]))
    bound = 1.0 - math.sqrt(eta / 2.0) if math.isfinite(eta) else -math.inf
    return {"eta": eta, "mean_tv": mean_tv, "bound": bound, "holds": mean_tv >= bound - tol}


def tv_bound_check(prot_attn, prot_part: TokenPartition, clean_attn, clean_part: TokenPartition,
                   target: Sequence[int], layers: Sequence[int], tol: float = 1e-9) -> dict:
    """Attention-shift report for one protected/clean pair.

    ``target`` is a protection-induced set (trigger or perturbation tokens) in
    protected coordinates; on the clean side those positions are treated as
    absent and any clean token sharing a position is moved to its own slot.
    """
    pa, ca = _as_tensor(prot_attn).to(torch.float64), _as_tensor(clean_attn).to(torch.float64)
    ps, qs = [], []
    for k in layers:
        p = attention_mass(pa, prot_part.answer, k)
        q = attention_mass(ca, clean_part.answer, k)
        p_ext, q_ext = align_distributions(p, prot_part, q, clean_part, disjoint=target)
        ps.append(p_ext)
        qs.append(q_ext)
    return tv_bound_from_distributions(ps, qs, target, tol)


# ---------------------------------------------------------------- routing report


ROUTE_NAMES = ("answer->trigger", "answer->perturbation", "trigger->perturbation",
               "answer->clean_image", "answer->text")


def routing_masses(attn, partition: TokenPartition, omega_delta: Sequence[int], layers: Sequence[int]) -> dict:
    """Per-layer attention mass for the five route categories plus answer->template/answer."""
    a = _as_tensor(attn)
    od = set(omega_delta)
    clean_img = [p for p in partition.image if p not in od]
    out: dict[str, list[float]] = {k: [] for k in ROUTE_NAMES + ("answer->template", "answer->answer")}
    for k in layers:
        ans = attention_mass(a, partition.answer, k) if partition.answer else None
        trg = attention_mass(a, partition.trigger, k) if partition.trigger else None

        def mass(dist, idx):
            return float(dist[list(idx)].sum()) if dist is not None and len(idx) else 0.0

        out["answer->trigger"].append(mass(ans, partition.trigger))
        out["answer->perturbation"].append(mass(ans, omega_delta))
        out["trigger->perturbation"].append(mass(trg, omega_delta))
        out["answer->clean_image"].append(mass(ans, clean_img))
        out["answer->text"].append(mass(ans, partition.text))
        out["answer->template"].append(mass(ans, partition.template))
        out["answer->answer"].append(mass(ans, partition.answer))
    return out
