"""l-infinity feasible-set projection and signed PGD steps for pixel perturbations."""
from __future__ import annotations

import numpy as np

DEFAULT_EPS = 8 / 255
DEFAULT_STEP = 1 / 255
FEAS_TOL = 1e-9


def project(delta: np.ndarray, image: np.ndarray, eps: float) -> np.ndarray:
    """Clip to the eps-box, then to the box that keeps image + delta inside [0, 1]."""
    image = np.asarray(image, np.float64)
    d = np.clip(np.asarray(delta, np.float64), -eps, eps)
    return np.clip(d, -image, 1.0 - image)


def init_perturbation(image: np.ndarray, mode: str = "zero", eps: float = DEFAULT_EPS,
                      rng: np.random.Generator | int | None = None) -> np.ndarray:
    if not 0 < eps <= 16 / 255 + 1e-12:
        raise ValueError("eps must lie in (0, 16/255]")
    image = np.asarray(image, np.float64)
    if mode == "zero":
        return np.zeros_like(image)
    if mode == "uniform":
        rng = np.random.default_rng(rng)
        return project(rng.uniform(-eps, eps, size=image.shape), image, eps)
    raise ValueError(f"unknown init mode {mode!r}")


def pgd_step(delta: np.ndarray, grad: np.ndarray, step: float, image: np.ndarray, eps: float) -> np.ndarray:
    """Descend along sign(grad) (sign(0) = 0), then project."""
    return project(delta - step * np.sign(grad), image, eps)


def is_feasible(delta: np.ndarray, image: np.ndarray, eps: float, tol: float = FEAS_TOL) -> bool:
    delta, image = np.asarray(delta, np.float64), np.asarray(image, np.float64)
    x = image + delta
    return bool(np.abs(delta).max(initial=0.0) <= eps + tol and x.min() >= -tol and x.max() <= 1 + tol)


def save_delta(path, delta: np.ndarray) -> None:
    """Raw little-endian f32 dump, row-major (32, 32, 3)."""
    np.asarray(delta, dtype="<f4").tofile(path)


def load_delta(path, shape=(32, 32, 3)) -> np.ndarray:
    return np.fromfile(path, dtype="<f4").reshape(shape).astype(np.float64)
