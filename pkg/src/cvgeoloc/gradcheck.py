"""Central finite-difference check of the full model and loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, ModelParams, init_params, loss_and_grads

# tiny enough that checking every single parameter entry takes seconds
GRADCHECK_CONFIG = ModelConfig(image_size=8, patch_size=4, token_dim=6, heads=2, embed_dim=8, n_lods=2)


@dataclass(frozen=True)
class GradcheckReport:
    seed: int
    per_tensor: dict[str, float]

    @property
    def max_relative_error(self) -> float:
        return max(self.per_tensor.values())

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_relative_error < tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero entries from
    turning rounding noise into huge ratios."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def random_problem(config: ModelConfig, seed: int, b: int = 3):
    rng = np.random.default_rng(seed)
    params = init_params(config, seed)
    # non-zero values everywhere so every term of the backward pass is exercised
    for k, v in params.tensors.items():
        params.tensors[k] = v + rng.normal(0.0, 0.3, v.shape)
    street = rng.random((b, config.street_image_size, config.street_image_size, 3))
    cells = rng.random((b, config.n_lods, config.image_size, config.image_size, 3))
    mask = ~np.eye(b, dtype=bool)
    return params, street, cells, mask


def finite_difference_check(seed: int, config: ModelConfig = GRADCHECK_CONFIG, b: int = 3,
                            tau: float = 1.0 / 36.0, eps: float = 0.1, step: float = 1e-4,
                            max_entries: int | None = None) -> GradcheckReport:
    """Compare analytic gradients with central differences for every tensor.

    ``max_entries`` limits the entries probed per tensor (chosen at random);
    by default every entry is checked.
    """
    params, street, cells, mask = random_problem(config, seed, b)
    _, grads = loss_and_grads(params, street, cells, mask, tau, eps)
    rng = np.random.default_rng(seed + 1)
    report = {}
    for name, tensor in params.tensors.items():
        flat = tensor.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        numeric = np.empty(len(idx))
        for n, k in enumerate(idx):
            orig = flat[k]
            flat[k] = orig + step
            up = loss_and_grads(params, street, cells, mask, tau, eps)[0]
            flat[k] = orig - step
            down = loss_and_grads(params, street, cells, mask, tau, eps)[0]
            flat[k] = orig
            numeric[n] = (up - down) / (2 * step)
        report[name] = float(relative_error(grads[name].reshape(-1)[idx], numeric).max())
    return GradcheckReport(seed, report)
