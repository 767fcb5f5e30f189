"""Block-structured expression codes.

A code has ``K`` blocks of ``d`` elements laid out block-major. During
training the active class block holds ``|z|`` and every other block holds
``-|z|`` for a shared noise vector ``z ~ U(-1, 1)^d``. At test time the code is
set by hand to select a class (``edit_code``), one learned intensity level
(``sweep_code``) or no expression at all (``neutral_code``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class CodeLayout:
    K: int = 3
    d: int = 5

    def __post_init__(self):
        if self.K < 2 or self.d < 1:
            raise ValueError(f"invalid code layout K={self.K}, d={self.d} (need K >= 2, d >= 1)")

    @property
    def size(self) -> int:
        return self.K * self.d

    def blocks(self, code: np.ndarray) -> np.ndarray:
        """View a flat code (or a batch of them) as ``(..., K, d)``."""
        code = np.asarray(code)
        if code.shape[-1] != self.size:
            raise ValueError(f"code length {code.shape[-1]} != K*d = {self.size}")
        return code.reshape(code.shape[:-1] + (self.K, self.d))


def _check_label(y: np.ndarray, layout: CodeLayout) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != layout.K:
        raise ValueError(f"label length {y.shape[-1]} != K = {layout.K}")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(-1) == 1)):
        raise ValueError("label must be one-hot")
    return y


def make_code(y, z_y, layout: CodeLayout) -> np.ndarray:
    """Expression controller: block ``i`` is ``|z_y| * (2 y_i - 1)``.

    Works on single vectors or batches (leading dimensions broadcast).
    """
    y = _check_label(y, layout)
    z = np.asarray(z_y, dtype=np.float64)
    if z.shape[-1] != layout.d:
        raise ValueError(f"z_y length {z.shape[-1]} != d = {layout.d}")
    if np.any(np.abs(z) > 1):
        raise ValueError("z_y must lie in [-1, 1]")
    c = np.abs(z)[..., None, :] * (2.0 * y - 1.0)[..., :, None]
    return c.reshape(c.shape[:-2] + (layout.size,))


def sample_code(y, rng: np.random.Generator, layout: CodeLayout) -> np.ndarray:
    y = np.asarray(y)
    z = rng.uniform(-1.0, 1.0, size=y.shape[:-1] + (layout.d,))
    return make_code(y, z, layout)


def edit_code(target_class: int, layout: CodeLayout, magnitude: float = 1.0) -> np.ndarray:
    """All ``+magnitude`` in the target block, ``-magnitude`` elsewhere."""
    _check_class(target_class, layout)
    c = -np.ones((layout.K, layout.d))
    c[target_class] = 1.0
    return magnitude * c.reshape(-1)


def sweep_code(target_class: int, level: int, layout: CodeLayout, magnitude: float = 1.0) -> np.ndarray:
    """A single ``+magnitude`` at ``(target_class, level)``; every other element ``-magnitude``."""
    _check_class(target_class, layout)
    if not (0 <= level < layout.d):
        raise IndexError(f"level {level} outside [0, {layout.d})")
    c = -np.ones((layout.K, layout.d))
    c[target_class, level] = 1.0
    return magnitude * c.reshape(-1)


def neutral_code(layout: CodeLayout, magnitude: float = 1.0) -> np.ndarray:
    return -magnitude * np.ones(layout.size)


def code_label(code, layout: CodeLayout) -> np.ndarray:
    """Recover the class index from block means (argmax over blocks)."""
    return layout.blocks(code).mean(-1).argmax(-1)


def _check_class(target_class: int, layout: CodeLayout) -> None:
    if not (0 <= target_class < layout.K):
        raise IndexError(f"class {target_class} outside [0, {layout.K})")


# batched torch versions used inside the training loop


def code_from_labels(labels: torch.Tensor, z: torch.Tensor, K: int) -> torch.Tensor:
    """Torch twin of :func:`make_code` for integer labels ``(B,)`` and noise ``(B, d)``."""
    sign = 2.0 * torch.nn.functional.one_hot(labels, K).to(z.dtype) - 1.0
    return (z.abs()[:, None, :] * sign[:, :, None]).reshape(z.shape[0], -1)


def active_block(c: torch.Tensor, labels: torch.Tensor, K: int) -> torch.Tensor:
    blocks = c.reshape(c.shape[0], K, -1)
    return blocks[torch.arange(c.shape[0]), labels]


def code_from_active(active: torch.Tensor, labels: torch.Tensor, K: int) -> torch.Tensor:
    """Rebuild a full code from a nonnegative active block (inactive blocks are its negation)."""
    sign = 2.0 * torch.nn.functional.one_hot(labels, K).to(active.dtype) - 1.0
    return (active[:, None, :] * sign[:, :, None]).reshape(active.shape[0], -1)
