"""Random sketch matrices and the projectors they induce.

A Left sketch ``B_S`` (m x r) restricts an update to ``B_S A`` and yields the
projector ``H_B = B (B^T B)^+ B^T`` acting on the rows of a gradient; a Right
sketch ``A_S`` (r x n) yields ``H_A = A^T (A A^T)^+ A`` acting on its columns.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Optional, Tuple

import numpy as np

from ..errors import InvalidSpec
from .linalg import as_matrix, pseudo_inverse_with_rank, sym_eig_extremes

logger = logging.getLogger(__name__)


class SketchSide(str, Enum):
    LEFT = "left"
    RIGHT = "right"


class SketchDistribution(str, Enum):
    GAUSSIAN = "gaussian"
    RADEMACHER = "rademacher"
    COORDINATE = "coordinate"


def enum_member(enum_cls, value, label: str, error=InvalidSpec):
    """``enum_cls(value)``, raising ``error`` with the allowed values on a miss."""
    try:
        return enum_cls(value)
    except ValueError:
        allowed = ", ".join(e.value for e in enum_cls)
        raise error(f"Unknown {label} '{value}', expected one of {allowed}") from None


@dataclass(frozen=True)
class SketchSpec:
    """Where the sketch sits, its rank and how its entries are drawn."""

    side: SketchSide
    rank: int
    target_rows: int
    target_cols: int
    distribution: SketchDistribution = SketchDistribution.GAUSSIAN
    alpha: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "side", enum_member(SketchSide, self.side, "sketch side"))
        object.__setattr__(
            self, "distribution", enum_member(SketchDistribution, self.distribution, "distribution")
        )
        if self.target_rows < 1 or self.target_cols < 1:
            raise InvalidSpec(
                f"Target shape must be positive, got {self.target_rows}x{self.target_cols}"
            )
        if not 1 <= self.rank <= min(self.target_rows, self.target_cols):
            raise InvalidSpec(
                f"Rank {self.rank} outside [1, {min(self.target_rows, self.target_cols)}]"
            )
        if self.alpha is None:
            object.__setattr__(self, "alpha", float(self.rank))
        if self.alpha <= 0:
            raise InvalidSpec(f"alpha must be positive, got {self.alpha}")

    @property
    def ambient_dim(self) -> int:
        """Dimension of the space the projector acts on."""
        return self.target_rows if self.side is SketchSide.LEFT else self.target_cols

    @property
    def sketch_shape(self) -> Tuple[int, int]:
        if self.side is SketchSide.LEFT:
            return (self.target_rows, self.rank)
        return (self.rank, self.target_cols)

    @property
    def trainable_shape(self) -> Tuple[int, int]:
        if self.side is SketchSide.LEFT:
            return (self.rank, self.target_cols)
        return (self.target_rows, self.rank)

    @property
    def scale(self) -> float:
        """The LoRA factor alpha / r."""
        return self.alpha / self.rank

    @property
    def closed_form_lambda_min(self) -> float:
        """lambda_min(E[H]) for isotropic sketches: r/m (Left) or r/n (Right)."""
        return self.rank / self.ambient_dim

    @property
    def closed_form_lambda_max(self) -> float:
        return self.closed_form_lambda_min

    @property
    def is_full_rank(self) -> bool:
        return self.rank == self.ambient_dim


@dataclass(frozen=True)
class Projector:
    h: np.ndarray
    source_rank: int
    side: SketchSide

    def apply(self, grad: np.ndarray) -> np.ndarray:
        """H g for Left sketches, g H for Right sketches."""
        if self.side is SketchSide.LEFT:
            return self.h @ grad
        return grad @ self.h

    def invariant_residuals(self) -> Dict[str, float]:
        h = self.h
        eigs = np.linalg.eigvalsh(0.5 * (h + h.T))
        spectrum = np.minimum(np.abs(eigs), np.abs(eigs - 1.0))
        return {
            "symmetry": float(np.linalg.norm(h - h.T) / max(np.linalg.norm(h), 1e-300)),
            "idempotence": float(np.linalg.norm(h @ h - h)),
            "spectrum": float(spectrum.max()),
            "trace": float(abs(np.trace(h) - self.source_rank)),
        }

    def is_valid(self) -> bool:
        res = self.invariant_residuals()
        return (
            res["symmetry"] <= 1e-10
            and res["idempotence"] <= 1e-8
            and res["spectrum"] <= 1e-8
            and res["trace"] <= 1e-6
        )


@dataclass(frozen=True)
class ExpectedProjector:
    mean_h: np.ndarray
    lambda_min_hat: float
    lambda_max_hat: float
    std_err: float
    samples: int


def sample_sketch(spec: SketchSpec, rng: np.random.Generator) -> np.ndarray:
    """Draw ``B_S`` (m x r) or ``A_S`` (r x n) according to ``spec``."""
    shape = spec.sketch_shape
    if spec.distribution is SketchDistribution.GAUSSIAN:
        return rng.standard_normal(shape)
    if spec.distribution is SketchDistribution.RADEMACHER:
        return rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0
    # coordinate subset: r distinct basis vectors of the ambient space
    idx = rng.choice(spec.ambient_dim, size=spec.rank, replace=False)
    eye = np.eye(spec.ambient_dim)
    if spec.side is SketchSide.LEFT:
        return eye[:, idx]
    return eye[idx, :]


def build_projector(sketch, side) -> Projector:
    """Orthogonal projector onto the column (Left) or row (Right) space."""
    side = enum_member(SketchSide, side, "sketch side")
    s = as_matrix(sketch, "sketch")
    if side is SketchSide.LEFT:
        gram = s.T @ s
        pinv, rank = pseudo_inverse_with_rank(gram)
        h = s @ pinv @ s.T
    else:
        gram = s @ s.T
        pinv, rank = pseudo_inverse_with_rank(gram)
        h = s.T @ pinv @ s
    h = 0.5 * (h + h.T)
    return Projector(h=h, source_rank=rank, side=side)


def estimate_expected_projector(
    spec: SketchSpec, samples: int, rng: np.random.Generator
) -> ExpectedProjector:
    """Monte Carlo estimate of E[H] and its extreme eigenvalues."""
    if samples < 1:
        raise InvalidSpec(f"samples must be >= 1, got {samples}")
    dim = spec.ambient_dim
    total = np.zeros((dim, dim))
    total_sq = np.zeros((dim, dim))
    for _ in range(samples):
        h = build_projector(sample_sketch(spec, rng), spec.side).h
        total += h
        total_sq += h * h
    mean_h = total / samples
    if samples > 1:
        var = np.maximum(total_sq / samples - mean_h**2, 0.0) * samples / (samples - 1)
        std_err = float(np.sqrt(var.max() / samples))
    else:
        std_err = 0.0
    lam_min, lam_max = sym_eig_extremes(mean_h)
    logger.debug(
        f"E[H] estimate over {samples} samples: lambda in [{lam_min:.4f}, {lam_max:.4f}], "
        f"closed form {spec.closed_form_lambda_min:.4f}"
    )
    return ExpectedProjector(
        mean_h=mean_h,
        lambda_min_hat=lam_min,
        lambda_max_hat=lam_max,
        std_err=std_err,
        samples=samples,
    )
