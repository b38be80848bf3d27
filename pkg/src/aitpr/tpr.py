"""Tensor-product representation primitives.

A structure is stored by binding filler vectors (the content) to role
vectors (the slots) and summing the outer products.  With orthonormal
roles the fillers are recoverable exactly, up to float rounding, by
projecting the sum back onto a role.  The decoder itself never uses the
outer-product form; its gate binds contexts with an elementwise product
(:func:`hadamard_bind`).  Both are kept here so the algebra is available
in one place.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, NumericError, OrthogonalityError

# Pairwise-orthonormality slack for validated role sets.
GRAM_TOL = 1e-10


@dataclass(frozen=True)
class RoleSet:
    """n role vectors of dimension d_m, rows pairwise orthonormal."""

    roles: np.ndarray

    def __post_init__(self):
        roles = np.asarray(self.roles, dtype=np.float64)
        if roles.ndim != 2:
            raise DimensionError(f"role matrix must be 2-D, got shape {roles.shape}")
        n, d_m = roles.shape
        if n > d_m:
            raise OrthogonalityError(
                f"cannot fit {n} orthonormal roles in dimension {d_m}"
            )
        gram = roles @ roles.T
        err = float(np.abs(gram - np.eye(n)).max())
        if err > GRAM_TOL:
            raise OrthogonalityError(
                f"role rows are not orthonormal (max Gram deviation {err:.3e})"
            )
        object.__setattr__(self, "roles", roles)

    @property
    def count(self) -> int:
        return self.roles.shape[0]

    @property
    def dim(self) -> int:
        return self.roles.shape[1]


@dataclass(frozen=True)
class FillerSet:
    """n filler vectors of dimension d_n."""

    fillers: np.ndarray

    def __post_init__(self):
        fillers = np.asarray(self.fillers, dtype=np.float64)
        if fillers.ndim != 2:
            raise DimensionError(
                f"filler matrix must be 2-D, got shape {fillers.shape}"
            )
        if not np.isfinite(fillers).all():
            raise NumericError("filler matrix contains non-finite entries")
        object.__setattr__(self, "fillers", fillers)

    @property
    def count(self) -> int:
        return self.fillers.shape[0]


@dataclass(frozen=True)
class BoundRepresentation:
    """Sum of filler-role outer products, shape d_n x d_m."""

    s: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.s, dtype=np.float64)
        if s.ndim != 2:
            raise DimensionError(f"bound matrix must be 2-D, got shape {s.shape}")
        object.__setattr__(self, "s", s)


def generate_roles(n: int, d_m: int, seed: int) -> RoleSet:
    """Draw n orthonormal role vectors of dimension d_m, deterministically.

    A seeded Gaussian matrix is orthonormalized by QR; the Q columns are
    sign-fixed against the R diagonal so the result depends only on the
    seed, not on the LAPACK build.
    """
    if n < 1:
        raise DimensionError(f"need at least one role, got n={n}")
    if n > d_m:
        raise OrthogonalityError(
            f"cannot fit {n} orthonormal roles in dimension {d_m}"
        )
    rng = np.random.default_rng(seed)
    gauss = rng.standard_normal((d_m, n))
    q, r = np.linalg.qr(gauss)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return RoleSet(roles=(q * signs).T)


def bind(f: FillerSet, r: RoleSet) -> BoundRepresentation:
    """s = sum_i outer(f_i, r_i); requires one role per filler."""
    if f.count == 0:
        raise DimensionError("binding needs at least one filler/role pair")
    if f.count != r.count:
        raise DimensionError(
            f"filler count {f.count} does not match role count {r.count}"
        )
    return BoundRepresentation(s=f.fillers.T @ r.roles)


def unbind(s: BoundRepresentation, r_j: np.ndarray) -> np.ndarray:
    """Project the bound sum onto one role: returns s @ r_j.

    Equals the stored filler to ~1e-8 when the roles were orthonormal and
    r_j is one of them; any component of r_j outside the role span maps
    to zero.
    """
    r_j = np.asarray(r_j, dtype=np.float64)
    if r_j.ndim != 1 or r_j.shape[0] != s.s.shape[1]:
        raise DimensionError(
            f"role vector shape {r_j.shape} does not match bound matrix {s.s.shape}"
        )
    return s.s @ r_j


def hadamard_bind(context: ad.Tensor, role: ad.Tensor) -> ad.Tensor:
    """Elementwise binding of two equal-length vectors.

    This is the form the decoder gate actually uses; it participates in
    the differentiable pass, unlike the outer-product algebra above.
    """
    if context.data.shape != role.data.shape:
        raise DimensionError(
            f"hadamard_bind needs equal shapes, got {context.data.shape} "
            f"and {role.data.shape}"
        )
    return ad.mul(context, role)
