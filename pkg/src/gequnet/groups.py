"""Finite rotation/reflection groups C_n and D_n acting on square grids.

An element ``(r, m)`` acts on the plane as ``R^r F^m``: first the mirror
``F`` (if ``m``), then ``r`` rotation steps of ``360/n`` degrees. On a
``k x k`` stencil a quarter turn maps ``(i, j) -> (j, k-1-i)`` and the mirror
maps ``(i, j) -> (i, k-1-j)``. Elements are enumerated rotations first,
then reflected elements, and indexed ``r + n*m``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np

SUPPORTED_ORDERS = (1, 2, 4, 8)


class UnsupportedGroupError(ValueError):
    pass


class GroupElement(NamedTuple):
    r: int
    m: bool = False


@dataclass(frozen=True)
class GroupSpec:
    kind: str  # "cyclic" | "dihedral"
    n: int

    def __post_init__(self):
        if self.kind not in ("cyclic", "dihedral"):
            raise UnsupportedGroupError(f"unknown group kind {self.kind!r}")
        if self.n not in SUPPORTED_ORDERS:
            raise UnsupportedGroupError(f"rotation order {self.n} not in {SUPPORTED_ORDERS}")

    @property
    def order(self) -> int:
        return self.n * (2 if self.kind == "dihedral" else 1)

    @property
    def name(self) -> str:
        return f"{'c' if self.kind == 'cyclic' else 'd'}{self.n}"

    @classmethod
    def parse(cls, name: str) -> "GroupSpec":
        """``"c4"`` -> cyclic/4, ``"D8"`` -> dihedral/8."""
        s = name.strip().lower()
        if len(s) < 2 or s[0] not in "cd" or not s[1:].isdigit():
            raise UnsupportedGroupError(f"cannot parse group name {name!r}")
        return cls("cyclic" if s[0] == "c" else "dihedral", int(s[1:]))

    def __str__(self):
        return self.name.upper()


C1 = GroupSpec("cyclic", 1)


def enumerate_elements(spec: GroupSpec) -> list[GroupElement]:
    rots = [GroupElement(r, False) for r in range(spec.n)]
    if spec.kind == "cyclic":
        return rots
    return rots + [GroupElement(r, True) for r in range(spec.n)]


def _check(spec: GroupSpec, g: GroupElement) -> None:
    if not 0 <= g.r < spec.n or (g.m and spec.kind == "cyclic"):
        raise ValueError(f"element {g} is not in {spec}")


def index_of(spec: GroupSpec, g: GroupElement) -> int:
    _check(spec, g)
    return g.r + spec.n * int(g.m)


def compose(spec: GroupSpec, g: GroupElement, h: GroupElement) -> GroupElement:
    """``g ∘ h`` under the dihedral law ``F R F = R^-1``."""
    _check(spec, g)
    _check(spec, h)
    r = (g.r - h.r if g.m else g.r + h.r) % spec.n
    return GroupElement(r, g.m != h.m)


def inverse(spec: GroupSpec, g: GroupElement) -> GroupElement:
    _check(spec, g)
    if g.m:
        return g  # every reflection is an involution
    return GroupElement((-g.r) % spec.n, False)


@dataclass(frozen=True)
class CayleyTable:
    compose: np.ndarray  # [i, j] -> index of e_i ∘ e_j
    inverse: np.ndarray  # [i] -> index of e_i^-1


@lru_cache(maxsize=None)
def cayley_table(spec: GroupSpec) -> CayleyTable:
    els = enumerate_elements(spec)
    comp = np.array(
        [[index_of(spec, compose(spec, g, h)) for h in els] for g in els], dtype=np.intp
    )
    inv = np.array([index_of(spec, inverse(spec, g)) for g in els], dtype=np.intp)
    comp.setflags(write=False)
    inv.setflags(write=False)
    return CayleyTable(comp, inv)


def fiber_permutation(spec: GroupSpec, g: GroupElement) -> np.ndarray:
    """Left regular action: ``perm[index(h)] = index(g ∘ h)``."""
    return cayley_table(spec).compose[index_of(spec, g)].copy()


def rotation_eighths(spec: GroupSpec, g: GroupElement) -> int:
    """Rotation angle of ``g`` in units of 45 degrees."""
    return g.r * 8 // spec.n


def is_exact(spec: GroupSpec, g: GroupElement) -> bool:
    """True when ``g`` maps the pixel grid onto itself (90-degree multiples)."""
    return rotation_eighths(spec, g) % 2 == 0


def exact_subgroup(spec: GroupSpec) -> list[GroupElement]:
    return [g for g in enumerate_elements(spec) if is_exact(spec, g)]


def act_on_point(spec: GroupSpec, g: GroupElement, p: tuple[int, int], k: int) -> tuple[int, int]:
    _check(spec, g)
    i, j = p
    if not (0 <= i < k and 0 <= j < k):
        raise ValueError(f"point {p} outside {k}x{k} stencil")
    eighths = rotation_eighths(spec, g)
    if eighths % 2:
        raise ValueError(
            f"{g} rotates by {45 * eighths} degrees; use transform_kernel for 45-degree steps"
        )
    if g.m:
        j = k - 1 - j
    for _ in range(eighths // 2):
        i, j = j, k - 1 - i
    return i, j


def _ring_order(k: int, rho: int) -> list[tuple[int, int]]:
    """Cells of the square ring at Chebyshev radius ``rho``, clockwise from its top-left."""
    c = k // 2
    lo, hi = c - rho, c + rho
    top = [(lo, j) for j in range(lo, hi)]
    right = [(i, hi) for i in range(lo, hi)]
    bottom = [(hi, j) for j in range(hi, lo, -1)]
    left = [(i, lo) for i in range(hi, lo, -1)]
    return top + right + bottom + left


def _ring_shift_map(k: int, eighths: int) -> dict[tuple[int, int], tuple[int, int]]:
    # rotating by 45 degrees advances rho cells along the ring of radius rho;
    # two such steps coincide with the exact quarter turn
    c = k // 2
    out = {(c, c): (c, c)}
    for rho in range(1, c + 1):
        ring = _ring_order(k, rho)
        s = (eighths * rho) % len(ring)
        for idx, p in enumerate(ring):
            out[p] = ring[(idx + s) % len(ring)]
    return out


@lru_cache(maxsize=None)
def kernel_destinations(spec: GroupSpec, g: GroupElement, k: int) -> np.ndarray:
    """Flat stencil index that cell ``q`` is moved to by ``g``.

    Multiples of 90 degrees use :func:`act_on_point`. Odd multiples of 45
    degrees interpolate linearly along each square ring of the stencil; a
    45-degree step lands exactly on the ring cell ``rho`` positions ahead,
    so the interpolation weights are (1, 0) and the map stays a permutation.
    """
    if k % 2 == 0:
        raise ValueError("kernel size must be odd")
    _check(spec, g)
    eighths = rotation_eighths(spec, g)
    ring45 = None
    exact = g
    if eighths % 2:
        # R^r F^m = R45 (R^(r-1) F^m); the ring shift commutes with quarter turns
        ring45 = _ring_shift_map(k, 1)
        exact = GroupElement(g.r - 1, g.m)
    dest = np.empty(k * k, dtype=np.intp)
    for i in range(k):
        for j in range(k):
            p = act_on_point(spec, exact, (i, j), k)
            if ring45 is not None:
                p = ring45[p]
            dest[i * k + j] = p[0] * k + p[1]
    dest.setflags(write=False)
    return dest


@lru_cache(maxsize=None)
def kernel_sources(spec: GroupSpec, g: GroupElement, k: int) -> np.ndarray:
    """``(T_g psi).flat[q] == psi.flat[src[q]]``."""
    dest = kernel_destinations(spec, g, k)
    src = np.empty_like(dest)
    src[dest] = np.arange(k * k)
    src.setflags(write=False)
    return src


def transform_kernel(kernel: np.ndarray, g: GroupElement, spec: GroupSpec) -> np.ndarray:
    """Apply ``g`` to the trailing ``k x k`` stencil axes of ``kernel``."""
    k = kernel.shape[-1]
    if kernel.shape[-2] != k:
        raise ValueError("kernel must be square")
    src = kernel_sources(spec, g, k)
    flat = kernel.reshape(*kernel.shape[:-2], k * k)
    return flat[..., src].reshape(kernel.shape)


def act_on_image(spec: GroupSpec, g: GroupElement, x: np.ndarray) -> np.ndarray:
    """Spatial action on the last two axes (exact elements only)."""
    from .tensor import flip_h, rot90

    eighths = rotation_eighths(spec, g)
    if eighths % 2:
        raise ValueError(f"{g} is not a symmetry of the pixel grid")
    y = flip_h(x) if g.m else x
    return rot90(y, eighths // 2)


def act_on_gfeatures(spec: GroupSpec, g: GroupElement, data: np.ndarray, fiber_axis: int = 2) -> np.ndarray:
    """Regular-representation action: rotate space and move fiber ``h`` to ``g ∘ h``."""
    perm = fiber_permutation(spec, g)
    moved = np.empty_like(data)
    src = np.moveaxis(data, fiber_axis, 0)
    dst = np.moveaxis(moved, fiber_axis, 0)
    dst[perm] = src
    return act_on_image(spec, g, moved)
