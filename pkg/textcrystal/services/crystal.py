"""
Crystal data model, periodic geometry and symmetry transforms

Lattices follow the row-vector convention: the rows of ``lattice`` are the cell
vectors l1, l2, l3 and cartesian positions are ``frac_coords @ lattice``.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np

from textcrystal.core.exceptions import ConfigError, InvalidCrystalError, NumericError
from textcrystal.schemas.crystal import CrystalMeta
from textcrystal.services.elements import NUM_TYPE_CLASSES

logger = logging.getLogger(__name__)

_SHELL = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=float)


def wrap_frac(x) -> np.ndarray:
    """Fractional part of every entry, mapped into [0, 1)"""
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise NumericError("wrap_frac received non-finite coordinates")
    out = arr - np.floor(arr)
    # x - floor(x) rounds to 1.0 for tiny negative x
    return np.where(out >= 1.0, 0.0, out)


@dataclass(frozen=True)
class LatticeParams:
    a: float
    b: float
    c: float
    alpha: float
    beta: float
    gamma: float

    def __post_init__(self):
        if min(self.a, self.b, self.c) <= 0:
            raise InvalidCrystalError(f"Lattice lengths must be positive: {self}")
        for angle in (self.alpha, self.beta, self.gamma):
            if not 0.0 < angle < 180.0:
                raise InvalidCrystalError(f"Lattice angles must lie in (0, 180): {self}")
        if self.gram_factor() <= 0:
            raise InvalidCrystalError(f"Angle triple is not realizable: {self}")

    def gram_factor(self) -> float:
        """1 - cos²α - cos²β - cos²γ + 2 cosα cosβ cosγ; positive iff realizable"""
        ca, cb, cg = (math.cos(math.radians(x)) for x in (self.alpha, self.beta, self.gamma))
        return 1.0 - ca * ca - cb * cb - cg * cg + 2.0 * ca * cb * cg

    def volume(self) -> float:
        return self.a * self.b * self.c * math.sqrt(self.gram_factor())

    def lengths(self) -> Tuple[float, float, float]:
        return (self.a, self.b, self.c)

    def angles(self) -> Tuple[float, float, float]:
        return (self.alpha, self.beta, self.gamma)


def lattice_from_params(p: LatticeParams) -> np.ndarray:
    """Row lattice with l1 along x and l2 in the xy plane"""
    ca, cb, cg = (math.cos(math.radians(x)) for x in (p.alpha, p.beta, p.gamma))
    sg = math.sin(math.radians(p.gamma))
    cy = (ca - cb * cg) / sg
    cz2 = 1.0 - cb * cb - cy * cy
    if cz2 <= 0:
        raise InvalidCrystalError(f"Angle triple is not realizable: {p}")
    return np.array([
        [p.a, 0.0, 0.0],
        [p.b * cg, p.b * sg, 0.0],
        [p.c * cb, p.c * cy, p.c * math.sqrt(cz2)],
    ])


def params_from_lattice(lattice) -> LatticeParams:
    L = np.asarray(lattice, dtype=float)
    lengths = np.linalg.norm(L, axis=1)

    def angle(i: int, j: int) -> float:
        cos = float(np.dot(L[i], L[j]) / (lengths[i] * lengths[j]))
        return math.degrees(math.acos(max(-1.0, min(1.0, cos))))

    return LatticeParams(
        a=float(lengths[0]), b=float(lengths[1]), c=float(lengths[2]),
        alpha=angle(1, 2), beta=angle(0, 2), gamma=angle(0, 1),
    )


def reduce_lattice(lattice, max_iter: int = 100) -> Tuple[np.ndarray, np.ndarray]:
    """Niggli-style pairwise reduction.

    Returns ``(reduced, M)`` with ``reduced = M @ lattice``, ``M`` unimodular and
    ``det(reduced) > 0`` whenever ``det(lattice) != 0``. Rows are sorted by length.
    """
    L = np.array(lattice, dtype=float)
    M = np.eye(3)
    for _ in range(max_iter):
        changed = False
        for i, j in itertools.permutations(range(3), 2):
            norm_j = float(np.dot(L[j], L[j]))
            if norm_j == 0:
                continue
            k = round(float(np.dot(L[i], L[j])) / norm_j)
            if k != 0:
                candidate = L[i] - k * L[j]
                if np.dot(candidate, candidate) < np.dot(L[i], L[i]) - 1e-12 * norm_j:
                    L[i] = candidate
                    M[i] = M[i] - k * M[j]
                    changed = True
        # also try the face diagonals l_i ± l_j ± l_k for the longest vector
        order = np.argsort(np.einsum("ij,ij->i", L, L))
        L, M = L[order], M[order]
        longest = L[2]
        for s1, s2 in itertools.product((-1, 1), repeat=2):
            candidate = longest + s1 * L[0] + s2 * L[1]
            if np.dot(candidate, candidate) < np.dot(longest, longest) - 1e-12:
                L[2] = candidate
                M[2] = M[2] + s1 * M[0] + s2 * M[1]
                changed = True
                break
        if not changed:
            break
    order = np.argsort(np.einsum("ij,ij->i", L, L), kind="stable")
    L, M = L[order], M[order]
    if np.linalg.det(L) < 0:
        L[2], M[2] = -L[2], -M[2]
    return L, np.rint(M)


@dataclass(frozen=True, eq=False)
class Crystal:
    """One material: atom labels A, fractional coordinates X, lattice L"""

    atom_types: np.ndarray
    frac_coords: np.ndarray
    lattice: np.ndarray
    id: str = ""
    meta: Optional[CrystalMeta] = field(default=None)

    def __post_init__(self):
        types = np.asarray(self.atom_types)
        if types.ndim != 1 or types.size < 1:
            raise InvalidCrystalError(f"Crystal {self.id!r} needs at least one atom")
        if not np.issubdtype(types.dtype, np.integer):
            if not np.all(np.equal(np.mod(types, 1), 0)):
                raise InvalidCrystalError(f"Crystal {self.id!r} has non-integer atom labels")
        types = types.astype(np.int64)
        if types.min() < 0 or types.max() >= NUM_TYPE_CLASSES:
            raise InvalidCrystalError(
                f"Crystal {self.id!r} has atom labels outside 0..{NUM_TYPE_CLASSES - 1}"
            )
        coords = np.asarray(self.frac_coords, dtype=float)
        if coords.shape != (types.size, 3):
            raise InvalidCrystalError(
                f"Crystal {self.id!r}: frac_coords shape {coords.shape} does not match {types.size} atoms"
            )
        lattice = np.asarray(self.lattice, dtype=float)
        if lattice.shape != (3, 3):
            raise InvalidCrystalError(f"Crystal {self.id!r}: lattice must be 3x3")
        if not np.all(np.isfinite(lattice)):
            raise NumericError(f"Crystal {self.id!r}: non-finite lattice")
        if np.linalg.det(lattice) <= 0:
            raise InvalidCrystalError(f"Crystal {self.id!r}: lattice determinant must be positive")
        coords = wrap_frac(coords)
        for name, arr in (("atom_types", types), ("frac_coords", coords), ("lattice", lattice)):
            arr = np.array(arr)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def num_atoms(self) -> int:
        return int(self.atom_types.size)

    @property
    def volume(self) -> float:
        return float(np.linalg.det(self.lattice))

    @property
    def params(self) -> LatticeParams:
        return params_from_lattice(self.lattice)

    def with_(self, **changes) -> "Crystal":
        return replace(self, **changes)


def frac_to_cart(c: Crystal) -> np.ndarray:
    return c.frac_coords @ c.lattice


def _reduced_frame(c: Crystal) -> Tuple[np.ndarray, np.ndarray]:
    """Reduced lattice and coordinates expressed in it"""
    reduced, M = reduce_lattice(c.lattice)
    frac = wrap_frac(c.frac_coords @ np.linalg.inv(M))
    return reduced, frac


def min_periodic_distance(c: Crystal, i: int, j: int) -> float:
    """Shortest distance between atom i and any periodic image of atom j (Å)"""
    reduced, frac = _reduced_frame(c)
    diff = frac[i] - frac[j]
    diff = diff - np.round(diff)
    images = (diff[None, :] + _SHELL) @ reduced
    dist = np.linalg.norm(images, axis=1)
    if i == j:
        dist = dist[np.any(_SHELL != 0, axis=1)]
    return float(dist.min())


def distance_matrix(c: Crystal) -> np.ndarray:
    """Minimum-image distances; the diagonal holds the nearest self-image distance"""
    reduced, frac = _reduced_frame(c)
    diff = frac[:, None, :] - frac[None, :, :]
    diff = diff - np.round(diff)
    images = (diff[:, :, None, :] + _SHELL[None, None, :, :]) @ reduced
    dist = np.linalg.norm(images, axis=-1)
    zero_shell = int(np.flatnonzero(np.all(_SHELL == 0, axis=1))[0])
    n = c.num_atoms
    dist[np.arange(n), np.arange(n), zero_shell] = np.inf
    return dist.min(axis=-1)


def neighbor_distances(c: Crystal, cutoff: float) -> np.ndarray:
    """All periodic pair distances in (0, cutoff], over every ordered pair and image"""
    L = c.lattice
    volume = abs(np.linalg.det(L))
    # interplanar spacings bound how many images can fall inside the cutoff
    spacings = np.array([
        volume / np.linalg.norm(np.cross(L[(k + 1) % 3], L[(k + 2) % 3])) for k in range(3)
    ])
    reach = np.ceil(cutoff / spacings).astype(int) + 1
    ranges = [np.arange(-r, r + 1) for r in reach]
    shifts = np.array(list(itertools.product(*ranges)), dtype=float)
    frac = c.frac_coords
    diff = frac[:, None, None, :] - frac[None, :, None, :] + shifts[None, None, :, :]
    dist = np.linalg.norm(diff @ L, axis=-1).ravel()
    return dist[(dist > 1e-8) & (dist <= cutoff)]


def apply_rotation(c: Crystal, Q) -> Crystal:
    """Rigidly rotate the crystal: cartesian positions x -> Q x"""
    Q = np.asarray(Q, dtype=float)
    if Q.shape != (3, 3) or not np.allclose(Q.T @ Q, np.eye(3), atol=1e-10, rtol=0):
        raise ConfigError("Rotation matrix must be orthogonal")
    if np.linalg.det(Q) < 0:
        raise ConfigError("Rotation matrix must be proper (det = +1)")
    return c.with_(lattice=c.lattice @ Q.T)


def apply_permutation(c: Crystal, perm: Sequence[int]) -> Crystal:
    perm = np.asarray(perm, dtype=int)
    if perm.shape != (c.num_atoms,) or sorted(perm.tolist()) != list(range(c.num_atoms)):
        raise ConfigError(f"Invalid permutation for {c.num_atoms} atoms: {perm.tolist()}")
    return c.with_(atom_types=c.atom_types[perm], frac_coords=c.frac_coords[perm])


def apply_periodic_shift(c: Crystal, tau) -> Crystal:
    tau = np.asarray(tau, dtype=float).reshape(1, 3)
    return c.with_(frac_coords=wrap_frac(c.frac_coords + tau))


class CrystalSystem(str, Enum):
    TRICLINIC = "triclinic"
    MONOCLINIC = "monoclinic"
    ORTHORHOMBIC = "orthorhombic"
    TETRAGONAL = "tetragonal"
    TRIGONAL = "trigonal"
    HEXAGONAL = "hexagonal"
    CUBIC = "cubic"


def classify_crystal_system(lattice, len_tol: float = 1e-2, ang_tol: float = 1.0) -> CrystalSystem:
    """Crystal system from the equality pattern of reduced-cell parameters.

    Checks run from the highest symmetry down, so ties resolve upward. Hexagonal
    cells may appear with a 60° or 120° angle between the equal edges.
    """
    reduced, _ = reduce_lattice(np.asarray(lattice, dtype=float))
    p = params_from_lattice(reduced)
    lengths = p.lengths()
    # angle opposite to edge pair: alpha is (b, c), beta is (a, c), gamma is (a, b)
    pair_angle = {(1, 2): p.alpha, (0, 2): p.beta, (0, 1): p.gamma}

    def same_len(x: float, y: float) -> bool:
        return abs(x - y) <= len_tol * max(x, y)

    def near(angle: float, target: float) -> bool:
        return abs(angle - target) <= ang_tol

    right = [near(a, 90.0) for a in p.angles()]
    equal_pairs = [pair for pair in pair_angle if same_len(lengths[pair[0]], lengths[pair[1]])]

    if len(equal_pairs) == 3 and all(right):
        return CrystalSystem.CUBIC
    for pair, angle in pair_angle.items():
        others = [a for q, a in pair_angle.items() if q != pair]
        if (pair in equal_pairs and (near(angle, 120.0) or near(angle, 60.0))
                and all(near(a, 90.0) for a in others)):
            return CrystalSystem.HEXAGONAL
    if len(equal_pairs) == 3:
        # negating one edge maps (α, β, γ) to (α, 180-β, 180-γ); fold before comparing
        folded = [min(a, 180.0 - a) for a in p.angles()]
        if all(abs(a - folded[0]) <= ang_tol for a in folded):
            return CrystalSystem.TRIGONAL
    if all(right):
        return CrystalSystem.TETRAGONAL if equal_pairs else CrystalSystem.ORTHORHOMBIC
    if sum(right) == 2:
        return CrystalSystem.MONOCLINIC
    return CrystalSystem.TRICLINIC
