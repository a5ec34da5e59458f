"""
Structure matching with ltol / stol / angle_tol thresholds

Both cells are reduced, the generated cell is re-expressed in every integer
basis (entries in -2..2, det +1) whose edge lengths and angles agree with the
reference within tolerance, and atoms are paired species by species with a
minimum-cost assignment after anchoring one atom of the rarest species.
Distances use the mean metric of the two cells and are normalized by
(V / N)^(1/3) with V the mean volume.
"""

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from textcrystal.core.exceptions import DataError
from textcrystal.schemas.config import MatcherConfig
from textcrystal.services.crystal import Crystal, reduce_lattice, wrap_frac

logger = logging.getLogger(__name__)

_COMBOS = np.array([n for n in itertools.product(range(-2, 3), repeat=3) if any(n)], dtype=float)
_SHELL = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=float)
_REFINE_ITERATIONS = 5


def _angle(u: np.ndarray, v: np.ndarray) -> float:
    cos = np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v))
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


@dataclass(frozen=True)
class SiteFrame:
    """Both structures expressed in one shared cell"""

    gen_frac: np.ndarray
    ref_frac: np.ndarray
    metric_factor: np.ndarray  # C with C Cᵀ = mean Gram matrix
    norm: float

    def min_image(self, diff: np.ndarray) -> np.ndarray:
        """Shortest periodic image of fractional difference vectors (..., 3)"""
        diff = diff - np.round(diff)
        images = diff[..., None, :] + _SHELL
        lengths = np.linalg.norm(images @ self.metric_factor, axis=-1)
        best = np.argmin(lengths, axis=-1)
        return np.take_along_axis(images, best[..., None, None], axis=-2)[..., 0, :]

    def lengths(self, diff: np.ndarray) -> np.ndarray:
        return np.linalg.norm(diff @ self.metric_factor, axis=-1)


class StructureMatcher:
    """Decides whether two crystals are the same structure and how far apart their sites are"""

    def __init__(self, config: Optional[MatcherConfig] = None):
        self.config = config or MatcherConfig()

    def lattice_mappings(self, gen_lattice: np.ndarray, ref_lattice: np.ndarray) -> List[np.ndarray]:
        """Integer matrices M (det +1) such that M @ gen_lattice matches ref_lattice in shape"""
        cfg = self.config
        vectors = _COMBOS @ gen_lattice
        lengths = np.linalg.norm(vectors, axis=1)
        ref_lengths = np.linalg.norm(ref_lattice, axis=1)
        candidates = []
        for lr in ref_lengths:
            ok = np.abs(lengths - lr) <= cfg.ltol * (lengths + lr) / 2.0
            candidates.append(np.flatnonzero(ok))
        ref_angles = {(i, j): _angle(ref_lattice[i], ref_lattice[j]) for i, j in ((0, 1), (0, 2), (1, 2))}

        mappings = []
        for c0 in candidates[0]:
            for c1 in candidates[1]:
                if abs(_angle(vectors[c0], vectors[c1]) - ref_angles[(0, 1)]) > cfg.angle_tol:
                    continue
                for c2 in candidates[2]:
                    if abs(_angle(vectors[c0], vectors[c2]) - ref_angles[(0, 2)]) > cfg.angle_tol:
                        continue
                    if abs(_angle(vectors[c1], vectors[c2]) - ref_angles[(1, 2)]) > cfg.angle_tol:
                        continue
                    M = _COMBOS[[c0, c1, c2]]
                    if round(np.linalg.det(M)) == 1:
                        mappings.append(M)
        return mappings

    def site_frame(self, gen: Crystal, ref: Crystal, M: np.ndarray,
                   gen_reduced: Tuple[np.ndarray, np.ndarray],
                   ref_reduced: Tuple[np.ndarray, np.ndarray]) -> SiteFrame:
        G, gen_frac = gen_reduced
        R, ref_frac = ref_reduced
        G_mapped = M @ G
        M_inv = np.round(np.linalg.inv(M))
        gram = (R @ R.T + G_mapped @ G_mapped.T) / 2.0
        volume = (abs(np.linalg.det(R)) + abs(np.linalg.det(G_mapped))) / 2.0
        return SiteFrame(
            gen_frac=wrap_frac(gen_frac @ M_inv),
            ref_frac=ref_frac,
            metric_factor=np.linalg.cholesky(gram),
            norm=float((volume / ref.num_atoms) ** (1.0 / 3.0)),
        )

    @staticmethod
    def _reduced(c: Crystal) -> Tuple[np.ndarray, np.ndarray]:
        reduced, M = reduce_lattice(c.lattice)
        return reduced, wrap_frac(c.frac_coords @ np.linalg.inv(M))

    def _match_anchor(self, frame: SiteFrame, species: Dict[int, Tuple[np.ndarray, np.ndarray]],
                      tau: np.ndarray) -> Tuple[float, float]:
        """(max, rms) normalized displacement after assignment and translation refinement"""
        n = frame.ref_frac.shape[0]
        previous = None
        residual = np.zeros((n, 3))
        for _ in range(_REFINE_ITERATIONS):
            shifted = frame.gen_frac + tau
            gen_order = np.empty(n, dtype=int)
            ref_order = np.empty(n, dtype=int)
            pos = 0
            for gen_idx, ref_idx in species.values():
                diff = frame.min_image(frame.ref_frac[ref_idx][None, :, :] - shifted[gen_idx][:, None, :])
                cost = frame.lengths(diff) ** 2
                rows, cols = linear_sum_assignment(cost)
                size = len(rows)
                gen_order[pos:pos + size] = gen_idx[rows]
                ref_order[pos:pos + size] = ref_idx[cols]
                pos += size
            disp = frame.min_image(frame.ref_frac[ref_order] - shifted[gen_order])
            mean = disp.mean(axis=0)
            residual = disp - mean
            assignment = tuple(ref_order[np.argsort(gen_order)])
            tau = tau + mean
            if assignment == previous:
                break
            previous = assignment
        dist = frame.lengths(residual) / frame.norm
        return float(dist.max()), float(np.sqrt(np.mean(dist ** 2)))

    def get_rms(self, gen: Crystal, ref: Crystal) -> Optional[float]:
        """Normalized RMS displacement of the best accepted correspondence, or None"""
        if gen.num_atoms != ref.num_atoms or sorted(gen.atom_types.tolist()) != sorted(ref.atom_types.tolist()):
            return None
        gen_reduced = self._reduced(gen)
        ref_reduced = self._reduced(ref)
        mappings = self.lattice_mappings(gen_reduced[0], ref_reduced[0])
        if not mappings:
            return None

        labels, counts = np.unique(ref.atom_types, return_counts=True)
        rarest = int(labels[np.argmin(counts)])
        species = {
            int(label): (np.flatnonzero(gen.atom_types == label), np.flatnonzero(ref.atom_types == label))
            for label in labels
        }
        j0 = int(np.flatnonzero(ref.atom_types == rarest)[0])
        anchors = np.flatnonzero(gen.atom_types == rarest)

        best: Optional[float] = None
        for M in mappings:
            frame = self.site_frame(gen, ref, M, gen_reduced, ref_reduced)
            for i in anchors:
                tau = frame.ref_frac[j0] - frame.gen_frac[i]
                max_dist, rms = self._match_anchor(frame, species, tau)
                if max_dist <= self.config.stol and (best is None or rms < best):
                    best = rms
        return best

    def fit(self, gen: Crystal, ref: Crystal) -> bool:
        return self.get_rms(gen, ref) is not None


def match_structures(gen: Crystal, ref: Crystal, cfg: Optional[MatcherConfig] = None) -> Optional[float]:
    return StructureMatcher(cfg).get_rms(gen, ref)


def match_rate(
    gens: Sequence[Sequence[Crystal]],
    refs: Sequence[Crystal],
    cfg: Optional[MatcherConfig] = None,
    jobs: int = 1,
) -> Tuple[float, Optional[float]]:
    """(percentage of refs matched by at least one of their samples, mean best rmse of matches)"""
    if len(gens) != len(refs):
        raise DataError("Need one list of generated samples per reference")
    if not refs:
        return 0.0, None
    matcher = StructureMatcher(cfg)

    def best_rms(pair) -> Optional[float]:
        samples, ref = pair
        values = [r for r in (matcher.get_rms(g, ref) for g in samples) if r is not None]
        return min(values) if values else None

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(best_rms, zip(gens, refs)))
    else:
        results = [best_rms(pair) for pair in zip(gens, refs)]
    matched = [r for r in results if r is not None]
    rate = 100.0 * len(matched) / len(refs)
    logger.info(f"🔍 Match rate {rate:.2f}% over {len(refs)} references")
    return rate, (float(np.mean(matched)) if matched else None)
