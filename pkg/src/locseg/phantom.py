"""Deterministic synthetic PET/CT cases for exercising the pipeline.

Each case is an elliptical soft-tissue body on an air background.  PET
carries a uniform background uptake inside the body plus two kinds of hot
ellipsoids: *decoys* (large, bright, anchored at stereotyped in-plane
positions, standing in for normal high-uptake organs, never labeled) and
*lesions* (smaller, dimmer, placed anywhere in the body including right next
to decoys, labeled exactly on their ellipsoid voxels).  That construction
reproduces the two failure regimes the cascade targets: tiny targets, and
targets adjacent to bright normal structures that a local 3D view cannot
tell apart.

Hot-spot boundaries are softened by a Gaussian blur of the uptake excess so
predicted probabilities have a learnable gradient, while the label mask stays
the exact (unblurred) ellipsoid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import Case, Volume, write_nifti

__all__ = ["PhantomSpec", "PhantomGenerationError", "generate_case",
           "generate_dataset", "write_case", "MANIFEST_NAME"]

MANIFEST_NAME = "manifest.tsv"

# in-plane (axis0, axis2) anchor fractions for decoy organs, cycled in order;
# lesions may land next to them but decoy centers themselves are stereotyped
_DECOY_ANCHORS = ((0.32, 0.30), (0.68, 0.30), (0.50, 0.78), (0.36, 0.66))

_AIR_HU = -1000.0


class PhantomGenerationError(RuntimeError):
    """Raised when blob placement cannot satisfy the overlap constraints."""


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry, intensity and count ranges for one phantom family."""

    shape: tuple[int, int, int] = (64, 96, 80)
    spacing: tuple[float, float, float] = (4.0, 4.0, 4.0)
    lesion_count: tuple[int, int] = (0, 3)
    lesion_radius_mm: tuple[float, float] = (8.0, 16.0)
    decoy_count: tuple[int, int] = (1, 3)
    decoy_radius_mm: tuple[float, float] = (18.0, 28.0)
    lesion_uptake: tuple[float, float] = (4.0, 8.0)
    decoy_uptake: tuple[float, float] = (8.0, 14.0)
    background_uptake: float = 1.0
    ct_tissue_hu: tuple[float, float] = (120.0, 200.0)
    blur_sigma_mm: float = 2.0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("lesion_count", "lesion_radius_mm", "decoy_count",
                     "decoy_radius_mm", "lesion_uptake", "decoy_uptake",
                     "ct_tissue_hu"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range ({lo}, {hi}) is empty")
        if self.lesion_uptake[0] <= self.background_uptake:
            raise ValueError("minimum lesion uptake must exceed background uptake")
        if any(n < 8 for n in self.shape):
            raise ValueError(f"phantom shape {self.shape} is too small")


def _ellipsoid_mask(shape, spacing, center_vox, radii_mm) -> np.ndarray:
    """Boolean mask of voxels whose center lies inside the ellipsoid."""
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    rho = sum(((g - c) * s / r) ** 2
              for g, c, s, r in zip(grids, center_vox, spacing, radii_mm))
    return rho <= 1.0


def _body_mask(shape, spacing) -> np.ndarray:
    center = tuple((n - 1) / 2.0 for n in shape)
    radii = tuple(0.44 * (n - 1) * s for n, s in zip(shape, spacing))
    return _ellipsoid_mask(shape, spacing, center, radii)


def _sample_radii(rng, radius_range) -> np.ndarray:
    base = rng.uniform(*radius_range)
    return base * rng.uniform(0.85, 1.15, size=3)


def generate_case(spec: PhantomSpec, seed: int, case_id: str | None = None,
                  lesion_count: int | None = None) -> Case:
    """Build one case; identical output for identical ``(spec, seed)``.

    ``lesion_count`` overrides the drawn count (used by the dataset splitter
    to force lesion-free negatives).
    """
    rng = np.random.default_rng([int(spec.seed), int(seed)])
    shape, spacing = spec.shape, spec.spacing
    body = _body_mask(shape, spacing)
    interior = np.argwhere(body)

    ct = np.full(shape, _AIR_HU, dtype=np.float32)
    ct[body] = rng.uniform(*spec.ct_tissue_hu)

    # decoys first: stereotyped in-plane anchors with a little jitter
    n_decoy = int(rng.integers(spec.decoy_count[0], spec.decoy_count[1] + 1))
    decoy_mask = np.zeros(shape, dtype=bool)
    excess = np.zeros(shape, dtype=np.float32)
    for i in range(n_decoy):
        a0, a2 = _DECOY_ANCHORS[i % len(_DECOY_ANCHORS)]
        center = (
            (a0 + rng.uniform(-0.04, 0.04)) * (shape[0] - 1),
            rng.uniform(0.30, 0.70) * (shape[1] - 1),
            (a2 + rng.uniform(-0.04, 0.04)) * (shape[2] - 1),
        )
        radii = _sample_radii(rng, spec.decoy_radius_mm)
        blob = _ellipsoid_mask(shape, spacing, center, radii) & body
        uptake = rng.uniform(*spec.decoy_uptake)
        decoy_mask |= blob
        np.maximum(excess, np.where(blob, uptake - spec.background_uptake, 0.0),
                   out=excess)

    # lesions: anywhere in the body, never overlapping a decoy or each other
    if lesion_count is None:
        lesion_count = int(rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1))
    label = np.zeros(shape, dtype=bool)
    placed = 0
    for i in range(lesion_count):
        if i == 0:
            radii = np.full(3, spec.lesion_radius_mm[0])  # one at the range minimum
        else:
            radii = _sample_radii(rng, spec.lesion_radius_mm)
        uptake = rng.uniform(*spec.lesion_uptake)
        for attempt in range(200):
            center = interior[rng.integers(len(interior))].astype(np.float64)
            blob = _ellipsoid_mask(shape, spacing, center, radii)
            if not blob.any() or (blob & ~body).any():
                continue
            if (blob & decoy_mask).any() or (blob & label).any():
                continue
            label |= blob
            np.maximum(excess, np.where(blob, uptake - spec.background_uptake, 0.0),
                       out=excess)
            placed += 1
            break
        else:
            raise PhantomGenerationError(
                f"placed {placed} of {lesion_count} lesions; no admissible position "
                f"after 200 retries (seed {seed})")

    sigma_vox = [spec.blur_sigma_mm / s for s in spacing]
    soft = ndimage.gaussian_filter(excess, sigma=sigma_vox, mode="constant")
    # keep hot cores near nominal uptake: blur softens edges but must not
    # dim small blobs below a learnable contrast
    soft = np.maximum(soft, excess * 0.75)
    pet = np.where(body, spec.background_uptake + soft, 0.0).astype(np.float32)
    if spec.noise_sigma > 0.0:
        pet = pet + rng.normal(0.0, spec.noise_sigma, size=shape).astype(np.float32) * body
        pet = np.maximum(pet, 0.0)

    case_id = case_id or f"phantom_{seed:04d}"
    return Case(
        id=case_id,
        ct=Volume(ct, spacing, "CT"),
        pet=Volume(pet, spacing, "PET"),
        label=Volume(label.astype(np.uint8), spacing, "MASK"),
    )


def lesion_ml(case: Case) -> float:
    """Total labeled volume in milliliters."""
    return float(case.label.data.sum()) * case.label.voxel_volume_mm3() / 1000.0


def count_lesions(case: Case) -> int:
    labeled, n = ndimage.label(case.label.data > 0)
    return int(n)


def write_case(case: Case, out_dir) -> None:
    write_nifti(case.ct, f"{out_dir}/{case.id}_ct.nii")
    write_nifti(case.pet, f"{out_dir}/{case.id}_pet.nii")
    if case.label is not None:
        write_nifti(case.label, f"{out_dir}/{case.id}_label.nii")


def generate_dataset(spec: PhantomSpec, n_cases: int, seed: int,
                     out_dir=None) -> list[Case]:
    """Generate ``n_cases`` phantoms with ids ``phantom_0000``...

    When the spec allows lesion-free cases (count range starts at 0), every
    odd-indexed case is forced negative so roughly half the dataset exercises
    false-positive volume on clean anatomy; the rest carry at least one
    lesion.  With ``out_dir`` set, writes NIfTI triples plus a tab-separated
    manifest of id, lesion count and lesion volume in mL.
    """
    if n_cases < 1:
        raise ValueError(f"n_cases must be >= 1, got {n_cases}")
    cases = []
    rows = []
    for i in range(n_cases):
        forced = None
        if spec.lesion_count[0] == 0:
            if i % 2 == 1:
                forced = 0
            elif spec.lesion_count[1] > 0:
                forced = int(np.random.default_rng([spec.seed, seed, i]).integers(
                    max(1, spec.lesion_count[0]), spec.lesion_count[1] + 1))
        case = generate_case(spec, seed + i, case_id=f"phantom_{i:04d}",
                             lesion_count=forced)
        cases.append(case)
        rows.append((case.id, count_lesions(case), lesion_ml(case)))
        if out_dir is not None:
            write_case(case, out_dir)
    if out_dir is not None:
        lines = ["id\tlesion_count\tlesion_ml"]
        lines += [f"{cid}\t{n}\t{ml:.6f}" for cid, n, ml in rows]
        with open(f"{out_dir}/{MANIFEST_NAME}", "w") as fh:
            fh.write("\n".join(lines) + "\n")
    return cases


def load_dataset(data_dir) -> list[Case]:
    """Read back a generated dataset directory (manifest order)."""
    from .volume import read_nifti

    with open(f"{data_dir}/{MANIFEST_NAME}") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    cases = []
    for ln in lines[1:]:
        cid = ln.split("\t")[0]
        ct = read_nifti(f"{data_dir}/{cid}_ct.nii", modality="CT")
        pet = read_nifti(f"{data_dir}/{cid}_pet.nii", modality="PET")
        try:
            label = read_nifti(f"{data_dir}/{cid}_label.nii", modality="MASK")
        except FileNotFoundError:
            label = None
        cases.append(Case(cid, ct, pet, label))
    return cases
