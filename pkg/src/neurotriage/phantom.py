"""Synthetic head-CT phantoms with paired labels, masks and templated reports.

Geometry is deliberately simple (ellipsoidal head, spherical lesions) but every
inserted pathology produces the HU contrast its detecting window expects, so
the downstream windowing, segmentation and detection tasks are all exercised
for real.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import (
    REGISTRY,
    CTVolume,
    Label,
    LabelVector,
    SeededRng,
    derive_seed,
    finding_index,
)
from .errors import GeometryError, UnsupportedFinding
from . import nifti

HEMORRHAGE_SUBTYPES = ("intraparenchymal", "subarachnoid", "intraventricular",
                       "subdural", "epidural")

# Head-3 parcellation structures; falx and ventricles are the two the phantom
# can actually render.
HEAD3_STRUCTURES = ("frontal_lobe", "parietal_lobe", "occipital_lobe", "temporal_lobe",
                    "cerebellum", "basal_ganglia", "medulla_oblongata", "pons",
                    "midbrain", "falx", "ventricles")
_FALX_CLASS = HEAD3_STRUCTURES.index("falx") + 1
_VENTRICLE_CLASS = HEAD3_STRUCTURES.index("ventricles") + 1


@dataclass(frozen=True)
class HemorrhageParams:
    subtype: str = "intraparenchymal"
    radius_mm: float = 9.0
    hu: float = 70.0
    center_mm: tuple[float, float, float] | None = None  # offset from brain center

    def __post_init__(self):
        if self.subtype not in HEMORRHAGE_SUBTYPES:
            raise ValueError(f"unknown hemorrhage subtype {self.subtype!r}")


# default blob offsets per subtype, (z, y, x) mm from brain center as fractions
# of the brain semi-axes
_SUBTYPE_OFFSET_FRAC = {
    "intraparenchymal": (0.0, -0.25, 0.30),
    "subarachnoid": (0.15, 0.45, 0.30),
    "intraventricular": (0.0, 0.05, 0.12),
    "subdural": (0.10, 0.0, 0.62),
    "epidural": (0.10, 0.0, -0.62),
}


@dataclass(frozen=True)
class PocketParams:
    radius_mm: float = 7.0
    hu: float = -950.0
    center_mm: tuple[float, float, float] = (0.0, 0.45, -0.35)  # fractions of semi-axes


@dataclass(frozen=True)
class FractureParams:
    width_deg: float = 20.0
    direction_deg: float = 0.0
    height_mm: float = 24.0
    hu: float = 30.0


@dataclass(frozen=True)
class ShiftParams:
    shift_mm: float = 6.0


@dataclass(frozen=True)
class EdemaParams:
    hu: float = 15.0
    fraction: float = 0.7  # ellipsoid fraction of the brain made edematous


@dataclass(frozen=True)
class ArteryParams:
    hu: float = 60.0
    arc_radius_mm: float = 16.0
    tube_radius_mm: float = 3.0
    span_deg: float = 120.0
    z_frac: float = -0.35
    y_offset_mm: float = 6.0


@dataclass(frozen=True)
class PhantomSpec:
    grid_shape: tuple[int, int, int] = (32, 160, 160)
    spacing: tuple[float, float, float] = (4.0, 1.0, 1.0)
    brain_semiaxes: tuple[float, float, float] = (40.0, 50.0, 40.0)
    brain_hu: float = 30.0
    texture_std: float = 3.0
    csf_gap_mm: float = 8.0
    skull_thickness_mm: float = 6.0
    skull_hu: float = 900.0
    csf_hu: float = 10.0
    falx_hu: float = 18.0
    ventricle_hu: float = 8.0
    seed: int = 0
    study_id: str = "S00000"
    patient_id: str = "P00000"
    hemorrhage: HemorrhageParams | None = None
    pneumocephalus: PocketParams | None = None
    skull_fracture: FractureParams | None = None
    midline_shift: ShiftParams | None = None
    edema: EdemaParams | None = None
    artery: ArteryParams | None = None


# finding id -> PhantomSpec attribute
SUPPORTED_FINDINGS = {
    "hemorrhage": "hemorrhage",
    "pneumocephalus": "pneumocephalus",
    "skull_fracture": "skull_fracture",
    "midline_shift": "midline_shift",
    "diffuse_cerebral_edema": "edema",
    "arterial_hyperdensity": "artery",
}

# Per-finding report sentences, positive and negative variants.  These are
# co-designed with labeling.mock_labeler: the mock must label every generated
# report exactly.
REPORT_TEMPLATES = {
    "hemorrhage": ("Acute intracranial hemorrhage is identified.",
                   "No acute intracranial hemorrhage."),
    "infarct": ("There is an acute infarct.",
                "No acute infarct."),
    "mass_lesion": ("A mass lesion is present.",
                    "No mass lesion."),
    "mass_effect": ("There is associated mass effect.",
                    "No mass effect."),
    "hydrocephalus": ("Hydrocephalus is present.",
                      "No hydrocephalus."),
    "midline_shift": ("Midline shift is present.",
                      "No midline shift."),
    "skull_fracture": ("There is an acute skull fracture.",
                       "No skull fracture."),
    "cerebral_hemorrhagic_contusion": ("A hemorrhagic contusion is seen.",
                                       "No hemorrhagic contusion."),
    "diffuse_cerebral_edema": ("Diffuse cerebral edema is present.",
                               "No diffuse cerebral edema."),
    "microhemorrhage": ("Scattered microhemorrhages are seen.",
                        "No microhemorrhages."),
    "diffuse_axonal_injury": ("Findings compatible with diffuse axonal injury.",
                              "No diffuse axonal injury."),
    "generalized_cerebral_edema": ("There is generalized cerebral edema.",
                                   "No generalized cerebral edema."),
    "pneumocephalus": ("Pneumocephalus is present.",
                       "No pneumocephalus."),
    "brain_herniation": ("There is brain herniation.",
                         "No brain herniation."),
    "arterial_hyperdensity": ("Arterial hyperdensity is noted.",
                              "No arterial hyperdensity."),
    "venous_sinus_hyperdensity": ("Venous sinus hyperdensity is noted.",
                                  "No venous sinus hyperdensity."),
}

AIR_HU = -1000.0


@dataclass
class PhantomCase:
    volume: CTVolume
    labels: LabelVector
    hemorrhage_mask: np.ndarray        # (z, y, x) uint8, 0 = background, 1..5 subtype
    parcellation_masks: np.ndarray     # (3, z, y, x) uint8, one label map per head
    report: str
    spec: PhantomSpec = field(repr=False, default=None)


def _mm_grids(shape, spacing):
    """Coordinate arrays in mm, origin at the grid center, broadcastable (z, y, x)."""
    axes = []
    for n, s in zip(shape, spacing):
        axes.append((np.arange(n, dtype=np.float64) - (n - 1) / 2.0) * s)
    z = axes[0][:, None, None]
    y = axes[1][None, :, None]
    x = axes[2][None, None, :]
    return z, y, x


def _ellipsoid(z, y, x, center, semiaxes):
    cz, cy, cx = center
    az, ay, ax_ = semiaxes
    return ((z - cz) / az) ** 2 + ((y - cy) / ay) ** 2 + ((x - cx) / ax_) ** 2 <= 1.0


def _sphere_fits(center, radius, semiaxes) -> bool:
    # conservative: sphere inscribed if the padded center stays inside the ellipsoid
    return all(abs(c) + radius <= a for c, a in zip(center, semiaxes))


def _resolve_hemorrhage_center(params: HemorrhageParams, semiaxes):
    if params.center_mm is not None:
        return np.array(params.center_mm, dtype=np.float64)
    frac = _SUBTYPE_OFFSET_FRAC[params.subtype]
    return np.array([f * a for f, a in zip(frac, semiaxes)], dtype=np.float64)


def build_report(labels: LabelVector) -> str:
    sentences = ["Head CT examination."]
    for i, fid in enumerate(REGISTRY.ids):
        pos, neg = REPORT_TEMPLATES[fid]
        sentences.append(pos if labels.values[i] is Label.POS else neg)
    return " ".join(sentences)


def generate_case(spec: PhantomSpec) -> PhantomCase:
    """Render a phantom case: HU volume, labels, masks and a templated report."""
    rng = SeededRng(spec.seed)
    nz, ny, nx = spec.grid_shape
    z, y, x = _mm_grids(spec.grid_shape, spec.spacing)
    semi = np.array(spec.brain_semiaxes, dtype=np.float64)
    inner = semi + spec.csf_gap_mm
    outer = inner + spec.skull_thickness_mm

    shift = spec.midline_shift.shift_mm if spec.midline_shift is not None else 0.0
    if abs(shift) > spec.csf_gap_mm - 0.5:
        raise GeometryError(
            f"midline shift {shift} mm exceeds the {spec.csf_gap_mm} mm CSF margin")
    brain_center = np.array([0.0, 0.0, shift], dtype=np.float64)

    hu = np.full(spec.grid_shape, AIR_HU, dtype=np.float32)
    outer_mask = _ellipsoid(z, y, x, (0, 0, 0), outer)
    inner_mask = _ellipsoid(z, y, x, (0, 0, 0), inner)
    skull_mask = outer_mask & ~inner_mask
    hu[skull_mask] = spec.skull_hu
    hu[inner_mask] = spec.csf_hu

    brain_mask = _ellipsoid(z, y, x, brain_center, semi)
    hu[brain_mask] = spec.brain_hu

    positives: set[str] = set()

    # diffuse cerebral edema: hypodense core ellipsoid
    if spec.edema is not None:
        edema_mask = _ellipsoid(z, y, x, brain_center, semi * spec.edema.fraction)
        hu[edema_mask] = spec.edema.hu
        positives.add("diffuse_cerebral_edema")
    else:
        edema_mask = None

    # falx / interhemispheric fissure: thin sagittal plane through the brain
    falx_half_mm = max(0.8, spec.spacing[2] * 0.55)
    falx_mask = brain_mask & (np.abs(x - brain_center[2]) <= falx_half_mm) & (np.abs(y) > 4.0)
    hu[falx_mask] = spec.falx_hu

    # lateral ventricles: paired small ellipsoids around the midline
    vent_semi = (semi[0] * 0.30, semi[1] * 0.35, semi[2] * 0.16)
    vent_off_x = semi[2] * 0.22
    vent_l = _ellipsoid(z, y, x, (0.0, -2.0, brain_center[2] - vent_off_x), vent_semi)
    vent_r = _ellipsoid(z, y, x, (0.0, -2.0, brain_center[2] + vent_off_x), vent_semi)
    vent_mask = (vent_l | vent_r) & brain_mask
    hu[vent_mask] = spec.ventricle_hu

    # arterial hyperdensity: curvilinear hyperdense arc low in the brain
    if spec.artery is not None:
        a = spec.artery
        z0 = a.z_frac * semi[0]
        rho = np.sqrt((y - a.y_offset_mm) ** 2 + (x - brain_center[2]) ** 2)
        theta = np.degrees(np.arctan2(x - brain_center[2], -(y - a.y_offset_mm)))
        dist = np.sqrt((rho - a.arc_radius_mm) ** 2 + (z - z0) ** 2)
        artery_mask = brain_mask & (dist <= a.tube_radius_mm) & (np.abs(theta) <= a.span_deg / 2)
        if not artery_mask.any():
            raise GeometryError("arterial segment rendered no voxels at this resolution")
        hu[artery_mask] = a.hu
        positives.add("arterial_hyperdensity")

    # pneumocephalus: intracranial air pocket
    if spec.pneumocephalus is not None:
        p = spec.pneumocephalus
        center = np.array([f * a for f, a in zip(p.center_mm, semi)]) + brain_center
        rel = center - brain_center
        if not _sphere_fits(rel, p.radius_mm, semi):
            raise GeometryError("pneumocephalus pocket does not fit inside the brain")
        pocket = _ellipsoid(z, y, x, center, (p.radius_mm,) * 3)
        if not pocket.any():
            raise GeometryError("pneumocephalus pocket rendered no voxels")
        hu[pocket] = p.hu
        positives.add("pneumocephalus")
    else:
        pocket = None

    # hemorrhage blob, subtype-tagged
    hem_mask = np.zeros(spec.grid_shape, dtype=np.uint8)
    if spec.hemorrhage is not None:
        h = spec.hemorrhage
        rel = _resolve_hemorrhage_center(h, semi)
        if not _sphere_fits(rel, h.radius_mm, semi):
            raise GeometryError(
                f"hemorrhage blob (r={h.radius_mm} mm at {tuple(rel)}) does not fit in the brain")
        blob = _ellipsoid(z, y, x, rel + brain_center, (h.radius_mm,) * 3)
        if not blob.any():
            raise GeometryError("hemorrhage blob rendered no voxels")
        hu[blob] = h.hu
        hem_mask[blob] = HEMORRHAGE_SUBTYPES.index(h.subtype) + 1
        positives.add("hemorrhage")

    # texture noise over the intracranial interior
    noise = rng.normal(0.0, spec.texture_std, size=spec.grid_shape).astype(np.float32)
    hu[inner_mask] += noise[inner_mask]

    # skull fracture: lucent gap through the shell (after noise; bone stays clean)
    if spec.skull_fracture is not None:
        f = spec.skull_fracture
        theta = np.degrees(np.arctan2(y, x))  # 0 deg toward +x
        dtheta = np.abs((theta - f.direction_deg + 180.0) % 360.0 - 180.0)
        gap = skull_mask & (dtheta <= f.width_deg / 2) & (np.abs(z) <= f.height_mm / 2)
        if not gap.any():
            raise GeometryError("fracture gap rendered no voxels")
        hu[gap] = f.hu
        positives.add("skull_fracture")

    if spec.midline_shift is not None:
        positives.add("midline_shift")

    # parcellation targets: hemispheres, supra/infratentorial, falx + ventricles
    parc = np.zeros((3,) + spec.grid_shape, dtype=np.uint8)
    left = brain_mask & (x < brain_center[2])
    parc[0][left] = 1
    parc[0][brain_mask & ~left] = 2
    tent_z = -0.33 * semi[0]
    supra = brain_mask & (z > tent_z)
    parc[1][supra] = 1
    parc[1][brain_mask & ~supra] = 2
    parc[2][falx_mask] = _FALX_CLASS
    parc[2][vent_mask] = _VENTRICLE_CLASS

    labels = LabelVector.from_positive_ids(positives)
    vol = CTVolume(voxels=hu, spacing=spec.spacing,
                   study_id=spec.study_id, patient_id=spec.patient_id)
    return PhantomCase(
        volume=vol,
        labels=labels,
        hemorrhage_mask=hem_mask,
        parcellation_masks=parc,
        report=build_report(labels),
        spec=spec,
    )


def _jittered_spec(base: PhantomSpec, present: set[str], rng: SeededRng) -> PhantomSpec:
    """Randomize per-case geometry for the requested pathologies."""
    semi = tuple(a * (1.0 + rng.uniform(-0.06, 0.06)) for a in base.brain_semiaxes)
    kwargs = {}

    if "hemorrhage" in present:
        subtype = HEMORRHAGE_SUBTYPES[int(rng.integers(0, len(HEMORRHAGE_SUBTYPES)))]
        radius = float(rng.uniform(7.0, 11.0))
        frac = _SUBTYPE_OFFSET_FRAC[subtype]
        center = tuple(
            f * a + rng.uniform(-4.0, 4.0) * (0.5 if abs(f) > 0.5 else 1.0)
            for f, a in zip(frac, semi)
        )
        # retreat toward the center until the blob fits
        center = np.array(center)
        for _ in range(8):
            if _sphere_fits(center, radius, semi):
                break
            center *= 0.85
        kwargs["hemorrhage"] = HemorrhageParams(
            subtype=subtype, radius_mm=radius, center_mm=tuple(center))

    if "pneumocephalus" in present:
        kwargs["pneumocephalus"] = PocketParams(
            radius_mm=float(rng.uniform(5.5, 8.5)),
            center_mm=(float(rng.uniform(-0.15, 0.15)),
                       float(rng.uniform(0.30, 0.50)),
                       float(rng.uniform(-0.45, -0.20))),
        )

    if "skull_fracture" in present:
        kwargs["skull_fracture"] = FractureParams(
            width_deg=float(rng.uniform(14.0, 26.0)),
            direction_deg=float(rng.uniform(-180.0, 180.0)),
        )

    if "midline_shift" in present:
        sign = 1.0 if rng.uniform() < 0.5 else -1.0
        kwargs["midline_shift"] = ShiftParams(
            shift_mm=sign * float(rng.uniform(4.0, base.csf_gap_mm - 0.8)))

    if "diffuse_cerebral_edema" in present:
        kwargs["edema"] = EdemaParams(fraction=float(rng.uniform(0.55, 0.75)))

    if "arterial_hyperdensity" in present:
        kwargs["artery"] = ArteryParams(
            arc_radius_mm=float(rng.uniform(13.0, 19.0)),
            span_deg=float(rng.uniform(90.0, 150.0)),
        )

    return replace(base, brain_semiaxes=semi, **kwargs)


def generate_dataset(n: int, prevalence: dict[str, float], seed: int, out_dir,
                     base_spec: PhantomSpec | None = None,
                     volume_format: str = "nii") -> dict:
    """Write n phantom cases (volumes, masks, labels CSV, reports JSONL, manifest)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if volume_format not in ("nii", "raw"):
        raise ValueError("volume_format must be 'nii' or 'raw'")
    for fid, p in prevalence.items():
        finding_index(fid)  # raises UnknownFinding for junk ids
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"prevalence for {fid} must lie in [0, 1], got {p}")
        if p > 0 and fid not in SUPPORTED_FINDINGS:
            raise UnsupportedFinding(
                f"{fid}: the phantom cannot synthesize this finding")

    base = base_spec if base_spec is not None else PhantomSpec()
    out_dir = Path(out_dir)
    (out_dir / "volumes").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    supported_order = [fid for fid in REGISTRY.ids if fid in SUPPORTED_FINDINGS]
    studies = []
    label_rows = []
    report_lines = []

    for i in range(n):
        rng = SeededRng(derive_seed(seed, "case", i))
        present = set()
        for fid in supported_order:
            u = rng.uniform()
            if u < prevalence.get(fid, 0.0):
                present.add(fid)
        study_id, patient_id = f"S{i:05d}", f"P{i:05d}"
        spec = replace(
            _jittered_spec(base, present, rng),
            seed=derive_seed(seed, "texture", i),
            study_id=study_id,
            patient_id=patient_id,
        )
        case = generate_case(spec)

        ext = ".nii" if volume_format == "nii" else ".raw"
        vol_rel = f"volumes/{study_id}{ext}"
        if volume_format == "nii":
            nifti.write_nifti(out_dir / vol_rel, case.volume)
        else:
            nifti.write_raw(out_dir / vol_rel, case.volume)
        hem_rel = f"masks/{study_id}_hemorrhage.npy"
        parc_rel = f"masks/{study_id}_parcellation.npy"
        np.save(out_dir / hem_rel, case.hemorrhage_mask)
        np.save(out_dir / parc_rel, case.parcellation_masks)

        label_rows.append([study_id, patient_id] + case.labels.to_csv_row())
        report_lines.append(json.dumps({
            "study_id": study_id,
            "text": case.report,
            "expert_labels": case.labels.to_dict(),
        }, ensure_ascii=False, sort_keys=True))
        studies.append({
            "study_id": study_id,
            "patient_id": patient_id,
            "volume": vol_rel,
            "hemorrhage_mask": hem_rel,
            "parcellation_mask": parc_rel,
            "labels": case.labels.to_csv_row(),
        })

    with open(out_dir / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["study_id", "patient_id"] + list(REGISTRY.ids))
        writer.writerows(label_rows)
    (out_dir / "reports.jsonl").write_text("\n".join(report_lines) + "\n")

    manifest = {
        "n": n,
        "seed": seed,
        "prevalence": {k: float(v) for k, v in sorted(prevalence.items())},
        "volume_format": volume_format,
        "grid_shape": list(base.grid_shape),
        "spacing": list(base.spacing),
        "brain_semiaxes": list(base.brain_semiaxes),
        "studies": studies,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest
