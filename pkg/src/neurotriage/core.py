"""Canonical finding taxonomy, label/score vectors, volume value types and seeded RNG."""

from __future__ import annotations

import enum
import hashlib
import json
import re
from dataclasses import dataclass

import numpy as np

from .errors import UnknownFinding

# Canonical registry: (identifier, display name), fixed order.  The first six
# entries are the "major" findings.
_REGISTRY: tuple[tuple[str, str], ...] = (
    ("hemorrhage", "Hemorrhage"),
    ("infarct", "Infarct"),
    ("mass_lesion", "Mass Lesion"),
    ("mass_effect", "Mass Effect"),
    ("hydrocephalus", "Hydrocephalus"),
    ("midline_shift", "Midline Shift"),
    ("skull_fracture", "Skull Fracture"),
    ("cerebral_hemorrhagic_contusion", "Cerebral hemorrhagic Contusion"),
    ("diffuse_cerebral_edema", "Diffuse Cerebral Edema"),
    ("microhemorrhage", "Microhemorrhage"),
    ("diffuse_axonal_injury", "Diffuse Axonal Injury"),
    ("generalized_cerebral_edema", "Generalized Cerebral Edema"),
    ("pneumocephalus", "Pneumocephalus"),
    ("brain_herniation", "Brain Herniation"),
    ("arterial_hyperdensity", "Arterial Hyper-density"),
    ("venous_sinus_hyperdensity", "Venous Sinus Hyper-density"),
)

NUM_FINDINGS = len(_REGISTRY)
NUM_MAJOR = 6


def _normalize(name: str) -> str:
    return re.sub(r"[^a-z0-9]", "", name.lower())


@dataclass(frozen=True)
class FindingRegistry:
    """Ordered 16-finding registry with a marked 6-finding major subset."""

    entries: tuple[tuple[str, str], ...] = _REGISTRY

    def __post_init__(self):
        ids = [fid for fid, _ in self.entries]
        if len(ids) != NUM_FINDINGS or len(set(ids)) != NUM_FINDINGS:
            raise ValueError("registry must hold exactly 16 unique finding ids")

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(fid for fid, _ in self.entries)

    @property
    def display_names(self) -> tuple[str, ...]:
        return tuple(name for _, name in self.entries)

    def index(self, identifier: str) -> int:
        return finding_index(identifier, self)

    def display_name(self, identifier: str) -> str:
        return self.entries[self.index(identifier)][1]

    def __len__(self) -> int:
        return NUM_FINDINGS


REGISTRY = FindingRegistry()

# Normalized-name -> index lookup covers both ids and display names; the two
# normalize to the same key for every finding.
_LOOKUP: dict[str, int] = {}
for _i, (_fid, _disp) in enumerate(_REGISTRY):
    _LOOKUP[_normalize(_fid)] = _i
    _LOOKUP[_normalize(_disp)] = _i
# "Ischemia/Infarct" appears in some label sources as a synonym for infarct.
_LOOKUP[_normalize("Ischemia/Infarct")] = _LOOKUP[_normalize("infarct")]


def finding_index(identifier: str, registry: FindingRegistry = REGISTRY) -> int:
    """Canonical 0..15 index of a finding id (case-insensitive)."""
    if registry is not REGISTRY:
        for i, (fid, disp) in enumerate(registry.entries):
            if _normalize(identifier) in (_normalize(fid), _normalize(disp)):
                return i
        raise UnknownFinding(identifier)
    try:
        return _LOOKUP[_normalize(identifier)]
    except KeyError:
        raise UnknownFinding(identifier) from None


def major_findings() -> list[str]:
    """The six major finding ids, in registry order."""
    return [fid for fid, _ in _REGISTRY[:NUM_MAJOR]]


class Label(enum.Enum):
    POS = "POS"
    NEG = "NEG"
    UNKNOWN = "UNKNOWN"


@dataclass(frozen=True)
class LabelVector:
    """16 ternary labels in registry order.

    UNKNOWN is only legal in intermediate labeling results; training and
    evaluation inputs must be binary (see :meth:`to_binary`).
    """

    values: tuple[Label, ...]

    def __post_init__(self):
        if len(self.values) != NUM_FINDINGS:
            raise ValueError(f"expected {NUM_FINDINGS} labels, got {len(self.values)}")
        if not all(isinstance(v, Label) for v in self.values):
            raise ValueError("labels must be Label enum members")

    @classmethod
    def all_of(cls, label: Label) -> "LabelVector":
        return cls(tuple(label for _ in range(NUM_FINDINGS)))

    @classmethod
    def from_positive_ids(cls, positive: set[str] | list[str]) -> "LabelVector":
        idx = {finding_index(p) for p in positive}
        return cls(tuple(Label.POS if i in idx else Label.NEG for i in range(NUM_FINDINGS)))

    @classmethod
    def from_binary(cls, bits) -> "LabelVector":
        bits = list(bits)
        if len(bits) != NUM_FINDINGS:
            raise ValueError(f"expected {NUM_FINDINGS} values, got {len(bits)}")
        return cls(tuple(Label.POS if int(b) else Label.NEG for b in bits))

    def to_binary(self) -> np.ndarray:
        if self.has_unknown:
            raise ValueError("UNKNOWN labels cannot be converted to binary")
        return np.array([1 if v is Label.POS else 0 for v in self.values], dtype=np.int64)

    @property
    def has_unknown(self) -> bool:
        return any(v is Label.UNKNOWN for v in self.values)

    @property
    def num_unknown(self) -> int:
        return sum(1 for v in self.values if v is Label.UNKNOWN)

    def get(self, identifier: str) -> Label:
        return self.values[finding_index(identifier)]

    def to_dict(self, registry: FindingRegistry = REGISTRY) -> dict[str, str]:
        """JSON-schema form: display name -> "POS"/"NEG" (UNKNOWN-free only)."""
        if self.has_unknown:
            raise ValueError("UNKNOWN labels have no JSON representation")
        return {registry.display_names[i]: v.value for i, v in enumerate(self.values)}

    @classmethod
    def from_dict(cls, obj: dict, registry: FindingRegistry = REGISTRY) -> "LabelVector":
        values = [Label.UNKNOWN] * NUM_FINDINGS
        for key, raw in obj.items():
            try:
                i = finding_index(str(key), registry)
            except UnknownFinding:
                continue
            val = str(raw).strip().upper()
            if val in ("POS", "NEG"):
                values[i] = Label(val)
        return cls(tuple(values))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "LabelVector":
        return cls.from_dict(json.loads(text))

    def to_csv_row(self) -> list[str]:
        return ["1" if v is Label.POS else "0" for v in self.values]


@dataclass(frozen=True)
class ScoreVector:
    """16 per-finding probabilities in [0, 1]."""

    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.values) != NUM_FINDINGS:
            raise ValueError(f"expected {NUM_FINDINGS} scores, got {len(self.values)}")
        arr = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("scores must be finite")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("scores must lie in [0, 1]")

    def to_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)

    def get(self, identifier: str) -> float:
        return self.values[finding_index(identifier)]


@dataclass(frozen=True)
class CTVolume:
    """3D scalar field in Hounsfield units, (z, y, x) axis order."""

    voxels: np.ndarray          # float array, shape (z, y, x)
    spacing: tuple[float, float, float]  # (sz, sy, sx) in mm
    study_id: str = ""
    patient_id: str = ""
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if vox.ndim != 3 or vox.size == 0:
            raise ValueError("voxel array must be non-empty and 3-dimensional")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError("spacing must be three strictly positive values")
        if not np.all(np.isfinite(vox)):
            raise ValueError("HU values must be finite")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)

    def with_voxels(self, voxels: np.ndarray, spacing=None) -> "CTVolume":
        return CTVolume(
            voxels=voxels,
            spacing=tuple(spacing) if spacing is not None else self.spacing,
            study_id=self.study_id,
            patient_id=self.patient_id,
            origin=self.origin,
        )


CHANNEL_NAMES = ("bleeding", "brain", "bone")


@dataclass(frozen=True)
class MultiChannelVolume:
    """3-channel windowed tensor (channel, z, y, x) with values in [0, 1]."""

    voxels: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if vox.ndim != 4 or vox.shape[0] != len(CHANNEL_NAMES):
            raise ValueError("expected a (3, z, y, x) array")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError("spacing must be three strictly positive values")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.voxels.shape)

    def with_voxels(self, voxels: np.ndarray) -> "MultiChannelVolume":
        return MultiChannelVolume(voxels=voxels, spacing=self.spacing)


def derive_seed(seed: int, *labels) -> int:
    """Stable 64-bit child seed from a parent seed and a label path."""
    material = "|".join([str(int(seed))] + [str(x) for x in labels])
    digest = hashlib.sha256(material.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class SeededRng:
    """Deterministic RNG: same seed and call sequence give the same draws everywhere."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    def derive(self, *labels) -> "SeededRng":
        """Independent child stream named by a label path."""
        return SeededRng(derive_seed(self.seed, *labels))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, x):
        return self.generator.permutation(x)

    def state(self) -> dict:
        return self.generator.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.generator.bit_generator.state = state
