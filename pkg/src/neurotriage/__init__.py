"""Head-CT neuro-trauma triage pipeline on synthetic phantom data."""

from .core import (
    REGISTRY,
    CTVolume,
    FindingRegistry,
    Label,
    LabelVector,
    MultiChannelVolume,
    ScoreVector,
    SeededRng,
    finding_index,
    major_findings,
)

__version__ = "0.1.0"

__all__ = [
    "REGISTRY",
    "CTVolume",
    "FindingRegistry",
    "Label",
    "LabelVector",
    "MultiChannelVolume",
    "ScoreVector",
    "SeededRng",
    "finding_index",
    "major_findings",
    "__version__",
]
