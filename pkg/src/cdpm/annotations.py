"""Pedestrian boundary annotations and per-image supervision mode.

Annotation records live in a headerless CSV, one record per line:
  image_id,upper_px,lower_px,head_pixels,lower_pixels,source
Empty fields mean the value is absent. Pixel boundaries are in image
coordinates (image height 384); the feature map has 24 rows, so one
feature row spans 16 pixels.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path

IMAGE_HEIGHT = 384
MAP_HEIGHT = 24
ROW_SCALE = IMAGE_HEIGHT // MAP_HEIGHT  # 16 px per feature row
PART_MISSING_THRESHOLD = 1280  # parsing pixels

SOURCES = ("automatic", "manual", "synthetic")


@dataclass(frozen=True)
class BoundaryAnnotation:
    """Upper/lower pedestrian boundary plus parsing pixel counts for one image."""

    image_id: str
    upper_px: float | None
    lower_px: float | None
    head_pixels: int | None
    lower_pixels: int | None
    source: str = "automatic"

    def __post_init__(self):
        if self.upper_px is not None and self.lower_px is not None:
            if not 0 <= self.upper_px < self.lower_px <= IMAGE_HEIGHT:
                raise ValueError(
                    f"{self.image_id}: boundaries ({self.upper_px}, {self.lower_px}) "
                    f"must satisfy 0 <= U < V <= {IMAGE_HEIGHT}"
                )
        for count in (self.head_pixels, self.lower_pixels):
            if count is not None and count < 0:
                raise ValueError(f"{self.image_id}: negative pixel count {count}")
        if self.source not in SOURCES:
            raise ValueError(f"{self.image_id}: unknown source {self.source!r}")

    @property
    def has_boundaries(self) -> bool:
        return self.upper_px is not None and self.lower_px is not None


def detect_part_missing(
    ann: BoundaryAnnotation, threshold: int = PART_MISSING_THRESHOLD
) -> bool:
    """True when the head or the lower body is too small to trust.

    Missing counts are treated as part-missing (conservative).
    """
    if ann.head_pixels is None or ann.lower_pixels is None:
        return True
    return ann.head_pixels < threshold or ann.lower_pixels < threshold


def to_feature_rows(
    upper_px: float,
    lower_px: float,
    image_height: int = IMAGE_HEIGHT,
    map_height: int = MAP_HEIGHT,
) -> tuple[float, float]:
    """Convert pixel boundaries to real-valued feature-map rows."""
    scale = image_height / map_height
    return upper_px / scale, lower_px / scale


class Mode(Enum):
    ALIGNED = "aligned"
    UNIFORM = "uniform"


@dataclass(frozen=True)
class SupervisionMode:
    """Per-image training mode.

    ALIGNED carries the boundaries in feature rows and admits the image to
    the window-detection losses; UNIFORM falls back to whole-image division
    and contributes to the identity losses only.
    """

    mode: Mode
    upper: float | None = None
    lower: float | None = None

    @property
    def is_aligned(self) -> bool:
        return self.mode is Mode.ALIGNED


def supervision_mode(
    ann: BoundaryAnnotation | None, threshold: int = PART_MISSING_THRESHOLD
) -> SupervisionMode:
    """ALIGNED when boundaries exist and no part is missing; UNIFORM otherwise."""
    if ann is None or not ann.has_boundaries or detect_part_missing(ann, threshold):
        return SupervisionMode(mode=Mode.UNIFORM)
    upper, lower = to_feature_rows(ann.upper_px, ann.lower_px)
    return SupervisionMode(mode=Mode.ALIGNED, upper=upper, lower=lower)


def _parse_field(raw: str) -> float | None:
    raw = raw.strip()
    return float(raw) if raw else None


def load_annotations(path: str | Path) -> dict[str, BoundaryAnnotation]:
    """Read an annotation CSV into a dict keyed by image id."""
    out: dict[str, BoundaryAnnotation] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split(",")
        if len(fields) != 6:
            raise ValueError(f"{path}:{lineno}: expected 6 fields, got {len(fields)}")
        head = _parse_field(fields[3])
        lower = _parse_field(fields[4])
        ann = BoundaryAnnotation(
            image_id=fields[0].strip(),
            upper_px=_parse_field(fields[1]),
            lower_px=_parse_field(fields[2]),
            head_pixels=int(head) if head is not None else None,
            lower_pixels=int(lower) if lower is not None else None,
            source=fields[5].strip() or "automatic",
        )
        out[ann.image_id] = ann
    return out


def save_annotations(path: str | Path, anns: dict[str, BoundaryAnnotation]) -> None:
    """Write annotations in the headerless CSV format."""

    def fmt(v) -> str:
        if v is None:
            return ""
        return str(int(v)) if float(v).is_integer() else str(v)

    lines = [
        ",".join(
            [
                ann.image_id,
                fmt(ann.upper_px),
                fmt(ann.lower_px),
                fmt(ann.head_pixels),
                fmt(ann.lower_pixels),
                ann.source,
            ]
        )
        for ann in anns.values()
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
