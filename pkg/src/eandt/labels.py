"""Semantic labels used by the map builder and the default source-class merge."""

from __future__ import annotations

import enum


class SemanticLabel(enum.IntEnum):
    GROUND = 0
    BUILDING = 1
    FENCE = 2
    POLE = 3
    TRAFFIC_SIGN = 4
    TREE_TRUNK = 5
    OTHER = 6

    @property
    def key(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value: "str | int | SemanticLabel") -> "SemanticLabel":
        if isinstance(value, SemanticLabel):
            return value
        if isinstance(value, int):
            return cls(value)
        try:
            return cls[str(value).strip().upper().replace("-", "_")]
        except KeyError:
            raise ValueError(f"unknown semantic label {value!r}") from None


#: labels that end up in a map, in canonical order
MAP_LABELS = tuple(label for label in SemanticLabel if label is not SemanticLabel.OTHER)

#: SemanticKITTI class list as emitted by RandLA-Net
SEMANTIC_KITTI_CLASSES = (
    "car", "bicycle", "motorcycle", "truck", "other-vehicle", "person",
    "bicyclist", "motorcyclist", "road", "parking", "sidewalk", "other-ground",
    "building", "fence", "vegetation", "trunk", "terrain", "pole", "traffic-sign",
)

DEFAULT_MERGE_MAP: dict[str, SemanticLabel] = {name: SemanticLabel.OTHER
                                               for name in SEMANTIC_KITTI_CLASSES}
DEFAULT_MERGE_MAP.update({
    "road": SemanticLabel.GROUND,
    "sidewalk": SemanticLabel.GROUND,
    "parking": SemanticLabel.GROUND,
    "building": SemanticLabel.BUILDING,
    "fence": SemanticLabel.FENCE,
    "pole": SemanticLabel.POLE,
    "traffic-sign": SemanticLabel.TRAFFIC_SIGN,
    "trunk": SemanticLabel.TREE_TRUNK,
})
