"""Fixed label set, the three-level hierarchy, and per-pixel rollup mappings.

Level structure: ten leaf classes (plus void) group into four defect
categories and one road-surface category, which in turn group into
road vs road-defect. Integer encodings are frozen so masks written to
disk stay bit-stable across runs.
"""

from __future__ import annotations

import json
from enum import Enum, IntEnum
from pathlib import Path

import numpy as np


class InvalidLabelError(ValueError):
    """A label id outside the fixed taxonomy."""


class ClassId(IntEnum):
    VOID = 0
    TAR_ROAD = 1
    CEMENT_ROAD = 2
    SHOULDER = 3
    POTHOLE = 4
    WATER_LOG = 5
    WET_ROAD = 6
    MUDDY_ROAD = 7
    ROUGH_ROAD = 8
    OBSTRUCTION = 9
    BUMP = 10


class CategoryId(IntEnum):
    VOID = 0
    ROAD_SURFACE = 1
    CATEGORY_1 = 2
    CATEGORY_2 = 3
    CATEGORY_3 = 4
    CATEGORY_4 = 5


class RootId(IntEnum):
    VOID = 0
    ROAD = 1
    ROAD_DEFECT = 2


class HierarchyLevel(Enum):
    ROOT = "root"
    CATEGORY = "category"
    CLASS_FULL = "class_full"
    CLASS_MINUS_CAT4 = "class_minus_cat4"


NUM_CLASSES = len(ClassId)  # 11 = void + 10 evaluated classes
CLASS_NAMES = tuple(c.name.lower() for c in ClassId)
CATEGORY_NAMES = tuple(c.name.lower() for c in CategoryId)
ROOT_NAMES = tuple(c.name.lower() for c in RootId)

_CLASS_TO_CATEGORY = np.array(
    [
        CategoryId.VOID,          # void
        CategoryId.ROAD_SURFACE,  # tar_road
        CategoryId.ROAD_SURFACE,  # cement_road
        CategoryId.ROAD_SURFACE,  # shoulder
        CategoryId.CATEGORY_1,    # pothole
        CategoryId.CATEGORY_1,    # water_log
        CategoryId.CATEGORY_1,    # wet_road
        CategoryId.CATEGORY_2,    # muddy_road
        CategoryId.CATEGORY_3,    # rough_road
        CategoryId.CATEGORY_4,    # obstruction
        CategoryId.CATEGORY_4,    # bump
    ],
    dtype=np.int64,
)

_CATEGORY_TO_ROOT = np.array(
    [
        RootId.VOID,
        RootId.ROAD,
        RootId.ROAD_DEFECT,
        RootId.ROAD_DEFECT,
        RootId.ROAD_DEFECT,
        RootId.ROAD_DEFECT,
    ],
    dtype=np.int64,
)

_CLASS_TO_ROOT = _CATEGORY_TO_ROOT[_CLASS_TO_CATEGORY]

# Category-4 leaves are remapped to void when evaluating the 8-class level:
# their pixels are neither credited nor penalized.
_CLASS_MINUS_CAT4 = np.arange(NUM_CLASSES, dtype=np.int64)
_CLASS_MINUS_CAT4[ClassId.OBSTRUCTION] = ClassId.VOID
_CLASS_MINUS_CAT4[ClassId.BUMP] = ClassId.VOID

_LEVEL_TABLES = {
    HierarchyLevel.ROOT: _CLASS_TO_ROOT,
    HierarchyLevel.CATEGORY: _CLASS_TO_CATEGORY,
    HierarchyLevel.CLASS_FULL: np.arange(NUM_CLASSES, dtype=np.int64),
    HierarchyLevel.CLASS_MINUS_CAT4: _CLASS_MINUS_CAT4,
}

_LEVEL_NAMES = {
    HierarchyLevel.ROOT: ROOT_NAMES,
    HierarchyLevel.CATEGORY: CATEGORY_NAMES,
    HierarchyLevel.CLASS_FULL: CLASS_NAMES,
    HierarchyLevel.CLASS_MINUS_CAT4: CLASS_NAMES,
}

# Ids whose IoU enters the level's mean. Road-surface stays out of the
# category mean (it still occupies confusion-matrix rows/cols), and the
# 8-class level drops the two category-4 leaves entirely.
_LEVEL_EVALUATED = {
    HierarchyLevel.ROOT: (int(RootId.ROAD), int(RootId.ROAD_DEFECT)),
    HierarchyLevel.CATEGORY: tuple(
        int(c) for c in CategoryId if c not in (CategoryId.VOID, CategoryId.ROAD_SURFACE)
    ),
    HierarchyLevel.CLASS_FULL: tuple(int(c) for c in ClassId if c != ClassId.VOID),
    HierarchyLevel.CLASS_MINUS_CAT4: tuple(
        int(c)
        for c in ClassId
        if c not in (ClassId.VOID, ClassId.OBSTRUCTION, ClassId.BUMP)
    ),
}


def class_to_category(class_id: int) -> CategoryId:
    """Category containing the given class; void maps to void."""
    _check_class_id(class_id)
    return CategoryId(int(_CLASS_TO_CATEGORY[class_id]))


def category_to_root(category_id: int) -> RootId:
    if not 0 <= int(category_id) < len(CategoryId):
        raise InvalidLabelError(f"unknown category id {category_id}")
    return RootId(int(_CATEGORY_TO_ROOT[category_id]))


def class_to_root(class_id: int) -> RootId:
    _check_class_id(class_id)
    return RootId(int(_CLASS_TO_ROOT[class_id]))


def class_name(class_id: int) -> str:
    _check_class_id(class_id)
    return CLASS_NAMES[class_id]


def class_id_by_name(name: str) -> int:
    try:
        return CLASS_NAMES.index(name)
    except ValueError:
        raise InvalidLabelError(f"unknown class name {name!r}") from None


def label_count(level: HierarchyLevel) -> int:
    """Number of label ids (void included) a mask can hold at this level."""
    return len(_LEVEL_NAMES[level])


def label_names(level: HierarchyLevel) -> tuple[str, ...]:
    return _LEVEL_NAMES[level]


def evaluated_ids(level: HierarchyLevel) -> tuple[int, ...]:
    return _LEVEL_EVALUATED[level]


def rollup_table(level: HierarchyLevel) -> np.ndarray:
    """Length-11 lookup table from class ids to this level's ids (copy)."""
    return _LEVEL_TABLES[level].copy()


def category_table_to_root() -> np.ndarray:
    """Length-6 lookup table from category ids to root ids (copy)."""
    return _CATEGORY_TO_ROOT.copy()


def rollup_mask(mask: np.ndarray, level: HierarchyLevel) -> np.ndarray:
    """Map a class-id mask to level ids, pixel by pixel.

    Output shape equals the input shape; at CLASS_FULL the output equals
    the input. Any id outside [0, 11) raises InvalidLabelError naming the
    first offending pixel.
    """
    mask = np.asarray(mask)
    bad = (mask < 0) | (mask >= NUM_CLASSES)
    if bad.any():
        where = np.argwhere(bad)[0]
        raise InvalidLabelError(
            f"mask value {int(mask[tuple(where)])} at pixel {tuple(int(i) for i in where)} "
            f"is outside [0, {NUM_CLASSES})"
        )
    return _LEVEL_TABLES[level][mask.astype(np.int64)]


def labels_table() -> list[dict]:
    """The id/name/category/root table shipped as labels.json."""
    rows = []
    for c in ClassId:
        rows.append(
            {
                "id": int(c),
                "name": c.name.lower(),
                "category": class_to_category(c).name.lower(),
                "category_id": int(class_to_category(c)),
                "root": class_to_root(c).name.lower(),
                "root_id": int(class_to_root(c)),
            }
        )
    return rows


def write_labels_json(path) -> None:
    Path(path).write_text(json.dumps({"labels": labels_table()}, indent=2) + "\n")


def _check_class_id(class_id: int) -> None:
    if not 0 <= int(class_id) < NUM_CLASSES:
        raise InvalidLabelError(f"unknown class id {class_id}")
