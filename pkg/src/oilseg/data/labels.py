"""The twelve oil-slick categories and their admissible values."""

from __future__ import annotations

from dataclasses import asdict, dataclass

BOOL_VALUES = ("false", "true")

CATEGORIES: dict[str, tuple[str, ...]] = {
    "patch": BOOL_VALUES,
    "linear": BOOL_VALUES,
    "angular": BOOL_VALUES,
    "weathered": BOOL_VALUES,
    "tailed": BOOL_VALUES,
    "droplets": BOOL_VALUES,
    "winding": BOOL_VALUES,
    "feathered": BOOL_VALUES,
    "shape_outline": ("fragmented", "continuous"),
    "texture": ("rough", "smooth", "strong", "variable"),
    "contrast": ("strong", "weak", "variable"),
    "edge": ("sharp", "diffuse", "variable"),
}


class LabelError(ValueError):
    pass


@dataclass
class CategoryLabel:
    patch: bool = False
    linear: bool = False
    angular: bool = False
    weathered: bool = False
    tailed: bool = False
    droplets: bool = False
    winding: bool = False
    feathered: bool = False
    shape_outline: str = "continuous"
    texture: str = "variable"
    contrast: str = "strong"
    edge: str = "sharp"

    def __post_init__(self):
        for name in ("shape_outline", "texture", "contrast", "edge"):
            if getattr(self, name) not in CATEGORIES[name]:
                raise LabelError(f"{name}={getattr(self, name)!r} not in {CATEGORIES[name]}")

    def value(self, category: str) -> str:
        if category not in CATEGORIES:
            raise LabelError(f"unknown category {category!r}")
        v = getattr(self, category)
        if isinstance(v, bool):
            return BOOL_VALUES[int(v)]
        return v

    def index(self, category: str) -> int:
        return CATEGORIES[category].index(self.value(category))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CategoryLabel":
        return cls(**d)


def value_index(category: str, value) -> int:
    values = CATEGORIES.get(category)
    if values is None:
        raise LabelError(f"unknown category {category!r}")
    if isinstance(value, bool):
        value = BOOL_VALUES[int(value)]
    if isinstance(value, (int,)) and not isinstance(value, bool):
        if not 0 <= value < len(values):
            raise LabelError(f"index {value} out of range for {category}")
        return value
    if value not in values:
        raise LabelError(f"{value!r} is not a value of {category} {values}")
    return values.index(value)
