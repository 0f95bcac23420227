"""Plain data records passed between the data layer and the losses."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .policy import Sequence


@dataclass(frozen=True)
class PreferenceRecord:
    """``y_w`` preferred over ``y_l`` for prompt ``x``; raw scores optional."""

    x: tuple[int, ...]
    y_w: tuple[int, ...]
    y_l: tuple[int, ...]
    r_w: float | None = None
    r_l: float | None = None

    def __post_init__(self):
        for name in ("x", "y_w", "y_l"):
            object.__setattr__(self, name, tuple(int(t) for t in getattr(self, name)))

    @property
    def chosen(self) -> Sequence:
        return Sequence(self.x, self.y_w)

    @property
    def rejected(self) -> Sequence:
        return Sequence(self.x, self.y_l)

    def to_json(self) -> dict:
        return {"x": list(self.x), "y_w": list(self.y_w), "y_l": list(self.y_l),
                "r_w": self.r_w, "r_l": self.r_l}

    @classmethod
    def from_json(cls, d: dict) -> "PreferenceRecord":
        return cls(tuple(d["x"]), tuple(d["y_w"]), tuple(d["y_l"]), d.get("r_w"), d.get("r_l"))


@dataclass(frozen=True)
class LabeledExample:
    """Unpaired KTO example."""

    x: tuple[int, ...]
    y: tuple[int, ...]
    desirable: bool

    @property
    def seq(self) -> Sequence:
        return Sequence(self.x, self.y)


@dataclass
class Group:
    """Outputs sampled for one prompt together with their rewards."""

    x: tuple[int, ...]
    outputs: list[tuple[int, ...]]
    rewards: np.ndarray
    advantages: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.x = tuple(int(t) for t in self.x)
        self.outputs = [tuple(int(t) for t in y) for y in self.outputs]
        self.rewards = np.asarray(self.rewards, dtype=float)
        if len(self.outputs) != len(self.rewards):
            raise ValueError("one reward per output")

    @property
    def size(self) -> int:
        return len(self.outputs)

    @property
    def sequences(self) -> list[Sequence]:
        return [Sequence(self.x, y) for y in self.outputs]


def split_pairs(records) -> list[LabeledExample]:
    """Break preference pairs into unpaired desirable/undesirable examples."""
    out = []
    for r in records:
        out.append(LabeledExample(r.x, r.y_w, True))
        out.append(LabeledExample(r.x, r.y_l, False))
    return out
