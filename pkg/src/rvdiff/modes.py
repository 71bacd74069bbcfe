"""Operating modes of the joint denoiser and their (A, B) switch states."""

import enum


class Mode(enum.Enum):
    """Switch A feeds the semantic condition in; switch B enables the semantic head.

    (A, B) = (1, 1) has no member, so it cannot be represented.
    """

    CONDITIONAL = "C"
    UNCONDITIONAL = "U"
    NON_LABELED = "N"

    @property
    def switches(self) -> tuple:
        return {"C": (1, 0), "U": (0, 1), "N": (0, 0)}[self.value]

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_label(cls, label: str) -> "Mode":
        return cls[label.upper()]
