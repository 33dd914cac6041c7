"""Four-part caption records and the gateway that produces them."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

CAPTION_FIELDS = ("appearance", "bearing", "background", "shot")


@dataclass(frozen=True)
class CaptionRecord:
    appearance: str
    bearing: str
    background: str
    shot: str

    def __post_init__(self):
        for name in CAPTION_FIELDS:
            if not getattr(self, name).strip():
                raise ValueError(f"caption field {name!r} is empty")

    @classmethod
    def from_dict(cls, d: dict) -> "CaptionRecord":
        return cls(**{k: d[k] for k in CAPTION_FIELDS})


def assemble_caption(rec: CaptionRecord) -> str:
    return " ".join(getattr(rec, name).strip() for name in CAPTION_FIELDS)


class CaptionGateway(Protocol):
    def describe(self, features: dict) -> CaptionRecord: ...


class TemplateCaptioner:
    """Deterministic stand-in for the vision-language captioners.

    Fills fixed sentence templates from a feature dict; unknown keys fall back
    to neutral wording.
    """

    def describe(self, features: dict) -> CaptionRecord:
        f = {k: str(v) for k, v in features.items()}
        return CaptionRecord(
            appearance=f"A {f.get('subject', 'person')} wears {f.get('clothing', 'plain clothes')}.",
            bearing=f"They talk in a {f.get('mood', 'calm')} manner, eyes {f.get('gaze', 'on the camera')}.",
            background=f"Behind them is {f.get('background', 'a plain wall')}.",
            shot=f"Framing: {f.get('framing', 'medium')}, {f.get('camera', 'stationary')} camera, "
                 f"{f.get('lighting', 'soft light')}.",
        )
