from __future__ import annotations

from dataclasses import dataclass

import torch

MODALITIES = ("ref", "text", "audio", "video")
# reference images and video are one modality as far as weights go
PARAM_GROUP = {"ref": "visual", "video": "visual", "text": "text", "audio": "audio"}
PARAM_GROUPS = ("text", "audio", "visual")


@dataclass
class ModalityStream:
    modality: str
    tokens: torch.Tensor  # [..., n, d_model]
    positions: torch.Tensor  # [..., n, 3] as (t, h, w)

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.tokens.shape[:-1] != self.positions.shape[:-1] or self.positions.shape[-1] != 3:
            raise ValueError(
                f"{self.modality}: tokens {tuple(self.tokens.shape)} vs positions {tuple(self.positions.shape)}"
            )

    @property
    def group(self) -> str:
        return PARAM_GROUP[self.modality]

    def with_tokens(self, tokens: torch.Tensor) -> "ModalityStream":
        return ModalityStream(self.modality, tokens, self.positions)
