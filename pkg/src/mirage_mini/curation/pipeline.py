"""Filter funnel over curation records.

Stages run in a fixed order and a record rejected at one stage is never shown
to later stages. Verdicts are stored on the record the first time a stage sees
it and reused afterwards, so re-running the pipeline is a no-op.

Record schema (one JSON object per line; seconds, bytes and pixels)::

    clip_id            str
    duration           float, seconds
    p_frame_mean_size  float, bytes
    edge_row_density   [frames][rows] floats in [0, 1]
    edge_col_density   [frames][cols] floats in [0, 1]
    text_boxes         [frames][boxes][x0, y0, x1, y1], pixels
    frame_width        int, pixels
    frame_height       int, pixels
    sync_offset        int, frames
    sync_confidence    float
    overlay_score      float in [0, 1]
    attributes         optional dict for the video-attributes stage
    verdicts           optional {stage: "keep" | "reject"}

Missing or malformed features for a stage a record reaches put that record in
quarantine instead of aborting the run.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Optional

from .filters import (
    KEEP,
    REJECT,
    overlay_verdict,
    screen_split_verdict,
    static_frame_verdict,
    sync_verdict,
    text_area_verdict,
)

INPUT_STAGE = "single_speaker_scenes"
STAGES = ("static_frame", "screen_split", "text", "video_attributes", "lip_sync", "graphic_overlay")


class MissingFeatureError(KeyError):
    pass


@dataclass(frozen=True)
class Thresholds:
    p_frame_min_bytes: float = 1500.0
    line_density: float = 0.5
    line_persistence: float = 0.5
    text_area_fraction: float = 0.01
    sync_max_offset: float = 2
    sync_min_confidence: float = 3.0
    overlay_max_score: float = 0.5

    @classmethod
    def from_dict(cls, d: dict) -> "Thresholds":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown threshold keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path=None) -> "Thresholds":
        if path is None:
            text = resources.files("mirage_mini").joinpath("defaults/thresholds.json").read_text()
        else:
            text = Path(path).read_text()
        return cls.from_dict(json.loads(text))


@dataclass
class CurationRecord:
    clip_id: str
    duration: float = 0.0
    p_frame_mean_size: Optional[float] = None
    edge_row_density: Optional[list] = None
    edge_col_density: Optional[list] = None
    text_boxes: Optional[list] = None
    frame_width: Optional[int] = None
    frame_height: Optional[int] = None
    sync_offset: Optional[float] = None
    sync_confidence: Optional[float] = None
    overlay_score: Optional[float] = None
    attributes: dict = field(default_factory=dict)
    verdicts: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "CurationRecord":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"record {d.get('clip_id')!r}: unknown keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def set_verdict(self, stage: str, verdict: str):
        if stage in self.verdicts and self.verdicts[stage] != verdict:
            raise ValueError(f"{self.clip_id}: verdict for {stage} already set to {self.verdicts[stage]}")
        self.verdicts[stage] = verdict

    def need(self, *names):
        vals = tuple(getattr(self, n) for n in names)
        missing = [n for n, v in zip(names, vals) if v is None]
        if missing:
            raise MissingFeatureError(f"{self.clip_id}: missing {missing}")
        return vals if len(vals) > 1 else vals[0]

    @property
    def surviving(self) -> bool:
        return all(self.verdicts.get(s) == KEEP for s in STAGES)


def accept_all(record: CurationRecord) -> bool:
    return True


def stage_verdict(stage: str, rec: CurationRecord, th: Thresholds,
                  attribute_check: Callable[[CurationRecord], bool] = accept_all) -> str:
    if stage == "static_frame":
        return static_frame_verdict(rec.need("p_frame_mean_size"), th.p_frame_min_bytes)
    if stage == "screen_split":
        rows, cols = rec.need("edge_row_density", "edge_col_density")
        return screen_split_verdict(rows, cols, th.line_density, th.line_persistence)
    if stage == "text":
        boxes, w, h = rec.need("text_boxes", "frame_width", "frame_height")
        return text_area_verdict(boxes, w, h, th.text_area_fraction)
    if stage == "video_attributes":
        return KEEP if attribute_check(rec) else REJECT
    if stage == "lip_sync":
        off, conf = rec.need("sync_offset", "sync_confidence")
        return sync_verdict(off, conf, th.sync_max_offset, th.sync_min_confidence)
    if stage == "graphic_overlay":
        return overlay_verdict(rec.need("overlay_score"), th.overlay_max_score)
    raise ValueError(f"unknown stage {stage!r}")


@dataclass
class FunnelReport:
    stages: list  # [(name, surviving count)]
    quarantined: dict = field(default_factory=dict)  # clip_id -> reason

    def counts(self) -> list[int]:
        return [c for _, c in self.stages]

    def to_dict(self) -> dict:
        return {"stages": [{"name": n, "surviving": c} for n, c in self.stages],
                "quarantined": self.quarantined}


def run_pipeline(records: Iterable[CurationRecord], thresholds: Thresholds = Thresholds(),
                 attribute_check: Callable[[CurationRecord], bool] = accept_all):
    """Apply all stages in order. Returns ``(surviving records, FunnelReport)``."""
    alive = list(records)
    report = [(INPUT_STAGE, len(alive))]
    quarantined: dict[str, str] = {}
    for stage in STAGES:
        nxt = []
        for rec in alive:
            verdict = rec.verdicts.get(stage)
            if verdict is None:
                try:
                    verdict = stage_verdict(stage, rec, thresholds, attribute_check)
                except (MissingFeatureError, ValueError, TypeError) as exc:
                    quarantined[rec.clip_id] = f"{stage}: {exc}"
                    continue
                rec.set_verdict(stage, verdict)
            if verdict == KEEP:
                nxt.append(rec)
        alive = nxt
        report.append((stage, len(alive)))
    return alive, FunnelReport(report, quarantined)


def read_records(path) -> list[CurationRecord]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(CurationRecord.from_dict(json.loads(line)))
    return out


def write_records(path, records: Iterable[CurationRecord]):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
