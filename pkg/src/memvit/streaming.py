"""Sequential clip streaming over a corpus of synthetic videos.

Videos are generated deterministically from per-video seeds (no decoding
dependencies): either unstructured noise or a long-range recall task in
which each clip shows a class cue as a lit spatial block and the label of
clip t is the cue shown k clips earlier.  The stream concatenates all
videos and emits clips in order with boundary flags, never letting a clip
span two videos.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger("memvit.streaming")


@dataclass(frozen=True)
class RecallTaskSpec:
    """label(t) = cue(t - cue_offset); clips before the offset get the blank
    symbol (or no label when blank_symbol is None)."""

    num_classes: int
    cue_offset: int  # k, in clips
    blank_symbol: int | None
    encoding_blocks: int = 2  # cue block grid is encoding_blocks ** 2 cells

    def __post_init__(self):
        if self.cue_offset < 0:
            raise ValueError("cue_offset must be >= 0")
        if self.num_classes > self.encoding_blocks**2:
            raise ValueError(
                f"{self.num_classes} classes do not fit in a "
                f"{self.encoding_blocks}x{self.encoding_blocks} block grid"
            )


@dataclass
class VideoRecord:
    video_id: int
    frames: int
    seed: int
    labels: list[int | None] = field(default_factory=list)  # per clip
    task: RecallTaskSpec | None = None


@dataclass
class ClipEvent:
    clip: np.ndarray  # [T, H, W, 3] in [0, 1]
    video_id: int
    clip_index: int  # within the video
    is_boundary: bool  # first clip of the video
    global_index: int
    label: int | None


def clip_count(frames: int, clip_span: int) -> int:
    return math.ceil(frames / clip_span)


def video_cues(record: VideoRecord, clip_span: int) -> np.ndarray:
    """Per-clip cue classes, regenerated from the video's seed."""
    if record.task is None:
        raise ValueError("video has no recall task")
    rng = np.random.default_rng(record.seed)
    n = clip_count(record.frames, clip_span)
    return rng.integers(0, record.task.num_classes, size=n)


def _cue_frame(cue: int, hw: int, task: RecallTaskSpec) -> np.ndarray:
    g = task.encoding_blocks
    cell = hw // g
    frame = np.zeros((hw, hw, 3))
    r, c = divmod(int(cue), g)
    frame[r * cell : (r + 1) * cell, c * cell : (c + 1) * cell, :] = 1.0
    return frame


def render_frames(record: VideoRecord, clip_span: int, hw: int) -> np.ndarray:
    """All frames of a video, [frames, hw, hw, 3] in [0, 1]."""
    if record.task is None:
        rng = np.random.default_rng(record.seed)
        return rng.random((record.frames, hw, hw, 3))
    cues = video_cues(record, clip_span)
    frames = np.empty((record.frames, hw, hw, 3))
    for t in range(record.frames):
        frames[t] = _cue_frame(cues[t // clip_span], hw, record.task)
    return frames


def gen_recall_task(
    task: RecallTaskSpec,
    rng: np.random.Generator,
    video_id: int,
    num_clips: int,
    clip_span: int,
) -> VideoRecord:
    """A video whose clips show cues and whose labels lag them by k clips."""
    record = VideoRecord(
        video_id=video_id,
        frames=num_clips * clip_span,
        seed=int(rng.integers(0, 2**31)),
        task=task,
    )
    cues = video_cues(record, clip_span)
    k = task.cue_offset
    record.labels = [
        int(cues[t - k]) if t >= k else task.blank_symbol for t in range(num_clips)
    ]
    return record


def stream_clips(corpus: list[VideoRecord], clip_span: int, hw: int):
    """Iterate the corpus in order, one ClipEvent per clip.

    The last clip of a video is padded by repeating its final frame; empty
    videos are skipped with a warning.
    """
    if not corpus:
        raise ValueError("corpus is empty")
    global_index = 0
    for record in corpus:
        if record.frames <= 0:
            log.warning("skipping empty video %d", record.video_id)
            continue
        frames = render_frames(record, clip_span, hw)
        n_clips = clip_count(record.frames, clip_span)
        for ci in range(n_clips):
            chunk = frames[ci * clip_span : (ci + 1) * clip_span]
            if chunk.shape[0] < clip_span:
                pad = np.repeat(chunk[-1:], clip_span - chunk.shape[0], axis=0)
                chunk = np.concatenate([chunk, pad], axis=0)
            label = record.labels[ci] if ci < len(record.labels) else None
            yield ClipEvent(
                clip=chunk,
                video_id=record.video_id,
                clip_index=ci,
                is_boundary=ci == 0,
                global_index=global_index,
                label=label,
            )
            global_index += 1


# -- manifests ---------------------------------------------------------------


def corpus_to_json(corpus: list[VideoRecord]) -> str:
    def enc(r: VideoRecord) -> dict:
        d = {
            "video_id": r.video_id,
            "frames": r.frames,
            "seed": r.seed,
            "labels": list(r.labels),
        }
        if r.task is not None:
            d["task"] = {
                "num_classes": r.task.num_classes,
                "cue_offset": r.task.cue_offset,
                "blank_symbol": r.task.blank_symbol,
                "encoding_blocks": r.task.encoding_blocks,
            }
        return d

    return json.dumps([enc(r) for r in corpus], indent=2)


def corpus_from_json(text: str) -> list[VideoRecord]:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValueError(f"corpus manifest is not valid JSON: {e}") from e
    out = []
    for i, d in enumerate(raw):
        try:
            task = None
            if d.get("task") is not None:
                t = d["task"]
                task = RecallTaskSpec(
                    num_classes=int(t["num_classes"]),
                    cue_offset=int(t["cue_offset"]),
                    blank_symbol=None if t["blank_symbol"] is None else int(t["blank_symbol"]),
                    encoding_blocks=int(t.get("encoding_blocks", 2)),
                )
            out.append(
                VideoRecord(
                    video_id=int(d["video_id"]),
                    frames=int(d["frames"]),
                    seed=int(d["seed"]),
                    labels=[None if x is None else int(x) for x in d.get("labels", [])],
                    task=task,
                )
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ValueError(f"bad corpus entry {i}: {e}") from e
    return out


def labels_to_csv(corpus: list[VideoRecord], clip_span: int) -> str:
    """Audit dump: one row per clip with its label and regenerated cue."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["video_id", "clip_index", "label", "cue"])
    for r in corpus:
        cues = video_cues(r, clip_span) if r.task is not None else None
        for ci in range(clip_count(r.frames, clip_span)):
            label = r.labels[ci] if ci < len(r.labels) else None
            cue = int(cues[ci]) if cues is not None else ""
            w.writerow([r.video_id, ci, "" if label is None else label, cue])
    return buf.getvalue()
