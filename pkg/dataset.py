"""Reference-clip corpus construction.

Annotated audio is cut into 2-second event clips: long events are windowed,
short ones are padded with same-label material, and near-silent clips are
dropped by short-time energy. Every random choice is seeded per
(split, entry, segment), so parallel entry processing cannot change output.
"""
import json
import logging
import os
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field, ValidationError, ValidationInfo, field_validator
from tqdm import tqdm

import dsp
from errors import ContractError, DatasetError, InputError, ParseError, SchemaError
from numerics import SeededRng

logger = logging.getLogger(__name__)

INDEX_FILE = "index.jsonl"
REPORT_FILE = "report.json"


# ======================================
# MANIFEST SCHEMA
# ======================================

class EventAnnotation(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    label: str = Field(min_length=1)
    start_s: float = Field(ge=0)
    end_s: float

    @field_validator("end_s")
    @classmethod
    def _after_start(cls, value, info: ValidationInfo):
        start = info.data.get("start_s")
        if start is not None and value <= start:
            raise ValueError(f"end_s ({value}) must be greater than start_s ({start})")
        return value


class ManifestEntry(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    audio_path: str = Field(min_length=1)
    caption: str
    events: list[EventAnnotation]

    @field_validator("caption")
    @classmethod
    def _non_empty(cls, value):
        if not value.strip():
            raise ValueError("caption is empty")
        return value


def parse_manifest(path):
    """One ManifestEntry per non-blank JSON line, in file order."""
    entries = []
    try:
        f = open(path, encoding="utf-8")
    except OSError as e:
        raise InputError(f"cannot open manifest {path}: {e}") from e
    with f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(path, line_no, e.msg) from e
            if not isinstance(record, dict):
                raise ParseError(path, line_no, "expected a JSON object")
            try:
                entries.append(ManifestEntry.model_validate(record))
            except ValidationError as e:
                first = e.errors()[0]
                where = ".".join(str(p) for p in first["loc"])
                raise SchemaError(where, first["msg"], line_no) from e
    return entries


def resolve_audio_path(manifest_path, audio_path):
    if os.path.isabs(audio_path):
        return audio_path
    return os.path.join(os.path.dirname(os.path.abspath(manifest_path)), audio_path)


# ======================================
# SEGMENTS AND CLIPS
# ======================================

@dataclass(eq=False)
class RawSegment:
    label: str
    samples: np.ndarray
    source_entry: int
    source: str
    start: int
    index: int = 0


@dataclass(eq=False)
class ReferenceClip:
    label: str
    samples: np.ndarray
    source_entry: int
    provenance: list = field(default_factory=list)
    path: str = ""

    def energy(self, frame=400, hop=160):
        return float(np.mean(dsp.short_time_energy(self.samples, frame, hop)))


@dataclass
class SegmentReport:
    clamped: int = 0
    skipped: int = 0


def segment_events(entry, audio, entry_index=0, sample_rate=dsp.SAMPLE_RATE,
                   clip_samples=32000, min_remainder=8000, report=None):
    """Cut each annotated event into clip-length windows or one short span.

    Events past the end of the audio are skipped; events overrunning it are
    clamped. Both are counted in ``report``.
    """
    report = report if report is not None else SegmentReport()
    segments = []
    n = len(audio)
    duration = n / sample_rate
    for event in entry.events:
        if event.start_s >= duration:
            report.skipped += 1
            logger.warning("%s: event '%s' at %.2fs starts after audio end %.2fs; skipped",
                           entry.audio_path, event.label, event.start_s, duration)
            continue
        end_s = event.end_s
        if end_s > duration:
            report.clamped += 1
            logger.warning("%s: event '%s' end %.2fs clamped to %.2fs",
                           entry.audio_path, event.label, end_s, duration)
            end_s = duration
        s0 = int(round(event.start_s * sample_rate))
        s1 = min(int(round(end_s * sample_rate)), n)
        if s1 <= s0:
            report.skipped += 1
            continue
        if s1 - s0 < clip_samples:
            spans = [(s0, s1)]
        else:
            n_full = (s1 - s0) // clip_samples
            spans = [(s0 + k * clip_samples, s0 + (k + 1) * clip_samples) for k in range(n_full)]
            tail = s0 + n_full * clip_samples
            if s1 - tail >= min_remainder and s1 > tail:
                spans.append((tail, s1))
        for a, b in spans:
            segments.append(RawSegment(event.label, np.asarray(audio[a:b], dtype=np.float64).copy(),
                                       entry_index, entry.audio_path, a, len(segments)))
    return segments


def _span(segment, length):
    return {"source": segment.source, "label": segment.label,
            "start": int(segment.start), "end": int(segment.start + length)}


def pad_by_concat(short, pool, rng, clip_samples=32000):
    """Fill ``short`` to clip length with seeded picks from same-label donors.

    The last donor is truncated. With no donor the segment loops on itself.
    """
    samples = short.samples
    if len(samples) >= clip_samples:
        return ReferenceClip(short.label, samples[:clip_samples].copy(), short.source_entry,
                             [_span(short, clip_samples)])
    donors = [seg for seg in pool if seg is not short and seg.label == short.label and len(seg.samples)]
    parts = [samples]
    provenance = [_span(short, len(samples))]
    filled = len(samples)
    while filled < clip_samples:
        donor = donors[rng.integers(len(donors))] if donors else short
        take = min(len(donor.samples), clip_samples - filled)
        parts.append(donor.samples[:take])
        provenance.append(_span(donor, take))
        filled += take
    return ReferenceClip(short.label, np.concatenate(parts), short.source_entry, provenance)


def filter_by_ste(clips, threshold, frame=400, hop=160):
    """Partition clips on mean short-time energy >= threshold."""
    if threshold < 0:
        raise InputError(f"filter_by_ste: threshold must be >= 0, got {threshold}")
    kept, dropped = [], []
    for clip in clips:
        (kept if clip.energy(frame, hop) >= threshold else dropped).append(clip)
    return kept, dropped


def sample_reference(entry_clips, mode, rng):
    """Training picks one clip uniformly; inference returns all, in order."""
    if not entry_clips:
        raise DatasetError("sample_reference: entry has no reference clips")
    if mode == "train":
        return [entry_clips[rng.integers(len(entry_clips))]]
    if mode == "inference":
        return list(entry_clips)
    raise ContractError(f"sample_reference: unknown mode '{mode}'")


# ======================================
# BUILD PIPELINE
# ======================================

def _slug(label):
    return re.sub(r"[^a-z0-9]+", "-", label.lower()).strip("-") or "event"


def _segment_entry(index, entry, manifest_path, cfg):
    report = SegmentReport()
    try:
        audio = dsp.read_wav(resolve_audio_path(manifest_path, entry.audio_path), cfg.dsp.sample_rate)
    except InputError as e:
        logger.warning("entry %d: %s", index, e)
        return [], report, {"entry": index, "audio_path": entry.audio_path, "error": str(e)}
    segments = segment_events(entry, audio, index, cfg.dsp.sample_rate, cfg.clip_samples(),
                              int(round(cfg.dataset.min_remainder_seconds * cfg.dsp.sample_rate)), report)
    return segments, report, None


def build_dataset(manifest_path, out_dir, cfg, seed, split="train", progress=False):
    """Build one split: clip WAVs, ``index.jsonl`` and ``report.json`` under out_dir/split.

    Unreadable audio is recorded per entry and skipped. Raises DatasetError
    when no clip survives.
    """
    entries = parse_manifest(manifest_path)
    split_dir = os.path.join(out_dir, split)
    clip_dir = os.path.join(split_dir, "clips")
    os.makedirs(clip_dir, exist_ok=True)

    if cfg.dataset.n_jobs > 1:
        results = Parallel(n_jobs=cfg.dataset.n_jobs, backend="threading")(
            delayed(_segment_entry)(i, e, manifest_path, cfg) for i, e in enumerate(entries))
    else:
        results = [_segment_entry(i, e, manifest_path, cfg)
                   for i, e in enumerate(tqdm(entries, desc=f"segment {split}", disable=not progress))]

    segments = [seg for segs, _, _ in results for seg in segs]
    errors = [err for _, _, err in results if err is not None]
    clamped = sum(r.clamped for _, r, _ in results)
    skipped = sum(r.skipped for _, r, _ in results)

    rng = SeededRng(seed)
    clips = [pad_by_concat(seg, segments, rng.child(f"pad/{split}/{seg.source_entry}/{seg.index}"),
                           cfg.clip_samples())
             for seg in segments]
    for seg, clip in zip(segments, clips):
        clip.path = os.path.join("clips", f"{seg.source_entry:05d}_{seg.index:03d}_{_slug(seg.label)}.wav")

    kept, dropped = filter_by_ste(clips, cfg.dataset.ste_threshold, cfg.dataset.ste_frame, cfg.dataset.ste_hop)
    if not kept:
        raise DatasetError(f"{manifest_path}: no clip survived segmentation and energy filtering "
                           f"({len(entries)} entries, {len(clips)} candidate clips)")

    with open(os.path.join(split_dir, INDEX_FILE), "w", encoding="utf-8") as f:
        for clip in kept:
            dsp.write_wav(os.path.join(split_dir, clip.path), clip.samples, cfg.dsp.sample_rate)
            record = {
                "path": clip.path,
                "label": clip.label,
                "source_entry": clip.source_entry,
                "source": entries[clip.source_entry].audio_path,
                "provenance": clip.provenance,
                "energy": clip.energy(cfg.dataset.ste_frame, cfg.dataset.ste_hop),
            }
            f.write(json.dumps(record, sort_keys=True) + "\n")

    report = {
        "split": split,
        "manifest": os.path.basename(manifest_path),
        "entries": len(entries),
        "segments": len(segments),
        "clips_kept": len(kept),
        "clips_dropped": len(dropped),
        "label_histogram": dict(sorted(Counter(c.label for c in kept).items())),
        "events_clamped": clamped,
        "events_skipped": skipped,
        "entry_errors": errors,
    }
    with open(os.path.join(split_dir, REPORT_FILE), "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    logger.info("split %s: %d clips kept, %d dropped", split, len(kept), len(dropped))
    return report


# ======================================
# LOADING A BUILT SPLIT
# ======================================

def read_index(index_path):
    records = []
    with open(index_path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ParseError(index_path, line_no, e.msg) from e
    return records


def load_split_clips(split_dir, sample_rate=dsp.SAMPLE_RATE):
    """Reference clips of a built split grouped by source entry, index order kept."""
    index_path = os.path.join(split_dir, INDEX_FILE)
    if not os.path.isfile(index_path):
        raise DatasetError(f"no dataset index at {index_path}; run build-dataset first")
    grouped = {}
    for record in read_index(index_path):
        path = os.path.join(split_dir, record["path"])
        clip = ReferenceClip(record["label"], dsp.read_wav(path, sample_rate), int(record["source_entry"]),
                             record.get("provenance", []), path)
        grouped.setdefault(clip.source_entry, []).append(clip)
    return grouped
