"""Extraction pipeline: manifest CSV -> decoded clips -> SNFR1 file.

The manifest has a `path,label` header; labels are the shared integer
codes 0..3 or the names safe/sexual/violent/both (case-insensitive).
Undecodable clips are skipped with a logged reason; embedder load
failures abort the whole job. Alongside the output file the pipeline
writes `<out>.manifest.json` pinning the embedder identifiers, rates,
and skip reasons, so feature provenance stays auditable.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .media import AUDIO_SAMPLE_RATE, VIDEO_FRAME_RATE, DecodeError, FFmpegDecoder
from .snfr_writer import write_snfr

logger = logging.getLogger(__name__)

LABEL_NAMES = {"safe": 0, "sexual": 1, "violent": 2, "both": 3}


@dataclass
class ExtractionJob:
    manifest_path: str
    out_path: str
    sample_rate: int = AUDIO_SAMPLE_RATE
    frame_rate: int = VIDEO_FRAME_RATE
    device: str = "cpu"
    clips: list[tuple[str, int]] = field(default_factory=list)

    def load_manifest(self) -> None:
        with open(self.manifest_path, newline="") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames is None or \
                    {"path", "label"} - set(reader.fieldnames):
                raise ValueError("manifest needs a path,label header")
            self.clips = [(row["path"], parse_label(row["label"]))
                          for row in reader]
        if not self.clips:
            raise ValueError(f"manifest {self.manifest_path} lists no clips")


def parse_label(raw: str) -> int:
    raw = raw.strip().lower()
    if raw in LABEL_NAMES:
        return LABEL_NAMES[raw]
    try:
        code = int(raw)
    except ValueError:
        raise ValueError(f"unknown label {raw!r}") from None
    if not 0 <= code <= 3:
        raise ValueError(f"label code {code} outside 0..3")
    return code


def extract_features(job: ExtractionJob, audio_embedder, video_embedder,
                     decoder=None) -> dict:
    """Run the job; returns the extraction summary that is also written
    as `<out>.manifest.json`."""
    if not job.clips:
        job.load_manifest()
    if decoder is None:
        decoder = FFmpegDecoder(sample_rate=job.sample_rate,
                                frame_rate=job.frame_rate)
    records = []
    skipped: list[dict] = []
    for clip_id, (path, label) in enumerate(job.clips):
        try:
            decoded = decoder(path)
        except DecodeError as exc:
            logger.warning("skipping %s: %s", path, exc)
            skipped.append({"path": path, "reason": str(exc)})
            continue
        audio_vec = np.asarray(audio_embedder.embed(decoded), dtype=np.float64)
        video_vec = np.asarray(video_embedder.embed(decoded), dtype=np.float64)
        records.append((clip_id, label,
                        audio_vec.astype(np.float32),
                        video_vec.astype(np.float32)))
    write_snfr(records, job.out_path)
    summary = {
        "out": job.out_path,
        "n_clips": len(job.clips),
        "n_written": len(records),
        "skipped": skipped,
        "sample_rate": job.sample_rate,
        "frame_rate": job.frame_rate,
        "audio_embedder": audio_embedder.name,
        "video_embedder": video_embedder.name,
    }
    with open(job.out_path + ".manifest.json", "w") as f:
        json.dump(summary, f, indent=2)
        f.write("\n")
    return summary
