"""Clip decoding via the ffmpeg binary.

Audio is resampled to 16 kHz mono float32; video is sampled at 16 frames
per second as 224x224 RGB. Both land in numpy arrays. A DecodedClip is
everything the embedders need.
"""

from __future__ import annotations

import shutil
import subprocess
from dataclasses import dataclass

import numpy as np

AUDIO_SAMPLE_RATE = 16_000
VIDEO_FRAME_RATE = 16
FRAME_SIZE = 224


class DecodeError(RuntimeError):
    """The clip could not be decoded; the pipeline skips it."""


@dataclass
class DecodedClip:
    waveform: np.ndarray      # [n] float32, mono at 16 kHz
    sample_rate: int
    frames: np.ndarray        # [T, 224, 224, 3] uint8 at 16 fps
    frame_rate: int


def ffmpeg_available() -> bool:
    return shutil.which("ffmpeg") is not None


def _run_ffmpeg(args: list[str], clip: str) -> bytes:
    cmd = ["ffmpeg", "-v", "error", "-i", clip] + args + ["pipe:1"]
    try:
        proc = subprocess.run(cmd, capture_output=True, check=True)
    except FileNotFoundError as exc:
        raise DecodeError("ffmpeg binary not found") from exc
    except subprocess.CalledProcessError as exc:
        raise DecodeError(f"ffmpeg failed on {clip}: "
                          f"{exc.stderr.decode(errors='replace').strip()}") from exc
    return proc.stdout


class FFmpegDecoder:
    """Default decoder; one subprocess per stream, raw pipes."""

    def __init__(self, sample_rate: int = AUDIO_SAMPLE_RATE,
                 frame_rate: int = VIDEO_FRAME_RATE,
                 frame_size: int = FRAME_SIZE):
        self.sample_rate = sample_rate
        self.frame_rate = frame_rate
        self.frame_size = frame_size

    def __call__(self, clip_path: str) -> DecodedClip:
        audio_raw = _run_ffmpeg(["-f", "f32le", "-acodec", "pcm_f32le",
                                 "-ac", "1", "-ar", str(self.sample_rate)],
                                clip_path)
        waveform = np.frombuffer(audio_raw, dtype="<f4").copy()
        if waveform.size == 0:
            raise DecodeError(f"no audio samples decoded from {clip_path}")

        size = f"{self.frame_size}x{self.frame_size}"
        video_raw = _run_ffmpeg(["-f", "rawvideo", "-pix_fmt", "rgb24",
                                 "-r", str(self.frame_rate), "-s", size],
                                clip_path)
        frame_bytes = self.frame_size * self.frame_size * 3
        if len(video_raw) == 0 or len(video_raw) % frame_bytes != 0:
            raise DecodeError(f"no usable frames decoded from {clip_path}")
        frames = np.frombuffer(video_raw, dtype=np.uint8).reshape(
            -1, self.frame_size, self.frame_size, 3).copy()
        return DecodedClip(waveform=waveform, sample_rate=self.sample_rate,
                           frames=frames, frame_rate=self.frame_rate)
