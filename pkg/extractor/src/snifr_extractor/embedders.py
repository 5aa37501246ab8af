"""Embedders: decoded clip -> one 768-d vector per modality.

The pretrained pair (an audio spectrogram transformer and a masked-video
transformer, both from the transformers hub) mean-pools the final hidden
state over all tokens. The stub pair derives a vector deterministically
from the decoded bytes, for pipelines and tests that must run without
checkpoints; stub vectors are exactly reproducible for identical input.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .media import DecodedClip

AST_CHECKPOINT = "MIT/ast-finetuned-audioset-14-14-0.443"
VIDEOMAE_CHECKPOINT = "MCG-NJU/videomae-base"
EMBED_DIM = 768


class EmbedderLoadError(RuntimeError):
    """A pretrained checkpoint could not be loaded; extraction aborts."""


class AudioSpectrogramEmbedder:
    """Waveform -> 768-d mean-pooled hidden state of a pretrained AST."""

    name = AST_CHECKPOINT

    def __init__(self, device: str = "cpu"):
        try:
            import torch
            from transformers import ASTModel, AutoFeatureExtractor
        except ImportError as exc:
            raise EmbedderLoadError(f"torch/transformers unavailable: {exc}") from exc
        try:
            self.processor = AutoFeatureExtractor.from_pretrained(AST_CHECKPOINT)
            self.model = ASTModel.from_pretrained(AST_CHECKPOINT).to(device).eval()
        except Exception as exc:
            raise EmbedderLoadError(f"cannot load {AST_CHECKPOINT}: {exc}") from exc
        self._torch = torch
        self.device = device

    def embed(self, clip: DecodedClip) -> np.ndarray:
        inputs = self.processor(clip.waveform, sampling_rate=clip.sample_rate,
                                return_tensors="pt")
        with self._torch.no_grad():
            hidden = self.model(inputs.input_values.to(self.device)).last_hidden_state
        return hidden.mean(dim=1).squeeze(0).cpu().numpy().astype(np.float64)


class VideoMAEEmbedder:
    """16 frames -> 768-d mean-pooled hidden state of a pretrained VideoMAE."""

    name = VIDEOMAE_CHECKPOINT
    num_frames = 16

    def __init__(self, device: str = "cpu"):
        try:
            import torch
            from transformers import AutoImageProcessor, VideoMAEModel
        except ImportError as exc:
            raise EmbedderLoadError(f"torch/transformers unavailable: {exc}") from exc
        try:
            self.processor = AutoImageProcessor.from_pretrained(VIDEOMAE_CHECKPOINT)
            self.model = VideoMAEModel.from_pretrained(VIDEOMAE_CHECKPOINT).to(device).eval()
        except Exception as exc:
            raise EmbedderLoadError(f"cannot load {VIDEOMAE_CHECKPOINT}: {exc}") from exc
        self._torch = torch
        self.device = device

    def embed(self, clip: DecodedClip) -> np.ndarray:
        frames = clip.frames
        # The backbone wants exactly 16 frames: tile short clips, trim long.
        if len(frames) < self.num_frames:
            reps = -(-self.num_frames // len(frames))
            frames = np.tile(frames, (reps, 1, 1, 1))
        frames = frames[:self.num_frames]
        inputs = self.processor(list(frames), return_tensors="pt")
        with self._torch.no_grad():
            hidden = self.model(inputs.pixel_values.to(self.device)).last_hidden_state
        return hidden.mean(dim=1).squeeze(0).cpu().numpy().astype(np.float64)


def _vector_from_bytes(payload: bytes, moments: list[float]) -> np.ndarray:
    digest = hashlib.sha256(payload).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    vec = rng.standard_normal(EMBED_DIM)
    vec[:len(moments)] = moments
    return vec


class StubAudioEmbedder:
    """Deterministic stand-in: content-hashed vector plus basic moments."""

    name = "stub-audio"

    def embed(self, clip: DecodedClip) -> np.ndarray:
        wave = clip.waveform.astype("<f4")
        return _vector_from_bytes(wave.tobytes(),
                                  [float(wave.mean()), float(wave.std())])


class StubVideoEmbedder:
    name = "stub-video"

    def embed(self, clip: DecodedClip) -> np.ndarray:
        frames = np.ascontiguousarray(clip.frames)
        return _vector_from_bytes(frames.tobytes(),
                                  [float(frames.mean()) / 255.0, float(len(frames))])


def load_embedders(backend: str, device: str = "cpu"):
    """(audio embedder, video embedder) for 'pretrained' or 'stub'."""
    if backend == "stub":
        return StubAudioEmbedder(), StubVideoEmbedder()
    if backend == "pretrained":
        return AudioSpectrogramEmbedder(device), VideoMAEEmbedder(device)
    raise ValueError(f"unknown backend {backend!r}")
