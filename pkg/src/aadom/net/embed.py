"""Per-clip / per-segment embedding extraction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..corpus import ClipMeta, Manifest, load_clip
from ..dsp import HOP, FrequencyBand, build_mel_filterbank, log_mel, segment_clip
from .model import Model


@dataclass(frozen=True)
class Embedding:
    values: np.ndarray
    source_clip: ClipMeta
    segment_index: int


def clip_features(clip, fb, band: FrequencyBand | None, segmenting: bool,
                  seconds: float = 2.5, overlap: float = 0.5, hop: int = HOP) -> np.ndarray:
    """Log-mel stack [n_segments, n_mels, n_frames] (one row when not segmenting)."""
    parts = segment_clip(clip, seconds, overlap) if segmenting else [clip]
    return np.stack([log_mel(p, fb, band, hop).values for p in parts]).astype(np.float32)


def extract_embeddings(model: Model, manifest: Manifest, band: FrequencyBand | None = None,
                       segmenting: bool = True,
                       features: Callable[[ClipMeta], np.ndarray] | None = None,
                       sample_rate: int = 16000) -> list[Embedding]:
    """Eval-mode embeddings for every clip, tagged with clip and segment index.

    ``features`` may supply cached log-mel stacks; by default they are
    computed from the audio files.
    """
    if features is None:
        fb = build_mel_filterbank(sample_rate, n_mels=model.cfg.input_mels)

        def features(meta):
            return clip_features(load_clip(meta.path, sample_rate), fb, band, segmenting)

    out = []
    for meta in manifest:
        stack = features(meta)
        vecs = model.embed(stack[:, None])
        out.extend(Embedding(v, meta, i) for i, v in enumerate(vecs))
    return out
