"""Explanations from the bottleneck and the encoder's attention.

Per-frame top concepts, windowed aggregation of those lists, the CLS
attention series with a spike detector, a reveal policy built on it, and a
content-word overlap check against free-text scene descriptions.
"""

from __future__ import annotations

import csv
import io
import json
import re
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .concepts import ConceptSet, concept_scores, top_k_concepts
from .errors import ParameterError
from .model import AttentionTrace, ModelConfig, ModelParams, forward
from .stopwords import ENGLISH_STOPWORDS, TEMPLATE_WORDS

MAD_TO_SIGMA = 1.4826
# relative floor on the robust scale; keeps z finite when most steps are flat
SCALE_FLOOR = 1e-6


@dataclass
class WindowSummary:
    start: int
    stop: int
    fractions: np.ndarray
    top: list[tuple[int, float]]


def aggregate_top_concepts(scores, window_frames: int = 20, k_per_frame: int = 10, n_top: int = 3):
    """Count how often each concept lands in a frame's top-k, per window.

    Windows are consecutive, non-overlapping runs of ``window_frames``
    frames (the last one may be shorter). A concept's fraction is its count
    divided by the number of frames in the window, so fractions in a window
    sum to ``k_per_frame``. Equal fractions are ordered by the concept's
    summed score over the window, then by index.
    """
    s = np.asarray(getattr(scores, "scores", scores), dtype=np.float64)
    if window_frames < 1:
        raise ParameterError("window_frames must be at least 1")
    T, k = s.shape
    if not 1 <= k_per_frame <= k:
        raise ParameterError(f"k_per_frame must be in [1, {k}], got {k_per_frame}")
    hits = np.zeros((T, k))
    for t in range(T):
        for j, _ in top_k_concepts(s[t], k_per_frame):
            hits[t, j] = 1.0
    out = []
    for start in range(0, T, window_frames):
        stop = min(start + window_frames, T)
        frac = hits[start:stop].sum(axis=0) / (stop - start)
        total = s[start:stop].sum(axis=0)
        order = np.lexsort((np.arange(k), -total, -frac))[: min(n_top, k)]
        out.append(WindowSummary(start, stop, frac, [(int(j), float(frac[j])) for j in order]))
    return out


def attention_series(trace: AttentionTrace) -> np.ndarray:
    """Final-layer, head-averaged CLS attention over frames."""
    if trace is None or trace.cls_to_frames.size == 0:
        raise ValueError("attention trace is empty")
    return trace.aggregated()


@dataclass
class SpikeEvent:
    frame: int
    direction: str  # "rise" or "drop"
    z: float


def robust_z(series) -> np.ndarray:
    """Robust z-scores (median/MAD) of first differences; entry i is the step into frame i+1."""
    x = np.asarray(series, dtype=np.float64)
    diff = np.diff(x)
    dev = diff - np.median(diff)
    spread = np.max(np.abs(dev)) if dev.size else 0.0
    if spread <= 1e-12 * max(1.0, float(np.max(np.abs(x)))):
        return np.zeros_like(diff)
    scale = max(MAD_TO_SIGMA * float(np.median(np.abs(dev))), SCALE_FLOOR * spread)
    return dev / scale


def detect_spikes(series, z_threshold: float = 2.5, min_gap: int = 4) -> list[SpikeEvent]:
    """Frames where the attention series jumps or falls abruptly.

    Events closer than ``min_gap`` frames are merged, keeping the larger |z|.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.size < 8:
        raise ParameterError(f"spike detection needs at least 8 frames, got {x.size}")
    z = robust_z(x)
    events: list[SpikeEvent] = []
    for i in np.flatnonzero(np.abs(z) >= z_threshold):
        ev = SpikeEvent(int(i) + 1, "rise" if z[i] > 0 else "drop", float(z[i]))
        if events and ev.frame - events[-1].frame < min_gap:
            if abs(ev.z) > abs(events[-1].z):
                events[-1] = ev
            continue
        events.append(ev)
    return events


@dataclass
class RevealFlag:
    frame: int
    reveal: bool
    concepts: list[tuple[int, float]] = field(default_factory=list)


def reveal_decision(
    events: Sequence[SpikeEvent],
    windows: Sequence[WindowSummary],
    n_frames: int | None = None,
    hold_off: int = 4,
) -> list[RevealFlag]:
    """Reveal on each event frame and the ``hold_off`` frames after it.

    A revealed frame carries the aggregated top concepts of its window.
    """
    if n_frames is None:
        n_frames = windows[-1].stop if windows else 0
    reveal = np.zeros(n_frames, dtype=bool)
    for ev in events:
        reveal[ev.frame : min(ev.frame + hold_off + 1, n_frames)] = True
    flags = []
    for t in range(n_frames):
        payload = []
        if reveal[t]:
            win = next((w for w in windows if w.start <= t < w.stop), None)
            payload = list(win.top) if win else []
        flags.append(RevealFlag(t, bool(reveal[t]), payload))
    return flags


_TOKEN = re.compile(r"[^0-9a-z]+")


def content_words(text: str, stopwords: Iterable[str] | None = None) -> set[str]:
    stop = set(ENGLISH_STOPWORDS if stopwords is None else stopwords) | TEMPLATE_WORDS
    return {w for w in _TOKEN.split(text.lower()) if w and w not in stop}


def content_word_overlap(predicted_concepts, ground_truth: str, stopwords=None) -> dict:
    """Shared content words between predicted concept texts and a description.

    ``predicted_concepts`` is a text or a ranked list of texts; the
    ``top1_*`` entries use only the first one.
    """
    if not ground_truth or not ground_truth.strip():
        raise ParameterError("ground-truth description is empty")
    preds = [predicted_concepts] if isinstance(predicted_concepts, str) else list(predicted_concepts)
    truth = content_words(ground_truth, stopwords)
    matched = set()
    for p in preds:
        matched |= content_words(p, stopwords) & truth
    top1 = content_words(preds[0], stopwords) & truth if preds else set()
    return {
        "hit": bool(matched),
        "matched": sorted(matched),
        "top1_hit": bool(top1),
        "top1_matched": sorted(top1),
    }


def scene_explain_rate(
    sequences: Sequence, concept_set: ConceptSet, mode: str = "top3", k_per_frame: int = 10
) -> dict:
    """Fraction of described scenes whose top concepts share a content word.

    Scene granularity ranks concepts by how often they appear in per-frame
    top-``k_per_frame`` lists over the whole scene; frame granularity uses
    each frame's own top concepts and averages over all frames.
    """
    n_top = {"top1": 1, "top3": 3}.get(mode)
    if n_top is None:
        raise ParameterError(f"mode must be 'top1' or 'top3', got {mode!r}")
    scene_hits, frame_hits, skipped = [], [], 0
    for seq in sequences:
        if not seq.scene_description:
            skipped += 1
            continue
        s = concept_scores(seq.frame_embeddings, concept_set).scores
        win = aggregate_top_concepts(s, s.shape[0], min(k_per_frame, concept_set.k), n_top)[0]
        texts = [concept_set.texts[j] for j, _ in win.top]
        scene_hits.append(content_word_overlap(texts, seq.scene_description)["hit"])
        for row in s:
            top = [concept_set.texts[j] for j, _ in top_k_concepts(row, min(n_top, concept_set.k))]
            frame_hits.append(content_word_overlap(top, seq.scene_description)["hit"])
    return {
        "mode": mode,
        "scene_rate": float(np.mean(scene_hits)) if scene_hits else float("nan"),
        "frame_rate": float(np.mean(frame_hits)) if frame_hits else float("nan"),
        "n_scenes": len(scene_hits),
        "skipped": skipped,
    }


# ---------------------------------------------------------------------------
# reports


@dataclass
class ExplanationReport:
    sequence_id: str
    frame_top: list[list[tuple[str, float]]]
    windows: list[dict]
    attention: list[float]
    events: list[SpikeEvent]
    reveals: list[RevealFlag]
    predictions: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "sequence_id": self.sequence_id,
            "predictions": self.predictions,
            "frame_top": [[[t, s] for t, s in row] for row in self.frame_top],
            "windows": self.windows,
            "attention": self.attention,
            "events": [asdict(e) for e in self.events],
            "reveal": [r.reveal for r in self.reveals],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["frame", "attention", "reveal", "top1_concept"])
        for t, (a, r) in enumerate(zip(self.attention, self.reveals)):
            writer.writerow([t, repr(a), int(r.reveal), self.frame_top[t][0][0]])
        return buf.getvalue()


def explain_sequence(
    seq,
    concept_set: ConceptSet,
    params: ModelParams,
    config: ModelConfig,
    top_k: int = 10,
    window_frames: int = 20,
    z_threshold: float = 2.5,
    min_gap: int = 4,
    hold_off: int = 4,
) -> ExplanationReport:
    result = forward(seq, concept_set, params, config)
    s = result.scores
    top_k = min(top_k, concept_set.k)
    frame_top = [[(concept_set.texts[j], v) for j, v in top_k_concepts(row, top_k)] for row in s]
    windows = aggregate_top_concepts(s, window_frames, top_k)
    series = attention_series(result.trace)
    events = detect_spikes(series, z_threshold, min_gap) if series.size >= 8 else []
    reveals = reveal_decision(events, windows, s.shape[0], hold_off)
    win_rows = [
        {
            "start": w.start,
            "stop": w.stop,
            "top": [{"concept": concept_set.texts[j], "fraction": f} for j, f in w.top],
        }
        for w in windows
    ]
    return ExplanationReport(
        seq.id, frame_top, win_rows, [float(a) for a in series], events, reveals, result.predictions
    )
