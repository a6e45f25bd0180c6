"""The concept bottleneck: scenario texts, their embeddings and cosine scoring."""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, ParameterError, ScoringError, ValidationError
from .rng import make_rng

TEMPLATE_PREFIX = "a photo of "
SOURCE_TAGS = ("human", "generated", "mixed")

EMB_MAGIC = b"CGEM"
EMB_VERSION = 1
_EMB_HEADER = struct.Struct("<4sIII")

_WS = re.compile(r"\s+")


def canonical_text(text: str) -> str:
    return _WS.sub(" ", text).strip().lower()


def apply_template(raw: str) -> str:
    """Prefix a scenario with ``"a photo of "`` unless it already has it."""
    text = _WS.sub(" ", raw or "").strip()
    if not text:
        raise ValidationError("scenario text is empty")
    if text.lower().startswith(TEMPLATE_PREFIX.strip()) and (
        len(text) == len(TEMPLATE_PREFIX.strip()) or text[len(TEMPLATE_PREFIX) - 1] == " "
    ):
        return text
    return TEMPLATE_PREFIX + text


def dedup_concepts(texts: Iterable[str]) -> list[str]:
    """Drop later texts that equal an earlier one after canonicalization."""
    seen = set()
    out = []
    for t in texts:
        key = canonical_text(t)
        if key in seen:
            continue
        seen.add(key)
        out.append(t)
    return out


def _normalize_rows(emb: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    if np.any(norms == 0):
        bad = int(np.flatnonzero(norms[:, 0] == 0)[0])
        raise ValidationError(f"concept embedding row {bad} has zero norm")
    # rows already unit up to rounding are kept bit-for-bit, so selecting
    # from a normalized set never perturbs it
    norms = np.where(np.abs(norms - 1.0) <= 4 * np.finfo(np.float64).eps, 1.0, norms)
    return emb / norms


@dataclass(frozen=True)
class ConceptSet:
    """Scenario texts paired row-for-row with unit-norm text embeddings."""

    texts: tuple[str, ...]
    embeddings: np.ndarray
    source_tag: str = "generated"

    def __post_init__(self):
        texts = tuple(self.texts)
        emb = np.array(self.embeddings, dtype=np.float64)
        if emb.ndim != 2:
            raise ValidationError(f"concept embeddings must be 2-D, got shape {emb.shape}")
        if len(texts) != emb.shape[0]:
            raise ValidationError(
                f"{len(texts)} concept texts but {emb.shape[0]} embedding rows"
            )
        if len(texts) == 0:
            raise ValidationError("concept set is empty")
        if self.source_tag not in SOURCE_TAGS:
            raise ValidationError(f"unknown source_tag {self.source_tag!r}")
        if not np.all(np.isfinite(emb)):
            raise ValidationError("concept embeddings contain non-finite values")
        keys = [canonical_text(t) for t in texts]
        if len(set(keys)) != len(keys):
            dup = next(t for i, t in enumerate(keys) if t in keys[:i])
            raise ValidationError(f"duplicate concept text {dup!r}")
        emb = _normalize_rows(emb)
        emb.flags.writeable = False
        object.__setattr__(self, "texts", texts)
        object.__setattr__(self, "embeddings", emb)

    @property
    def k(self) -> int:
        return len(self.texts)

    @property
    def width(self) -> int:
        return self.embeddings.shape[1]

    def __len__(self) -> int:
        return self.k

    def select(self, indices: Sequence[int], source_tag: str | None = None) -> "ConceptSet":
        idx = np.asarray(indices, dtype=np.intp)
        return ConceptSet(
            tuple(self.texts[i] for i in idx),
            self.embeddings[idx],
            source_tag or self.source_tag,
        )

    @classmethod
    def load(cls, texts_path, embeddings_path, source_tag: str = "generated") -> "ConceptSet":
        texts = read_concept_texts(texts_path)
        emb = read_embeddings(embeddings_path)
        if len(texts) != emb.shape[0]:
            raise ValidationError(
                f"{texts_path} has {len(texts)} concepts but {embeddings_path} "
                f"has {emb.shape[0]} rows"
            )
        return cls(tuple(texts), emb, source_tag)

    def save(self, texts_path, embeddings_path) -> None:
        write_concept_texts(self.texts, texts_path)
        write_embeddings(self.embeddings, embeddings_path)


def read_concept_texts(path) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln.strip() for ln in lines if ln.strip()]


def write_concept_texts(texts: Iterable[str], path) -> None:
    Path(path).write_text("".join(f"{t}\n" for t in texts), encoding="utf-8")


def write_embeddings(emb: np.ndarray, path) -> None:
    emb = np.asarray(emb)
    if emb.ndim != 2:
        raise ValidationError(f"embeddings must be 2-D, got shape {emb.shape}")
    k, width = emb.shape
    payload = _EMB_HEADER.pack(EMB_MAGIC, EMB_VERSION, k, width)
    payload += np.ascontiguousarray(emb, dtype="<f4").tobytes()
    Path(path).write_bytes(payload)


def read_embeddings(path) -> np.ndarray:
    """Read a CGEM file as float64 (rows are not normalized here)."""
    raw = Path(path).read_bytes()
    if len(raw) < _EMB_HEADER.size:
        raise FormatError("truncated CGEM header", offset=len(raw), path=path)
    magic, version, k, width = _EMB_HEADER.unpack_from(raw, 0)
    if magic != EMB_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0, path=path)
    if version != EMB_VERSION:
        raise FormatError(f"unsupported CGEM version {version}", offset=4, path=path)
    need = _EMB_HEADER.size + 4 * k * width
    if len(raw) != need:
        raise FormatError(
            f"CGEM payload is {len(raw)} bytes, expected {need}",
            offset=min(len(raw), need),
            path=path,
        )
    data = np.frombuffer(raw, dtype="<f4", count=k * width, offset=_EMB_HEADER.size)
    return data.astype(np.float64).reshape(k, width)


@dataclass(frozen=True)
class ConceptScoreMatrix:
    """Per-frame cosine similarities, one row per frame."""

    scores: np.ndarray
    frame_index: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.frame_index is None:
            object.__setattr__(self, "frame_index", np.arange(self.scores.shape[0]))

    @property
    def shape(self) -> tuple[int, int]:
        return self.scores.shape


def concept_scores(frame_embeddings: np.ndarray, concept_set: ConceptSet) -> ConceptScoreMatrix:
    """Cosine similarity of every frame embedding against every concept."""
    x = np.asarray(frame_embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ScoringError(f"frame embeddings must be 2-D, got shape {x.shape}")
    if x.shape[1] != concept_set.width:
        raise ScoringError(
            f"frame embedding width {x.shape[1]} does not match concept width {concept_set.width}"
        )
    norms = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ScoringError(f"frame {int(zero[0])} has a zero-norm embedding")
    scores = (x / norms[:, None]) @ concept_set.embeddings.T
    # rounding can push |cos| a hair past 1
    np.clip(scores, -1.0, 1.0, out=scores)
    return ConceptScoreMatrix(scores)


def top_k_concepts(scores_row, k_top: int) -> list[tuple[int, float]]:
    """Highest-scoring concepts, ties broken by lower index."""
    row = np.asarray(scores_row, dtype=np.float64).reshape(-1)
    if not 1 <= k_top <= row.size:
        raise ParameterError(f"k_top must be in [1, {row.size}], got {k_top}")
    # lexsort sorts by the last key first
    order = np.lexsort((np.arange(row.size), -row))[:k_top]
    return [(int(i), float(row[i])) for i in order]


def subset_concepts(concept_set: ConceptSet, size: int, seed: int) -> ConceptSet:
    """Seeded uniform draw of ``size`` concepts without replacement.

    Drawing the full size returns the set unchanged (original order).
    """
    if not 1 <= size <= concept_set.k:
        raise ParameterError(f"subset size must be in [1, {concept_set.k}], got {size}")
    if size == concept_set.k:
        return concept_set
    rng = make_rng(seed, "concept-subset")
    idx = np.sort(rng.choice(concept_set.k, size=size, replace=False))
    return concept_set.select(idx)


def merge_concept_lists(*lists: Iterable[str]) -> list[str]:
    """Template every entry, then drop canonical duplicates across all lists."""
    merged = [apply_template(t) for lst in lists for t in lst if t.strip()]
    return dedup_concepts(merged)


def compare_concept_sets(sets, sequences, model_config=None, train_config=None, seed: int = 0):
    """Train and evaluate one model per concept set under identical settings.

    ``sets`` is a sequence of ConceptSets (their ``source_tag`` labels the
    rows) or of ``(tag, ConceptSet)`` pairs. Returns one dict per set with
    keys ``set_tag, size, d_mae, a_mae``.
    """
    from .training import TrainConfig, evaluate, fit, split_dataset
    from .model import ModelConfig

    pairs = [(s.source_tag, s) if isinstance(s, ConceptSet) else tuple(s) for s in sets]
    widths = {s.width for _, s in pairs}
    if len(widths) != 1:
        raise ValidationError(f"concept sets have mismatched embedding widths {sorted(widths)}")
    train_config = train_config or TrainConfig(seed=seed)
    train, val, test = split_dataset(sequences, seed=train_config.seed)
    rows = []
    for tag, cset in pairs:
        cfg = (model_config or ModelConfig(input_dim=cset.k + 3)).with_concepts(cset.k)
        result = fit(train, val, cset, cfg, train_config)
        report = evaluate(test, cset, result.params, cfg)
        rows.append(
            {
                "set_tag": tag,
                "size": cset.k,
                "d_mae": report.mae.get("distance", float("nan")),
                "a_mae": report.mae.get("angle", float("nan")),
            }
        )
    return rows
