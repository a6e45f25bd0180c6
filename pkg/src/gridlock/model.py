"""Sliding-window attention encoder with a global CLS token and regression heads.

Frames see the CLS token plus their neighbours within ``window // 2``
positions; the CLS token sees every position. When the window spans the
whole sequence the band degenerates to full attention.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .concepts import ConceptSet, concept_scores
from .errors import FormatError, ValidationError
from .numerics import ShapeError, Tensor
from .rng import make_rng

TASKS = {"angle": ("angle",), "distance": ("distance",), "both": ("angle", "distance")}
TARGET_INDEX = {"angle": 0, "distance": 1}
N_SENSORS = 3

CKPT_MAGIC = b"CGCK"
CKPT_VERSION = 1
BUFFER_NAMES = ("sensor_mean", "sensor_std", "target_mean", "target_std")


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    model_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    window: int = 8
    ffn_dim: int = 128
    dropout_rate: float = 0.1
    tasks: str = "both"
    max_seq_len: int = 256

    def __post_init__(self):
        if self.input_dim < N_SENSORS + 1:
            raise ValidationError(f"input_dim must cover k >= 1 concepts plus 3 sensors, got {self.input_dim}")
        if self.model_dim % self.n_heads:
            raise ValidationError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")
        if self.window < 1:
            raise ValidationError("window must be at least 1")
        if self.window % 2 and self.window != self.max_seq_len:
            raise ValidationError(f"window {self.window} must be even or equal max_seq_len")
        if self.tasks not in TASKS:
            raise ValidationError(f"tasks must be one of {sorted(TASKS)}, got {self.tasks!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError("dropout_rate must be in [0, 1)")
        if self.n_layers < 1 or self.ffn_dim < 1 or self.max_seq_len < 2:
            raise ValidationError("n_layers, ffn_dim must be positive and max_seq_len >= 2")

    @property
    def n_concepts(self) -> int:
        return self.input_dim - N_SENSORS

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads

    @property
    def task_names(self) -> tuple[str, ...]:
        return TASKS[self.tasks]

    def with_concepts(self, k: int) -> "ModelConfig":
        return dataclasses.replace(self, input_dim=k + N_SENSORS)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ModelParams:
    """Learnable tensors in declaration order plus fixed normalization buffers."""

    tensors: dict[str, Tensor]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def count(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def copy(self) -> "ModelParams":
        return ModelParams(
            {n: Tensor(t.data, requires_grad=t.requires_grad) for n, t in self.tensors.items()},
            {n: b.copy() for n, b in self.buffers.items()},
        )

    def replace(self, arrays: dict[str, np.ndarray]) -> "ModelParams":
        tensors = {
            n: Tensor._wrap(arrays[n] if n in arrays else t.data, requires_grad=True)
            for n, t in self.tensors.items()
        }
        return ModelParams(tensors, self.buffers)


def _default_buffers() -> dict[str, np.ndarray]:
    return {
        "sensor_mean": np.zeros(N_SENSORS),
        "sensor_std": np.ones(N_SENSORS),
        "target_mean": np.zeros(2),
        "target_std": np.ones(2),
    }


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, F = config.model_dim, config.ffn_dim
    shapes = {
        "input.weight": (config.input_dim, D),
        "input.bias": (D,),
        "cls": (D,),
        "pos": (config.max_seq_len + 1, D),
    }
    for i in range(config.n_layers):
        p = f"layers.{i}."
        shapes[p + "ln1.gain"] = (D,)
        shapes[p + "ln1.bias"] = (D,)
        for proj in "qkvo":
            shapes[p + f"attn.{proj}.weight"] = (D, D)
            shapes[p + f"attn.{proj}.bias"] = (D,)
        shapes[p + "ln2.gain"] = (D,)
        shapes[p + "ln2.bias"] = (D,)
        shapes[p + "ffn.1.weight"] = (D, F)
        shapes[p + "ffn.1.bias"] = (F,)
        shapes[p + "ffn.2.weight"] = (F, D)
        shapes[p + "ffn.2.bias"] = (D,)
    for task in config.task_names:
        p = f"heads.{task}."
        shapes[p + "ln.gain"] = (D,)
        shapes[p + "ln.bias"] = (D,)
        shapes[p + "fc1.weight"] = (D, F)
        shapes[p + "fc1.bias"] = (F,)
        shapes[p + "fc2.weight"] = (F, 1)
        shapes[p + "fc2.bias"] = (1,)
    return shapes


def parameter_count(config: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(config).values()))


INIT_GAIN = 0.5
CLS_INIT_STD = 0.1


def sinusoidal_table(n_positions: int, dim: int) -> np.ndarray:
    """Fixed sin/cos position code, used to initialize the learned table."""
    pos = np.arange(n_positions)[:, None]
    freq = np.exp(-np.log(10000.0) * (np.arange(0, dim, 2) / dim))
    table = np.zeros((n_positions, dim))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq[: dim // 2])
    return table


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Gains 1, biases 0, sinusoidal positions, N(0, 0.1^2) CLS.

    Weight matrices are N(0, (INIT_GAIN / sqrt(fan_in))^2); the half-width
    start trained more reliably on small synthetic sets than unit gain.
    """
    rng = make_rng(seed, "init")
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            arr = np.ones(shape)
        elif name.endswith(".bias"):
            arr = np.zeros(shape)
        elif name == "pos":
            arr = sinusoidal_table(*shape)
        elif name == "cls":
            arr = rng.normal(0.0, CLS_INIT_STD, size=shape)
        else:
            arr = rng.normal(0.0, INIT_GAIN / np.sqrt(shape[0]), size=shape)
        tensors[name] = Tensor._wrap(arr, requires_grad=True)
    return ModelParams(tensors, _default_buffers())


# ---------------------------------------------------------------------------
# attention


@dataclass
class AttentionTrace:
    """Attention weights gathered during one forward pass of one sequence.

    ``cls_to_frames[l, h]`` is the CLS row of layer ``l``, head ``h`` over the
    frames (length T, excluding the CLS self-weight kept in ``cls_to_cls``).
    ``window_weights[l]`` is ``(H, T, W)`` over the key positions in
    ``window_index`` (masked slots hold 0).
    """

    cls_to_frames: np.ndarray
    cls_to_cls: np.ndarray
    window_weights: list[np.ndarray]
    window_index: np.ndarray
    window_valid: np.ndarray

    @property
    def n_frames(self) -> int:
        return self.cls_to_frames.shape[-1]

    def aggregated(self) -> np.ndarray:
        """Final layer, mean over heads, CLS to each frame."""
        return self.cls_to_frames[-1].mean(axis=0)


def band_index(n_frames: int, window: int) -> tuple[np.ndarray, np.ndarray]:
    """Key positions (row per frame, CLS first) and their validity mask.

    Positions are in the CLS-prefixed sequence: CLS is 0, frame t is t + 1.
    """
    T = n_frames
    if window >= T:
        idx = np.tile(np.arange(T + 1), (T, 1))
        return idx, np.ones_like(idx, dtype=bool)
    half = window // 2
    pos = np.arange(1, T + 1)[:, None] + np.arange(-half, half + 1)[None, :]
    valid = (pos >= 1) & (pos <= T)
    pos = np.where(valid, pos, 0)
    idx = np.concatenate([np.zeros((T, 1), dtype=pos.dtype), pos], axis=1)
    valid = np.concatenate([np.ones((T, 1), dtype=bool), valid], axis=1)
    return idx, valid


def sliding_window_attention(q: Tensor, k: Tensor, v: Tensor, window: int):
    """Scaled dot-product attention with a banded frame pattern and global CLS.

    ``q, k, v`` are ``(..., T+1, d_head)`` with CLS at position 0. Cost is
    O(T * window) for the frames plus O(T) for the CLS row.

    Returns the attended values and ``(cls_weights, window_weights, index,
    valid)`` as numpy arrays.
    """
    if q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    N, dh = q.shape[-2], q.shape[-1]
    T = N - 1
    scale = 1.0 / np.sqrt(dh)
    idx, valid = band_index(T, window)
    lead = q.shape[:-2]

    q_cls = q[..., 0:1, :]
    s_cls = nx.matmul(q_cls, k.swapaxes(-1, -2)) * scale
    p_cls = nx.softmax_rows(s_cls)
    out_cls = nx.matmul(p_cls, v)

    W = idx.shape[1]
    q_f = q[..., 1:, :].reshape(lead + (T, 1, dh))
    k_band = nx.take(k, idx, axis=-2)  # (..., T, W, dh)
    v_band = nx.take(v, idx, axis=-2)
    s_f = nx.matmul(q_f, k_band.swapaxes(-1, -2)) * scale  # (..., T, 1, W)
    p_f = nx.softmax_rows(s_f, mask=valid[:, None, :])
    out_f = nx.matmul(p_f, v_band).reshape(lead + (T, dh))

    out = nx.concat([out_cls, out_f], axis=-2)
    info = (p_cls.data[..., 0, :], p_f.data.reshape(lead + (T, W)), idx, valid)
    return out, info


# ---------------------------------------------------------------------------
# network pieces


def _linear(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    return x @ params[prefix + ".weight"] + params[prefix + ".bias"]


def frame_features(scores: np.ndarray, sensors: np.ndarray, params: ModelParams) -> np.ndarray:
    """Per-frame ``[concept scores | normalized v, a, d]`` rows."""
    scores = np.asarray(scores, dtype=np.float64)
    sensors = np.asarray(sensors, dtype=np.float64)
    if scores.shape[0] != sensors.shape[0]:
        raise ShapeError(f"{scores.shape[0]} score rows but {sensors.shape[0]} sensor rows")
    if sensors.shape[-1] != N_SENSORS:
        raise ShapeError(f"sensors must have 3 channels, got {sensors.shape}")
    b = params.buffers
    norm = (sensors - b["sensor_mean"]) / b["sensor_std"]
    return np.concatenate([scores, norm], axis=-1)


def _embed(features: np.ndarray, params: ModelParams, config: ModelConfig) -> Tensor:
    B, T, F = features.shape
    if F != config.input_dim:
        raise ShapeError(f"feature width {F} != input_dim {config.input_dim}")
    if T > config.max_seq_len:
        raise ShapeError(f"sequence of {T} frames exceeds max_seq_len {config.max_seq_len}")
    x = _linear(Tensor._wrap(features), params, "input")
    cls = params["cls"].reshape(1, 1, config.model_dim) * Tensor._wrap(np.ones((B, 1, 1)))
    h = nx.concat([cls, x], axis=1)
    return h + params["pos"][: T + 1]


def embed_frames(scores, sensors, params: ModelParams, config: ModelConfig) -> Tensor:
    """Project one sequence's frames and prepend CLS: a ``(T+1, model_dim)`` tensor."""
    scores = scores.scores if hasattr(scores, "scores") else scores
    feats = frame_features(scores, sensors, params)
    return _embed(feats[None], params, config).reshape(feats.shape[0] + 1, config.model_dim)


def multi_head_attention(h: Tensor, params: ModelParams, prefix: str, config: ModelConfig):
    B, N, D = h.shape
    H, dh = config.n_heads, config.head_dim

    def split(x: Tensor) -> Tensor:
        return x.reshape(B, N, H, dh).swapaxes(1, 2)

    q = split(_linear(h, params, prefix + "q"))
    k = split(_linear(h, params, prefix + "k"))
    v = split(_linear(h, params, prefix + "v"))
    att, info = sliding_window_attention(q, k, v, config.window)
    merged = att.swapaxes(1, 2).reshape(B, N, D)
    return _linear(merged, params, prefix + "o"), info


def longformer_layer(
    h: Tensor,
    params: ModelParams,
    index: int,
    config: ModelConfig,
    rng: np.random.Generator | None = None,
    training: bool = False,
):
    """Pre-norm residual block: attention sublayer, then GELU feed-forward."""
    p = f"layers.{index}."
    a = nx.layer_norm(h, params[p + "ln1.gain"], params[p + "ln1.bias"])
    att, info = multi_head_attention(a, params, p + "attn.", config)
    h = h + nx.dropout(att, config.dropout_rate, rng, training)
    f = nx.layer_norm(h, params[p + "ln2.gain"], params[p + "ln2.bias"])
    f = _linear(nx.gelu(_linear(f, params, p + "ffn.1")), params, p + "ffn.2")
    h = h + nx.dropout(f, config.dropout_rate, rng, training)
    return h, info


def mlp_head(
    cls_state: Tensor,
    params: ModelParams,
    task: str,
    config: ModelConfig,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    """LayerNorm, linear, GELU, dropout, linear; one scalar per row."""
    p = f"heads.{task}."
    x = nx.layer_norm(cls_state, params[p + "ln.gain"], params[p + "ln.bias"])
    x = nx.gelu(_linear(x, params, p + "fc1"))
    x = nx.dropout(x, config.dropout_rate, rng, training)
    out = _linear(x, params, p + "fc2")
    return out.reshape(out.shape[:-1])


def encode(
    features: np.ndarray,
    params: ModelParams,
    config: ModelConfig,
    rng: np.random.Generator | None = None,
    training: bool = False,
):
    """Run a ``(B, T, input_dim)`` batch through encoder and heads.

    Returns normalized predictions ``{task: Tensor(B,)}`` and per-layer
    attention info.
    """
    if training and config.dropout_rate > 0 and rng is None:
        raise ValueError("training with dropout needs an rng")
    h = _embed(np.asarray(features, dtype=np.float64), params, config)
    infos = []
    for i in range(config.n_layers):
        h, info = longformer_layer(h, params, i, config, rng, training)
        infos.append(info)
    cls_state = h[:, 0, :]
    preds = {t: mlp_head(cls_state, params, t, config, rng, training) for t in config.task_names}
    return preds, infos


def _trace_for(infos, b: int) -> AttentionTrace:
    cls = np.stack([info[0][b] for info in infos])  # (L, H, T+1)
    return AttentionTrace(
        cls_to_frames=cls[:, :, 1:].copy(),
        cls_to_cls=cls[:, :, 0].copy(),
        window_weights=[info[1][b].copy() for info in infos],
        window_index=infos[0][2],
        window_valid=infos[0][3],
    )


@dataclass
class ForwardResult:
    predictions: dict[str, float]
    trace: AttentionTrace
    scores: np.ndarray


def sequence_features(seq, concept_set: ConceptSet, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    scores = concept_scores(seq.frame_embeddings, concept_set).scores
    return frame_features(scores, seq.sensors, params), scores


def denormalize(preds: dict[str, np.ndarray], params: ModelParams) -> dict[str, np.ndarray]:
    b = params.buffers
    return {
        t: np.asarray(p) * b["target_std"][TARGET_INDEX[t]] + b["target_mean"][TARGET_INDEX[t]]
        for t, p in preds.items()
    }


def forward(
    seq,
    concept_set: ConceptSet,
    params: ModelParams,
    config: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> ForwardResult:
    """Predict control commands (in target units) for one sequence."""
    if concept_set.k != config.n_concepts:
        raise ShapeError(f"concept set has {concept_set.k} concepts, config expects {config.n_concepts}")
    feats, scores = sequence_features(seq, concept_set, params)
    preds, infos = encode(feats[None], params, config, rng, training)
    raw = denormalize({t: p.data for t, p in preds.items()}, params)
    return ForwardResult({t: float(v[0]) for t, v in raw.items()}, _trace_for(infos, 0), scores)


def predict_batch(
    seqs: Sequence, concept_set: ConceptSet, params: ModelParams, config: ModelConfig
) -> dict[str, np.ndarray]:
    """Eval-mode predictions in target units, batching equal-length sequences."""
    out = {t: np.zeros(len(seqs)) for t in config.task_names}
    for positions, feats in group_by_length(seqs, concept_set, params):
        preds, _ = encode(feats, params, config)
        for t, v in denormalize({t: p.data for t, p in preds.items()}, params).items():
            out[t][positions] = v
    return out


def group_by_length(seqs: Sequence, concept_set: ConceptSet, params: ModelParams):
    """Yield ``(positions, stacked features)`` for each distinct frame count, in order of first use."""
    groups: dict[int, list[int]] = {}
    for i, s in enumerate(seqs):
        groups.setdefault(s.n_frames, []).append(i)
    for _, positions in groups.items():
        feats = np.stack([sequence_features(seqs[i], concept_set, params)[0] for i in positions])
        yield np.array(positions), feats


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: ModelParams, config: ModelConfig) -> None:
    header = config.to_json().encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(header)), header]
    arrays = [t.data for t in params.tensors.values()]
    arrays += [params.buffers[n] for n in BUFFER_NAMES]
    parts.append(struct.pack("<I", len(arrays)))
    for arr in arrays:
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    raw = Path(path).read_bytes()
    off = 0

    def read(fmt: str):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(raw):
            raise FormatError("truncated checkpoint", offset=len(raw), path=path)
        vals = struct.unpack_from(fmt, raw, off)
        off += size
        return vals

    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}", offset=0, path=path)
    off = 4
    version, hlen = read("<II")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4, path=path)
    if off + hlen > len(raw):
        raise FormatError("truncated checkpoint header", offset=len(raw), path=path)
    try:
        config = ModelConfig.from_dict(json.loads(raw[off : off + hlen].decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"bad config header: {exc}", offset=off, path=path) from exc
    off += hlen
    shapes = param_shapes(config)
    (n_arrays,) = read("<I")
    if n_arrays != len(shapes) + len(BUFFER_NAMES):
        raise FormatError(f"checkpoint holds {n_arrays} arrays, config needs {len(shapes) + 4}", offset=off, path=path)
    names = list(shapes) + list(BUFFER_NAMES)
    arrays = {}
    for name in names:
        (ndim,) = read("<I")
        shape = read(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        if off + 8 * count > len(raw):
            raise FormatError(f"truncated tensor {name}", offset=len(raw), path=path)
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shape)
        off += 8 * count
        if name in shapes and tuple(shape) != shapes[name]:
            raise FormatError(f"tensor {name} has shape {shape}, expected {shapes[name]}", offset=off, path=path)
    if off != len(raw):
        raise FormatError(f"{len(raw) - off} trailing bytes", offset=off, path=path)
    tensors = {n: Tensor._wrap(arrays[n], requires_grad=True) for n in shapes}
    buffers = {n: arrays[n] for n in BUFFER_NAMES}
    return ModelParams(tensors, buffers), config
