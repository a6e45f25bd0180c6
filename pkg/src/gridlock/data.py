"""Drive sequences, their binary file format, manifests and a synthetic generator.

Sensor channels are ``(v, a, d)``: speed in m/s, steering angle in degrees,
lead-vehicle distance in meters. Row ``t`` of ``DriveSequence.sensors`` holds
the measurements available *before* frame ``t`` (the previous frame's
readings), so the regression targets, the readings at the final frame, are
never part of the input.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .concepts import ConceptSet, read_concept_texts, read_embeddings, write_embeddings
from .errors import FormatError, ParameterError, ValidationError
from .rng import make_rng

SEQ_MAGIC = b"CGSQ"
SEQ_VERSION = 1
_SEQ_HEADER = struct.Struct("<4sIIIfI")

FLAG_DESCRIPTION = 0x1
_PROFILE_SHIFT = 1
PROFILES = {None: 0, "comma": 1, "nuscenes": 2}
_PROFILE_NAMES = {v: k for k, v in PROFILES.items()}
# (frames, fps) fixed by each recording profile
PROFILE_SHAPES = {"comma": (240, 4.0), "nuscenes": (20, 1.0)}

UNITS = {"speed": "m/s", "angle": "deg", "distance": "m"}
SENSOR_NAMES = ("v", "a", "d")


@dataclass
class DriveSequence:
    id: str
    frame_embeddings: np.ndarray
    sensors: np.ndarray
    targets: np.ndarray  # (angle, distance) at the final frame
    fps: float = 4.0
    scene_description: str | None = None
    profile: str | None = None

    def __post_init__(self):
        self.frame_embeddings = np.asarray(self.frame_embeddings, dtype=np.float64)
        self.sensors = np.asarray(self.sensors, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1)

    @property
    def n_frames(self) -> int:
        return self.frame_embeddings.shape[0]

    @property
    def width(self) -> int:
        return self.frame_embeddings.shape[1]

    @property
    def angle(self) -> float:
        return float(self.targets[0])

    @property
    def distance(self) -> float:
        return float(self.targets[1])

    def validate(self) -> "DriveSequence":
        emb, sens = self.frame_embeddings, self.sensors
        if emb.ndim != 2:
            raise ValidationError(f"{self.id}: frame_embeddings must be 2-D, got {emb.shape}")
        T = emb.shape[0]
        if T < 2:
            raise ValidationError(f"{self.id}: T must be at least 2, got {T}")
        if sens.shape != (T, 3):
            raise ValidationError(f"{self.id}: sensors must be ({T}, 3), got {sens.shape}")
        if self.targets.shape != (2,):
            raise ValidationError(f"{self.id}: targets must hold (angle, distance)")
        for name, arr in (("frame_embeddings", emb), ("sensors", sens), ("targets", self.targets)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{self.id}: {name} contains NaN or Inf")
        if np.any(sens[:, 0] < 0):
            raise ValidationError(f"{self.id}: sensor channel 'v' has negative speed")
        if np.any(sens[:, 2] < 0) or self.targets[1] < 0:
            raise ValidationError(f"{self.id}: sensor channel 'd' has negative distance")
        if self.profile is not None:
            if self.profile not in PROFILE_SHAPES:
                raise ValidationError(f"{self.id}: unknown profile {self.profile!r}")
            frames, fps = PROFILE_SHAPES[self.profile]
            if T != frames or not np.isclose(self.fps, fps):
                raise ValidationError(
                    f"{self.id}: profile {self.profile} needs T={frames} at {fps} fps, "
                    f"got T={T} at {self.fps} fps"
                )
        return self

    def equals(self, other: "DriveSequence") -> bool:
        return (
            self.id == other.id
            and np.array_equal(self.frame_embeddings, other.frame_embeddings)
            and np.array_equal(self.sensors, other.sensors)
            and np.array_equal(self.targets, other.targets)
            and self.fps == other.fps
            and self.scene_description == other.scene_description
            and self.profile == other.profile
        )


def encode_sequence(seq: DriveSequence) -> bytes:
    seq.validate()
    T, width = seq.frame_embeddings.shape
    flags = PROFILES[seq.profile] << _PROFILE_SHIFT
    if seq.scene_description is not None:
        flags |= FLAG_DESCRIPTION
    parts = [
        _SEQ_HEADER.pack(SEQ_MAGIC, SEQ_VERSION, T, width, seq.fps, flags),
        np.ascontiguousarray(seq.frame_embeddings, dtype="<f4").tobytes(),
        np.ascontiguousarray(seq.sensors, dtype="<f8").tobytes(),
        np.ascontiguousarray(seq.targets, dtype="<f8").tobytes(),
    ]
    if seq.scene_description is not None:
        text = seq.scene_description.encode("utf-8")
        parts.append(struct.pack("<I", len(text)) + text)
    return b"".join(parts)


def decode_sequence(raw: bytes, seq_id: str = "", path=None) -> DriveSequence:
    def need(offset: int, n: int, what: str) -> None:
        if offset + n > len(raw):
            raise FormatError(f"truncated CGSQ file while reading {what}", offset=len(raw), path=path)

    need(0, _SEQ_HEADER.size, "header")
    magic, version, T, width, fps, flags = _SEQ_HEADER.unpack_from(raw, 0)
    if magic != SEQ_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0, path=path)
    if version != SEQ_VERSION:
        raise FormatError(f"unsupported CGSQ version {version}", offset=4, path=path)
    profile_code = flags >> _PROFILE_SHIFT
    if profile_code not in _PROFILE_NAMES:
        raise FormatError(f"unknown profile code {profile_code}", offset=20, path=path)
    off = _SEQ_HEADER.size
    need(off, 4 * T * width, "embeddings")
    emb = np.frombuffer(raw, dtype="<f4", count=T * width, offset=off).astype(np.float64)
    off += 4 * T * width
    need(off, 8 * T * 3, "sensors")
    sensors = np.frombuffer(raw, dtype="<f8", count=T * 3, offset=off).copy()
    off += 8 * T * 3
    need(off, 16, "targets")
    targets = np.frombuffer(raw, dtype="<f8", count=2, offset=off).copy()
    off += 16
    description = None
    if flags & FLAG_DESCRIPTION:
        need(off, 4, "description length")
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        need(off, n, "description")
        try:
            description = raw[off : off + n].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("description is not valid UTF-8", offset=off, path=path) from exc
        off += n
    if off != len(raw):
        raise FormatError(f"{len(raw) - off} trailing bytes", offset=off, path=path)
    seq = DriveSequence(
        id=seq_id,
        frame_embeddings=emb.reshape(T, width),
        sensors=sensors.reshape(T, 3),
        targets=targets,
        fps=float(fps),
        scene_description=description,
        profile=_PROFILE_NAMES[profile_code],
    )
    return seq.validate()


def write_sequence(seq: DriveSequence, path) -> None:
    path = Path(path)
    try:
        path.write_bytes(encode_sequence(seq))
    except OSError as exc:
        raise OSError(f"cannot write sequence to {path}: {exc}") from exc


def read_sequence(path) -> DriveSequence:
    path = Path(path)
    return decode_sequence(path.read_bytes(), seq_id=path.stem, path=path)


@dataclass
class SensorNormalizer:
    """Per-channel standardization fitted on a training split."""

    mean: np.ndarray
    std: np.ndarray

    def transform(self, sensors: np.ndarray) -> np.ndarray:
        return (np.asarray(sensors) - self.mean) / self.std


STD_FLOOR = 1e-6


def normalize_sensors(train_split: Sequence[DriveSequence]) -> SensorNormalizer:
    if not train_split:
        raise ParameterError("cannot fit sensor statistics on an empty split")
    stacked = np.concatenate([s.sensors for s in train_split], axis=0)
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), STD_FLOOR)
    return SensorNormalizer(mean, std)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class Dataset:
    name: str
    sequences: list[DriveSequence]
    concept_set: ConceptSet
    root: Path | None = None
    extra: dict = field(default_factory=dict)

    @property
    def width(self) -> int:
        return self.concept_set.width


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_dataset(
    out_dir,
    sequences: Sequence[DriveSequence],
    concept_set: ConceptSet,
    name: str = "synthetic",
    extra: dict | None = None,
) -> Path:
    """Write CGSQ files, concept files and ``manifest.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sequences").mkdir(exist_ok=True)
    entries = []
    for seq in sequences:
        rel = f"sequences/{seq.id}.cgsq"
        write_sequence(seq, out / rel)
        entries.append({"path": rel, "profile": seq.profile})
    concept_set.save(out / "concepts.txt", out / "concepts.emb")
    manifest = {
        "dataset": name,
        "embedding_dim": concept_set.width,
        "concepts": {
            "texts": "concepts.txt",
            "embeddings": "concepts.emb",
            "source_tag": concept_set.source_tag,
        },
        "sequences": entries,
        "units": UNITS,
    }
    if extra:
        manifest["extra"] = extra
    path = out / "manifest.json"
    path.write_text(_canonical_json(manifest), encoding="utf-8")
    return path


def load_manifest(path) -> Dataset:
    """Load and cross-check every file a manifest references."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc.msg}", offset=exc.pos, path=path)
    root = path.parent
    for key in ("dataset", "embedding_dim", "concepts", "sequences"):
        if key not in manifest:
            raise ValidationError(f"manifest {path} lacks {key!r}")
    width = int(manifest["embedding_dim"])
    cinfo = manifest["concepts"]
    for key in ("texts", "embeddings"):
        if not (root / cinfo[key]).exists():
            raise FileNotFoundError(f"concept file not found: {root / cinfo[key]}")
    cset = ConceptSet(
        tuple(read_concept_texts(root / cinfo["texts"])),
        read_embeddings(root / cinfo["embeddings"]),
        cinfo.get("source_tag", "generated"),
    )
    if cset.width != width:
        raise ValidationError(f"concept width {cset.width} != manifest embedding_dim {width}")
    sequences = []
    for entry in manifest["sequences"]:
        seq_path = root / entry["path"]
        if not seq_path.exists():
            raise FileNotFoundError(f"sequence file not found: {seq_path}")
        seq = read_sequence(seq_path)
        if seq.width != width:
            raise ValidationError(f"{seq_path}: embedding width {seq.width} != {width}")
        if entry.get("profile") != seq.profile:
            raise ValidationError(f"{seq_path}: profile {seq.profile} != manifest {entry.get('profile')}")
        sequences.append(seq)
    return Dataset(manifest["dataset"], sequences, cset, root, manifest.get("extra", {}))


# ---------------------------------------------------------------------------
# synthetic data

CLOSE, JUNCTION, STRAIGHT = 0, 1, 2
_NAMED_CONCEPTS = (
    "a photo of a vehicle in close proximity ahead",
    "a photo of a junction",
    "a photo of a straight road",
)
BASE_DISTANCE = 60.0


@dataclass
class SyntheticSpec:
    n_sequences: int = 80
    frames: int = 20
    width: int = 64
    n_concepts: int = 24
    seed: int = 0
    noise_std: float = 0.05
    n_informative: int = 3
    fps: float = 1.0
    profile: str | None = None
    # probability that the scene switches exactly at the final frame, which
    # hides the targets from the (one-frame-delayed) sensor history
    final_change: float = 0.0

    def validate(self) -> "SyntheticSpec":
        if self.n_concepts < 4 or self.width < 4:
            raise ParameterError("synthetic data needs at least 4 concepts and width 4")
        if not 3 <= self.n_informative < self.n_concepts:
            raise ParameterError(
                f"n_informative must be in [3, {self.n_concepts - 1}], got {self.n_informative}"
            )
        if self.frames < 2 or self.n_sequences < 1:
            raise ParameterError("need at least one sequence of two frames")
        if self.noise_std < 0:
            raise ParameterError("noise_std must be nonnegative")
        if not 0.0 <= self.final_change <= 1.0:
            raise ParameterError("final_change must be a probability")
        if self.profile is not None:
            frames, fps = PROFILE_SHAPES[self.profile]
            if (self.frames, self.fps) != (frames, fps):
                raise ParameterError(f"profile {self.profile} needs {frames} frames at {fps} fps")
        return self


@dataclass
class SyntheticDataset:
    sequences: list[DriveSequence]
    concept_set: ConceptSet
    rule: dict
    # per sequence: T x k mixture weights and the per-frame (v, a, d) readings
    mixtures: list[np.ndarray]
    readings: list[np.ndarray]

    def target_from_mix(self, mix: np.ndarray) -> np.ndarray:
        """Noise-free (angle, distance) implied by a k-vector of mix weights."""
        return apply_rule(self.rule, mix)


def apply_rule(rule: dict, mix: np.ndarray) -> np.ndarray:
    mix = np.asarray(mix, dtype=np.float64)
    angle = sum(c * mix[..., int(j)] for j, c in rule["angle_coef"].items())
    dist = rule["base_distance"] + sum(c * mix[..., int(j)] for j, c in rule["distance_coef"].items())
    return np.stack([np.asarray(angle, dtype=float), np.asarray(dist, dtype=float)], axis=-1)


def synthetic_concept_texts(k: int) -> list[str]:
    return list(_NAMED_CONCEPTS) + [f"a photo of concept{j:03d}" for j in range(3, k)]


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    """Sequences whose targets follow a known rule over concept mixtures.

    Each sequence has an anchor (scene) concept present in every frame and
    segments of 3-8 frames that add up to two further concepts, favouring
    the informative ones. The readings at frame ``t`` follow

        d = 60 - 45 * w_close (+ further informative terms)
        a = 12 * (w_junction - w_straight) (+ further informative terms)

    plus Gaussian noise of ``noise_std`` in target units. Frame embeddings
    are the weighted concept vectors plus isotropic noise of norm about
    ``noise_std``.
    """
    spec.validate()
    rng = make_rng(spec.seed, "synthetic")
    k, width = spec.n_concepts, spec.width
    concepts = rng.standard_normal((k, width))
    concepts /= np.linalg.norm(concepts, axis=1, keepdims=True)
    cset = ConceptSet(tuple(synthetic_concept_texts(k)), concepts, "generated")

    distance_coef = {CLOSE: -45.0}
    angle_coef = {JUNCTION: 12.0, STRAIGHT: -12.0}
    for j in range(3, spec.n_informative):
        distance_coef[j] = -float(rng.uniform(5.0, 40.0))
        angle_coef[j] = float(rng.choice([-1.0, 1.0]) * rng.uniform(3.0, 12.0))
    rule = {
        "base_distance": BASE_DISTANCE,
        "distance_coef": {str(j): c for j, c in distance_coef.items()},
        "angle_coef": {str(j): c for j, c in angle_coef.items()},
        "target_noise_std": spec.noise_std,
        "speed": "v = 0.4 * d + 2 + noise",
        "informative": list(range(spec.n_informative)),
    }
    informative = np.arange(spec.n_informative)
    background = np.arange(spec.n_informative, k)

    sequences, mixtures, readings = [], [], []
    T = spec.frames
    for n in range(spec.n_sequences):
        anchor = int(rng.choice(background))
        mix = np.zeros((T, k))
        # segments are laid out backwards from the final frame so the scene
        # that sets the targets lasts at least three frames, unless it is
        # a last-frame switch
        t = T
        switch = spec.final_change > 0 and rng.random() < spec.final_change
        while t > 0:
            seg = min(int(rng.integers(3, 9)), t)
            if switch and t == T:
                seg = 1
            n_extra = int(rng.integers(0, 3))
            extras = []
            for _ in range(n_extra):
                pool = informative if rng.random() < 0.7 else background
                c = int(rng.choice(pool))
                if c != anchor and c not in extras:
                    extras.append(c)
            w_anchor = rng.uniform(0.3, 0.6) if extras else 1.0
            row = np.zeros(k)
            row[anchor] = w_anchor
            if extras:
                w = rng.uniform(0.2, 1.0, size=len(extras))
                row[extras] = (1.0 - w_anchor) * w / w.sum()
            mix[t - seg : t] = row
            t -= seg
        emb = mix @ concepts + rng.standard_normal((T, width)) * (spec.noise_std / np.sqrt(width))
        clean = apply_rule(rule, mix)
        angle = clean[:, 0] + rng.standard_normal(T) * spec.noise_std
        dist = np.maximum(clean[:, 1] + rng.standard_normal(T) * spec.noise_std, 0.0)
        speed = np.maximum(0.4 * dist + 2.0 + rng.standard_normal(T) * spec.noise_std, 0.0)
        reading = np.stack([speed, angle, dist], axis=1)
        shifted = np.concatenate([reading[:1], reading[:-1]], axis=0)
        seq = DriveSequence(
            id=f"seq{n:05d}",
            frame_embeddings=emb,
            sensors=shifted,
            targets=np.array([angle[-1], dist[-1]]),
            fps=spec.fps,
            scene_description=cset.texts[anchor],
            profile=spec.profile,
        ).validate()
        sequences.append(seq)
        mixtures.append(mix)
        readings.append(reading)
    return SyntheticDataset(sequences, cset, rule, mixtures, readings)


def informative_split_sets(data: SyntheticDataset, size: int, seed: int = 0):
    """Two disjoint concept sets: one holding every informative concept, one holding none."""
    k = data.concept_set.k
    inf = list(data.rule["informative"])
    rest = [j for j in range(k) if j not in inf]
    if size < len(inf) or 2 * size - len(inf) > k:
        raise ParameterError(f"cannot build two disjoint sets of size {size} from {k} concepts")
    rng = make_rng(seed, "informative-split")
    perm = [rest[i] for i in rng.permutation(len(rest))]
    a = sorted(inf + perm[: size - len(inf)])
    b = sorted(perm[size - len(inf) : 2 * size - len(inf)])
    return data.concept_set.select(a), data.concept_set.select(b)
