import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridlock.concepts import concept_scores
from gridlock.data import (
    CLOSE,
    DriveSequence,
    SyntheticSpec,
    apply_rule,
    decode_sequence,
    encode_sequence,
    generate_synthetic,
    load_manifest,
    normalize_sensors,
    read_sequence,
    write_dataset,
    write_sequence,
)
from gridlock.errors import FormatError, ParameterError, ValidationError


def random_sequence(rng, T=None, width=None, described=None, profile=None):
    T = T or int(rng.integers(2, 30))
    width = width or int(rng.integers(1, 12))
    if profile:
        T, fps = {"comma": (240, 4.0), "nuscenes": (20, 1.0)}[profile]
    else:
        fps = float(rng.choice([1.0, 4.0, 10.0]))
    sensors = np.abs(rng.standard_normal((T, 3))) * [10.0, 1.0, 30.0]
    sensors[:, 1] -= 0.5
    desc = None
    if described if described is not None else rng.random() < 0.5:
        desc = "a photo of a junction ü" if rng.random() < 0.5 else ""
    return DriveSequence(
        id="s",
        frame_embeddings=rng.standard_normal((T, width)),
        sensors=sensors,
        targets=np.array([rng.standard_normal(), abs(rng.standard_normal()) * 20]),
        fps=fps,
        scene_description=desc,
        profile=profile,
    )


def same(a, b):
    return (
        np.array_equal(a.sensors, b.sensors)
        and np.array_equal(a.targets, b.targets)
        and np.allclose(a.frame_embeddings, b.frame_embeddings, rtol=1e-6, atol=0)
        and a.fps == b.fps
        and a.scene_description == b.scene_description
        and a.profile == b.profile
    )


def test_round_trip_200_random(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(200):
        profile = [None, None, None, "nuscenes", "comma"][i % 5] if i % 7 == 0 else None
        seq = random_sequence(rng, profile=profile)
        path = tmp_path / "s.cgsq"
        write_sequence(seq, path)
        back = read_sequence(path)
        assert same(seq, back), i


def test_double_write_byte_identical(tmp_path):
    seq = random_sequence(np.random.default_rng(1))
    write_sequence(seq, tmp_path / "a.cgsq")
    write_sequence(seq, tmp_path / "b.cgsq")
    assert (tmp_path / "a.cgsq").read_bytes() == (tmp_path / "b.cgsq").read_bytes()


def test_truncated_and_corrupt_files_raise_format_error():
    raw = encode_sequence(random_sequence(np.random.default_rng(2), described=True))
    for cut in (3, 10, 30, len(raw) - 1):
        with pytest.raises(FormatError, match="byte offset"):
            decode_sequence(raw[:cut])
    with pytest.raises(FormatError, match="magic"):
        decode_sequence(b"NOPE" + raw[4:])
    with pytest.raises(FormatError, match="version"):
        decode_sequence(raw[:4] + (9).to_bytes(4, "little") + raw[8:])
    with pytest.raises(FormatError):
        decode_sequence(raw + b"\x00")


def test_negative_distance_names_field(tmp_path):
    seq = random_sequence(np.random.default_rng(3))
    seq.sensors[1, 2] = -1.0
    with pytest.raises(ValidationError, match="'d'"):
        seq.validate()
    seq.sensors[1, 2] = 1.0
    seq.sensors[0, 0] = -2.0
    with pytest.raises(ValidationError, match="'v'"):
        seq.validate()


def test_profile_shapes_enforced():
    rng = np.random.default_rng(4)
    ok = random_sequence(rng, profile="nuscenes")
    ok.validate()
    bad = random_sequence(rng, T=21)
    bad.profile, bad.fps = "nuscenes", 1.0
    with pytest.raises(ValidationError):
        bad.validate()


def test_normalize_sensors_examples():
    rng = np.random.default_rng(5)
    seqs = [random_sequence(rng, T=10, width=3) for _ in range(5)]
    for s in seqs:
        s.sensors[:, 1] = 2.0
    norm = normalize_sensors(seqs)
    assert norm.std[1] == pytest.approx(1e-6)
    assert np.allclose(norm.transform(seqs[0].sensors)[:, 1], 0.0)

    z = rng.standard_normal((5000, 3)) * [1, 1, 1]
    z[:, 0] = np.abs(z[:, 0])
    z[:, 2] = np.abs(z[:, 2])
    big = DriveSequence("z", np.ones((5000, 2)), z, [0.0, 1.0])
    n2 = normalize_sensors([big])
    out = n2.transform(z)
    assert np.allclose(out.mean(axis=0), 0.0, atol=1e-9) and np.allclose(out.std(axis=0), 1.0, atol=1e-9)


def test_normalizer_ignores_test_data():
    rng = np.random.default_rng(6)
    train = [random_sequence(rng, T=8, width=2) for _ in range(4)]
    test = [random_sequence(rng, T=8, width=2) for _ in range(2)]
    before = normalize_sensors(train)
    for s in test:
        s.sensors *= 100.0
    after = normalize_sensors(train)
    assert np.array_equal(before.mean, after.mean) and np.array_equal(before.std, after.std)


def test_synthetic_noiseless_targets_recoverable():
    data = generate_synthetic(SyntheticSpec(n_sequences=20, noise_std=0.0, seed=1))
    for seq, mix in zip(data.sequences, data.mixtures):
        assert np.allclose(apply_rule(data.rule, mix[-1]), seq.targets, atol=1e-12)


def test_synthetic_same_seed_same_bytes(tmp_path):
    spec = SyntheticSpec(n_sequences=6, seed=9)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert [encode_sequence(s) for s in a.sequences] == [encode_sequence(s) for s in b.sequences]
    assert a.rule == b.rule


def test_synthetic_pure_frame_peaks_at_its_concept():
    data = generate_synthetic(SyntheticSpec(n_sequences=1, seed=2))
    cs = data.concept_set
    for j in range(cs.k):
        assert int(np.argmax(concept_scores(cs.embeddings[j : j + 1] * 2.5, cs).scores)) == j


def test_synthetic_spec_errors():
    for bad in (
        SyntheticSpec(n_concepts=3),
        SyntheticSpec(width=3),
        SyntheticSpec(n_informative=24),
        SyntheticSpec(noise_std=-1),
        SyntheticSpec(profile="comma"),
        SyntheticSpec(final_change=2.0),
    ):
        with pytest.raises(ParameterError):
            generate_synthetic(bad)


def test_synthetic_close_concept_correlates_with_distance():
    data = generate_synthetic(SyntheticSpec(n_sequences=50, frames=20, noise_std=0.05, seed=3))
    scores, dist = [], []
    for seq, reading in zip(data.sequences, data.readings):
        s = concept_scores(seq.frame_embeddings, data.concept_set).scores
        scores.append(s[:, CLOSE])
        dist.append(reading[:, 2])
    r = np.corrcoef(np.concatenate(scores), np.concatenate(dist))[0, 1]
    assert len(np.concatenate(scores)) == 1000
    assert r < -0.8


def test_synthetic_sensor_rows_lag_one_frame():
    data = generate_synthetic(SyntheticSpec(n_sequences=3, seed=4))
    for seq, reading in zip(data.sequences, data.readings):
        assert np.array_equal(seq.sensors[1:], reading[:-1])
        assert np.array_equal(seq.targets, reading[-1, [1, 2]])


def test_final_change_switches_last_frame():
    data = generate_synthetic(SyntheticSpec(n_sequences=10, seed=5, final_change=1.0))
    assert all(not np.array_equal(m[-1], m[-2]) for m in data.mixtures)
    held = generate_synthetic(SyntheticSpec(n_sequences=10, seed=5))
    assert all(np.array_equal(m[-1], m[-3]) for m in held.mixtures)


def test_manifest_round_trip_and_width_check(tmp_path):
    data = generate_synthetic(SyntheticSpec(n_sequences=4, seed=6))
    path = write_dataset(tmp_path / "ds", data.sequences, data.concept_set, extra={"rule": data.rule})
    manifest = json.loads(path.read_text())
    assert list(manifest) == sorted(manifest)
    assert manifest["units"] == {"angle": "deg", "distance": "m", "speed": "m/s"}
    ds = load_manifest(path)
    assert len(ds.sequences) == 4 and ds.concept_set.texts == data.concept_set.texts
    assert all(same(a, b) for a, b in zip(data.sequences, ds.sequences))

    manifest["embedding_dim"] = 65
    path.write_text(json.dumps(manifest))
    with pytest.raises(ValidationError, match="width"):
        load_manifest(path)


def test_manifest_rejects_mismatched_sequence(tmp_path):
    data = generate_synthetic(SyntheticSpec(n_sequences=2, seed=7))
    path = write_dataset(tmp_path / "ds", data.sequences, data.concept_set)
    odd = data.sequences[0]
    odd = DriveSequence(odd.id, odd.frame_embeddings[:, :10], odd.sensors, odd.targets, odd.fps)
    write_sequence(odd, tmp_path / "ds" / "sequences" / f"{odd.id}.cgsq")
    with pytest.raises(ValidationError):
        load_manifest(path)


def test_missing_manifest_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "nothing.json")


@settings(max_examples=30)
@given(st.integers(2, 12), st.integers(1, 6), st.booleans())
def test_round_trip_property(T, width, described):
    rng = np.random.default_rng(T * 31 + width)
    seq = random_sequence(rng, T=T, width=width, described=described)
    assert same(seq, decode_sequence(encode_sequence(seq)))
