import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from idreveal.errors import (
    DataError,
    DimensionError,
    EmptyInputError,
    FormatError,
    IdentityMismatchError,
    TruncationError,
)
from idreveal.features import (
    FEATURE_DIM,
    FeatureFrame,
    FeatureSequence,
    ManifestRecord,
    mean_feature,
    parse_manifest,
    format_manifest,
    parse_sequence,
    read_manifest,
    serialize_sequence,
    write_manifest,
    write_sequence,
)


def header(T, dim=62, fps=25.0, magic=b"IDRF", version=1):
    return struct.pack("<4sIIIf", magic, version, T, dim, fps)


def random_seq(seed, T=None, ident="a", vid="v"):
    rng = np.random.default_rng(seed)
    T = T or int(rng.integers(1, 40))
    frames = rng.normal(0, 3, (T, FEATURE_DIM)).astype(np.float32).astype(np.float64)
    return FeatureSequence(frames, fps=25.0, video_id=vid, identity_id=ident)


def test_frame_layout():
    f = FeatureFrame.from_parts(np.arange(40), np.arange(10) + 100, np.arange(12).reshape(3, 4) + 200)
    assert f.values.shape == (62,)
    assert f.shape[0] == 0 and f.expression[0] == 100
    assert f.pose.shape == (3, 4)
    assert f.pose[1, 0] == 204  # row-major


def test_parse_zero_frame():
    seq = parse_sequence(header(1) + bytes(62 * 4))
    assert len(seq) == 1
    assert np.all(seq.frames == 0)
    assert seq.fps == 25.0


def test_serialize_zero_frame_payload():
    b = serialize_sequence(FeatureSequence(np.zeros((1, 62))))
    assert b == header(1) + bytes(248)


def test_serialize_deterministic():
    s = random_seq(1)
    assert serialize_sequence(s) == serialize_sequence(s)


def test_dimension_error():
    with pytest.raises(DimensionError):
        parse_sequence(header(1, dim=61) + bytes(61 * 4))


@pytest.mark.parametrize("blob", [b"XXXX" + bytes(16), header(1, magic=b"IDRG") + bytes(248),
                                  header(1, version=2) + bytes(248)])
def test_format_errors(blob):
    with pytest.raises(FormatError):
        parse_sequence(blob)


@pytest.mark.parametrize("blob", [header(2) + bytes(62 * 4), header(1)[:10], b""])
def test_truncation(blob):
    with pytest.raises(TruncationError):
        parse_sequence(blob)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_roundtrip_parse_serialize(seed):
    s = random_seq(seed)
    b = serialize_sequence(s)
    back = parse_sequence(b)
    assert np.array_equal(back.frames, s.frames)
    assert serialize_sequence(back) == b


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.data())
def test_roundtrip_bytes(T, data):
    vals = data.draw(st.lists(st.floats(width=32, allow_nan=False, allow_infinity=False),
                              min_size=T * 62, max_size=T * 62))
    b = header(T, fps=30.0) + np.array(vals, dtype="<f4").tobytes()
    assert serialize_sequence(parse_sequence(b)) == b


def test_nonfinite_payload_rejected():
    with pytest.raises(FormatError):
        parse_sequence(header(1) + np.full(62, np.nan, dtype="<f4").tobytes())


def test_mean_of_constant():
    f = np.linspace(-1, 1, 62)
    s = FeatureSequence(np.tile(f, (7, 1)), identity_id="a")
    assert np.allclose(mean_feature([s]).values, f, atol=0, rtol=1e-15)


def test_mean_symmetric():
    v = np.random.default_rng(0).normal(size=62)
    a = FeatureSequence(v[None], identity_id="a", video_id="1")
    b = FeatureSequence(-v[None], identity_id="a", video_id="2")
    assert np.all(mean_feature([a, b]).values == 0)


def test_mean_matches_two_pass_oracle():
    seqs = [random_seq(s, ident="x", vid=str(s)) for s in range(3)]
    total = np.zeros(62)
    count = 0
    for s in seqs:
        for row in s.frames:
            for d in range(62):
                total[d] += row[d]
            count += 1
    assert np.allclose(mean_feature(seqs).values, total / count, atol=1e-12, rtol=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.randoms(use_true_random=False))
def test_mean_permutation_invariant(seed, rnd):
    seqs = [random_seq(seed + i, ident="x", vid=str(i)) for i in range(3)]
    base = mean_feature(seqs).values
    shuffled = list(seqs)
    rnd.shuffle(shuffled)
    perm = []
    for s in shuffled:
        order = list(range(len(s)))
        rnd.shuffle(order)
        perm.append(s.with_frames(s.frames[order]))
    assert np.array_equal(mean_feature(perm).values, base)


def test_mean_of_copies():
    s = random_seq(3)
    assert np.allclose(mean_feature([s] * 4).values, mean_feature([s]).values, atol=1e-14)


def test_mean_errors():
    with pytest.raises(EmptyInputError):
        mean_feature([])
    with pytest.raises(IdentityMismatchError):
        mean_feature([random_seq(0, ident="a"), random_seq(1, ident="b")])


def test_sequence_invariants():
    with pytest.raises(DimensionError):
        FeatureSequence(np.zeros((3, 61)))
    with pytest.raises(EmptyInputError):
        FeatureSequence(np.zeros((0, 62)))
    s = random_seq(0)
    with pytest.raises(ValueError):
        s.frames[0, 0] = 1.0


def test_manifest_roundtrip(tmp_path):
    recs = [ManifestRecord("a/x.idrf", "id1", "v1", "studio"),
            ManifestRecord("a/y.idrf", "id1", "v2", "office"),
            ManifestRecord("b/z.idrf", "id2", "v1", "")]
    text = format_manifest(recs)
    assert text.endswith("\n") and "\r" not in text
    assert text.splitlines()[0] == "a/x.idrf\tid1\tv1\tstudio"
    assert parse_manifest(text).records == tuple(recs)


def test_manifest_duplicate_pair():
    with pytest.raises(DataError):
        parse_manifest("a\tid\tv\tc\nb\tid\tv\tc\n")


def test_manifest_load_relative(tmp_path):
    s = random_seq(5)
    (tmp_path / "d").mkdir()
    write_sequence(tmp_path / "d" / "s.idrf", s)
    write_manifest(tmp_path / "m.tsv", [ManifestRecord("d/s.idrf", "id9", "vid", "car")])
    m = read_manifest(tmp_path / "m.tsv")
    loaded = m.load(m.records[0])
    assert loaded.identity_id == "id9" and loaded.context == "car"
    assert np.array_equal(loaded.frames, s.frames)
