from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

from idreveal import synthetic as syn
from idreveal.errors import ConfigError, SelfReenactError, SelfSwapError
from idreveal.features import EXPR_SLICE, MOTION_SLICE, POSE_SLICE, SHAPE_SLICE, read_sequence
from idreveal.synthetic import WorldParams


def test_identity_deterministic_and_distinct():
    a, b, c = syn.make_identity(3, 0), syn.make_identity(3, 0), syn.make_identity(3, 1)
    assert np.array_equal(a.shape_vec, b.shape_vec) and np.array_equal(a.freqs, b.freqs)
    assert not np.array_equal(a.shape_vec, c.shape_vec)
    assert not np.array_equal(a.freqs, c.freqs)
    assert a.identity_id == "id0000"


def test_videos_share_shape_up_to_context():
    ident = syn.make_identity(0, 2, WorldParams(shape_jitter=0.0))
    v1 = syn.render_video(ident, "studio", 30, np.random.default_rng(1))
    v2 = syn.render_video(ident, "studio", 30, np.random.default_rng(2))
    v3 = syn.render_video(ident, "car", 30, np.random.default_rng(3))
    assert np.array_equal(v1.frames[:, SHAPE_SLICE], v2.frames[:, SHAPE_SLICE])
    expected = syn.context_shape_offset(ident, "car") - syn.context_shape_offset(ident, "studio")
    assert np.allclose(v3.frames[0, SHAPE_SLICE] - v1.frames[0, SHAPE_SLICE], expected, atol=1e-12)
    assert v3.context == "car" and v3.identity_id == ident.identity_id


def test_noise_free_identical_phase():
    params = WorldParams(noise_range=(0.0, 0.0), tempo_jitter=0.0, shape_jitter=0.0)
    ident = syn.make_identity(0, 1, params)
    a = syn.render_video(ident, "studio", 40, np.random.default_rng(7))
    b = syn.render_video(ident, "studio", 40, np.random.default_rng(7))
    assert np.array_equal(a.frames, b.frames)


def test_dominant_frequency_matches_identity():
    params = WorldParams(noise_range=(0.0, 0.0), tempo_jitter=0.0, coupling_range=(0.0, 0.0))
    ident = syn.make_identity(11, 4, params)
    T = 400
    v = syn.render_video(ident, "studio", T, np.random.default_rng(0))
    for ch in range(10):
        f = syn.dominant_frequency(v.frames[:, EXPR_SLICE][:, ch])
        assert abs(f - ident.freqs[ch]) <= 1.0 / T


def test_face_swap():
    tgt, drv = syn.make_identity(0, 0), syn.make_identity(0, 1)
    drive = syn.render_video(drv, "office", 50, np.random.default_rng(0))
    fake = syn.face_swap(tgt, drive)
    assert np.array_equal(fake.frames[:, SHAPE_SLICE], np.tile(tgt.shape_vec, (50, 1)))
    assert np.array_equal(fake.frames[:, MOTION_SLICE], drive.frames[:, MOTION_SLICE])
    assert fake.identity_id == tgt.identity_id
    again = syn.face_swap(tgt, fake.with_frames(fake.frames, identity_id=drv.identity_id))
    assert np.array_equal(again.frames, fake.frames)
    with pytest.raises(SelfSwapError):
        syn.face_swap(drv, drive)


def test_reenact():
    subj, drv = syn.make_identity(0, 0), syn.make_identity(0, 1)
    video = syn.render_video(subj, "studio", 400, np.random.default_rng(0))
    fake = syn.reenact(video, drv, np.random.default_rng(1))
    assert np.array_equal(fake.frames[:, SHAPE_SLICE], video.frames[:, SHAPE_SLICE])
    assert fake.identity_id == subj.identity_id
    with pytest.raises(SelfReenactError):
        syn.reenact(video, subj, np.random.default_rng(1))


def test_reenact_follows_driver_frequencies():
    params = WorldParams(noise_range=(0.0, 0.0), tempo_jitter=0.0, coupling_range=(0.0, 0.0))
    subj, drv = syn.make_identity(5, 0, params), syn.make_identity(5, 1, params)
    T = 400
    fake = syn.reenact(syn.render_video(subj, "studio", T, np.random.default_rng(0)), drv,
                       np.random.default_rng(1))
    hits = [abs(syn.dominant_frequency(fake.frames[:, EXPR_SLICE][:, c]) - drv.freqs[c]) <= 1 / T
            for c in range(10)]
    assert all(hits)


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    b = syn.build_benchmark(out, n_ids=4, vids_per_id=4, T=30, n_val_ids=2, n_test_ids=3,
                            test_real_per_id=2, test_fake_per_id=4, seed=1)
    return out, b


def test_split_disjointness(bench):
    _, b = bench
    train, val = set(b.train.identities()), set(b.val.identities())
    test = set(b.test.identities()) | set(b.references.identities())
    assert not (train & val) and not (train & test) and not (val & test)
    assert len(b.train) == 16 and len(b.val) == 8


def test_test_contexts_absent_from_references(bench):
    _, b = bench
    from idreveal import identifier
    refs = b.references.by_identity()
    for r in b.test:
        pool = identifier.leave_one_context_out(r, refs[r.identity_id])
        assert pool and all(p.context != r.context for p in pool)


def test_label_counts(bench):
    out, b = bench
    labels = syn.read_labels(out / "test_labels.tsv")
    assert labels == list(b.labels)
    counts = Counter((l.label, l.manipulation) for l in labels)
    assert counts == {("REAL", "none"): 6, ("FAKE", "FaceSwap"): 6, ("FAKE", "Reenactment"): 6}
    assert len(b.test) == 18


def test_files_parse(bench):
    out, b = bench
    for m in (b.train, b.val, b.references, b.test):
        for r in m:
            s = m.load(r)
            assert len(s) == 30 and s.identity_id == r.identity_id


def test_parallel_equals_serial(tmp_path):
    kw = dict(n_ids=4, vids_per_id=2, T=20, n_val_ids=2, n_test_ids=2, test_real_per_id=2,
              test_fake_per_id=2, seed=3)
    syn.build_benchmark(tmp_path / "a", jobs=1, **kw)
    syn.build_benchmark(tmp_path / "b", jobs=2, **kw)
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for f in files_a:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


@pytest.mark.parametrize("kw", [dict(n_ids=3), dict(contexts=("a",)), dict(test_fake_per_id=3),
                                dict(vids_per_id=1), dict(n_test_ids=1)])
def test_infeasible(tmp_path, kw):
    with pytest.raises(ConfigError):
        syn.build_benchmark(tmp_path, **kw)
