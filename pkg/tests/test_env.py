import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from obai.env import (DatasetConfig, EnvConfig, EnvState, ObjectSpec, generate_dataset, load_dataset,
                      make_rng, object_action_from_field, read_record, render, sample_action_field,
                      sample_scene, simulate_video, step)


def square(pos, size=10.0, vel=(0.0, 0.0), rank=0, color=(1.0, 0.0, 0.0)):
    return ObjectSpec("square", size, color, np.array(pos, float), np.array(vel, float), rank)


def test_sample_scene_deterministic():
    a = sample_scene(make_rng(5, 0), 3)
    b = sample_scene(make_rng(5, 0), 3)
    assert len(a.objects) == 3
    for oa, ob in zip(a.objects, b.objects):
        assert oa.shape == ob.shape and oa.size == ob.size and oa.color == ob.color
        np.testing.assert_array_equal(oa.position, ob.position)
        np.testing.assert_array_equal(oa.velocity, ob.velocity)
    assert sorted(o.depth_rank for o in a.objects) == [0, 1, 2]
    assert all(12 <= o.size <= 25 for o in a.objects)
    assert all(c in (0, 0.25, 0.5, 0.75, 1.0) for o in a.objects for c in o.color)


def test_single_object_depth():
    s = sample_scene(make_rng(1, 2), 1)
    assert [o.depth_rank for o in s.objects] == [0]


def test_tiny_frame_rejected():
    with pytest.raises(ValueError):
        EnvConfig(frame_size=(4, 4))


def test_velocity_moments():
    rng = make_rng(11)
    v = np.array([o.velocity for _ in range(10_000) for o in sample_scene(rng, 1).objects])
    assert np.all(np.abs(v.mean(0)) < 3 * 4 / 100)
    assert np.all(np.abs(v.std(0) - 4) < 0.05 * 4)


def test_invalid_object():
    with pytest.raises(ValueError):
        square((0, 0), size=-1)
    with pytest.raises(ValueError):
        ObjectSpec("square", 3, (1.5, 0, 0), np.zeros(2), np.zeros(2), 0)
    with pytest.raises(ValueError):
        EnvState([square((1, 1), rank=1)], 0.5, (16, 16))


def test_render_empty():
    frame, mask = render(EnvState([], 0.3, (16, 16)))
    assert np.all(frame == np.float32(0.3))
    assert np.all(mask == 0)


@pytest.mark.parametrize("size", [4, 6, 10])
def test_square_integer_area(size):
    frame, mask = render(EnvState([square((16, 16), size)], 0.5, (32, 32)))
    assert (mask == 1).sum() == size * size


def test_occlusion_nearest_wins():
    near = square((10, 10), 8, rank=0, color=(0, 0, 1.0))
    far = square((12, 12), 8, rank=1, color=(1.0, 0, 0))
    frame, mask = render(EnvState([far, near], 0.5, (24, 24)))
    # far is listed first but near (object index 2) has rank 0
    assert mask[11, 11] == 2
    np.testing.assert_array_equal(frame[11, 11], [0, 0, 1])
    assert mask[15, 15] == 1


def test_mask_partition_counts():
    s = sample_scene(make_rng(3, 3), 3)
    _, mask = render(s)
    counts = [(mask == k).sum() for k in range(4)]
    assert sum(counts) == 64 * 64


def test_action_field_counts():
    objs = [square((8, 8), 6, rank=0), square((24, 8), 6, rank=1), square((16, 24), 6, rank=2)]
    s = EnvState(objs, 0.5, (32, 32))
    _, mask = render(s)
    field = sample_action_field(s, mask, make_rng(0))
    assert (np.abs(field).sum(-1) > 0).sum() == 4


def test_action_field_full_occlusion():
    big = square((16, 16), 14, rank=0)
    hidden = square((16, 16), 4, rank=1)
    other = square((4, 4), 4, rank=2)
    s = EnvState([big, hidden, other], 0.5, (32, 32))
    _, mask = render(s)
    info = {}
    field = sample_action_field(s, mask, make_rng(0), info=info)
    assert (np.abs(field).sum(-1) > 0).sum() == 3
    assert info["unreachable"] == [1]


def test_action_field_moments():
    s = EnvState([square((8, 8), 6)], 0.5, (16, 16))
    _, mask = render(s)
    rng = make_rng(42)
    vals = np.concatenate([sample_action_field(s, mask, rng)[mask >= 0].reshape(-1, 2)
                           for _ in range(5000)])
    vals = vals[np.abs(vals).sum(-1) > 0]
    assert len(vals) == 10_000
    assert np.all(np.abs(vals.mean(0)) < 3 * 4 / 100)
    assert np.all(np.abs(vals.std(0) - 4) < 0.05 * 4)


def test_object_action_sums():
    mask = np.zeros((4, 4), int)
    mask[:2, :2] = 1
    field = np.zeros((4, 4, 2))
    np.testing.assert_array_equal(object_action_from_field(field, mask, 0), [0, 0])
    field[0, 0] = (2, -1)
    np.testing.assert_array_equal(object_action_from_field(field, mask, 0), [2, -1])
    field[0, 0] = (1, 1)
    field[1, 1] = (0.5, -0.25)
    field[3, 3] = (9, 9)  # background, ignored
    np.testing.assert_array_equal(object_action_from_field(field, mask, 0), [1.5, 0.75])


def test_step_cases():
    s = EnvState([square((10, 10), vel=(1, 0))], 0.5, (32, 32))
    _, mask = render(s)
    n = step(s, np.zeros((32, 32, 2)), mask)
    np.testing.assert_array_equal(n.objects[0].position, [11, 10])
    np.testing.assert_array_equal(n.objects[0].velocity, [1, 0])

    s = EnvState([square((10, 10))], 0.5, (32, 32))
    _, mask = render(s)
    field = np.zeros((32, 32, 2))
    field[10, 10] = (2, -1)
    n = step(s, field, mask)
    np.testing.assert_array_equal(n.objects[0].velocity, [2, -1])
    np.testing.assert_array_equal(n.objects[0].position, [12, 9])


def test_two_step_unroll():
    p0, v0, a = np.array([10.0, 12.0]), np.array([0.5, -1.0]), np.array([1.5, 2.0])
    s = EnvState([square(p0, vel=v0)], 0.5, (32, 32))
    _, mask = render(s)
    field = np.zeros((32, 32, 2))
    field[12, 10] = a
    s1 = step(s, field, mask)
    _, m1 = render(s1)
    s2 = step(s1, np.zeros_like(field), m1)
    np.testing.assert_allclose(s2.objects[0].position, p0 + 2 * v0 + 2 * a)


def test_background_action_changes_nothing():
    s = EnvState([square((10, 10), vel=(1, 1))], 0.5, (32, 32))
    _, mask = render(s)
    field = np.zeros((32, 32, 2))
    field[30, 30] = (5, 5)
    n = step(s, field, mask)
    np.testing.assert_array_equal(n.objects[0].velocity, [1, 1])


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_zero_field_linear_motion(seed):
    s = sample_scene(make_rng(seed), 3)
    p0 = [o.position.copy() for o in s.objects]
    v0 = [o.velocity.copy() for o in s.objects]
    for _ in range(10):
        s = step(s, None, None)
    for o, p, v in zip(s.objects, p0, v0):
        np.testing.assert_allclose(o.position, p + 10 * v, atol=1e-5)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_mask_consistency(seed):
    from obai.env import object_masks
    s = sample_scene(make_rng(seed), 3, (24, 24), EnvConfig.scaled(24))
    _, mask = render(s)
    cover = object_masks(s)
    for k in range(3):
        assert np.all(cover[k][mask == k + 1])
        # no nearer object covers a pixel labelled k
        for j, o in enumerate(s.objects):
            if o.depth_rank < s.objects[k].depth_rank:
                assert not np.any(cover[j][mask == k + 1])


def test_dataset_structure_and_determinism(tmp_path):
    cfg = DatasetConfig(n_videos=10, n_frames=4, seed=7, env=EnvConfig())
    manifest = generate_dataset(cfg, tmp_path / "a")
    generate_dataset(cfg, tmp_path / "b")
    assert len(manifest["videos"]) == 10
    for e in manifest["videos"]:
        blob_a = (tmp_path / "a" / e["file"]).read_bytes()
        assert blob_a == (tmp_path / "b" / e["file"]).read_bytes()
        assert blob_a[:5] == b"ADSP1"
        rec = read_record(tmp_path / "a" / e["file"])
        nonzero = [np.any(rec.action_fields[t] != 0) for t in range(4)]
        assert nonzero == [False, True, False, False]
        assert rec.frames.shape == (4, 64, 64, 3)
        assert rec.true_masks.dtype == np.int32
    m = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert m["config"]["seed"] == 7 and m["sampling"]["size_range"] == [12.0, 25.0]


def test_static_dataset(tmp_path):
    generate_dataset(DatasetConfig(n_videos=3, n_frames=1, seed=1), tmp_path)
    recs = load_dataset(tmp_path)
    assert all(r.n_frames == 1 and not np.any(r.action_fields) for r in recs)


def test_record_roundtrip(tmp_path):
    from obai.env import array_to_state, write_record
    rec = simulate_video(make_rng(9), EnvConfig.scaled(32, 2), 3)
    write_record(tmp_path / "r.adsp", rec)
    back = read_record(tmp_path / "r.adsp")
    np.testing.assert_array_equal(back.frames, rec.frames)
    np.testing.assert_array_equal(back.true_masks, rec.true_masks)
    np.testing.assert_array_equal(back.action_fields, rec.action_fields)
    st0 = array_to_state(back.true_states[0], (32, 32))
    assert len(st0.objects) == 2


def test_record_frames_match_states():
    rec = simulate_video(make_rng(4), EnvConfig.scaled(32, 2), 4)
    for t in range(4):
        # the designated frame's field acts on that frame's visible pixels
        if t != 1:
            assert not np.any(rec.action_fields[t])
    assert np.any(rec.action_fields[1])


def test_bad_record(tmp_path):
    p = tmp_path / "bad.adsp"
    p.write_bytes(b"nope")
    with pytest.raises(ValueError):
        read_record(p)
    with pytest.raises(OSError, match="missing.adsp"):
        read_record(tmp_path / "missing.adsp")
