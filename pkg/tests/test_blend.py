import copy

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tests.conftest import small_render, tiny_field
from viewmap.atlas import Atlas, AtlasError, Keyframe
from viewmap.blend import (
    BlendSelection,
    blend_weights,
    render_model_view,
    render_novel_view,
    save_novel_view,
    select_models,
    to_z_depth,
)
from viewmap.config import AtlasConfig
from viewmap.geom import CameraIntrinsics, Pose, look_at
from viewmap.tracksim import generate_trajectory, load_depth, make_scene, raytrace_gt

INTR = CameraIntrinsics.from_fov(12, 12, 60)


def test_weight_examples():
    assert np.allclose(blend_weights([1.0, 2.0], 4), [16 / 17, 1 / 17], atol=1e-15)
    assert np.allclose(blend_weights([3.0]), [1.0])
    w = blend_weights([0.0, 0.5, 1.0])
    assert w[0] == pytest.approx(1.0, abs=1e-12)


@given(st.lists(st.floats(0.0, 50.0), min_size=1, max_size=3), st.floats(1e-3, 1e3))
@settings(max_examples=100, deadline=None)
def test_weights_normalized_and_homogeneous(dists, scale):
    w = blend_weights(dists)
    assert abs(w.sum() - 1) <= 1e-9 and np.all(w >= 0)
    if min(dists) * min(scale, 1.0) > 1e-5:
        assert np.allclose(blend_weights(np.array(dists) * scale), w, atol=1e-12)
    order = np.argsort(dists, kind="stable")
    assert np.all(np.diff(w[order]) <= 1e-15)


def pose_x(x, z=0.0):
    return Pose.from_rotation(np.eye(3), np.array([x, 0.0, z]))


def line_atlas(positions, d_th=0.3, chained=True):
    atlas = Atlas(tiny_field(), small_render(), AtlasConfig(d_th=d_th))
    for k, x in enumerate(positions):
        covis = {k - 1} if k and chained else set()
        atlas.on_keyframe(Keyframe(k, pose_x(x), np.full((12, 12, 3), 0.5), INTR), covis)
    return atlas


def test_empty_atlas_rejected():
    with pytest.raises(AtlasError):
        select_models(Atlas(tiny_field(), small_render()), Pose.identity())


def test_single_model_selection_and_exact_copy():
    atlas = line_atlas([0.0, 0.1, 0.2])
    sel = select_models(atlas, pose_x(5.0))
    assert sel.model_ids == [0] and sel.weights == [1.0]
    view = render_novel_view(atlas, look_at((0.05, 0, 0), (0, 0, 2)), INTR)
    ref = render_model_view(atlas, 0, look_at((0.05, 0, 0), (0, 0, 2)), INTR)
    assert np.array_equal(view.image, ref[0]) and np.array_equal(view.depth, ref[1])


def test_ranking_goes_through_nearest_training_view():
    # one model per keyframe, anchored at 0, 1, 2, 3
    atlas = line_atlas([0.0, 1.0, 2.0, 3.0], chained=False)
    assert len(atlas.models) == 4
    sel = select_models(atlas, pose_x(2.2))
    assert sel.anchor_view == 2
    assert sel.model_ids == [2, 1, 3]  # tie at distance 1 broken by smaller id
    assert sel.nearest_views == [2, 1, 3]
    assert np.allclose(sel.distances, [0.2, 1.2, 0.8])
    assert len(set(sel.model_ids)) == len(sel.model_ids) <= 3
    # with chained covisibility, model 1 also holds keyframe 2 and ties model 2 at rank distance 0
    chained = select_models(line_atlas([0.0, 1.0, 2.0, 3.0]), pose_x(2.2))
    assert chained.model_ids == [1, 2, 0]
    assert chained.nearest_views == [2, 2, 1]


def test_zero_distance_takes_all_weight():
    atlas = line_atlas([0.0, 1.0], chained=False)
    sel = select_models(atlas, pose_x(1.0))
    assert sel.model_ids[0] == 1 and sel.weights[0] == pytest.approx(1.0, abs=1e-12)


def trained_atlas(steps=3):
    scene = make_scene(0)
    atlas = Atlas(tiny_field(), small_render(), AtlasConfig(d_th=0.4, rays_per_batch=256))
    for k, p in enumerate(generate_trajectory("loop", 20)[:5]):
        img, dep = raytrace_gt(scene, p, INTR)
        atlas.on_keyframe(Keyframe(k, p, img, INTR, depth=dep), {k - 1} if k else set())
    for _ in range(steps):
        atlas.train_step(list(range(len(atlas.models))))
    return atlas


def test_cloned_models_blend_to_either_render():
    atlas = trained_atlas()
    src = atlas.models[0]
    clone = copy.deepcopy(src)
    clone.id = len(atlas.models)
    atlas.models.append(clone)
    pose = look_at((0.1, 0.05, 0.0), (0, 0, 3))
    sel = select_models(atlas, pose, top_k=len(atlas.models))
    i, j = sel.model_ids.index(0), sel.model_ids.index(clone.id)
    assert sel.distances[i] == sel.distances[j]
    pair = BlendSelection([0, clone.id], [sel.nearest_views[i]] * 2, [sel.distances[i]] * 2,
                          blend_weights([sel.distances[i]] * 2).tolist())
    view = render_novel_view(atlas, pose, INTR, selection=pair)
    ref = render_model_view(atlas, 0, pose, INTR)
    assert np.array_equal(view.image, ref[0])


@pytest.mark.parametrize("seed", range(3))
def test_blend_within_component_envelope(seed):
    rng = np.random.default_rng(seed)
    atlas = trained_atlas()
    assert len(atlas.models) >= 2
    c = rng.uniform(-1, 1, 3) * [1.0, 0.2, 1.0]
    pose = look_at(c, c + np.array([rng.uniform(-1, 1), 0, 2.0]))
    view = render_novel_view(atlas, pose, INTR)
    imgs = np.stack([v[0] for v in view.layers.values()])
    deps = np.stack([v[1] for v in view.layers.values()])
    tol = 1e-12
    assert np.all(view.image >= imgs.min(0) - tol) and np.all(view.image <= imgs.max(0) + tol)
    assert np.all(view.depth >= deps.min(0) - tol) and np.all(view.depth <= deps.max(0) + tol)
    assert abs(sum(view.selection.weights) - 1) < 1e-9


def test_novel_view_deterministic_and_saved(tmp_path):
    atlas = trained_atlas(1)
    pose = look_at((0.2, 0, 0.1), (0, 0, 3))
    a, b = render_novel_view(atlas, pose, INTR), render_novel_view(atlas, pose, INTR)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.depth, b.depth)
    paths = save_novel_view(a, tmp_path, 7, INTR, debug_layers=True)
    names = sorted(p.name for p in paths)
    assert "frame_0007.png" in names and "frame_0007_depth.png" in names
    assert all(p.exists() for p in paths)
    assert any("_model00" in n for n in names)
    z = load_depth(tmp_path / "frame_0007_depth.png")
    assert np.abs(z - to_z_depth(a.depth, INTR)).max() <= 0.5e-3 + 1e-9
