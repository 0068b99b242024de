import xml.etree.ElementTree as ET

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_scene
from gridref.errors import ConfigurationError
from gridref.world import (
    Overlay,
    WorldConfig,
    build_dataset,
    canonical_expressions,
    generate_scene,
    load_dataset,
    oracle_scores,
    positional_words_for,
    render_scene,
    resolves_uniquely,
    sample_negative_region,
    save_dataset,
)


class TestGenerateScene:
    def test_two_objects_distinct_cells(self):
        cfg = WorldConfig(min_objects=2, max_objects=2)
        scene = generate_scene(cfg, 7)
        assert len(scene.objects) == 2
        assert scene.objects[0].cell != scene.objects[1].cell

    def test_deterministic_in_config_and_seed(self):
        cfg = WorldConfig(same_category_distractors=1)
        assert generate_scene(cfg, 7).to_json() == generate_scene(cfg, 7).to_json()

    def test_hard_config_shares_a_category(self):
        cfg = WorldConfig(same_category_distractors=1, min_objects=3, max_objects=6)
        scene = generate_scene(cfg, 3)
        cats = [o.category for o in scene.objects]
        assert any(cats.count(c) >= 2 for c in set(cats))
        assert scene.hard

    def test_infeasible_config_rejected(self):
        with pytest.raises(ConfigurationError):
            generate_scene(WorldConfig(grid_rows=2, grid_cols=2, min_objects=5, max_objects=5), 0)
        with pytest.raises(ConfigurationError):
            generate_scene(WorldConfig(min_objects=13, max_objects=13, grid_rows=4, grid_cols=4), 0)

    @given(st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_invariants_hold_across_seeds(self, seed):
        cfg = WorldConfig(same_category_distractors=1, min_objects=3, max_objects=8)
        scene = generate_scene(cfg, seed)
        cells = [o.cell for o in scene.objects]
        assert len(set(cells)) == len(cells)
        assert [o.object_id for o in scene.objects] == list(range(len(scene.objects)))
        for o in scene.objects:
            assert 0 <= o.bbox.x_min < o.bbox.x_max <= scene.width
            assert 0 <= o.bbox.y_min < o.bbox.y_max <= scene.height
        assert scene.to_json() == generate_scene(cfg, seed).to_json()


class TestCanonicalExpressions:
    def test_color_distinguishes(self):
        scene = make_scene(
            [("ball", "red", "medium", (0, 0)), ("ball", "blue", "medium", (0, 3))]
        )
        exprs = canonical_expressions(scene, 0)
        assert ("red", "ball") in exprs

    def test_single_object_uses_bare_category(self):
        scene = make_scene([("ball", "red", "medium", (1, 1))])
        assert ("ball",) in canonical_expressions(scene, 0)

    def test_identical_twins_need_positional_token(self):
        scene = make_scene(
            [("ball", "red", "medium", (0, 0)), ("ball", "red", "medium", (0, 3))]
        )
        exprs = canonical_expressions(scene, 0)
        assert exprs
        assert all(any(t in ("left", "right", "top", "bottom", "middle") for t in e) for e in exprs)

    def test_minimality_removing_any_optional_token_breaks_resolution(self):
        cfg = WorldConfig(same_category_distractors=1, min_objects=3, max_objects=7)
        for seed in range(12):
            scene = generate_scene(cfg, seed)
            for t in range(len(scene.objects)):
                for expr in canonical_expressions(scene, t):
                    assert resolves_uniquely(scene, expr, t)
                    category = scene.objects[t].category
                    for drop in range(len(expr)):
                        if expr[drop] == category:
                            continue
                        reduced = expr[:drop] + expr[drop + 1 :]
                        assert not resolves_uniquely(scene, reduced, t)

    def test_bad_target_rejected(self):
        scene = make_scene([("ball", "red", "medium", (0, 0))])
        with pytest.raises(ValueError):
            canonical_expressions(scene, 5)


class TestOracleScoring:
    def test_match_minus_contradiction(self):
        scene = make_scene(
            [("ball", "red", "medium", (0, 0)), ("ball", "blue", "medium", (0, 3))]
        )
        scores, known = oracle_scores(scene, ("red", "ball"))
        assert scores == [2, 0]
        assert known == 2

    def test_unknown_tokens_ignored(self):
        scene = make_scene([("ball", "red", "medium", (0, 0))])
        scores, known = oracle_scores(scene, ("caption", "zzz", "ball"))
        assert scores == [1]
        assert known == 1

    def test_positional_words_median_split(self):
        scene = make_scene(
            [
                ("ball", "red", "medium", (1, 0)),
                ("box", "blue", "medium", (1, 1)),
                ("cup", "green", "medium", (1, 2)),
            ]
        )
        assert positional_words_for(scene, scene.objects[0]) == ("left",)
        assert positional_words_for(scene, scene.objects[1]) == ("middle",)
        assert positional_words_for(scene, scene.objects[2]) == ("right",)


class TestSampleNegativeRegion:
    def test_only_candidate(self):
        scene = make_scene(
            [("ball", "red", "medium", (0, 0)), ("ball", "red", "small", (0, 3))]
        )
        assert sample_negative_region(scene, 0, seed=11) == 1

    def test_no_candidate_returns_none(self):
        scene = make_scene(
            [("cup", "red", "medium", (0, 0)), ("ball", "red", "small", (0, 3))]
        )
        assert sample_negative_region(scene, 0, seed=11) is None

    def test_deterministic_in_seed(self):
        scene = make_scene(
            [
                ("ball", "red", "medium", (0, 0)),
                ("ball", "blue", "small", (0, 3)),
                ("ball", "green", "large", (3, 3)),
            ]
        )
        picks = {sample_negative_region(scene, 0, seed=5) for _ in range(4)}
        assert len(picks) == 1
        assert picks.pop() in (1, 2)


class TestRenderScene:
    def test_object_element_count(self):
        scene = make_scene(
            [
                ("ball", "red", "medium", (0, 0)),
                ("box", "blue", "small", (1, 1)),
                ("cup", "green", "large", (2, 2)),
            ]
        )
        root = ET.fromstring(render_scene(scene))
        tagged = [e for e in root.iter() if e.get("data-object-id") is not None]
        assert len(tagged) == 3
        assert sorted(e.get("data-object-id") for e in tagged) == ["0", "1", "2"]

    def test_geometry_matches_bbox(self):
        scene = make_scene([("box", "blue", "medium", (1, 2))])
        b = scene.objects[0].bbox
        root = ET.fromstring(render_scene(scene))
        ns = "{http://www.w3.org/2000/svg}"
        rect = root.find(f".//{ns}g[@data-object-id='0']/{ns}rect")
        assert rect is not None
        assert float(rect.get("x")) == pytest.approx(b.x_min, abs=0.5)
        assert float(rect.get("y")) == pytest.approx(b.y_min, abs=0.5)
        assert float(rect.get("width")) == pytest.approx(b.x_max - b.x_min, abs=0.5)
        assert float(rect.get("height")) == pytest.approx(b.y_max - b.y_min, abs=0.5)

    def test_ball_circle_matches_bbox(self):
        scene = make_scene([("ball", "red", "large", (0, 0))])
        b = scene.objects[0].bbox
        root = ET.fromstring(render_scene(scene))
        ns = "{http://www.w3.org/2000/svg}"
        circle = root.find(f".//{ns}g[@data-object-id='0']/{ns}circle")
        cx, cy, r = (float(circle.get(k)) for k in ("cx", "cy", "r"))
        assert cx - r == pytest.approx(b.x_min, abs=0.5)
        assert cy + r == pytest.approx(b.y_max, abs=0.5)

    def test_no_overlays_unless_requested(self):
        scene = make_scene([("ball", "red", "medium", (0, 0))])

        def overlay_elements(svg):
            return [e for e in ET.fromstring(svg).iter() if "overlay" in (e.get("class") or "")]

        assert overlay_elements(render_scene(scene, overlays=())) == []
        decorated = render_scene(scene, overlays=[Overlay(scene.objects[0].bbox, "target", "target")])
        assert len(overlay_elements(decorated)) == 2  # outline + label


class TestDataset:
    def test_split_hygiene_and_uniqueness(self):
        cfg = WorldConfig(same_category_distractors=1, min_objects=3, max_objects=6)
        ds = build_dataset(cfg, num_scenes=30, seed=13, targets_per_scene=2)
        by_split = {s: {x.scene_id for x in ds.split_samples(s)} for s in ("train", "val", "test")}
        assert by_split["train"] & by_split["val"] == set()
        assert by_split["train"] & by_split["test"] == set()
        assert by_split["val"] & by_split["test"] == set()
        for sample in ds.samples:
            scene = ds.scene_for(sample)
            assert sample.target_index < len(scene.objects)
            assert sample.expressions
            for expr in sample.expressions:
                assert resolves_uniquely(scene, expr, sample.target_index)

    def test_roundtrip(self, tmp_path):
        cfg = WorldConfig(min_objects=2, max_objects=4)
        ds = build_dataset(cfg, num_scenes=8, seed=3, targets_per_scene=1)
        save_dataset(ds, tmp_path)
        loaded = load_dataset(tmp_path)
        assert loaded.config == ds.config
        assert loaded.samples == ds.samples
        assert set(loaded.scenes) == set(ds.scenes)
        assert all(loaded.scenes[k] == ds.scenes[k] for k in ds.scenes)

    def test_deterministic_build(self, tmp_path):
        cfg = WorldConfig(min_objects=2, max_objects=4)
        a = build_dataset(cfg, num_scenes=6, seed=21, targets_per_scene=1)
        b = build_dataset(cfg, num_scenes=6, seed=21, targets_per_scene=1)
        assert [s.to_json() for s in a.samples] == [s.to_json() for s in b.samples]
