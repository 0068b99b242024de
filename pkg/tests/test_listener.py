import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_scene
from gridref.errors import FrozenModelError
from gridref.listener import (
    LearnedListener,
    ListenerTrainConfig,
    OracleListener,
    fit_listener,
    grounding_accuracy,
    load_listener,
    save_listener,
    train_learned_listener,
)
from gridref.vocab import Vocabulary
from gridref.world import WorldConfig, build_dataset, canonical_expressions, generate_scene


class TestOracleListener:
    def test_color_resolves(self):
        scene = make_scene(
            [("ball", "red", "medium", (0, 0)), ("ball", "blue", "medium", (0, 3))]
        )
        verdict = OracleListener().locate(scene, ("red", "ball"))
        assert verdict.predicted_index == 0
        assert verdict.predicted_bbox == scene.objects[0].bbox
        assert not verdict.uninformative

    def test_tie_breaks_to_lowest_index(self):
        scene = make_scene(
            [("ball", "red", "medium", (0, 0)), ("ball", "red", "medium", (0, 3))]
        )
        assert OracleListener().locate(scene, ("red", "ball")).predicted_index == 0

    def test_cross_matched_attributes_tie_to_lowest_index(self):
        # "blue ball" on {red ball, blue box}: each object matches one token
        # and contradicts the other, so both score 0 and index 0 wins
        scene = make_scene(
            [("ball", "red", "medium", (0, 0)), ("box", "blue", "medium", (0, 3))]
        )
        verdict = OracleListener().locate(scene, ("blue", "ball"))
        assert verdict.scores == (0.0, 0.0)
        assert verdict.predicted_index == 0

    def test_uninformative_expression_flagged(self):
        scene = make_scene(
            [("ball", "red", "medium", (0, 0)), ("box", "blue", "medium", (0, 3))]
        )
        verdict = OracleListener().locate(scene, ("caption", "it."))
        assert verdict.uninformative
        assert verdict.predicted_index == 0

    def test_canonical_expressions_ground_their_targets(self):
        cfg = WorldConfig(same_category_distractors=1, min_objects=3, max_objects=7)
        listener = OracleListener()
        for seed in range(10):
            scene = generate_scene(cfg, seed)
            for t in range(len(scene.objects)):
                for expr in canonical_expressions(scene, t):
                    assert listener.locate(scene, expr).predicted_index == t

    @given(st.lists(st.sampled_from(["red", "blue", "ball", "box", "left", "top", "junk"]), max_size=6))
    @settings(max_examples=60, deadline=None)
    def test_predicted_bbox_always_a_scene_box(self, tokens):
        scene = make_scene(
            [
                ("ball", "red", "medium", (0, 0)),
                ("box", "blue", "small", (1, 2)),
                ("cup", "green", "large", (3, 1)),
            ]
        )
        verdict = OracleListener().locate(scene, tuple(tokens))
        assert verdict.predicted_bbox in [o.bbox for o in scene.objects]
        assert verdict.predicted_index == verdict.scores.index(max(verdict.scores))


@pytest.fixture(scope="module")
def trained_listener():
    cfg = WorldConfig(same_category_distractors=1, min_objects=3, max_objects=6)
    dataset = build_dataset(cfg, num_scenes=300, seed=11, targets_per_scene=2)
    listener, report = train_learned_listener(
        dataset, ListenerTrainConfig(epochs=12, learning_rate=5e-3), seed=0
    )
    return dataset, listener, report


class TestLearnedListener:
    def test_val_grounding_accuracy(self, trained_listener):
        _, _, report = trained_listener
        assert report["val_accuracy"] >= 0.9

    def test_locate_deterministic_when_frozen(self, trained_listener):
        dataset, listener, _ = trained_listener
        sample = dataset.split_samples("val")[0]
        scene = dataset.scene_for(sample)
        first = listener.locate(scene, sample.expressions[0])
        second = listener.locate(scene, sample.expressions[0])
        assert first == second

    def test_frozen_listener_rejects_updates(self, trained_listener):
        dataset, listener, _ = trained_listener
        assert listener.frozen
        rows = [(dataset.scene_for(s), s.target_index, s.expressions[0]) for s in dataset.samples[:4]]
        with pytest.raises(FrozenModelError):
            fit_listener(listener, rows, ListenerTrainConfig(epochs=1), seed=0)

    def test_checkpoint_roundtrip_keeps_verdicts_and_freeze(self, trained_listener, tmp_path):
        dataset, listener, _ = trained_listener
        path = tmp_path / "listener.pt"
        save_listener(listener, path)
        loaded = load_listener(path, expect_vocab=Vocabulary.for_world(dataset.config))
        assert loaded.frozen
        sample = dataset.split_samples("val")[0]
        scene = dataset.scene_for(sample)
        assert loaded.locate(scene, sample.expressions[0]) == listener.locate(scene, sample.expressions[0])
        with pytest.raises(FrozenModelError):
            fit_listener(loaded, [(scene, 0, ("ball",))], ListenerTrainConfig(epochs=1), seed=0)

    def test_empty_dataset_rejected(self):
        cfg = WorldConfig(min_objects=2, max_objects=3)
        dataset = build_dataset(cfg, num_scenes=4, seed=1, targets_per_scene=1)
        dataset.samples = [s for s in dataset.samples if s.split != "train"]
        with pytest.raises(ValueError):
            train_learned_listener(dataset, ListenerTrainConfig(epochs=1), seed=0)

    def test_oracle_is_reference_for_learned(self, trained_listener):
        dataset, listener, _ = trained_listener
        assert grounding_accuracy(OracleListener(), dataset, "val") == 1.0
