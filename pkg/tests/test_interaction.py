import pytest

from gridref.interaction import (
    RoundTrace,
    evaluate_split,
    initial_expression,
    interactive_infer,
    refine_expression,
)
from gridref.listener import ListenerVerdict, OracleListener
from gridref.metrics import iou, rec_accuracy
from gridref.speaker import Speaker, SpeakerDims, build_reg_prompt, region_features
from gridref.vocab import Vocabulary
from gridref.world import WorldConfig, build_dataset

DIMS = SpeakerDims(enc_layers=1, dec_layers=1, hidden=16, heads=2, ffn=32, max_len=8)


class AdversarialListener:
    """Always locates a wrong object (knows each scene's target, test-only)."""

    def __init__(self, target_by_key):
        self.target_by_key = target_by_key
        self.calls = 0

    def locate(self, scene, expression):
        self.calls += 1
        target = self.target_by_key[scene.scene_id]
        wrong = (target + 1) % len(scene.objects)
        return ListenerVerdict(wrong, scene.objects[wrong].bbox, tuple(0.0 for _ in scene.objects))


class AgreeableListener:
    """Always locates the target (test-only)."""

    def __init__(self, target_by_key):
        self.target_by_key = target_by_key

    def locate(self, scene, expression):
        target = self.target_by_key[scene.scene_id]
        return ListenerVerdict(target, scene.objects[target].bbox, tuple(0.0 for _ in scene.objects))


@pytest.fixture(scope="module")
def setup():
    cfg = WorldConfig(same_category_distractors=1, min_objects=3, max_objects=5)
    dataset = build_dataset(cfg, num_scenes=30, seed=17, targets_per_scene=1)
    vocab = Vocabulary.for_world(cfg)
    ireg = Speaker(vocab, DIMS, stage="ireg", init_seed=1)
    reinforced = Speaker(vocab, DIMS, stage="reinforced", init_seed=2)
    ireg.eval()
    reinforced.eval()
    return cfg, dataset, ireg, reinforced


def target_map(dataset):
    return {s.scene_id: s.target_index for s in dataset.samples}


class TestInteractiveInfer:
    def test_immediate_success_returns_round_zero(self, setup):
        _, dataset, ireg, reinforced = setup
        sample = dataset.samples[0]
        scene = dataset.scene_for(sample)
        listener = AgreeableListener(target_map(dataset))
        expr, trace = interactive_infer(ireg, reinforced, listener, scene, sample.target_index, max_round=5)
        assert trace.rounds_used == 1
        assert trace.termination == "located_at_round_0"
        assert expr == trace.entries[0].expression == trace.final_expression
        assert expr == initial_expression(reinforced, scene, sample.target_index)

    def test_adversarial_listener_exhausts_budget(self, setup):
        _, dataset, ireg, reinforced = setup
        sample = dataset.samples[0]
        scene = dataset.scene_for(sample)
        listener = AdversarialListener(target_map(dataset))
        expr, trace = interactive_infer(ireg, reinforced, listener, scene, sample.target_index, max_round=5)
        assert trace.rounds_used == 5
        assert trace.termination == "budget_exhausted"
        assert expr == trace.entries[-1].expression
        assert all(not e.located for e in trace.entries)

    def test_max_round_one_is_single_shot(self, setup):
        _, dataset, ireg, reinforced = setup
        sample = dataset.samples[1]
        scene = dataset.scene_for(sample)
        expr, trace = interactive_infer(
            ireg, reinforced, OracleListener(), scene, sample.target_index, max_round=1
        )
        assert trace.rounds_used == 1
        assert expr == initial_expression(reinforced, scene, sample.target_index)

    def test_invalid_budget_rejected(self, setup):
        _, dataset, ireg, reinforced = setup
        sample = dataset.samples[0]
        with pytest.raises(ValueError):
            interactive_infer(ireg, reinforced, OracleListener(), dataset.scene_for(sample), sample.target_index, max_round=0)

    def test_trace_structure_invariants(self, setup):
        _, dataset, ireg, reinforced = setup
        listener = OracleListener()
        for sample in dataset.samples[:20]:
            scene = dataset.scene_for(sample)
            expr, trace = interactive_infer(ireg, reinforced, listener, scene, sample.target_index, max_round=4)
            assert 1 <= trace.rounds_used <= 4
            located_flags = [e.located for e in trace.entries]
            assert sum(located_flags) <= 1
            if any(located_flags):
                assert located_flags[-1]
                assert trace.termination == f"located_at_round_{len(trace.entries) - 1}"
            else:
                assert trace.termination == "budget_exhausted"
            assert trace.final_expression == trace.entries[-1].expression == expr
            assert [e.round_index for e in trace.entries] == list(range(trace.rounds_used))

    def test_markov_replay_reproduces_trace(self, setup):
        _, dataset, ireg, reinforced = setup
        listener = OracleListener()
        for sample in dataset.samples[:12]:
            scene = dataset.scene_for(sample)
            _, trace = interactive_infer(ireg, reinforced, listener, scene, sample.target_index, max_round=4)
            # rebuild every round from only the previous round's expression and prediction
            assert trace.entries[0].expression == initial_expression(reinforced, scene, sample.target_index)
            for prev, cur in zip(trace.entries, trace.entries[1:]):
                replayed = refine_expression(
                    ireg, scene, sample.target_index, prev.expression, prev.predicted_index
                )
                assert replayed == cur.expression
                verdict = listener.locate(scene, cur.expression)
                assert verdict.predicted_index == cur.predicted_index
                assert iou(scene.objects[sample.target_index].bbox, verdict.predicted_bbox) == cur.iou

    def test_deterministic_traces(self, setup):
        _, dataset, ireg, reinforced = setup
        sample = dataset.samples[2]
        scene = dataset.scene_for(sample)
        t1 = interactive_infer(ireg, reinforced, OracleListener(), scene, sample.target_index, max_round=4)[1]
        t2 = interactive_infer(ireg, reinforced, OracleListener(), scene, sample.target_index, max_round=4)[1]
        assert t1.to_json() == t2.to_json()

    def test_trace_roundtrip(self, setup):
        _, dataset, ireg, reinforced = setup
        sample = dataset.samples[0]
        scene = dataset.scene_for(sample)
        _, trace = interactive_infer(ireg, reinforced, OracleListener(), scene, sample.target_index, max_round=3)
        assert RoundTrace.from_json(trace.to_json()).to_json() == trace.to_json()


class TestEvaluateSplit:
    def test_budget_one_equals_single_shot_accuracy(self, setup):
        _, dataset, ireg, reinforced = setup
        listener = OracleListener()
        table, traces = evaluate_split(ireg, reinforced, listener, dataset, "train", max_round=3)
        pairs = []
        for sample in dataset.split_samples("train"):
            scene = dataset.scene_for(sample)
            expr = initial_expression(reinforced, scene, sample.target_index)
            verdict = listener.locate(scene, expr)
            pairs.append((scene.objects[sample.target_index].bbox, verdict.predicted_bbox))
        assert table.accuracy(1) == rec_accuracy(pairs)

    def test_accuracy_nondecreasing_in_budget(self, setup):
        _, dataset, ireg, reinforced = setup
        table, _ = evaluate_split(ireg, reinforced, OracleListener(), dataset, "train", max_round=4)
        for a, b in zip(table.accuracy_by_budget, table.accuracy_by_budget[1:]):
            assert b >= a

    def test_monotone_located_within(self, setup):
        _, dataset, ireg, reinforced = setup
        _, traces = evaluate_split(ireg, reinforced, OracleListener(), dataset, "train", max_round=4)
        for trace in traces:
            for k in range(1, 4):
                if trace.located_within(k):
                    assert trace.located_within(k + 1)

    def test_empty_split_rejected(self, setup):
        cfg, dataset, ireg, reinforced = setup
        empty = type(dataset)(config=dataset.config, scenes=dataset.scenes, samples=[])
        with pytest.raises(ValueError):
            evaluate_split(ireg, reinforced, OracleListener(), empty, "val", max_round=2)
