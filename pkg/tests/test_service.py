import json

import pytest
from fastapi.testclient import TestClient

from gridref.interaction import interactive_infer
from gridref.listener import OracleListener
from gridref.service import ServiceState, create_app
from gridref.speaker import Speaker, SpeakerDims
from gridref.vocab import Vocabulary
from gridref.world import WorldConfig, build_dataset

DIMS = SpeakerDims(enc_layers=1, dec_layers=1, hidden=16, heads=2, ffn=32, max_len=8)


@pytest.fixture(scope="module")
def service():
    cfg = WorldConfig(same_category_distractors=1, min_objects=3, max_objects=5)
    dataset = build_dataset(cfg, num_scenes=40, seed=23, targets_per_scene=2)
    vocab = Vocabulary.for_world(cfg)
    ireg = Speaker(vocab, DIMS, stage="ireg", init_seed=4)
    reinforced = Speaker(vocab, DIMS, stage="reinforced", init_seed=5)
    ireg.eval()
    reinforced.eval()
    state = ServiceState(dataset, ireg, reinforced, OracleListener(), max_round=5, beam_width=5)
    return state, TestClient(create_app(state))


def start_session(client, **kwargs):
    response = client.post("/api/sessions", json=kwargs)
    assert response.status_code == 200, response.text
    return response.json()


class TestSessionProtocol:
    def test_model_listener_replay_matches_offline_traces(self, service):
        state, client = service
        listener = OracleListener()
        for index in range(6):
            sample = state.dataset.split_samples("val")[index % len(state.dataset.split_samples("val"))]
            scene = state.dataset.scene_for(sample)
            _, offline = interactive_infer(
                state.speaker, state.reinforced, listener, scene, sample.target_index, max_round=5
            )
            created = start_session(
                client, split="val", mode="model-listener",
                sample_index=index % len(state.dataset.split_samples("val")), max_round=5,
            )
            assert created["expression"] == " ".join(offline.entries[0].expression)
            prediction = created["listener_prediction"]
            done = False
            while not done:
                reply = client.post(f"/api/sessions/{created['session_id']}/click", json={"object_id": prediction})
                assert reply.status_code == 200, reply.text
                body = reply.json()
                done = body["done"]
                if not done:
                    prediction = body["listener_prediction"]
            server_trace = client.get(f"/api/sessions/{created['session_id']}/trace").json()
            assert json.dumps(server_trace, sort_keys=True) == json.dumps(offline.to_json(), sort_keys=True)

    def test_click_on_target_finishes_at_round_zero(self, service):
        state, client = service
        created = start_session(client, split="val", mode="annotator", sample_index=0)
        target = created["target_object_id"]
        reply = client.post(f"/api/sessions/{created['session_id']}/click", json={"object_id": target}).json()
        assert reply["located"] and reply["done"]
        assert reply["iou"] == 1.0
        assert reply["final_expression"] == created["expression"]

    def test_wrong_click_refines_and_increments_round(self, service):
        state, client = service
        created = start_session(client, split="val", mode="annotator", sample_index=1)
        target = created["target_object_id"]
        scene = state.dataset.scenes[created["scene_id"]]
        wrong = (target + 1) % len(scene.objects)
        reply = client.post(f"/api/sessions/{created['session_id']}/click", json={"object_id": wrong}).json()
        assert not reply["located"] and not reply["done"]
        assert reply["round"] == 1
        assert reply["next_expression"]

    def test_click_after_completion_conflicts(self, service):
        _, client = service
        created = start_session(client, split="val", mode="annotator", sample_index=0)
        target = created["target_object_id"]
        sid = created["session_id"]
        assert client.post(f"/api/sessions/{sid}/click", json={"object_id": target}).status_code == 200
        conflict = client.post(f"/api/sessions/{sid}/click", json={"object_id": target})
        assert conflict.status_code == 409
        assert conflict.json()["detail"]["code"] == "session_complete"

    def test_unknown_session_and_object(self, service):
        _, client = service
        assert client.post("/api/sessions/nope/click", json={"object_id": 0}).status_code == 404
        created = start_session(client, split="val", mode="annotator", sample_index=0)
        bad = client.post(f"/api/sessions/{created['session_id']}/click", json={"object_id": 99})
        assert bad.status_code == 404
        assert bad.json()["detail"]["code"] == "unknown_object"

    def test_human_eval_mode_hides_target(self, service):
        _, client = service
        created = start_session(client, split="val", mode="human-eval", sample_index=0)
        assert created["target_object_id"] is None
        assert created["listener_prediction"] is None
        annotator = start_session(client, split="val", mode="annotator", sample_index=0)
        assert annotator["target_object_id"] is not None

    def test_sessions_are_isolated(self, service):
        state, client = service
        a = start_session(client, split="val", mode="annotator", sample_index=2, max_round=5)
        b = start_session(client, split="val", mode="annotator", sample_index=3, max_round=5)
        scene_a = state.dataset.scenes[a["scene_id"]]
        scene_b = state.dataset.scenes[b["scene_id"]]
        wrong_a = (a["target_object_id"] + 1) % len(scene_a.objects)
        wrong_b = (b["target_object_id"] + 1) % len(scene_b.objects)
        client.post(f"/api/sessions/{a['session_id']}/click", json={"object_id": wrong_a})
        client.post(f"/api/sessions/{b['session_id']}/click", json={"object_id": wrong_b})
        client.post(f"/api/sessions/{a['session_id']}/click", json={"object_id": a["target_object_id"]})
        trace_a = client.get(f"/api/sessions/{a['session_id']}/trace").json()
        trace_b = client.get(f"/api/sessions/{b['session_id']}/trace").json()
        assert trace_a["scene_id"] == a["scene_id"]
        assert trace_b["scene_id"] == b["scene_id"]
        assert len(trace_a["entries"]) == 2
        assert len(trace_b["entries"]) == 1


class TestSummaries:
    def test_human_summary_over_scripted_judgments(self, service):
        state, client = service
        with state._lock:
            state.sessions.clear()
        outcomes = [True, True, False, True]
        for i, correct in enumerate(outcomes):
            created = start_session(
                client, split="val", mode="human-eval", sample_index=i, max_round=2, evaluator_id="eval-1"
            )
            sid = created["session_id"]
            sample = state.dataset.split_samples("val")[i]
            scene = state.dataset.scene_for(sample)
            target = sample.target_index
            if correct:
                client.post(f"/api/sessions/{sid}/click", json={"object_id": target})
            else:
                wrong = (target + 1) % len(scene.objects)
                done = False
                while not done:
                    done = client.post(f"/api/sessions/{sid}/click", json={"object_id": wrong}).json()["done"]
        summary = client.get("/api/eval/human-summary").json()
        assert summary["total"] == 4
        assert summary["correct"] == 3
        assert summary["accuracy"] == 0.75
        assert summary["by_split"]["val"] == 0.75
        assert summary["by_evaluator"]["eval-1"] == 0.75

    def test_session_summary(self, service):
        state, client = service
        created = start_session(client, split="val", mode="annotator", sample_index=0)
        client.post(f"/api/sessions/{created['session_id']}/click", json={"object_id": created["target_object_id"]})
        summary = client.get(f"/api/sessions/{created['session_id']}/summary").json()
        assert summary["done"] and summary["located"]
        assert summary["rounds_used"] == 1


class TestRender:
    def test_render_endpoint_serves_svg(self, service):
        state, client = service
        scene_id = next(iter(state.dataset.scenes))
        response = client.get(f"/api/scenes/{scene_id}/render")
        assert response.status_code == 200
        assert response.headers["content-type"].startswith("image/svg+xml")
        assert "data-object-id" in response.text

    def test_render_highlight_adds_overlay(self, service):
        state, client = service
        scene_id = next(iter(state.dataset.scenes))
        plain = client.get(f"/api/scenes/{scene_id}/render").text
        marked = client.get(f"/api/scenes/{scene_id}/render", params={"highlight": 0}).text
        assert 'class="overlay target"' not in plain
        assert 'class="overlay target"' in marked

    def test_render_unknown_scene_404(self, service):
        _, client = service
        assert client.get("/api/scenes/zzz/render").status_code == 404
