"""HTTP service tests: scoring, blinded trials, idempotency, logging."""

import dataclasses
import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from refdet.curation import TrialRecord, read_trial_log
from refdet.detector import DetectorConfig, init_detector
from refdet.evalkit import (
    SyntheticSpec,
    default_pipeline,
    make_synthetic_dataset,
    train_pipeline,
)
from refdet.numerics import Tensor2
from refdet.service import create_app
from refdet.store import GENERATED, REAL, Sample, feature_file_bytes

SPEC = SyntheticSpec(
    feature_dim=32,
    n_true_prototypes=16,
    sparsity=4,
    n_patches=8,
    noise_sigma=0.01,
    off_manifold_norm=0.5,
    n_real=40,
    n_fake=40,
)


@pytest.fixture(scope="module")
def trained():
    reals, fakes, _ = make_synthetic_dataset(SPEC, seed=21)
    cfg = default_pipeline(SPEC, seed=0, n_prototypes=16, top_k=4)
    det, _, _ = train_pipeline(reals[:30], fakes[:30], cfg)
    study = reals[30:35] + fakes[30:35]
    return det, study


@pytest.fixture()
def client(trained, tmp_path):
    det, study = trained
    app = create_app(det, study, tmp_path / "trials.jsonl",
                     snapshot_path=tmp_path / "sessions.json")
    c = TestClient(app)
    c.log_path = tmp_path / "trials.jsonl"
    c.snapshot_path = tmp_path / "sessions.json"
    c.study = study
    return c


def new_session(client, seed=0, cohort="lay", participant="p1"):
    r = client.post("/v1/session", json={
        "participant_id": participant, "cohort": cohort, "seed": seed,
    })
    assert r.status_code == 201
    return r.json()["session_id"]


# ---------------------------------------------------------------------------
# /v1/score
# ---------------------------------------------------------------------------


def test_score_feature_bytes(client):
    blob = feature_file_bytes(client.study[0].features)
    r = client.post("/v1/score", content=blob)
    assert r.status_code == 200
    verdict = r.json()
    assert set(verdict) == {
        "y_pred", "is_generated", "s_max", "s_ent", "model_fingerprint",
    }
    assert 0.0 <= verdict["y_pred"] <= 1.0


def test_score_deterministic(client):
    blob = feature_file_bytes(client.study[3].features)
    a = client.post("/v1/score", content=blob).json()
    b = client.post("/v1/score", content=blob).json()
    assert a == b


def test_score_truncated_payload_400(client):
    blob = feature_file_bytes(client.study[0].features)
    assert client.post("/v1/score", content=blob[:-5]).status_code == 400
    assert client.post("/v1/score", content=b"garbage").status_code == 400


def test_score_wrong_width_400(client):
    bad = Tensor2(np.zeros((2, 7), dtype=np.float32))
    r = client.post("/v1/score", content=feature_file_bytes(bad))
    assert r.status_code == 400


def test_score_by_image_id(client):
    image_id = client.study[0].image_id
    r = client.post("/v1/score", json={"image_id": image_id})
    assert r.status_code == 200
    blob = feature_file_bytes(client.study[0].features)
    direct = client.post("/v1/score", content=blob).json()
    assert r.json() == direct


def test_score_unknown_image_id(client):
    assert client.post("/v1/score",
                       json={"image_id": "nope"}).status_code == 404
    assert client.post("/v1/score", json={"wrong": 1}).status_code == 400
    r = client.post("/v1/score", content=b"{not json",
                    headers={"content-type": "application/json"})
    assert r.status_code == 400


def test_score_model_not_loaded_503(trained, tmp_path):
    _, study = trained
    app = create_app(None, study, tmp_path / "t.jsonl")
    c = TestClient(app)
    blob = feature_file_bytes(study[0].features)
    assert c.post("/v1/score", content=blob).status_code == 503


# ---------------------------------------------------------------------------
# Sessions and trials
# ---------------------------------------------------------------------------


def test_session_validation(client):
    r = client.post("/v1/session", json={
        "participant_id": "p", "cohort": "astronaut",
    })
    assert r.status_code == 422
    r = client.post("/v1/session", json={
        "participant_id": "", "cohort": "lay",
    })
    assert r.status_code == 422


def test_trial_plan_serves_each_image_once_then_410(client):
    sid = new_session(client)
    urls = []
    for _ in range(len(client.study)):
        r = client.get("/v1/trial/next", params={"session": sid})
        assert r.status_code == 200
        body = r.json()
        assert set(body) == {"trial_id", "image_url"}
        urls.append(body["image_url"])
    assert len(set(urls)) == len(client.study)
    assert client.get("/v1/trial/next",
                      params={"session": sid}).status_code == 410


def test_same_seed_same_plan(client):
    a, b = new_session(client, seed=7), new_session(client, seed=7)
    for _ in range(3):
        ra = client.get("/v1/trial/next", params={"session": a}).json()
        rb = client.get("/v1/trial/next", params={"session": b}).json()
        assert ra["image_url"] == rb["image_url"]


def test_unknown_session_404(client):
    assert client.get("/v1/trial/next",
                      params={"session": "ghost"}).status_code == 404


def test_blinding_no_labels_in_any_trial_response(client):
    sid = new_session(client)
    bodies = []
    r = client.post("/v1/session", json={
        "participant_id": "p2", "cohort": "cv_expert", "seed": 1,
    })
    bodies.append(r.text)
    for _ in range(len(client.study)):
        r = client.get("/v1/trial/next", params={"session": sid})
        bodies.append(r.text)
    r = client.get("/v1/trial/next", params={"session": sid})  # the 410
    bodies.append(r.text)
    for text in bodies:
        low = text.lower()
        assert "ground_truth" not in low
        assert "label" not in low


def test_answer_appends_stamped_record(client):
    sid = new_session(client)
    trial = client.get("/v1/trial/next", params={"session": sid}).json()
    image_id = trial["image_url"].rsplit("/", 1)[-1]
    r = client.post("/v1/trial/answer", json={
        "trial_id": trial["trial_id"], "chosen": 1, "S": 3, "RT_ms": 640.0,
    })
    assert r.status_code == 204
    log = read_trial_log(client.log_path)
    assert len(log) == 1
    rec = log[0]
    assert rec.image_id == image_id
    truth = next(s.label for s in client.study if s.image_id == image_id)
    assert rec.ground_truth == truth  # stamped server-side
    assert rec.response == 1 and rec.rating == 3 and rec.rt_ms == 640.0
    assert rec.cohort == "lay" and rec.participant_id == "p1"
    assert rec.timestamp > 0


def test_answer_validation_422(client):
    sid = new_session(client)
    trial = client.get("/v1/trial/next", params={"session": sid}).json()
    base = {"trial_id": trial["trial_id"], "chosen": 0, "S": 2, "RT_ms": 100.0}
    assert client.post("/v1/trial/answer",
                       json={**base, "S": 5}).status_code == 422
    assert client.post("/v1/trial/answer",
                       json={**base, "S": 0}).status_code == 422
    assert client.post("/v1/trial/answer",
                       json={**base, "RT_ms": 0.0}).status_code == 422
    assert client.post("/v1/trial/answer",
                       json={**base, "RT_ms": -5.0}).status_code == 422
    assert client.post("/v1/trial/answer",
                       json={**base, "chosen": 2}).status_code == 422
    assert not client.log_path.exists()  # nothing ever reached the log


def test_answer_idempotency_409(client):
    sid = new_session(client)
    trial = client.get("/v1/trial/next", params={"session": sid}).json()
    body = {"trial_id": trial["trial_id"], "chosen": 0, "S": 2, "RT_ms": 100.0}
    assert client.post("/v1/trial/answer", json=body).status_code == 204
    assert client.post("/v1/trial/answer", json=body).status_code == 409
    assert len(read_trial_log(client.log_path)) == 1  # log unchanged


def test_answer_unknown_trial_404(client):
    r = client.post("/v1/trial/answer", json={
        "trial_id": "ghost:0000", "chosen": 0, "S": 1, "RT_ms": 10.0,
    })
    assert r.status_code == 404
    sid = new_session(client)
    r = client.post("/v1/trial/answer", json={
        "trial_id": f"{sid}:0099", "chosen": 0, "S": 1, "RT_ms": 10.0,
    })
    assert r.status_code == 404  # planned but never served


def test_scripted_replay_matches_direct_records(client):
    sid = new_session(client, seed=4, cohort="aigi_expert", participant="p9")
    answers = [(1, 4, 900.0), (0, 1, 150.0), (1, 2, 300.0)]
    expected = []
    for chosen, s, rt in answers:
        trial = client.get("/v1/trial/next", params={"session": sid}).json()
        image_id = trial["image_url"].rsplit("/", 1)[-1]
        assert client.post("/v1/trial/answer", json={
            "trial_id": trial["trial_id"], "chosen": chosen,
            "S": s, "RT_ms": rt,
        }).status_code == 204
        truth = next(x.label for x in client.study if x.image_id == image_id)
        expected.append(TrialRecord(
            image_id=image_id, ground_truth=truth, response=chosen,
            rating=s, rt_ms=rt, trial_id=trial["trial_id"], session_id=sid,
            participant_id="p9", cohort="aigi_expert",
        ))
    got = [dataclasses.replace(t, timestamp=0.0)
           for t in read_trial_log(client.log_path)]
    assert got == expected


def test_snapshot_written(client):
    sid = new_session(client)
    client.get("/v1/trial/next", params={"session": sid})
    snap = json.loads(client.snapshot_path.read_text())
    assert snap[sid]["cursor"] == 1
    assert snap[sid]["cohort"] == "lay"


def test_bearer_token_enforced(trained, tmp_path):
    det, study = trained
    app = create_app(det, study, tmp_path / "t.jsonl", token="hunter2")
    c = TestClient(app)
    blob = feature_file_bytes(study[0].features)
    assert c.post("/v1/score", content=blob).status_code == 401
    r = c.post("/v1/score", content=blob,
               headers={"Authorization": "Bearer hunter2"})
    assert r.status_code == 200
    assert c.post("/v1/score", content=blob,
                  headers={"Authorization": "Bearer wrong"}).status_code == 401


def test_duplicate_study_ids_rejected(trained, tmp_path):
    det, study = trained
    with pytest.raises(Exception):
        create_app(det, study + [study[0]], tmp_path / "t.jsonl")
