"""End-to-end tests of the HTTP surface via the in-process test client."""

import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from tsa.service import create_app


@pytest.fixture()
def client(tmp_path):
    app = create_app(workdir=tmp_path)
    with TestClient(app) as c:
        c.workdir = tmp_path
        yield c


def small_generate(client, name="g.graph", condition="source_imbal", seed=0):
    resp = client.post("/generate", json={
        "condition": condition, "seed": seed, "out": name,
        "overrides": {"num_nodes": 400},
    })
    assert resp.status_code == 200, resp.text
    return resp.json()


def small_pretrain(client, graph="g.graph", out="m.ckpt"):
    resp = client.post("/pretrain", json={
        "graph": graph, "out": out,
        "config": {"epochs": 40, "seed": 0},
    })
    assert resp.status_code == 200, resp.text
    return resp.json()


class TestHealth:
    def test_health(self, client):
        resp = client.get("/health")
        assert resp.status_code == 200
        assert resp.json()["status"] == "ok"


class TestGenerate:
    def test_builtin_condition(self, client):
        body = small_generate(client)
        assert body["num_nodes"] == 400
        assert sum(body["class_counts"]) == 400
        assert (client.workdir / "g.graph").exists()

    def test_manifest_written(self, client):
        small_generate(client)
        manifest = json.loads((client.workdir / "manifest.json").read_text())
        assert manifest[0]["kind"] == "graph"
        assert manifest[0]["config_hash"]

    def test_unknown_condition_422(self, client):
        resp = client.post("/generate", json={"condition": "cond99", "out": "x.graph"})
        assert resp.status_code == 422

    def test_condition_and_spec_both_given(self, client):
        resp = client.post("/generate", json={
            "condition": "cond1", "spec_file": "spec.toml", "out": "x.graph",
        })
        assert resp.status_code == 422

    def test_spec_file_override(self, client):
        (client.workdir / "spec.toml").write_text(
            'condition = "cond2"\nnum_nodes = 300\nfeature_std = 0.5\n'
        )
        resp = client.post("/generate", json={"spec_file": "spec.toml", "out": "s.graph"})
        assert resp.status_code == 200
        assert resp.json()["num_nodes"] == 300


class TestPretrainAdaptEvaluate:
    def test_full_workflow(self, client):
        small_generate(client, "src.graph", "source_imbal", seed=1)
        body = small_pretrain(client, "src.graph", "model.ckpt")
        assert body["test_accuracy"] > 0.7
        small_generate(client, "tgt.graph", "cond1", seed=2)
        resp = client.post("/adapt", json={
            "model": "model.ckpt", "graph": "tgt.graph", "refine": "lame",
            "out": "result.json", "trace": "trace.json",
        })
        assert resp.status_code == 200, resp.text
        adapt_body = resp.json()
        assert adapt_body["accuracy"] is not None
        assert adapt_body["gamma"] is not None
        assert (client.workdir / "result.json").exists()
        trace = json.loads((client.workdir / "trace.json").read_text())
        assert "confident_fraction" in trace

        resp = client.post("/evaluate", json={
            "result": "result.json", "graph": "tgt.graph", "metric": "accuracy",
        })
        assert resp.status_code == 200
        assert resp.json()["value"] == pytest.approx(adapt_body["accuracy"], abs=1e-9)

    def test_adapt_missing_model_404(self, client):
        small_generate(client, "t.graph", "cond1")
        resp = client.post("/adapt", json={"model": "nope.ckpt", "graph": "t.graph"})
        assert resp.status_code == 404

    def test_adapt_validation_error(self, client):
        resp = client.post("/adapt", json={
            "model": "m.ckpt", "graph": "g.graph", "refine": "nonsense",
        })
        assert resp.status_code == 422


class TestDiagnose:
    def test_report_with_model(self, client):
        small_generate(client, "src.graph", "source_imbal", seed=3)
        small_generate(client, "tgt.graph", "cond5", seed=4)
        small_pretrain(client, "src.graph", "model.ckpt")
        resp = client.post("/diagnose", json={
            "source": "src.graph", "target": "tgt.graph", "model": "model.ckpt",
            "out": "report.json", "emit_embeddings": "emb.csv",
        })
        assert resp.status_code == 200, resp.text
        body = resp.json()
        assert body["label_tv"] > 0.2  # imbalanced vs balanced
        assert body["ber_source"] is not None
        report = json.loads((client.workdir / "report.json").read_text())
        assert report["snr_profile_source"]
        emb_lines = (client.workdir / "emb.csv").read_text().splitlines()
        assert len(emb_lines) == 401 and emb_lines[0].startswith("node,label")

    def test_embeddings_require_model(self, client):
        small_generate(client, "a.graph", "cond1", seed=5)
        small_generate(client, "b.graph", "cond2", seed=6)
        resp = client.post("/diagnose", json={
            "source": "a.graph", "target": "b.graph", "emit_embeddings": "e.csv",
        })
        assert resp.status_code == 422


class TestExperiment:
    def test_inline_config(self, client):
        resp = client.post("/experiment", json={
            "config": {
                "source": "source_imbal", "target": "cond1",
                "methods": ["erm"], "seeds": [0],
                "pretrain": {"epochs": 20},
            },
            "out": "table", "formats": ["json", "csv", "markdown"],
        })
        # full-size graphs here; keep epochs small but real
        assert resp.status_code == 200, resp.text
        body = resp.json()
        assert body["cells"]["erm"]["mean"] is not None
        assert len(body["artifacts"]) == 3
        assert (client.workdir / "table.csv").exists()

    def test_config_exclusivity(self, client):
        resp = client.post("/experiment", json={})
        assert resp.status_code == 422


class TestSchemaMirrorsTrace:
    def test_gamma_round_trips_through_json(self, client):
        small_generate(client, "src.graph", "source_imbal", seed=7)
        small_pretrain(client, "src.graph", "m.ckpt")
        small_generate(client, "tgt.graph", "source_imbal", seed=8)
        resp = client.post("/adapt", json={
            "model": "m.ckpt", "graph": "tgt.graph", "refine": "lame",
        })
        assert resp.status_code == 200
        gamma = np.array(resp.json()["gamma"])
        assert gamma.shape == (3, 3)
        assert np.all(gamma >= 0) and np.all(gamma <= 10.0)
        assert np.isfinite(gamma).all()
