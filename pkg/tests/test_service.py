from __future__ import annotations

import socket
import threading
import time

import httpx
import pytest
from fastapi.testclient import TestClient

from evsgkit.service import create_app, serve_rewards

PERFECT = {
    "id": 7,
    "raw_text": "<think>t</think><answer>from 12.0 to 20.0 seconds. Answer: the red cup</answer>",
    "gt_span": [12.0, 20.0],
    "gt_answer": "the red cup",
    "attention": {"sum_vid": 1.0, "sum_graph": 1.0},
}


@pytest.fixture
def client():
    return TestClient(create_app())


def test_health(client):
    assert client.get("/health").json() == {"status": "ready"}


def test_score_perfect(client):
    body = client.post("/score", json=PERFECT).json()
    assert body["id"] == "7"
    assert body["total"] == pytest.approx(1.3, abs=1e-12)
    assert body["r_attn_gated"] == 0.5


def test_score_matrix_dump(client):
    req = dict(PERFECT, attention={"rows": 1, "cols": 3, "values": [3, 1, 0], "t_vid": [0], "t_graph": [1, 2]})
    assert client.post("/score", json=req).json()["r_attn_raw"] == pytest.approx(0.75)


@pytest.mark.parametrize("change", [
    {"gt_span": [5.0, 1.0]},
    {"attention_ref": "dumps/x.json", "attention": None},
    {"unexpected": True},
    {"gt_answer": None},
    {"attention": {"rows": 2, "cols": 2, "values": [1.0], "t_vid": [0], "t_graph": [1]}},
])
def test_bad_requests_are_422(client, change):
    req = {k: v for k, v in dict(PERFECT, **change).items() if v is not None}
    assert client.post("/score", json=req).status_code == 422


def test_shutdown_flags_server():
    class FakeServer:
        should_exit = False

    app = create_app()
    app.state.server = FakeServer()
    with TestClient(app) as client:
        assert client.post("/shutdown").json() == {"status": "stopping"}
    assert app.state.server.should_exit


def test_live_server_health_score_and_shutdown():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    thread = threading.Thread(target=serve_rewards, kwargs={"port": port}, daemon=True)
    thread.start()
    base = f"http://127.0.0.1:{port}"
    for _ in range(100):
        try:
            if httpx.get(f"{base}/health").status_code == 200:
                break
        except httpx.TransportError:
            time.sleep(0.05)
    assert httpx.post(f"{base}/score", json=PERFECT).json()["total"] == pytest.approx(1.3)
    assert httpx.post(f"{base}/shutdown").json()["status"] == "stopping"
    thread.join(timeout=10)
    assert not thread.is_alive()
