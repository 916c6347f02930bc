import socket
import threading
import time

import pytest
import uvicorn
from fastapi.testclient import TestClient

from pfbridge.model import load_checkpoint, make_tiny_checkpoint
from pfbridge.service import create_app

# conformance client capacity covers the largest conformance vector; the
# live smoke server is capped at the engine's batch size to prove the
# pipeline never sends more
CONFORMANCE_MAX_BATCH = 8
MAX_BATCH = 4


@pytest.fixture(scope="session")
def checkpoint_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "tiny.pt"
    make_tiny_checkpoint(path, channels=4, native_h=16, native_w=16, seed=3)
    return path


@pytest.fixture(scope="session")
def model(checkpoint_path):
    return load_checkpoint(checkpoint_path)


@pytest.fixture(scope="session")
def client(model):
    with TestClient(create_app(model, max_batch=CONFORMANCE_MAX_BATCH)) as c:
        yield c


@pytest.fixture(scope="session")
def live_server(model):
    """A separate app served over a real socket for the engine's client."""
    app = create_app(model, max_batch=MAX_BATCH)
    with socket.socket() as probe:
        probe.bind(("127.0.0.1", 0))
        port = probe.getsockname()[1]
    config = uvicorn.Config(app, host="127.0.0.1", port=port,
                            log_level="warning")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.time() + 15
    while not server.started:
        if time.time() > deadline:
            raise RuntimeError("bridge server failed to start")
        time.sleep(0.05)
    try:
        yield f"http://127.0.0.1:{port}"
    finally:
        server.should_exit = True
        thread.join(timeout=5)
