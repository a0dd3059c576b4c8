import pytest

from snap.server import ServerConfig, SnapServer


@pytest.fixture
def live_server(tmp_path):
    """A running server on ephemeral ports with a throwaway data dir."""
    config = ServerConfig(device_port=0, admin_port=0, data_dir=tmp_path / "data")
    server = SnapServer(config)
    server.start()
    yield server
    server.stop()


@pytest.fixture
def admin_url(live_server):
    return f"http://127.0.0.1:{live_server.admin_port}"


@pytest.fixture
def device_addr(live_server):
    return ("127.0.0.1", live_server.device_port)
