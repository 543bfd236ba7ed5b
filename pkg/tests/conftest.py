import pytest

from mdml.service import ServiceConfig, ServiceThread


@pytest.fixture
def service(tmp_path):
    config = ServiceConfig(
        listen_addr="127.0.0.1:0",
        data_dir=str(tmp_path / "broker"),
        heartbeat_secs=0.5,
    )
    with ServiceThread(config) as handle:
        yield handle


@pytest.fixture
def addr(service):
    return service.addr
