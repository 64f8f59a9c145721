import json
import socket
import socketserver
import threading

import numpy as np
import pytest

from ksprecon import wire
from ksprecon.files import read_pgm
from ksprecon.phantom import dataset_messages, write_dataset
from ksprecon.pipeline import ChainConfig, default_chain
from ksprecon.server import (
    ConnectionFailedError,
    PrematureCloseError,
    ReconServer,
    parse_address,
    report_is_error,
    run_client,
)


@pytest.fixture
def server(small_gt_path):
    srv = ReconServer(("127.0.0.1", 0), default_chain("zero_fill", 1.0, ground_truth=str(small_gt_path)))
    srv.start_background()
    yield srv
    srv.shutdown()
    srv.server_close()


@pytest.fixture(scope="module")
def dataset(small_volume, tmp_path_factory):
    path = tmp_path_factory.mktemp("ds") / "d.bin"
    return write_dataset([(p.kspace, p.mask) for p in small_volume[:3]], path)


def _raw_session(port, payload: bytes):
    with socket.create_connection(("127.0.0.1", port), timeout=10) as sock:
        sock.sendall(payload)
        sock.shutdown(socket.SHUT_WR)
        with sock.makefile("rb") as fh:
            return list(wire.iter_messages(fh))


def test_empty_session(server):
    msgs = _raw_session(server.port, wire.encode_message(wire.Config("{}")) + wire.encode_message(wire.Close()))
    assert [type(m).__name__ for m in msgs] == ["Report", "Close"]
    doc = json.loads(msgs[0].text)
    assert (doc["tp"], doc["fp"], doc["fn"], doc["slices"]) == (0, 0, 0, [])


def test_three_slice_session(server, dataset, tmp_path):
    summary = run_client(("127.0.0.1", server.port), dataset, tmp_path)
    assert summary == {"sent": 1 + 3 * 64 + 1, "received": 3 + 3 + 1 + 1, "images": 3, "annotations": 3, "reports": 1}
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["sensitivity"] == 1.0
    for s in range(3):
        assert read_pgm(tmp_path / f"slice_{s:03d}.pgm").shape == (64, 64)
    assert json.loads((tmp_path / "detections.json").read_text())


def test_concurrent_sessions_match_sequential(server, dataset, tmp_path):
    seq = []
    for k in range(2):
        run_client(("127.0.0.1", server.port), dataset, tmp_path / f"seq{k}")
        seq.append(tmp_path / f"seq{k}")
    errors = []

    def go(k):
        try:
            run_client(("127.0.0.1", server.port), dataset, tmp_path / f"con{k}")
        except Exception as exc:  # noqa: BLE001
            errors.append(exc)

    threads = [threading.Thread(target=go, args=(k,)) for k in range(2)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(60)
    assert not errors
    names = sorted(p.name for p in seq[0].iterdir())
    for d in [seq[1], tmp_path / "con0", tmp_path / "con1"]:
        assert sorted(p.name for p in d.iterdir()) == names
        for n in names:
            assert (d / n).read_bytes() == (seq[0] / n).read_bytes()


def test_protocol_violation_gives_error_report(server):
    payload = wire.encode_message(wire.Config("{}")) + wire.encode_message(wire.Report("hi"))
    msgs = _raw_session(server.port, payload)
    assert [type(m).__name__ for m in msgs] == ["Report", "Close"]
    assert report_is_error(msgs[0].text)
    assert "unexpected Report" in json.loads(msgs[0].text)["message"]


def test_session_must_start_with_config(server):
    msgs = _raw_session(server.port, wire.encode_message(wire.Close()))
    assert report_is_error(msgs[0].text) and isinstance(msgs[-1], wire.Close)


def test_bad_chain_config_reports_at_start(small_volume):
    cfg = ChainConfig([{"kind": "accumulate"}, {"kind": "recon", "method": "external"}, {"kind": "report"}])
    srv = ReconServer(("127.0.0.1", 0), cfg)
    srv.start_background()
    try:
        msgs = _raw_session(srv.port, b"".join(wire.encode_message(m) for m in dataset_messages(
            [(small_volume[0].kspace, small_volume[0].mask)])))
    finally:
        srv.shutdown()
        srv.server_close()
    assert [type(m).__name__ for m in msgs] == ["Report", "Close"]
    assert json.loads(msgs[0].text)["stage"] == "build"


class _HangUp(socketserver.StreamRequestHandler):
    """Returns one image, then drops the connection without Close."""

    def handle(self):
        while True:
            msg = wire.read_message(self.rfile)
            if msg is None or isinstance(msg, wire.Close):
                break
        self.wfile.write(wire.encode_message(wire.Image(0, np.ones((4, 4), np.float32))))


def test_premature_close_keeps_partial_outputs(dataset, tmp_path):
    srv = socketserver.TCPServer(("127.0.0.1", 0), _HangUp)
    threading.Thread(target=srv.serve_forever, daemon=True).start()
    try:
        with pytest.raises(PrematureCloseError):
            run_client(("127.0.0.1", srv.server_address[1]), dataset, tmp_path)
    finally:
        srv.shutdown()
        srv.server_close()
    assert read_pgm(tmp_path / "slice_000.pgm").shape == (4, 4)


def test_connection_refused(dataset, tmp_path):
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    with pytest.raises(ConnectionFailedError):
        run_client(("127.0.0.1", port), dataset, tmp_path)


def test_parse_address():
    assert parse_address("localhost:9002") == ("localhost", 9002)
    assert parse_address(":7") == ("127.0.0.1", 7)
    with pytest.raises(ValueError):
        parse_address("localhost")
