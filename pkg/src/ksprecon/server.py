"""TCP server hosting one gadget chain per connection, and the replay client."""
from __future__ import annotations

import json
import logging
import socket
import socketserver
import threading
from pathlib import Path
from typing import BinaryIO, Iterator, Optional, Tuple

from . import wire
from .detection import detections_to_json
from .files import write_pgm
from .pipeline import ChainConfig, ChainConfigError, build_chain, error_report

log = logging.getLogger(__name__)

DEFAULT_PORT = 9002
RETURNED = (wire.Image, wire.Annotations, wire.Report)


class ClientError(RuntimeError):
    pass


class ConnectionFailedError(ClientError):
    pass


class PrematureCloseError(ClientError):
    pass


def session_messages(stream: BinaryIO) -> Iterator:
    """Decode a session stream, enforcing Config, Acquisition*, Close."""
    first = wire.read_message(stream)
    if first is None:
        raise wire.IncompleteMessageError("connection closed before Config")
    if not isinstance(first, wire.Config):
        raise wire.ProtocolError(f"session must start with Config, got {type(first).__name__}")
    yield first
    while True:
        msg = wire.read_message(stream)
        if msg is None:
            raise wire.IncompleteMessageError("connection closed before Close")
        if isinstance(msg, wire.Close):
            yield msg
            return
        if not isinstance(msg, wire.Acquisition):
            raise wire.ProtocolError(f"unexpected {type(msg).__name__} message inside a session")
        yield msg


def serve_session(rfile: BinaryIO, wfile: BinaryIO, cfg: ChainConfig) -> int:
    """Run one session; returns the number of messages written back."""
    sent = 0

    def send(msg):
        nonlocal sent
        wfile.write(wire.encode_message(msg))
        wfile.flush()
        sent += 1

    try:
        try:
            chain = build_chain(cfg)
        except (ChainConfigError, OSError, ValueError) as exc:
            send(error_report("build", exc))
            return sent
        for out in chain.run(session_messages(rfile)):
            if isinstance(out, RETURNED):
                send(out)
    finally:
        try:
            send(wire.Close())
            _drain(rfile)
        except OSError:
            pass
    return sent


def _drain(rfile: BinaryIO):
    # Unread input at close time makes the kernel reset the connection, which
    # can destroy replies the client has not read yet. Consume it first.
    while rfile.read(65536):
        pass


class _SessionHandler(socketserver.StreamRequestHandler):
    timeout = 300  # seconds of client silence before the session is dropped

    def handle(self):
        peer = self.client_address
        log.info("session from %s:%s", *peer[:2])
        try:
            n = serve_session(self.rfile, self.wfile, self.server.chain_config)
            log.info("session from %s:%s done, %d messages returned", peer[0], peer[1], n)
        except OSError as exc:
            log.warning("session from %s:%s aborted: %s", peer[0], peer[1], exc)


class ReconServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: Tuple[str, int], chain_config: ChainConfig):
        chain_config.validate()
        self.chain_config = chain_config
        super().__init__(address, _SessionHandler)

    @property
    def port(self) -> int:
        return self.server_address[1]

    def start_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, daemon=True, name="recon-server")
        t.start()
        return t


def run_server(port: int, chain_config: ChainConfig, host: str = "127.0.0.1"):
    with ReconServer((host, port), chain_config) as server:
        log.info("listening on %s:%d", host, server.port)
        server.serve_forever()


def parse_address(addr: str) -> Tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must look like HOST:PORT, got {addr!r}")
    return host or "127.0.0.1", int(port)


def _replay(sock: socket.socket, dataset: BinaryIO, counter: dict):
    try:
        while True:
            msg = wire.read_message(dataset)
            if msg is None:
                break
            sock.sendall(wire.encode_message(msg))
            counter["sent"] += 1
    except OSError as exc:
        counter["send_error"] = exc
    except wire.WireError as exc:
        counter["dataset_error"] = exc
    finally:
        try:
            sock.shutdown(socket.SHUT_WR)
        except OSError:
            pass


def run_client(address, dataset_path, output_dir, timeout: Optional[float] = 60.0) -> dict:
    """Stream a dataset file to a server and save everything it sends back.

    Outputs are written as they arrive (``slice_NNN.pgm``, ``detections.json``,
    ``report.json``) so a failed session still leaves its partial results.
    """
    if isinstance(address, str):
        address = parse_address(address)
    dataset_path = Path(dataset_path)
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"sent": 0, "received": 0, "images": 0, "annotations": 0, "reports": 0}
    try:
        sock = socket.create_connection(address, timeout=timeout)
    except OSError as exc:
        raise ConnectionFailedError(f"cannot connect to {address[0]}:{address[1]}: {exc}") from exc

    detections = []
    with sock, open(dataset_path, "rb") as dataset:
        sender = threading.Thread(target=_replay, args=(sock, dataset, summary), daemon=True)
        sender.start()
        rfile = sock.makefile("rb")
        closed = False
        while True:
            msg = wire.read_message(rfile)
            if msg is None:
                break
            summary["received"] += 1
            if isinstance(msg, wire.Close):
                closed = True
                break
            if isinstance(msg, wire.Image):
                summary["images"] += 1
                write_pgm(out / f"slice_{msg.slice_index:03d}.pgm", msg.pixels)
            elif isinstance(msg, wire.Annotations):
                summary["annotations"] += 1
                detections.extend(wire.detections_from_annotations(msg))
                (out / "detections.json").write_text(detections_to_json(detections), encoding="utf-8")
            elif isinstance(msg, wire.Report):
                name = "report.json" if summary["reports"] == 0 else f"report_{summary['reports']}.json"
                summary["reports"] += 1
                (out / name).write_bytes(msg.text.encode("utf-8"))
            else:
                raise wire.ProtocolError(f"server sent unexpected {type(msg).__name__}")
        sender.join(timeout=timeout)
        rfile.close()
    if "dataset_error" in summary:
        raise summary.pop("dataset_error")
    summary.pop("send_error", None)
    if not closed:
        raise PrematureCloseError(
            f"server closed the connection before Close ({summary['received']} messages received)"
        )
    return summary


def report_is_error(report_text: str) -> bool:
    try:
        return "error" in json.loads(report_text)
    except json.JSONDecodeError:
        return False
