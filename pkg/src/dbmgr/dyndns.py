"""Dynamic DNS sub-zone with low-TTL A records.

The record table is an embedded durable store (JSON snapshot plus append
log). A UDP responder answers a minimal authoritative subset of RFC 1035 and
an HTTP endpoint provides record CRUD, so engine clients resolve database
nodes by well-known names that follow them across node assignments.
"""

from __future__ import annotations

import ipaddress
import json
import re
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .config import DnsSettings
from .errors import InvalidName, PortInUse, TtlTooHigh
from .util import write_json_atomic

LABEL_RE = re.compile(r"^[a-z0-9_]([a-z0-9_-]{0,61}[a-z0-9_])?$")

QTYPE_A = 1
QCLASS_IN = 1
RCODE_OK = 0
RCODE_FORMERR = 1
RCODE_NXDOMAIN = 3
RCODE_REFUSED = 5


@dataclass(frozen=True)
class DnsRecord:
    fqdn: str
    address: str
    ttl: int

    def to_dict(self) -> dict:
        return {"fqdn": self.fqdn, "address": self.address, "ttl": self.ttl}


def _validate_label_sequence(name: str) -> str:
    name = name.strip(".").lower()
    if not name:
        raise InvalidName("empty record name")
    for label in name.split("."):
        if not LABEL_RE.match(label):
            raise InvalidName(f"invalid DNS label {label!r}")
    return name


class RecordStore:
    """Durable A-record table for one zone.

    Mutations serialize on an internal lock and append to the log; reads are
    snapshot reads of the in-memory table. The on-disk state is the snapshot
    plus any log entries written since the last compaction.
    """

    def __init__(self, directory: Path, settings: DnsSettings | None = None):
        self.settings = settings or DnsSettings()
        if not self.settings.zone.endswith("."):
            raise InvalidName("zone must be absolute (trailing dot)")
        self.zone = self.settings.zone.lower()
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.snapshot_path = self.dir / "dns_records.json"
        self.log_path = self.dir / "dns_records.log"
        self._lock = threading.Lock()
        self._records: dict[str, DnsRecord] = {}
        self._load()

    def _load(self) -> None:
        if self.snapshot_path.exists():
            data = json.loads(self.snapshot_path.read_text())
            for entry in data.get("records", []):
                rec = DnsRecord(fqdn=entry["fqdn"], address=entry["address"],
                                ttl=int(entry["ttl"]))
                self._records[rec.fqdn] = rec
        if self.log_path.exists():
            for line in self.log_path.read_text().splitlines():
                if not line.strip():
                    continue
                op = json.loads(line)
                fqdn = op["fqdn"]
                if op["op"] == "upsert":
                    self._records[fqdn] = DnsRecord(
                        fqdn=fqdn, address=op["address"], ttl=int(op["ttl"]))
                else:
                    self._records.pop(fqdn, None)
        self.compact()

    def compact(self) -> None:
        write_json_atomic(self.snapshot_path, {
            "zone": self.zone,
            "records": [r.to_dict() for r in self._records.values()],
        })
        self.log_path.write_text("")

    def _append(self, entry: dict) -> None:
        with open(self.log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
            fh.flush()

    def fqdn_of(self, name: str) -> str:
        name = name.strip(".").lower()
        if name.endswith("." + self.zone.rstrip(".")):
            return name + "."
        return f"{name}.{self.zone}"

    def upsert(self, name: str, address: str, ttl: int | None = None) -> DnsRecord:
        labels = _validate_label_sequence(name)
        ipaddress.IPv4Address(address)  # raises ValueError on junk
        ttl = self.settings.default_ttl if ttl is None else int(ttl)
        if ttl < 1 or ttl > self.settings.ttl_max:
            raise TtlTooHigh(f"ttl {ttl} outside 1..{self.settings.ttl_max}")
        record = DnsRecord(fqdn=f"{labels}.{self.zone}", address=address, ttl=ttl)
        with self._lock:
            self._records[record.fqdn] = record
            self._append({"op": "upsert", "fqdn": record.fqdn,
                          "address": address, "ttl": ttl})
        return record

    def delete(self, name: str) -> None:
        """Idempotent: deleting an absent name is a no-op."""
        fqdn = self.fqdn_of(name)
        with self._lock:
            self._records.pop(fqdn, None)
            self._append({"op": "delete", "fqdn": fqdn})

    def resolve(self, name: str) -> str | None:
        record = self._records.get(self.fqdn_of(name))
        return record.address if record else None

    def lookup(self, fqdn: str) -> DnsRecord | None:
        return self._records.get(fqdn.lower() if fqdn.endswith(".") else fqdn.lower() + ".")

    def records(self) -> list[DnsRecord]:
        return sorted(self._records.values(), key=lambda r: r.fqdn)

    def in_zone(self, fqdn: str) -> bool:
        fqdn = fqdn.lower()
        if not fqdn.endswith("."):
            fqdn += "."
        return fqdn == self.zone or fqdn.endswith("." + self.zone)


# --- wire format -------------------------------------------------------------

def encode_name(fqdn: str) -> bytes:
    out = bytearray()
    for label in fqdn.strip(".").split("."):
        raw = label.encode("ascii")
        if not 0 < len(raw) < 64:
            raise ValueError(f"bad label {label!r}")
        out.append(len(raw))
        out += raw
    out.append(0)
    return bytes(out)


def decode_name(data: bytes, offset: int) -> tuple[str, int]:
    """Decode an uncompressed name; returns (fqdn, next offset)."""
    labels = []
    while True:
        if offset >= len(data):
            raise ValueError("truncated name")
        length = data[offset]
        if length & 0xC0:
            raise ValueError("compressed names unsupported in questions")
        offset += 1
        if length == 0:
            break
        labels.append(data[offset:offset + length].decode("ascii"))
        offset += length
    return ".".join(labels) + ".", offset


@dataclass(frozen=True)
class Query:
    txn_id: int
    flags: int
    qname: str
    qtype: int
    qclass: int
    question_bytes: bytes


def parse_query(data: bytes) -> Query:
    if len(data) < 12:
        raise ValueError("short packet")
    txn_id, flags, qdcount, _an, _ns, _ar = struct.unpack("!HHHHHH", data[:12])
    if flags & 0x8000:
        raise ValueError("not a query")
    if qdcount != 1:
        raise ValueError(f"expected one question, got {qdcount}")
    qname, offset = decode_name(data, 12)
    if offset + 4 > len(data):
        raise ValueError("truncated question")
    qtype, qclass = struct.unpack("!HH", data[offset:offset + 4])
    return Query(txn_id=txn_id, flags=flags, qname=qname.lower(),
                 qtype=qtype, qclass=qclass,
                 question_bytes=data[12:offset + 4])


def build_response(query: Query, rcode: int,
                   answers: list[DnsRecord] | None = None) -> bytes:
    """QR=1, AA=1, RD copied from the query, RA=0; no authority/additional."""
    answers = answers or []
    rd = query.flags & 0x0100
    flags = 0x8000 | 0x0400 | rd | (rcode & 0x0F)
    header = struct.pack("!HHHHHH", query.txn_id, flags, 1, len(answers), 0, 0)
    body = bytearray(header)
    body += query.question_bytes
    for rec in answers:
        body += encode_name(rec.fqdn)
        body += struct.pack("!HHIH", QTYPE_A, QCLASS_IN, rec.ttl, 4)
        body += socket.inet_aton(rec.address)
    return bytes(body)


def answer_query(store: RecordStore, data: bytes) -> bytes | None:
    """Pure request->response mapping; None means drop the packet."""
    try:
        query = parse_query(data)
    except ValueError:
        if len(data) >= 12:
            txn_id = struct.unpack("!H", data[:2])[0]
            flags = 0x8000 | RCODE_FORMERR
            return struct.pack("!HHHHHH", txn_id, flags, 0, 0, 0, 0)
        return None
    if not store.in_zone(query.qname) or query.qclass != QCLASS_IN:
        return build_response(query, RCODE_REFUSED)
    record = store.lookup(query.qname)
    if record is None:
        return build_response(query, RCODE_NXDOMAIN)
    if query.qtype == QTYPE_A:
        return build_response(query, RCODE_OK, [record])
    return build_response(query, RCODE_OK, [])  # NODATA for other types


def wire_resolve(server_addr: tuple[str, int], fqdn: str, *,
                 timeout: float = 2.0, qtype: int = QTYPE_A) -> str | None:
    """Minimal client-side lookup against our responder; None on NXDOMAIN."""
    txn = struct.pack("!HHHHHH", 0x1234, 0x0100, 1, 0, 0, 0)
    packet = txn + encode_name(fqdn) + struct.pack("!HH", qtype, QCLASS_IN)
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as sock:
        sock.settimeout(timeout)
        sock.sendto(packet, server_addr)
        data, _ = sock.recvfrom(4096)
    rcode = struct.unpack("!H", data[2:4])[0] & 0x0F
    ancount = struct.unpack("!H", data[6:8])[0]
    if rcode != RCODE_OK or ancount == 0:
        return None
    _, offset = decode_name(data, 12)
    offset += 4  # question qtype/qclass
    _, offset = decode_name(data, offset)
    rtype, _rclass, _ttl, rdlength = struct.unpack("!HHIH", data[offset:offset + 10])
    offset += 10
    if rtype != QTYPE_A or rdlength != 4:
        return None
    return socket.inet_ntoa(data[offset:offset + 4])


# --- servers -----------------------------------------------------------------

class _UdpHandler(socketserver.BaseRequestHandler):
    def handle(self):
        data, sock = self.request
        reply = answer_query(self.server.store, data)  # type: ignore[attr-defined]
        if reply is not None:
            sock.sendto(reply, self.client_address)


class _ThreadingUdpServer(socketserver.ThreadingUDPServer):
    # No address reuse: with SO_REUSEADDR two UDP responders could silently
    # share one port and split the query stream between them.
    allow_reuse_address = False
    daemon_threads = True


def _crud_handler(store: RecordStore):
    class Handler(BaseHTTPRequestHandler):
        def _send(self, status: int, payload: dict | None = None):
            body = json.dumps(payload or {}).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def log_message(self, *args):  # quiet
            pass

        def do_GET(self):
            if self.path.rstrip("/") == "/records" or self.path == "/records":
                self._send(200, {"zone": store.zone,
                                 "records": [r.to_dict() for r in store.records()]})
            else:
                self._send(404, {"error": {"code": "not-found"}})

        def do_PUT(self):
            if not self.path.startswith("/records/"):
                self._send(404, {"error": {"code": "not-found"}})
                return
            name = self.path[len("/records/"):]
            length = int(self.headers.get("Content-Length", 0))
            try:
                payload = json.loads(self.rfile.read(length) or b"{}")
                record = store.upsert(name, payload["address"], payload.get("ttl"))
            except (InvalidName, TtlTooHigh) as exc:
                self._send(400, {"error": {"code": exc.code, "message": str(exc)}})
            except (KeyError, ValueError, json.JSONDecodeError) as exc:
                self._send(400, {"error": {"code": "bad-request", "message": str(exc)}})
            else:
                self._send(200, record.to_dict())

        def do_DELETE(self):
            if not self.path.startswith("/records/"):
                self._send(404, {"error": {"code": "not-found"}})
                return
            store.delete(self.path[len("/records/"):])
            self._send(204)

    return Handler


class DnsServer:
    """UDP responder plus HTTP CRUD front end over one RecordStore."""

    def __init__(self, store: RecordStore):
        self.store = store
        self._udp: _ThreadingUdpServer | None = None
        self._http: ThreadingHTTPServer | None = None
        self._threads: list[threading.Thread] = []

    def start(self) -> "DnsServer":
        s = self.store.settings
        try:
            self._udp = _ThreadingUdpServer((s.udp_host, s.udp_port), _UdpHandler)
            self._udp.store = self.store  # type: ignore[attr-defined]
            self._http = ThreadingHTTPServer((s.http_host, s.http_port),
                                             _crud_handler(self.store))
        except OSError as exc:
            self.stop()
            raise PortInUse(str(exc))
        for srv in (self._udp, self._http):
            t = threading.Thread(
                target=lambda s=srv: s.serve_forever(poll_interval=0.05),
                daemon=True)
            t.start()
            self._threads.append(t)
        return self

    @property
    def udp_address(self) -> tuple[str, int]:
        assert self._udp is not None
        return self._udp.server_address[:2]

    @property
    def http_address(self) -> tuple[str, int]:
        assert self._http is not None
        return self._http.server_address[:2]

    def stop(self) -> None:
        for srv in (self._udp, self._http):
            if srv is not None:
                srv.shutdown()
                srv.server_close()
        self._udp = self._http = None
        self.store.compact()
