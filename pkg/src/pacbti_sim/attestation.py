"""Attestation tokens carrying the RunPBA-extended security lifecycle claim.

Token wire format (94 bytes, multi-byte integers big-endian)::

    "RPB1" | nonce[32] | instance_id[16] | lifecycle u16 | boot_epoch u32
           | fault_count u32 | authenticator[32]

The authenticator is HMAC-SHA256 over the first 62 bytes. On the wire each
message is preceded by a 4-byte big-endian length.
"""

import hashlib
import hmac
import secrets
import socket
import struct
from dataclasses import dataclass

from .runpba import LifecycleState, StorageFailure

MAGIC = b"RPB1"
NONCE_SIZE = 32
INSTANCE_ID_SIZE = 16
TAG_SIZE = 32
_CLAIMS = struct.Struct(">4s32s16sHII")
CLAIMS_SIZE = _CLAIMS.size
TOKEN_SIZE = CLAIMS_SIZE + TAG_SIZE

RUNTIME_FAILURE_BIT = 15
MALFUNCTION_BIT = 14
PAC_PRIV_BIT = 13
PAC_UNPRIV_BIT = 12
BTI_PRIV_BIT = 11
BTI_UNPRIV_BIT = 10
RESERVED_MASK = 0x0300


class AttestationError(Exception):
    pass


class MalformedToken(AttestationError):
    pass


class BadAuthenticator(AttestationError):
    pass


class NonceMismatch(AttestationError):
    pass


class Decommissioned(AttestationError):
    pass


class KeyMissing(AttestationError):
    pass


class TransportClosed(AttestationError):
    pass


class TruncatedFrame(TransportClosed):
    def __init__(self, expected, got):
        super().__init__(f"frame truncated: expected {expected} bytes, got {len(got)}")
        self.partial = got


@dataclass(frozen=True)
class SecurityLifecycleClaim:
    psa_state: int
    runtime_failure: bool = False
    runpba_malfunction: bool = False
    pac_priv: bool = False
    pac_unpriv: bool = False
    bti_priv: bool = False
    bti_unpriv: bool = False

    @property
    def lifecycle(self):
        try:
            return LifecycleState(self.psa_state)
        except ValueError:
            return None


def encode_lifecycle_claim(c: SecurityLifecycleClaim) -> int:
    if not 0 <= c.psa_state <= 0xFF:
        raise ValueError("psa_state must fit in 8 bits")
    return (c.psa_state
            | c.runtime_failure << RUNTIME_FAILURE_BIT
            | c.runpba_malfunction << MALFUNCTION_BIT
            | c.pac_priv << PAC_PRIV_BIT
            | c.pac_unpriv << PAC_UNPRIV_BIT
            | c.bti_priv << BTI_PRIV_BIT
            | c.bti_unpriv << BTI_UNPRIV_BIT)


def decode_lifecycle_claim(value: int) -> SecurityLifecycleClaim:
    if not 0 <= value <= 0xFFFF:
        raise MalformedToken("lifecycle claim is not 16 bits")
    if value & RESERVED_MASK:
        raise MalformedToken(f"reserved lifecycle bits set in {value:#06x}")

    def bit(n):
        return bool(value >> n & 1)

    return SecurityLifecycleClaim(value & 0xFF, bit(RUNTIME_FAILURE_BIT), bit(MALFUNCTION_BIT),
                                  bit(PAC_PRIV_BIT), bit(PAC_UNPRIV_BIT), bit(BTI_PRIV_BIT),
                                  bit(BTI_UNPRIV_BIT))


class Authenticator:
    """Tag scheme for the canonical claim encoding. Swap in a signature
    scheme by overriding ``tag`` and ``check``."""

    def tag(self, data: bytes) -> bytes:
        raise NotImplementedError

    def check(self, data: bytes, tag: bytes) -> bool:
        raise NotImplementedError


class HmacAuthenticator(Authenticator):
    def __init__(self, key: bytes):
        self.key = bytes(key)

    def tag(self, data):
        return hmac.new(self.key, data, hashlib.sha256).digest()

    def check(self, data, tag):
        return hmac.compare_digest(self.tag(data), tag)


def instance_id_for(key: bytes) -> bytes:
    return hashlib.sha256(key).digest()[:INSTANCE_ID_SIZE]


@dataclass(frozen=True)
class AttestationToken:
    nonce: bytes
    instance_id: bytes
    lifecycle: int       # raw 16-bit claim; decode with decode_lifecycle_claim
    boot_epoch: int
    fault_count: int
    authenticator: bytes = b""

    def claims_bytes(self) -> bytes:
        return _CLAIMS.pack(MAGIC, self.nonce, self.instance_id, self.lifecycle,
                            self.boot_epoch, self.fault_count)

    def to_bytes(self) -> bytes:
        return self.claims_bytes() + self.authenticator

    @classmethod
    def from_bytes(cls, raw: bytes) -> "AttestationToken":
        if len(raw) != TOKEN_SIZE:
            raise MalformedToken(f"token is {len(raw)} bytes, expected {TOKEN_SIZE}")
        magic, nonce, iid, lifecycle, epoch, faults = _CLAIMS.unpack_from(raw)
        if magic != MAGIC:
            raise MalformedToken("bad token magic")
        return cls(nonce, iid, lifecycle, epoch, faults, bytes(raw[CLAIMS_SIZE:]))


@dataclass(frozen=True)
class VerifiedClaims:
    nonce: bytes
    instance_id: bytes
    lifecycle: SecurityLifecycleClaim
    boot_epoch: int
    fault_count: int

    def as_dict(self):
        c = self.lifecycle
        state = c.lifecycle
        return {
            "psa_state": state.name if state is not None else f"{c.psa_state:#04x}",
            "lifecycle_claim": f"{encode_lifecycle_claim(c):#06x}",
            "runtime_failure": c.runtime_failure,
            "runpba_malfunction": c.runpba_malfunction,
            "pac_priv": c.pac_priv,
            "pac_unpriv": c.pac_unpriv,
            "bti_priv": c.bti_priv,
            "bti_unpriv": c.bti_unpriv,
            "boot_epoch": self.boot_epoch,
            "fault_count": self.fault_count,
        }


def current_claim(device) -> SecurityLifecycleClaim:
    """Lifecycle claim from the device's state right now (not at boot)."""
    status = device.runpba.query_status(device.machine)
    state = device.runpba.lifecycle.state
    c = status.control
    return SecurityLifecycleClaim(
        int(state),
        status.runtime_failure or state is LifecycleState.NSPE_COMPROMISED,
        status.malfunction,
        c.pac_priv, c.pac_unpriv, c.bti_priv, c.bti_unpriv,
    )


def build_token(device, nonce: bytes) -> AttestationToken:
    if device.runpba.lifecycle.state is LifecycleState.DECOMMISSIONED:
        raise Decommissioned("device is decommissioned")
    key = device.attestation_key
    if not key:
        raise KeyMissing("no attestation key provisioned")
    if len(nonce) != NONCE_SIZE:
        raise ValueError(f"nonce must be {NONCE_SIZE} bytes")
    try:
        faults = len(device.runpba.its.records())
    except StorageFailure:
        faults = 0
    token = AttestationToken(bytes(nonce), instance_id_for(key),
                             encode_lifecycle_claim(current_claim(device)),
                             device.machine.boot_epoch, faults)
    return AttestationToken(token.nonce, token.instance_id, token.lifecycle, token.boot_epoch,
                            token.fault_count, HmacAuthenticator(key).tag(token.claims_bytes()))


def verify_token(token, expected_nonce: bytes, key, authenticator: Authenticator = None) -> VerifiedClaims:
    raw = token.to_bytes() if isinstance(token, AttestationToken) else bytes(token)
    tok = AttestationToken.from_bytes(raw)
    auth = authenticator or HmacAuthenticator(key)
    if not auth.check(raw[:CLAIMS_SIZE], tok.authenticator):
        raise BadAuthenticator("authenticator does not match claims")
    claim = decode_lifecycle_claim(tok.lifecycle)
    if not hmac.compare_digest(tok.nonce, bytes(expected_nonce)):
        raise NonceMismatch("token nonce does not match the challenge")
    return VerifiedClaims(tok.nonce, tok.instance_id, claim, tok.boot_epoch, tok.fault_count)


# ---------------------------------------------------------------- transport

def frame(payload: bytes) -> bytes:
    return struct.pack(">I", len(payload)) + payload


class StreamTransport:
    """Length-prefixed messages over a byte stream; subclasses supply _write/_read."""

    def _write(self, data: bytes):
        raise NotImplementedError

    def _read(self, n: int) -> bytes:
        raise NotImplementedError

    def _read_exact(self, n):
        buf = b""
        while len(buf) < n:
            chunk = self._read(n - len(buf))
            if not chunk:
                break
            buf += chunk
        return buf

    def send(self, payload: bytes):
        self._write(frame(payload))

    def recv(self) -> bytes:
        head = self._read_exact(4)
        if len(head) < 4:
            raise TransportClosed("connection closed before a message arrived")
        (n,) = struct.unpack(">I", head)
        body = self._read_exact(n)
        if len(body) < n:
            raise TruncatedFrame(n, body)
        return body

    def close(self):
        pass


class SocketTransport(StreamTransport):
    def __init__(self, sock):
        self.sock = sock

    @classmethod
    def connect(cls, addr, timeout=10.0):
        host, port = parse_addr(addr)
        return cls(socket.create_connection((host, port), timeout=timeout))

    def _write(self, data):
        self.sock.sendall(data)

    def _read(self, n):
        return self.sock.recv(n)

    def close(self):
        self.sock.close()


class LoopbackTransport(StreamTransport):
    """In-process transport: every request frame is handed to ``endpoint`` and
    its reply bytes are queued for the next reads. ``tamper`` may rewrite the
    raw reply stream before the verifier sees it."""

    def __init__(self, endpoint, tamper=None):
        self.endpoint = endpoint
        self.tamper = tamper
        self.inbox = b""

    def _write(self, data):
        reply = self.endpoint.handle(data)
        if self.tamper is not None:
            reply = self.tamper(reply)
        self.inbox += reply

    def _read(self, n):
        out, self.inbox = self.inbox[:n], self.inbox[n:]
        return out


class AttestationEndpoint:
    """Device side of the challenge-response protocol."""

    def __init__(self, device):
        self.device = device

    def respond(self, nonce: bytes) -> bytes:
        if len(nonce) != NONCE_SIZE:
            raise MalformedToken("challenge nonce must be 32 bytes")
        return build_token(self.device, nonce).to_bytes()

    def handle(self, request: bytes) -> bytes:
        """One framed request in, framed reply out (empty reply closes)."""
        if len(request) < 4:
            return b""
        (n,) = struct.unpack(">I", request[:4])
        try:
            return frame(self.respond(request[4:4 + n]))
        except (Decommissioned, KeyMissing, MalformedToken):
            return b""

    def serve_connection(self, transport: StreamTransport):
        nonce = transport.recv()
        try:
            transport.send(self.respond(nonce))
        except (Decommissioned, KeyMissing, MalformedToken):
            pass


def challenge_response(transport: StreamTransport, verifier_key: bytes, nonce: bytes = None) -> VerifiedClaims:
    nonce = secrets.token_bytes(NONCE_SIZE) if nonce is None else nonce
    transport.send(nonce)
    try:
        raw = transport.recv()
    except TruncatedFrame as e:
        raise MalformedToken(str(e)) from e
    return verify_token(raw, nonce, verifier_key)


def parse_addr(addr: str):
    host, _, port = addr.rpartition(":")
    if not port.isdigit():
        raise ValueError(f"address must be host:port, got {addr!r}")
    return host or "127.0.0.1", int(port)


__all__ = [
    "AttestationEndpoint", "AttestationError", "AttestationToken", "Authenticator",
    "BadAuthenticator", "Decommissioned", "HmacAuthenticator", "KeyMissing", "LoopbackTransport",
    "MalformedToken", "NonceMismatch", "SecurityLifecycleClaim", "SocketTransport",
    "StreamTransport", "TransportClosed", "VerifiedClaims", "build_token", "challenge_response",
    "current_claim", "decode_lifecycle_claim", "encode_lifecycle_claim", "instance_id_for",
    "verify_token",
]
