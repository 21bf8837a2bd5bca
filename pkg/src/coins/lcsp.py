"""Light-weight client/server protocol spoken over the emulated serial link.

The infrastructure daemon is the client, the target node is the server.
Wire grammar (normative for this project, line endings are CRLF):

    request  = "GET " resource CRLF
             | "POST " resource " " length CRLF body
    response = "OK " length CRLF body
             | "ERROR " reason CRLF

``resource`` is a printable-ASCII path starting with "/" and containing no
whitespace, at most 200 bytes. ``length`` is a canonical decimal (no sign,
no leading zeros) counting the body bytes that follow the CRLF. ``reason``
is non-empty printable ASCII of at most 256 bytes. Request bodies are
capped at 1024 bytes and response bodies at 4096 bytes.

Decoding is incremental: a strict prefix of any valid frame raises
:class:`NeedMoreData` without consuming input, and trailing bytes after a
complete frame are left for the caller (back-to-back frames decode fine
even though the channel itself is stop-and-wait).
"""

from __future__ import annotations

from dataclasses import dataclass, field

MAX_REQUEST_BODY = 1024
MAX_RESPONSE_BODY = 4096
MAX_REASON = 256
# Resources are capped so every legal request line fits under MAX_LINE.
MAX_RESOURCE = 200
# Longest legal first line: "ERROR " + 256-byte reason + CRLF. Anything
# unterminated past this bound can never become a valid frame.
MAX_LINE = 6 + MAX_REASON + 2

CRLF = b"\r\n"


class LcspError(Exception):
    """Base class for protocol errors."""


class NeedMoreData(LcspError):
    """Input ends before a complete frame; nothing was consumed."""


class MalformedFrame(LcspError):
    def __init__(self, position: int, reason: str):
        super().__init__(f"malformed frame at byte {position}: {reason}")
        self.position = position
        self.reason = reason


class FrameTooLarge(LcspError):
    """Declared body length exceeds the role's limit."""


class ChannelClosed(LcspError):
    """Operation on a closed channel."""


class RequestTimeout(LcspError, TimeoutError):
    """No complete response arrived within the call timeout."""


@dataclass(frozen=True)
class LcspRequest:
    method: str
    resource: str
    body: bytes = b""

    def validate(self) -> None:
        if self.method not in ("GET", "POST"):
            raise ValueError(f"unsupported method {self.method!r}")
        _check_resource(self.resource)
        if self.method == "GET" and self.body:
            raise ValueError("GET carries no body")
        if len(self.body) > MAX_REQUEST_BODY:
            raise ValueError(f"request body {len(self.body)} exceeds {MAX_REQUEST_BODY}")


@dataclass(frozen=True)
class LcspResponse:
    status: str
    reason: str | None = None
    body: bytes = b""

    def validate(self) -> None:
        if self.status not in ("OK", "ERROR"):
            raise ValueError(f"unsupported status {self.status!r}")
        if self.status == "ERROR":
            if not self.reason:
                raise ValueError("ERROR requires a non-empty reason")
            if len(self.reason) > MAX_REASON:
                raise ValueError("reason too long")
            if not _printable_ascii(self.reason):
                raise ValueError("reason must be printable ASCII")
            if self.body:
                raise ValueError("ERROR carries no body")
        if len(self.body) > MAX_RESPONSE_BODY:
            raise ValueError(f"response body {len(self.body)} exceeds {MAX_RESPONSE_BODY}")


def ok(body: bytes = b"") -> LcspResponse:
    return LcspResponse("OK", None, body)


def error(reason: str) -> LcspResponse:
    return LcspResponse("ERROR", reason)


def _printable_ascii(s: str) -> bool:
    return all(0x20 <= ord(c) <= 0x7E for c in s)


def _check_resource(resource: str) -> None:
    if not resource.startswith("/"):
        raise ValueError(f"resource must start with '/': {resource!r}")
    if not _printable_ascii(resource) or " " in resource:
        raise ValueError(f"resource must be printable ASCII without whitespace: {resource!r}")
    if len(resource) > MAX_RESOURCE:
        raise ValueError(f"resource exceeds {MAX_RESOURCE} bytes")


def encode(message: LcspRequest | LcspResponse) -> bytes:
    """Encode a valid message to its wire form. Encoding is injective."""
    message.validate()
    if isinstance(message, LcspRequest):
        if message.method == "GET":
            return b"GET " + message.resource.encode("ascii") + CRLF
        head = f"POST {message.resource} {len(message.body)}".encode("ascii")
        return head + CRLF + message.body
    if message.status == "OK":
        return b"OK " + str(len(message.body)).encode("ascii") + CRLF + message.body
    return b"ERROR " + message.reason.encode("ascii") + CRLF


def _parse_length(token: bytes, position: int) -> int:
    if not token.isdigit():
        raise MalformedFrame(position, f"bad length token {token!r}")
    if len(token) > 1 and token[0:1] == b"0":
        raise MalformedFrame(position, "length has leading zero")
    return int(token)


def _split_line(data: bytes) -> tuple[bytes, int]:
    """Return (line without CRLF, bytes consumed incl. CRLF)."""
    idx = data.find(CRLF)
    if idx < 0:
        # A lone CR at the very end may still become CRLF.
        if len(data) > MAX_LINE:
            raise MalformedFrame(MAX_LINE, "no line terminator within limit")
        raise NeedMoreData()
    if idx > MAX_LINE:
        raise MalformedFrame(MAX_LINE, "first line too long")
    return data[:idx], idx + 2


def decode(data: bytes, role: str) -> tuple[LcspRequest | LcspResponse, int]:
    """Decode one frame from the start of ``data``.

    ``role`` is "server" (expect requests) or "client" (expect responses).
    Returns the message and the number of bytes consumed; trailing bytes
    are untouched. Raises :class:`NeedMoreData` on a strict prefix,
    :class:`MalformedFrame` on grammar violations and :class:`FrameTooLarge`
    when a declared body length exceeds the limit.
    """
    if role not in ("client", "server"):
        raise ValueError(f"role must be 'client' or 'server', not {role!r}")
    if not isinstance(data, (bytes, bytearray, memoryview)):
        raise TypeError("decode expects bytes")
    data = bytes(data)
    line, consumed = _split_line(data)
    try:
        text = line.decode("ascii")
    except UnicodeDecodeError as exc:
        raise MalformedFrame(exc.start, "non-ASCII byte in frame line") from None
    if any(ord(c) < 0x20 or ord(c) > 0x7E for c in text):
        raise MalformedFrame(0, "control byte in frame line")

    if role == "server":
        return _decode_request(text, data, consumed)
    return _decode_response(text, data, consumed)


def _decode_request(text: str, data: bytes, consumed: int) -> tuple[LcspRequest, int]:
    parts = text.split(" ")
    if parts[0] == "GET":
        if len(parts) != 2:
            raise MalformedFrame(0, "GET line must be 'GET <resource>'")
        req = LcspRequest("GET", parts[1])
        _validate_decoded(req)
        return req, consumed
    if parts[0] == "POST":
        if len(parts) != 3:
            raise MalformedFrame(0, "POST line must be 'POST <resource> <len>'")
        length = _parse_length(parts[2].encode("ascii"), 0)
        if length > MAX_REQUEST_BODY:
            raise FrameTooLarge(f"request body {length} exceeds {MAX_REQUEST_BODY}")
        if len(data) - consumed < length:
            raise NeedMoreData()
        body = data[consumed:consumed + length]
        req = LcspRequest("POST", parts[1], body)
        _validate_decoded(req)
        return req, consumed + length
    raise MalformedFrame(0, f"unknown method {parts[0]!r}")


def _decode_response(text: str, data: bytes, consumed: int) -> tuple[LcspResponse, int]:
    parts = text.split(" ")
    if parts[0] == "OK":
        if len(parts) != 2:
            raise MalformedFrame(0, "OK line must be 'OK <len>'")
        length = _parse_length(parts[1].encode("ascii"), 0)
        if length > MAX_RESPONSE_BODY:
            raise FrameTooLarge(f"response body {length} exceeds {MAX_RESPONSE_BODY}")
        if len(data) - consumed < length:
            raise NeedMoreData()
        resp = LcspResponse("OK", None, data[consumed:consumed + length])
        _validate_decoded(resp)
        return resp, consumed + length
    if parts[0] == "ERROR":
        reason = text[6:]
        if not reason:
            raise MalformedFrame(0, "ERROR requires a reason")
        resp = LcspResponse("ERROR", reason)
        _validate_decoded(resp)
        return resp, consumed
    raise MalformedFrame(0, f"unknown status {parts[0]!r}")


def _validate_decoded(message) -> None:
    try:
        message.validate()
    except ValueError as exc:
        raise MalformedFrame(0, str(exc)) from None


class SerialChannel:
    """In-memory serial link between one client and one server endpoint.

    Bytes written by the client land in the server's input buffer and
    vice versa. ``pump`` gives the server side a chance to consume its
    buffer and reply; the in-process simulation services requests
    synchronously, so a stop-and-wait call either completes during the
    pump or times out.
    """

    def __init__(self):
        self.to_server = bytearray()
        self.to_client = bytearray()
        self.closed = False
        self.server_handler = None
        # Fault-injection knob: swallow this many responses (client then
        # times out and resynchronizes).
        self.drop_responses = 0

    def close(self) -> None:
        self.closed = True

    def client_send(self, payload: bytes) -> None:
        if self.closed:
            raise ChannelClosed("channel is closed")
        self.to_server.extend(payload)

    def pump(self) -> None:
        """Let the server consume pending requests and emit responses."""
        if self.closed or self.server_handler is None:
            return
        while True:
            try:
                request, used = decode(bytes(self.to_server), "server")
            except NeedMoreData:
                return
            except LcspError:
                # A server facing garbage drops the buffer; the client
                # will time out and resync.
                self.to_server.clear()
                return
            del self.to_server[:used]
            response = self.server_handler(request)
            wire = encode(response)
            if self.drop_responses > 0:
                self.drop_responses -= 1
                continue
            self.to_client.extend(wire)


@dataclass
class LcspClient:
    """Stop-and-wait client: one outstanding request per channel.

    Fault handling favors liveness over retroactive integrity: a torn or
    swallowed response surfaces as :class:`RequestTimeout` and the link
    stays usable, but the mangled exchange itself is not recovered.
    """

    channel: SerialChannel
    _rxbuf: bytearray = field(default_factory=bytearray)

    def call(self, request: LcspRequest, timeout_pumps: int = 1) -> LcspResponse:
        """Send one request and wait for the response.

        ``timeout_pumps`` bounds how many service rounds the client waits
        before declaring a timeout; the in-process link completes within
        one round unless a fault swallows the response.
        """
        if self.channel.closed:
            raise ChannelClosed("channel is closed")
        # Stop-and-wait: bytes buffered from before this request can only
        # be remnants of a mangled earlier exchange.
        self._rxbuf.clear()
        self.channel.client_send(encode(request))
        for _ in range(timeout_pumps):
            self.channel.pump()
            self._rxbuf.extend(self.channel.to_client)
            self.channel.to_client.clear()
            while self._rxbuf:
                try:
                    response, used = decode(bytes(self._rxbuf), "client")
                except NeedMoreData:
                    break
                except LcspError:
                    if not self._skip_boundary():
                        break
                    continue
                del self._rxbuf[:used]
                return response
        raise RequestTimeout(f"no response to {request.method} {request.resource}")

    def _skip_boundary(self) -> bool:
        """Drop garbage through the next line boundary; False if none left."""
        idx = self._rxbuf.find(CRLF)
        if idx < 0:
            self._rxbuf.clear()
            return False
        del self._rxbuf[:idx + 2]
        return True
