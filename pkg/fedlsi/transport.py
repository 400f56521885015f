"""Wire format, channels and communication accounting.

Frame layout (little-endian)::

    magic "FLSI" | version u8 | type u8 | payload length u64 | payload | crc32 u32

The CRC covers the payload only. Parameter payloads are a ParamBlob::

    part u8 | client u16 | round u32 | count u32 | count x float32
"""

from __future__ import annotations

import asyncio
import csv
import logging
import struct
import zlib
from collections.abc import AsyncIterator
from contextlib import asynccontextmanager
from dataclasses import dataclass, field
from enum import IntEnum, StrEnum
from pathlib import Path
from typing import Protocol

import aiohttp
import numpy as np
from aiohttp import web

from .const import (
    FRAME_MAGIC,
    FRAME_VERSION,
    MSG_ACK,
    MSG_GENERATOR_DELIVERY,
    MSG_PARAM_BROADCAST,
    MSG_PARAM_UPLOAD,
    SERVER_ID,
)
from .errors import (
    CrcMismatchError,
    PolicyViolationError,
    ProtocolError,
    TensorError,
    TransportError,
    TruncatedFrameError,
)
from .layers import Module, flatten_state, load_state

_LOGGER = logging.getLogger(__name__)

_HEADER = struct.Struct("<4sBBQ")
_CRC = struct.Struct("<I")
_BLOB_HEADER = struct.Struct("<BHII")
_ACK = struct.Struct("<HI")

FRAME_OVERHEAD = _HEADER.size + _CRC.size
BLOB_OVERHEAD = FRAME_OVERHEAD + _BLOB_HEADER.size

_CLOSED_TYPES = (
    aiohttp.WSMsgType.CLOSE,
    aiohttp.WSMsgType.CLOSING,
    aiohttp.WSMsgType.CLOSED,
)


class MessageType(IntEnum):
    """Frame message types."""

    PARAM_UPLOAD = MSG_PARAM_UPLOAD
    PARAM_BROADCAST = MSG_PARAM_BROADCAST
    GENERATOR_DELIVERY = MSG_GENERATOR_DELIVERY
    ACK = MSG_ACK


class ModelPart(IntEnum):
    """What a ParamBlob carries; values from 0x10 up are auxiliary payloads."""

    ENCODER = 0x01
    HEAD = 0x02
    GENERATOR = 0x03
    LABELS = 0x10
    IMPORTANCE_ENCODER = 0x11
    IMPORTANCE_HEAD = 0x12

    @property
    def is_model(self) -> bool:
        """Return whether the part holds model parameters."""
        return self < ModelPart.LABELS


class Direction(StrEnum):
    """Transfer direction."""

    UPLOAD = "client_to_server"
    DOWNLOAD = "server_to_client"


class TransportKind(StrEnum):
    """Channel implementation."""

    MEMORY = "memory"
    SOCKET = "socket"


@dataclass(frozen=True)
class Frame:
    """One framed message."""

    msg_type: MessageType
    payload: bytes

    def encode(self) -> bytes:
        """Serialize with header and CRC."""
        return (
            _HEADER.pack(FRAME_MAGIC, FRAME_VERSION, self.msg_type, len(self.payload))
            + self.payload
            + _CRC.pack(zlib.crc32(self.payload))
        )

    @classmethod
    def decode(cls, data: bytes) -> Frame:
        """Parse one complete frame, verifying magic, version, length and CRC."""
        if len(data) < _HEADER.size:
            raise TruncatedFrameError(f"frame header needs {_HEADER.size} bytes")
        magic, version, msg_type, length = _HEADER.unpack_from(data)
        if magic != FRAME_MAGIC:
            raise ProtocolError(f"bad magic {magic!r}")
        if version != FRAME_VERSION:
            raise ProtocolError(f"unsupported version {version}")
        try:
            kind = MessageType(msg_type)
        except ValueError as err:
            raise ProtocolError(f"unknown message type {msg_type:#04x}") from err
        end = _HEADER.size + length
        if len(data) < end + _CRC.size:
            raise TruncatedFrameError(
                f"frame declares {length} payload bytes, "
                f"got {len(data) - FRAME_OVERHEAD}"
            )
        if len(data) > end + _CRC.size:
            raise ProtocolError(f"{len(data) - end - _CRC.size} trailing bytes")
        payload = bytes(data[_HEADER.size : end])
        (crc,) = _CRC.unpack_from(data, end)
        if crc != zlib.crc32(payload):
            raise CrcMismatchError(f"crc {crc:#010x} does not match payload")
        return cls(kind, payload)


@dataclass(frozen=True, eq=False)
class ParamBlob:
    """Flattened float32 values of one model part."""

    part: ModelPart
    client_id: int
    round_no: int
    values: np.ndarray

    def __post_init__(self) -> None:
        """Validate header ranges and freeze the values as float32."""
        if not 0 <= self.client_id <= SERVER_ID:
            raise TransportError(f"client id {self.client_id} out of range")
        if self.round_no < 0:
            raise TransportError("round must be non-negative")
        values = np.array(self.values, dtype="<f4").reshape(-1)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def count(self) -> int:
        """Return the number of values."""
        return int(self.values.size)

    def to_bytes(self) -> bytes:
        """Serialize header and values."""
        header = _BLOB_HEADER.pack(self.part, self.client_id, self.round_no, self.count)
        return header + self.values.tobytes()

    @classmethod
    def from_bytes(cls, payload: bytes) -> ParamBlob:
        """Parse a payload produced by ``to_bytes``."""
        if len(payload) < _BLOB_HEADER.size:
            raise TruncatedFrameError("parameter payload shorter than its header")
        part, client_id, round_no, count = _BLOB_HEADER.unpack_from(payload)
        if len(payload) != _BLOB_HEADER.size + 4 * count:
            raise ProtocolError(
                f"payload holds {len(payload) - _BLOB_HEADER.size} value bytes, "
                f"header declares {count} values"
            )
        try:
            kind = ModelPart(part)
        except ValueError as err:
            raise ProtocolError(f"unknown model part {part:#04x}") from err
        values = np.frombuffer(payload, dtype="<f4", offset=_BLOB_HEADER.size)
        return cls(kind, client_id, round_no, values)

    def to_frame(self, msg_type: MessageType) -> Frame:
        """Wrap in a frame of ``msg_type``."""
        return Frame(msg_type, self.to_bytes())

    @classmethod
    def from_frame(cls, frame: Frame) -> ParamBlob:
        """Extract the blob of a parameter frame."""
        if frame.msg_type is MessageType.ACK:
            raise ProtocolError("ack frames carry no parameters")
        return cls.from_bytes(frame.payload)

    @property
    def wire_bytes(self) -> int:
        """Return the size of the framed message."""
        return 4 * self.count + BLOB_OVERHEAD


def encode_values(
    values: np.ndarray, part: ModelPart, client_id: int, round_no: int
) -> ParamBlob:
    """Wrap a flat vector, rejecting empty and non-finite input."""
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    if flat.size == 0:
        raise TransportError(f"refusing to encode an empty {part.name.lower()}")
    if not np.all(np.isfinite(flat)):
        raise TransportError(f"non-finite value in {part.name.lower()}")
    return ParamBlob(part, client_id, round_no, flat)


def encode_params(
    module: Module, part: ModelPart, client_id: int, round_no: int
) -> ParamBlob:
    """Serialize every state array of ``module`` in registration order."""
    return encode_values(flatten_state(module), part, client_id, round_no)


def decode_params(blob: ParamBlob, module: Module) -> None:
    """Load a blob's values into ``module`` in place."""
    try:
        load_state(module, blob.values.astype(np.float64))
    except TensorError as err:
        raise ProtocolError(f"{blob.part.name.lower()} blob: {err}") from err


def encode_ack(client_id: int, round_no: int) -> Frame:
    """Build an ack frame."""
    return Frame(MessageType.ACK, _ACK.pack(client_id, round_no))


def decode_ack(frame: Frame) -> tuple[int, int]:
    """Return (client id, round) of an ack frame."""
    if frame.msg_type is not MessageType.ACK or len(frame.payload) != _ACK.size:
        raise ProtocolError("malformed ack")
    client_id, round_no = _ACK.unpack(frame.payload)
    return client_id, round_no


def check_policy(msg_type: MessageType, blob: ParamBlob) -> None:
    """Reject transfers the protocol forbids.

    Before round 1 only heads (and label targets) travel upstream and only the
    generator travels downstream.
    """
    if msg_type is MessageType.PARAM_UPLOAD and blob.round_no == 0:
        if blob.part not in (ModelPart.HEAD, ModelPart.LABELS):
            raise PolicyViolationError(
                f"client {blob.client_id} uploaded {blob.part.name.lower()} "
                "before round 1"
            )
    delivery = msg_type is MessageType.GENERATOR_DELIVERY
    if delivery and blob.part is not ModelPart.GENERATOR:
        raise PolicyViolationError("generator delivery must carry the generator")
    if msg_type is MessageType.PARAM_BROADCAST and blob.round_no == 0:
        raise PolicyViolationError("model broadcast before round 1")


class Channel(Protocol):
    """Ordered frame channel; ``recv`` returns None once closed and drained."""

    async def send(self, frame: Frame) -> None:
        """Send one frame."""

    async def send_raw(self, data: bytes) -> None:
        """Send bytes as-is."""

    async def recv(self) -> Frame | None:
        """Receive the next frame, or None after close."""

    async def close(self) -> None:
        """Signal the end of the stream."""


class MemoryChannel:
    """In-process channel passing encoded frames through an asyncio queue."""

    def __init__(self, name: str = "") -> None:
        """Initialize an open, empty channel."""
        self.name = name
        self._queue: asyncio.Queue[bytes | None] = asyncio.Queue()
        self._closed = False

    async def send(self, frame: Frame) -> None:
        """Encode and enqueue a frame."""
        await self.send_raw(frame.encode())

    async def send_raw(self, data: bytes) -> None:
        """Enqueue bytes without encoding."""
        if self._closed:
            raise TransportError(f"channel {self.name} is closed")
        await self._queue.put(bytes(data))

    async def recv(self) -> Frame | None:
        """Decode the next frame, or return None when closed."""
        data = await self._queue.get()
        if data is None:
            await self._queue.put(None)
            return None
        return Frame.decode(data)

    async def close(self) -> None:
        """Close the channel; pending frames stay readable."""
        if not self._closed:
            self._closed = True
            await self._queue.put(None)


class LoopbackHub:
    """Websocket server on 127.0.0.1 holding one mailbox per channel name."""

    def __init__(self, port: int = 0) -> None:
        """Initialize without binding."""
        self._port = port
        self._mailboxes: dict[str, asyncio.Queue[bytes | None]] = {}
        self._runner: web.AppRunner | None = None

    @property
    def port(self) -> int:
        """Return the bound port."""
        if self._runner is None:
            raise TransportError("hub is not running")
        return int(self._runner.addresses[0][1])

    def _mailbox(self, name: str) -> asyncio.Queue[bytes | None]:
        return self._mailboxes.setdefault(name, asyncio.Queue())

    async def start(self) -> None:
        """Bind and serve."""
        app = web.Application()
        app.router.add_get("/send/{name}", self._handle_send)
        app.router.add_get("/recv/{name}", self._handle_recv)
        self._runner = web.AppRunner(app)
        await self._runner.setup()
        site = web.TCPSite(self._runner, "127.0.0.1", self._port)
        await site.start()
        _LOGGER.debug("Loopback hub listening on port %d", self.port)

    def release(self) -> None:
        """End every mailbox so blocked receivers finish."""
        for mailbox in self._mailboxes.values():
            mailbox.put_nowait(None)

    async def stop(self) -> None:
        """Shut the server down."""
        if self._runner is not None:
            await self._runner.cleanup()
            self._runner = None

    async def _handle_send(self, request: web.Request) -> web.WebSocketResponse:
        ws = web.WebSocketResponse()
        await ws.prepare(request)
        mailbox = self._mailbox(request.match_info["name"])
        async for msg in ws:
            if msg.type is aiohttp.WSMsgType.BINARY:
                await mailbox.put(msg.data)
            elif msg.type is aiohttp.WSMsgType.TEXT and msg.data == "close":
                await mailbox.put(None)
        return ws

    async def _handle_recv(self, request: web.Request) -> web.WebSocketResponse:
        ws = web.WebSocketResponse()
        await ws.prepare(request)
        mailbox = self._mailbox(request.match_info["name"])
        while True:
            data = await mailbox.get()
            if data is None:
                await mailbox.put(None)
                break
            await ws.send_bytes(data)
        await ws.close()
        return ws


class WebSocketChannel:
    """Channel whose frames travel through a LoopbackHub mailbox."""

    def __init__(
        self, session: aiohttp.ClientSession, base_url: str, name: str
    ) -> None:
        """Initialize; connections open lazily."""
        self.name = name
        self._session = session
        self._base_url = base_url
        self._send_ws: aiohttp.ClientWebSocketResponse | None = None
        self._recv_ws: aiohttp.ClientWebSocketResponse | None = None
        self._lock = asyncio.Lock()
        self._closed = False

    async def _sender(self) -> aiohttp.ClientWebSocketResponse:
        async with self._lock:
            if self._send_ws is None:
                self._send_ws = await self._session.ws_connect(
                    f"{self._base_url}/send/{self.name}"
                )
            return self._send_ws

    async def send(self, frame: Frame) -> None:
        """Encode and send a frame."""
        await self.send_raw(frame.encode())

    async def send_raw(self, data: bytes) -> None:
        """Send bytes without encoding."""
        if self._closed:
            raise TransportError(f"channel {self.name} is closed")
        try:
            ws = await self._sender()
            await ws.send_bytes(bytes(data))
        except aiohttp.ClientError as err:
            raise TransportError(f"channel {self.name}: {err}") from err

    async def recv(self) -> Frame | None:
        """Receive the next frame, or None when the hub closes the stream."""
        try:
            if self._recv_ws is None:
                self._recv_ws = await self._session.ws_connect(
                    f"{self._base_url}/recv/{self.name}"
                )
            msg = await self._recv_ws.receive()
        except aiohttp.ClientError as err:
            raise TransportError(f"channel {self.name}: {err}") from err
        if msg.type is aiohttp.WSMsgType.BINARY:
            return Frame.decode(msg.data)
        if msg.type in _CLOSED_TYPES:
            return None
        raise ProtocolError(f"unexpected websocket message {msg.type!r}")

    async def close(self) -> None:
        """Signal end of stream to the receiver."""
        if self._closed:
            return
        ws = await self._sender()
        await ws.send_str("close")
        self._closed = True

    async def shutdown(self) -> None:
        """Close the sending connection and drain the receiving one."""
        if self._send_ws is not None and not self._send_ws.closed:
            await self._send_ws.close()
        ws = self._recv_ws
        while ws is not None and not ws.closed:
            msg = await ws.receive()
            if msg.type in _CLOSED_TYPES or msg.type is aiohttp.WSMsgType.ERROR:
                break


class ChannelFactory:
    """Hands out one named channel per endpoint."""

    def __init__(
        self,
        kind: TransportKind,
        session: aiohttp.ClientSession | None = None,
        base_url: str = "",
    ) -> None:
        """Initialize for the given transport."""
        self.kind = kind
        self._session = session
        self._base_url = base_url
        self._channels: dict[str, MemoryChannel | WebSocketChannel] = {}

    def channel(self, name: str) -> MemoryChannel | WebSocketChannel:
        """Return the channel called ``name``, creating it on first use."""
        if name not in self._channels:
            if self.kind is TransportKind.MEMORY:
                self._channels[name] = MemoryChannel(name)
            else:
                assert self._session is not None
                self._channels[name] = WebSocketChannel(
                    self._session, self._base_url, name
                )
        return self._channels[name]

    async def shutdown(self) -> None:
        """Release socket resources."""
        for channel in self._channels.values():
            if isinstance(channel, WebSocketChannel):
                await channel.shutdown()


@asynccontextmanager
async def open_channels(
    kind: TransportKind | str, port: int = 0
) -> AsyncIterator[ChannelFactory]:
    """Yield a channel factory; the socket kind runs a loopback hub meanwhile."""
    kind = TransportKind(kind)
    if kind is TransportKind.MEMORY:
        yield ChannelFactory(kind)
        return
    hub = LoopbackHub(port)
    await hub.start()
    try:
        async with aiohttp.ClientSession() as session:
            factory = ChannelFactory(kind, session, f"http://127.0.0.1:{hub.port}")
            try:
                yield factory
            finally:
                hub.release()
                await factory.shutdown()
    finally:
        await hub.stop()


async def send_frame(channel: Channel, frame: Frame) -> None:
    """Send one frame."""
    await channel.send(frame)


async def recv_frame(channel: Channel) -> Frame | None:
    """Receive one frame, or None once the channel is closed."""
    return await channel.recv()


@dataclass(frozen=True)
class TransferRecord:
    """One accounted message."""

    round_no: int
    direction: Direction
    client_id: int
    part: ModelPart
    params: int
    aux_values: int
    bytes: int


@dataclass
class CommsLedger:
    """Every parameter transfer of a run.

    Model parameters and auxiliary values (labels, importance) are counted in
    separate columns.
    """

    records: list[TransferRecord] = field(default_factory=list)

    def total_params(self, direction: Direction | None = None) -> int:
        """Return model parameters moved, optionally in one direction."""
        return sum(
            r.params for r in self.records if direction in (None, r.direction)
        )

    def total_aux(self, direction: Direction | None = None) -> int:
        """Return auxiliary values moved, optionally in one direction."""
        return sum(
            r.aux_values for r in self.records if direction in (None, r.direction)
        )

    def total_bytes(self, direction: Direction | None = None) -> int:
        """Return framed bytes moved, optionally in one direction."""
        return sum(r.bytes for r in self.records if direction in (None, r.direction))

    def client_params(self, client_id: int) -> int:
        """Return model parameters moved to or from one client."""
        return sum(r.params for r in self.records if r.client_id == client_id)

    def cumulative_params(self) -> list[int]:
        """Return cumulative model parameters at the end of each round."""
        last = max((r.round_no for r in self.records), default=0)
        per_round = [0] * (last + 1)
        for record in self.records:
            per_round[record.round_no] += record.params
        return list(np.cumsum(per_round).tolist())

    def totals(self) -> dict[str, dict[str, int]]:
        """Return per-direction totals."""
        return {
            direction.value: {
                "params": self.total_params(direction),
                "aux_values": self.total_aux(direction),
                "bytes": self.total_bytes(direction),
            }
            for direction in Direction
        }

    def write_csv(self, path: Path | str) -> None:
        """Write one row per transfer."""
        with Path(path).open("w", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(
                [
                    "round",
                    "direction",
                    "client",
                    "part",
                    "params",
                    "aux_values",
                    "bytes",
                ]
            )
            for r in self.records:
                writer.writerow(
                    [
                        r.round_no,
                        r.direction.value,
                        r.client_id,
                        r.part.name.lower(),
                        r.params,
                        r.aux_values,
                        r.bytes,
                    ]
                )


def record_transfer(
    ledger: CommsLedger,
    round_no: int,
    direction: Direction,
    client_id: int,
    blob: ParamBlob,
) -> None:
    """Account one blob message."""
    model = blob.part.is_model
    ledger.records.append(
        TransferRecord(
            round_no,
            direction,
            client_id,
            blob.part,
            blob.count if model else 0,
            0 if model else blob.count,
            blob.wire_bytes,
        )
    )


_DIRECTIONS = {
    MessageType.PARAM_UPLOAD: Direction.UPLOAD,
    MessageType.PARAM_BROADCAST: Direction.DOWNLOAD,
    MessageType.GENERATOR_DELIVERY: Direction.DOWNLOAD,
}


async def send_blob(
    channel: Channel,
    msg_type: MessageType,
    blob: ParamBlob,
    ledger: CommsLedger | None = None,
    client_id: int | None = None,
) -> None:
    """Check the policy, send a blob and account it against ``client_id``."""
    check_policy(msg_type, blob)
    await send_frame(channel, blob.to_frame(msg_type))
    if ledger is not None:
        peer = blob.client_id if client_id is None else client_id
        record_transfer(ledger, blob.round_no, _DIRECTIONS[msg_type], peer, blob)
