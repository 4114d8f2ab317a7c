"""Modbus/TCP codec, register-file executor, and TCP server/client.

Supports function codes 0x01 (read coils), 0x03 (read holding registers),
0x04 (read input registers), 0x05 (write single coil) and 0x06 (write single
register). Framing is MBAP over TCP, big-endian throughout.
"""

from __future__ import annotations

import socket
import socketserver
import struct
import threading
from dataclasses import dataclass, field

READ_COILS = 0x01
READ_HOLDING = 0x03
READ_INPUT = 0x04
WRITE_COIL = 0x05
WRITE_REGISTER = 0x06

SUPPORTED_FUNCTIONS = (READ_COILS, READ_HOLDING, READ_INPUT, WRITE_COIL, WRITE_REGISTER)

EXC_ILLEGAL_FUNCTION = 0x01
EXC_ILLEGAL_ADDRESS = 0x02
EXC_ILLEGAL_VALUE = 0x03

COIL_ON = 0xFF00
COIL_OFF = 0x0000

MAX_READ_COUNT = 125


class EncodingError(ValueError):
    """Frame cannot be serialized to valid Modbus/TCP bytes."""


class NeedMoreBytes(Exception):
    """The buffer does not yet hold a complete frame."""


class ModbusExceptionResponse(Exception):
    """Server answered with a Modbus exception PDU."""

    def __init__(self, function_code: int, exception_code: int):
        super().__init__(
            f"modbus exception: function 0x{function_code:02x}, code {exception_code:#04x}"
        )
        self.function_code = function_code
        self.exception_code = exception_code


@dataclass(frozen=True)
class Pdu:
    function_code: int
    payload: bytes

    def is_exception(self) -> bool:
        return bool(self.function_code & 0x80)


@dataclass(frozen=True)
class MbapFrame:
    transaction_id: int
    unit_id: int
    pdu: Pdu
    protocol_id: int = 0


# ── Codec ──────────────────────────────────────────────────────────────────


def encode_frame(frame: MbapFrame) -> bytes:
    if frame.protocol_id != 0:
        raise EncodingError("protocol_id must be 0")
    if not 0 <= frame.transaction_id <= 0xFFFF:
        raise EncodingError("transaction_id out of range")
    if not 0 <= frame.unit_id <= 0xFF:
        raise EncodingError("unit_id out of range")
    body = bytes([frame.pdu.function_code]) + frame.pdu.payload
    length = 1 + len(body)  # unit id + pdu
    if length > 0xFFFF:
        raise EncodingError("pdu too large for MBAP framing")
    return struct.pack(">HHHB", frame.transaction_id, 0, length, frame.unit_id) + body


def decode_frame(data: bytes) -> tuple[MbapFrame, int]:
    """Decode one frame from ``data``; returns (frame, bytes consumed)."""
    if len(data) < 8:
        raise NeedMoreBytes
    txn, proto, length, unit = struct.unpack(">HHHB", data[:7])
    if length < 2:
        raise EncodingError("MBAP length must cover unit id and function code")
    total = 6 + length
    if len(data) < total:
        raise NeedMoreBytes
    fc = data[7]
    payload = data[8:total]
    return MbapFrame(txn, unit, Pdu(fc, bytes(payload)), protocol_id=proto), total


# ── Request builders / response parsers ────────────────────────────────────


def read_request(function_code: int, address: int, count: int) -> Pdu:
    return Pdu(function_code, struct.pack(">HH", address, count))


def write_coil_request(address: int, on: bool) -> Pdu:
    return Pdu(WRITE_COIL, struct.pack(">HH", address, COIL_ON if on else COIL_OFF))


def write_register_request(address: int, value: int) -> Pdu:
    return Pdu(WRITE_REGISTER, struct.pack(">HH", address, value))


def parse_read_registers_response(pdu: Pdu) -> list[int]:
    if pdu.is_exception():
        raise ModbusExceptionResponse(pdu.function_code & 0x7F, pdu.payload[0])
    count = pdu.payload[0] // 2
    return list(struct.unpack(f">{count}H", pdu.payload[1 : 1 + 2 * count]))


def parse_read_coils_response(pdu: Pdu, count: int) -> list[bool]:
    if pdu.is_exception():
        raise ModbusExceptionResponse(pdu.function_code & 0x7F, pdu.payload[0])
    bits = []
    for i in range(count):
        byte = pdu.payload[1 + i // 8]
        bits.append(bool(byte >> (i % 8) & 1))
    return bits


# ── Register file and executor ─────────────────────────────────────────────


@dataclass
class RegisterFile:
    """Mapped addresses of one device; unmapped reads are illegal, never 0."""

    input_registers: dict[int, int] = field(default_factory=dict)
    holding_registers: dict[int, int] = field(default_factory=dict)
    coils: dict[int, bool] = field(default_factory=dict)
    discrete_inputs: dict[int, bool] = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def set_input(self, address: int, value: int) -> None:
        with self.lock:
            self.input_registers[address] = max(0, min(0xFFFF, int(value)))

    def set_holding(self, address: int, value: int) -> None:
        with self.lock:
            self.holding_registers[address] = max(0, min(0xFFFF, int(value)))

    def set_coil(self, address: int, value: bool) -> None:
        with self.lock:
            self.coils[address] = bool(value)

    def get_coil(self, address: int) -> bool:
        with self.lock:
            return self.coils[address]

    def get_input(self, address: int) -> int:
        with self.lock:
            return self.input_registers[address]


def _exception(fc: int, code: int) -> Pdu:
    return Pdu(fc | 0x80, bytes([code]))


def execute(rf: RegisterFile, pdu: Pdu) -> Pdu:
    """Apply a request PDU to ``rf`` and build the response PDU."""
    fc = pdu.function_code
    if fc not in SUPPORTED_FUNCTIONS:
        return _exception(fc, EXC_ILLEGAL_FUNCTION)

    if fc in (READ_COILS, READ_HOLDING, READ_INPUT):
        if len(pdu.payload) != 4:
            return _exception(fc, EXC_ILLEGAL_VALUE)
        address, count = struct.unpack(">HH", pdu.payload)
        if count == 0 or count > MAX_READ_COUNT:
            return _exception(fc, EXC_ILLEGAL_VALUE)
        addresses = range(address, address + count)
        with rf.lock:
            if fc == READ_COILS:
                if any(a not in rf.coils for a in addresses):
                    return _exception(fc, EXC_ILLEGAL_ADDRESS)
                bits = [rf.coils[a] for a in addresses]
                nbytes = (count + 7) // 8
                packed = bytearray(nbytes)
                for i, bit in enumerate(bits):
                    if bit:
                        packed[i // 8] |= 1 << (i % 8)
                return Pdu(fc, bytes([nbytes]) + bytes(packed))
            table = rf.holding_registers if fc == READ_HOLDING else rf.input_registers
            if any(a not in table for a in addresses):
                return _exception(fc, EXC_ILLEGAL_ADDRESS)
            values = [table[a] for a in addresses]
        return Pdu(fc, bytes([2 * count]) + struct.pack(f">{count}H", *values))

    if len(pdu.payload) != 4:
        return _exception(fc, EXC_ILLEGAL_VALUE)
    address, value = struct.unpack(">HH", pdu.payload)
    with rf.lock:
        if fc == WRITE_COIL:
            if value not in (COIL_ON, COIL_OFF):
                return _exception(fc, EXC_ILLEGAL_VALUE)
            if address not in rf.coils:
                return _exception(fc, EXC_ILLEGAL_ADDRESS)
            rf.coils[address] = value == COIL_ON
        else:  # WRITE_REGISTER
            if address not in rf.holding_registers:
                return _exception(fc, EXC_ILLEGAL_ADDRESS)
            rf.holding_registers[address] = value
    return Pdu(fc, pdu.payload)  # echo per spec


def serve_frame_bytes(rf: RegisterFile, data: bytes) -> bytes:
    """Decode a request frame, execute it, and encode the response.

    Shared by the TCP server and the in-process fabric endpoint so both paths
    exercise the real wire format.
    """
    frame, _ = decode_frame(data)
    response = execute(rf, frame.pdu)
    return encode_frame(
        MbapFrame(frame.transaction_id, frame.unit_id, response)
    )


# ── TCP server / client ────────────────────────────────────────────────────


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        buf = b""
        while True:
            try:
                chunk = self.request.recv(4096)
            except OSError:
                return
            if not chunk:
                return
            buf += chunk
            while True:
                try:
                    frame, consumed = decode_frame(buf)
                except NeedMoreBytes:
                    break
                buf = buf[consumed:]
                response = execute(self.server.register_file, frame.pdu)
                out = encode_frame(
                    MbapFrame(frame.transaction_id, frame.unit_id, response)
                )
                try:
                    self.request.sendall(out)
                except OSError:
                    return


class ModbusTcpServer(socketserver.ThreadingTCPServer):
    """One server per device; requests on a connection are answered in order."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, register_file: RegisterFile, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _Handler)
        self.register_file = register_file

    @property
    def port(self) -> int:
        return self.server_address[1]

    def start(self) -> None:
        threading.Thread(target=self.serve_forever, daemon=True).start()


class ModbusTcpClient:
    def __init__(self, host: str, port: int, unit_id: int = 1, timeout: float = 5.0):
        self.unit_id = unit_id
        self._txn = 0
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._buf = b""

    def close(self) -> None:
        self._sock.close()

    def request(self, pdu: Pdu) -> Pdu:
        self._txn = (self._txn + 1) & 0xFFFF
        self._sock.sendall(encode_frame(MbapFrame(self._txn, self.unit_id, pdu)))
        while True:
            try:
                frame, consumed = decode_frame(self._buf)
            except NeedMoreBytes:
                chunk = self._sock.recv(4096)
                if not chunk:
                    raise ConnectionError("modbus server closed the connection")
                self._buf += chunk
                continue
            self._buf = self._buf[consumed:]
            return frame.pdu

    def read_input_registers(self, address: int, count: int) -> list[int]:
        return parse_read_registers_response(
            self.request(read_request(READ_INPUT, address, count))
        )

    def read_coils(self, address: int, count: int) -> list[bool]:
        return parse_read_coils_response(
            self.request(read_request(READ_COILS, address, count)), count
        )

    def write_single_coil(self, address: int, on: bool) -> None:
        resp = self.request(write_coil_request(address, on))
        if resp.is_exception():
            raise ModbusExceptionResponse(resp.function_code & 0x7F, resp.payload[0])
