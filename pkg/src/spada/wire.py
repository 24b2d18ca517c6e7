"""Byte-level encodings shared by every socket and file in the system.

Three encodings live here so they cannot drift apart:

* canonical JSON text (sorted keys, no whitespace, raw UTF-8),
* length-prefixed frames for the RPC sockets,
* CRC-trailed records for append-only log files.

Line-delimited JSON (one object per ``\\n``-terminated line) is used by
the notification socket and the task API; helpers for it live here too.
"""

from __future__ import annotations

import json
import struct
import zlib
from typing import Any, BinaryIO, Iterator

HEADER = struct.Struct(">I")
HEADER_SIZE = HEADER.size
# Generous ceiling: the largest legal frame is a commit batch carrying a
# few payload bodies, each capped at 8 MiB by the model.
MAX_FRAME_SIZE = 64 * 1024 * 1024
MAX_LINE_SIZE = 32 * 1024 * 1024


class WireError(Exception):
    """Malformed bytes on a socket or in a log file."""


def canonical_json(value: Any) -> str:
    """Encode ``value`` so that equal trees always yield equal text."""
    return json.dumps(
        value, sort_keys=True, separators=(",", ":"), ensure_ascii=False
    )


def canonical_json_bytes(value: Any) -> bytes:
    return canonical_json(value).encode("utf-8")


def decode_json(raw: bytes) -> Any:
    try:
        return json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WireError(f"undecodable JSON: {exc}") from exc


# ---------------------------------------------------------------------------
# Length-prefixed frames (RPC sockets).

def encode_frame(value: Any) -> bytes:
    body = canonical_json_bytes(value)
    if len(body) > MAX_FRAME_SIZE:
        raise WireError(f"frame of {len(body)} bytes exceeds {MAX_FRAME_SIZE}")
    return HEADER.pack(len(body)) + body


def read_exact(stream: BinaryIO, count: int) -> bytes:
    """Read exactly ``count`` bytes or raise EOFError on a clean close."""
    chunks = []
    remaining = count
    while remaining:
        chunk = stream.read(remaining)
        if not chunk:
            raise EOFError(f"stream closed with {remaining} bytes outstanding")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(stream: BinaryIO) -> Any:
    """Read one frame; EOFError at a frame boundary means a clean close."""
    header = stream.read(HEADER_SIZE)
    if not header:
        raise EOFError("stream closed")
    if len(header) < HEADER_SIZE:
        header += read_exact(stream, HEADER_SIZE - len(header))
    (length,) = HEADER.unpack(header)
    if length > MAX_FRAME_SIZE:
        raise WireError(f"declared frame of {length} bytes exceeds {MAX_FRAME_SIZE}")
    return decode_json(read_exact(stream, length))


def write_frame(stream: BinaryIO, value: Any) -> None:
    stream.write(encode_frame(value))
    stream.flush()


# ---------------------------------------------------------------------------
# Line-delimited JSON (notification socket, task API).

def encode_line(value: Any) -> bytes:
    body = canonical_json_bytes(value)
    if len(body) > MAX_LINE_SIZE:
        raise WireError(f"line of {len(body)} bytes exceeds {MAX_LINE_SIZE}")
    return body + b"\n"


def read_line_value(stream: BinaryIO) -> Any:
    line = stream.readline(MAX_LINE_SIZE + 1)
    if not line:
        raise EOFError("stream closed")
    if len(line) > MAX_LINE_SIZE:
        raise WireError("line exceeds size bound")
    return decode_json(line.rstrip(b"\n"))


# ---------------------------------------------------------------------------
# Append-log records: length header, canonical JSON body, CRC32 trailer.
# The trailer lets recovery distinguish a torn tail write from good data.

def pack_record(value: Any) -> bytes:
    body = canonical_json_bytes(value)
    return HEADER.pack(len(body)) + body + HEADER.pack(zlib.crc32(body))


def iter_records(stream: BinaryIO) -> Iterator[tuple[Any, int]]:
    """Yield ``(value, end_offset)`` for each intact record.

    Stops silently at the first truncated or corrupt record so callers
    can truncate the file back to the last good offset and carry on.
    """
    offset = stream.tell()
    while True:
        header = stream.read(HEADER_SIZE)
        if len(header) < HEADER_SIZE:
            return
        (length,) = HEADER.unpack(header)
        if length > MAX_FRAME_SIZE:
            return
        body = stream.read(length)
        trailer = stream.read(HEADER_SIZE)
        if len(body) < length or len(trailer) < HEADER_SIZE:
            return
        (crc,) = HEADER.unpack(trailer)
        if crc != zlib.crc32(body):
            return
        try:
            value = decode_json(body)
        except WireError:
            return
        offset += HEADER_SIZE + length + HEADER_SIZE
        yield value, offset
