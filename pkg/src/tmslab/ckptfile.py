"""Binary and text serialisation of policy checkpoints.

Binary layout, little-endian::

    8 bytes   magic b"TMSLAB1\\0"
    u32       format version
    u32       order n
    u32       V
    4 x i32   bos, eos, ans, pad ids (-1 when unset)
    u32       number of rows R
    R records of n x i32 context ids followed by V x f64 logits

Rows are written in sorted context order so equal policies give equal bytes.
Symbol strings are not stored; the reader supplies the vocabulary and the
stored special ids are checked against it.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .policy import Policy, Vocab

MAGIC = b"TMSLAB1\0"
VERSION = 1
_HEADER = struct.Struct("<8sIII4iI")


class CheckpointFormatError(ValueError):
    pass


def _specials(vocab: Vocab) -> tuple[int, int, int, int]:
    return tuple(-1 if s is None else s for s in (vocab.bos_id, vocab.eos_id, vocab.ans_id, vocab.pad_id))


def to_bytes(policy: Policy) -> bytes:
    rows = list(policy.items())
    parts = [_HEADER.pack(MAGIC, VERSION, policy.order, policy.V, *_specials(policy.vocab), len(rows))]
    ctx_fmt = struct.Struct(f"<{policy.order}i")
    for ctx, logits in rows:
        parts.append(ctx_fmt.pack(*ctx))
        parts.append(np.asarray(logits, dtype="<f8").tobytes())
    return b"".join(parts)


def from_bytes(data: bytes, vocab: Vocab) -> Policy:
    if len(data) < _HEADER.size:
        raise CheckpointFormatError("truncated checkpoint header")
    magic, version, order, V, bos, eos, ans, pad, n_rows = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointFormatError("bad magic bytes")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    if V != vocab.size or (bos, eos, ans, pad) != _specials(vocab):
        raise CheckpointFormatError("checkpoint vocabulary does not match the supplied vocab")
    rec = 4 * order + 8 * V
    expected = _HEADER.size + n_rows * rec
    if len(data) != expected:
        raise CheckpointFormatError(f"checkpoint has {len(data)} bytes, expected {expected}")
    rows = {}
    off = _HEADER.size
    for _ in range(n_rows):
        ctx = struct.unpack_from(f"<{order}i", data, off)
        logits = np.frombuffer(data, dtype="<f8", count=V, offset=off + 4 * order)
        rows[tuple(ctx)] = logits.astype(np.float64)
        off += rec
    return Policy(vocab, order, rows)


def save(policy: Policy, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(policy))


def load(path: str | Path, vocab: Vocab) -> Policy:
    return from_bytes(Path(path).read_bytes(), vocab)


def to_text(policy: Policy) -> str:
    """Line-oriented dump of the same fields, for diffing."""
    bos, eos, ans, pad = _specials(policy.vocab)
    rows = list(policy.items())
    lines = [
        f"TMSLAB1 version={VERSION} order={policy.order} V={policy.V} "
        f"bos={bos} eos={eos} ans={ans} pad={pad} rows={len(rows)}"
    ]
    for ctx, logits in rows:
        ids = " ".join(str(c) for c in ctx)
        vals = " ".join(repr(float(v)) for v in logits)
        lines.append(f"{ids}\t{vals}")
    return "\n".join(lines) + "\n"


def from_text(text: str, vocab: Vocab) -> Policy:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("TMSLAB1 "):
        raise CheckpointFormatError("missing text header")
    fields = dict(kv.split("=", 1) for kv in lines[0].split()[1:])
    order, V, n_rows = int(fields["order"]), int(fields["V"]), int(fields["rows"])
    specials = tuple(int(fields[k]) for k in ("bos", "eos", "ans", "pad"))
    if int(fields["version"]) != VERSION:
        raise CheckpointFormatError("unsupported checkpoint version")
    if V != vocab.size or specials != _specials(vocab):
        raise CheckpointFormatError("checkpoint vocabulary does not match the supplied vocab")
    if len(lines) - 1 != n_rows:
        raise CheckpointFormatError("row count mismatch")
    rows = {}
    for line in lines[1:]:
        ids, vals = line.split("\t")
        rows[tuple(int(c) for c in ids.split())] = np.array([float(v) for v in vals.split()])
    return Policy(vocab, order, rows)
