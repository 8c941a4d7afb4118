"""Checkpoint I/O: a text manifest plus a flat little-endian float64 blob.

Manifest lines are ``name<TAB>shape<TAB>byte_offset`` with the shape written
as comma-joined extents.  The blob concatenates every parameter's values in
manifest order.  Round-trips are bit-exact.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import CheckpointError

MANIFEST_SUFFIX = ".manifest"
BLOB_SUFFIX = ".blob"


def save_tensors(named, prefix):
    """Write ``{name: Tensor}`` to ``prefix.manifest`` + ``prefix.blob``."""
    lines = []
    chunks = []
    offset = 0
    for name, tensor in named.items():
        data = np.ascontiguousarray(tensor.data, dtype="<f8")
        shape = ",".join(str(d) for d in data.shape)
        lines.append(f"{name}\t{shape}\t{offset}")
        chunks.append(data.tobytes())
        offset += data.nbytes
    tmp_manifest = prefix + MANIFEST_SUFFIX + ".tmp"
    tmp_blob = prefix + BLOB_SUFFIX + ".tmp"
    with open(tmp_manifest, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(tmp_blob, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp_manifest, prefix + MANIFEST_SUFFIX)
    os.replace(tmp_blob, prefix + BLOB_SUFFIX)


def read_manifest(prefix):
    """Parse the manifest into a list of (name, shape, offset)."""
    entries = []
    try:
        with open(prefix + MANIFEST_SUFFIX, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise CheckpointError(f"manifest line {lineno} is malformed: {line!r}")
                name, shape_txt, offset_txt = parts
                shape = tuple(int(d) for d in shape_txt.split(",")) if shape_txt else ()
                entries.append((name, shape, int(offset_txt)))
    except OSError as err:
        raise CheckpointError(f"cannot read manifest: {err}") from err
    return entries


def load_tensors(named, prefix):
    """Fill ``{name: Tensor}`` from a checkpoint; all-or-nothing.

    Every manifest entry must match the model's parameter set by name and
    shape before a single value is assigned.
    """
    entries = read_manifest(prefix)
    manifest_names = [name for name, _, _ in entries]
    if sorted(manifest_names) != sorted(named.keys()):
        missing = sorted(set(named) - set(manifest_names))
        extra = sorted(set(manifest_names) - set(named))
        raise CheckpointError(f"parameter set mismatch: missing={missing}, unexpected={extra}")
    try:
        with open(prefix + BLOB_SUFFIX, "rb") as fh:
            blob = fh.read()
    except OSError as err:
        raise CheckpointError(f"cannot read blob: {err}") from err

    staged = {}
    for name, shape, offset in entries:
        tensor = named[name]
        if tuple(tensor.data.shape) != shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {shape}, model {tuple(tensor.data.shape)}"
            )
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = offset + count * 8
        if end > len(blob):
            raise CheckpointError(f"blob truncated: {name!r} needs bytes up to {end}, have {len(blob)}")
        staged[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
    for name, values in staged.items():
        named[name].data = values.astype(np.float64).copy()
