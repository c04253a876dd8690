"""
Checkpoint archives.

A checkpoint is a zip file holding `header.json` (config, counters, rng
state, metrics) and one `.npy` member per array, keyed by a dot-path such
as `model/backbone.proj.weight`, `momentum/...` or `centers/global`.
Member timestamps are fixed, so saving the same state twice gives the same
bytes.
"""
import hashlib
import io
import json
import logging
import os
import zipfile

import numpy as np

from errors import CheckpointError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
HEADER_NAME = "header.json"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _member(name):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def save_checkpoint(path, header, arrays):
    """
    Write `header` (JSON-serialisable dict) and `arrays` ({name: ndarray}).

    Floating arrays are stored as 64-bit little-endian values whatever the
    training precision; integer arrays keep their width, little-endian. The
    file is written next to `path` and moved into place.
    """
    header = dict(header, format=FORMAT_VERSION, arrays=sorted(arrays))
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp_path = f"{path}.tmp"
    with zipfile.ZipFile(tmp_path, "w") as archive:
        archive.writestr(_member(HEADER_NAME), json.dumps(header, sort_keys=True, indent=1))
        for name in sorted(arrays):
            value = np.asarray(arrays[name])
            if np.issubdtype(value.dtype, np.floating):
                value = value.astype("<f8", copy=False)
            else:
                value = value.astype(value.dtype.newbyteorder("<"), copy=False)
            buffer = io.BytesIO()
            np.lib.format.write_array(buffer, np.ascontiguousarray(value), allow_pickle=False)
            archive.writestr(_member(f"{name}.npy"), buffer.getvalue())
    os.replace(tmp_path, path)
    logger.debug("checkpoint saved: %s (%d arrays)", path, len(arrays))
    return path


def load_checkpoint(path):
    """Return (header, arrays) of a checkpoint written by `save_checkpoint`."""
    if not os.path.isfile(path):
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        with zipfile.ZipFile(path) as archive:
            header = json.loads(archive.read(HEADER_NAME))
            arrays = {}
            for name in header.get("arrays", []):
                with archive.open(f"{name}.npy") as f:
                    arrays[name] = np.lib.format.read_array(io.BytesIO(f.read()), allow_pickle=False)
    except (zipfile.BadZipFile, KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: unreadable checkpoint ({e})") from None
    if header.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
    return header, arrays


def prefixed(arrays, prefix):
    """Sub-dictionary of the arrays under `prefix/`, with the prefix stripped."""
    cut = len(prefix) + 1
    return {name[cut:]: value for name, value in arrays.items() if name.startswith(prefix + "/")}


def file_hash(path):
    """sha256 of a file's bytes, used to tie galleries to the checkpoint that produced them."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def config_hash(config_dict):
    encoded = json.dumps(config_dict, sort_keys=True, ensure_ascii=True)
    return hashlib.sha256(encoded.encode("utf-8")).hexdigest()[:12]
