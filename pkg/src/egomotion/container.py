"""Binary array container (.eem) and textual skeleton files (.skel).

Container layout (byte-level description in docs/formats.md):

    bytes 0..4    magic b"EEM1"
    bytes 4..12   uint64 little-endian manifest length L
    bytes 12..12+L manifest, UTF-8 JSON with sorted keys
    payload       starts at the next 64-byte boundary after the manifest

The manifest holds a format version, a caller-supplied ``meta`` dict, and an
array directory mapping name -> {dtype, shape, offset, nbytes} with offsets
relative to the payload base, each a multiple of 64. Reads return every
array in the directory, so names unknown to old readers survive round trips.
"""

import json
import os
import tempfile

import numpy as np

from .errors import (
    ContainerError,
    ContainerSizeError,
    ContainerTruncatedError,
    ContainerVersionError,
    DataError,
)
from .se3 import Skeleton

MAGIC = b"EEM1"
FORMAT_VERSION = 1
ALIGN = 64

_DTYPES = {
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
    "int64": np.dtype("<i8"),
    "int32": np.dtype("<i4"),
    "uint8": np.dtype("u1"),
    "bool": np.dtype("?"),
}
_DTYPE_NAMES = {v: k for k, v in _DTYPES.items()}


def _align(n):
    return (n + ALIGN - 1) // ALIGN * ALIGN


def _atomic_write(path, data: bytes):
    """Write bytes then rename into place so readers never see partial files."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_container(path, arrays, meta=None):
    """Write named numpy arrays plus a metadata dict to ``path`` atomically.

    arrays: dict name -> ndarray with dtype in the supported set. Order in
    the file follows sorted names so identical inputs give identical bytes.
    """
    meta = dict(meta or {})
    directory = {}
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])  # tobytes() below emits C order for any layout
        canon = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if canon not in _DTYPE_NAMES:
            raise DataError(f"unsupported container dtype {arr.dtype} for array {name!r}")
        arr = arr.astype(canon, copy=False)
        raw = arr.tobytes()
        directory[name] = {
            "dtype": _DTYPE_NAMES[canon],
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        }
        chunks.append(raw)
        offset = _align(offset + len(raw))
    manifest = {"format": "eem", "version": FORMAT_VERSION, "meta": meta, "arrays": directory}
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")

    out = bytearray()
    out += MAGIC
    out += len(header).to_bytes(8, "little")
    out += header
    payload_base = _align(len(out))
    out += b"\x00" * (payload_base - len(out))
    for info, raw in zip((directory[n] for n in sorted(arrays)), chunks):
        pos = payload_base + info["offset"]
        out += b"\x00" * (pos - len(out))
        out += raw
    _atomic_write(path, bytes(out))


def read_container(path):
    """Read a container; returns (arrays dict, meta dict).

    Raises ContainerVersionError / ContainerSizeError / ContainerTruncatedError
    for the corresponding corruption classes.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 8:
        raise ContainerTruncatedError(f"{path}: file shorter than fixed header")
    if blob[: len(MAGIC)] != MAGIC:
        raise ContainerError(f"{path}: bad magic, not an EEM container")
    header_len = int.from_bytes(blob[len(MAGIC) : len(MAGIC) + 8], "little")
    header_end = len(MAGIC) + 8 + header_len
    if header_end > len(blob):
        raise ContainerTruncatedError(f"{path}: manifest extends past end of file")
    try:
        manifest = json.loads(blob[len(MAGIC) + 8 : header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: manifest is not valid JSON ({exc})") from exc
    if manifest.get("format") != "eem" or not isinstance(manifest.get("version"), int):
        raise ContainerError(f"{path}: manifest missing format/version fields")
    if manifest["version"] != FORMAT_VERSION:
        raise ContainerVersionError(
            f"{path}: container version {manifest['version']} not supported"
        )

    payload_base = _align(header_end)
    directory = manifest.get("arrays", {})
    spans = []
    arrays = {}
    for name, info in directory.items():
        dtype_name = info.get("dtype")
        if dtype_name not in _DTYPES:
            raise ContainerError(f"{path}: array {name!r} has unknown dtype {dtype_name!r}")
        dtype = _DTYPES[dtype_name]
        shape = tuple(int(s) for s in info["shape"])
        if any(s < 0 for s in shape):
            raise ContainerSizeError(f"{path}: array {name!r} has negative dimension")
        offset, nbytes = int(info["offset"]), int(info["nbytes"])
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if nbytes != expected:
            raise ContainerSizeError(
                f"{path}: array {name!r} declares {nbytes} bytes, shape needs {expected}"
            )
        if offset < 0 or offset % ALIGN:
            raise ContainerSizeError(f"{path}: array {name!r} offset {offset} not 64-byte aligned")
        start = payload_base + offset
        if start + nbytes > len(blob):
            raise ContainerTruncatedError(
                f"{path}: array {name!r} extends past end of file"
            )
        spans.append((start, start + nbytes, name))
        arrays[name] = np.frombuffer(blob, dtype=dtype, count=expected // dtype.itemsize
                                     if dtype.itemsize else 0, offset=start).reshape(shape).copy()
    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise ContainerSizeError(f"{path}: arrays {n0!r} and {n1!r} overlap")
    return arrays, dict(manifest.get("meta", {}))


# --------------------------------------------------------------------------- .skel


SKEL_VERSION = 1


def save_skeleton(path, skel: Skeleton):
    """Write a skeleton as a line-oriented text file (.skel)."""
    lines = [f"format eem-skel {SKEL_VERSION}", f"name {skel.name}", f"joints {skel.num_joints}"]
    for name, parent, offset in zip(skel.joint_names, skel.parents, skel.bind_offsets):
        ox, oy, oz = (repr(float(v)) for v in offset)
        lines.append(f"joint {name} {parent} {ox} {oy} {oz}")
    lines.append(f"head {skel.head_index}")
    lines.append(f"pelvis {skel.pelvis_index}")
    lines.append("feet " + " ".join(str(i) for i in skel.foot_indices))
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def load_skeleton(path) -> Skeleton:
    """Parse a .skel file back into a Skeleton."""
    with open(path, "r", encoding="utf-8") as fh:
        rows = [line.split() for line in fh if line.strip()]
    if not rows or rows[0][:2] != ["format", "eem-skel"]:
        raise DataError(f"{path}: not a skeleton file")
    if rows[0][2] != str(SKEL_VERSION):
        raise DataError(f"{path}: unsupported skeleton format version {rows[0][2]}")
    fields = {}
    joints = []
    for row in rows[1:]:
        key = row[0]
        if key == "joint":
            if len(row) != 6:
                raise DataError(f"{path}: malformed joint line {' '.join(row)!r}")
            joints.append((row[1], int(row[2]), [float(row[3]), float(row[4]), float(row[5])]))
        else:
            fields[key] = row[1:]
    try:
        n = int(fields["joints"][0])
        head = int(fields["head"][0])
        pelvis = int(fields["pelvis"][0])
        feet = tuple(int(v) for v in fields["feet"])
        name = fields["name"][0]
    except (KeyError, IndexError, ValueError) as exc:
        raise DataError(f"{path}: missing or malformed skeleton fields ({exc})") from exc
    if len(joints) != n:
        raise DataError(f"{path}: declared {n} joints, found {len(joints)}")
    return Skeleton(
        name=name,
        joint_names=tuple(j[0] for j in joints),
        parents=np.asarray([j[1] for j in joints], dtype=np.int64),
        bind_offsets=np.asarray([j[2] for j in joints], dtype=np.float64),
        head_index=head,
        pelvis_index=pelvis,
        foot_indices=feet,
    )


# --------------------------------------------------------------------------- motion schema


def save_motion(path, motion, meta=None):
    """Store a MotionSequence in a container with a standard array schema."""
    extra = dict(meta or {})
    extra.update({"kind": "motion", "fps": motion.fps, "skeleton": motion.skeleton_id})
    arrays = {
        "root_rotation": np.stack([p.root_rotation for p in motion.frames]).astype(np.float32),
        "root_translation": np.stack(
            [p.root_translation for p in motion.frames]
        ).astype(np.float32),
        "joint_angles": np.stack([p.joint_angles for p in motion.frames]).astype(np.float32),
        "shape": motion.shape.astype(np.float32),
    }
    write_container(path, arrays, extra)


def load_motion(path, skel: Skeleton):
    """Inverse of save_motion; validates the skeleton id and array shapes."""
    from .se3 import MotionSequence, PoseParams

    arrays, meta = read_container(path)
    if meta.get("kind") != "motion":
        raise DataError(f"{path}: container is not a motion file (kind={meta.get('kind')!r})")
    if meta.get("skeleton") != skel.name:
        raise DataError(
            f"{path}: motion uses skeleton {meta.get('skeleton')!r}, expected {skel.name!r}"
        )
    required = ("root_rotation", "root_translation", "joint_angles", "shape")
    for key in required:
        if key not in arrays:
            raise DataError(f"{path}: motion container missing array {key!r}")
    rr = arrays["root_rotation"].astype(np.float64)
    rt = arrays["root_translation"].astype(np.float64)
    ja = arrays["joint_angles"].astype(np.float64)
    shape = arrays["shape"].astype(np.float64)
    n = rr.shape[0]
    if rt.shape != (n, 3) or ja.shape != (n, skel.num_joints - 1, 3):
        raise DataError(f"{path}: motion arrays have inconsistent shapes")
    frames = [PoseParams(rr[i], rt[i], ja[i], shape) for i in range(n)]
    return MotionSequence(frames=frames, fps=float(meta["fps"]), skeleton_id=skel.name)
