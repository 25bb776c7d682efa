"""On-disk container: a text header followed by a raw complex payload.

Layout::

    SPIRITDIFF-CONTAINER <version>\\n
    <one line of JSON: role, shape, dtype, payload_bytes, meta>\\n
    <payload: little-endian complex128, C order>

The header is checked completely before any payload byte is interpreted,
so a bad file never yields a partial object.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calibration import SpiritKernel
from .grid import SamplingMask
from .operators import SensitivityMaps
from .scores import GaussianPrior, LinearScoreModel

MAGIC = b"SPIRITDIFF-CONTAINER"
VERSION = 1
DTYPE = "<c16"
ROLES = ("coil_image", "kspace", "image", "mask", "kernel", "maps", "gaussian_prior", "score_model")
SCORE_ROLES = ("gaussian_prior", "score_model")


class ContainerError(ValueError):
    """Base class for unreadable containers."""


class ContainerFormatError(ContainerError):
    """Magic line or header is malformed."""


class ContainerVersionError(ContainerError):
    """Format version this reader does not understand."""


class ContainerShapeError(ContainerError):
    """Declared shape and payload length disagree."""


class ContainerTruncatedError(ContainerError):
    """File ends before the declared payload does."""


@dataclass
class Container:
    role: str
    data: np.ndarray
    meta: dict = field(default_factory=dict)

    def to_object(self):
        """Decode into the library type the role stands for."""
        d, m = self.data, self.meta
        if self.role == "mask":
            return SamplingMask(d.real != 0, tuple(m["acs"]))
        if self.role == "kernel":
            return SpiritKernel(d)
        if self.role == "maps":
            return SensitivityMaps(d[:-1].copy(), d[-1].real.copy())
        if self.role == "gaussian_prior":
            return GaussianPrior(d, float(m["var"]))
        if self.role == "score_model":
            return LinearScoreModel(np.array(m["a"]), np.array(m["b"]), d,
                                    float(m["t_min"]), float(m["T"]))
        return d


def pack(obj, role: str | None = None, meta: dict | None = None) -> Container:
    """Wrap a library object or plain array as a :class:`Container`."""
    meta = dict(meta or {})
    if isinstance(obj, SamplingMask):
        meta["acs"] = list(obj.acs)
        return Container("mask", obj.keep.astype(np.complex128), meta)
    if isinstance(obj, SpiritKernel):
        return Container("kernel", obj.weights, meta)
    if isinstance(obj, SensitivityMaps):
        return Container("maps", np.concatenate([obj.maps, obj.norm[None].astype(complex)]), meta)
    if isinstance(obj, GaussianPrior):
        meta["var"] = obj.var
        return Container("gaussian_prior", obj.mean, meta)
    if isinstance(obj, LinearScoreModel):
        meta.update(a=obj.a.tolist(), b=obj.b.tolist(), t_min=obj.t_min, T=obj.T)
        return Container("score_model", obj.mean_est, meta)
    if isinstance(obj, Container):
        return obj
    if role is None:
        raise ContainerError("plain arrays need an explicit role")
    return Container(role, np.asarray(obj), meta)


def to_bytes(c: Container) -> bytes:
    if c.role not in ROLES:
        raise ContainerError(f"unknown role {c.role!r}")
    data = np.ascontiguousarray(c.data, dtype=DTYPE)
    head = {
        "role": c.role,
        "shape": list(data.shape),
        "dtype": "complex128-le",
        "payload_bytes": data.nbytes,
        "meta": c.meta,
    }
    line = json.dumps(head, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + b" %d\n" % VERSION + line + b"\n" + data.tobytes()


def from_bytes(raw: bytes) -> Container:
    first, sep, rest = raw.partition(b"\n")
    parts = first.split(b" ")
    if not sep or len(parts) != 2 or parts[0] != MAGIC:
        raise ContainerFormatError("missing container magic line")
    try:
        version = int(parts[1])
    except ValueError:
        raise ContainerFormatError(f"bad version field {parts[1]!r}") from None
    if version != VERSION:
        raise ContainerVersionError(f"container version {version}, reader supports {VERSION}")
    line, sep, payload = rest.partition(b"\n")
    if not sep:
        raise ContainerTruncatedError("file ends inside the header")
    try:
        head = json.loads(line)
        role, shape = head["role"], tuple(int(n) for n in head["shape"])
        declared = int(head["payload_bytes"])
    except (ValueError, KeyError, TypeError) as e:
        raise ContainerFormatError(f"unreadable header: {e}") from None
    if role not in ROLES:
        raise ContainerFormatError(f"unknown role {role!r}")
    if head.get("dtype") != "complex128-le":
        raise ContainerFormatError(f"unsupported dtype {head.get('dtype')!r}")
    if any(n < 0 for n in shape) or declared != 16 * int(np.prod(shape, dtype=np.int64)):
        raise ContainerShapeError(f"shape {shape} needs {16 * int(np.prod(shape))} bytes, "
                                  f"header declares {declared}")
    if len(payload) < declared:
        raise ContainerTruncatedError(f"payload has {len(payload)} of {declared} bytes")
    if len(payload) > declared:
        raise ContainerShapeError(f"{len(payload) - declared} trailing bytes after payload")
    data = np.frombuffer(payload, dtype=DTYPE).reshape(shape).astype(np.complex128)
    return Container(role, data, head.get("meta", {}))


def write_container(path, obj, role: str | None = None, meta: dict | None = None) -> str:
    """Write ``obj`` to ``path`` and return the file's sha256."""
    raw = to_bytes(pack(obj, role, meta))
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    tmp.write_bytes(raw)
    os.replace(tmp, path)
    return hashlib.sha256(raw).hexdigest()


def read_container(path, role: str | tuple[str, ...] | None = None) -> Container:
    """Read a container, optionally insisting on its role."""
    c = from_bytes(Path(path).read_bytes())
    want = (role,) if isinstance(role, str) else role
    if want and c.role not in want:
        raise ContainerFormatError(f"{path}: role {c.role!r}, expected one of {want}")
    return c


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
