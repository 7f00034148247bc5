"""EW4D binary container and JSON form for primitive sets.

Binary layout (little-endian): b"EW4D", u32 version, u32 count, u32 sh_degree,
u32 n_freq, then ``count`` records of float64 values in field declaration order.
"""

import json
import struct

import numpy as np
import torch

from .gaussian4d import DTYPE, Primitive4D
from .sh import num_coeffs

MAGIC = b"EW4D"
VERSION = 1


class SceneFormatError(Exception):
    pass


def _field_sizes(sh_degree, n_freq):
    return {
        "mu_x": 3, "mu_t": 1, "log_scale": 4, "rot_left": 4, "rot_right": 4,
        "logit_opacity": 1, "sh_coeffs": (n_freq + 1) * num_coeffs(sh_degree) * 3,
        "phases": n_freq + 1,
    }


def record_size(sh_degree, n_freq):
    return sum(_field_sizes(sh_degree, n_freq).values())


def save_scene(scene, path):
    scene = scene.detach()
    n = scene.count
    cols = [getattr(scene, f).reshape(n, -1) for f in Primitive4D.field_names()]
    records = torch.cat(cols, dim=1).numpy().astype("<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIII", VERSION, n, scene.sh_degree, scene.n_freq))
        fh.write(records.tobytes(order="C"))


def load_scene(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise SceneFormatError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 20:
        raise SceneFormatError(f"{path}: truncated header")
    version, n, degree, n_freq = struct.unpack("<IIII", data[4:20])
    if version != VERSION:
        raise SceneFormatError(f"{path}: unsupported version {version}")
    width = record_size(degree, n_freq)
    if len(data) != 20 + 8 * n * width:
        raise SceneFormatError(f"{path}: payload size does not match {n} records")
    flat = np.frombuffer(data, dtype="<f8", offset=20).reshape(n, width)
    return _from_flat(flat, degree, n_freq)


def _from_flat(flat, degree, n_freq):
    n = flat.shape[0]
    shapes = {
        "mu_x": (n, 3), "mu_t": (n,), "log_scale": (n, 4), "rot_left": (n, 4),
        "rot_right": (n, 4), "logit_opacity": (n,),
        "sh_coeffs": (n, n_freq + 1, num_coeffs(degree), 3), "phases": (n, n_freq + 1),
    }
    out, col = {}, 0
    for name, size in _field_sizes(degree, n_freq).items():
        out[name] = torch.as_tensor(flat[:, col:col + size].copy(), dtype=DTYPE).reshape(shapes[name])
        col += size
    return Primitive4D(**out)


def scene_to_json(scene):
    scene = scene.detach()
    prims = []
    for i in range(scene.count):
        prims.append({f: getattr(scene, f)[i].tolist() for f in Primitive4D.field_names()})
    return json.dumps({"format": "EW4D-json", "version": VERSION, "sh_degree": scene.sh_degree,
                       "n_freq": scene.n_freq, "primitives": prims}, indent=1)


def scene_from_json(text):
    doc = json.loads(text)
    degree, n_freq = int(doc["sh_degree"]), int(doc["n_freq"])
    rows = []
    for p in doc["primitives"]:
        rows.append(np.concatenate([np.ravel(np.asarray(p[f], dtype=np.float64))
                                    for f in Primitive4D.field_names()]))
    flat = np.stack(rows) if rows else np.zeros((0, record_size(degree, n_freq)))
    return _from_flat(flat, degree, n_freq)
