"""Model checkpoints.

Layout (all integers little-endian):

    8 bytes   magic b"DDLSTM01"
    u32       header length H
    H bytes   UTF-8 JSON header: stack config, dims, label layout, epsilon,
              whether a boundary model follows
    u32       tensor count K
    K times:  u16 name length, name (UTF-8), 1 byte dtype ('d' float64 or
              'q' int64), u8 ndim, ndim x u32 extents, raw little-endian data

A boundary-prediction model, when present, is stored as a second complete
checkpoint appended after the first (its own magic and header).
Writes go to a temporary file that is renamed into place.
"""

from __future__ import annotations

import io
import json
import os
import struct

import numpy as np

from .cells import CellParams, StackConfig
from .dualnorm import AlphaPair, NormalizerParams, PopulationStats
from .model import Model

MAGIC = b"DDLSTM01"
FORMAT_VERSION = 1
_DTYPES = {"d": np.dtype("<f8"), "q": np.dtype("<i8")}


class CheckpointError(ValueError):
    pass


def _tensors(model: Model):
    out = []
    for l, p in enumerate(model.layers):
        pre = f"layer{l}."
        out += [(pre + "W_h", p.W_h), (pre + "W_x", p.W_x), (pre + "b", p.b)]
        for site, np_ in (("h", p.norm_h), ("x", p.norm_x), ("c", p.norm_c)):
            out += [(pre + "gamma_" + site, np_.gamma), (pre + "beta_" + site, np_.beta)]
        if model.alphas:
            a = model.alphas[l]
            out.append((pre + "alphas", np.array([a.alpha1, a.alpha2])))
        st = model.stats[l]
        for site in sorted(st.widths):
            out += [(f"{pre}pop.{site}.mean", st.mean[site]), (f"{pre}pop.{site}.var", st.var[site]),
                    (f"{pre}pop.{site}.count", st.count[site])]
    out += [("head.W", model.W_out), ("head.b", model.b_out)]
    return out


def _write_one(fh, model: Model):
    cfg = model.config
    header = {
        "version": FORMAT_VERSION,
        "layers": cfg.layers, "hidden": cfg.hidden, "history": cfg.history,
        "cell_kind": cfg.cell_kind, "input_dim": model.input_dim,
        "output_dim": model.output_dim, "label_layout": list(model.label_layout),
        "epsilon": float(model.epsilon).hex(),
        "norm_epsilons": [[float(n.epsilon).hex() for n in (p.norm_h, p.norm_x, p.norm_c)]
                          for p in model.layers],
        "pop_widths": model.stats[0].widths if model.stats else {},
        "has_aux": model.aux is not None,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    fh.write(MAGIC)
    fh.write(struct.pack("<I", len(blob)))
    fh.write(blob)
    tensors = _tensors(model)
    fh.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        arr = np.asarray(arr)
        code = "q" if arr.dtype.kind in "iu" else "d"
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        raw = name.encode()
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(code.encode())
        fh.write(struct.pack("<B", data.ndim))
        fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
        fh.write(data.tobytes())
    if model.aux is not None:
        _write_one(fh, model.aux)


def to_bytes(model: Model) -> bytes:
    buf = io.BytesIO()
    _write_one(buf, model)
    return buf.getvalue()


def save_checkpoint(model: Model, path):
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(to_bytes(model))
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_one(r: _Reader) -> Model:
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("bad magic: not a DDLSTM checkpoint")
    (hlen,) = r.unpack("<I")
    try:
        h = json.loads(r.take(hlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from None
    if h.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {h.get('version')}")
    (count,) = r.unpack("<I")
    t = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        code = r.take(1).decode()
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code!r} for {name}")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        dt = _DTYPES[code]
        n = int(np.prod(shape)) if shape else 1
        t[name] = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(shape).copy()
    cfg = StackConfig(h["layers"], h["hidden"], h["history"], h["cell_kind"])
    get = lambda k: _need(t, k)
    layers, alphas, stats = [], [], []
    for l in range(cfg.layers):
        pre = f"layer{l}."
        eps = [float.fromhex(e) for e in h["norm_epsilons"][l]]
        norms = [NormalizerParams(get(pre + "gamma_" + s), get(pre + "beta_" + s), e)
                 for s, e in zip("hxc", eps)]
        layers.append(CellParams(get(pre + "W_h"), get(pre + "W_x"), get(pre + "b"), *norms))
        if cfg.cell_kind == "ddlstm":
            a = get(pre + "alphas")
            alphas.append(AlphaPair(float(a[0]), float(a[1])))
        st = PopulationStats(cfg.history, h["pop_widths"])
        for site in st.widths:
            st.mean[site] = get(f"{pre}pop.{site}.mean")
            st.var[site] = get(f"{pre}pop.{site}.var")
            st.count[site] = get(f"{pre}pop.{site}.count")
        stats.append(st)
    cfg.alphas = alphas
    cfg.validate()
    model = Model(cfg, h["input_dim"], h["output_dim"], layers, alphas, get("head.W"),
                  get("head.b"), stats, tuple(h["label_layout"]), float.fromhex(h["epsilon"]))
    if h["has_aux"]:
        model.aux = _read_one(r)
    return model


def _need(t, key):
    if key not in t:
        raise CheckpointError(f"checkpoint lacks tensor {key}")
    return t[key]


def from_bytes(data: bytes) -> Model:
    r = _Reader(data)
    model = _read_one(r)
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint")
    return model


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
