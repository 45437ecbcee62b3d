"""Single-file little-endian checkpoints.

Layout::

    magic  b"BLNDCKPT"
    u32    format version
    u32    config length, then that many bytes (RunConfig text)
    u32    meta length, then that many bytes (``key = value`` lines)
    u32    tensor count
    per tensor:
        u16 name length, name (utf-8)
        u8  dtype code (0 float32, 1 float64, 2 int64)
        u8  ndim, then ndim x u32 extents
        raw little-endian data

Tensors are written in insertion order, so load -> save reproduces the file
byte for byte.
"""
import struct

import numpy as np

MAGIC = b"BLNDCKPT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


class CheckpointError(ValueError):
    pass


class Checkpoint:
    def __init__(self, config_text="", meta=None, tensors=None):
        self.config_text = config_text
        self.meta = dict(meta or {})
        self.tensors = dict(tensors or {})

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def add(self, name, array):
        arr = np.asarray(array)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        self.tensors[name] = arr

    def to_bytes(self):
        out = [MAGIC, struct.pack("<I", VERSION)]
        for blob in (self.config_text.encode(), _meta_text(self.meta).encode()):
            out += [struct.pack("<I", len(blob)), blob]
        out.append(struct.pack("<I", len(self.tensors)))
        for name, arr in self.tensors.items():
            code = _CODES[arr.dtype]
            key = name.encode()
            out.append(struct.pack("<H", len(key)) + key)
            out.append(struct.pack("<BB", code, arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data):
        if data[:8] != MAGIC:
            raise CheckpointError("not a blindnet checkpoint (bad magic)")
        pos = 8

        def unpack(fmt):
            nonlocal pos
            vals = struct.unpack_from(fmt, data, pos)
            pos += struct.calcsize(fmt)
            return vals

        (version,) = unpack("<I")
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        blobs = []
        for _ in range(2):
            (n,) = unpack("<I")
            blobs.append(data[pos:pos + n].decode())
            pos += n
        (count,) = unpack("<I")
        ck = cls(blobs[0], _parse_meta(blobs[1]))
        for _ in range(count):
            (n,) = unpack("<H")
            name = data[pos:pos + n].decode()
            pos += n
            code, ndim = unpack("<BB")
            shape = unpack(f"<{ndim}I") if ndim else ()
            dt = _DTYPES[code]
            size = int(np.prod(shape)) * dt.itemsize
            if pos + size > len(data):
                raise CheckpointError(f"truncated tensor {name}")
            arr = np.frombuffer(data, dt, int(np.prod(shape)), pos).reshape(shape)
            ck.tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)
            pos += size
        if pos != len(data):
            raise CheckpointError("trailing bytes after last tensor")
        return ck

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def _meta_text(meta):
    return "".join(f"{k} = {v}\n" for k, v in meta.items())


def _parse_meta(text):
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


# ----------------------------------------------------------------------------
# model <-> checkpoint


def add_codebook(ck, prefix, cb):
    ck.add(f"{prefix}/meta", np.array([cb.num_codes, cb.dim, cb.decay, cb.beta, cb.laplace_eps], np.float64))
    ck.add(f"{prefix}/embeddings", cb.embeddings)
    ck.add(f"{prefix}/ema_cluster_size", cb.ema_cluster_size)
    ck.add(f"{prefix}/ema_embed_sum", cb.ema_embed_sum)


def read_codebook(ck, prefix):
    from .vq import Codebook

    k, d, decay, beta, eps = ck[f"{prefix}/meta"]
    emb = ck[f"{prefix}/embeddings"]
    cb = Codebook(int(k), int(d), beta=beta, decay=decay, laplace_eps=eps, embeddings=emb, dtype=emb.dtype)
    cb.ema_cluster_size = ck[f"{prefix}/ema_cluster_size"].copy()
    cb.ema_embed_sum = ck[f"{prefix}/ema_embed_sum"].copy()
    return cb


def add_model(ck, model):
    for name, p in model.params.items():
        ck.add(f"param/{name}", p.data)
    for level in ("bottom", "top"):
        add_codebook(ck, f"codebook/{level}", model.codebooks[level])


def load_model_state(ck, model):
    for name, p in model.params.items():
        arr = ck[f"param/{name}"]
        if arr.shape != p.shape:
            raise CheckpointError(f"param/{name}: shape {arr.shape} != model {p.shape}")
        p.data = arr.astype(p.dtype, copy=True)
    for level in ("bottom", "top"):
        model.codebooks[level] = read_codebook(ck, f"codebook/{level}")


def add_optimizer(ck, opt):
    for name, st in opt.states.items():
        if st.m is not None:
            ck.add(f"adam/{name}/m", st.m)
            ck.add(f"adam/{name}/v", st.v)
        ck.add(f"adam/{name}/step", np.array(st.step, np.int64))


def load_optimizer_state(ck, opt):
    for name, st in opt.states.items():
        if f"adam/{name}/m" in ck:
            st.m = ck[f"adam/{name}/m"].copy()
            st.v = ck[f"adam/{name}/v"].copy()
        st.step = int(ck[f"adam/{name}/step"])
