"""Binary file formats: datasets (RGDS), checkpoints (DNAE), mixtures (GMM1).

All multi-byte fields are little-endian. Arrays are float32 at rest for
datasets and checkpoints and float64 for mixtures. Writes go to a
temporary file in the target directory and are renamed into place.

PGM images (binary P5) are also read and written here.
"""
from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .datapipe import Dataset
from .dnnae import ArchSpec, DnnaeModel, build_dnnae
from .exceptions import FormatError, ValidationError
from .gmm import COV_TYPES, GmmModel
from .neural import ACTIVATIONS, AdamState, BnState

DATASET_MAGIC = b"RGDS"
CHECKPOINT_MAGIC = b"DNAE"
GMM_MAGIC = b"GMM1"
VERSION = 1

_REGULARIZER_CODES = {"bn": 0, "dropout": 1, "none": 2}
_FLAG_BN = 1
_FLAG_ADAM = 2
_FLAG_DROPOUT = 4


def _atomic_write(path, data):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    """Bounds-checked cursor over a byte buffer."""

    def __init__(self, data, what):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n):
        end = self.pos + n
        if end > len(self.data):
            raise FormatError(
                f"truncated {self.what}: need {end} bytes, file has {len(self.data)}", offset=self.pos
            )
        out = self.data[self.pos : end]
        self.pos = end
        return out

    def unpack(self, fmt):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def u8(self):
        return self.unpack("<B")[0]

    def u32(self):
        return self.unpack("<I")[0]

    def f64(self):
        return self.unpack("<d")[0]

    def array(self, dtype, count):
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()

    def expect_magic(self, magic):
        got = self.take(len(magic))
        if got != magic:
            raise FormatError(f"bad magic {got!r}, expected {magic!r} for {self.what}", offset=0)
        version = self.u32()
        if version != VERSION:
            raise FormatError(f"unsupported {self.what} version {version}", offset=len(magic))

    def finish(self):
        if self.pos != len(self.data):
            raise FormatError(
                f"{self.what} has {len(self.data) - self.pos} trailing bytes "
                f"(expected length {self.pos}, actual {len(self.data)})",
                offset=self.pos,
            )


# ---------------------------------------------------------------------------
# datasets


def _record_dtype(n_pix):
    return np.dtype(
        [("label", "u1"), ("split", "u1"), ("origin_id", "<u4"), ("aug_index", "<u4"), ("pixels", "<f4", (n_pix,))]
    )


def dataset_to_bytes(ds):
    n, h, w = ds.images.shape
    if np.any(ds.images < 0) or np.any(ds.images > 1) or not np.all(np.isfinite(ds.images)):
        raise ValidationError("dataset pixels must lie in [0, 1]")
    rec = np.empty(n, dtype=_record_dtype(h * w))
    rec["label"] = ds.labels
    rec["split"] = ds.split
    rec["origin_id"] = ds.origin_id
    rec["aug_index"] = ds.aug_index
    rec["pixels"] = ds.images.reshape(n, h * w)
    return DATASET_MAGIC + struct.pack("<IIII", VERSION, n, h, w) + rec.tobytes()


def dataset_from_bytes(data):
    r = _Reader(data, "dataset")
    r.expect_magic(DATASET_MAGIC)
    n, h, w = r.unpack("<III")
    dt = _record_dtype(h * w)
    expected = r.pos + n * dt.itemsize
    if len(data) != expected:
        raise FormatError(
            f"dataset length mismatch: header implies {expected} bytes, file has {len(data)}", offset=r.pos
        )
    rec = np.frombuffer(r.take(n * dt.itemsize), dtype=dt)
    if np.any(rec["split"] > 2) or np.any(rec["label"] > 1):
        raise FormatError("dataset record has invalid label or split code", offset=16)
    return Dataset(
        images=rec["pixels"].reshape(n, h, w).copy(),
        labels=rec["label"].copy(),
        split=rec["split"].copy(),
        origin_id=rec["origin_id"].copy(),
        aug_index=rec["aug_index"].copy(),
    )


def save_dataset(path, ds):
    _atomic_write(path, dataset_to_bytes(ds))


def load_dataset(path):
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())


# ---------------------------------------------------------------------------
# checkpoints
#
# header: magic, version u32, input_side u32, n_enc u32, enc widths u32*n_enc,
#   code_len u32, n_classes u32, regularizer u8, keep_prob f64,
#   epochs_done u32, n_blocks u32
# per block (chain order enc1..code, dec1..output, head):
#   out u32, in u32, activation u8, flags u8,
#   weights f32[out*in], bias f32[out],
#   [BN] momentum f64, epsilon f64, gamma, beta, running_mean, running_var f32[out]
#   [ADAM] t u32, beta1 f64, beta2 f64, epsilon f64, then m and v per param
#          (weights, bias[, gamma, beta]) as f32


def _f32(a):
    return np.asarray(a, dtype="<f4").tobytes()


def checkpoint_to_bytes(model, include_adam=True):
    a = model.arch
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<III", VERSION, a.input_side, len(a.encoder_widths)),
        struct.pack(f"<{len(a.encoder_widths)}I", *a.encoder_widths),
        struct.pack("<IIBd", a.code_len, a.n_classes, _REGULARIZER_CODES[a.regularizer], a.keep_prob),
        struct.pack("<II", model.epochs_done, len(model.blocks())),
    ]
    for name, layer in model.blocks():
        flags = (_FLAG_BN if layer.has_bn else 0) | (_FLAG_ADAM if include_adam else 0)
        flags |= _FLAG_DROPOUT if layer.keep_prob is not None else 0
        parts.append(struct.pack("<IIBB", layer.n_out, layer.n_in, ACTIVATIONS.index(layer.activation), flags))
        parts += [_f32(layer.weights), _f32(layer.bias)]
        if layer.has_bn:
            bn = layer.bn
            parts.append(struct.pack("<dd", bn.momentum, bn.epsilon))
            parts += [_f32(bn.gamma), _f32(bn.beta), _f32(bn.running_mean), _f32(bn.running_var)]
        if include_adam:
            st = model.adam[name]
            parts.append(struct.pack("<Iddd", st.t, st.beta1, st.beta2, st.epsilon))
            keys = list(layer.parameters())
            parts += [_f32(st.m[k]) for k in keys] + [_f32(st.v[k]) for k in keys]
    return b"".join(parts)


def checkpoint_from_bytes(data):
    r = _Reader(data, "checkpoint")
    r.expect_magic(CHECKPOINT_MAGIC)
    side, n_enc = r.unpack("<II")
    if n_enc == 0 or n_enc > 64:
        raise FormatError(f"implausible encoder depth {n_enc}", offset=r.pos - 4)
    widths = r.unpack(f"<{n_enc}I")
    code_len, n_classes, reg_code, keep_prob = r.unpack("<IIBd")
    regs = {v: k for k, v in _REGULARIZER_CODES.items()}
    if reg_code not in regs:
        raise FormatError(f"unknown regularizer code {reg_code}", offset=r.pos - 9)
    epochs_done, n_blocks = r.unpack("<II")
    arch = ArchSpec(
        input_side=side,
        encoder_widths=widths,
        code_len=code_len,
        regularizer=regs[reg_code],
        keep_prob=keep_prob,
        n_classes=n_classes,
    )
    model = build_dnnae(arch, seed=0)
    blocks = model.blocks()
    if n_blocks != len(blocks):
        raise FormatError(f"checkpoint has {n_blocks} blocks, architecture implies {len(blocks)}", offset=r.pos - 4)
    adam = {}
    for name, layer in blocks:
        start = r.pos
        n_out, n_in, act, flags = r.unpack("<IIBB")
        if (n_out, n_in) != (layer.n_out, layer.n_in) or act >= len(ACTIVATIONS):
            raise FormatError(f"block {name} dimensions do not match the architecture", offset=start)
        if bool(flags & _FLAG_BN) != layer.has_bn:
            raise FormatError(f"block {name} batch-norm flag does not match the architecture", offset=start)
        layer.activation = ACTIVATIONS[act]
        layer.weights = r.array("<f4", n_out * n_in).astype(np.float64).reshape(n_out, n_in)
        layer.bias = r.array("<f4", n_out).astype(np.float64)
        if flags & _FLAG_BN:
            momentum, eps = r.unpack("<dd")
            vecs = [r.array("<f4", n_out).astype(np.float64) for _ in range(4)]
            layer.bn = BnState(*vecs, momentum=momentum, epsilon=eps)
        keys = list(layer.parameters())
        if flags & _FLAG_ADAM:
            t, b1, b2, eps = r.unpack("<Iddd")
            shapes = {k: p.shape for k, p in layer.parameters().items()}
            m = {k: r.array("<f4", int(np.prod(shapes[k]))).astype(np.float64).reshape(shapes[k]) for k in keys}
            v = {k: r.array("<f4", int(np.prod(shapes[k]))).astype(np.float64).reshape(shapes[k]) for k in keys}
            adam[name] = AdamState(m, v, t, b1, b2, eps)
        else:
            adam[name] = AdamState.zeros_like(layer.parameters())
    r.finish()
    model.adam = adam
    model.epochs_done = epochs_done
    return model


def save_checkpoint(path, model, include_adam=True):
    _atomic_write(path, checkpoint_to_bytes(model, include_adam))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())


def snap_to_storage(model):
    """Round every stored value of ``model`` to float32 in place.

    After this the live model equals what :func:`load_checkpoint` returns
    for its checkpoint, so a run that keeps going and a run resumed from
    the file follow identical trajectories.
    """

    def q(a):
        return np.asarray(a, dtype=np.float32).astype(np.float64)

    for name, layer in model.blocks():
        layer.weights = q(layer.weights)
        layer.bias = q(layer.bias)
        if layer.bn is not None:
            bn = layer.bn
            bn.gamma, bn.beta = q(bn.gamma), q(bn.beta)
            bn.running_mean, bn.running_var = q(bn.running_mean), q(bn.running_var)
        st = model.adam[name]
        st.m = {k: q(v) for k, v in st.m.items()}
        st.v = {k: q(v) for k, v in st.v.items()}
    return model


# ---------------------------------------------------------------------------
# mixtures


def gmm_to_bytes(model):
    model.validate()
    K, M = model.means.shape
    parts = [GMM_MAGIC, struct.pack("<IIIB", VERSION, K, M, COV_TYPES.index(model.cov_type))]
    for k in range(K):
        parts.append(struct.pack("<d", model.weights[k]))
        parts.append(np.asarray(model.means[k], dtype="<f8").tobytes())
        parts.append(np.asarray(model.covariances[k], dtype="<f8").tobytes())
    return b"".join(parts)


def gmm_from_bytes(data):
    r = _Reader(data, "mixture")
    r.expect_magic(GMM_MAGIC)
    K, M = r.unpack("<II")
    cov_code = r.u8()
    if cov_code >= len(COV_TYPES) or K == 0 or M == 0:
        raise FormatError(f"invalid mixture header (K={K}, M={M}, cov_type={cov_code})", offset=8)
    cov_type = COV_TYPES[cov_code]
    cov_len = M if cov_type == "diag" else M * M
    expected = r.pos + K * 8 * (1 + M + cov_len)
    if len(data) != expected:
        raise FormatError(f"mixture length mismatch: expected {expected} bytes, file has {len(data)}", offset=r.pos)
    weights, means, covs = [], [], []
    for _ in range(K):
        weights.append(r.f64())
        means.append(r.array("<f8", M))
        covs.append(r.array("<f8", cov_len))
    covs = np.stack(covs)
    if cov_type == "full":
        covs = covs.reshape(K, M, M)
    model = GmmModel(np.array(weights), np.stack(means), covs, cov_type)
    try:
        model.validate()
    except Exception as exc:
        raise FormatError(f"mixture parameters invalid: {exc}") from None
    return model


def save_gmm(path, model):
    _atomic_write(path, gmm_to_bytes(model))


def load_gmm(path):
    with open(path, "rb") as fh:
        return gmm_from_bytes(fh.read())


# ---------------------------------------------------------------------------
# PGM


def quantize16(img):
    """Map [0, 1] floats to 16-bit levels, rounding half up."""
    img = np.asarray(img, dtype=np.float64)
    if not np.all(np.isfinite(img)) or np.any(img < 0) or np.any(img > 1):
        raise ValidationError("PGM export expects pixel values in [0, 1]")
    return np.floor(np.clip(img, 0.0, 1.0) * 65535.0 + 0.5).astype(np.uint16)


def pgm_bytes(img):
    q = quantize16(img)
    if q.ndim != 2:
        raise ValidationError("PGM export expects a single 2-D image")
    h, w = q.shape
    return f"P5\n{w} {h}\n65535\n".encode("ascii") + q.astype(">u2").tobytes()


def export_pgm(img, path):
    _atomic_write(path, pgm_bytes(img))


def read_pgm(path):
    """Read a binary (P5) PGM, 8- or 16-bit; returns float64 raw levels."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header", offset=pos)
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})", offset=0)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path}: malformed PGM header") from None
    if not 0 < maxval < 65536:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace before raster
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    need = w * h * dtype.itemsize
    if len(data) - pos < need:
        raise FormatError(f"{path}: truncated PGM raster, need {need} bytes, have {len(data) - pos}", offset=pos)
    return np.frombuffer(data[pos : pos + need], dtype=dtype).reshape(h, w).astype(np.float64)
