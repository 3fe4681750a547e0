"""Binary checkpoint container for trained networks.

Layout (all integers little-endian)::

    b"TSNN" | u32 version | u32 header_len | header JSON (utf-8)
    | per layer: W, tau as float64
    | optional Adam state: per layer m_W, v_W, m_tau, v_tau as float64
    | u32 CRC-32 of everything between the magic and the checksum

The JSON header carries the network spec, per-layer shapes and the Adam step
count, plus an arbitrary ``meta`` dict supplied by the caller.
"""

import json
import struct
import zlib

import numpy as np

from .core import LayerParams, NetworkSpec
from .training import AdamState

MAGIC = b"TSNN"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _f64(a):
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def save_checkpoint(path, spec: NetworkSpec, params, optim_state: AdamState = None, meta=None):
    layers = [{"kind": p.kind, "W_shape": list(p.W.shape), "n_tau": int(p.tau.size),
               "kernel_size": p.kernel_size, "dilation": p.dilation, "u_th": p.u_th}
              for p in params]
    header = {"spec": spec.to_dict(), "layers": layers,
              "adam_step": None if optim_state is None else optim_state.step,
              "meta": meta or {}}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [struct.pack("<II", VERSION, len(hbytes)), hbytes]
    for p in params:
        chunks += [_f64(p.W), _f64(p.tau)]
    if optim_state is not None:
        for i in range(len(params)):
            chunks += [_f64(optim_state.m_W[i]), _f64(optim_state.v_W[i]),
                       _f64(optim_state.m_tau[i]), _f64(optim_state.v_tau[i])]
    body = b"".join(chunks)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(body)
        f.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def load_checkpoint(path):
    """Returns ``(spec, params, optim_state_or_None, meta)``."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated")
    body = raw[4:-4]
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    version, hlen = struct.unpack_from("<II", body, 0)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(body[8:8 + hlen].decode("utf-8"))
    off = 8 + hlen

    def take(shape):
        nonlocal off
        count = int(np.prod(shape)) if len(shape) else 1
        a = np.frombuffer(body, dtype="<f8", count=count, offset=off).astype(np.float64)
        off += 8 * count
        return a.reshape(shape)

    try:
        spec = NetworkSpec.from_dict(header["spec"])
        params = []
        for lay in header["layers"]:
            W = take(tuple(lay["W_shape"]))
            tau = take((lay["n_tau"],))
            params.append(LayerParams(lay["kind"], W, tau, lay["kernel_size"],
                                      lay["dilation"], lay["u_th"]))
        state = None
        if header["adam_step"] is not None:
            state = AdamState(header["adam_step"], [], [], [], [])
            for p in params:
                state.m_W.append(take(p.W.shape))
                state.v_W.append(take(p.W.shape))
                state.m_tau.append(take(p.tau.shape))
                state.v_tau.append(take(p.tau.shape))
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: malformed checkpoint ({e})") from e
    if off != len(body):
        raise CheckpointError(f"{path}: {len(body) - off} unexpected trailing bytes")
    return spec, params, state, header["meta"]
