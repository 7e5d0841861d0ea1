"""Conditioned conv + GRU enhancer with hand-derived gradients.

Topology::

    features (68) -> conv1 (k=3) -> tanh -> conv2 (k=3) -> tanh
      -> concat condition (D+1) -> GRU x L -> sigmoid heads (gains, strengths, vad)

Both convolutions look one frame ahead, so the output produced at step ``s``
describes frame ``s - LOOKAHEAD``. Conditions are consumed at the step they
are supplied, i.e. with the same two-frame look-ahead as the features.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .postproc import EnhancerOutput

LOOKAHEAD = 2
CKPT_MAGIC = b"UPNCKPT1"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    feat_dim: int = 68
    cond_dim: int = 33
    conv_channels: int = 64
    gru_layers: int = 3
    gru_hidden: int = 128
    n_bands: int = 32

    def __post_init__(self):
        for name in ("cond_dim", "conv_channels", "gru_layers", "gru_hidden", "n_bands"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.feat_dim != 2 * self.n_bands + 4:
            raise ValueError("feat_dim must equal 2 * n_bands + 4")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        c, h = self.conv_channels, self.gru_hidden
        shapes = {
            "conv1.weight": (c, 3 * self.feat_dim),
            "conv1.bias": (c,),
            "conv2.weight": (c, 3 * c),
            "conv2.bias": (c,),
        }
        for layer in range(self.gru_layers):
            n_in = c + self.cond_dim if layer == 0 else h
            shapes[f"gru{layer}.W"] = (3 * h, n_in)
            shapes[f"gru{layer}.U"] = (3 * h, h)
            shapes[f"gru{layer}.b"] = (3 * h,)
        shapes["head_gain.weight"] = (self.n_bands, h)
        shapes["head_gain.bias"] = (self.n_bands,)
        shapes["head_strength.weight"] = (self.n_bands, h)
        shapes["head_strength.bias"] = (self.n_bands,)
        shapes["head_vad.weight"] = (1, h)
        shapes["head_vad.bias"] = (1,)
        return shapes

    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())

    @classmethod
    def from_params(cls, params: dict) -> "NetConfig":
        c, three_f = params["conv1.weight"].shape
        layers = sum(1 for k in params if k.endswith(".U"))
        h = params["gru0.U"].shape[1]
        return cls(feat_dim=three_f // 3, cond_dim=params["gru0.W"].shape[1] - c,
                   conv_channels=c, gru_layers=layers, gru_hidden=h,
                   n_bands=params["head_gain.weight"].shape[0])


def init_params(config: NetConfig = NetConfig(), seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    """Uniform(+-sqrt(1/fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in config.param_shapes().items():
        if name.endswith("bias") or name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            bound = np.sqrt(1.0 / shape[1])
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


def zero_params(config: NetConfig = NetConfig(), dtype=np.float64) -> dict[str, np.ndarray]:
    return {k: np.zeros(s, dtype=dtype) for k, s in config.param_shapes().items()}


@dataclass
class NetState:
    """Per-stream recurrent state: conv ring buffers and GRU hidden vectors."""

    x_hist: np.ndarray            # (B, 2, feat_dim), normalised inputs
    a_hist: np.ndarray            # (B, 2, conv_channels)
    hidden: list = field(default_factory=list)  # per layer (B, H)

    @classmethod
    def zeros(cls, config: NetConfig, batch: int = 1, dtype=np.float32) -> "NetState":
        return cls(np.zeros((batch, 2, config.feat_dim), dtype=dtype),
                   np.zeros((batch, 2, config.conv_channels), dtype=dtype),
                   [np.zeros((batch, config.gru_hidden), dtype=dtype)
                    for _ in range(config.gru_layers)])

    def copy(self) -> "NetState":
        return NetState(self.x_hist.copy(), self.a_hist.copy(), [h.copy() for h in self.hidden])


def normalize_features(feats: np.ndarray) -> np.ndarray:
    """Fixed squashing of raw features into O(1) network inputs."""
    f = np.array(feats, dtype=np.float64, copy=True)
    nb = (f.shape[-1] - 4) // 2
    f[..., :nb] = (np.log10(f[..., :nb] ** 2 + 1e-10) + 3.0) / 4.0
    f[..., 2 * nb + 2] = f[..., 2 * nb + 2] / 40.0
    f[..., 2 * nb + 3] = np.clip(f[..., 2 * nb + 3] / 20.0, -2.0, 2.0)
    return f


def silence_features(feat_dim: int = 68) -> np.ndarray:
    """Raw feature row produced by digital silence."""
    f = np.zeros(feat_dim)
    nb = (feat_dim - 4) // 2
    f[2 * nb] = 100 / 800  # lowest lag over the largest lag
    f[2 * nb + 2] = -100.0
    return f


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _stack3(seq: np.ndarray) -> np.ndarray:
    """(B, T+2, F) -> (B, T, 3F) windows [s, s+1, s+2]."""
    t = seq.shape[1] - 2
    return np.concatenate([seq[:, :t], seq[:, 1:t + 1], seq[:, 2:t + 2]], axis=-1)


def _affine(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``x @ weight.T + bias`` for (B, T, K) inputs, one time step per product.

    A single (B*T)-row product may round differently depending on T, which
    would break bit-exact equivalence between chunked and whole-sequence runs.
    """
    b, t, _ = x.shape
    wt = weight.T.copy()
    out = np.empty((b, t, weight.shape[0]), dtype=np.result_type(x, weight))
    for s in range(t):
        out[:, s] = x[:, s] @ wt + bias
    return out


def _as_batch(a, dtype) -> np.ndarray:
    a = np.asarray(a, dtype=dtype)
    return a[None] if a.ndim == 2 else a


def forward(params: dict, features, conditions, state: NetState | None = None,
            *, return_cache: bool = False):
    """Run the network over a (batched) sequence.

    ``features`` is (T, 68) or (B, T, 68) of raw features, ``conditions`` the
    matching (.., T, D+1). Returns ``(EnhancerOutput, new_state)``; with
    ``return_cache`` a third element holds intermediates for :func:`backward`.
    Computation runs in the dtype of the parameters.
    """
    dtype = params["conv1.weight"].dtype
    cfg = NetConfig.from_params(params)
    squeeze = np.ndim(features) == 2
    x = _as_batch(normalize_features(features), dtype)
    cond = _as_batch(conditions, dtype)
    b, t, f = x.shape
    if f != cfg.feat_dim or cond.shape != (b, t, cfg.cond_dim):
        raise ValueError(f"shape mismatch: features {x.shape}, conditions {cond.shape}, config {cfg}")
    if state is None:
        state = NetState.zeros(cfg, b, dtype)
    if state.x_hist.shape[0] != b or len(state.hidden) != cfg.gru_layers:
        raise ValueError("state does not match batch size or configuration")

    xe = np.concatenate([state.x_hist.astype(dtype), x], axis=1)
    x3 = _stack3(xe)
    a = np.tanh(_affine(x3, params["conv1.weight"], params["conv1.bias"]))
    ae = np.concatenate([state.a_hist.astype(dtype), a], axis=1)
    a3 = _stack3(ae)
    c = np.tanh(_affine(a3, params["conv2.weight"], params["conv2.bias"]))

    # unit-norm embeddings have O(1/sqrt(D)) entries; lift them to O(1) like the features
    emb_gain = np.sqrt(cfg.cond_dim - 1)
    cond = np.concatenate([cond[..., :-1] * dtype.type(emb_gain), cond[..., -1:]], axis=-1)
    layer_in = np.concatenate([c, cond], axis=-1)
    h_dim = cfg.gru_hidden
    new_hidden = []
    gru_cache = []
    for layer in range(cfg.gru_layers):
        W, U, bias = params[f"gru{layer}.W"], params[f"gru{layer}.U"], params[f"gru{layer}.b"]
        gx = _affine(layer_in, W, bias)
        U_rz, U_n = U[:2 * h_dim].T.copy(), U[2 * h_dim:].T.copy()
        h = state.hidden[layer].astype(dtype)
        hs = np.empty((b, t, h_dim), dtype=dtype)
        if return_cache:
            rs = np.empty_like(hs)
            zs = np.empty_like(hs)
            ns = np.empty_like(hs)
            hprev = np.empty_like(hs)
        for s in range(t):
            g = gx[:, s]
            rz = _sigmoid(g[:, :2 * h_dim] + h @ U_rz)
            r, z = rz[:, :h_dim], rz[:, h_dim:]
            n = np.tanh(g[:, 2 * h_dim:] + (r * h) @ U_n)
            if return_cache:
                rs[:, s], zs[:, s], ns[:, s], hprev[:, s] = r, z, n, h
            h = n + z * (h - n)
            hs[:, s] = h
        new_hidden.append(h)
        if return_cache:
            gru_cache.append((layer_in, rs, zs, ns, hprev, hs))
        layer_in = hs

    top = layer_in
    gains = _sigmoid(_affine(top, params["head_gain.weight"], params["head_gain.bias"]))
    strengths = _sigmoid(_affine(top, params["head_strength.weight"], params["head_strength.bias"]))
    vad = _sigmoid(_affine(top, params["head_vad.weight"], params["head_vad.bias"]))[..., 0]

    new_state = NetState(xe[:, -2:].copy(), ae[:, -2:].copy(), new_hidden)
    if squeeze:
        out = EnhancerOutput(gains[0], strengths[0], vad[0])
    else:
        out = _BatchOutput(gains, strengths, vad)
    if not return_cache:
        return out, new_state
    cache = dict(x3=x3, a=a, a3=a3, c=c, gru=gru_cache, top=top, gains=gains,
                 strengths=strengths, vad=vad, squeeze=squeeze)
    return out, new_state, cache


@dataclass(frozen=True)
class _BatchOutput:
    """Batched network outputs, (B, T, n_bands) / (B, T); kept in compute dtype."""

    gains: np.ndarray
    strengths: np.ndarray
    vad: np.ndarray

    def __len__(self):
        return self.gains.shape[0]

    def sequence(self, i: int) -> EnhancerOutput:
        return EnhancerOutput(self.gains[i], self.strengths[i], self.vad[i])


def backward_from_cache(params: dict, cache: dict, grads_out) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar loss given d(loss)/d(outputs).

    ``grads_out`` exposes ``gains``, ``strengths`` and ``vad`` arrays (or a dict
    with those keys) shaped like the forward outputs. Gradients do not flow
    into the incoming state.
    """
    get = (lambda k: grads_out[k]) if isinstance(grads_out, dict) else (lambda k: getattr(grads_out, k))
    dtype = params["conv1.weight"].dtype
    cfg = NetConfig.from_params(params)
    h_dim = cfg.gru_hidden

    def batch(a):
        a = np.asarray(a, dtype=dtype)
        return a[None] if cache["squeeze"] else a

    d_gain = batch(get("gains")) * cache["gains"] * (1 - cache["gains"])
    d_str = batch(get("strengths")) * cache["strengths"] * (1 - cache["strengths"])
    d_vad = (batch(get("vad")) * cache["vad"] * (1 - cache["vad"]))[..., None]
    top = cache["top"]
    grads = {}

    def flat(a):
        return a.reshape(-1, a.shape[-1])

    grads["head_gain.weight"] = flat(d_gain).T @ flat(top)
    grads["head_gain.bias"] = d_gain.sum(axis=(0, 1))
    grads["head_strength.weight"] = flat(d_str).T @ flat(top)
    grads["head_strength.bias"] = d_str.sum(axis=(0, 1))
    grads["head_vad.weight"] = flat(d_vad).T @ flat(top)
    grads["head_vad.bias"] = d_vad.sum(axis=(0, 1))
    d_top = (d_gain @ params["head_gain.weight"] + d_str @ params["head_strength.weight"]
             + d_vad @ params["head_vad.weight"])

    d_hs = d_top
    for layer in reversed(range(cfg.gru_layers)):
        layer_in, rs, zs, ns, hprev, _ = cache["gru"][layer]
        U = params[f"gru{layer}.U"]
        U_rz, U_n = U[:2 * h_dim], U[2 * h_dim:]
        b, t, _ = d_hs.shape
        d_gx = np.empty((b, t, 3 * h_dim), dtype=dtype)
        dU_rz = np.zeros((2 * h_dim, h_dim), dtype=dtype)
        dU_n = np.zeros((h_dim, h_dim), dtype=dtype)
        dh_next = np.zeros((b, h_dim), dtype=dtype)
        for s in reversed(range(t)):
            r, z, n, h = rs[:, s], zs[:, s], ns[:, s], hprev[:, s]
            dh = d_hs[:, s] + dh_next
            dz = dh * (h - n)
            da_n = dh * (1 - z) * (1 - n * n)
            d_rh = da_n @ U_n
            da_r = d_rh * h * r * (1 - r)
            da_z = dz * z * (1 - z)
            da_rz = np.concatenate([da_r, da_z], axis=1)
            dU_n += da_n.T @ (r * h)
            dU_rz += da_rz.T @ h
            dh_next = dh * z + d_rh * r + da_rz @ U_rz
            d_gx[:, s, :2 * h_dim] = da_rz
            d_gx[:, s, 2 * h_dim:] = da_n
        grads[f"gru{layer}.U"] = np.concatenate([dU_rz, dU_n], axis=0)
        grads[f"gru{layer}.W"] = flat(d_gx).T @ flat(layer_in)
        grads[f"gru{layer}.b"] = d_gx.sum(axis=(0, 1))
        d_hs = d_gx @ params[f"gru{layer}.W"]  # gradient w.r.t. this layer's input

    d_c = d_hs[..., :cfg.conv_channels]
    c, a3, a, x3 = cache["c"], cache["a3"], cache["a"], cache["x3"]
    d_pre2 = d_c * (1 - c * c)
    grads["conv2.weight"] = flat(d_pre2).T @ flat(a3)
    grads["conv2.bias"] = d_pre2.sum(axis=(0, 1))
    d_a3 = d_pre2 @ params["conv2.weight"]
    ch = cfg.conv_channels
    t = d_a3.shape[1]
    d_ae = np.zeros((d_a3.shape[0], t + 2, ch), dtype=dtype)
    for k in range(3):
        d_ae[:, k:k + t] += d_a3[..., k * ch:(k + 1) * ch]
    d_a = d_ae[:, 2:]
    d_pre1 = d_a * (1 - a * a)
    grads["conv1.weight"] = flat(d_pre1).T @ flat(x3)
    grads["conv1.bias"] = d_pre1.sum(axis=(0, 1))
    return {k: grads[k].astype(dtype, copy=False) for k in params}


def backward(params: dict, features, conditions, grads_out, state: NetState | None = None) -> dict:
    _, _, cache = forward(params, features, conditions, state, return_cache=True)
    return backward_from_cache(params, cache, grads_out)


def infer(params: dict, features, conditions) -> EnhancerOutput:
    """Offline inference aligned to frames.

    Feeds two trailing padding steps (zero features, last condition repeated)
    and drops the first ``LOOKAHEAD`` outputs, so row ``t`` describes frame ``t``.
    """
    features = np.asarray(features, dtype=np.float64)
    conditions = np.asarray(conditions, dtype=np.float64)
    if len(features) == 0:
        return EnhancerOutput(np.zeros((0, NetConfig.from_params(params).n_bands)),
                              np.zeros((0, NetConfig.from_params(params).n_bands)), np.zeros(0))
    pad_f = np.repeat(silence_features(features.shape[1])[None], LOOKAHEAD, axis=0)
    pad_c = np.repeat(conditions[-1:], LOOKAHEAD, axis=0)
    out, _ = forward(params, np.concatenate([features, pad_f]), np.concatenate([conditions, pad_c]))
    return out[LOOKAHEAD:]


# ---------------------------------------------------------------------------
# checkpoints

def save_params(params: dict, path) -> None:
    """Write a checkpoint atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(params))]
    for name, value in params.items():
        arr = np.asarray(value)
        enc = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(enc)) + enc)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f4").tobytes())
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(b"".join(chunks))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_params(path, config: NetConfig | None = None) -> dict[str, np.ndarray]:
    """Read a checkpoint; optionally verify tensor shapes against ``config``."""
    data = Path(path).read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated while reading {what}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(8, "magic") != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not an enhancer checkpoint")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    params = {}
    for _ in range(count):
        (n_name,) = struct.unpack("<I", take(4, "tensor name length"))
        name = take(n_name, "tensor name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name}"))
        n_val = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(take(4 * n_val, f"values of {name}"), dtype="<f4")
        params[name] = values.reshape(dims).astype(np.float32)
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    if config is not None:
        expected = config.param_shapes()
        for name, shape in expected.items():
            if name not in params:
                raise CheckpointError(f"{path}: missing tensor {name}")
            if params[name].shape != shape:
                raise CheckpointError(
                    f"{path}: tensor {name} has shape {params[name].shape}, expected {shape}")
        extra = set(params) - set(expected)
        if extra:
            raise CheckpointError(f"{path}: unexpected tensors {sorted(extra)}")
    return params
