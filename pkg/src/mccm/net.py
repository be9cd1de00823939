"""Dual-branch dense CNN with three sigmoid heads, written out in numpy.

Each branch is::

    stem 3x3 conv + ReLU
    repeat `blocks` times:
        dense block: `layers_per_block` x (3x3 conv -> `growth` channels + ReLU), concatenated
        transition:  1x1 conv to floor(C/2) + ReLU, 2x2 average pool
    global average pooling -> embedding

The RGB branch feeds the spatial head, the DFT branch the frequency head and
their concatenation the joint head. Activations are NHWC.

The full-scale reference (224 px input, 384-d embeddings from the first
DenseNet161 blocks, ImageNet init) is not instantiated here.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .imgdata import atomic_write_bytes

HEADS = ("spatial", "frequency", "joint")
MODES = ("dual", "rgb_only", "dft_only")
BRANCH_OF_HEAD = {"spatial": "rgb", "frequency": "dft"}


@dataclass(frozen=True)
class NetConfig:
    input_size: int = 64
    stem_channels: int = 16
    blocks: int = 3
    layers_per_block: int = 2
    growth: int = 8
    heads: tuple[str, ...] = HEADS
    seed: int = 0
    # compute precision; gradient checks and the defaults use float64
    dtype: str = "float64"
    # 2x2 average pool after the stem, as in DenseNet's downsampling stem
    stem_pool: bool = False

    def __post_init__(self):
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")
        object.__setattr__(self, "heads", tuple(h for h in HEADS if h in set(self.heads)))
        if not self.heads:
            raise ValueError("at least one head must be enabled")
        unknown = set(self.heads) - set(HEADS)
        if unknown:
            raise ValueError(f"unknown heads {sorted(unknown)}")
        if "joint" in self.heads and len(self.heads) != 3:
            raise ValueError("the joint head needs both branch heads (dual mode)")
        for name in ("stem_channels", "blocks", "layers_per_block", "growth"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.input_size % (2 ** (self.blocks + self.stem_pool)):
            raise ValueError(f"input_size {self.input_size} not divisible by 2**(blocks + stem_pool)")

    @property
    def branches(self) -> tuple[str, ...]:
        return tuple(b for b in ("rgb", "dft") if any(BRANCH_OF_HEAD.get(h) == b for h in self.heads))

    @property
    def mode(self) -> str:
        if len(self.heads) == 3:
            return "dual"
        if self.heads == ("spatial",):
            return "rgb_only"
        if self.heads == ("frequency",):
            return "dft_only"
        return "split"

    def block_channels(self) -> list[tuple[int, int, int]]:
        """Per block: (input channels, concatenated channels, transition output)."""
        out = []
        c = self.stem_channels
        for _ in range(self.blocks):
            cat = c + self.layers_per_block * self.growth
            out.append((c, cat, cat // 2))
            c = cat // 2
        return out

    @property
    def branch_dim(self) -> int:
        return self.block_channels()[-1][2]

    @property
    def embedding_dim(self) -> int:
        return self.branch_dim * len(self.branches)

    def feature_sizes(self) -> list[int]:
        """Spatial size entering each dense block, then after the last transition."""
        first = self.input_size // 2 if self.stem_pool else self.input_size
        return [first // 2**b for b in range(self.blocks + 1)]

    def to_json(self) -> str:
        d = asdict(self)
        d["heads"] = list(self.heads)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NetConfig":
        d = json.loads(text)
        d["heads"] = tuple(d["heads"])
        return cls(**d)

    @classmethod
    def for_mode(cls, mode: str, **kw) -> "NetConfig":
        heads = {"dual": HEADS, "rgb_only": ("spatial",), "dft_only": ("frequency",)}[mode]
        return cls(heads=heads, **kw)


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class NetworkState:
    cfg: NetConfig
    params: dict[str, np.ndarray]
    opt: AdamState = field(default_factory=AdamState)
    best_epoch: int = -1
    best_value: float = math.inf
    version: int = 0

    def copy(self) -> "NetworkState":
        return NetworkState(
            self.cfg,
            {k: v.copy() for k, v in self.params.items()},
            AdamState(self.opt.step, {k: v.copy() for k, v in self.opt.m.items()},
                      {k: v.copy() for k, v in self.opt.v.items()}),
            self.best_epoch,
            self.best_value,
            self.version,
        )


@dataclass
class Embeddings:
    e_s: np.ndarray | None
    e_f: np.ndarray | None
    e_r: np.ndarray | None


# --------------------------------------------------------------------------- init


def param_shapes(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in canonical (initialisation) order."""
    shapes: dict[str, tuple[int, ...]] = {}
    for br in cfg.branches:
        shapes[f"{br}.stem.w"] = (3, 3, 3, cfg.stem_channels)
        shapes[f"{br}.stem.b"] = (cfg.stem_channels,)
        for b, (cin, cat, cout) in enumerate(cfg.block_channels()):
            for j in range(cfg.layers_per_block):
                shapes[f"{br}.b{b}.l{j}.w"] = (3, 3, cin + j * cfg.growth, cfg.growth)
                shapes[f"{br}.b{b}.l{j}.b"] = (cfg.growth,)
            shapes[f"{br}.b{b}.t.w"] = (cat, cout)
            shapes[f"{br}.b{b}.t.b"] = (cout,)
    dims = {"spatial": cfg.branch_dim, "frequency": cfg.branch_dim, "joint": 2 * cfg.branch_dim}
    for h in cfg.heads:
        shapes[f"head.{h}.w"] = (dims[h], 1)
        shapes[f"head.{h}.b"] = (1,)
    return shapes


def init_network(cfg: NetConfig) -> NetworkState:
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=cfg.dtype)
        else:
            fan_in = int(np.prod(shape[:-1]))
            bound = math.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(cfg.dtype)
    return NetworkState(cfg, params)


# --------------------------------------------------------------------------- layers


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _padded(n: int, h: int, w: int, c: int, dtype) -> np.ndarray:
    # one extra bottom row keeps every shifted flat window in bounds
    return np.zeros((n, h + 3, w + 2, c), dtype=dtype)


_TAPS = [(dy, dx) for dy in range(3) for dx in range(3)]


def _conv3x3(xp: np.ndarray, cin: int, w: np.ndarray, b: np.ndarray, h: int, wd: int) -> np.ndarray:
    """3x3 conv over the interior of padded buffer ``xp`` (channels ``:cin``)."""
    n, hp, wp, ctot = xp.shape
    flat = xp.reshape(n * hp * wp, ctot)
    m = n * hp * wp - (2 * wp + 2)
    if cin < 8:
        acc = _im2col(flat, cin, m, wp) @ w.reshape(9 * cin, -1)
    else:
        acc = None
        for dy, dx in _TAPS:
            off = dy * wp + dx
            term = flat[off : off + m, :cin] @ w[dy, dx]
            acc = term if acc is None else acc + term
    full = np.empty((n * hp * wp, w.shape[-1]), dtype=xp.dtype)
    full[:m] = acc
    full[m:] = 0.0
    return full.reshape(n, hp, wp, -1)[:, :h, :wd] + b


def _im2col(flat: np.ndarray, cin: int, m: int, wp: int) -> np.ndarray:
    col = np.empty((m, 9 * cin), dtype=flat.dtype)
    for k, (dy, dx) in enumerate(_TAPS):
        off = dy * wp + dx
        col[:, k * cin : (k + 1) * cin] = flat[off : off + m, :cin]
    return col


def _conv3x3_backward(xp, cin, w, dout, dxp=None):
    """Gradients of ``_conv3x3``; accumulates input grads into padded ``dxp``."""
    n, hp, wp, ctot = xp.shape
    h, wd = dout.shape[1:3]
    flat = xp.reshape(n * hp * wp, ctot)
    m = n * hp * wp - (2 * wp + 2)
    dfull = np.zeros((n, hp, wp, dout.shape[-1]), dtype=xp.dtype)
    dfull[:, :h, :wd] = dout
    dflat = dfull.reshape(n * hp * wp, -1)[:m]
    if cin < 8:
        dw = (_im2col(flat, cin, m, wp).T @ dflat).reshape(w.shape)
    else:
        dw = np.empty_like(w)
        for dy, dx in _TAPS:
            off = dy * wp + dx
            dw[dy, dx] = flat[off : off + m, :cin].T @ dflat
    if dxp is not None:
        dxflat = dxp.reshape(n * hp * wp, -1)
        for dy, dx in _TAPS:
            off = dy * wp + dx
            dxflat[off : off + m, :cin] += dflat @ w[dy, dx].T
    return dw, dout.sum(axis=(0, 1, 2))


def _branch_forward(p: dict, cfg: NetConfig, br: str, x: np.ndarray):
    n, size = x.shape[0], x.shape[1]
    dt = cfg.dtype
    cache = {"x": None, "blocks": []}
    xp = _padded(n, size, size, 3, dt)
    xp[:, 1 : size + 1, 1 : size + 1] = x
    cache["x"] = xp
    stem = np.maximum(_conv3x3(xp, 3, p[f"{br}.stem.w"], p[f"{br}.stem.b"], size, size), 0.0)
    cache["stem"] = stem
    cur = stem
    if cfg.stem_pool:
        cur = stem.reshape(n, size // 2, 2, size // 2, 2, -1).mean(axis=(2, 4))
    for b, (cin, cat, cout) in enumerate(cfg.block_channels()):
        hs = cur.shape[1]
        buf = _padded(n, hs, hs, cat, dt)
        buf[:, 1 : hs + 1, 1 : hs + 1, :cin] = cur
        c = cin
        for j in range(cfg.layers_per_block):
            out = _conv3x3(buf, c, p[f"{br}.b{b}.l{j}.w"], p[f"{br}.b{b}.l{j}.b"], hs, hs)
            buf[:, 1 : hs + 1, 1 : hs + 1, c : c + cfg.growth] = np.maximum(out, 0.0)
            c += cfg.growth
        inner = buf[:, 1 : hs + 1, 1 : hs + 1].reshape(-1, cat)
        t = np.maximum(inner @ p[f"{br}.b{b}.t.w"] + p[f"{br}.b{b}.t.b"], 0.0).reshape(n, hs, hs, cout)
        cur = t.reshape(n, hs // 2, 2, hs // 2, 2, cout).mean(axis=(2, 4))
        cache["blocks"].append({"buf": buf, "t": t})
    cache["last"] = cur
    return cur.mean(axis=(1, 2)), cache


def _branch_backward(p: dict, cfg: NetConfig, br: str, cache, d_emb: np.ndarray, grads: dict) -> None:
    last = cache["last"]
    n, hs = last.shape[0], last.shape[1]
    d_cur = np.broadcast_to(d_emb[:, None, None, :] / (hs * hs), last.shape)
    for b in reversed(range(cfg.blocks)):
        cin, cat, cout = cfg.block_channels()[b]
        blk = cache["blocks"][b]
        buf, t = blk["buf"], blk["t"]
        hs = t.shape[1]
        # average pool, then ReLU
        d_t = np.repeat(np.repeat(d_cur, 2, axis=1), 2, axis=2) * 0.25
        d_t = d_t * (t > 0)
        inner = buf[:, 1 : hs + 1, 1 : hs + 1].reshape(-1, cat)
        d_t2 = d_t.reshape(-1, cout)
        grads[f"{br}.b{b}.t.w"] = inner.T @ d_t2
        grads[f"{br}.b{b}.t.b"] = d_t2.sum(axis=0)
        dbuf = np.zeros_like(buf)
        dbuf[:, 1 : hs + 1, 1 : hs + 1] = (d_t2 @ p[f"{br}.b{b}.t.w"].T).reshape(n, hs, hs, cat)
        for j in reversed(range(cfg.layers_per_block)):
            c = cin + j * cfg.growth
            out = buf[:, 1 : hs + 1, 1 : hs + 1, c : c + cfg.growth]
            d_out = dbuf[:, 1 : hs + 1, 1 : hs + 1, c : c + cfg.growth] * (out > 0)
            dw, db = _conv3x3_backward(buf, c, p[f"{br}.b{b}.l{j}.w"], d_out, dbuf)
            grads[f"{br}.b{b}.l{j}.w"] = dw
            grads[f"{br}.b{b}.l{j}.b"] = db
        d_cur = dbuf[:, 1 : hs + 1, 1 : hs + 1, :cin]
    if cfg.stem_pool:
        d_cur = np.repeat(np.repeat(d_cur, 2, axis=1), 2, axis=2) * 0.25
    d_stem = d_cur * (cache["stem"] > 0)
    dw, db = _conv3x3_backward(cache["x"], 3, p[f"{br}.stem.w"], d_stem, None)
    grads[f"{br}.stem.w"] = dw
    grads[f"{br}.stem.b"] = db


# --------------------------------------------------------------------------- forward / backward


@dataclass
class ForwardCache:
    version: int
    batch: int
    branch: dict
    emb: dict
    probs: dict


def _check_batch(cfg: NetConfig, x, name: str) -> np.ndarray:
    if x is None:
        raise ValueError(f"{name} input required by the enabled heads")
    x = np.asarray(x, dtype=cfg.dtype)
    s = cfg.input_size
    if x.ndim != 4 or x.shape[1:] != (s, s, 3):
        raise ValueError(f"{name} batch must have shape (N, {s}, {s}, 3), got {x.shape}")
    return x


def forward(state: NetworkState, rgb=None, freq=None):
    """Returns ``(probs, embeddings, cache)``; ``probs`` maps head name to ``(N,)``."""
    cfg, p = state.cfg, state.params
    inputs = {"rgb": rgb, "dft": freq}
    emb, branch_cache = {}, {}
    n = None
    for br in cfg.branches:
        x = _check_batch(cfg, inputs[br], br)
        if n is not None and x.shape[0] != n:
            raise ValueError("rgb and freq batches differ in size")
        n = x.shape[0]
        emb[br], branch_cache[br] = _branch_forward(p, cfg, br, x)
    feats = {"spatial": emb.get("rgb"), "frequency": emb.get("dft")}
    if "joint" in cfg.heads:
        feats["joint"] = np.concatenate([emb["rgb"], emb["dft"]], axis=1)
    probs = {}
    for h in cfg.heads:
        z = feats[h] @ p[f"head.{h}.w"] + p[f"head.{h}.b"]
        probs[h] = _sigmoid(z[:, 0])
    embeddings = Embeddings(emb.get("rgb"), emb.get("dft"), feats.get("joint"))
    cache = ForwardCache(state.version, n, branch_cache, feats, probs)
    return probs, embeddings, cache


def backward(state: NetworkState, cache: ForwardCache, head_grads: dict) -> dict[str, np.ndarray]:
    """Parameter gradients given ``dL/dp`` for each head probability."""
    if cache.version != state.version:
        raise ValueError("forward cache is stale: parameters changed since the forward pass")
    cfg, p = state.cfg, state.params
    grads: dict[str, np.ndarray] = {}
    d_emb = {br: np.zeros((cache.batch, cfg.branch_dim), dtype=cfg.dtype) for br in cfg.branches}
    for h in cfg.heads:
        g = head_grads.get(h)
        g = np.zeros(cache.batch, dtype=cfg.dtype) if g is None else np.asarray(g, dtype=cfg.dtype).reshape(-1)
        if g.shape[0] != cache.batch:
            raise ValueError(f"gradient for head {h!r} has {g.shape[0]} entries, batch is {cache.batch}")
        pr = cache.probs[h]
        dz = (g * pr * (1.0 - pr))[:, None]
        grads[f"head.{h}.w"] = cache.emb[h].T @ dz
        grads[f"head.{h}.b"] = dz.sum(axis=0)
        de = dz @ p[f"head.{h}.w"].T
        if h == "joint":
            d_emb["rgb"] += de[:, : cfg.branch_dim]
            d_emb["dft"] += de[:, cfg.branch_dim :]
        else:
            d_emb[BRANCH_OF_HEAD[h]] += de
    for br in cfg.branches:
        _branch_backward(p, cfg, br, cache.branch[br], d_emb[br], grads)
    return {k: grads[k] for k in p}


def predict(state: NetworkState, rgb=None, freq=None, mode: str | None = None) -> np.ndarray:
    """Pristine-class score in (0, 1): joint head for dual, else the single head."""
    cfg = state.cfg
    mode = mode or cfg.mode
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if mode != cfg.mode:
        raise ValueError(f"mode {mode!r} does not match network configured as {cfg.mode!r}")
    head = {"dual": "joint", "rgb_only": "spatial", "dft_only": "frequency"}[mode]
    probs, _, _ = forward(state, rgb if "rgb" in cfg.branches else None, freq if "dft" in cfg.branches else None)
    return probs[head]


# --------------------------------------------------------------------------- optimiser


def adam_step(
    state: NetworkState,
    grads: dict[str, np.ndarray],
    lr: float = 1e-4,
    wd: float = 1e-5,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    decoupled: bool = False,
) -> NetworkState:
    """One in-place Adam update with bias correction.

    Weight decay enters as an L2 gradient term unless ``decoupled`` is set.
    """
    b1, b2 = betas
    opt = state.opt
    opt.step += 1
    t = opt.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, theta in state.params.items():
        g = grads[name]
        if wd and not decoupled:
            g = g + wd * theta
        m = opt.m.get(name)
        if m is None:
            m = opt.m[name] = np.zeros_like(theta)
            opt.v[name] = np.zeros_like(theta)
        v = opt.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if wd and decoupled:
            update = update + lr * wd * theta
        theta -= update
    state.version += 1
    return state


# --------------------------------------------------------------------------- checkpoints

MAGIC = b"MCCM"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def encode_checkpoint(state: NetworkState) -> bytes:
    cfg_raw = state.cfg.to_json().encode("utf-8")
    out = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(cfg_raw)), cfg_raw]
    names = list(state.params)
    out.append(struct.pack("<I", len(names)))
    out.extend(_pack_array(n, state.params[n]) for n in names)
    has_moments = bool(state.opt.m)
    out.append(struct.pack("<QB", state.opt.step, int(has_moments)))
    if has_moments:
        for n in names:
            out.append(_pack_array(n, state.opt.m[n]))
            out.append(_pack_array(n, state.opt.v[n]))
    out.append(struct.pack("<qd", state.best_epoch, state.best_value))
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {len(self.buf)} (needed {self.pos + n})")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self) -> tuple[str, np.ndarray]:
        (ln,) = self.unpack("<H")
        name = self.take(ln).decode("utf-8")
        (ndim,) = self.unpack("<B")
        shape = self.unpack(f"<{ndim}Q")
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape)
        return name, data


def decode_checkpoint(buf: bytes) -> NetworkState:
    if len(buf) < 4:
        raise CheckpointTruncatedError("checkpoint shorter than its magic number")
    if buf[:4] != MAGIC:
        raise CheckpointMagicError(f"bad checkpoint magic {buf[:4]!r}")
    r = _Reader(buf)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    (cfg_len,) = r.unpack("<I")
    cfg = NetConfig.from_json(r.take(cfg_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    params = {k: v.astype(cfg.dtype) for k, v in (r.array() for _ in range(count))}
    expected = param_shapes(cfg)
    if {k: v.shape for k, v in params.items()} != expected:
        raise CheckpointError("checkpoint parameters do not match its network configuration")
    step, has_moments = r.unpack("<QB")
    opt = AdamState(step)
    if has_moments:
        for _ in range(count):
            name, m = r.array()
            _, v = r.array()
            opt.m[name], opt.v[name] = m.astype(cfg.dtype), v.astype(cfg.dtype)
    best_epoch, best_value = r.unpack("<qd")
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after checkpoint")
    return NetworkState(cfg, params, opt, best_epoch, best_value)


def save_checkpoint(state: NetworkState, path) -> None:
    atomic_write_bytes(path, encode_checkpoint(state))


def load_checkpoint(path) -> NetworkState:
    return decode_checkpoint(Path(path).read_bytes())
