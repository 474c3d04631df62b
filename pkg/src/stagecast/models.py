"""The fully-connected baseline and the composite GRU forecaster.

Both networks keep their weights in a :class:`~stagecast.neural.ParamSet` with
dotted names (``fc0.W``, ``gru2.Uz``, ``head1.b`` ...) and expose the same
``forward`` / ``backward`` pair so the training loop treats them alike.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigMismatch, CorruptCheckpoint, ShapeMismatch
from .neural import (
    GRU_GATES,
    AdamState,
    ParamSet,
    dense,
    dense_backward,
    glorot_uniform,
    gru_recurrence,
    gru_recurrence_backward,
    maxpool_time,
    maxpool_time_backward,
    relu,
    relu_backward,
    stack_gates,
    tanh,
    tanh_backward,
)

CKPT_MAGIC = b"STAGECAST-CKPT v1\n"


def _rng(seed):
    return np.random.Generator(np.random.Philox(seed))


# --- configs -------------------------------------------------------------


@dataclass(frozen=True)
class FCNetConfig:
    widths: tuple = (39, 350, 500, 350, 24)

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ValueError("FC widths need at least an input and an output width")


@dataclass(frozen=True)
class GRUSubnetConfig:
    seq_len: int = 24
    embed: int = 400
    hidden: int = 400
    out: int = 10


@dataclass(frozen=True)
class FCSubnetConfig:
    widths: tuple = (40, 100, 200, 100, 30)

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))


@dataclass(frozen=True)
class ForecasterConfig:
    n_upstream: int = 4
    gru: GRUSubnetConfig = field(default_factory=GRUSubnetConfig)
    fc: FCSubnetConfig = field(default_factory=FCSubnetConfig)
    head_hidden: tuple = (200,)
    output: int = 24

    def __post_init__(self):
        if isinstance(self.gru, dict):
            object.__setattr__(self, "gru", GRUSubnetConfig(**self.gru))
        if isinstance(self.fc, dict):
            object.__setattr__(self, "fc", FCSubnetConfig(**self.fc))
        object.__setattr__(self, "head_hidden", tuple(int(w) for w in self.head_hidden))

    @property
    def n_gru(self) -> int:
        return self.n_upstream + 1

    @property
    def concat_width(self) -> int:
        return self.n_gru * self.gru.out + self.fc.widths[-1]

    @property
    def head_widths(self) -> tuple:
        return (self.concat_width, *self.head_hidden, self.output)

    @property
    def input_len(self) -> int:
        return self.n_gru * self.gru.seq_len + self.fc.widths[0]


# --- shared MLP pieces ---------------------------------------------------


def _init_mlp(params, rng, prefix, widths):
    for i, (a, b) in enumerate(zip(widths, widths[1:])):
        params[f"{prefix}{i}.W"] = glorot_uniform(rng, (a, b), a, b)
        params[f"{prefix}{i}.b"] = np.zeros(b)


def _mlp_forward(x, params, prefix, n_layers):
    """Dense layers, each followed by ReLU."""
    caches = []
    for i in range(n_layers):
        x, c_dense = dense(x, params[f"{prefix}{i}.W"], params[f"{prefix}{i}.b"])
        x, c_relu = relu(x)
        caches.append((c_dense, c_relu))
    return x, caches


def _mlp_backward(dy, caches, prefix, grads):
    for i in range(len(caches) - 1, -1, -1):
        c_dense, c_relu = caches[i]
        dy = relu_backward(dy, c_relu)
        dy, grads[f"{prefix}{i}.W"], grads[f"{prefix}{i}.b"] = dense_backward(dy, c_dense)
    return dy


def _as_batch(x, width, what):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None]
    if x.ndim != 2 or x.shape[1] != width:
        raise ShapeMismatch(f"{what} expects {width} inputs, got shape {x.shape}")
    return x, single


# --- fully-connected baseline ---------------------------------------------


def fc_forward(x, params, config: FCNetConfig = FCNetConfig()):
    x, single = _as_batch(x, config.widths[0], "fc network")
    y, _ = _mlp_forward(x, params, "fc", len(config.widths) - 1)
    return y[0] if single else y


class FCNet:
    """Dense stack with ReLU after every layer, output included."""

    kind = "fc"

    def __init__(self, config: FCNetConfig | None = None, params: ParamSet | None = None):
        self.config = config or FCNetConfig()
        self.params = params if params is not None else ParamSet()

    @property
    def n_inputs(self):
        return self.config.widths[0]

    @property
    def n_outputs(self):
        return self.config.widths[-1]

    def init_params(self, seed=0):
        self.params = ParamSet()
        _init_mlp(self.params, _rng(seed), "fc", self.config.widths)
        return self

    def output_bias_name(self):
        return f"fc{len(self.config.widths) - 2}.b"

    def forward(self, X):
        X, _ = _as_batch(X, self.n_inputs, "fc network")
        return _mlp_forward(X, self.params, "fc", len(self.config.widths) - 1)

    def backward(self, dY, cache):
        grads = {}
        _mlp_backward(dY, cache, "fc", grads)
        return grads

    def predict(self, X):
        return fc_forward(X, self.params, self.config)


def fc_param_count(widths) -> int:
    return sum(a * b + b for a, b in zip(widths, widths[1:]))


# --- GRU subnet ------------------------------------------------------------


def _init_gru_subnet(params, rng, prefix, cfg: GRUSubnetConfig):
    E, H = cfg.embed, cfg.hidden
    params[f"{prefix}emb_w"] = glorot_uniform(rng, (E,), 1, E)
    params[f"{prefix}emb_b"] = np.zeros(E)
    for g in GRU_GATES:
        params[f"{prefix}U{g}"] = glorot_uniform(rng, (E, H), E, H)
        params[f"{prefix}W{g}"] = glorot_uniform(rng, (H, H), H, H)
        params[f"{prefix}b{g}"] = np.zeros(H)
    params[f"{prefix}out.W"] = glorot_uniform(rng, (H, cfg.out), H, cfg.out)
    params[f"{prefix}out.b"] = np.zeros(cfg.out)


def _gru_subnet_forward(series, p):
    """``series`` is ``(B, T)``; ``p`` maps un-prefixed names to tensors.

    The scalar-to-vector embedding ``e_t = x_t * emb_w + emb_b`` is linear, so
    its product with the stacked input matrices collapses to
    ``x_t * (emb_w @ U) + (emb_b @ U + b)``. The recurrence then runs as usual.
    """
    U = stack_gates(p, "U")
    if U.shape[0] != p["emb_w"].shape[0]:
        raise ShapeMismatch("embedding width does not match the GRU input width")
    gain = p["emb_w"] @ U
    shift = p["emb_b"] @ U + stack_gates(p, "b")
    gx = series[:, :, None] * gain + shift
    H = p["Wr"].shape[0]
    states, c_rec = gru_recurrence(gx, np.zeros((series.shape[0], H)), stack_gates(p, "W"))
    act, c_tanh = tanh(states)
    pooled, c_pool = maxpool_time(act)
    out, c_out = dense(pooled, p["out.W"], p["out.b"])
    return out, (series, U, gain, c_rec, c_tanh, c_pool, c_out, p["emb_w"], p["emb_b"])


def _gru_subnet_backward(dy, cache, prefix, grads):
    series, U, gain, c_rec, c_tanh, c_pool, c_out, emb_w, emb_b = cache
    dpooled, grads[f"{prefix}out.W"], grads[f"{prefix}out.b"] = dense_backward(dy, c_out)
    dact = maxpool_time_backward(dpooled, c_pool)
    dstates = tanh_backward(dact, c_tanh)
    dgx, _, dW = gru_recurrence_backward(dstates, c_rec)
    dgain = np.tensordot(series, dgx, axes=([0, 1], [0, 1]))
    dshift = dgx.sum(axis=(0, 1))
    dU = np.outer(emb_w, dgain) + np.outer(emb_b, dshift)
    grads[f"{prefix}emb_w"] = U @ dgain
    grads[f"{prefix}emb_b"] = U @ dshift
    H = dW.shape[0]
    for i, g in enumerate(GRU_GATES):
        sl = slice(i * H, (i + 1) * H)
        grads[f"{prefix}U{g}"] = dU[:, sl]
        grads[f"{prefix}W{g}"] = dW[:, sl]
        grads[f"{prefix}b{g}"] = dshift[sl]
    return dgx @ gain


def gru_subnet_forward(series, params, prefix="gru0."):
    """Embed each hourly value, run the GRU, tanh, max over time, project."""
    p = params.subset(prefix) if isinstance(params, ParamSet) else params
    x = np.asarray(series, dtype=np.float64)
    single = x.ndim == 1
    out, _ = _gru_subnet_forward(x[None] if single else x, p)
    return out[0] if single else out


def fc_subnet_forward(precip, params, config: FCSubnetConfig = FCSubnetConfig()):
    x, single = _as_batch(precip, config.widths[0], "precipitation subnet")
    y, _ = _mlp_forward(x, params, "precip", len(config.widths) - 1)
    return y[0] if single else y


# --- composite forecaster ------------------------------------------------


class GRUForecaster:
    """Five GRU subnets (upstream blocks then the sensor's own history) plus a
    dense precipitation subnet, joined by a ReLU head.

    Input layout: ``n_upstream + 1`` consecutive blocks of ``seq_len`` hourly
    stages, then the precipitation vector.
    """

    kind = "gru"

    def __init__(self, config: ForecasterConfig | None = None, params: ParamSet | None = None):
        self.config = config or ForecasterConfig()
        self.params = params if params is not None else ParamSet()

    @property
    def n_inputs(self):
        return self.config.input_len

    @property
    def n_outputs(self):
        return self.config.output

    def init_params(self, seed=0):
        cfg, rng = self.config, _rng(seed)
        self.params = ParamSet()
        for j in range(cfg.n_gru):
            _init_gru_subnet(self.params, rng, f"gru{j}.", cfg.gru)
        _init_mlp(self.params, rng, "precip", cfg.fc.widths)
        _init_mlp(self.params, rng, "head", cfg.head_widths)
        return self

    def output_bias_name(self):
        return f"head{len(self.config.head_widths) - 2}.b"

    def _blocks(self, X):
        T = self.config.gru.seq_len
        return [X[:, j * T : (j + 1) * T] for j in range(self.config.n_gru)], X[:, self.config.n_gru * T :]

    def forward(self, X):
        cfg = self.config
        X, _ = _as_batch(X, self.n_inputs, "GRU forecaster")
        blocks, rain = self._blocks(X)
        outs, caches = [], []
        for j, block in enumerate(blocks):
            o, c = _gru_subnet_forward(block, self.params.subset(f"gru{j}."))
            outs.append(o)
            caches.append(c)
        o, c_fc = _mlp_forward(rain, self.params, "precip", len(cfg.fc.widths) - 1)
        outs.append(o)
        joined = np.concatenate(outs, axis=1)
        y, c_head = _mlp_forward(joined, self.params, "head", len(cfg.head_widths) - 1)
        return y, (caches, c_fc, c_head)

    def backward(self, dY, cache):
        cfg = self.config
        caches, c_fc, c_head = cache
        grads = {}
        djoined = _mlp_backward(dY, c_head, "head", grads)
        k = cfg.gru.out
        for j, c in enumerate(caches):
            _gru_subnet_backward(djoined[:, j * k : (j + 1) * k], c, f"gru{j}.", grads)
        _mlp_backward(djoined[:, cfg.n_gru * k :], c_fc, "precip", grads)
        return grads

    def predict(self, X):
        X = np.asarray(X, dtype=np.float64)
        y, _ = self.forward(X)
        return y[0] if X.ndim == 1 else y


def forecaster_forward(entry_input, params, config: ForecasterConfig | None = None):
    return GRUForecaster(config, params).predict(entry_input)


# --- checkpoints -----------------------------------------------------------

NETWORKS = {"fc": (FCNet, FCNetConfig), "gru": (GRUForecaster, ForecasterConfig)}


def network_spec(net) -> dict:
    return {"kind": net.kind, "config": asdict(net.config)}


def config_digest(spec: dict) -> str:
    return hashlib.sha256(_canonical(spec)).hexdigest()


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def build_network(spec: dict):
    cls, cfg_cls = NETWORKS[spec["kind"]]
    return cls(cfg_cls(**spec["config"]))


@dataclass
class Checkpoint:
    network: object
    optimizer: AdamState | None = None
    meta: dict = field(default_factory=dict)

    @property
    def params(self):
        return self.network.params

    @property
    def digest(self):
        return config_digest(network_spec(self.network))


def _write_tensors(out, names, table):
    out.write(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(table[name], dtype="<f8")
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)) + raw)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.write(arr.tobytes())


def _read_tensors(view, pos):
    (n,) = struct.unpack_from("<I", view, pos)
    pos += 4
    table = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", view, pos)
        name = bytes(view[pos + 2 : pos + 2 + ln]).decode("utf-8")
        pos += 2 + ln
        (ndim,) = struct.unpack_from("<B", view, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", view, pos)
        pos += 8 * ndim
        count = int(np.prod(shape, dtype=np.int64))
        if pos + 8 * count > len(view):
            raise struct.error("tensor data runs past the end")
        table[name] = np.frombuffer(view, "<f8", count, pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    return table, pos


def dumps_checkpoint(net, optimizer: AdamState | None = None, meta: dict | None = None) -> bytes:
    spec = network_spec(net)
    header = _canonical({"model": spec, "meta": meta or {}})
    out = io.BytesIO()
    out.write(CKPT_MAGIC)
    out.write(struct.pack("<I", len(header)) + header)
    out.write(bytes.fromhex(config_digest(spec)))
    names = net.params.names()
    _write_tensors(out, names, net.params.values)
    if optimizer is None:
        out.write(b"\x00")
    else:
        out.write(b"\x01")
        out.write(struct.pack("<4dQ", optimizer.lr, optimizer.beta1, optimizer.beta2, optimizer.eps, optimizer.step))
        _write_tensors(out, names, optimizer.m)
        _write_tensors(out, names, optimizer.v)
    payload = out.getvalue()
    return payload + hashlib.sha256(payload).digest()


def loads_checkpoint(blob: bytes, expected=None) -> Checkpoint:
    """Decode a checkpoint.

    Args:
        expected: optional network, config object, spec dict or digest; a
            different architecture raises :class:`ConfigMismatch`.
    """
    if len(blob) < len(CKPT_MAGIC) + 32 or not blob.startswith(CKPT_MAGIC):
        raise CorruptCheckpoint("not a STAGECAST-CKPT v1 file")
    payload, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise CorruptCheckpoint("checksum mismatch (truncated or modified file)")
    view = memoryview(payload)
    pos = len(CKPT_MAGIC)
    try:
        (n,) = struct.unpack_from("<I", view, pos)
        header = json.loads(bytes(view[pos + 4 : pos + 4 + n]))
        pos += 4 + n
        stored = bytes(view[pos : pos + 32]).hex()
        pos += 32
        spec = header["model"]
        if config_digest(spec) != stored:
            raise CorruptCheckpoint("config digest does not match the stored config")
        params, pos = _read_tensors(view, pos)
        optimizer = None
        if view[pos] == 1:
            lr, b1, b2, eps, step = struct.unpack_from("<4dQ", view, pos + 1)
            pos += 1 + struct.calcsize("<4dQ")
            m, pos = _read_tensors(view, pos)
            v, pos = _read_tensors(view, pos)
            optimizer = AdamState(lr, b1, b2, eps, step, m, v)
        else:
            pos += 1
        net = build_network(spec)
    except (struct.error, ValueError, KeyError, TypeError, IndexError) as exc:
        raise CorruptCheckpoint(f"malformed checkpoint: {exc}") from None
    if pos != len(payload):
        raise CorruptCheckpoint("trailing bytes in checkpoint")
    net.params = ParamSet(params)

    if expected is not None and _expected_digest(expected) != stored:
        raise ConfigMismatch("checkpoint was written for a different model configuration")
    return Checkpoint(net, optimizer, header.get("meta", {}))


def _expected_digest(expected) -> str:
    if isinstance(expected, str):
        return expected
    if isinstance(expected, dict):
        return config_digest(expected)
    if hasattr(expected, "kind"):
        return config_digest(network_spec(expected))
    kind = "gru" if isinstance(expected, ForecasterConfig) else "fc"
    return config_digest({"kind": kind, "config": asdict(expected)})


def save_checkpoint(net, optimizer, path, meta=None) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_checkpoint(net, optimizer, meta))


def load_checkpoint(path, expected=None) -> Checkpoint:
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read(), expected)
