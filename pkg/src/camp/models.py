"""CAMP-I (convolutional autoencoder) and CAMP-II (classifier) networks.

Both builders realize the published layer tables exactly at 256x256 input.
Smaller square inputs (any multiple of 8, e.g. 32 or 64) give scaled-down
variants with the same layer pattern for fast tests; only the Flatten/Dense
sizes of CAMP-II change with input size.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import DataError
from .tensor import Parameter, Tensor

# (layer type, output shape without batch axis, parameter count)
TABLE_I = [
    ("InputLayer", (256, 256, 1), 0),
    ("Conv2D", (256, 256, 64), 640),
    ("MaxPooling2D", (128, 128, 64), 0),
    ("Conv2D", (128, 128, 32), 18464),
    ("MaxPooling2D", (64, 64, 32), 0),
    ("Conv2DTranspose", (128, 128, 32), 9248),
    ("Conv2DTranspose", (256, 256, 64), 18496),
    ("Conv2D", (256, 256, 1), 577),
]

TABLE_II = [
    ("InputLayer", (256, 256, 1), 0),
    ("Conv2D", (256, 256, 64), 640),
    ("MaxPooling2D", (128, 128, 64), 0),
    ("Conv2D", (128, 128, 32), 18464),
    ("MaxPooling2D", (64, 64, 32), 0),
    ("Reshape", (64, 64, 32), 0),
    ("BatchNormalization", (64, 64, 32), 128),
    ("Conv2D", (64, 64, 32), 4128),
    ("MaxPooling2D", (32, 32, 32), 0),
    ("BatchNormalization", (32, 32, 32), 128),
    ("Conv2D", (32, 32, 64), 8256),
    ("Flatten", (65536,), 0),
    ("Dense", (64,), 4194368),
    ("Dense", (1,), 65),
]

_TABLE_TYPE = {
    "input": "InputLayer", "conv": "Conv2D", "conv_transpose": "Conv2DTranspose",
    "maxpool": "MaxPooling2D", "reshape": "Reshape", "batchnorm": "BatchNormalization",
    "flatten": "Flatten", "dense": "Dense",
}

# encoder layers shared by both networks; copied by transfer_encoder_weights
ENCODER_LAYERS = ("conv1", "conv2")

# layer whose sigmoid activations feed the sparsity regularizer
REGULARIZED_LAYER = "dense1_act"


@dataclass
class LayerSpec:
    kind: str
    name: str
    hyper: dict = field(default_factory=dict)
    out_shape: tuple = ()
    param_count: int = 0


class ModelGraph:
    """An ordered stack of layers with named parameters.

    ``mode`` is ``"train"`` or ``"infer"``; it switches dropout and batch
    normalization behaviour.
    """

    def __init__(self, name, arch, size, seed, layers, parameters, dtype, config):
        self.name = name
        self.arch = arch
        self.size = size
        self.seed = seed
        self.layers = layers
        self.parameters = parameters
        self.dtype = dtype
        self.config = dict(config)
        self.mode = "infer"

    def __repr__(self):
        return f"ModelGraph({self.name!r}, {len(self.layers)} layers, {self.total_parameters()} params)"

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "infer"
        return self

    def param(self, name):
        return self.parameters[name]

    def trainable(self, exclude=()):
        skip = set(exclude)
        return [p for p in self.parameters.values()
                if p.trainable and p.name.split(".")[0] not in skip]

    def zero_grad(self):
        for p in self.parameters.values():
            p.zero_grad()

    def total_parameters(self):
        return sum(p.size for p in self.parameters.values())

    def layer(self, name):
        for spec in self.layers:
            if spec.name == name:
                return spec
        raise KeyError(f"model {self.name!r} has no layer {name!r}")

    # ------------------------------------------------------------------
    def _apply(self, spec, x, rng):
        kind, h = spec.kind, spec.hyper
        training = self.mode == "train"
        if kind == "input":
            return x
        if kind == "conv":
            return T.conv2d(x, self.parameters[f"{spec.name}.kernel"].value,
                            self.parameters[f"{spec.name}.bias"].value, stride=1, padding="same")
        if kind == "conv_transpose":
            return T.conv2d_transpose(x, self.parameters[f"{spec.name}.kernel"].value,
                                      self.parameters[f"{spec.name}.bias"].value, stride=h["stride"])
        if kind == "maxpool":
            return T.maxpool2d(x)
        if kind == "batchnorm":
            p = self.parameters
            return T.batchnorm2d(x, p[f"{spec.name}.gamma"].value, p[f"{spec.name}.beta"].value,
                                 p[f"{spec.name}.running_mean"].data, p[f"{spec.name}.running_var"].data,
                                 training=training, momentum=self.config["bn_momentum"],
                                 eps=self.config["bn_eps"])
        if kind == "dense":
            return T.dense(x, self.parameters[f"{spec.name}.kernel"].value,
                           self.parameters[f"{spec.name}.bias"].value)
        if kind == "activation":
            if h["fn"] == "leaky_relu":
                return T.leaky_relu(x, h["alpha"])
            return T.sigmoid(x)
        if kind == "dropout":
            if training and h["rate"] > 0 and rng is None:
                raise ValueError("dropout in train mode needs an rng")
            return T.dropout(x, h["rate"], training, rng)
        if kind == "flatten":
            return T.flatten(x)
        if kind == "reshape":
            return T.reshape(x, (x.shape[0],) + tuple(h["target"]))
        raise ValueError(f"unknown layer kind {kind!r}")

    def run(self, x, rng=None, until=None):
        """Forward pass returning ``{layer name: output tensor}`` in order.

        ``x`` is ``[N, H, W]`` or ``[N, H, W, 1]``; stops after layer ``until``.
        """
        if not isinstance(x, Tensor):
            x = np.asarray(x)
            if x.ndim == 3:
                x = x[..., None]
            x = Tensor(x.astype(self.dtype, copy=False))
        elif x.data.ndim == 3:
            x = T.reshape(x, x.shape + (1,))
        outs = {}
        for spec in self.layers:
            x = self._apply(spec, x, rng)
            outs[spec.name] = x
            if spec.name == until:
                break
        return outs

    def forward(self, x, rng=None):
        return list(self.run(x, rng).values())[-1]

    def predict(self, x, batch_size=16):
        """Inference-mode outputs as a numpy array (no tape)."""
        prev = self.mode
        self.mode = "infer"
        try:
            x = np.asarray(x)
            chunks = [self.forward(x[i:i + batch_size]).data for i in range(0, len(x), batch_size)]
        finally:
            self.mode = prev
        return np.concatenate(chunks)


# --------------------------------------------------------------------------
# building
# --------------------------------------------------------------------------

def _he_uniform(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class _Builder:
    def __init__(self, size, seed, dtype, alpha):
        self.shape = (size, size, 1)
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.alpha = alpha
        self.layers = [LayerSpec("input", "input", {}, self.shape, 0)]
        self.params = {}

    def _add(self, kind, name, hyper, out_shape, params=()):
        for p in params:
            self.params[p.name] = p
        spec = LayerSpec(kind, name, hyper, tuple(out_shape), sum(p.size for p in params))
        self.layers.append(spec)
        self.shape = tuple(out_shape)

    def act(self, name, fn="leaky_relu"):
        hyper = {"fn": fn, "alpha": self.alpha} if fn == "leaky_relu" else {"fn": fn}
        self._add("activation", name, hyper, self.shape)

    def conv(self, name, filters, k, act="leaky_relu"):
        h, w, c = self.shape
        kernel = _he_uniform(self.rng, (k, k, c, filters), k * k * c, self.dtype)
        params = (Parameter(f"{name}.kernel", kernel), Parameter(f"{name}.bias", np.zeros(filters, self.dtype)))
        self._add("conv", name, {"filters": filters, "kernel": k, "stride": 1}, (h, w, filters), params)
        self.act(f"{name}_act", act)

    def conv_transpose(self, name, filters, k, stride, act="leaky_relu"):
        h, w, c = self.shape
        kernel = _he_uniform(self.rng, (k, k, c, filters), k * k * c, self.dtype)
        params = (Parameter(f"{name}.kernel", kernel), Parameter(f"{name}.bias", np.zeros(filters, self.dtype)))
        self._add("conv_transpose", name, {"filters": filters, "kernel": k, "stride": stride},
                  (h * stride, w * stride, filters), params)
        self.act(f"{name}_act", act)

    def pool(self, name):
        h, w, c = self.shape
        if h % 2 or w % 2:
            raise ValueError(f"cannot pool odd spatial shape {self.shape}")
        self._add("maxpool", name, {"window": 2, "stride": 2}, (h // 2, w // 2, c))

    def dropout(self, name, rate):
        if rate > 0:
            self._add("dropout", name, {"rate": rate}, self.shape)

    def batchnorm(self, name):
        c = self.shape[-1]
        dt = self.dtype
        params = (Parameter(f"{name}.gamma", np.ones(c, dt)), Parameter(f"{name}.beta", np.zeros(c, dt)),
                  Parameter(f"{name}.running_mean", np.zeros(c, dt), trainable=False),
                  Parameter(f"{name}.running_var", np.ones(c, dt), trainable=False))
        self._add("batchnorm", name, {}, self.shape, params)

    def reshape(self, name, target):
        if int(np.prod(target)) != int(np.prod(self.shape)):
            raise ValueError(f"cannot reshape {self.shape} to {target}")
        self._add("reshape", name, {"target": tuple(target)}, target)

    def flatten(self, name):
        self._add("flatten", name, {}, (int(np.prod(self.shape)),))

    def dense(self, name, units, act):
        (f,) = self.shape
        params = (Parameter(f"{name}.kernel", _he_uniform(self.rng, (f, units), f, self.dtype)),
                  Parameter(f"{name}.bias", np.zeros(units, self.dtype)))
        self._add("dense", name, {"units": units}, (units,), params)
        self.act(f"{name}_act", act)


def _check_size(size, multiple):
    if size < multiple or size % multiple:
        raise ValueError(f"input size must be a positive multiple of {multiple}, got {size}")


def _finish(b, arch, size, seed, dtype, config, table):
    model = ModelGraph(f"{arch}-{size}", arch, size, seed, b.layers, b.params, dtype, config)
    verify_architecture(model)
    if size == 256:
        got = [(_TABLE_TYPE[s.kind], s.out_shape, s.param_count) for s in model.layers if s.kind in _TABLE_TYPE]
        if got != table:
            raise AssertionError(f"{arch} does not match its published table:\n{got}")
    return model


def build_camp1(seed=0, size=256, alpha=0.01, dtype=np.float32):
    """Denoising convolutional autoencoder (encoder 64/32 convs, decoder 32/64 transposes)."""
    _check_size(size, 4)
    b = _Builder(size, seed, dtype, alpha)
    b.conv("conv1", 64, 3)
    b.pool("pool1")
    b.conv("conv2", 32, 3)
    b.pool("pool2")
    b.conv_transpose("deconv1", 32, 3, 2)
    b.conv_transpose("deconv2", 64, 3, 2)
    b.conv("conv3", 1, 3, act="sigmoid")
    config = {"alpha": alpha, "dropout": 0.0, "bn_momentum": 0.9, "bn_eps": 1e-5}
    return _finish(b, "camp1", size, seed, dtype, config, TABLE_I)


def build_camp2(seed=0, size=256, alpha=0.01, dropout=0.25, dtype=np.float32):
    """Transfer-learning classifier with a sigmoid Dense(64) bottleneck.

    ``dropout=0`` drops the dropout layers entirely (strict-table mode).
    """
    _check_size(size, 8)
    b = _Builder(size, seed, dtype, alpha)
    b.conv("conv1", 64, 3)
    b.pool("pool1")
    b.dropout("drop1", dropout)
    b.conv("conv2", 32, 3)
    b.pool("pool2")
    b.dropout("drop2", dropout)
    # a no-op in the published network; kept so the layer list matches
    b.reshape("reshape", b.shape)
    b.batchnorm("bn1")
    b.conv("conv3", 32, 2)
    b.pool("pool3")
    b.dropout("drop3", dropout)
    b.batchnorm("bn2")
    b.conv("conv4", 64, 2)
    b.flatten("flatten")
    b.dense("dense1", 64, act="sigmoid")
    b.dense("dense2", 1, act="sigmoid")
    config = {"alpha": alpha, "dropout": dropout, "bn_momentum": 0.9, "bn_eps": 1e-5}
    return _finish(b, "camp2", size, seed, dtype, config, TABLE_II)


_BUILDERS = {"camp1": build_camp1, "camp2": build_camp2}


def build(name, seed=0, dtype=np.float32, **kwargs):
    """Build from a model name such as ``"camp2-64"``."""
    arch, _, size = name.partition("-")
    if arch not in _BUILDERS or not size.isdigit():
        raise DataError(f"unknown architecture name {name!r}")
    if arch == "camp1":
        # the autoencoder has no dropout layers
        kwargs.pop("dropout", None)
    return _BUILDERS[arch](seed=seed, size=int(size), dtype=dtype, **kwargs)


def _infer_shape(spec, shape, params):
    """Output shape of ``spec`` computed from the realized parameter tensors."""
    kind = spec.kind
    if kind in ("input", "activation", "dropout", "batchnorm"):
        return shape
    if kind == "conv":
        return shape[:2] + (params[f"{spec.name}.kernel"].shape[3],)
    if kind == "conv_transpose":
        s = spec.hyper["stride"]
        return (shape[0] * s, shape[1] * s, params[f"{spec.name}.kernel"].shape[3])
    if kind == "maxpool":
        return (shape[0] // 2, shape[1] // 2, shape[2])
    if kind == "flatten":
        return (int(np.prod(shape)),)
    if kind == "reshape":
        return tuple(spec.hyper["target"])
    if kind == "dense":
        return (params[f"{spec.name}.kernel"].shape[1],)
    raise ValueError(kind)


def verify_architecture(model):
    """Assert realized shapes and counts equal the declared ones, layer by layer."""
    shape = model.layers[0].out_shape
    for spec in model.layers:
        in_ch = shape[-1]
        if spec.kind in ("conv", "conv_transpose"):
            kshape = model.parameters[f"{spec.name}.kernel"].shape
            if kshape[2] != in_ch:
                raise AssertionError(f"{spec.name}: kernel expects {kshape[2]} channels, gets {in_ch}")
        if spec.kind == "dense":
            kshape = model.parameters[f"{spec.name}.kernel"].shape
            if kshape[0] != shape[0]:
                raise AssertionError(f"{spec.name}: kernel expects {kshape[0]} features, gets {shape[0]}")
        shape = _infer_shape(spec, shape, model.parameters)
        if shape != spec.out_shape:
            raise AssertionError(f"{spec.name}: realized shape {shape} != declared {spec.out_shape}")
        realized = sum(p.size for n, p in model.parameters.items() if n.split(".")[0] == spec.name)
        if realized != spec.param_count:
            raise AssertionError(f"{spec.name}: realized {realized} params != declared {spec.param_count}")
    names = list(model.parameters)
    if len(set(names)) != len(names):
        raise AssertionError("duplicate parameter names")


def count_parameters(model):
    """Per-layer counts (layers with parameters only) and the total."""
    per_layer = [(s.name, s.param_count) for s in model.layers if s.param_count]
    return per_layer, sum(c for _, c in per_layer)


def transfer_encoder_weights(source, target):
    """Copy the shared encoder convolutions from a CAMP-I model into a CAMP-II model."""
    if source.arch != "camp1" or target.arch != "camp2":
        raise ValueError(f"transfer goes camp1 -> camp2, got {source.arch} -> {target.arch}")
    for layer in ENCODER_LAYERS:
        for part in ("kernel", "bias"):
            name = f"{layer}.{part}"
            src, dst = source.parameters[name], target.parameters[name]
            if src.shape != dst.shape:
                raise ValueError(f"{name}: shape {src.shape} cannot be copied into {dst.shape}")
            dst.value.data = src.data.astype(target.dtype, copy=True)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"CAMP"
CHECKPOINT_VERSION = 1


def _pack_str(s):
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def checkpoint_bytes(model):
    parts = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION), _pack_str(model.name),
             struct.pack("<QI", model.seed, len(model.parameters))]
    for name, p in model.parameters.items():
        parts.append(_pack_str(name))
        parts.append(struct.pack("<B", p.data.ndim))
        parts.append(struct.pack(f"<{p.data.ndim}I", *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model, path):
    Path(path).write_bytes(checkpoint_bytes(model))


class _Reader:
    def __init__(self, buf, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise DataError(f"{self.path}: truncated checkpoint at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self):
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def checkpoint_name(path):
    """Model name stored in a checkpoint header, e.g. ``"camp2-64"``."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            head = fh.read(4096)
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from None
    r = _Reader(head, path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a CAMP checkpoint (bad magic)")
    r.unpack("<H")
    return r.string()


def load_checkpoint(path, expected_name=None, dtype=np.float32, **build_kwargs):
    """Rebuild the named architecture and fill in the stored tensors.

    ``expected_name`` (e.g. ``"camp1-64"``) guards against loading the wrong
    model; ``build_kwargs`` (``alpha``, ``dropout``) are passed to the builder.
    """
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from None
    r = _Reader(buf, path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a CAMP checkpoint (bad magic)")
    (version,) = r.unpack("<H")
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    name = r.string()
    if expected_name is not None and name != expected_name:
        raise DataError(f"{path}: checkpoint holds {name!r}, expected {expected_name!r}")
    seed, count = r.unpack("<QI")
    model = build(name, seed=seed, dtype=dtype, **build_kwargs)
    if count != len(model.parameters):
        raise DataError(f"{path}: {count} tensors stored, {name} has {len(model.parameters)}")
    for _ in range(count):
        tname = r.string()
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        if tname not in model.parameters:
            raise DataError(f"{path}: unexpected tensor {tname!r} for {name}")
        p = model.parameters[tname]
        if tuple(shape) != p.shape:
            raise DataError(f"{path}: tensor {tname!r} has shape {shape}, {name} needs {p.shape}")
        n = int(np.prod(shape))
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape)
        p.value.data = arr.astype(dtype)
    if r.pos != len(buf):
        raise DataError(f"{path}: {len(buf) - r.pos} trailing bytes")
    return model
