"""SCN assembly: bottleneck modules, parameter registry, updates, checkpoints."""

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from .exceptions import ConfigError, FormatError
from .layers import BatchNorm2d, GlobalAvgPool, Linear, SCLayerConfig, SparseCodingLayer, output_size
from .solver import ElasticNetParams

LAMBDA1_FLOOR = 1e-6


@dataclass(frozen=True)
class BottleneckConfig:
    reduction_width: int
    expansion_width: int
    repeat: int = 1
    stride_at_first: bool = False


@dataclass(frozen=True)
class NetworkConfig:
    sections: tuple
    width_multiplier: int = 1
    first_layer_channels: int = 0
    num_classes: int = 10
    input_shape: tuple = (3, 32, 32)
    lambda1: float = 0.1
    lambda2: float = 0.01
    max_iter: int = 50
    rel_tol: float = 1e-4
    refine: bool = True
    window: int = 3
    model: str = "scn"

    @property
    def elastic_net_defaults(self):
        return ElasticNetParams(self.lambda1, self.lambda2, self.max_iter, self.rel_tol, self.refine)

    def to_dict(self):
        d = asdict(self)
        d["sections"] = [asdict(s) for s in self.sections]
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["sections"] = tuple(BottleneckConfig(**s) for s in d["sections"])
        d["input_shape"] = tuple(d["input_shape"])
        return cls(**d)

    def validate(self):
        if self.model not in ("scn", "linear"):
            raise ConfigError(f"unknown model {self.model!r}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"bad input shape {self.input_shape}")
        if self.model == "linear":
            return
        if not self.sections:
            raise ConfigError("network has no bottleneck sections")
        try:
            ElasticNetParams(self.lambda1, self.lambda2, self.max_iter, self.rel_tol)
        except ValueError as exc:
            raise ConfigError(f"sparse-coding settings: {exc}") from None
        _, H, W = self.input_shape
        for s, sec in enumerate(self.sections):
            where = f"section {s + 1}"
            if sec.repeat < 1:
                raise ConfigError(f"{where}: repeat must be at least 1")
            # equal widths are allowed: SCN-1 uses (16, 16) modules
            if sec.expansion_width < sec.reduction_width:
                raise ConfigError(f"{where} expansion layer: width {sec.expansion_width} is below "
                                  f"reduction width {sec.reduction_width}")
            if sec.reduction_width < 1:
                raise ConfigError(f"{where} reduction layer: width must be positive")
            if sec.stride_at_first:
                if H < 2 or W < 2:
                    raise ConfigError(f"{where} module 1 expansion layer: cannot subsample a {H}x{W} map")
                H, W = output_size(H, 2), output_size(W, 2)


def scn_config(width=4, sections=((16, 3), (32, 2), (64, 2)), input_shape=(3, 32, 32),
               num_classes=10, first_layer_channels=0, **kwargs):
    """Build a config from ``(M, P)`` pairs: ``P`` modules of widths ``(M, M*K)``.

    Every section after the first subsamples by 2 at its first module. A
    nonzero ``first_layer_channels`` rescales the first section so the first
    layer has exactly that many atoms.
    """
    secs = []
    for i, (M, P) in enumerate(sections):
        red, exp = M, M * width
        if i == 0 and first_layer_channels:
            exp = first_layer_channels
            red = max(1, first_layer_channels // width)
        secs.append(BottleneckConfig(red, exp, P, stride_at_first=i > 0))
    cfg = NetworkConfig(tuple(secs), width, first_layer_channels, num_classes, tuple(input_shape), **kwargs)
    cfg.validate()
    return cfg


def cifar_config(width, num_classes=10, **kwargs):
    return scn_config(width, num_classes=num_classes, **kwargs)


def mnist_config(width=4, first_layer_channels=8, **kwargs):
    return scn_config(width, input_shape=(1, 28, 28), first_layer_channels=first_layer_channels, **kwargs)


class Network:
    """A sequential stack of named layers with a flat parameter registry."""

    def __init__(self, cfg, layers):
        self.cfg = cfg
        self.layers = layers      # list of (name, layer)

    def forward(self, x, train=False, update_state=True, observer=None):
        """Run every layer; ``observer(name, layer, x_in, y)`` sees each one."""
        caches = []
        for name, layer in self.layers:
            y, cache = layer.forward(x, train=train, update_state=update_state)
            if observer is not None:
                observer(name, layer, x, y)
            x = y
            caches.append(cache)
        return x, (caches if train else None)

    def backward(self, caches, grad_logits):
        g = grad_logits
        for (_, layer), cache in zip(reversed(self.layers), reversed(caches)):
            g = layer.backward(cache, g)
        return self.grads()

    def parameters(self):
        out = OrderedDict()
        for name, layer in self.layers:
            for k, v in layer.params().items():
                out[f"{name}.{k}"] = v
        return out

    def buffers(self):
        out = OrderedDict()
        for name, layer in self.layers:
            for k, v in layer.buffers().items():
                out[f"{name}.{k}"] = v
        return out

    def grads(self):
        out = OrderedDict()
        for name, layer in self.layers:
            for k, v in layer.grads.items():
                out[f"{name}.{k}"] = v
        return out

    def state_arrays(self):
        return OrderedDict(list(self.parameters().items()) + list(self.buffers().items()))

    def num_parameters(self):
        return int(sum(v.size for v in self.parameters().values()))

    @property
    def sc_layers(self):
        return [layer for _, layer in self.layers if layer.kind == "sc"]

    def layer_counts(self):
        """``(sparse-coding layers, classifier layers)``."""
        kinds = [layer.kind for _, layer in self.layers]
        return kinds.count("sc"), kinds.count("fc")

    def set_workers(self, workers):
        for layer in self.sc_layers:
            layer.workers = workers


def build_scn(cfg, seed=0, workers=1):
    """Instantiate the network described by ``cfg``.

    Dictionaries are i.i.d. Gaussian with standard deviation ``1/sqrt(m)``
    where ``m`` is the patch dimension; the result is a pure function of
    ``(cfg, seed)``.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    layers = []
    C = cfg.input_shape[0]
    if cfg.model == "linear":
        dim = int(np.prod(cfg.input_shape))
        layers.append(("fc", Linear(rng.standard_normal((cfg.num_classes, dim)) / np.sqrt(dim),
                                    np.zeros(cfg.num_classes))))
        return Network(cfg, layers)

    params = cfg.elastic_net_defaults
    idx = 0
    for sec in cfg.sections:
        for r in range(sec.repeat):
            stride = 2 if (r == 0 and sec.stride_at_first) else 1
            for width, s in ((sec.expansion_width, stride), (sec.reduction_width, 1)):
                lc = SCLayerConfig(C, width, cfg.window, s, params=params)
                D = rng.standard_normal((lc.input_dim, width)) / np.sqrt(lc.input_dim)
                layer = SparseCodingLayer(lc, D, workers=workers)
                layer.eigvec = rng.standard_normal(width)
                layers.append((f"sc{idx}", layer))
                layers.append((f"bn{idx}", BatchNorm2d(width)))
                C = width
                idx += 1
    layers.append(("pool", GlobalAvgPool()))
    layers.append(("fc", Linear(rng.standard_normal((cfg.num_classes, C)) / np.sqrt(C),
                                np.zeros(cfg.num_classes))))
    return Network(cfg, layers)


build_network = build_scn


def decays(name):
    """Whether weight decay applies to a registry entry."""
    return name.endswith(".D") or name.endswith(".lambda1") or name == "fc.weight"


def apply_weight_decay_and_project(params, grads, mu, rho):
    """One plain SGD step with weight decay and the ``lambda1`` floor.

    ``D <- D - rho (dL/dD + mu D)``; ``lambda1 <- max(lambda1 - rho (dL/dl + mu l), 1e-6)``;
    batch-norm parameters and the classifier bias take plain steps.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        step = g + mu * p if decays(name) else g
        p -= rho * step
        if name.endswith(".lambda1"):
            np.maximum(p, LAMBDA1_FLOOR, out=p)


# ------------------------------------------------------------- checkpoints

MAGIC = b"SCN1"
FORMAT_VERSION = 1


def _canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_checkpoint(path, net, meta=None):
    """Write magic, manifest and named float32 arrays (little endian)."""
    arrays = net.state_arrays()
    manifest = {
        "format": FORMAT_VERSION,
        "network": net.cfg.to_dict(),
        "arrays": list(arrays),
        "meta": meta or {},
    }
    text = _canonical(manifest).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(text)))
        f.write(text)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated while reading {what} at offset {self.pos}: "
                              f"need {n} bytes, {len(self.data) - self.pos} left")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def config_mismatches(expected, actual):
    """Keys whose values differ between two network config dicts."""
    keys = sorted(set(expected) | set(actual))
    return [k for k in keys if expected.get(k) != actual.get(k)]


def read_checkpoint(path):
    """Parse a checkpoint into ``(manifest, arrays)`` without building a network."""
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data, path)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    (mlen,) = r.unpack("<I", "manifest length")
    try:
        manifest = json.loads(r.take(mlen, "manifest").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable manifest: {exc}") from None
    if manifest.get("format") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
    (count,) = r.unpack("<I", "array count")
    arrays = OrderedDict()
    for _ in range(count):
        (nlen,) = r.unpack("<H", "array name length")
        name = r.take(nlen, "array name").decode("utf-8")
        (ndim,) = r.unpack("<B", f"rank of {name}")
        shape = r.unpack(f"<{ndim}I", f"shape of {name}") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(r.take(4 * size, f"data of {name}"), dtype="<f4").reshape(shape)
    if r.pos != len(data):
        raise FormatError(f"{path}: {len(data) - r.pos} trailing bytes after the last array")
    return manifest, arrays


def load_checkpoint(path, expected=None, workers=1):
    """Rebuild a network from a checkpoint.

    If ``expected`` (a :class:`NetworkConfig`) is given, the stored
    architecture must match it exactly; a :class:`ConfigError` names every
    differing field otherwise.
    """
    manifest, arrays = read_checkpoint(path)
    try:
        cfg = NetworkConfig.from_dict(manifest["network"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: manifest does not describe a network: {exc}") from None
    if expected is not None:
        diff = config_mismatches(expected.to_dict(), cfg.to_dict())
        if diff:
            raise ConfigError(f"{path}: architecture mismatch in {', '.join(diff)}")
    net = build_scn(cfg, seed=0, workers=workers)
    state = net.state_arrays()
    missing = [k for k in state if k not in arrays]
    extra = [k for k in arrays if k not in state]
    if missing or extra:
        raise FormatError(f"{path}: arrays do not match architecture (missing {missing}, unexpected {extra})")
    for name, target in state.items():
        if arrays[name].shape != target.shape:
            raise FormatError(f"{path}: array {name} has shape {arrays[name].shape}, expected {target.shape}")
        target[...] = arrays[name].astype(np.float64)
    return net, manifest


def round_to_storage(net):
    """Round parameters and buffers to the checkpoint precision in place."""
    for arr in net.state_arrays().values():
        arr[...] = arr.astype(np.float32).astype(np.float64)
