"""Minimal feed-forward model graph with layer-local backprop.

Six layer kinds (conv, linear, relu, frn, avgpool, flatten) are enough for
the reference architectures. There is no autodiff engine: each layer knows
its own backward rule. Forward passes are pure functions of (graph, sample,
input), so taps taken mid-pass and resumed passes compose bit-identically.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field, replace
from typing import BinaryIO, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, FormatError, SpecError, TrainingError
from .tensor import conv2d, matmul

_WEIGHT_MAGIC = b"SMWT"
_WEIGHT_VERSION = 1
_PROVENANCE_TAGS = {"sgd": 0, "ensemble-member": 1, "external": 2}
_TAG_PROVENANCE = {v: k for k, v in _PROVENANCE_TAGS.items()}

FRN_EPS = 1e-6


@dataclass(frozen=True)
class Layer:
    kind: str
    name: str
    params: dict

    def descriptor(self) -> str:
        k = self.kind
        p = self.params
        if k == "conv":
            return f"conv:{p['out']}:{p['k']}:{p['stride']}:{p['pad']}"
        if k == "linear":
            return f"linear:{p['out']}"
        if k == "avgpool":
            return f"avgpool:{p['k']}"
        return k


@dataclass
class LayerGraph:
    """An ordered layer list with shapes resolved from the input shape.

    ``shapes[i]`` is the (per-example) shape entering layer i;
    ``shapes[len(layers)]`` is the logit shape.
    """

    name: str
    in_shape: tuple[int, int, int]
    classes: int
    layers: list[Layer]
    shapes: list[tuple[int, ...]] = field(default_factory=list)

    def __post_init__(self):
        if not self.shapes:
            self.shapes = _resolve_shapes(self)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def weighted_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind in ("conv", "linear")]

    def config_text(self) -> str:
        c, h, w = self.in_shape
        descs = "; ".join(l.descriptor() for l in self.layers)
        return (
            f"name = {self.name}\n"
            f"in = {c}x{h}x{w}\n"
            f"classes = {self.classes}\n"
            f"layers = {descs}\n"
        )

    def graph_hash(self) -> bytes:
        return hashlib.sha256(self.config_text().encode()).digest()


def _resolve_shapes(graph: LayerGraph) -> list[tuple[int, ...]]:
    shapes: list[tuple[int, ...]] = [graph.in_shape]
    cur = graph.in_shape
    for layer in graph.layers:
        k = layer.kind
        if k == "conv":
            if len(cur) != 3:
                raise DimensionError(f"{layer.name} needs (C, H, W) input, got {cur}")
            c, h, w = cur
            p = layer.params
            kk, s, pd = p["k"], p["stride"], p["pad"]
            ho = (h + 2 * pd - kk) // s + 1
            wo = (w + 2 * pd - kk) // s + 1
            if ho < 1 or wo < 1:
                raise DimensionError(f"{layer.name} produces empty output from {cur}")
            p["in"] = c
            cur = (p["out"], ho, wo)
        elif k == "linear":
            if len(cur) != 1:
                raise DimensionError(f"{layer.name} needs flat input, got {cur}")
            layer.params["in"] = cur[0]
            cur = (layer.params["out"],)
        elif k == "avgpool":
            c, h, w = cur
            kk = layer.params["k"]
            if h % kk or w % kk:
                raise DimensionError(f"{layer.name}: pool {kk} does not divide {h}x{w}")
            cur = (c, h // kk, w // kk)
        elif k == "flatten":
            cur = (int(np.prod(cur)),)
        elif k == "frn":
            if len(cur) != 3:
                raise DimensionError(f"{layer.name} needs (C, H, W) input, got {cur}")
            layer.params["channels"] = cur[0]
        elif k == "relu":
            pass
        else:
            raise ConfigError(f"unknown layer kind {k!r}")
        shapes.append(cur)
    if shapes[-1] != (graph.classes,):
        raise ConfigError(f"graph ends in shape {shapes[-1]}, expected ({graph.classes},)")
    return shapes


def _parse_layer_descriptor(text: str, counts: dict[str, int]) -> Layer:
    parts = [p.strip() for p in text.split(":")]
    kind = parts[0]
    counts[kind] = counts.get(kind, 0) + 1
    name = f"{kind}{counts[kind]}"
    try:
        if kind == "conv":
            out, k = int(parts[1]), int(parts[2])
            stride = int(parts[3]) if len(parts) > 3 else 1
            pad = int(parts[4]) if len(parts) > 4 else 0
            return Layer(kind, name, {"out": out, "k": k, "stride": stride, "pad": pad})
        if kind == "linear":
            return Layer(kind, name, {"out": int(parts[1])})
        if kind == "avgpool":
            return Layer(kind, name, {"k": int(parts[1])})
        if kind in ("relu", "flatten"):
            return Layer(kind, name, {})
        if kind == "frn":
            return Layer(kind, name, {"eps": float(parts[1]) if len(parts) > 1 else FRN_EPS})
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"bad layer descriptor {text!r}: {exc}") from exc
    raise ConfigError(f"unknown layer kind in descriptor {text!r}")


def graph_from_layers(name: str, in_shape, classes: int, descriptors: str) -> LayerGraph:
    counts: dict[str, int] = {}
    layers = [_parse_layer_descriptor(d, counts) for d in descriptors.split(";") if d.strip()]
    return LayerGraph(name=name, in_shape=tuple(in_shape), classes=classes, layers=layers)


_BUILTIN_LAYERS = {
    # Classic LeNet-5 style: 2 conv + 3 fully-connected, average pooling.
    "lenet-s": (
        "conv:6:5:1:2; relu; avgpool:2; conv:16:5:1:0; relu; avgpool:2; "
        "flatten; linear:120; relu; linear:84; relu; linear:{classes}"
    ),
    # Same trunk with filter response normalization before each activation.
    "lenet-frn": (
        "conv:6:5:1:2; frn; relu; avgpool:2; conv:16:5:1:0; frn; relu; avgpool:2; "
        "flatten; linear:120; relu; linear:84; relu; linear:{classes}"
    ),
    # Two hidden layers.
    "mlp-s": "flatten; linear:256; relu; linear:128; relu; linear:{classes}",
}


def make_graph(name: str, in_shape=(1, 28, 28), classes: int = 10) -> LayerGraph:
    if name not in _BUILTIN_LAYERS:
        raise ConfigError(f"unknown architecture {name!r}; have {sorted(_BUILTIN_LAYERS)}")
    desc = _BUILTIN_LAYERS[name].format(classes=classes)
    return graph_from_layers(name, in_shape, classes, desc)


def parse_graph_config(text: str) -> LayerGraph:
    kv: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"bad graph config line {line!r}")
        key, val = line.split("=", 1)
        kv[key.strip()] = val.strip()
    try:
        c, h, w = (int(v) for v in kv["in"].split("x"))
        return graph_from_layers(kv.get("name", "custom"), (c, h, w), int(kv["classes"]), kv["layers"])
    except KeyError as exc:
        raise ConfigError(f"graph config missing key {exc}") from exc


def load_graph_config(path) -> LayerGraph:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_graph_config(fh.read())


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------


@dataclass
class WeightSample:
    """One network parameterization: per-layer tensors keyed by layer name."""

    sample_id: str
    provenance: str
    params: dict[str, tuple[np.ndarray, ...]]

    def flat(self) -> list[np.ndarray]:
        return [a for arrs in self.params.values() for a in arrs]


def param_shapes(graph: LayerGraph) -> dict[str, tuple[tuple[int, ...], ...]]:
    shapes: dict[str, tuple[tuple[int, ...], ...]] = {}
    for i, layer in enumerate(graph.layers):
        if layer.kind == "conv":
            p = layer.params
            shapes[layer.name] = ((p["out"], p["in"], p["k"], p["k"]), (p["out"],))
        elif layer.kind == "linear":
            p = layer.params
            shapes[layer.name] = ((p["in"], p["out"]), (p["out"],))
        elif layer.kind == "frn":
            c = layer.params["channels"]
            shapes[layer.name] = ((c,), (c,))
    return shapes


def init_weights(graph: LayerGraph, seed: int, sample_id: str | None = None,
                 provenance: str = "sgd") -> WeightSample:
    """He-normal initialization, deterministic in the seed."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params: dict[str, tuple[np.ndarray, ...]] = {}
    for name, shapes in param_shapes(graph).items():
        wshape = shapes[0]
        if len(wshape) == 1:  # frn: gamma = 1, beta = 0
            params[name] = (np.ones(wshape, np.float32), np.zeros(shapes[1], np.float32))
            continue
        fan_in = int(np.prod(wshape[1:])) if len(wshape) == 4 else wshape[0]
        std = math.sqrt(2.0 / fan_in)
        w = (rng.standard_normal(wshape) * std).astype(np.float32)
        b = np.zeros(shapes[1], np.float32)
        params[name] = (w, b)
    return WeightSample(sample_id or f"seed{seed}", provenance, params)


def check_sample(graph: LayerGraph, sample: WeightSample) -> None:
    expect = param_shapes(graph)
    if set(expect) != set(sample.params):
        raise SpecError(f"weight sample layers {sorted(sample.params)} != graph {sorted(expect)}")
    for name, shapes in expect.items():
        got = tuple(a.shape for a in sample.params[name])
        if got != shapes:
            raise SpecError(f"{name}: weight shapes {got} != expected {shapes}")


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def frn(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = FRN_EPS) -> np.ndarray:
    """Filter response normalization: x / sqrt(mean_hw(x^2) + eps) * gamma + beta.

    Per example and channel; no learned activation threshold (ReLU stays a
    separate layer).
    """
    if eps <= 0:
        raise SpecError(f"frn needs eps > 0, got {eps}")
    nu2 = np.mean(x * x, axis=(2, 3), keepdims=True, dtype=np.float64)
    y = x / np.sqrt(nu2 + eps)
    return (y * gamma[:, None, None] + beta[:, None, None]).astype(x.dtype)


def _layer_forward(layer: Layer, sample: WeightSample, x: np.ndarray) -> np.ndarray:
    k = layer.kind
    if k == "conv":
        w, b = sample.params[layer.name]
        p = layer.params
        return conv2d(x, w, stride=p["stride"], pad=p["pad"]) + b[None, :, None, None]
    if k == "linear":
        w, b = sample.params[layer.name]
        return matmul(x, w) + b
    if k == "relu":
        return np.maximum(x, 0)
    if k == "frn":
        gamma, beta = sample.params[layer.name]
        return frn(x, gamma, beta, layer.params["eps"])
    if k == "avgpool":
        kk = layer.params["k"]
        p, c, h, w = x.shape
        return x.reshape(p, c, h // kk, kk, w // kk, kk).mean(axis=(3, 5), dtype=np.float64).astype(x.dtype)
    if k == "flatten":
        return x.reshape(x.shape[0], -1)
    raise SpecError(f"unknown layer kind {k!r}")


def run_layers(graph: LayerGraph, sample: WeightSample, x: np.ndarray,
               start: int = 0, stop: int | None = None) -> np.ndarray:
    """Run layers[start:stop] on features entering edge ``start``."""
    stop = graph.num_layers if stop is None else stop
    for layer in graph.layers[start:stop]:
        x = _layer_forward(layer, sample, x)
    return x


def forward(graph: LayerGraph, sample: WeightSample, x: np.ndarray,
            taps: Sequence[int] = ()) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """Full forward pass; ``taps`` are edge indices whose incoming features
    are returned untransformed (edge i = input of layer i)."""
    if x.shape[1:] != graph.in_shape:
        raise SpecError(f"input shape {x.shape[1:]} != graph input {graph.in_shape}")
    wanted = set(taps)
    features: dict[int, np.ndarray] = {}
    for i, layer in enumerate(graph.layers):
        if i in wanted:
            features[i] = x
        x = _layer_forward(layer, sample, x)
    if graph.num_layers in wanted:
        features[graph.num_layers] = x
    return x, features


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64) - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _col2im(dcols: np.ndarray, xshape, kk: int, stride: int, pad: int) -> np.ndarray:
    p, c, h, w = xshape
    _, _, ho, wo, _, _ = dcols.shape
    dxp = np.zeros((p, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for a in range(kk):
        for b in range(kk):
            dxp[:, :, a : a + stride * ho : stride, b : b + stride * wo : stride] += dcols[:, :, :, :, a, b]
    return dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp


def _layer_backward(layer: Layer, sample: WeightSample, x: np.ndarray,
                    g: np.ndarray) -> tuple[np.ndarray, tuple[np.ndarray, ...]]:
    """Gradient of the loss w.r.t. layer input and parameters given upstream g."""
    k = layer.kind
    if k == "conv":
        w, _ = sample.params[layer.name]
        p = layer.params
        kk, s, pd = p["k"], p["stride"], p["pad"]
        o = w.shape[0]
        pn, c, h, ww = x.shape
        ho = (h + 2 * pd - kk) // s + 1
        wo = (ww + 2 * pd - kk) // s + 1
        xp = np.pad(x, ((0, 0), (0, 0), (pd, pd), (pd, pd))) if pd else x
        s0, s1, s2, s3 = xp.strides
        cols = np.lib.stride_tricks.as_strided(
            xp, (pn, c, ho, wo, kk, kk), (s0, s1, s2 * s, s3 * s, s2, s3)
        )
        cmat = np.ascontiguousarray(cols.transpose(0, 2, 3, 1, 4, 5)).reshape(pn * ho * wo, c * kk * kk)
        gmat = g.transpose(0, 2, 3, 1).reshape(pn * ho * wo, o).astype(np.float64, copy=False)
        dw = (gmat.T @ cmat.astype(np.float64, copy=False)).reshape(w.shape)
        db = g.sum(axis=(0, 2, 3), dtype=np.float64)
        dcols = (gmat @ w.reshape(o, -1).astype(np.float64)).reshape(pn, ho, wo, c, kk, kk)
        dx = _col2im(dcols.transpose(0, 3, 1, 2, 4, 5), x.shape, kk, s, pd)
        return dx.astype(x.dtype), (dw.astype(x.dtype), db.astype(x.dtype))
    if k == "linear":
        w, _ = sample.params[layer.name]
        g64 = g.astype(np.float64, copy=False)
        dw = x.astype(np.float64, copy=False).T @ g64
        db = g64.sum(axis=0)
        dx = g64 @ w.astype(np.float64).T
        return dx.astype(x.dtype), (dw.astype(x.dtype), db.astype(x.dtype))
    if k == "relu":
        return g * (x > 0), ()
    if k == "frn":
        gamma, _ = sample.params[layer.name]
        eps = layer.params["eps"]
        hw = x.shape[2] * x.shape[3]
        nu2 = np.mean(x * x, axis=(2, 3), keepdims=True, dtype=np.float64)
        r = 1.0 / np.sqrt(nu2 + eps)
        xn = x * r
        dgamma = (g * xn).sum(axis=(0, 2, 3), dtype=np.float64)
        dbeta = g.sum(axis=(0, 2, 3), dtype=np.float64)
        gg = g * gamma[:, None, None]
        inner = (gg * x).sum(axis=(2, 3), keepdims=True, dtype=np.float64)
        dx = gg * r - x * (r**3) * (inner / hw)
        return dx.astype(x.dtype), (dgamma.astype(x.dtype), dbeta.astype(x.dtype))
    if k == "avgpool":
        kk = layer.params["k"]
        dx = np.repeat(np.repeat(g, kk, axis=2), kk, axis=3) / (kk * kk)
        return dx.astype(x.dtype), ()
    if k == "flatten":
        return g.reshape(x.shape), ()
    raise SpecError(f"unknown layer kind {k!r}")


def loss_and_grads(graph: LayerGraph, sample: WeightSample, x: np.ndarray,
                   labels: np.ndarray) -> tuple[float, dict[str, tuple[np.ndarray, ...]]]:
    """Mean softmax cross-entropy and its gradient for every parameter."""
    inputs: list[np.ndarray] = []
    for layer in graph.layers:
        inputs.append(x)
        x = _layer_forward(layer, sample, x)
    logits = x
    if not np.isfinite(logits).all():
        raise TrainingError("non-finite logits in forward pass")
    p = logits.shape[0]
    probs = softmax(logits)
    eps = 1e-12
    loss = float(-np.log(probs[np.arange(p), labels] + eps).mean())
    g = probs
    g[np.arange(p), labels] -= 1.0
    g = (g / p).astype(logits.dtype)
    grads: dict[str, tuple[np.ndarray, ...]] = {}
    for layer, xin in zip(reversed(graph.layers), reversed(inputs)):
        g, pg = _layer_backward(layer, sample, xin, g)
        if pg:
            grads[layer.name] = pg
    return loss, grads


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    cosine_schedule: bool = True
    epochs: int = 8
    batch: int = 128
    seed: int = 0


def sgd_train(graph: LayerGraph, data: np.ndarray, labels: np.ndarray,
              cfg: TrainConfig, sample_id: str | None = None,
              provenance: str = "sgd") -> WeightSample:
    """SGD with momentum and cosine-annealed lr; deterministic given the seed."""
    if data.shape[0] != labels.shape[0]:
        raise SpecError(f"{data.shape[0]} examples but {labels.shape[0]} labels")
    sample = init_weights(graph, cfg.seed, sample_id, provenance)
    check_sample(graph, sample)
    rng = np.random.Generator(np.random.PCG64(cfg.seed + 0x5EED))
    velocity = {name: [np.zeros_like(a) for a in arrs] for name, arrs in sample.params.items()}
    n = data.shape[0]
    for epoch in range(cfg.epochs):
        lr = cfg.lr
        if cfg.cosine_schedule and cfg.epochs > 1:
            lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.epochs))
        perm = rng.permutation(n)
        for lo in range(0, n, cfg.batch):
            idx = perm[lo : lo + cfg.batch]
            try:
                loss, grads = loss_and_grads(graph, sample, data[idx], labels[idx])
            except TrainingError as exc:
                raise TrainingError(f"training diverged at epoch {epoch}: {exc}") from exc
            if not math.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch} (loss={loss})")
            # float32 overflow on a diverging run is fine: it surfaces as a
            # non-finite loss (TrainingError) on the next step
            with np.errstate(over="ignore"):
                for name, pg in grads.items():
                    arrs = sample.params[name]
                    vel = velocity[name]
                    new = []
                    for a, v, gr in zip(arrs, vel, pg):
                        step = gr + cfg.weight_decay * a
                        v *= cfg.momentum
                        v += step
                        new.append((a - lr * v).astype(np.float32))
                    sample.params[name] = tuple(new)
    return sample


def build_ensemble(graph: LayerGraph, data: np.ndarray, labels: np.ndarray,
                   cfg: TrainConfig, seeds: Sequence[int]) -> list[WeightSample]:
    """Independently initialized SGD runs, one per seed (desk scale: 3..10)."""
    members = []
    for seed in seeds:
        member_cfg = replace(cfg, seed=seed)
        members.append(
            sgd_train(graph, data, labels, member_cfg, f"member-{seed}", "ensemble-member")
        )
    return members


# ---------------------------------------------------------------------------
# Weight serialization: magic "SMWT", version, graph hash, then per-layer
# little-endian float32 tensors. Bit-exact round-trips.
# ---------------------------------------------------------------------------


def write_weight_sample(fh: BinaryIO, graph: LayerGraph, sample: WeightSample) -> None:
    fh.write(struct.pack("<4sI", _WEIGHT_MAGIC, _WEIGHT_VERSION))
    fh.write(graph.graph_hash())
    ident = sample.sample_id.encode()
    fh.write(struct.pack("<I", len(ident)))
    fh.write(ident)
    fh.write(struct.pack("<B", _PROVENANCE_TAGS[sample.provenance]))
    entries = [(name, i, a) for name, arrs in sample.params.items() for i, a in enumerate(arrs)]
    fh.write(struct.pack("<I", len(entries)))
    for name, i, arr in entries:
        key = f"{name}.{i}".encode()
        fh.write(struct.pack("<I", len(key)))
        fh.write(key)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fh: BinaryIO, nbytes: int) -> bytes:
    buf = fh.read(nbytes)
    if len(buf) != nbytes:
        raise FormatError(f"truncated weight file: wanted {nbytes} bytes, got {len(buf)}")
    return buf


def read_weight_sample(fh: BinaryIO, graph: LayerGraph | None = None) -> WeightSample:
    magic, version = struct.unpack("<4sI", _read_exact(fh, 8))
    if magic != _WEIGHT_MAGIC:
        raise FormatError(f"bad weight magic {magic!r}")
    if version != _WEIGHT_VERSION:
        raise FormatError(f"unsupported weight version {version}")
    ghash = _read_exact(fh, 32)
    if graph is not None and ghash != graph.graph_hash():
        raise FormatError("weight file was written for a different graph")
    (idlen,) = struct.unpack("<I", _read_exact(fh, 4))
    ident = _read_exact(fh, idlen).decode()
    (ptag,) = struct.unpack("<B", _read_exact(fh, 1))
    if ptag not in _TAG_PROVENANCE:
        raise FormatError(f"unknown provenance tag {ptag}")
    (nentries,) = struct.unpack("<I", _read_exact(fh, 4))
    params: dict[str, list[np.ndarray]] = {}
    for _ in range(nentries):
        (klen,) = struct.unpack("<I", _read_exact(fh, 4))
        key = _read_exact(fh, klen).decode()
        (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
        shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(_read_exact(fh, 4 * size), dtype="<f4").copy().reshape(shape)
        name, _, _ = key.rpartition(".")
        params.setdefault(name, []).append(arr)
    sample = WeightSample(ident, _TAG_PROVENANCE[ptag], {k: tuple(v) for k, v in params.items()})
    if graph is not None:
        check_sample(graph, sample)
    return sample


def save_weight_sample(path, graph: LayerGraph, sample: WeightSample) -> None:
    with open(path, "wb") as fh:
        write_weight_sample(fh, graph, sample)


def load_weight_sample(path, graph: LayerGraph | None = None) -> WeightSample:
    with open(path, "rb") as fh:
        return read_weight_sample(fh, graph)
