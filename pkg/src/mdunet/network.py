"""Multi-path U-Net with early, late and hyper-dense fusion of modality streams.

Encoder layers are indexed densely from 0: layer 0 is the first convolutional
block of a stream (its output is ``x_0``), layers ``1 .. depth-1`` follow a
2x2 max-pool each, and the bridge sits at index ``depth``. In hyper-dense
mode layer ``l`` of stream ``s`` sees every ``x_j^t`` with ``j < l`` for every
stream ``t``, max-pooled down to its resolution and concatenated in the
stream-specific order given by :func:`permutation`.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import functional as F
from .inception import InceptionBlock, InceptionSpec, parameter_count
from .layers import Conv2d, Module
from .tensor import Tensor

FUSIONS = ("early", "late", "hyperdense")
DEFAULT_MODALITIES = ("CBV", "CTP", "DWI", "MTT")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class NetworkConfig:
    num_streams: int = 4
    fusion: str = "hyperdense"
    module_variant: str = "standard"
    base_width: int = 32
    depth: int = 4
    input_spatial: tuple[int, int] = (256, 256)
    num_classes: int = 2
    batchnorm: bool = True
    branch_dilations: tuple[int, int] = (2, 4)
    align_pool: str = "max"
    modalities: tuple[str, ...] | None = None
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.input_spatial = tuple(self.input_spatial)
        self.branch_dilations = tuple(self.branch_dilations)
        if self.modalities is None:
            n = self.num_streams if isinstance(self.num_streams, int) else 0
            self.modalities = DEFAULT_MODALITIES if n == 4 else tuple(f"M{i + 1}" for i in range(max(n, 0)))
        self.modalities = tuple(self.modalities)
        self.validate()

    def validate(self) -> None:
        def check(ok, name, msg):
            if not ok:
                raise ConfigError(name, msg)

        check(isinstance(self.num_streams, int) and self.num_streams >= 1, "num_streams", f"must be an int >= 1, got {self.num_streams!r}")
        check(self.fusion in FUSIONS, "fusion", f"must be one of {FUSIONS}, got {self.fusion!r}")
        check(self.module_variant in ("standard", "asymmetric"), "module_variant", f"must be 'standard' or 'asymmetric', got {self.module_variant!r}")
        check(isinstance(self.base_width, int) and self.base_width >= 1, "base_width", f"must be a positive int, got {self.base_width!r}")
        check(isinstance(self.depth, int) and self.depth >= 1, "depth", f"must be a positive int, got {self.depth!r}")
        check(
            len(self.input_spatial) == 2 and all(isinstance(v, int) and v >= 1 for v in self.input_spatial),
            "input_spatial",
            f"must be two positive ints, got {self.input_spatial!r}",
        )
        step = 2**self.depth
        check(
            all(v % step == 0 for v in self.input_spatial),
            "input_spatial",
            f"{self.input_spatial} not divisible by 2**depth = {step}",
        )
        check(isinstance(self.num_classes, int) and self.num_classes >= 2, "num_classes", f"must be an int >= 2, got {self.num_classes!r}")
        check(isinstance(self.batchnorm, bool), "batchnorm", f"must be a bool, got {self.batchnorm!r}")
        d = self.branch_dilations
        check(len(d) == 2 and min(d) > 1 and d[0] != d[1], "branch_dilations", f"must be two distinct ints > 1, got {d!r}")
        check(self.align_pool in ("max", "avg"), "align_pool", f"must be 'max' or 'avg', got {self.align_pool!r}")
        check(len(self.modalities) == self.num_streams, "modalities", f"{len(self.modalities)} names for {self.num_streams} streams")
        check(len(set(self.modalities)) == len(self.modalities), "modalities", "names must be unique")
        check(self.dtype in ("float32", "float64"), "dtype", f"must be 'float32' or 'float64', got {self.dtype!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"network.{key}", "unknown key")
        try:
            return cls(**d)
        except ConfigError as e:
            raise ConfigError(f"network.{e.field}", str(e).split(": ", 1)[1]) from None
        except TypeError as e:
            raise ConfigError("network", str(e)) from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_spatial"] = list(self.input_spatial)
        d["branch_dilations"] = list(self.branch_dilations)
        d["modalities"] = list(self.modalities)
        return d

    @property
    def num_paths(self) -> int:
        return 1 if self.fusion == "early" else self.num_streams

    def width(self, level: int) -> int:
        """Output channels of encoder layer ``level`` (``level == depth`` is the bridge)."""
        return self.base_width * 2**level

    def encoder_in_channels(self, level: int) -> int:
        if level == 0:
            return self.num_streams if self.fusion == "early" else 1
        if self.fusion == "hyperdense":
            return self.num_streams * sum(self.width(j) for j in range(level))
        return self.width(level - 1)

    def bridge_in_channels(self) -> int:
        L = self.depth
        if self.fusion == "hyperdense":
            return self.num_streams * sum(self.width(j) for j in range(L))
        if self.fusion == "late":
            return self.num_streams * self.width(L - 1)
        return self.width(L - 1)

    def inception_spec(self, cin: int, cout: int) -> InceptionSpec:
        return InceptionSpec(cin, cout, self.module_variant, self.branch_dilations, batchnorm=self.batchnorm)


# --- permutation -----------------------------------------------------------


@dataclass(frozen=True)
class PermutationRule:
    stream: int
    layer: int
    order: tuple[tuple[int, int], ...]  # (layer j, stream t), stream 1-based

    def labels(self) -> list[str]:
        return [f"x{j}^{t}" for j, t in self.order]


def permutation(s: int, l: int, n: int) -> PermutationRule:
    """Feature-block order fed to layer ``l`` of stream ``s`` (1-based stream).

    Blocks are grouped by source layer from ``l-1`` down to 0; inside a group the
    streams follow the cyclic rotation starting at ``s``, so a stream always
    sees its own block first.
    """
    if not 1 <= s <= n:
        raise ValueError(f"stream index {s} out of range 1..{n}")
    if l < 0:
        raise ValueError(f"layer index must be >= 0, got {l}")
    rot = [(s - 1 + k) % n + 1 for k in range(n)]
    return PermutationRule(s, l, tuple((j, t) for j in range(l - 1, -1, -1) for t in rot))


# --- symbolic shapes -------------------------------------------------------

Shape = tuple[int, int, int]


def fmt_shape(s: Shape) -> str:
    return "×".join(str(v) for v in s)


@dataclass
class ShapeTable:
    rows: list[tuple[str, Shape, Shape]] = field(default_factory=list)

    def add(self, name: str, inp: Shape, out: Shape) -> None:
        self.rows.append((name, tuple(inp), tuple(out)))

    def to_text(self) -> str:
        lines = [f"{'Layer':<14}{'Input':>13}     Output"]
        for name, i, o in self.rows:
            lines.append(f"{name:<14}{fmt_shape(i):>13}  →  {fmt_shape(o)}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "in_c", "in_h", "in_w", "out_c", "out_h", "out_w"])
        for name, i, o in self.rows:
            w.writerow([name, *i, *o])
        return buf.getvalue()


def shape_table(config: NetworkConfig) -> ShapeTable:
    """Per-stream encoder rows, then bridge, decoder and softmax rows."""
    H, W = config.input_spatial
    L = config.depth
    t = ShapeTable()
    for l in range(L):
        h, w = H >> l, W >> l
        cout = config.width(l)
        t.add("Conv Layer 1" if l == 0 else f"Layer {l + 1}", (config.encoder_in_channels(l), h, w), (cout, h, w))
        t.add(f"Max-pooling {l + 1}", (cout, h, w), (cout, h // 2, w // 2))
    h, w = H >> L, W >> L
    c = config.width(L)
    t.add("Bridge", (config.bridge_in_channels(), h, w), (c, h, w))
    for k in range(1, L + 1):
        t.add(f"Up-sample {k}", (c, h, w), (c // 2, h * 2, w * 2))
        c, h, w = c // 2, h * 2, w * 2
        t.add(f"Layer {L + k}", (c, h, w), (c, h, w))
    t.add("Softmax layer", (c, h, w), (config.num_classes, h, w))
    return t


def network_parameter_count(config: NetworkConfig) -> int:
    L = config.depth
    total = 0
    for l in range(L):
        total += config.num_paths * parameter_count(config.inception_spec(config.encoder_in_channels(l), config.width(l)))
    total += parameter_count(config.inception_spec(config.bridge_in_channels(), config.width(L)))
    for k in range(1, L + 1):
        c = config.width(L - k + 1)
        total += c * (c // 2) + (0 if config.batchnorm else c // 2)
        total += parameter_count(config.inception_spec(c // 2, c // 2))
    total += config.base_width * config.num_classes + config.num_classes
    return total


# --- connectivity ----------------------------------------------------------


@dataclass
class ConnectivityGraph:
    """Layer-output DAG. Node ids are ``stream.layer``; fused nodes use stream ``*``."""

    nodes: list[str]
    edges: list[tuple[str, str]]

    def incoming(self, node: str) -> list[str]:
        return [a for a, b in self.edges if b == node]

    def to_text(self) -> str:
        return "".join(f"{a} -> {b}\n" for a, b in self.edges)


def connectivity_graph(config: NetworkConfig) -> ConnectivityGraph:
    L = config.depth
    S = config.num_paths
    nodes = [f"{s}.{l}" for s in range(1, S + 1) for l in range(L)]
    edges: list[tuple[str, str]] = []
    for s in range(1, S + 1):
        for l in range(1, L):
            if config.fusion == "hyperdense":
                edges += [(f"{t}.{j}", f"{s}.{l}") for j, t in permutation(s, l, S).order]
            else:
                edges.append((f"{s}.{l - 1}", f"{s}.{l}"))
    bridge = f"*.{L}"
    if config.fusion == "hyperdense":
        edges += [(f"{t}.{j}", bridge) for j, t in permutation(1, L, S).order]
    else:
        edges += [(f"{s}.{L - 1}", bridge) for s in range(1, S + 1)]
    prev = bridge
    fused = [bridge]
    for k in range(1, L + 1):
        node = f"*.{L + k}"
        edges.append((prev, node))
        edges += [(f"{s}.{L - k}", node) for s in range(1, S + 1)]
        fused.append(node)
        prev = node
    out = f"*.{2 * L + 1}"
    edges.append((prev, out))
    return ConnectivityGraph(nodes + fused + [out], edges)


# --- the network -----------------------------------------------------------


class Upsample(Module):
    """Nearest 2x upsampling followed by a 1x1 channel-halving convolution.

    The projection has no bias under batchnorm: every consumer starts with a
    1x1 conv plus BN, which would cancel it.
    """

    def __init__(self, channels: int, rng, dtype, bias: bool = True):
        self.proj = Conv2d(channels, channels // 2, (1, 1), rng, bias=bias, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.proj(F.upsample2x(x))


class MultiPathUNet(Module):
    def __init__(self, config: NetworkConfig):
        self.config = config
        dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(config.seed)
        L = config.depth
        self.streams = [
            _Stream(
                [InceptionBlock(config.inception_spec(config.encoder_in_channels(l), config.width(l)), rng, dtype) for l in range(L)]
            )
            for _ in range(config.num_paths)
        ]
        self.bridge = InceptionBlock(config.inception_spec(config.bridge_in_channels(), config.width(L)), rng, dtype)
        self.up = []
        self.dec = []
        for k in range(1, L + 1):
            c = config.width(L - k + 1)
            self.up.append(Upsample(c, rng, dtype, bias=not config.batchnorm))
            self.dec.append(InceptionBlock(config.inception_spec(c // 2, c // 2), rng, dtype))
        self.head = Conv2d(config.base_width, config.num_classes, (1, 1), rng, dtype=dtype)
        self.trace: ShapeTable | None = None
        self._pool = F.maxpool2d if config.align_pool == "max" else F.avgpool2d

    def children(self):
        for i, s in enumerate(self.streams):
            yield f"stream{i + 1}", s
        yield "bridge", self.bridge
        for i, (u, d) in enumerate(zip(self.up, self.dec)):
            yield f"up{i + 1}", u
            yield f"dec{i + 1}", d
        yield "head", self.head

    def _record(self, name, inp, out):
        if self.trace is not None:
            self.trace.add(name, inp.shape[1:], out.shape[1:])

    def forward(self, inputs) -> Tensor:
        """Map per-modality tensors ``[B,1,H,W]`` to class probabilities ``[B,K,H,W]``."""
        cfg = self.config
        if isinstance(inputs, Tensor):
            inputs = [inputs]
        inputs = [x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=cfg.dtype)) for x in inputs]
        if len(inputs) != cfg.num_streams:
            raise ValueError(f"network has {cfg.num_streams} modality inputs, got {len(inputs)}")
        ref = inputs[0].shape
        for i, x in enumerate(inputs):
            if x.ndim != 4 or x.shape[1] != 1 or x.shape != ref:
                raise ValueError(f"modality {i} has shape {x.shape}; expected [B,1,H,W] matching {ref}")
        if any(v % 2**cfg.depth for v in ref[2:]):
            raise ValueError(f"spatial size {ref[2:]} not divisible by 2**depth = {2**cfg.depth}")

        L = cfg.depth
        S = cfg.num_paths
        current = [F.concat(inputs)] if cfg.fusion == "early" else list(inputs)
        dense: list[dict[tuple[int, int], Tensor]] = [{}]  # (layer j, stream t) -> feature at current level
        skips = []
        for l in range(L):
            outs = []
            for s in range(S):
                if l > 0 and cfg.fusion == "hyperdense":
                    inp = F.concat([dense[-1][(j, t)] for j, t in permutation(s + 1, l, S).order])
                else:
                    inp = current[s]
                y = self.streams[s].layers[l](inp)
                if s == 0:
                    self._record("Conv Layer 1" if l == 0 else f"Layer {l + 1}", inp, y)
                outs.append(y)
            skips.append(F.add_n(outs))
            current = [self._pool(y) for y in outs]
            self._record(f"Max-pooling {l + 1}", outs[0], current[0])
            if cfg.fusion == "hyperdense":
                level = {key: self._pool(f) for key, f in dense[-1].items()}
                level.update({(l, s + 1): current[s] for s in range(S)})
                dense.append(level)

        if cfg.fusion == "hyperdense":
            inp = F.concat([dense[-1][(j, t)] for j, t in permutation(1, L, S).order])
        else:
            inp = F.concat(current)
        x = self.bridge(inp)
        self._record("Bridge", inp, x)
        for k in range(L):
            u = self.up[k](x)
            self._record(f"Up-sample {k + 1}", x, u)
            u = F.add(u, skips[L - 1 - k])
            x = self.dec[k](u)
            self._record(f"Layer {L + k + 1}", u, x)
        probs = F.softmax_channels(self.head(x))
        self._record("Softmax layer", x, probs)
        return probs

    def traced_shapes(self, batch: int = 1) -> ShapeTable:
        """Run a forward pass on zeros and return the observed shape rows."""
        from .tensor import no_grad

        H, W = self.config.input_spatial
        self.trace = ShapeTable()
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                self.forward([Tensor(np.zeros((batch, 1, H, W), dtype=self.config.dtype)) for _ in range(self.config.num_streams)])
            return self.trace
        finally:
            self.trace = None
            self.train(was_training)


class _Stream(Module):
    def __init__(self, layers: list[InceptionBlock]):
        self.layers = layers

    def children(self):
        for i, layer in enumerate(self.layers):
            yield f"enc{i}", layer


def build_network(config: NetworkConfig) -> MultiPathUNet:
    config.validate()
    return MultiPathUNet(config)
