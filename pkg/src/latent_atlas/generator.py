"""Miniature style-based generator with a tappable intermediate feature map.

Structure: a stack of dense mapping layers turns a sphere latent z into
w (keeping the final pre-activation p around for the whitened-space
view), per-layer learned affines turn w into style scale/bias pairs,
and a synthesis stack of style-modulated stride-1 convolutions with
nearest-neighbor upsampling between resolution blocks turns a learned
constant into an RGB image through a channel affine and a sigmoid.

The input feature map of the split layer is the tap point: synthesis
can be restarted from an externally supplied feature map there, which
is what the f/ composed latent spaces optimize.

Weights are fixed at seeded random values (no adversarial training);
everything the latent-space experiments measure is a property of the
architecture, not of a learned image prior.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import Graph, Node, leaky_relu_raw, LEAKY_SLOPE
from .codes import LatentCode, FEATURE_SPACES

_MAGIC = b"SGZ1"
_LEAKY_GAIN = math.sqrt(2.0 / (1.0 + LEAKY_SLOPE ** 2))


@dataclass(frozen=True)
class GeneratorConfig:
    """Architecture description. ``split_layer`` is 1-based: detail codes
    feed layers split_layer..synthesis_layers, the tap feature feeds layer
    ``split_layer`` and absorbs everything below it."""

    latent_dim: int = 64
    mapping_layers: int = 4
    synthesis_layers: int = 8
    split_layer: int = 4
    base_resolution: int = 4
    output_resolution: int = 32
    channels: tuple = (24, 16, 12, 8)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        problems = self.violations()
        if problems:
            raise ValueError("invalid generator config: " + "; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        if self.latent_dim < 2:
            out.append(f"latent_dim must be >= 2, got {self.latent_dim}")
        if self.mapping_layers < 1:
            out.append(f"mapping_layers must be >= 1, got {self.mapping_layers}")
        if self.synthesis_layers < 2:
            out.append(f"synthesis_layers must be >= 2, got {self.synthesis_layers}")
        if not (1 < self.split_layer <= self.synthesis_layers):
            out.append(f"split_layer must satisfy 1 < M <= {self.synthesis_layers}, "
                       f"got {self.split_layer}")
        if not self.channels or any(c < 1 for c in self.channels):
            out.append(f"channels must all be positive, got {self.channels}")
        if self.base_resolution < 2:
            out.append(f"base_resolution must be >= 2, got {self.base_resolution}")
        if self.channels:
            expected = self.base_resolution * 2 ** (len(self.channels) - 1)
            if self.output_resolution != expected:
                out.append(f"output_resolution {self.output_resolution} != "
                           f"base_resolution * 2^(blocks-1) = {expected}")
            if self.synthesis_layers % len(self.channels) != 0:
                out.append(f"synthesis_layers {self.synthesis_layers} not divisible "
                           f"by {len(self.channels)} blocks")
        if self.output_resolution > 128:
            out.append(f"output_resolution capped at 128, got {self.output_resolution}")
        if self.seed < 0:
            out.append(f"seed must be non-negative, got {self.seed}")
        return out

    @property
    def blocks(self) -> int:
        return len(self.channels)

    @property
    def layers_per_block(self) -> int:
        return self.synthesis_layers // self.blocks

    def layer_in_channels(self, i: int) -> int:
        if i == 0:
            return self.channels[0]
        return self.channels[(i - 1) // self.layers_per_block]

    def layer_out_channels(self, i: int) -> int:
        return self.channels[i // self.layers_per_block]

    def layer_resolution(self, i: int) -> int:
        return self.base_resolution * 2 ** (i // self.layers_per_block)

    def upsample_before(self, i: int) -> bool:
        return i > 0 and i % self.layers_per_block == 0

    @property
    def tap_index(self) -> int:
        """0-based index of the first detail layer (the tap feeds it)."""
        return self.split_layer - 1

    @property
    def feature_shape(self) -> tuple:
        t = self.tap_index
        return (self.layer_in_channels(t), self.layer_resolution(t),
                self.layer_resolution(t))

    @property
    def detail_layers(self) -> range:
        return range(self.tap_index, self.synthesis_layers)

    def style_dim(self, i: int) -> int:
        """Length of the layer-i style vector (scale and bias halves)."""
        return 2 * self.layer_in_channels(i)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)


def weight_specs(cfg: GeneratorConfig) -> list[tuple[str, tuple, str]]:
    """(name, shape, kind) for every weight array, in declared file order."""
    d = cfg.latent_dim
    specs = []
    for l in range(cfg.mapping_layers):
        specs.append((f"mapping.W{l}", (d, d), "mapping_w"))
        specs.append((f"mapping.b{l}", (d,), "zeros"))
    specs.append(("const0", (cfg.channels[0], cfg.base_resolution,
                             cfg.base_resolution), "unit_normal"))
    for i in range(cfg.synthesis_layers):
        cin = cfg.layer_in_channels(i)
        cout = cfg.layer_out_channels(i)
        specs.append((f"affine.Ws{i}", (cin, d), "affine_w"))
        specs.append((f"affine.bs{i}", (cin,), "ones"))
        specs.append((f"affine.Wb{i}", (cin, d), "affine_w"))
        specs.append((f"affine.bb{i}", (cin,), "zeros"))
        specs.append((f"conv.K{i}", (cout, cin, 3, 3), "conv_k"))
    specs.append(("out.K", (3, cfg.channels[-1], 1, 1), "out_k"))
    specs.append(("out.scale", (3,), "ones"))
    specs.append(("out.bias", (3,), "zeros"))
    return specs


@dataclass
class GeneratorBundle:
    """Config plus weight arrays. Treated as immutable after creation;
    pivotal tuning always operates on a private copy."""

    config: GeneratorConfig
    weights: dict

    def __post_init__(self):
        for arr in self.weights.values():
            arr.setflags(write=False)

    def copy(self) -> "GeneratorBundle":
        return GeneratorBundle(self.config,
                               {k: np.array(v) for k, v in self.weights.items()})

    def weights_bytes(self) -> bytes:
        """Canonical 32-bit byte image of the weights (for change detection)."""
        return b"".join(np.asarray(self.weights[name], dtype=np.float32).tobytes()
                        for name, _, _ in weight_specs(self.config))


def _quantize32(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float32).astype(np.float64)


def init_generator(config: GeneratorConfig) -> GeneratorBundle:
    """Draw seeded weights. Values are rounded through float32 so that a
    freshly initialized bundle and one reloaded from disk are identical."""
    rng = np.random.default_rng(config.seed)
    d = config.latent_dim
    weights = {}
    for name, shape, kind in weight_specs(config):
        if kind == "zeros":
            arr = np.zeros(shape)
        elif kind == "ones":
            arr = np.ones(shape)
        elif kind == "mapping_w":
            arr = rng.standard_normal(shape) * (_LEAKY_GAIN / math.sqrt(d))
        elif kind == "affine_w":
            # small style spread keeps modulation near identity so the
            # activation scale stays stable through the stack
            arr = rng.standard_normal(shape) * (0.3 / math.sqrt(d))
        elif kind == "unit_normal":
            arr = rng.standard_normal(shape)
        elif kind == "conv_k":
            fan_in = shape[1] * shape[2] * shape[3]
            arr = rng.standard_normal(shape) * (_LEAKY_GAIN / math.sqrt(fan_in))
        elif kind == "out_k":
            fan_in = shape[1] * shape[2] * shape[3]
            arr = rng.standard_normal(shape) * (3.0 / math.sqrt(fan_in))
        else:
            raise AssertionError(kind)
        weights[name] = _quantize32(arr)
    return GeneratorBundle(config, weights)


# ---------------------------------------------------------------------------
# Graph assembly
# ---------------------------------------------------------------------------

@dataclass
class ForwardGraph:
    """A built synthesis graph for one latent space.

    ``code_slots`` are the graph input names that carry the latent code;
    ``w_slots`` are the w-vector input nodes (for pre-activation
    regularizers); ``weight_slots`` are weight arrays promoted to inputs
    (used by pivotal tuning).
    """

    graph: Graph
    space: str
    config: GeneratorConfig
    image: Node
    tap: Node | None
    code_slots: list
    w_slots: list
    weight_slots: list

    def bind(self, code: LatentCode, bundle: GeneratorBundle | None = None) -> dict:
        out = dict(code_bindings(code))
        if bundle is not None:
            for name in self.weight_slots:
                out[name] = bundle.weights[name]
        return out


def _weight_nodes(g: Graph, bundle: GeneratorBundle, trainable=()) -> dict:
    trainable = set(trainable)
    nodes = {}
    for name, shape, _ in weight_specs(bundle.config):
        if name in trainable:
            nodes[name] = g.input(name, shape, trainable=True)
        else:
            nodes[name] = g.constant(bundle.weights[name], name=name)
    return nodes


def _mapping_nodes(g: Graph, W: dict, cfg: GeneratorConfig, z: Node):
    h = z
    pre = None
    for l in range(cfg.mapping_layers):
        pre = g.add(g.matmul(W[f"mapping.W{l}"], h), W[f"mapping.b{l}"])
        h = g.leaky_relu(pre)
    return pre, h  # (p, w)


def _affine_nodes(g: Graph, W: dict, i: int, w: Node):
    scale = g.add(g.matmul(W[f"affine.Ws{i}"], w), W[f"affine.bs{i}"])
    bias = g.add(g.matmul(W[f"affine.Wb{i}"], w), W[f"affine.bb{i}"])
    return scale, bias


def _synthesis_nodes(g: Graph, W: dict, cfg: GeneratorConfig, styles: list,
                     f_node: Node | None = None, want_tap: bool = False):
    """styles[i] = (scale_node, bias_node) per layer; prefix entries may be
    None when starting from a feature override."""
    tap_idx = cfg.tap_index
    if f_node is None:
        x, start = W["const0"], 0
    else:
        x, start = f_node, tap_idx
    tap = None
    for i in range(start, cfg.synthesis_layers):
        if cfg.upsample_before(i) and not (f_node is not None and i == start):
            # an override already includes the boundary upsample feeding it
            x = g.upsample2x(x)
        if want_tap and f_node is None and i == tap_idx:
            tap = x
        scale, bias = styles[i]
        x = g.scale_bias(x, scale, bias)
        x = g.conv2d(x, W[f"conv.K{i}"])
        x = g.leaky_relu(x)
    y = g.conv2d(x, W["out.K"])
    y = g.scale_bias(y, W["out.scale"], W["out.bias"])
    return g.sigmoid(y), tap


def _space_branch(g: Graph, W: dict, cfg: GeneratorConfig, space: str,
                  vec_factory, want_tap: bool = False):
    """Assemble one image-from-code branch; ``vec_factory(name, shape)``
    supplies the code nodes (inputs for optimization, constants for
    frozen branches). Returns (image, tap, w_slot_nodes)."""
    N, M1, d = cfg.synthesis_layers, cfg.tap_index, cfg.latent_dim
    w_slots = []
    styles = [None] * N
    f_node = None
    if space in FEATURE_SPACES:
        f_node = vec_factory("f", cfg.feature_shape)
        layer_range = range(M1, N)
    else:
        layer_range = range(N)

    if space == "z":
        _, w = _mapping_nodes(g, W, cfg, vec_factory("z", (d,)))
        for i in layer_range:
            styles[i] = _affine_nodes(g, W, i, w)
    elif space == "w":
        w = vec_factory("w", (d,))
        w_slots.append(w)
        for i in layer_range:
            styles[i] = _affine_nodes(g, W, i, w)
    elif space in ("z+", "f/z+"):
        for i in layer_range:
            _, w = _mapping_nodes(g, W, cfg, vec_factory(f"z{i}", (d,)))
            styles[i] = _affine_nodes(g, W, i, w)
    elif space in ("w+", "f/w+"):
        for i in layer_range:
            w = vec_factory(f"w{i}", (d,))
            w_slots.append(w)
            styles[i] = _affine_nodes(g, W, i, w)
    elif space in ("s", "f/s"):
        for i in layer_range:
            c = cfg.layer_in_channels(i)
            styles[i] = (vec_factory(f"s{i}.scale", (c,)),
                         vec_factory(f"s{i}.bias", (c,)))
    else:
        raise ValueError(f"unknown space '{space}'")

    image, tap = _synthesis_nodes(g, W, cfg, styles, f_node=f_node, want_tap=want_tap)
    return image, tap, w_slots


def build_forward(bundle: GeneratorBundle, space: str, *, trainable_code=True,
                  trainable_weights=(), want_tap=False) -> ForwardGraph:
    """Assemble the image-from-code graph for one latent space.

    Code components become named graph inputs (one slot per vector, with
    s-type style vectors split into scale/bias halves); weights are baked
    in as constants unless named in ``trainable_weights``.
    """
    cfg = bundle.config
    g = Graph()
    W = _weight_nodes(g, bundle, trainable_weights)
    slots = []

    def factory(name, shape):
        slots.append(name)
        return g.input(name, shape, trainable=trainable_code)

    image, tap, w_slots = _space_branch(g, W, cfg, space, factory, want_tap)
    return ForwardGraph(g, space, cfg, image, tap, slots, w_slots,
                        list(trainable_weights))


def code_bindings(code: LatentCode) -> dict:
    """Map a latent code onto the graph input slots of its space."""
    cfg = code.config
    out = {}
    if code.feature is not None:
        out["f"] = code.feature
    layers = list(code.detail_layers())
    if code.space == "z":
        out["z"] = code.vectors[0]
    elif code.space == "w":
        out["w"] = code.vectors[0]
    elif code.space in ("z+", "f/z+"):
        for i, v in zip(layers, code.vectors):
            out[f"z{i}"] = v
    elif code.space in ("w+", "f/w+"):
        for i, v in zip(layers, code.vectors):
            out[f"w{i}"] = v
    else:
        for i, v in zip(layers, code.vectors):
            c = cfg.layer_in_channels(i)
            out[f"s{i}.scale"] = v[:c]
            out[f"s{i}.bias"] = v[c:]
    return out


def bindings_to_code(space: str, cfg: GeneratorConfig, values: dict) -> LatentCode:
    """Inverse of :func:`code_bindings` (used after optimization)."""
    feature = values.get("f")
    if space == "z":
        vectors = (values["z"],)
    elif space == "w":
        vectors = (values["w"],)
    elif space in ("z+", "f/z+"):
        lo = cfg.tap_index if space in FEATURE_SPACES else 0
        vectors = tuple(values[f"z{i}"] for i in range(lo, cfg.synthesis_layers))
    elif space in ("w+", "f/w+"):
        lo = cfg.tap_index if space in FEATURE_SPACES else 0
        vectors = tuple(values[f"w{i}"] for i in range(lo, cfg.synthesis_layers))
    else:
        lo = cfg.tap_index if space in FEATURE_SPACES else 0
        vectors = tuple(np.concatenate([values[f"s{i}.scale"], values[f"s{i}.bias"]])
                        for i in range(lo, cfg.synthesis_layers))
    return LatentCode(space, cfg, vectors, feature)


# ---------------------------------------------------------------------------
# Plain evaluation entry points
# ---------------------------------------------------------------------------

def synthesize(bundle: GeneratorBundle, code: LatentCode) -> np.ndarray:
    """Render a latent code to an RGB image in [0, 1], shape (3, H, W)."""
    if code.config != bundle.config:
        raise ValueError("code was built for a different generator config")
    fg = build_forward(bundle, code.space, trainable_code=False)
    return fg.graph.forward(code_bindings(code), output=fg.image)


def tap_feature(bundle: GeneratorBundle, code: LatentCode) -> np.ndarray:
    """Input feature map of the split layer under a full-depth code."""
    if code.space in FEATURE_SPACES:
        raise ValueError(f"code in '{code.space}' already carries a feature map")
    fg = build_forward(bundle, code.space, trainable_code=False, want_tap=True)
    fg.graph.forward(code_bindings(code), output=fg.image)
    return fg.graph.value(fg.tap)


def map_latent(bundle: GeneratorBundle, z: np.ndarray):
    """Run the mapping stack on one latent: returns (p, w) with
    w = leaky_relu(p) and p the final-layer pre-activation."""
    cfg = bundle.config
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (cfg.latent_dim,):
        raise ValueError(f"latent shape {z.shape} != ({cfg.latent_dim},)")
    h = z
    for l in range(cfg.mapping_layers):
        pre = bundle.weights[f"mapping.W{l}"] @ h + bundle.weights[f"mapping.b{l}"]
        h = leaky_relu_raw(pre)
    return pre, h


def map_batch(bundle: GeneratorBundle, zs: np.ndarray):
    """Vectorized mapping for (n, d) latents: returns (P, W), each (n, d)."""
    cfg = bundle.config
    h = np.asarray(zs, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != cfg.latent_dim:
        raise ValueError(f"batch shape {h.shape} != (n, {cfg.latent_dim})")
    for l in range(cfg.mapping_layers):
        pre = h @ bundle.weights[f"mapping.W{l}"].T + bundle.weights[f"mapping.b{l}"]
        h = leaky_relu_raw(pre)
    return pre, h


def style_vector(bundle: GeneratorBundle, i: int, w: np.ndarray) -> np.ndarray:
    """Layer-i style (scale and bias halves concatenated) for a given w."""
    Wt = bundle.weights
    scale = Wt[f"affine.Ws{i}"] @ w + Wt[f"affine.bs{i}"]
    bias = Wt[f"affine.Wb{i}"] @ w + Wt[f"affine.bb{i}"]
    return np.concatenate([scale, bias])


# ---------------------------------------------------------------------------
# Weights file: magic "SGZ1", little-endian config header, float32 arrays
# in declared order, with a JSON sidecar for human inspection.
# ---------------------------------------------------------------------------

def save_generator(bundle: GeneratorBundle, path: str) -> None:
    cfg = bundle.config
    parts = [_MAGIC]
    parts.append(struct.pack("<6IQ", cfg.latent_dim, cfg.mapping_layers,
                             cfg.synthesis_layers, cfg.split_layer,
                             cfg.base_resolution, cfg.output_resolution,
                             cfg.seed))
    parts.append(struct.pack("<I", len(cfg.channels)))
    parts.append(struct.pack(f"<{len(cfg.channels)}I", *cfg.channels))
    specs = weight_specs(cfg)
    parts.append(struct.pack("<I", len(specs)))
    for name, shape, _ in specs:
        arr = np.ascontiguousarray(bundle.weights[name], dtype=np.float32)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))
    sidecar = {"format": "SGZ1", "config": cfg.to_dict(),
               "arrays": [{"name": n, "shape": list(s)} for n, s, _ in specs]}
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_generator(path: str) -> GeneratorBundle:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"not a generator weights file (magic {blob[:4]!r})")
    off = 4
    d, L, N, M, base, outres, seed = struct.unpack_from("<6IQ", blob, off)
    off += struct.calcsize("<6IQ")
    (nch,) = struct.unpack_from("<I", blob, off)
    off += 4
    channels = struct.unpack_from(f"<{nch}I", blob, off)
    off += 4 * nch
    cfg = GeneratorConfig(latent_dim=d, mapping_layers=L, synthesis_layers=N,
                          split_layer=M, base_resolution=base,
                          output_resolution=outres, channels=channels, seed=seed)
    (n_arrays,) = struct.unpack_from("<I", blob, off)
    off += 4
    specs = weight_specs(cfg)
    if n_arrays != len(specs):
        raise ValueError(f"weights file declares {n_arrays} arrays, "
                         f"config implies {len(specs)}")
    weights = {}
    for name, shape, _ in specs:
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        if tuple(dims) != tuple(shape):
            raise ValueError(f"array '{name}': stored shape {dims} != expected {shape}")
        count = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
        off += 4 * count
        weights[name] = arr.astype(np.float64).reshape(dims)
    if off != len(blob):
        raise ValueError(f"{len(blob) - off} trailing bytes in weights file")
    return GeneratorBundle(cfg, weights)
