"""Reverse-mode automatic differentiation over dense float64 tensors.

Small fixed primitive set, just enough to express a style-modulated
convolutional generator and its inversion losses: add, mul, matmul,
stride-1 same-padding 2-D convolution, nearest-neighbor 2x up/down
sampling, leaky ReLU, sigmoid, per-channel scale-and-bias, L2 norm,
mean, MSE reduction, reshape, and unit normalization.

A ``Graph`` is declared once with named leaf inputs and then executed
many times with different bindings; a single reverse sweep over the
recorded nodes yields gradients for every trainable leaf.  All compute
is float64 numpy, single-threaded per graph; distinct graphs may run
concurrently as long as any shared constant arrays are left untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LEAKY_SLOPE = 0.2

# Finite-difference defaults: central differences at h=1e-5 balance
# truncation against round-off in float64.
FD_STEP = 1e-5
FD_TOLERANCE = 1e-4
MAX_GRADCHECK_SCALARS = 10_000

# Relative-error denominators are floored so that a true-zero gradient
# with round-off level FD noise does not register as a failure.
_REL_FLOOR = 1e-6


class ShapeError(ValueError):
    """Operand shapes incompatible with an operation's signature."""


class GraphError(RuntimeError):
    """Graph used out of order (e.g. backward before forward)."""


class Tensor:
    """Validated dense array: a shape plus a flat row-major float64 payload.

    Construction rejects non-finite values and shape/size mismatches.
    The payload is read-only once wrapped.
    """

    __slots__ = ("shape", "data")

    def __init__(self, shape, data):
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeError(f"tensor dimensions must be positive, got {shape}")
        arr = np.array(data, dtype=np.float64).reshape(-1)
        expected = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if arr.size != expected:
            raise ShapeError(
                f"shape {shape} implies {expected} elements, payload has {arr.size}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor payload contains NaN or Inf")
        arr.setflags(write=False)
        self.shape = shape
        self.data = arr

    @classmethod
    def from_array(cls, arr) -> "Tensor":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(arr.shape, arr.reshape(-1))

    def to_array(self) -> np.ndarray:
        return self.data.reshape(self.shape)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


def _as_array(value) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.to_array()
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("array contains NaN or Inf")
    return arr


# ---------------------------------------------------------------------------
# Raw kernels, shared by graph ops and by forward-only callers (the metric
# feature pyramid reuses these so both paths compute identical floats).
# ---------------------------------------------------------------------------

def conv2d_raw(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Stride-1 zero-padded 'same' convolution: x (C,H,W), k (O,C,kh,kw)."""
    cols = _im2col(x, k.shape[2], k.shape[3])
    out = k.reshape(k.shape[0], -1) @ cols
    return out.reshape(k.shape[0], x.shape[1], x.shape[2])


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    c, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (C,H,W,kh,kw)
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * kh * kw, h * w)


def _conv_flip(k: np.ndarray) -> np.ndarray:
    # Gradient w.r.t. the input of a same-padded stride-1 conv is another
    # same-padded conv with in/out channels swapped and the taps flipped.
    return np.ascontiguousarray(k.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])


def upsample2x_raw(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def downsample2x_raw(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x[:, ::2, ::2])


def leaky_relu_raw(x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(x >= 0.0, x, slope * x)


def sigmoid_raw(x: np.ndarray) -> np.ndarray:
    # branch on sign so exp never overflows
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Node:
    """Handle to one operation in a graph. Created through Graph methods."""

    __slots__ = ("graph", "idx", "op", "parents", "shape", "payload", "name", "trainable")

    def __init__(self, graph, idx, op, parents, shape, payload=None, name=None, trainable=False):
        self.graph = graph
        self.idx = idx
        self.op = op
        self.parents = parents
        self.shape = shape
        self.payload = payload
        self.name = name
        self.trainable = trainable

    def __repr__(self):
        tag = f" '{self.name}'" if self.name else ""
        return f"<Node {self.idx} {self.op}{tag} {self.shape}>"


class Graph:
    """A static DAG of tensor operations with named leaf inputs.

    Nodes are appended in creation order, which is a topological order by
    construction; the backward sweep walks it in reverse, visiting each
    node exactly once.  A graph instance is single-writer: do not share
    one across threads while calling forward/backward on it.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._inputs: dict[str, Node] = {}
        self._values: list = []
        self._adjoints: list = []
        self._caches: list = []
        self._output: Node | None = None
        self._ran = False

    # -- construction -------------------------------------------------------

    def _new(self, op, parents, shape, payload=None, name=None, trainable=False) -> Node:
        node = Node(self, len(self.nodes), op, tuple(p.idx for p in parents),
                    tuple(shape), payload, name, trainable)
        self.nodes.append(node)
        self._values.append(None)
        self._adjoints.append(None)
        self._caches.append(None)
        return node

    def input(self, name: str, shape, trainable: bool = True) -> Node:
        if name in self._inputs:
            raise GraphError(f"duplicate input name '{name}'")
        node = self._new("input", (), tuple(int(s) for s in shape),
                         name=name, trainable=trainable)
        self._inputs[name] = node
        return node

    def constant(self, value, name=None) -> Node:
        arr = _as_array(value)
        node = self._new("const", (), arr.shape, payload=arr, name=name)
        return node

    def add(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise ShapeError(f"add: operand shapes differ: {a.shape} vs {b.shape}")
        return self._new("add", (a, b), a.shape)

    def mul(self, a: Node, b: Node) -> Node:
        # Elementwise; the only broadcast allowed anywhere is scalar * tensor.
        if a.shape == b.shape:
            return self._new("mul", (a, b), a.shape)
        if a.shape == ():
            return self._new("mul", (a, b), b.shape)
        if b.shape == ():
            return self._new("mul", (a, b), a.shape)
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} are neither equal "
                         f"nor scalar-times-tensor")

    def matmul(self, a: Node, b: Node) -> Node:
        if len(a.shape) != 2:
            raise ShapeError(f"matmul: left operand must be 2-D, got {a.shape}")
        if len(b.shape) == 2:
            if a.shape[1] != b.shape[0]:
                raise ShapeError(f"matmul: inner dims differ: {a.shape} @ {b.shape}")
            return self._new("matmul", (a, b), (a.shape[0], b.shape[1]))
        if len(b.shape) == 1:
            if a.shape[1] != b.shape[0]:
                raise ShapeError(f"matmul: inner dims differ: {a.shape} @ {b.shape}")
            return self._new("matmul", (a, b), (a.shape[0],))
        raise ShapeError(f"matmul: right operand must be 1-D or 2-D, got {b.shape}")

    def conv2d(self, x: Node, k: Node) -> Node:
        if len(x.shape) != 3 or len(k.shape) != 4:
            raise ShapeError(f"conv2d: expected input (C,H,W) and kernel (O,C,kh,kw), "
                             f"got {x.shape} and {k.shape}")
        if k.shape[1] != x.shape[0]:
            raise ShapeError(f"conv2d: kernel expects {k.shape[1]} input channels, "
                             f"input has {x.shape[0]} (input {x.shape}, kernel {k.shape})")
        if k.shape[2] % 2 == 0 or k.shape[3] % 2 == 0:
            raise ShapeError(f"conv2d: kernel taps must be odd for same padding, got {k.shape}")
        return self._new("conv2d", (x, k), (k.shape[0], x.shape[1], x.shape[2]))

    def upsample2x(self, x: Node) -> Node:
        if len(x.shape) != 3:
            raise ShapeError(f"upsample2x: expected (C,H,W), got {x.shape}")
        return self._new("upsample2x", (x,), (x.shape[0], 2 * x.shape[1], 2 * x.shape[2]))

    def downsample2x(self, x: Node) -> Node:
        if len(x.shape) != 3:
            raise ShapeError(f"downsample2x: expected (C,H,W), got {x.shape}")
        return self._new("downsample2x", (x,),
                         (x.shape[0], (x.shape[1] + 1) // 2, (x.shape[2] + 1) // 2))

    def leaky_relu(self, x: Node, slope: float = LEAKY_SLOPE) -> Node:
        return self._new("leaky_relu", (x,), x.shape, payload=float(slope))

    def sigmoid(self, x: Node) -> Node:
        return self._new("sigmoid", (x,), x.shape)

    def scale_bias(self, x: Node, scale: Node, bias: Node) -> Node:
        if len(x.shape) != 3:
            raise ShapeError(f"scale_bias: expected input (C,H,W), got {x.shape}")
        c = x.shape[0]
        if scale.shape != (c,) or bias.shape != (c,):
            raise ShapeError(f"scale_bias: scale {scale.shape} and bias {bias.shape} "
                             f"must both be ({c},) for input {x.shape}")
        return self._new("scale_bias", (x, scale, bias), x.shape)

    def l2norm(self, x: Node) -> Node:
        return self._new("l2norm", (x,), ())

    def mean(self, x: Node) -> Node:
        return self._new("mean", (x,), ())

    def mse(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise ShapeError(f"mse: operand shapes differ: {a.shape} vs {b.shape}")
        return self._new("mse", (a, b), ())

    def reshape(self, x: Node, shape) -> Node:
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape, dtype=np.int64)) != int(np.prod(x.shape, dtype=np.int64)):
            raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
        return self._new("reshape", (x,), shape)

    def unit_normalize(self, x: Node) -> Node:
        return self._new("unit_normalize", (x,), x.shape)

    # -- execution ----------------------------------------------------------

    @property
    def input_names(self) -> list[str]:
        return list(self._inputs)

    def trainable_inputs(self) -> list[Node]:
        return [n for n in self._inputs.values() if n.trainable]

    def forward(self, inputs: dict, output: Node | None = None) -> np.ndarray:
        """Evaluate the graph with the given leaf bindings.

        ``inputs`` maps input names to arrays (or Tensors).  Returns the
        value of ``output`` (default: last created node) as a fresh array.
        """
        out = output if output is not None else (self.nodes[-1] if self.nodes else None)
        if out is None:
            raise GraphError("empty graph")
        for name, node in self._inputs.items():
            if name not in inputs:
                raise GraphError(f"missing binding for input '{name}'")
            arr = _as_array(inputs[name])
            if arr.shape != node.shape:
                raise ShapeError(f"input '{name}': bound shape {arr.shape} != "
                                 f"declared {node.shape}")
            self._values[node.idx] = arr
        for node in self.nodes:
            if node.op not in ("input", "const"):
                self._values[node.idx] = self._eval(node)
            elif node.op == "const":
                self._values[node.idx] = node.payload
        self._output = out
        self._ran = True
        return np.array(self._values[out.idx])

    def value(self, node: Node) -> np.ndarray:
        if not self._ran:
            raise GraphError("value() before forward()")
        return np.array(self._values[node.idx])

    def backward(self, output_adjoint=None) -> dict[str, np.ndarray]:
        """Reverse sweep from the last forward's output.

        Returns gradients for every trainable input; leaves that do not
        influence the output get exact zeros.  Non-trainable inputs are
        omitted.
        """
        if not self._ran:
            raise GraphError("backward before forward")
        out = self._output
        adj = self._adjoints
        for i in range(len(adj)):
            adj[i] = None
        if output_adjoint is None:
            seed = np.ones(out.shape, dtype=np.float64)
        else:
            seed = _as_array(output_adjoint)
            if seed.shape != out.shape:
                raise ShapeError(f"output adjoint shape {seed.shape} != output {out.shape}")
        adj[out.idx] = seed.astype(np.float64, copy=True)
        for idx in range(out.idx, -1, -1):
            g = adj[idx]
            if g is None:
                continue
            node = self.nodes[idx]
            if node.op in ("input", "const"):
                continue
            self._prop(node, g)
        grads = {}
        for name, node in self._inputs.items():
            if not node.trainable:
                continue
            g = adj[node.idx]
            grads[name] = np.zeros(node.shape) if g is None else np.array(g)
        return grads

    def _acc(self, idx: int, g: np.ndarray):
        if self._adjoints[idx] is None:
            self._adjoints[idx] = g.copy() if g.base is not None else g
        else:
            self._adjoints[idx] = self._adjoints[idx] + g

    # -- op semantics --------------------------------------------------------

    def _eval(self, node: Node) -> np.ndarray:
        op = node.op
        vals = [self._values[p] for p in node.parents]
        if op == "add":
            return vals[0] + vals[1]
        if op == "mul":
            return vals[0] * vals[1]
        if op == "matmul":
            return vals[0] @ vals[1]
        if op == "conv2d":
            x, k = vals
            cols = _im2col(x, k.shape[2], k.shape[3])
            self._caches[node.idx] = cols
            out = k.reshape(k.shape[0], -1) @ cols
            return out.reshape(node.shape)
        if op == "upsample2x":
            return upsample2x_raw(vals[0])
        if op == "downsample2x":
            return downsample2x_raw(vals[0])
        if op == "leaky_relu":
            return leaky_relu_raw(vals[0], node.payload)
        if op == "sigmoid":
            s = sigmoid_raw(vals[0])
            self._caches[node.idx] = s
            return s
        if op == "scale_bias":
            x, s, b = vals
            return x * s[:, None, None] + b[:, None, None]
        if op == "l2norm":
            return np.float64(np.sqrt(np.sum(vals[0] * vals[0])))
        if op == "mean":
            return np.float64(np.mean(vals[0]))
        if op == "mse":
            d = vals[0] - vals[1]
            return np.float64(np.mean(d * d))
        if op == "reshape":
            return vals[0].reshape(node.shape)
        if op == "unit_normalize":
            r = float(np.sqrt(np.sum(vals[0] * vals[0])))
            if r == 0.0:
                raise GraphError("unit_normalize of a zero tensor")
            y = vals[0] / r
            self._caches[node.idx] = (r, y)
            return y
        raise GraphError(f"unknown op '{op}'")

    def _prop(self, node: Node, g: np.ndarray):
        op = node.op
        ps = node.parents
        vals = [self._values[p] for p in ps]
        if op == "add":
            self._acc(ps[0], g)
            self._acc(ps[1], g)
        elif op == "mul":
            a, b = vals
            ga, gb = g * b, g * a
            if self.nodes[ps[0]].shape == () and a.shape != g.shape:
                ga = np.float64(np.sum(ga))
            if self.nodes[ps[1]].shape == () and b.shape != g.shape:
                gb = np.float64(np.sum(gb))
            self._acc(ps[0], np.asarray(ga))
            self._acc(ps[1], np.asarray(gb))
        elif op == "matmul":
            a, b = vals
            if b.ndim == 2:
                self._acc(ps[0], g @ b.T)
                self._acc(ps[1], a.T @ g)
            else:
                self._acc(ps[0], np.outer(g, b))
                self._acc(ps[1], a.T @ g)
        elif op == "conv2d":
            x, k = vals
            cols = self._caches[node.idx]
            if cols is None:
                cols = _im2col(x, k.shape[2], k.shape[3])
            g2 = g.reshape(k.shape[0], -1)
            self._acc(ps[1], (g2 @ cols.T).reshape(k.shape))
            self._acc(ps[0], conv2d_raw(g, _conv_flip(k)))
        elif op == "upsample2x":
            c, h, w = vals[0].shape
            self._acc(ps[0], g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)))
        elif op == "downsample2x":
            gx = np.zeros_like(vals[0])
            gx[:, ::2, ::2] = g
            self._acc(ps[0], gx)
        elif op == "leaky_relu":
            self._acc(ps[0], g * np.where(vals[0] >= 0.0, 1.0, node.payload))
        elif op == "sigmoid":
            s = self._caches[node.idx]
            self._acc(ps[0], g * s * (1.0 - s))
        elif op == "scale_bias":
            x, s, b = vals
            self._acc(ps[0], g * s[:, None, None])
            self._acc(ps[1], (g * x).sum(axis=(1, 2)))
            self._acc(ps[2], g.sum(axis=(1, 2)))
        elif op == "l2norm":
            r = float(self._values[node.idx])
            if r == 0.0:
                raise GraphError("l2norm gradient undefined at the origin")
            self._acc(ps[0], (float(g) / r) * vals[0])
        elif op == "mean":
            self._acc(ps[0], np.full(vals[0].shape, float(g) / vals[0].size))
        elif op == "mse":
            a, b = vals
            d = (2.0 * float(g) / a.size) * (a - b)
            self._acc(ps[0], d)
            self._acc(ps[1], -d)
        elif op == "reshape":
            self._acc(ps[0], g.reshape(vals[0].shape))
        elif op == "unit_normalize":
            r, y = self._caches[node.idx]
            self._acc(ps[0], (g - y * np.sum(y * g)) / r)
        else:
            raise GraphError(f"unknown op '{op}'")


@dataclass
class GradcheckEntry:
    name: str
    n_scalars: int
    max_rel_err: float


@dataclass
class GradcheckReport:
    tolerance: float
    entries: list[GradcheckEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.max_rel_err < self.tolerance for e in self.entries)

    @property
    def worst(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def lines(self) -> list[str]:
        out = []
        for e in self.entries:
            status = "ok" if e.max_rel_err < self.tolerance else "FAIL"
            out.append(f"{status:4s} {e.name:24s} n={e.n_scalars:<6d} "
                       f"max_rel_err={e.max_rel_err:.3e}")
        return out


def gradcheck(graph: Graph, inputs: dict, tolerance: float = FD_TOLERANCE,
              step: float = FD_STEP, output: Node | None = None) -> GradcheckReport:
    """Compare analytic gradients against central finite differences.

    The designated output must be scalar.  Cost is two forward passes per
    trainable scalar, so the total trainable size is capped at
    ``MAX_GRADCHECK_SCALARS``.
    """
    trainables = graph.trainable_inputs()
    total = sum(int(np.prod(n.shape, dtype=np.int64)) for n in trainables)
    if total > MAX_GRADCHECK_SCALARS:
        raise GraphError(f"gradcheck limited to {MAX_GRADCHECK_SCALARS} trainable "
                         f"scalars, graph has {total}")
    report = GradcheckReport(tolerance=tolerance)
    if not trainables:
        return report

    out = output if output is not None else graph.nodes[-1]
    if out.shape != ():
        raise GraphError(f"gradcheck requires a scalar output, got shape {out.shape}")
    bound = {k: _as_array(v).copy() for k, v in inputs.items()}
    graph.forward(bound, output=out)
    analytic = graph.backward()

    for node in trainables:
        base = bound[node.name]
        flat = base.reshape(-1)
        a = analytic[node.name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            fp = float(graph.forward(bound, output=out))
            flat[i] = keep - step
            fm = float(graph.forward(bound, output=out))
            flat[i] = keep
            numeric = (fp - fm) / (2.0 * step)
            denom = max(abs(a[i]), abs(numeric), _REL_FLOOR)
            worst = max(worst, abs(a[i] - numeric) / denom)
        report.entries.append(GradcheckEntry(node.name, flat.size, worst))
    # restore a clean forward state on the unperturbed inputs
    graph.forward(bound, output=out)
    return report
