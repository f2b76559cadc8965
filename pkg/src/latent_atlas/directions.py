"""Semantic editing directions and their application to latent codes.

Principal components of sampled w vectors give GANSpace-style controls;
unit normals of logistic attribute boundaries give InterfaceGAN-style
controls (fit natively in z for sphere codes, in w otherwise); seeded
random unit vectors serve as baselines.  Edits move per-layer vectors
along a direction and retract sphere-constrained codes, so an edited
z-type code is always a legal point of its space, at any intensity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .codes import LatentCode, SPHERE_SPACES, W_LIKE_SPACES, retract
from .generator import GeneratorBundle, synthesize
from .spaces import (PnModel, code_pn_score, sample_codes, sphere_batch,
                     sphere_score)

_W_EDITABLE = frozenset({"w", "w+", "f/w+", "s", "f/s"})
_Z_EDITABLE = frozenset({"z", "z+", "f/z+"})


@dataclass(frozen=True)
class Direction:
    """A unit vector in z or w with provenance metadata."""

    space: str  # "z" | "w"
    vector: np.ndarray
    source: str  # "pca" | "boundary" | "random"
    layer_range: tuple | None = None  # absolute 0-based (lo, hi) inclusive
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.space not in ("z", "w"):
            raise ValueError(f"directions live in 'z' or 'w', got '{self.space}'")
        if self.source not in ("pca", "boundary", "random"):
            raise ValueError(f"unknown direction source '{self.source}'")
        v = np.array(self.vector, dtype=np.float64)
        n = float(np.linalg.norm(v))
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"direction must be unit length, norm is {n!r}")
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)


def pca_directions(bundle: GeneratorBundle, n_samples: int, k: int,
                   seed: int) -> list[Direction]:
    """Top-k principal components of sampled w vectors, orthonormal and
    sorted by explained variance. Signs are canonicalized so the largest
    component of each axis is positive."""
    d = bundle.config.latent_dim
    if n_samples < 10 * d:
        raise ValueError(f"need at least {10 * d} samples for {d} dims, "
                         f"got {n_samples}")
    if k > d:
        raise ValueError(f"cannot extract {k} components from {d} dims")
    from .generator import map_batch
    rng = np.random.default_rng(seed)
    _, w = map_batch(bundle, sphere_batch(rng, n_samples, d))
    centered = w - w.mean(axis=0)
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    out = []
    for i in range(k):
        comp = vt[i]
        if comp[np.argmax(np.abs(comp))] < 0:
            comp = -comp
        out.append(Direction("w", comp, "pca", metadata={
            "rank": i,
            "explained_variance": float(svals[i] ** 2 / (n_samples - 1)),
        }))
    return out


def total_w_variance(bundle: GeneratorBundle, n_samples: int, seed: int) -> float:
    """Sum of per-coordinate w variances on the same sampling scheme."""
    from .generator import map_batch
    rng = np.random.default_rng(seed)
    _, w = map_batch(bundle, sphere_batch(rng, n_samples, bundle.config.latent_dim))
    return float(((w - w.mean(axis=0)) ** 2).sum() / (n_samples - 1))


def random_direction(space: str, dim: int, seed: int) -> Direction:
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim)
    return Direction(space, v / np.linalg.norm(v), "random", metadata={"seed": seed})


# ---------------------------------------------------------------------------
# Attribute boundaries
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AttributeOracle:
    """Deterministic labeling function image -> +1/-1, a stand-in for a
    human attribute annotation. Depends only on pixel content."""

    name: str
    fn: object

    def label(self, image: np.ndarray) -> int:
        v = int(self.fn(np.asarray(image, dtype=np.float64)))
        if v not in (-1, 1):
            raise ValueError(f"oracle '{self.name}' returned {v}, expected +1/-1")
        return v


def _sign(x: float) -> int:
    return 1 if x >= 0 else -1


def builtin_oracle(name: str) -> AttributeOracle:
    if name == "left_right":
        return AttributeOracle("left_right", lambda im: _sign(
            float(im[:, :, : im.shape[2] // 2].mean() - im[:, :, im.shape[2] // 2:].mean())))
    if name == "center_border":
        def center_border(im):
            h, w = im.shape[1], im.shape[2]
            core = im[:, h // 4: 3 * h // 4, w // 4: 3 * w // 4]
            return _sign(float(core.mean() - im.mean()))
        return AttributeOracle("center_border", center_border)
    if name == "red_green":
        return AttributeOracle("red_green",
                               lambda im: _sign(float(im[0].mean() - im[1].mean())))
    raise ValueError(f"unknown oracle '{name}' "
                     f"(available: left_right, center_border, red_green)")


def fit_boundary(points: np.ndarray, labels: np.ndarray, *, seed: int = 0,
                 max_iter: int = 500, learning_rate: float = 0.1):
    """Logistic-regression separating hyperplane on (point, label) pairs.

    Returns (unit normal, held-out accuracy on a seeded 80/20 split,
    converged flag).  Non-convergence within the iteration budget is
    reported, not raised."""
    x = np.asarray(points, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ValueError(f"expected (n, d) points and (n,) labels, got "
                         f"{x.shape} and {y.shape}")
    n = x.shape[0]
    frac = min(np.mean(y > 0), np.mean(y < 0))
    if frac < 0.1:
        raise ValueError(f"degenerate attribute: minority class fraction "
                         f"{frac:.3f} < 0.1")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    cut = max(1, int(round(0.8 * n)))
    tr, te = perm[:cut], perm[cut:]
    xt, yt = x[tr], y[tr]
    w = np.zeros(x.shape[1])
    b = 0.0
    m_w = np.zeros_like(w); v_w = np.zeros_like(w)
    m_b = v_b = 0.0
    converged = False
    for t in range(1, max_iter + 1):
        margin = yt * (xt @ w + b)
        sig = 1.0 / (1.0 + np.exp(margin))  # d/dmargin of log(1+exp(-margin))
        gw = -(xt.T @ (yt * sig)) / len(yt)
        gb = -float(np.mean(yt * sig))
        if max(float(np.max(np.abs(gw))), abs(gb)) < 1e-6:
            converged = True
            break
        c1 = 1.0 - 0.9 ** t
        c2 = 1.0 - 0.999 ** t
        m_w = 0.9 * m_w + 0.1 * gw; v_w = 0.999 * v_w + 0.001 * gw * gw
        m_b = 0.9 * m_b + 0.1 * gb; v_b = 0.999 * v_b + 0.001 * gb * gb
        w = w - learning_rate * (m_w / c1) / (np.sqrt(v_w / c2) + 1e-8)
        b = b - learning_rate * (m_b / c1) / (math.sqrt(v_b / c2) + 1e-8)
    norm = float(np.linalg.norm(w))
    if norm == 0.0:
        raise ValueError("boundary fit collapsed to a zero normal")
    pred = np.where(x[te] @ w + b >= 0, 1.0, -1.0)
    accuracy = float(np.mean(pred == y[te])) if len(te) else float("nan")
    return w / norm, accuracy, converged


def boundary_direction(bundle: GeneratorBundle, space: str,
                       oracle: AttributeOracle, n_samples: int,
                       seed: int) -> Direction:
    """InterfaceGAN-style direction: label generated images with the
    oracle, fit a linear boundary on the codes, take its unit normal."""
    if space not in ("z", "w"):
        raise ValueError(f"boundaries are fit in 'z' or 'w', got '{space}'")
    codes = sample_codes(bundle, space, n_samples, seed)
    points = np.stack([c.vectors[0] for c in codes])
    labels = np.array([oracle.label(synthesize(bundle, c)) for c in codes],
                      dtype=np.float64)
    normal, accuracy, converged = fit_boundary(points, labels, seed=seed)
    return Direction(space, normal, "boundary", metadata={
        "oracle": oracle.name, "accuracy": accuracy,
        "converged": bool(converged), "n_samples": n_samples,
    })


# ---------------------------------------------------------------------------
# Applying edits
# ---------------------------------------------------------------------------

def _target_layers(code: LatentCode, direction: Direction, layers) -> list:
    cfg = code.config
    if layers is None:
        layers = direction.layer_range
    if layers is None:
        layers = (cfg.split_layer - 1, cfg.synthesis_layers - 1)
    lo, hi = int(layers[0]), int(layers[1])
    return [i for i in code.detail_layers() if lo <= i <= hi]


def apply_edit(code: LatentCode, direction: Direction, alpha: float,
               layers=None, bundle: GeneratorBundle | None = None) -> LatentCode:
    """Move a code along a direction with the given intensity.

    z directions edit sphere codes (with retraction after the move); w
    directions edit w codes directly and style codes through the linear
    part of the per-layer affines.  ``layers`` is an inclusive 0-based
    (lo, hi) range; it defaults to the direction's own range, then to
    the detail layers.  Single-vector codes always edit their vector.
    """
    space = code.space
    if direction.space == "z":
        if space not in _Z_EDITABLE:
            raise ValueError(f"incompatible spaces: a z direction cannot edit "
                             f"a '{space}' code")
    else:
        if space not in _W_EDITABLE:
            raise ValueError(f"incompatible spaces: a w direction cannot edit "
                             f"a '{space}' code")
    if alpha == 0.0:
        return code
    s_type = space in ("s", "f/s")
    if s_type and bundle is None:
        raise ValueError("editing style codes needs the generator bundle "
                         "(the affines carry the direction into style space)")
    targeted = set(_target_layers(code, direction, layers))
    sphere = space in SPHERE_SPACES
    single = space in ("z", "w")
    step = alpha * direction.vector
    new_vectors = []
    for i, v in zip(code.detail_layers(), code.vectors):
        if not single and i not in targeted:
            new_vectors.append(v)
            continue
        if s_type:
            ws = bundle.weights[f"affine.Ws{i}"] @ step
            wb = bundle.weights[f"affine.Wb{i}"] @ step
            moved = v + np.concatenate([ws, wb])
        else:
            moved = v + step
        new_vectors.append(retract(moved) if sphere else moved)
    return code.replace_vectors(new_vectors)


@dataclass
class SweepPoint:
    alpha: float
    image: np.ndarray
    in_distribution_score: float | None
    code: LatentCode


def edit_sweep(bundle: GeneratorBundle, code: LatentCode, direction: Direction,
               alphas, *, layers=None,
               pn_model: PnModel | None = None) -> list[SweepPoint]:
    """Apply each intensity to the original code (one retraction per
    point), render, and score how far the edited code sits from its
    space: summed off-sphere deviation for sphere codes (identically
    zero by construction), summed whitened distance for w-like codes,
    undefined for style codes."""
    points = []
    for alpha in alphas:
        edited = apply_edit(code, direction, float(alpha), layers=layers,
                            bundle=bundle)
        image = synthesize(bundle, edited)
        if edited.space in SPHERE_SPACES:
            score = sphere_score(edited)
        elif edited.space in W_LIKE_SPACES:
            if pn_model is None:
                raise ValueError("scoring w-like codes needs a fitted PnModel")
            score = code_pn_score(pn_model, edited)
        else:
            score = None
        points.append(SweepPoint(float(alpha), image, score, edited))
    return points


def default_alpha_grid(lo: float = -2.0, hi: float = 2.0, count: int = 11) -> np.ndarray:
    return np.linspace(lo, hi, count)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def direction_to_dict(d: Direction) -> dict:
    from .spaces import _b64
    return {"space": d.space, "vector": _b64(d.vector),
            "dim": int(d.vector.size), "source": d.source,
            "layer_range": None if d.layer_range is None else list(d.layer_range),
            "metadata": d.metadata}


def direction_from_dict(blob: dict) -> Direction:
    from .spaces import _unb64
    v = _unb64(blob["vector"], (blob["dim"],))
    v = v / np.linalg.norm(v)  # re-unitize after the 32-bit payload round trip
    rng = blob.get("layer_range")
    return Direction(blob["space"], v, blob["source"],
                     None if rng is None else tuple(rng), dict(blob["metadata"]))


def save_directions(path: str, dirs: list[Direction]) -> None:
    import json
    with open(path, "w") as fh:
        json.dump({"directions": [direction_to_dict(d) for d in dirs]},
                  fh, sort_keys=True)
        fh.write("\n")


def load_directions(path: str) -> list[Direction]:
    import json
    with open(path) as fh:
        blob = json.load(fh)
    return [direction_from_dict(d) for d in blob["directions"]]
