"""Constructors, conversions, sampling, and statistics for the latent spaces.

The constructive nesting used throughout: replicating a single latent
gives the per-layer space the same image; tapping a full-depth code's
own intermediate feature gives the composed f/ space the same image.
Lifting therefore never changes what the generator renders, which is
how the capacity ordering between spaces is tested without trusting an
optimizer.
"""

from __future__ import annotations

import base64
import json
import weakref
from dataclasses import dataclass

import numpy as np

from .codes import (FEATURE_SPACES, LatentCode, SPACES, SPHERE_SPACES,
                    W_LIKE_SPACES, inverse_leaky_relu, retract, sphere_radius)
from .generator import (GeneratorBundle, GeneratorConfig, map_batch,
                        style_vector, synthesize, tap_feature)

PN_EIGENVALUE_FLOOR = 1e-6
_MEAN_W_SEED = 101
_mean_w_cache: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def sphere_sample(rng: np.random.Generator, d: int) -> np.ndarray:
    """One point uniform on the radius-sqrt(d) hypersphere."""
    return retract(rng.standard_normal(d))


def sphere_batch(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.standard_normal((n, d))
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x * (sphere_radius(d) / norms)


def sample_codes(bundle: GeneratorBundle, space: str, count: int,
                 seed: int) -> list[LatentCode]:
    """Draw seeded codes. Sphere spaces get uniform sphere points; w/s
    spaces push sphere samples through the mapping (and affines).
    Feature spaces cannot be sampled: their base codes come from targets."""
    if space not in SPACES:
        raise ValueError(f"unknown space '{space}'")
    if space in FEATURE_SPACES:
        raise ValueError(f"cannot sample '{space}': feature base codes come from "
                         f"targets, not from a prior")
    cfg = bundle.config
    rng = np.random.default_rng(seed)
    n_layers = cfg.synthesis_layers
    out = []
    for _ in range(count):
        if space == "z":
            code = LatentCode("z", cfg, (sphere_sample(rng, cfg.latent_dim),))
        elif space == "z+":
            vecs = tuple(sphere_sample(rng, cfg.latent_dim) for _ in range(n_layers))
            code = LatentCode("z+", cfg, vecs)
        elif space == "w":
            _, w = map_batch(bundle, sphere_sample(rng, cfg.latent_dim)[None, :])
            code = LatentCode("w", cfg, (w[0],))
        elif space == "w+":
            _, w = map_batch(bundle, sphere_batch(rng, n_layers, cfg.latent_dim))
            code = LatentCode("w+", cfg, tuple(w))
        else:  # s
            _, w = map_batch(bundle, sphere_sample(rng, cfg.latent_dim)[None, :])
            vecs = tuple(style_vector(bundle, i, w[0]) for i in range(n_layers))
            code = LatentCode("s", cfg, vecs)
        out.append(code)
    return out


_LIFT_EDGES = {
    ("z", "z+"), ("z+", "f/z+"),
    ("w", "w+"), ("w+", "f/w+"),
    ("w+", "s"), ("s", "f/s"),
}


def lift(bundle: GeneratorBundle, code: LatentCode, target_space: str) -> LatentCode:
    """Embed a code one step up its chain without changing its image.

    Supported hops: z->z+ and w->w+ (replication), w+->s (per-layer
    affines), and x->f/x (tapping the code's own intermediate feature).
    Anything else has no inverse mapping and raises.
    """
    if target_space not in SPACES:
        raise ValueError(f"unknown space '{target_space}'")
    if (code.space, target_space) not in _LIFT_EDGES:
        raise ValueError(f"no inverse mapping from '{code.space}' to '{target_space}'")
    cfg = code.config
    n = cfg.synthesis_layers
    if target_space in ("z+", "w+"):
        return LatentCode(target_space, cfg, (code.vectors[0],) * n)
    if target_space == "s":
        vecs = tuple(style_vector(bundle, i, code.vectors[i]) for i in range(n))
        return LatentCode("s", cfg, vecs)
    # f/ hop: tap the feature from the code's own forward pass
    f = tap_feature(bundle, code)
    detail = code.vectors[cfg.tap_index:]
    return LatentCode(target_space, cfg, detail, feature=f)


def mean_w(bundle: GeneratorBundle, n_samples: int = 10_000,
           seed: int = _MEAN_W_SEED) -> np.ndarray:
    """Empirical mean of mapped latents, the usual w-side initializer."""
    key = (n_samples, seed)
    cached = _mean_w_cache.get(bundle)
    if cached is not None and key in cached:
        return cached[key]
    rng = np.random.default_rng(seed)
    _, w = map_batch(bundle, sphere_batch(rng, n_samples, bundle.config.latent_dim))
    m = w.mean(axis=0)
    m.setflags(write=False)
    _mean_w_cache.setdefault(bundle, {})[key] = m
    return m


@dataclass(frozen=True)
class PnModel:
    """Whitened view of the mapping network's final pre-activation: the
    transform takes p - mean to approximately unit covariance, so the
    norm of the whitened residual is a Mahalanobis-style distance."""

    mean: np.ndarray
    transform: np.ndarray
    n_samples: int
    eigenvalue_floor: float

    def __post_init__(self):
        self.mean.setflags(write=False)
        self.transform.setflags(write=False)


def fit_pn(bundle: GeneratorBundle, n_samples: int = 10_000,
           seed: int = 0) -> PnModel:
    d = bundle.config.latent_dim
    if n_samples < 10 * d:
        raise ValueError(f"need at least {10 * d} samples to whiten {d} dims, "
                         f"got {n_samples}")
    rng = np.random.default_rng(seed)
    p, _ = map_batch(bundle, sphere_batch(rng, n_samples, d))
    mu = p.mean(axis=0)
    x = p - mu
    cov = (x.T @ x) / (n_samples - 1)
    lam, vec = np.linalg.eigh(cov)
    lam = np.maximum(lam, PN_EIGENVALUE_FLOOR)
    transform = (vec / np.sqrt(lam)).T  # rows scaled by 1/sqrt(lambda)
    return PnModel(np.array(mu), np.array(transform), n_samples, PN_EIGENVALUE_FLOOR)


def pn_distance(model: PnModel, p: np.ndarray) -> float:
    """Whitened distance of a pre-activation from the distribution mean."""
    p = np.asarray(p, dtype=np.float64)
    return float(np.linalg.norm(model.transform @ (p - model.mean)))


def code_pn_score(model: PnModel, code: LatentCode) -> float:
    """Summed whitened distances of a w-like code's pre-activation views."""
    if code.space not in W_LIKE_SPACES:
        raise ValueError(f"whitened-distance score is defined for w-like codes, "
                         f"not '{code.space}'")
    return sum(pn_distance(model, inverse_leaky_relu(v)) for v in code.vectors)


def sphere_score(code: LatentCode) -> float:
    """Summed off-sphere deviation of a sphere code's vectors.

    Deviations at or below the retraction working precision (1e-9
    absolute) count as exactly zero: such a vector is on the sphere for
    every purpose this score serves."""
    if code.space not in SPHERE_SPACES:
        raise ValueError(f"sphere score is defined for sphere codes, not '{code.space}'")
    r = sphere_radius(code.config.latent_dim)
    total = 0.0
    for v in code.vectors:
        dev = abs(float(np.linalg.norm(v)) - r)
        if dev > 1e-9:
            total += dev
    return total


# ---------------------------------------------------------------------------
# JSON serialization: space tag, config, base64 little-endian float32 payloads.
# ---------------------------------------------------------------------------

def _b64(arr: np.ndarray) -> str:
    return base64.b64encode(np.asarray(arr, dtype="<f4").tobytes()).decode("ascii")


def _unb64(s: str, shape) -> np.ndarray:
    arr = np.frombuffer(base64.b64decode(s.encode("ascii")), dtype="<f4")
    return arr.astype(np.float64).reshape(shape)


def code_to_dict(code: LatentCode) -> dict:
    return {
        "space": code.space,
        "config": code.config.to_dict(),
        "vectors": [_b64(v) for v in code.vectors],
        "vector_shapes": [list(v.shape) for v in code.vectors],
        "feature": None if code.feature is None else _b64(code.feature),
        "feature_shape": None if code.feature is None else list(code.feature.shape),
    }


def code_from_dict(d: dict) -> LatentCode:
    cfg = GeneratorConfig.from_dict(d["config"])
    vectors = tuple(_unb64(s, shape)
                    for s, shape in zip(d["vectors"], d["vector_shapes"]))
    feature = None
    if d.get("feature") is not None:
        feature = _unb64(d["feature"], d["feature_shape"])
    return LatentCode(d["space"], cfg, vectors, feature)


def save_codes(path: str, codes: list[LatentCode]) -> None:
    with open(path, "w") as fh:
        json.dump({"codes": [code_to_dict(c) for c in codes]}, fh, sort_keys=True)
        fh.write("\n")


def load_codes(path: str) -> list[LatentCode]:
    with open(path) as fh:
        blob = json.load(fh)
    return [code_from_dict(d) for d in blob["codes"]]
