"""Latent code containers and the hypersphere retraction.

Nine addressable spaces:

======  =====================================================================
z       one input latent on the radius-sqrt(d) hypersphere
z+      one sphere latent per synthesis layer
w       one mapped latent shared by every layer
w+      one mapped latent per layer (optionally P_N-regularized during
        inversion, which is the ninth space in the comparison set)
s       per-layer style parameters (affine images of w), unbounded
f/w+    intermediate feature map plus per-layer w detail codes
f/s     intermediate feature map plus per-layer style detail codes
f/z+    intermediate feature map plus sphere-retracted detail codes
======  =====================================================================
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SPACES = ("z", "z+", "w", "w+", "s", "f/w+", "f/s", "f/z+")

# Spaces whose vectors live on the radius-sqrt(d) hypersphere.
SPHERE_SPACES = frozenset({"z", "z+", "f/z+"})
# Spaces carrying an intermediate feature map alongside detail codes.
FEATURE_SPACES = frozenset({"f/w+", "f/s", "f/z+"})
# Spaces whose vectors are (images of) mapped latents, admitting a
# pre-activation view for the whitened-distance regularizer.
W_LIKE_SPACES = frozenset({"w", "w+", "f/w+"})

# Operations that put vectors on the sphere guarantee 1e-9 relative norm
# accuracy; construction accepts a looser 1e-6 so codes reloaded from
# 32-bit serialized payloads still validate.
SPHERE_OP_TOL = 1e-9
SPHERE_CONSTRUCT_TOL = 1e-6


def sphere_radius(d: int) -> float:
    return math.sqrt(d)


def retract(v: np.ndarray) -> np.ndarray:
    """Pull a vector back onto the hypersphere of radius sqrt(len(v)).

    Scale-invariant and idempotent; vectors already on the sphere within
    1e-12 relative are returned unchanged, which makes repeated
    retraction an exact no-op.  The origin has no preferred direction.
    """
    v = np.asarray(v, dtype=np.float64)
    r = sphere_radius(v.size)
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise ValueError("retraction undefined at origin")
    if abs(n - r) <= 1e-12 * r:
        return v.copy()
    return (r / n) * v


def inverse_leaky_relu(w: np.ndarray, slope: float = 0.2) -> np.ndarray:
    """Recover the pre-activation of a leaky ReLU (exact for slope > 0)."""
    return np.where(w >= 0.0, w, w / slope)


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class LatentCode:
    """Tagged latent code: a space name, its vectors, optionally a feature map.

    ``vectors`` holds the single latent for z/w, one vector per layer for
    the layered spaces, and the detail-layer vectors for the f/ variants;
    ``feature`` is the intermediate (C, res, res) map for f/ variants.
    Style vectors for s-type spaces store scale and bias halves
    concatenated.  Instances are immutable; edits produce new codes.
    """

    space: str
    config: "GeneratorConfig"  # noqa: F821  (structural; avoids an import cycle)
    vectors: tuple
    feature: np.ndarray | None = None

    def __post_init__(self):
        if self.space not in SPACES:
            raise ValueError(f"unknown space '{self.space}' (expected one of {SPACES})")
        object.__setattr__(self, "vectors", tuple(_freeze(v) for v in self.vectors))
        if self.feature is not None:
            object.__setattr__(self, "feature", _freeze(self.feature))
        cfg = self.config
        n_detail = cfg.synthesis_layers - cfg.split_layer + 1
        expected = {
            "z": 1, "w": 1,
            "z+": cfg.synthesis_layers, "w+": cfg.synthesis_layers,
            "s": cfg.synthesis_layers,
            "f/w+": n_detail, "f/s": n_detail, "f/z+": n_detail,
        }[self.space]
        if len(self.vectors) != expected:
            raise ValueError(f"space '{self.space}' needs {expected} vectors, "
                             f"got {len(self.vectors)}")
        if (self.feature is not None) != (self.space in FEATURE_SPACES):
            raise ValueError(f"space '{self.space}' and feature presence disagree")
        if self.space in SPHERE_SPACES:
            r = sphere_radius(cfg.latent_dim)
            for i, v in enumerate(self.vectors):
                n = float(np.linalg.norm(v))
                if abs(n - r) > SPHERE_CONSTRUCT_TOL * r:
                    raise ValueError(
                        f"vector {i} of a '{self.space}' code is off the sphere: "
                        f"norm {n!r}, expected {r!r}")

    @property
    def on_sphere(self) -> bool:
        return self.space in SPHERE_SPACES

    def detail_layers(self) -> range:
        """Absolute 0-based synthesis-layer indices the vectors feed."""
        cfg = self.config
        if self.space in FEATURE_SPACES:
            return range(cfg.split_layer - 1, cfg.synthesis_layers)
        if self.space in ("z", "w"):
            return range(0, 1)
        return range(0, cfg.synthesis_layers)

    def replace_vectors(self, vectors) -> "LatentCode":
        return LatentCode(self.space, self.config, tuple(vectors), self.feature)

    def max_sphere_deviation(self) -> float:
        """Largest |norm - sqrt(d)| over the code's vectors (0 for non-sphere)."""
        if not self.on_sphere:
            return 0.0
        r = sphere_radius(self.config.latent_dim)
        return max(abs(float(np.linalg.norm(v)) - r) for v in self.vectors)
