"""Optimization-based inversion with per-step hypersphere retraction.

The loss is lambda_pix * pixel MSE + lambda_perc * perceptual distance
+ lambda_reg * summed squared whitened pre-activation distances.  Every
adaptive-moment (or plain gradient) step is followed by retraction of
every sphere-constrained vector, which is the whole point: the code
never leaves its space, no matter how aggressively it is optimized.

Pivotal tuning fine-tunes a private copy of the synthesis weights around
a frozen inverted code, with a locality term that anchors the generator
on fresh latents so the fix stays local to the pivot.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, LEAKY_SLOPE
from .codes import LatentCode, SPACES, SPHERE_SPACES, W_LIKE_SPACES, retract, sphere_radius
from .generator import (GeneratorBundle, _mapping_nodes, _space_branch,
                        _weight_nodes, bindings_to_code, build_forward,
                        code_bindings, synthesize, tap_feature, weight_specs)
from .metrics import FeatureExtractor, DEFAULT_EXTRACTOR_SEED
from .spaces import PnModel, fit_pn, lift, mean_w, sample_codes, sphere_sample

DEFAULT_PN_WEIGHT = 1e-3


class InversionError(RuntimeError):
    """Numerical failure during optimization (non-finite loss)."""


@dataclass(frozen=True)
class InversionConfig:
    space: str
    steps: int = 500
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lambda_pix: float = 1.0
    lambda_perc: float = 1.0
    lambda_reg: float = 0.0
    optimizer: str = "adam"  # "adam" | "sgd"
    init_policy: str = "default"
    seed: int = 0

    def __post_init__(self):
        if self.space not in SPACES:
            raise ValueError(f"unknown space '{self.space}'")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        for name in ("lambda_pix", "lambda_perc", "lambda_reg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer '{self.optimizer}'")
        if self.lambda_reg > 0 and self.space not in W_LIKE_SPACES:
            raise ValueError(f"whitened regularizer applies to w-like spaces, "
                             f"not '{self.space}'")


def make_inversion_config(space: str, use_pn: bool = False,
                          **overrides) -> InversionConfig:
    """Defaults per space: sphere spaces carry no regularizer; w-like
    spaces get the whitened-distance term only when asked for."""
    reg = DEFAULT_PN_WEIGHT if (use_pn and space in W_LIKE_SPACES) else 0.0
    overrides.setdefault("lambda_reg", reg)
    return InversionConfig(space=space, **overrides)


@dataclass
class InversionResult:
    code: LatentCode
    trajectory: np.ndarray  # (steps, 4): total, pix, perc, reg per step
    final_image: np.ndarray
    final_losses: tuple  # (total, pix, perc, reg) at the returned code
    wall_time: float
    config: InversionConfig

    @property
    def final_loss(self) -> float:
        return self.final_losses[0]


@dataclass(frozen=True)
class PtiConfig:
    steps: int = 200
    learning_rate: float = 1e-3
    lambda_locality: float = 0.1
    locality_count: int = 8

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.lambda_locality < 0:
            raise ValueError("lambda_locality must be >= 0")
        if self.locality_count < 1:
            raise ValueError("locality_count must be >= 1")


@dataclass
class PtiReport:
    pre_reconstruction: float
    post_reconstruction: float
    pre_drift: float
    post_drift: float
    best_step: int
    steps: int


class _Adam:
    def __init__(self, shapes: dict, lr, beta1, beta2, eps):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}
        self.t = 0

    def step(self, values: dict, grads: dict):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            values[k] = values[k] - self.lr * (self.m[k] / c1) / (
                np.sqrt(self.v[k] / c2) + self.eps)


class _Sgd:
    def __init__(self, lr):
        self.lr = lr

    def step(self, values: dict, grads: dict):
        for k, g in grads.items():
            values[k] = values[k] - self.lr * g


def _make_optimizer(cfg, shapes):
    if cfg.optimizer == "sgd":
        return _Sgd(cfg.learning_rate)
    return _Adam(shapes, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)


@dataclass
class _LossGraph:
    graph: Graph
    total: object
    pix: object
    perc: object
    reg: object
    image: object
    slots: list


def _attach_loss(g: Graph, image, w_slots, target, *, lambda_pix, lambda_perc,
                 lambda_reg, extractor, pn_model):
    """Add pixel, perceptual, and whitened-regularizer terms on an image
    node; returns (total, pix, perc, reg) nodes (absent terms are None)."""
    terms = []
    pix = perc = reg = None
    if lambda_pix > 0:
        pix = g.mse(image, g.constant(target, name="target"))
        terms.append(g.mul(g.constant(lambda_pix), pix))
    if lambda_perc > 0:
        stages = extractor.build_stage_nodes(g, image)
        ref = extractor.stage_features(target)
        acc = None
        for node, ref_vec in zip(stages, ref):
            term = g.mse(node, g.constant(ref_vec))
            acc = term if acc is None else g.add(acc, term)
        perc = g.mul(g.constant(1.0 / len(stages)), acc)
        terms.append(g.mul(g.constant(lambda_perc), perc))
    if lambda_reg > 0 and w_slots:
        acc = None
        neg_mu = g.constant(-pn_model.mean)
        lam = g.constant(pn_model.transform)
        for w_node in w_slots:
            p = g.leaky_relu(w_node, slope=1.0 / LEAKY_SLOPE)
            dist = g.l2norm(g.matmul(lam, g.add(p, neg_mu)))
            sq = g.mul(dist, dist)
            acc = sq if acc is None else g.add(acc, sq)
        reg = acc
        terms.append(g.mul(g.constant(lambda_reg), reg))
    if not terms:
        raise ValueError("loss has no active terms; enable at least one weight")
    total = terms[0]
    for t in terms[1:]:
        total = g.add(total, t)
    return total, pix, perc, reg


def build_loss_graph(bundle: GeneratorBundle, space: str, target: np.ndarray,
                     *, lambda_pix=1.0, lambda_perc=1.0, lambda_reg=0.0,
                     extractor=None, pn_model=None) -> _LossGraph:
    fg = build_forward(bundle, space, trainable_code=True)
    total, pix, perc, reg = _attach_loss(
        fg.graph, fg.image, fg.w_slots, target,
        lambda_pix=lambda_pix, lambda_perc=lambda_perc, lambda_reg=lambda_reg,
        extractor=extractor, pn_model=pn_model)
    return _LossGraph(fg.graph, total, pix, perc, reg, fg.image, fg.code_slots)


def init_code(bundle: GeneratorBundle, space: str, seed: int = 0,
              policy: str = "default") -> LatentCode:
    """Starting code per space: uniform sphere points for sphere spaces,
    the empirical mean w for w-like spaces, its affine images for style
    spaces, and for the f/ spaces the parent-space init lifted through
    its own tapped feature."""
    if policy != "default":
        raise ValueError(f"unknown init policy '{policy}'")
    cfg = bundle.config
    rng = np.random.default_rng(seed)
    n = cfg.synthesis_layers
    if space == "z":
        return LatentCode("z", cfg, (sphere_sample(rng, cfg.latent_dim),))
    if space == "z+":
        return LatentCode("z+", cfg, tuple(sphere_sample(rng, cfg.latent_dim)
                                           for _ in range(n)))
    if space == "f/z+":
        return lift(bundle, init_code(bundle, "z+", seed), "f/z+")
    m = mean_w(bundle)
    if space == "w":
        return LatentCode("w", cfg, (m,))
    if space == "w+":
        return LatentCode("w+", cfg, (m,) * n)
    if space == "f/w+":
        return lift(bundle, init_code(bundle, "w+", seed), "f/w+")
    if space == "s":
        return lift(bundle, init_code(bundle, "w+", seed), "s")
    if space == "f/s":
        return lift(bundle, init_code(bundle, "s", seed), "f/s")
    raise ValueError(f"unknown space '{space}'")


def _sphere_slots(space: str, slots: list) -> list:
    if space not in SPHERE_SPACES:
        return []
    return [s for s in slots if s == "z" or (s.startswith("z") and s[1:].isdigit())]


def invert(bundle: GeneratorBundle, target: np.ndarray, cfg: InversionConfig,
           *, init: LatentCode | None = None, extractor: FeatureExtractor | None = None,
           pn_model: PnModel | None = None,
           assert_on_sphere: bool = False) -> InversionResult:
    """Minimize the reconstruction loss over one latent space.

    Each step is: gradient step on the loss, then retraction of every
    sphere-constrained vector.  With ``assert_on_sphere`` the loop
    additionally verifies the 1e-9 relative norm invariant after every
    step (test instrumentation)."""
    gcfg = bundle.config
    target = np.asarray(target, dtype=np.float64)
    want = (3, gcfg.output_resolution, gcfg.output_resolution)
    if target.shape != want:
        raise ValueError(f"target shape {target.shape} != generator output {want}")
    if cfg.lambda_perc > 0 and extractor is None:
        extractor = FeatureExtractor.create(seed=DEFAULT_EXTRACTOR_SEED)
    if cfg.lambda_reg > 0 and pn_model is None:
        pn_model = fit_pn(bundle, seed=0)
    code = init if init is not None else init_code(bundle, cfg.space, seed=cfg.seed)
    if code.space != cfg.space:
        raise ValueError(f"init code space '{code.space}' != config space '{cfg.space}'")

    lg = build_loss_graph(bundle, cfg.space, target,
                          lambda_pix=cfg.lambda_pix, lambda_perc=cfg.lambda_perc,
                          lambda_reg=cfg.lambda_reg, extractor=extractor,
                          pn_model=pn_model)
    g = lg.graph
    vals = {k: np.array(v) for k, v in code_bindings(code).items()}
    opt = _make_optimizer(cfg, {k: v.shape for k, v in vals.items()})
    sphere = _sphere_slots(cfg.space, lg.slots)
    radius = sphere_radius(gcfg.latent_dim)

    def components():
        return (0.0 if lg.pix is None else float(g.value(lg.pix)),
                0.0 if lg.perc is None else float(g.value(lg.perc)),
                0.0 if lg.reg is None else float(g.value(lg.reg)))

    t0 = time.perf_counter()
    trajectory = np.empty((cfg.steps, 4))
    for k in range(cfg.steps):
        total = float(g.forward(vals, output=lg.total))
        if not math.isfinite(total):
            raise InversionError(f"non-finite loss at step {k}")
        trajectory[k] = (total, *components())
        grads = g.backward()
        opt.step(vals, grads)
        for name in sphere:
            vals[name] = retract(vals[name])
        if assert_on_sphere:
            for name in sphere:
                n = float(np.linalg.norm(vals[name]))
                if abs(n - radius) > 1e-9 * radius:
                    raise AssertionError(f"step {k}: '{name}' off sphere "
                                         f"(norm {n!r} vs {radius!r})")
    final_total = float(g.forward(vals, output=lg.total))
    final = bindings_to_code(cfg.space, gcfg, vals)
    wall = time.perf_counter() - t0
    return InversionResult(final, trajectory, synthesize(bundle, final),
                           (final_total, *components()), wall, cfg)


# ---------------------------------------------------------------------------
# Pivotal tuning
# ---------------------------------------------------------------------------

def _tunable_weight_names(bundle: GeneratorBundle) -> list:
    """Synthesis-side weights: everything except the mapping stack, which
    stays frozen so the latent prior the pivot lives in is unchanged."""
    return [name for name, _, _ in weight_specs(bundle.config)
            if not name.startswith("mapping.")]


def pivotal_tune(bundle: GeneratorBundle, pivot: InversionResult,
                 target: np.ndarray, cfg: PtiConfig, *,
                 extractor: FeatureExtractor | None = None,
                 seed: int = 0) -> tuple[GeneratorBundle, PtiReport]:
    """Fine-tune a private copy of the generator around a frozen pivot code.

    Objective: reconstruction loss (pixel MSE + perceptual) at the pivot
    plus lambda_locality times the mean drift MSE between tuned and
    original outputs on fresh sphere latents.  Returns the weights from
    the best objective step, so the reported reconstruction loss never
    exceeds the pre-tuning value.
    """
    gcfg = bundle.config
    target = np.asarray(target, dtype=np.float64)
    if extractor is None:
        extractor = FeatureExtractor.create(seed=DEFAULT_EXTRACTOR_SEED)
    code = pivot.code
    if code.config != gcfg:
        raise ValueError("pivot code was built for a different generator config")

    tunable = _tunable_weight_names(bundle)
    g = Graph()
    W = _weight_nodes(g, bundle, tunable)
    pivot_vals = code_bindings(code)
    image, _, w_slots = _space_branch(
        g, W, gcfg, code.space,
        lambda name, shape: g.constant(pivot_vals[name], name=name))
    recon, _, _, _ = _attach_loss(g, image, [], target, lambda_pix=1.0,
                                  lambda_perc=1.0, lambda_reg=0.0,
                                  extractor=extractor, pn_model=None)

    rng = np.random.default_rng(seed)
    locality = [sphere_sample(rng, gcfg.latent_dim)
                for _ in range(cfg.locality_count)]
    drift_terms = []
    for r, z in enumerate(locality):
        ref = synthesize(bundle, LatentCode("z", gcfg, (z,)))
        img_r, _, _ = _space_branch(
            g, W, gcfg, "z",
            lambda name, shape, z=z, r=r: g.constant(z, name=f"loc{r}"))
        drift_terms.append(g.mse(img_r, g.constant(ref)))
    acc = drift_terms[0]
    for t in drift_terms[1:]:
        acc = g.add(acc, t)
    drift = g.mul(g.constant(1.0 / len(drift_terms)), acc)
    total = g.add(recon, g.mul(g.constant(cfg.lambda_locality), drift))

    vals = {name: np.array(bundle.weights[name]) for name in tunable}
    opt = _Adam({k: v.shape for k, v in vals.items()}, cfg.learning_rate,
                0.9, 0.999, 1e-8)
    best = {k: v.copy() for k, v in vals.items()}
    best_obj = math.inf
    best_recon = best_drift = None
    best_step = 0
    pre_recon = pre_drift = None
    for k in range(cfg.steps + 1):  # one extra evaluation at the final weights
        obj = float(g.forward(vals, output=total))
        if not math.isfinite(obj):
            raise InversionError(f"non-finite tuning loss at step {k}")
        rec = float(g.value(recon))
        dri = float(g.value(drift))
        if k == 0:
            pre_recon, pre_drift = rec, dri
        if obj < best_obj:
            best_obj, best_recon, best_drift, best_step = obj, rec, dri, k
            best = {key: v.copy() for key, v in vals.items()}
        if k == cfg.steps:
            break
        grads = g.backward()
        opt.step(vals, grads)

    tuned_weights = {name: np.array(arr) for name, arr in bundle.weights.items()}
    tuned_weights.update(best)
    tuned = GeneratorBundle(gcfg, tuned_weights)
    report = PtiReport(pre_recon, best_recon, pre_drift, best_drift,
                       best_step, cfg.steps)
    return tuned, report
