"""Finite-difference oracle for validating every hand-written backward pass.

The oracle never calls the backward code under test: it only perturbs inputs
and re-runs the forward. Relative error per parameter group is
|a - n| / max(|a|, |n|, 1e-8) with the denominator taken over the whole
group: central differences carry an irreducible eps*|f|/2h roundoff floor
(~1e-10 at h=1e-5), so normalizing each coordinate by its own magnitude
would flag any generically tiny gradient coordinate no matter how correct
the backward is. Instances are seeded and re-drawn whenever a sampled point
lands within 1e-3 of an interpolation lattice plane, where the
point-gradient is discontinuous.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import blocks, dense_attention, stdeform_attention
from .config import ModelConfig
from .errors import ContractError, NumericError, ParameterError
from .interp import Point3, sample, sample_backward
from .stdeform_attention import grad_cells_to_dense
from .tensor_core import ClipFeatureMap, Tensor, make_rng, split_seed

REL_FLOOR = 1e-8
LATTICE_MARGIN = 1e-3


@dataclass
class GradReport:
    """Finite-difference comparison for one parameter group."""

    group: str
    max_rel_err: float
    max_abs_err: float
    worst_index: int
    tolerance: float
    passed: bool

    def as_dict(self) -> dict:
        return {
            "group": self.group,
            "max_rel_err": self.max_rel_err,
            "max_abs_err": self.max_abs_err,
            "worst_index": self.worst_index,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


def central_diff(f: Callable[[Tensor], float], theta: Tensor, h: float) -> Tensor:
    """Central-difference gradient: g[i] = (f(theta+h e_i) - f(theta-h e_i)) / 2h."""
    if h <= 0:
        raise ParameterError(f"step size must be positive, got {h}")
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.empty_like(theta)
    work = theta.copy()
    for idx in np.ndindex(theta.shape):
        orig = work[idx]
        work[idx] = orig + h
        f_plus = f(work)
        work[idx] = orig - h
        f_minus = f(work)
        work[idx] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NumericError(f"non-finite evaluation while perturbing coordinate {idx}")
        grad[idx] = (f_plus - f_minus) / (2.0 * h)
    return grad


@dataclass
class CheckInstance:
    """A differentiable scenario: live parameter groups plus forward/backward.

    `forward` reads the current contents of the group arrays and returns a
    scalar; `analytic` returns the hand-written gradient per group.
    """

    name: str
    groups: dict[str, Tensor]
    forward: Callable[[], float]
    analytic: Callable[[], dict[str, Tensor]]


def check(instance: CheckInstance, tolerance: float = 1e-5, h: float = 1e-5) -> list[GradReport]:
    """Compare the instance's analytic gradients against central differences."""
    f0 = instance.forward()
    if instance.forward() != f0:
        raise ContractError(f"{instance.name}: forward is not deterministic")
    analytic = instance.analytic()

    reports = []
    for name, theta in instance.groups.items():
        def f(arr, _theta=theta):
            saved = _theta.copy()
            _theta[...] = arr
            try:
                return float(instance.forward())
            finally:
                _theta[...] = saved

        numeric = central_diff(f, theta, h)
        ana = np.asarray(analytic[name], dtype=np.float64)
        if ana.shape != numeric.shape:
            raise ContractError(
                f"{instance.name}/{name}: analytic shape {ana.shape} != group shape {numeric.shape}"
            )
        abs_err = np.abs(ana - numeric)
        denom = max(float(np.max(np.abs(ana))), float(np.max(np.abs(numeric))), REL_FLOOR)
        rel_err = abs_err / denom
        worst = int(np.argmax(rel_err))
        max_rel = float(rel_err.flat[worst])
        reports.append(GradReport(
            group=f"{instance.name}/{name}",
            max_rel_err=max_rel,
            max_abs_err=float(np.max(abs_err)),
            worst_index=worst,
            tolerance=tolerance,
            passed=max_rel <= tolerance,
        ))
    return reports


# ---------------------------------------------------------------------------
# Shipped instances, one factory per module with a hand-written backward


def _clear_of_lattice(points: list[Point3], margin: float = LATTICE_MARGIN) -> bool:
    for p in points:
        for coord in (p.x, p.y, p.t):
            frac = coord - math.floor(coord)
            if frac < margin or frac > 1.0 - margin:
                return False
    return True


def _retry_seeds(seed, attempts: int = 64):
    return split_seed(seed, attempts)


def make_interp_instance(seed) -> CheckInstance:
    """Trilinear sampling on a random 2x2x2x3 grid at an interior point."""
    for s in _retry_seeds(seed):
        seeds = split_seed(s, 3)
        values = make_rng(seeds[0]).normal(size=(2, 2, 2, 3))
        p = Point3(*(make_rng(seeds[1]).uniform(0.05, 0.95, size=3)))
        if _clear_of_lattice([p]):
            break
    else:
        raise ContractError("could not draw an interp instance clear of lattice planes")
    upstream = make_rng(seeds[2]).normal(size=3)
    groups = {"grid": values, "point": p.as_array()}

    def forward() -> float:
        pt = Point3.from_array(groups["point"])
        return float(upstream @ sample(ClipFeatureMap(groups["grid"]), pt))

    def analytic() -> dict[str, Tensor]:
        grid = ClipFeatureMap(groups["grid"])
        pt = Point3.from_array(groups["point"])
        cells, g_p = sample_backward(grid, pt, upstream)
        g_grid = grad_cells_to_dense(dict(cells), grid)
        return {"grid": g_grid, "point": g_p.as_array()}

    return CheckInstance("interp", groups, forward, analytic)


def make_dense_instance(seed, num_heads: int = 2, model_dim: int = 4, n_k: int = 5) -> CheckInstance:
    """Dense attention: one query, a random key set, all four projections."""
    seeds = split_seed(seed, 4)
    params = dense_attention.DenseAttnParams.random(num_heads, model_dim, seeds[0])
    z_q = make_rng(seeds[1]).normal(size=model_dim)
    keys = make_rng(seeds[2]).normal(size=(n_k, model_dim))
    upstream = make_rng(seeds[3]).normal(size=model_dim)
    groups = {"z_q": z_q, "keys": keys, "u": params.u, "v": params.v,
              "wp": params.wp, "wo": params.wo}

    def forward() -> float:
        out, _ = dense_attention.multi_head_attn(params, groups["z_q"], groups["keys"])
        return float(upstream @ out)

    def analytic() -> dict[str, Tensor]:
        return dense_attention.multi_head_attn_backward(
            params, groups["z_q"], groups["keys"], upstream)

    return CheckInstance("dense_attention", groups, forward, analytic)


def make_stdeform_instance(seed, num_heads: int = 2, model_dim: int = 4,
                           points: int = 2) -> CheckInstance:
    """Deformable attention on a 2x3x3 grid with fractional sampling points."""
    for s in _retry_seeds(seed):
        seeds = split_seed(s, 4)
        params = stdeform_attention.random_params(num_heads, model_dim, points, seeds[0])
        grid_values = make_rng(seeds[1]).normal(size=(2, 3, 3, model_dim))
        rng = make_rng(seeds[2])
        z_q = rng.normal(size=model_dim)
        p_q = Point3(x=rng.uniform(0.1, 2.9), y=rng.uniform(0.1, 2.9), t=rng.uniform(0.1, 1.9))
        plan = stdeform_attention.SamplingPlan(
            stdeform_attention.predict_offsets(params, z_q),
            stdeform_attention.predict_weights(params, z_q),
        )
        if _clear_of_lattice(plan.all_points(p_q)):
            break
    else:
        raise ContractError("could not draw a stdeform instance clear of lattice planes")
    upstream = make_rng(seeds[3]).normal(size=model_dim)
    groups = {"z_q": z_q, "p_q": p_q.as_array(), "x": grid_values}
    groups.update(params.named(""))

    def forward() -> float:
        out, _ = stdeform_attention.stdeform_attn(
            params, groups["z_q"], Point3.from_array(groups["p_q"]),
            ClipFeatureMap(groups["x"]))
        return float(upstream @ out)

    def analytic() -> dict[str, Tensor]:
        grid = ClipFeatureMap(groups["x"])
        gr = stdeform_attention.stdeform_attn_backward(
            params, groups["z_q"], Point3.from_array(groups["p_q"]), grid, upstream)
        gr["x"] = grad_cells_to_dense(gr.pop("x_cells"), grid)
        return gr

    return CheckInstance("stdeform_attention", groups, forward, analytic)


COMPOSED_CONFIG = ModelConfig(t=2, h=2, w=2, c=6, heads=1, points=2,
                              layers_enc=1, layers_dec=1, num_queries=2,
                              init="random")


def make_composed_instance(seed, cfg: ModelConfig = COMPOSED_CONFIG) -> CheckInstance:
    """One encoder + one decoder layer; loss is the sum of decoder outputs.

    Layer-norm affine parameters are jittered away from their identity init:
    with gamma exactly 1 the channel sum of a layer-norm output is constant,
    which would zero out every upstream gradient and leave nothing to check.
    """
    for s in _retry_seeds(seed):
        seeds = split_seed(s, 3)
        model = blocks.build_model(
            ModelConfig(**{**cfg.as_dict(), "seed": seeds[0]}))
        jitter = make_rng(seeds[2])
        for name, param in model.named_parameters().items():
            if ".ln" in name:
                param += jitter.normal(0.0, 0.3, size=param.shape)
        clip_values = make_rng(seeds[1]).normal(size=(cfg.t, cfg.h, cfg.w, cfg.c))
        _, _, cache = blocks.model_forward(model, ClipFeatureMap(clip_values))
        if _clear_of_lattice(blocks.collect_sampled_points(cache)):
            break
    else:
        raise ContractError("could not draw a composed instance clear of lattice planes")
    groups = dict(model.named_parameters())
    groups["clip"] = clip_values

    def forward() -> float:
        emb, _, _ = blocks.model_forward(model, ClipFeatureMap(groups["clip"]))
        return float(np.sum(emb))

    def analytic() -> dict[str, Tensor]:
        emb, _, fcache = blocks.model_forward(model, ClipFeatureMap(groups["clip"]))
        grads, g_clip = blocks.model_backward(model, fcache, np.ones_like(emb))
        grads["clip"] = g_clip
        return grads

    return CheckInstance("blocks", groups, forward, analytic)


INSTANCE_FACTORIES = {
    "interp": make_interp_instance,
    "dense_attention": make_dense_instance,
    "stdeform_attention": make_stdeform_instance,
    "blocks": make_composed_instance,
}


def run_suite(modules: list[str], instances_per_module: int, seed,
              tolerance: float = 1e-5, h: float = 1e-5) -> list[GradReport]:
    """Run the shipped check instances for the requested modules."""
    names = list(INSTANCE_FACTORIES)
    unknown = [m for m in modules if m not in names]
    if unknown:
        raise ParameterError(f"unknown gradcheck module(s): {unknown}")
    reports = []
    for module in modules:
        module_seed = seed * len(names) + names.index(module)
        for inst_seed in split_seed(module_seed, instances_per_module):
            reports.extend(check(INSTANCE_FACTORIES[module](inst_seed),
                                 tolerance=tolerance, h=h))
    return reports
