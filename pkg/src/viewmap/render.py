"""Differentiable volume rendering in inverse-distance ray space, plus the loss stack.

Samples along a ray live in a normalized spacing coordinate ``s`` in [0, 1]:
``s`` is affine in ``g(t) = 1 / (1 + t)`` between the near and far planes,
so equal steps in ``s`` are equal steps in inverse distance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .config import RenderConfig
from .geom import Ray, contract


class RenderError(ValueError):
    pass


@dataclass
class RaySamples:
    boundaries: torch.Tensor  # (R, N+1) spacing coordinates
    densities: torch.Tensor | None = None  # (R, N)
    colors: torch.Tensor | None = None  # (R, N, 3)

    @property
    def midpoints(self) -> torch.Tensor:
        return 0.5 * (self.boundaries[..., 1:] + self.boundaries[..., :-1])


@dataclass
class RenderOutput:
    color: torch.Tensor  # (R, 3)
    depth: torch.Tensor  # (R,) metric distance along the ray
    weights: torch.Tensor  # (R, N)
    opacity: torch.Tensor  # (R,)
    transmittance: torch.Tensor  # (R, N)
    boundaries: torch.Tensor | None = None
    proposal_boundaries: torch.Tensor | None = None
    proposal_weights: torch.Tensor | None = None
    sample_points: torch.Tensor | None = None  # contracted main samples (R, N, 3)
    extras: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# spacing <-> metric


def _g(t):
    return 1.0 / (1.0 + t)


def spacing_to_metric(s: torch.Tensor, near: float, far: float) -> torch.Tensor:
    g = _g(near) + s * (_g(far) - _g(near))
    return 1.0 / g - 1.0


def sample_depths(s: torch.Tensor, near: float, far: float) -> torch.Tensor:
    """Metric depth of each interval's midpoint in ``s``, where the interval is sampled and its depth read."""
    return spacing_to_metric(0.5 * (s[..., 1:] + s[..., :-1]), near, far)


def metric_to_spacing(t, near: float, far: float):
    return (_g(t) - _g(near)) / (_g(far) - _g(near))


# ---------------------------------------------------------------------------
# sampling


def sample_uniform_contracted(
    n_rays: int, n: int, *, jitter: bool = False, generator: torch.Generator | None = None, dtype=torch.float32
) -> torch.Tensor:
    """Evenly spaced boundaries in ``s``; interior boundaries jittered within their stratum."""
    if n < 1:
        raise RenderError("need at least one interval")
    s = torch.linspace(0.0, 1.0, n + 1, dtype=dtype).expand(n_rays, n + 1).clone()
    if jitter and n > 1:
        u = torch.rand(n_rays, n - 1, generator=generator, dtype=dtype) - 0.5
        s[:, 1:-1] += u / n
    return s


def sample_pdf(bins: torch.Tensor, probs: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """Inverse CDF of the piecewise-constant density ``probs`` over ``bins`` at quantiles ``u``."""
    cdf = torch.cumsum(probs, -1)
    cdf = torch.cat([torch.zeros_like(cdf[..., :1]), cdf], -1)
    cdf = cdf / cdf[..., -1:]
    u = u.contiguous()
    idx = torch.searchsorted(cdf, u, right=True).clamp(1, probs.shape[-1])
    c0 = torch.gather(cdf, -1, idx - 1)
    c1 = torch.gather(cdf, -1, idx)
    b0 = torch.gather(bins, -1, idx - 1)
    b1 = torch.gather(bins, -1, idx)
    frac = torch.where(c1 > c0, (u - c0) / (c1 - c0).clamp_min(1e-30), torch.zeros_like(u))
    return b0 + frac.clamp(0, 1) * (b1 - b0)


def resample_from_proposal(
    proposal_weights: torch.Tensor,
    proposal_boundaries: torch.Tensor,
    n: int,
    *,
    floor: float = 1e-2,
    jitter: bool = False,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Draw ``n + 1`` sorted boundaries from the proposal histogram.

    A fraction ``floor`` of the probability mass is spread uniformly over
    the bins so all-zero histograms stay well defined.  Quantiles are the
    regular grid ``k / n`` (first and last boundary pinned to the ray ends);
    in jitter mode interior quantiles move within their stratum.
    """
    w = proposal_weights.detach().clamp_min(0)
    nb = w.shape[-1]
    total = w.sum(-1, keepdim=True)
    p = torch.where(total > 0, w / total.clamp_min(1e-30), torch.full_like(w, 1.0 / nb))
    p = (1.0 - floor) * p + floor / nb
    u = torch.linspace(0.0, 1.0, n + 1, dtype=w.dtype).expand(*w.shape[:-1], n + 1).clone()
    if jitter and n > 1:
        u[..., 1:-1] += (torch.rand(*w.shape[:-1], n - 1, generator=generator, dtype=w.dtype) - 0.5) / n
    t = sample_pdf(proposal_boundaries.detach(), p, u)
    return torch.sort(t, -1).values


# ---------------------------------------------------------------------------
# compositing


def interval_weights(boundaries: torch.Tensor, sigma: torch.Tensor, near: float, far: float):
    """Alpha-compositing weights and transmittance using metric interval lengths."""
    t = spacing_to_metric(boundaries, near, far)
    delta = t[..., 1:] - t[..., :-1]
    tau = sigma * delta
    alpha = 1.0 - torch.exp(-tau)
    acc = torch.cumsum(tau, -1)
    trans = torch.exp(-torch.cat([torch.zeros_like(acc[..., :1]), acc[..., :-1]], -1))
    return trans * alpha, trans, t


def composite(samples: RaySamples, background, near: float, far: float) -> RenderOutput:
    w, trans, t = interval_weights(samples.boundaries, samples.densities, near, far)
    acc = w.sum(-1)
    bg = torch.as_tensor(background, dtype=w.dtype)
    color = (w[..., None] * samples.colors).sum(-2) + (1.0 - acc)[..., None] * bg
    mid = sample_depths(samples.boundaries, near, far)
    depth = (w * mid).sum(-1) / acc.clamp_min(1e-10)
    return RenderOutput(color=color, depth=depth, weights=w, opacity=acc, transmittance=trans,
                        boundaries=samples.boundaries)


# ---------------------------------------------------------------------------
# losses


def loss_rgb(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise RenderError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target) ** 2).sum(-1).mean()


def loss_distortion(weights: torch.Tensor, boundaries: torch.Tensor) -> torch.Tensor:
    w = weights.reshape(-1, weights.shape[-1])
    s = boundaries.reshape(-1, boundaries.shape[-1])
    mid = 0.5 * (s[:, 1:] + s[:, :-1])
    inter = (w[:, :, None] * w[:, None, :] * (mid[:, :, None] - mid[:, None, :]).abs()).sum((-1, -2))
    intra = (w**2 * (s[:, 1:] - s[:, :-1])).sum(-1) / 3.0
    return (inter + intra).mean()


def bound(proposal_boundaries, proposal_weights, interval) -> float:
    """Total proposal weight of bins overlapping ``interval`` with positive measure."""
    tb = np.asarray(proposal_boundaries, dtype=np.float64)
    wb = np.asarray(proposal_weights, dtype=np.float64)
    lo, hi = interval
    total = 0.0
    for j in range(len(wb)):
        if min(hi, tb[j + 1]) > max(lo, tb[j]):
            total += wb[j]
    return total


def bounds(proposal_boundaries: torch.Tensor, proposal_weights: torch.Tensor, boundaries: torch.Tensor):
    """Vectorized ``bound`` for every interval of ``boundaries``; shape (..., N)."""
    tb = proposal_boundaries.contiguous()
    cw = torch.cumsum(proposal_weights, -1)
    cw = torch.cat([torch.zeros_like(cw[..., :1]), cw], -1)
    lo = boundaries[..., :-1].contiguous()
    hi = boundaries[..., 1:].contiguous()
    # bins j with tb[j+1] <= lo are entirely left; bins with tb[j] >= hi entirely right
    j_lo = torch.searchsorted(tb[..., 1:].contiguous(), lo, right=True)
    j_hi = torch.searchsorted(tb[..., :-1].contiguous(), hi, right=False)
    j_hi = torch.maximum(j_hi, j_lo)
    out = torch.gather(cw, -1, j_hi) - torch.gather(cw, -1, j_lo)
    # a single overlapped bin: read its weight directly, free of cumsum rounding
    single = torch.gather(proposal_weights, -1, j_lo.clamp_max(proposal_weights.shape[-1] - 1))
    out = torch.where(j_hi - j_lo == 1, single, out)
    # zero-length query intervals overlap nothing
    return torch.where(hi > lo, out, torch.zeros_like(out))


def loss_proposal(boundaries, weights, proposal_boundaries, proposal_weights) -> torch.Tensor:
    """Gradients reach only the proposal weights; the main weights are constants."""
    b = bounds(proposal_boundaries.detach(), proposal_weights, boundaries.detach())
    return (torch.relu(weights.detach() - b) ** 2).sum(-1).mean()


def loss_depth(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, bool]:
    """Mean absolute depth error over valid rays; returns ``(loss, empty_mask)``."""
    mask = mask.bool()
    if not torch.any(mask):
        return pred.sum() * 0.0, True
    return (pred[mask] - target[mask]).abs().mean(), False


@dataclass
class LossParts:
    rgb: torch.Tensor | float = 0.0
    dist: torch.Tensor | float = 0.0
    prop: torch.Tensor | float = 0.0
    depth: torch.Tensor | float = 0.0


def loss_total(parts: LossParts, cfg: RenderConfig | None = None, *, rgb_only: bool | None = None):
    cfg = cfg or RenderConfig()
    rgb_only = cfg.rgb_only if rgb_only is None else rgb_only
    total = parts.rgb + cfg.lambda_dist * parts.dist + cfg.lambda_prop * parts.prop
    if not rgb_only:
        total = total + cfg.lambda_depth * parts.depth
    return total


def compute_losses(out: RenderOutput, rgb, depth=None, depth_mask=None, cfg: RenderConfig | None = None,
                   main_weights_for_prop: torch.Tensor | None = None):
    """All loss terms for a rendered batch. Returns ``(total, parts)``."""
    cfg = cfg or RenderConfig()
    parts = LossParts()
    parts.rgb = loss_rgb(out.color, rgb)
    parts.dist = loss_distortion(out.weights, out.boundaries)
    w_main = out.weights if main_weights_for_prop is None else main_weights_for_prop
    parts.prop = loss_proposal(out.boundaries, w_main, out.proposal_boundaries, out.proposal_weights)
    if depth is not None and not cfg.rgb_only:
        parts.depth, _ = loss_depth(out.depth, depth, depth_mask)
    return loss_total(parts, cfg), parts


# ---------------------------------------------------------------------------
# full ray rendering


def _points(origins, dirs, boundaries, near, far):
    mid = sample_depths(boundaries, near, far)
    return origins[:, None, :] + dirs[:, None, :] * mid[..., None]


def render_rays(
    model,
    origins: torch.Tensor,
    dirs: torch.Tensor,
    cfg: RenderConfig,
    *,
    train: bool = False,
    use_skipping: bool = False,
    generator: torch.Generator | None = None,
    fixed_boundaries: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> RenderOutput:
    """Proposal pass, resampling, main pass and compositing for a batch of rays.

    Rays are in the model's local frame. With ``use_skipping`` main samples in
    unoccupied cells get zero density and are never sent through the MLPs.
    ``fixed_boundaries = (proposal, main)`` bypasses sampling entirely.
    """
    n_rays = origins.shape[0]
    dt = origins.dtype
    if fixed_boundaries is None:
        s_prop = sample_uniform_contracted(n_rays, cfg.n_proposal, jitter=train, generator=generator, dtype=dt)
    else:
        s_prop = fixed_boundaries[0]
    c_prop = contract(_points(origins, dirs, s_prop, cfg.near, cfg.far)).reshape(-1, 3)
    sigma_prop = model.query_proposal(c_prop).reshape(n_rays, -1)
    w_prop, _, _ = interval_weights(s_prop, sigma_prop, cfg.near, cfg.far)

    if fixed_boundaries is None:
        s_main = resample_from_proposal(w_prop, s_prop, cfg.n_main, floor=cfg.resample_floor, jitter=train,
                                        generator=generator)
    else:
        s_main = fixed_boundaries[1]
    n = s_main.shape[-1] - 1
    c_main = contract(_points(origins, dirs, s_main, cfg.near, cfg.far)).reshape(-1, 3)
    vd = dirs[:, None, :].expand(n_rays, n, 3).reshape(-1, 3)
    if use_skipping:
        occ = model.is_occupied(c_main)
        sigma = torch.zeros(c_main.shape[0], dtype=dt)
        rgb = torch.zeros(c_main.shape[0], 3, dtype=dt)
        if torch.any(occ):
            s_o, c_o = model.query(c_main[occ], vd[occ])
            sigma = sigma.index_put((occ,), s_o)
            rgb = rgb.index_put((occ,), c_o)
    else:
        sigma, rgb = model.query(c_main, vd)
    samples = RaySamples(s_main, sigma.reshape(n_rays, n), rgb.reshape(n_rays, n, 3))
    out = composite(samples, cfg.background, cfg.near, cfg.far)
    out.proposal_boundaries = s_prop
    out.proposal_weights = w_prop
    out.sample_points = c_main.detach().reshape(n_rays, n, 3)
    return out


def render_ray(model, ray: Ray, cfg: RenderConfig, mode: str = "eval", use_skipping: bool = False,
               generator: torch.Generator | None = None) -> RenderOutput:
    dt = model.grid.table.dtype
    o = torch.as_tensor(ray.origin, dtype=dt)[None]
    d = torch.as_tensor(ray.direction, dtype=dt)[None]
    return render_rays(model, o, d, cfg, train=(mode == "train"), use_skipping=use_skipping, generator=generator)


@torch.no_grad()
def render_batch(model, origins, dirs, cfg: RenderConfig, use_skipping: bool = True):
    """Eval-mode rendering in chunks; returns (color, depth, opacity) tensors."""
    dt = model.grid.table.dtype
    o = torch.as_tensor(origins, dtype=dt).reshape(-1, 3)
    d = torch.as_tensor(dirs, dtype=dt).reshape(-1, 3)
    cols, deps, accs = [], [], []
    for i in range(0, o.shape[0], cfg.chunk):
        out = render_rays(model, o[i:i + cfg.chunk], d[i:i + cfg.chunk], cfg, use_skipping=use_skipping)
        cols.append(out.color)
        deps.append(out.depth)
        accs.append(out.opacity)
    return torch.cat(cols), torch.cat(deps), torch.cat(accs)
