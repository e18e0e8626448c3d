"""Local radiance field: spherical multi-resolution grids, MLP heads and occupancy."""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import _kernels
from .config import FieldConfig, field_config_from_dict, to_dict
from .geom import Pose, transform_contracted

HASH_PRIMES = (1, 2654435761, 805459861)
_CORNERS = torch.tensor([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=torch.long)


class MultiResGrid(nn.Module):
    """Multi-resolution feature grid over contracted ``(theta, phi, rho)`` space.

    Levels whose vertex count fits in the hash table are stored densely and
    are collision-free; finer levels are spatially hashed.  The theta axis is
    periodic, so a level of resolution ``n`` has ``n * (n + 1)**2`` vertices.
    All levels share one parameter table; ``offsets`` index into it.
    """

    def __init__(self, n_levels, n_features, base_resolution, growth, log2_hash_size, dtype=torch.float32):
        super().__init__()
        self.n_levels = n_levels
        self.n_features = n_features
        self.hash_size = 2**log2_hash_size
        self.resolutions = [int(math.floor(base_resolution * growth**level)) for level in range(n_levels)]
        if any(b <= a for a, b in zip(self.resolutions, self.resolutions[1:])):
            raise ValueError(f"grid resolutions must strictly increase, got {self.resolutions}")
        counts = [n * (n + 1) ** 2 for n in self.resolutions]
        self.is_dense = [c <= self.hash_size for c in counts]
        self.sizes = [c if d else self.hash_size for c, d in zip(counts, self.is_dense)]
        self.offsets = [0]
        for s in self.sizes[:-1]:
            self.offsets.append(self.offsets[-1] + s)
        self.table = nn.Parameter(torch.zeros(sum(self.sizes), n_features, dtype=dtype))
        self.register_buffer("_res", torch.tensor(self.resolutions, dtype=torch.long), persistent=False)
        self.register_buffer("_dense", torch.tensor(self.is_dense), persistent=False)
        self.register_buffer("_offsets", torch.tensor(self.offsets, dtype=torch.long), persistent=False)
        self._kargs = None

    @property
    def out_dim(self) -> int:
        return self.n_levels * self.n_features

    def level_slice(self, level: int) -> slice:
        return slice(self.offsets[level], self.offsets[level] + self.sizes[level])

    def corners(self, c: torch.Tensor, levels: list[int] | None = None):
        """Table rows and trilinear weights of the 8 cell corners, shapes (N, L, 8)."""
        sel = list(range(self.n_levels)) if levels is None else levels
        res = self._res[sel]
        dense = self._dense[sel]
        offsets = self._offsets[sel]

        pos = c[:, None, :] * res.to(c.dtype)[None, :, None]  # (N, L, 3)
        base = torch.floor(pos)
        i0 = base.long()
        hi = (res - 1)[None, :]
        # phi and rho clamp at the far face; theta wraps
        i_t = i0[..., 0]
        i_p = i0[..., 1].clamp(0, None).minimum(hi)
        i_r = i0[..., 2].clamp(0, None).minimum(hi)
        f_t = pos[..., 0] - base[..., 0]
        f_p = pos[..., 1] - i_p.to(c.dtype)
        f_r = pos[..., 2] - i_r.to(c.dtype)

        r = res[None, :, None]
        two = torch.arange(2, device=c.device)
        ax_t = torch.remainder(i_t[..., None] + two, r)  # (N, L, 2)
        ax_p = i_p[..., None] + two
        ax_r = i_r[..., None] + two
        n = c.shape[0]
        rows = torch.empty(n, len(sel), 2, 2, 2, dtype=torch.long, device=c.device)
        dsel = torch.nonzero(dense).flatten()
        hsel = torch.nonzero(~dense).flatten()
        if dsel.numel():
            rd = r[:, dsel]
            t, p, q = ax_t[:, dsel], ax_p[:, dsel] * rd, ax_r[:, dsel] * (rd * (rd + 1))
            rows[:, dsel] = t[..., :, None, None] + p[..., None, :, None] + q[..., None, None, :]
        if hsel.numel():
            t = ax_t[:, hsel] * HASH_PRIMES[0]
            p = ax_p[:, hsel] * HASH_PRIMES[1]
            q = ax_r[:, hsel] * HASH_PRIMES[2]
            h = t[..., :, None, None] ^ p[..., None, :, None] ^ q[..., None, None, :]
            rows[:, hsel] = h & (self.hash_size - 1)
        rows = (rows + offsets[None, :, None, None, None]).reshape(n, len(sel), 8)

        w_t = torch.stack([1.0 - f_t, f_t], -1)
        w_p = torch.stack([1.0 - f_p, f_p], -1)
        w_r = torch.stack([1.0 - f_r, f_r], -1)
        w = (w_t[..., :, None, None] * w_p[..., None, :, None] * w_r[..., None, None, :]).reshape(n, len(sel), 8)
        return rows, w

    def forward(self, c: torch.Tensor, levels: list[int] | None = None) -> torch.Tensor:
        if levels is not None:
            return self.forward_reference(c, levels)
        c = c.to(self.table.dtype).contiguous()
        return _GridInterp.apply(self.table, c, self)

    def forward_reference(self, c: torch.Tensor, levels: list[int] | None = None) -> torch.Tensor:
        """Pure-torch lookup (same result as ``forward``), differentiable in the table."""
        rows, w = self.corners(c, levels)
        feats = self.table.index_select(0, rows.reshape(-1)).reshape(*rows.shape, self.n_features)
        return (w[..., None] * feats).sum(2).reshape(c.shape[0], -1)

    def _kernel_args(self):
        if self._kargs is None:
            self._kargs = (
                np.asarray(self.resolutions, dtype=np.int64),
                np.asarray(self.is_dense, dtype=np.bool_),
                np.asarray(self.offsets, dtype=np.int64),
                self.hash_size,
            )
        return self._kargs

    def vertex_coords(self, level: int) -> np.ndarray:
        """Contracted coordinates of every vertex of a dense level, in storage order."""
        if not self.is_dense[level]:
            raise ValueError("only dense levels have an enumerable vertex layout")
        n = self.resolutions[level]
        ir, ip, it = np.meshgrid(np.arange(n + 1), np.arange(n + 1), np.arange(n), indexing="ij")
        return np.stack([it.ravel() / n, ip.ravel() / n, ir.ravel() / n], -1)


def encode(grid: MultiResGrid, c) -> torch.Tensor:
    """Encode contracted points, returning ``L * F`` features per point."""
    c = torch.as_tensor(np.asarray(c, dtype=np.float64) if not isinstance(c, torch.Tensor) else c)
    squeeze = c.ndim == 1
    c = c.reshape(-1, 3).to(grid.table.dtype)
    out = grid(c)
    return out[0] if squeeze else out


class _GridInterp(torch.autograd.Function):
    """Trilinear multi-level lookup; gradients flow to the feature table only."""

    @staticmethod
    def forward(ctx, table, c, grid):
        cn = c.detach().cpu().numpy()
        out = _kernels.interp_forward(cn, table.detach().cpu().numpy(), *grid._kernel_args())
        ctx.save_for_backward(c)
        ctx.grid = grid
        ctx.n_rows = table.shape[0]
        return torch.from_numpy(out)

    @staticmethod
    def backward(ctx, grad):
        (c,) = ctx.saved_tensors
        g = _kernels.interp_backward(
            c.numpy(), np.ascontiguousarray(grad.numpy()), ctx.n_rows, *ctx.grid._kernel_args()
        )
        return torch.from_numpy(g), None, None


class Mlp(nn.Module):
    def __init__(self, sizes: list[int], dtype=torch.float32):
        super().__init__()
        self.sizes = list(sizes)
        self.layers = nn.ModuleList(nn.Linear(a, b, dtype=dtype) for a, b in zip(sizes, sizes[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


class LocalFieldModel(nn.Module):
    """One radiance field living in the local frame of its anchor keyframe."""

    def __init__(self, model_id: int, anchor_keyframe: int, config: FieldConfig):
        super().__init__()
        cfg = config
        dt = cfg.torch_dtype
        self.id = model_id
        self.anchor_keyframe = anchor_keyframe
        self.config = cfg
        self.grid = MultiResGrid(cfg.n_levels, cfg.n_features, cfg.base_resolution, cfg.growth, cfg.log2_hash_size, dt)
        self.density_mlp = Mlp([self.grid.out_dim, cfg.density_hidden, 1 + cfg.geo_features], dt)
        self.color_mlp = Mlp([cfg.geo_features + 3] + [cfg.color_hidden] * cfg.color_layers + [3], dt)
        self.proposal_grid = MultiResGrid(
            cfg.prop_levels, cfg.n_features, cfg.prop_base_resolution, cfg.prop_growth, cfg.prop_log2_hash_size, dt
        )
        self.proposal_mlp = Mlp([self.proposal_grid.out_dim, cfg.prop_hidden, 1], dt)
        n = cfg.occupancy_resolution
        self.register_buffer("occupancy", torch.zeros(n, n, n, dtype=torch.bool))
        self.training_frames: set[int] = {anchor_keyframe}
        self.steps = 0
        self.loss_history: list[float] = []
        self._optimizer: torch.optim.Optimizer | None = None

    def query(self, c: torch.Tensor, view_dir: torch.Tensor):
        """Density (softplus) and color (sigmoid) at contracted points."""
        h = self.density_mlp(self.grid(c))
        sigma = F.softplus(h[:, 0])
        rgb = torch.sigmoid(self.color_mlp(torch.cat([h[:, 1:], view_dir], -1)))
        return sigma, rgb

    def query_proposal(self, c: torch.Tensor) -> torch.Tensor:
        return F.softplus(self.proposal_mlp(self.proposal_grid(c))[:, 0])

    def occupancy_cells(self, c: torch.Tensor) -> torch.Tensor:
        n = self.config.occupancy_resolution
        cell = torch.floor(c * n).long()
        cell[:, 0] = torch.remainder(cell[:, 0], n)
        return cell.clamp(0, n - 1)

    def is_occupied(self, c: torch.Tensor) -> torch.Tensor:
        cell = self.occupancy_cells(c)
        return self.occupancy[cell[:, 0], cell[:, 1], cell[:, 2]]

    def optimizer(self) -> torch.optim.Optimizer:
        if self._optimizer is None:
            cfg = self.config
            grids = [self.grid.table, self.proposal_grid.table]
            mlps = [p for m in (self.density_mlp, self.color_mlp, self.proposal_mlp) for p in m.parameters()]
            self._optimizer = torch.optim.Adam(
                [{"params": grids, "lr": cfg.lr_grid}, {"params": mlps, "lr": cfg.lr_mlp}],
                betas=tuple(cfg.betas),
                eps=cfg.adam_eps,
            )
        return self._optimizer

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def query(model: LocalFieldModel, c, view_dir):
    return model.query(c, view_dir)


def query_proposal(model: LocalFieldModel, c):
    return model.query_proposal(c)


def _uniform_(t: torch.Tensor, bound: float, gen: torch.Generator) -> None:
    with torch.no_grad():
        t.copy_((torch.rand(t.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)


def init_model(model_id: int, anchor_keyframe: int, config: FieldConfig, rng_seed: int) -> LocalFieldModel:
    """Fresh model: grid features ~ U(-1e-4, 1e-4), fan-in scaled uniform MLP weights, zero biases."""
    model = LocalFieldModel(model_id, anchor_keyframe, config)
    gen = torch.Generator().manual_seed(int(rng_seed))
    for grid in (model.grid, model.proposal_grid):
        _uniform_(grid.table, 1e-4, gen)
    for mlp in (model.density_mlp, model.color_mlp, model.proposal_mlp):
        for layer in mlp.layers:
            _uniform_(layer.weight, 1.0 / math.sqrt(layer.in_features), gen)
            with torch.no_grad():
                layer.bias.zero_()
    return model


@torch.no_grad()
def propagate_features(source: LocalFieldModel, target: LocalFieldModel, relative_pose: Pose) -> None:
    """Initialize ``target`` from a trained ``source``.

    Dense (collision-free) levels of the main grid are resampled from the
    source at each target vertex; hashed levels keep their fresh values.
    All MLP weights are copied.  ``relative_pose`` maps target-local points
    to source-local points.
    """
    for level, dense in enumerate(target.grid.is_dense):
        if not dense:
            continue
        verts = target.grid.vertex_coords(level)
        c_src = torch.from_numpy(transform_contracted(verts, relative_pose)).to(source.grid.table.dtype)
        feats = source.grid(c_src, levels=[level])
        target.grid.table[target.grid.level_slice(level)] = feats.to(target.grid.table.dtype)
    for name in ("density_mlp", "color_mlp", "proposal_mlp"):
        getattr(target, name).load_state_dict(getattr(source, name).state_dict())


@torch.no_grad()
def mark_occupancy(model: LocalFieldModel, samples: torch.Tensor, weights: torch.Tensor) -> int:
    """Set cells holding a sample with weight above the threshold; returns newly set cells."""
    if samples.numel() == 0:
        return 0
    keep = weights.reshape(-1) > model.config.occupancy_threshold
    if not torch.any(keep):
        return 0
    cell = model.occupancy_cells(samples.reshape(-1, 3)[keep])
    before = int(model.occupancy.sum())
    model.occupancy[cell[:, 0], cell[:, 1], cell[:, 2]] = True
    return int(model.occupancy.sum()) - before


# ---------------------------------------------------------------------------
# checkpoints


def save_model(model: LocalFieldModel, path: str | Path) -> None:
    meta = {
        "id": model.id,
        "anchor_keyframe": model.anchor_keyframe,
        "training_frames": sorted(model.training_frames),
        "steps": model.steps,
        "config": to_dict(model.config),
    }
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items() if k != "occupancy"}
    arrays["occupancy"] = np.packbits(model.occupancy.cpu().numpy().ravel())
    arrays["loss_history"] = np.asarray(model.loss_history, dtype=np.float64)
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_model(path: str | Path) -> LocalFieldModel:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        model = LocalFieldModel(meta["id"], meta["anchor_keyframe"], field_config_from_dict(meta["config"]))
        state = {k[len("param/"):]: torch.from_numpy(data[k].copy()) for k in data.files if k.startswith("param/")}
        n = model.config.occupancy_resolution
        occ = np.unpackbits(data["occupancy"])[: n**3].astype(bool).reshape(n, n, n)
        state["occupancy"] = torch.from_numpy(occ)
        model.load_state_dict(state)
        model.loss_history = [float(x) for x in data["loss_history"]]
    model.training_frames = set(meta["training_frames"])
    model.steps = meta["steps"]
    return model
