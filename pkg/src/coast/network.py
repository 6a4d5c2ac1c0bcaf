"""The unfolded recovery network: gradient steps interleaved with controllable
proximal-mapping modules, optional deblocking by folding, and checkpoints."""
from __future__ import annotations

import math
import os
import struct
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .blocks import PatchGrid
from .blocks import fold as fold_array
from .blocks import unfold as unfold_array
from .sampling import SamplingMatrix

CKPT_MAGIC = b"COASTCKPT"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<9sIIIIBB")
OUTPUT_GAIN = 0.1  # extra scale on residual-branch output convs at init


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class CoastConfig:
    phases: int = 20
    blocks: int = 3
    channels: int = 32
    cu_shared: bool = True
    cu_enabled: bool = True
    pnpd: bool = True

    def __post_init__(self):
        for name in ("phases", "blocks", "channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")


FULL_CONFIG = CoastConfig()
TOY_CONFIG = CoastConfig(phases=5, blocks=3, channels=16)


@dataclass(frozen=True)
class ConditionVector:
    gamma: float
    sigma: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.gamma) and np.isfinite(self.sigma)):
            raise ValueError("condition vector entries must be finite")
        if not 0 <= self.gamma <= 1:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")

    def as_array(self) -> np.ndarray:
        return np.array([self.gamma, self.sigma], dtype=np.float64)


def count_params(config: CoastConfig) -> int:
    c = config.channels
    per_phase = (9 * c + c) + config.blocks * 2 * (9 * c * c + c) + (9 * c + 1) + 1
    cu = 2 * c + c
    if not config.cu_enabled:
        cu_total = 0
    elif config.cu_shared:
        cu_total = cu
    else:
        cu_total = config.phases * config.blocks * cu
    return config.phases * per_phase + cu_total


def param_shapes(config: CoastConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of all learnable arrays, in checkpoint order."""
    c = config.channels
    shapes: dict[str, tuple[int, ...]] = {}
    for k in range(config.phases):
        p = f"phase{k}"
        shapes[f"{p}.w1"] = (c, 1, 3, 3)
        shapes[f"{p}.b1"] = (c,)
        for j in range(config.blocks):
            q = f"{p}.block{j}"
            shapes[f"{q}.w1"] = (c, c, 3, 3)
            shapes[f"{q}.b1"] = (c,)
            shapes[f"{q}.w2"] = (c, c, 3, 3)
            shapes[f"{q}.b2"] = (c,)
        shapes[f"{p}.w2"] = (1, c, 3, 3)
        shapes[f"{p}.b2"] = (1,)
        shapes[f"{p}.rho"] = (1,)
    if config.cu_enabled:
        if config.cu_shared:
            shapes["cu.weight"] = (c, 2)
            shapes["cu.bias"] = (c,)
        else:
            for k in range(config.phases):
                for j in range(config.blocks):
                    shapes[f"cu.phase{k}.block{j}.weight"] = (c, 2)
                    shapes[f"cu.phase{k}.block{j}.bias"] = (c,)
    return shapes


def cu_names(config: CoastConfig, phase: int, block: int) -> tuple[str, str] | None:
    if not config.cu_enabled:
        return None
    if config.cu_shared:
        return "cu.weight", "cu.bias"
    return f"cu.phase{phase}.block{block}.weight", f"cu.phase{phase}.block{block}.bias"


@dataclass
class CoastParams:
    config: CoastConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, config: CoastConfig, seed: int = 0) -> "CoastParams":
        """Fan-in scaled normal conv weights, zero biases, unit step sizes,
        and a near-identity controllable unit (weight std 0.01, bias 1).

        Convs that write into a residual sum (``w2`` of every block and
        phase) are scaled down by ``OUTPUT_GAIN`` so an untrained network
        stays close to the gradient-step output instead of blowing it up.
        """
        rng = np.random.default_rng(seed)
        arrays: dict[str, np.ndarray] = {}
        for name, shape in param_shapes(config).items():
            leaf = name.rsplit(".", 1)[1]
            if name.startswith("cu."):
                if leaf == "weight":
                    arrays[name] = 0.01 * rng.standard_normal(shape)
                else:
                    arrays[name] = np.ones(shape)
            elif leaf == "rho":
                arrays[name] = np.ones(shape)
            elif leaf.startswith("w"):
                std = math.sqrt(2.0 / (9 * shape[1]))
                if leaf == "w2":
                    std *= OUTPUT_GAIN
                arrays[name] = std * rng.standard_normal(shape)
            else:
                arrays[name] = np.zeros(shape)
        return cls(config, arrays)

    @classmethod
    def zeros(cls, config: CoastConfig) -> "CoastParams":
        """All convs and the CU zeroed, step sizes 1: the network reduces to projections."""
        arrays = {n: np.zeros(s) for n, s in param_shapes(config).items()}
        for n in arrays:
            if n.endswith(".rho"):
                arrays[n][...] = 1.0
        return cls(config, arrays)

    def count(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def copy(self) -> "CoastParams":
        return CoastParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def nodes(self) -> dict[str, ad.Node]:
        """Trainable leaves sharing memory with ``arrays`` (optimizer updates stay visible)."""
        return {k: ad.Node(v, requires_grad=True, name=k) for k, v in self.arrays.items()}

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    def unshared(self) -> "CoastParams":
        """Same network with one private CU copy per block, each initialised from the shared CU."""
        if not (self.config.cu_enabled and self.config.cu_shared):
            raise ValueError("unshared() needs a configuration with one shared CU")
        cfg = replace(self.config, cu_shared=False)
        arrays = {k: v.copy() for k, v in self.arrays.items() if not k.startswith("cu.")}
        for k in range(cfg.phases):
            for j in range(cfg.blocks):
                wn, bn = cu_names(cfg, k, j)
                arrays[wn] = self.arrays["cu.weight"].copy()
                arrays[bn] = self.arrays["cu.bias"].copy()
        return CoastParams(cfg, arrays)


# ---------------------------------------------------------------------------
# building blocks


def init_x0(phi: SamplingMatrix, y: np.ndarray) -> np.ndarray:
    y = np.atleast_2d(y)
    if y.shape[1] != phi.rows:
        raise ad.DimensionError(f"measurement length {y.shape[1]} does not match M={phi.rows}")
    return np.zeros((y.shape[0], phi.cols))


def gdm(xhat, phi: SamplingMatrix, y, rho) -> ad.Node:
    """Gradient step ``xhat - rho * phi^T (phi xhat - y)`` on a B x N patch batch."""
    xhat = ad.constant(xhat)
    y = np.atleast_2d(np.asarray(getattr(y, "value", y)))
    if xhat.value.ndim != 2 or xhat.shape[1] != phi.cols:
        raise ad.DimensionError(f"estimate of shape {xhat.shape} does not match N={phi.cols}")
    if y.shape != (xhat.shape[0], phi.rows):
        raise ad.DimensionError(f"measurements of shape {y.shape}, expected {(xhat.shape[0], phi.rows)}")
    residual = ad.sub(ad.matmul(xhat, phi.data.T), y)
    return ad.sub(xhat, ad.scale(ad.matmul(residual, phi.data), rho))


def cu_forward(z, weight, bias) -> ad.Node:
    zv = z.as_array() if isinstance(z, ConditionVector) else z
    return ad.fc(zv, weight, bias)


def cpmb_forward(feat, z, block: Mapping, cu: tuple | None) -> ad.Node:
    """Residual block whose branch output is scaled per channel by the CU."""
    branch = ad.conv2d(ad.relu(ad.conv2d(feat, block["w1"], block["b1"])), block["w2"], block["b2"])
    if cu is not None:
        branch = ad.channel_scale(branch, cu_forward(z, *cu))
    return ad.add(branch, feat)


def _phase_view(params: Mapping, config: CoastConfig, k: int) -> dict:
    p = f"phase{k}"
    blocks = []
    for j in range(config.blocks):
        q = f"{p}.block{j}"
        names = cu_names(config, k, j)
        blocks.append(
            (
                {s: params[f"{q}.{s}"] for s in ("w1", "b1", "w2", "b2")},
                None if names is None else (params[names[0]], params[names[1]]),
            )
        )
    return {
        "w1": params[f"{p}.w1"],
        "b1": params[f"{p}.b1"],
        "w2": params[f"{p}.w2"],
        "b2": params[f"{p}.b2"],
        "rho": params[f"{p}.rho"],
        "blocks": blocks,
    }


def cpmm_forward(r, z, phase: Mapping) -> ad.Node:
    """``r + W2(CPMB_Nc(... CPMB_1(W1(r))))`` on a single-channel B x 1 x H x W map."""
    r = ad.constant(r)
    if r.value.ndim != 4 or r.shape[1] != 1:
        raise ad.DimensionError(f"CPMM input must be B x 1 x H x W, got {r.shape}")
    feat = ad.conv2d(r, phase["w1"], phase["b1"])
    for block, cu in phase["blocks"]:
        feat = cpmb_forward(feat, z, block, cu)
    return ad.add(r, ad.conv2d(feat, phase["w2"], phase["b2"]))


def fold_node(x, rows: int, cols: int) -> ad.Node:
    side = x.shape[-1]
    return ad.linear_map(x, lambda v: fold_array(v, rows, cols), lambda g: unfold_array(g, side))


def unfold_node(x, side: int) -> ad.Node:
    rows, cols = x.shape[2] // side, x.shape[3] // side
    return ad.linear_map(x, lambda v: unfold_array(v, side), lambda g: fold_array(g, rows, cols))


def recover_patches(
    y,
    phi: SamplingMatrix,
    z: ConditionVector,
    params,
    config: CoastConfig,
    grid: tuple[int, int] | None = None,
    pnpd: bool | None = None,
) -> ad.Node:
    """Run all phases and return the B x N patch estimates.

    ``params`` maps names to arrays (inference) or nodes (training).  With
    deblocking on, each phase folds the gradient-step output of the whole
    ``grid`` into one image before its CPMM and unfolds afterwards.
    """
    if isinstance(params, CoastParams):
        params = params.arrays
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if y.shape[1] != phi.rows:
        raise ad.DimensionError(f"measurement length {y.shape[1]} does not match M={phi.rows}")
    pnpd = config.pnpd if pnpd is None else pnpd
    batch, side = y.shape[0], phi.patch_side
    if pnpd:
        if grid is None:
            raise ValueError("deblocking needs the grid geometry (rows, cols)")
        if grid[0] * grid[1] != batch:
            raise ValueError(f"grid {grid} does not hold {batch} patches")
    zvec = z.as_array()
    xhat = ad.constant(init_x0(phi, y))
    for k in range(config.phases):
        phase = _phase_view(params, config, k)
        r = gdm(xhat, phi, y, phase["rho"])
        r4 = ad.reshape(r, (batch, 1, side, side))
        if pnpd:
            out = unfold_node(cpmm_forward(fold_node(r4, *grid), zvec, phase), side)
        else:
            out = cpmm_forward(r4, zvec, phase)
        xhat = ad.reshape(out, (batch, side * side))
    return xhat


def coast_forward(y, phi: SamplingMatrix, z: ConditionVector, params, config: CoastConfig, grid: PatchGrid, pnpd=None):
    """Reconstruct a whole image (cropped to the grid's original size)."""
    patches = recover_patches(y, phi, z, params, config, (grid.rows, grid.cols), pnpd)
    img = fold_array(patches.value.reshape(grid.count, 1, grid.side, grid.side), grid.rows, grid.cols)[0, 0]
    return img[: grid.height, : grid.width]


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_bytes(params: CoastParams) -> bytes:
    cfg = params.config
    header = _CKPT_HEADER.pack(
        CKPT_MAGIC, CKPT_VERSION, cfg.phases, cfg.blocks, cfg.channels, int(cfg.cu_shared), int(cfg.cu_enabled)
    )
    return header + params.flat().astype("<f8").tobytes()


def save_checkpoint(params: CoastParams, path) -> None:
    """Atomic write: temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(checkpoint_bytes(params))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path, pnpd: bool = True) -> CoastParams:
    raw = Path(path).read_bytes()
    if raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < _CKPT_HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    _, version, phases, blocks, channels, shared, enabled = _CKPT_HEADER.unpack_from(raw)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    cfg = CoastConfig(phases, blocks, channels, bool(shared), bool(enabled), pnpd)
    shapes = param_shapes(cfg)
    total = count_params(cfg)
    payload = raw[_CKPT_HEADER.size :]
    if len(payload) != 8 * total:
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, expected {8 * total}")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if not np.all(np.isfinite(flat)):
        raise CheckpointError(f"{path}: non-finite parameter values")
    arrays, pos = {}, 0
    for name, shape in shapes.items():
        size = int(np.prod(shape))
        arrays[name] = flat[pos : pos + size].reshape(shape).copy()
        pos += size
    return CoastParams(cfg, arrays)
