"""Patch dataset, loss, the training loop and ablation plumbing."""
from __future__ import annotations

import csv
import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .blocks import read_image, to_luminance
from .network import (
    CoastConfig,
    CoastParams,
    ConditionVector,
    count_params,
    load_checkpoint,
    recover_patches,
    save_checkpoint,
)
from .sampling import AugmentedSet, SamplingMatrix, load_matrix, measure, rows_for_ratio, rpa_augment

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".pgm", ".png"}


class NumericalFailure(RuntimeError):
    pass


@dataclass
class TrainConfig:
    image_dir: str = "data/train"
    out_dir: str = "runs/default"
    patch_count: int = 5000
    patch_side: int = 33
    batch_size: int = 64
    epochs: int = 40
    learning_rate: float = 1e-4
    seed: int = 0
    sigma_lo: float = 0.0
    sigma_hi: float = 0.0
    ratios: tuple[float, ...] = (0.1, 0.3, 0.5)
    ns: int = 5
    base_seed: int = 1000
    rpa_seed: int = 2000
    phi_dir: str | None = None
    phases: int = 5
    blocks: int = 3
    channels: int = 16
    cu_shared: bool = True
    cu_enabled: bool = True
    checkpoint_every: int = 10

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.sigma_lo > self.sigma_hi or self.sigma_lo < 0:
            raise ValueError(f"need 0 <= sigma_lo <= sigma_hi, got [{self.sigma_lo}, {self.sigma_hi}]")
        if self.patch_count < self.batch_size:
            raise ValueError(f"patch_count ({self.patch_count}) must be >= batch_size ({self.batch_size})")
        if self.ns < 1 or self.epochs < 0 or self.checkpoint_every < 1:
            raise ValueError("ns and checkpoint_every must be >= 1 and epochs >= 0")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        self.ratios = tuple(float(r) for r in self.ratios)

    @property
    def coast(self) -> CoastConfig:
        return CoastConfig(self.phases, self.blocks, self.channels, self.cu_shared, self.cu_enabled, pnpd=False)


# full-size training protocol, kept for reference; far beyond desk-scale compute
FULL_SCALE = dict(
    patch_count=88912, phases=20, blocks=3, channels=32, ratios=(0.1, 0.2, 0.3, 0.4, 0.5), ns=25
)


def _parse_value(kind: str, text: str):
    """Convert ``text`` according to a dataclass field annotation (a string here)."""
    text = text.strip()
    if kind == "bool":
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind.startswith("tuple"):
        return tuple(float(t) for t in text.replace(",", " ").split())
    if "None" in kind and text.lower() in ("", "none"):
        return None
    return text


def parse_train_config(text: str, base_dir: Path | None = None) -> TrainConfig:
    """``key = value`` lines; ``#`` starts a comment.  Relative paths resolve against ``base_dir``."""
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in kinds:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _parse_value(str(kinds[key]), val)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {key}: {exc}") from None
    if base_dir is not None:
        for key in ("image_dir", "out_dir", "phi_dir"):
            if values.get(key) and not Path(values[key]).is_absolute():
                values[key] = str(base_dir / values[key])
    return TrainConfig(**values)


def load_train_config(path) -> TrainConfig:
    path = Path(path)
    return parse_train_config(path.read_text(), path.parent)


def format_train_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = " ".join(repr(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# data


def list_images(image_dir) -> list[Path]:
    d = Path(image_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"image directory {d} does not exist")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def build_dataset(image_dir, patch_count: int, patch_side: int, seed: int) -> np.ndarray:
    """Randomly cropped luminance patches, ``patch_count x patch_side**2``.

    The source image of each crop is drawn with probability proportional to
    its pixel area and the top-left corner uniformly among valid positions.
    """
    images = []
    for path in list_images(image_dir):
        img = to_luminance(read_image(path))
        if min(img.shape) < patch_side:
            warnings.warn(f"skipping {path.name}: {img.shape} is smaller than the {patch_side}-pixel patch")
            continue
        images.append(img)
    if not images:
        raise ValueError(f"no usable images (>= {patch_side} px) in {image_dir}")
    areas = np.array([im.size for im in images], dtype=np.float64)
    rng = np.random.default_rng(seed)
    which = rng.choice(len(images), size=patch_count, p=areas / areas.sum())
    out = np.empty((patch_count, patch_side * patch_side))
    for i, k in enumerate(which):
        h, w = images[k].shape
        top = rng.integers(0, h - patch_side + 1)
        left = rng.integers(0, w - patch_side + 1)
        out[i] = images[k][top : top + patch_side, left : left + patch_side].ravel()
    return out


def build_matrix_set(cfg: TrainConfig) -> AugmentedSet:
    n = cfg.patch_side * cfg.patch_side
    if cfg.phi_dir:
        bases = [load_matrix(p) for p in sorted(Path(cfg.phi_dir).glob("*.bin"))]
        if not bases:
            raise ValueError(f"no matrix files in {cfg.phi_dir}")
    else:
        bases = [(rows_for_ratio(r, n), n, cfg.base_seed + i) for i, r in enumerate(cfg.ratios)]
    return rpa_augment(bases, cfg.ns, cfg.rpa_seed)


def batch_loss(xhat, x) -> ad.Node:
    """Mean over the batch of ``||xhat_i - x_i||^2 / N``."""
    return ad.mse(xhat, x)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainState:
    params: CoastParams
    adam: ad.AdamState
    epoch: int = 0
    loss_history: list[float] = field(default_factory=list)
    rngs: dict = field(default_factory=dict)


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("shuffle", "matrix", "sigma", "noise")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def matrix_schedule(rng: np.random.Generator, n_batches: int, n_matrices: int) -> np.ndarray:
    """Matrix index for each batch of one epoch: back-to-back random permutations.

    Every batch is still equally likely to get any matrix, but each epoch uses
    every matrix within one of equally often.  With iid draws the mix of easy
    and hard ratios varies from epoch to epoch, which swamps the per-epoch
    loss at small patch counts.
    """
    reps = -(-n_batches // n_matrices)
    return np.concatenate([rng.permutation(n_matrices) for _ in range(reps)])[:n_batches]


def train_step(state: TrainState, x: np.ndarray, phi: SamplingMatrix, sigma: float, noise_rng, config: CoastConfig):
    """One Adam step on a single batch; returns the batch loss before the update."""
    y = measure(x, phi, sigma, noise_rng).y
    nodes = state.params.nodes()
    out = recover_patches(y, phi, ConditionVector(phi.ratio, sigma), nodes, config, pnpd=False)
    loss = batch_loss(out, x)
    value = float(loss.value)
    if not np.isfinite(value):
        raise NumericalFailure(f"non-finite loss {value}")
    ad.backward(loss)
    ad.adam_step(state.params.arrays, {k: n.grad for k, n in nodes.items()}, state.adam)
    return value


def train(cfg: TrainConfig, patches: np.ndarray | None = None, matrices: AugmentedSet | None = None) -> TrainState:
    """Train from scratch, writing checkpoints, ``loss.csv`` and ``meta.json`` to ``cfg.out_dir``."""
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if patches is None:
        patches = build_dataset(cfg.image_dir, cfg.patch_count, cfg.patch_side, cfg.seed)
    if matrices is None:
        matrices = build_matrix_set(cfg)
    if len(matrices) == 0:
        raise ValueError("the sampling-matrix set is empty")
    if any(m.cols != patches.shape[1] for m in matrices.matrices):
        raise ValueError("every sampling matrix must match the patch dimension")

    config = cfg.coast
    streams = _streams(cfg.seed)
    state = TrainState(CoastParams.init(config, cfg.seed), ad.AdamState(lr=cfg.learning_rate), rngs=streams)
    _write_meta(out_dir, cfg, matrices)
    loss_csv = out_dir / "loss.csv"
    with open(loss_csv, "w", newline="") as fh:
        csv.writer(fh).writerow(["epoch", "mean_loss", "wall_seconds"])

    last_good = state.params.copy()
    started = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        order = streams["shuffle"].permutation(len(patches))
        starts = range(0, len(order), cfg.batch_size)
        schedule = matrix_schedule(streams["matrix"], len(starts), len(matrices))
        total, seen = 0.0, 0
        for b, s in enumerate(starts):
            x = patches[order[s : s + cfg.batch_size]]
            phi = matrices.matrices[int(schedule[b])]
            sigma = float(streams["sigma"].uniform(cfg.sigma_lo, cfg.sigma_hi))
            try:
                value = train_step(state, x, phi, sigma, streams["noise"], config)
            except (NumericalFailure, FloatingPointError) as exc:
                save_checkpoint(last_good, out_dir / "last_good.bin")
                raise NumericalFailure(f"epoch {epoch}: {exc}; last good parameters saved") from exc
            total += value * len(x)
            seen += len(x)
        mean = total / seen
        state.epoch = epoch
        state.loss_history.append(mean)
        last_good = state.params.copy()
        wall = time.perf_counter() - started
        with open(loss_csv, "a", newline="") as fh:
            csv.writer(fh).writerow([epoch, repr(mean), f"{wall:.1f}"])
        log.info("epoch %d/%d loss %.6g (%.0fs)", epoch, cfg.epochs, mean, wall)
        if epoch % cfg.checkpoint_every == 0:
            save_checkpoint(state.params, out_dir / f"ckpt_epoch{epoch:03d}.bin")
    save_checkpoint(state.params, out_dir / "final.bin")
    return state


def _config_meta(cfg: TrainConfig) -> dict:
    meta = asdict(cfg)
    meta["ratios"] = list(cfg.ratios)
    return meta


def train_or_load(cfg: TrainConfig) -> CoastParams:
    """Reuse ``out_dir/final.bin`` when its ``meta.json`` records the same configuration, else train."""
    out_dir = Path(cfg.out_dir)
    final = out_dir / "final.bin"
    if final.exists() and (out_dir / "meta.json").exists():
        meta = read_meta(out_dir)
        if all(meta.get(k) == v for k, v in _config_meta(cfg).items()):
            log.info("reusing %s", final)
            return load_checkpoint(final, pnpd=True)
    train(cfg)
    return load_checkpoint(final, pnpd=True)


def _write_meta(out_dir: Path, cfg: TrainConfig, matrices: AugmentedSet) -> None:
    meta = _config_meta(cfg)
    meta["matrices"] = [m.ident for m in matrices.matrices]
    meta["matrix_seeds"] = sorted(matrices.seeds)
    meta["param_count"] = count_params(cfg.coast)
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_meta(run_dir) -> dict:
    return json.loads((Path(run_dir) / "meta.json").read_text())


def config_from_meta(meta: dict) -> TrainConfig:
    """Rebuild the training configuration recorded in ``meta.json``."""
    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: (tuple(v) if k == "ratios" else v) for k, v in meta.items() if k in names})


def read_loss_csv(path) -> list[tuple[int, float, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(int(r["epoch"]), float(r["mean_loss"]), float(r["wall_seconds"])) for r in rows]


# ---------------------------------------------------------------------------
# ablation settings


ABLATION_SETTINGS = {
    # setting: (augment with N_S > 1, CU enabled, CU shared, deblocking at evaluation)
    "a": (False, False, False, False),
    "b": (True, False, False, False),
    "c": (True, True, False, False),
    "d": (True, True, True, False),
    "e": (True, True, True, True),
}


@dataclass(frozen=True)
class AblationSetting:
    name: str
    rpa: bool
    cu_enabled: bool
    cu_shared: bool
    pnpd: bool

    def coast_config(self, base: CoastConfig) -> CoastConfig:
        return replace(base, cu_enabled=self.cu_enabled, cu_shared=self.cu_shared, pnpd=self.pnpd)

    def train_config(self, base: TrainConfig) -> TrainConfig:
        return replace(
            base,
            ns=base.ns if self.rpa else 1,
            cu_enabled=self.cu_enabled,
            cu_shared=self.cu_shared,
            out_dir=str(Path(base.out_dir) / f"ablation_{self.name}"),
        )

    def param_count(self, base: CoastConfig) -> int:
        return count_params(self.coast_config(base))


def ablation_setting(name: str) -> AblationSetting:
    key = name.lower().strip("()")
    if key not in ABLATION_SETTINGS:
        raise ValueError(f"unknown ablation setting {name!r}; choose from {sorted(ABLATION_SETTINGS)}")
    return AblationSetting(key, *ABLATION_SETTINGS[key])
