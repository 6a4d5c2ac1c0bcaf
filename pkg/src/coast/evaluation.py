"""Image-quality metrics, reconstruction helpers and the experiment runners
(seen/unseen matrices, N_S sweep, noise sweep, ablation) with CSV reports."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .blocks import partition, read_image, to_luminance, assemble
from .ista import IstaConfig, ista_solve, pinv_reconstruct
from .network import CoastParams, ConditionVector, coast_forward, load_checkpoint
from .sampling import AugmentedSet, SamplingMatrix, gen_frgm, measure, rows_for_ratio
from .training import TrainConfig, ablation_setting, build_matrix_set, list_images, read_meta, train_or_load

PSNR_SENTINEL = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

CSV_HEADER = ("dataset", "matrix_id", "seen", "gamma", "sigma", "method", "psnr_db", "ssim", "seconds")


class SeedCollisionError(ValueError):
    pass


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """PSNR in dB for images in [0, 1]; capped at the 99 dB sentinel."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_SENTINEL
    return min(PSNR_SENTINEL, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian; the 2-D window is its outer product."""
    t = np.arange(size) - (size - 1) / 2
    g = np.exp(-(t**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    half = len(g) // 2
    out = ndimage.correlate1d(img, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    return out[half : img.shape[0] - half, half : img.shape[1] - half]


def ssim_map(a, b) -> np.ndarray:
    """Local SSIM over every fully contained 11 x 11 Gaussian window."""
    a, b = _pair(a, b)
    if a.ndim != 2 or min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs a 2-D image of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    g = gaussian_window()
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b) -> float:
    return float(np.mean(ssim_map(a, b)))


# ---------------------------------------------------------------------------
# models and reconstruction


@dataclass
class Model:
    params: CoastParams
    meta: dict = field(default_factory=dict)

    @property
    def sigma_range(self) -> tuple[float, float]:
        return float(self.meta.get("sigma_lo", 0.0)), float(self.meta.get("sigma_hi", 0.0))

    @property
    def matrix_ids(self) -> set[str]:
        return set(self.meta.get("matrices", ()))

    @classmethod
    def load(cls, path, pnpd: bool = True) -> "Model":
        """``path`` is a checkpoint file or a run directory holding ``final.bin``."""
        path = Path(path)
        if path.is_dir():
            meta = read_meta(path) if (path / "meta.json").exists() else {}
            return cls(load_checkpoint(path / "final.bin", pnpd), meta)
        meta_path = path.parent / "meta.json"
        return cls(load_checkpoint(path, pnpd), read_meta(path.parent) if meta_path.exists() else {})


def reconstruct(
    img,
    phi: SamplingMatrix,
    method: str = "coast",
    model: Model | CoastParams | None = None,
    sigma: float = 0.0,
    seed=0,
    pnpd: bool | None = None,
    ista: IstaConfig | None = None,
) -> np.ndarray:
    """Sample ``img`` block by block with ``phi`` and reconstruct it.

    ``method`` is ``coast``, ``ista`` or ``pinv`` (``pinv`` equals the
    ``phi^T y`` baseline for orthonormal rows).  The result is clipped to
    [0, 1] and cropped to the input size.
    """
    grid = partition(img, phi.patch_side)
    y = measure(grid.patches, phi, sigma, seed).y
    if method == "coast":
        if model is None:
            raise ValueError("method 'coast' needs a model")
        params = model.params if isinstance(model, Model) else model
        out = coast_forward(y, phi, ConditionVector(phi.ratio, sigma), params, params.config, grid, pnpd)
        return np.clip(out, 0.0, 1.0)
    if method == "ista":
        patches, _ = ista_solve(y, phi, ista or IstaConfig())
    elif method == "pinv":
        patches = pinv_reconstruct(y, phi)
    else:
        raise ValueError(f"unknown method {method!r}")
    return np.clip(assemble(grid, patches), 0.0, 1.0)


def load_images(image_dir) -> list[tuple[str, np.ndarray]]:
    return [(p.stem, to_luminance(read_image(p))) for p in list_images(image_dir)]


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalRow:
    dataset: str
    matrix_id: str
    seen: bool
    gamma: float
    sigma: float
    method: str
    psnr_db: float
    ssim: float
    seconds: float


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def extend(self, other: "EvalReport") -> None:
        self.rows.extend(other.rows)

    def select(self, **match) -> list[EvalRow]:
        out = []
        for r in self.rows:
            if all(
                math.isclose(getattr(r, k), v, abs_tol=1e-12) if isinstance(v, float) else getattr(r, k) == v
                for k, v in match.items()
            ):
                out.append(r)
        return out

    def mean_psnr(self, **match) -> float:
        rows = self.select(**match)
        if not rows:
            raise ValueError(f"no rows match {match}")
        return float(np.mean([r.psnr_db for r in rows]))

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for r in self.rows:
                w.writerow(
                    [r.dataset, r.matrix_id, int(r.seen), repr(r.gamma), repr(r.sigma), r.method,
                     repr(r.psnr_db), repr(r.ssim), f"{r.seconds:.3f}"]
                )

    @classmethod
    def read_csv(cls, path) -> "EvalReport":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != CSV_HEADER:
                raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
            rows = [
                EvalRow(d["dataset"], d["matrix_id"], d["seen"] == "1", float(d["gamma"]), float(d["sigma"]),
                        d["method"], float(d["psnr_db"]), float(d["ssim"]), float(d["seconds"]))
                for d in reader
            ]
        return cls(rows)


def seen_unseen_gap(report: EvalReport, gamma: float) -> float:
    """Mean seen PSNR minus mean unseen PSNR at ``gamma``."""
    return report.mean_psnr(gamma=gamma, seen=True) - report.mean_psnr(gamma=gamma, seen=False)


def _noise_seed(base: int, image_index: int) -> np.random.SeedSequence:
    # the same image gets the same noise under every matrix
    return np.random.SeedSequence([base, image_index])


def _score(dataset, phi, seen, gamma, sigma, method, ref, recon, seconds) -> EvalRow:
    return EvalRow(dataset, phi.ident, seen, gamma, sigma, method, psnr(ref, recon), ssim(ref, recon), seconds)


def evaluate_matrix(
    images, phi: SamplingMatrix, method="coast", model=None, sigma=0.0, seen=True, dataset="test",
    noise_seed: int = 0, pnpd=None, label: str | None = None, gamma: float | None = None,
) -> EvalReport:
    """One row per image for a single matrix.  ``gamma`` is the nominal ratio
    recorded in the rows (default: the exact ``M / N``)."""
    gamma = phi.ratio if gamma is None else float(gamma)
    report = EvalReport()
    for i, (name, img) in enumerate(images):
        t0 = time.perf_counter()
        recon = reconstruct(img, phi, method, model, sigma, _noise_seed(noise_seed, i), pnpd)
        report.rows.append(
            _score(f"{dataset}/{name}", phi, seen, gamma, sigma, label or method, img, recon, time.perf_counter() - t0)
        )
    return report


def seen_matrix(seen_set: AugmentedSet, m: int) -> SamplingMatrix:
    for base in seen_set.bases:
        if base.rows == m:
            return base
    for phi in seen_set.matrices:
        if phi.rows == m:
            return phi
    raise ValueError(f"the seen set has no matrix with M={m}")


def unseen_matrices(seen_set: AugmentedSet, m: int, n: int, seeds) -> list[SamplingMatrix]:
    """FRGMs for ``seeds``; rejects any seed or matrix that belongs to the seen set."""
    out = []
    for s in seeds:
        if s in seen_set.seeds:
            raise SeedCollisionError(f"seed {s} was used to build the seen set")
        phi = gen_frgm(m, n, s)
        if any(phi.same_as(other) for other in seen_set.matrices):
            raise SeedCollisionError(f"matrix for seed {s} coincides with a seen matrix")
        out.append(phi)
    return out


def eval_seen_unseen(
    model, seen_set: AugmentedSet, unseen_seeds, images, gammas, sigma: float = 0.0,
    method: str = "coast", dataset: str = "test", noise_seed: int = 0,
) -> EvalReport:
    """For each ratio, every image under the seen base matrix and under each unseen FRGM.

    Row count is ``len(gammas) * len(images) * (1 + len(unseen_seeds))``.
    """
    unseen_seeds = list(unseen_seeds)
    if not unseen_seeds:
        raise ValueError("need at least one unseen seed")
    n = seen_set.matrices[0].cols
    report = EvalReport()
    for gamma in gammas:
        m = rows_for_ratio(gamma, n)
        seen = seen_matrix(seen_set, m)
        unseen = unseen_matrices(seen_set, m, n, unseen_seeds)
        report.extend(evaluate_matrix(images, seen, method, model, sigma, True, dataset, noise_seed, gamma=gamma))
        for phi in unseen:
            report.extend(evaluate_matrix(images, phi, method, model, sigma, False, dataset, noise_seed, gamma=gamma))
    return report


def _aggregate(report: EvalReport, dataset: str, matrix_id: str, seen: bool, gamma, sigma, method) -> EvalRow:
    return EvalRow(
        dataset, matrix_id, seen, gamma, sigma, method,
        float(np.mean([r.psnr_db for r in report.rows])),
        float(np.mean([r.ssim for r in report.rows])),
        float(sum(r.seconds for r in report.rows)),
    )


def eval_ns_sweep(
    base: TrainConfig, ns_list, gamma: float, images, unseen_seeds, dataset: str = "test",
    noise_seed: int = 0, detail: EvalReport | None = None,
) -> EvalReport:
    """Train (or reuse) one model per N_S from the same seed; one mean unseen-PSNR row per N_S.

    Per-image rows are appended to ``detail`` when it is given.
    """
    report = EvalReport()
    for ns in sorted(set(int(v) for v in ns_list)):
        cfg = replace(base, ns=ns, out_dir=str(Path(base.out_dir) / f"ns{ns}"))
        model = Model(train_or_load(cfg), read_meta(cfg.out_dir))
        rows = eval_seen_unseen(model, build_matrix_set(cfg), unseen_seeds, images, [gamma], 0.0,
                                dataset=dataset, noise_seed=noise_seed)
        if detail is not None:
            detail.extend(rows)
        unseen = EvalReport(rows.select(seen=False))
        report.rows.append(_aggregate(unseen, dataset, "unseen-mean", False, unseen.rows[0].gamma, 0.0, f"coast-ns{ns}"))
    return report


def noise_sweep(
    model: Model, sigmas, matrices, images, dataset: str = "test", noise_seed: int = 0
) -> EvalReport:
    """Mean PSNR/SSIM over ``images`` for every (sigma, matrix) cell, with z = [gamma, sigma]."""
    lo, hi = model.sigma_range
    label = f"coast[sigma {lo:.4g}-{hi:.4g}]"
    report = EvalReport()
    for sigma in sigmas:
        for phi in matrices:
            cell = evaluate_matrix(images, phi, "coast", model, float(sigma), phi.ident in model.matrix_ids,
                                   dataset, noise_seed)
            report.rows.append(_aggregate(cell, dataset, phi.ident, cell.rows[0].seen, phi.ratio, float(sigma), label))
    return report


def eval_ablation(base: TrainConfig, settings, gammas, images, dataset: str = "test", noise_seed: int = 0) -> EvalReport:
    """Train (or reuse) each ablation setting and report its mean PSNR per ratio on seen base matrices.

    The method column carries the setting name and its trainable parameter count.
    """
    report = EvalReport()
    for name in settings:
        setting = ablation_setting(name)
        cfg = setting.train_config(base)
        params = train_or_load(cfg)
        params = CoastParams(setting.coast_config(params.config), params.arrays)
        model = Model(params, read_meta(cfg.out_dir))
        seen_set = build_matrix_set(cfg)
        n = seen_set.matrices[0].cols
        for gamma in gammas:
            phi = seen_matrix(seen_set, rows_for_ratio(gamma, n))
            cell = evaluate_matrix(images, phi, "coast", model, 0.0, True, dataset, noise_seed, gamma=gamma)
            label = f"ablation-{setting.name} ({params.count()} params)"
            report.rows.append(_aggregate(cell, dataset, phi.ident, True, gamma, 0.0, label))
    return report

