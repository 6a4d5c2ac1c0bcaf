"""Desk-scale training runs behind the learning, generalization, noise and
determinism checks, cached on disk.

Each run directory name carries a key built from the run configuration and a
behavioural fingerprint: the bytes produced by a tiny deterministic training
probe plus a hash of the desk training patches.  Refactors that leave the
numbers alone keep cached runs valid; anything that changes them retrains.

Prebuild everything (about 100 minutes per run on one core)::

    python3 -m coast.deskruns --cache .desk_cache
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import tempfile
from dataclasses import replace
from pathlib import Path

from .training import TrainConfig, build_dataset, format_train_config, read_loss_csv, train

log = logging.getLogger(__name__)

UNSEEN_SEEDS = (9001, 9002, 9003, 9004, 9005)
TEST_SIGMA = 10 / 255
EVAL_NOISE_SEED = 77

BASE = TrainConfig(patch_count=5000, epochs=40, batch_size=64, learning_rate=1e-4, seed=0, ratios=(0.1, 0.3, 0.5),
                   ns=5, phases=5, blocks=3, channels=16, checkpoint_every=10)

# small but covers noise, several matrices, two phases and a partial last batch
PROBE = replace(BASE, patch_count=100, batch_size=32, epochs=2, ns=2, sigma_hi=0.05, phases=2, channels=4,
                checkpoint_every=1)

DESK_RUNS = {
    "rpa5": {},
    "rpa1": {"ns": 1},
    "noisy": {"sigma_hi": TEST_SIGMA},
    "rpa5_repeat": {},
}

_COMPLETE = "complete"


def source_fingerprint(cache_dir) -> str:
    """Hash of a two-epoch probe run and of the full desk patch set."""
    train_dir, _ = ensure_data(cache_dir)
    h = hashlib.sha256()
    with tempfile.TemporaryDirectory() as tmp:
        probe = replace(PROBE, image_dir=str(train_dir), out_dir=tmp)
        train(probe)
        h.update((Path(tmp) / "final.bin").read_bytes())
        h.update(b"".join(repr(row[1]).encode() for row in read_loss_csv(Path(tmp) / "loss.csv")))
    h.update(build_dataset(train_dir, BASE.patch_count, BASE.patch_side, BASE.seed).tobytes())
    return h.hexdigest()


def data_dirs(cache_dir) -> tuple[Path, Path]:
    root = Path(cache_dir) / "data"
    return root / "train", root / "test"


def ensure_data(cache_dir) -> tuple[Path, Path]:
    from .datasets import export_sample_images

    train_dir, test_dir = data_dirs(cache_dir)
    marker = train_dir.parent / _COMPLETE
    if not marker.exists():
        export_sample_images(train_dir.parent)
        marker.write_text("ok\n")
    return train_dir, test_dir


def run_config(name: str, cache_dir, fingerprint: str | None = None) -> TrainConfig:
    if name not in DESK_RUNS:
        raise KeyError(f"unknown desk run {name!r}; choose from {sorted(DESK_RUNS)}")
    train_dir, _ = data_dirs(cache_dir)
    cfg = replace(BASE, image_dir=str(train_dir), out_dir="", **DESK_RUNS[name])
    fingerprint = fingerprint or source_fingerprint(cache_dir)
    # the data location is left out so the key does not depend on how the cache path is spelled
    keyed = format_train_config(replace(cfg, image_dir=""))
    key = hashlib.sha256((fingerprint + keyed).encode()).hexdigest()[:12]
    return replace(cfg, out_dir=str(Path(cache_dir) / "runs" / f"{name}-{key}"))


def is_complete(cfg: TrainConfig) -> bool:
    return (Path(cfg.out_dir) / _COMPLETE).exists()


def ensure_run(name: str, cache_dir, fingerprint: str | None = None) -> TrainConfig:
    """Train ``name`` unless a complete run with the same key is cached; returns its config."""
    cfg = run_config(name, cache_dir, fingerprint)
    if not is_complete(cfg):
        log.info("training desk run %s into %s", name, cfg.out_dir)
        train(cfg)
        (Path(cfg.out_dir) / _COMPLETE).write_text("ok\n")
    return cfg


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python3 -m coast.deskruns", description="prebuild the cached desk-scale runs")
    p.add_argument("--cache", type=Path, default=Path(".desk_cache"))
    p.add_argument("runs", nargs="*", default=list(DESK_RUNS))
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    fingerprint = source_fingerprint(args.cache)
    for name in args.runs:
        cfg = ensure_run(name, args.cache, fingerprint)
        print(cfg.out_dir, flush=True)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
