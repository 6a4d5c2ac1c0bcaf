"""Metrics, reconstruction helpers and the experiment runners."""
import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import signal

from coast.blocks import partition, write_image
from coast.evaluation import (
    CSV_HEADER,
    PSNR_SENTINEL,
    EvalReport,
    Model,
    SeedCollisionError,
    eval_ablation,
    eval_ns_sweep,
    eval_seen_unseen,
    evaluate_matrix,
    gaussian_window,
    load_images,
    noise_sweep,
    psnr,
    reconstruct,
    seen_matrix,
    seen_unseen_gap,
    ssim,
    unseen_matrices,
)
from coast.ista import IstaConfig
from coast.network import CoastConfig, CoastParams, count_params
from coast.sampling import gen_frgm, rpa_augment
from coast.training import TrainConfig, build_matrix_set


class TestPsnr:
    def test_identical_gives_sentinel(self):
        x = np.random.default_rng(0).random((8, 8))
        assert psnr(x, x) == PSNR_SENTINEL

    def test_black_vs_white_is_zero(self):
        assert psnr(np.zeros((4, 4)), np.ones((4, 4))) == 0.0

    def test_oracle_and_symmetry(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((2, 9, 7))
        mse = sum((a[i, j] - b[i, j]) ** 2 for i in range(9) for j in range(7)) / 63
        assert psnr(a, b) == pytest.approx(10 * math.log10(1 / mse), abs=1e-10)
        assert psnr(a, b) == psnr(b, a)

    def test_tiny_error_capped(self):
        a = np.zeros((4, 4))
        b = a.copy()
        b[0, 0] = 1e-9
        assert psnr(a, b) == PSNR_SENTINEL

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((2, 2)), np.zeros((2, 3)))


def ssim_direct(a, b):
    """Windowed SSIM by explicit 2-D convolution over the valid region."""
    g = gaussian_window()
    w = np.outer(g, g)
    f = lambda im: signal.correlate2d(im, w, mode="valid")
    c1, c2 = 0.01**2, 0.03**2
    ma, mb = f(a), f(b)
    va = f(a * a) - ma**2
    vb = f(b * b) - mb**2
    cov = f(a * b) - ma * mb
    m = ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2))
    return float(m.mean())


class TestSsim:
    def test_identical_is_one(self):
        x = np.random.default_rng(0).random((32, 32))
        assert ssim(x, x) == 1.0

    def test_complement_below_one(self):
        x = np.random.default_rng(4).random((16, 16))
        assert ssim(x, 1 - x) < 1.0

    def test_perturbed_below_one(self):
        rng = np.random.default_rng(1)
        x = rng.random((32, 32))
        assert ssim(x, np.clip(x + 0.05 * rng.standard_normal(x.shape), 0, 1)) < 1.0

    def test_direct_convolution_oracle(self):
        rng = np.random.default_rng(2)
        a, b = rng.random((2, 32, 32))
        assert abs(ssim(a, b) - ssim_direct(a, b)) < 1e-8

    def test_symmetric(self):
        rng = np.random.default_rng(3)
        a, b = rng.random((2, 20, 25))
        assert abs(ssim(a, b) - ssim(b, a)) < 1e-12

    def test_window_normalized(self):
        assert gaussian_window().sum() == pytest.approx(1.0, abs=1e-15)

    def test_too_small(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((10, 40)), np.zeros((10, 40)))


def small_images(count=2, side=24, seed=0):
    rng = np.random.default_rng(seed)
    return [(f"img{i}", rng.random((side, side))) for i in range(count)]


def tiny_coast_config():
    return CoastConfig(phases=2, blocks=1, channels=2)


class TestReconstruct:
    def test_pinv_square_is_exact(self):
        img = np.random.default_rng(0).random((12, 12))
        out = reconstruct(img, gen_frgm(16, 16, 0), "pinv")
        np.testing.assert_allclose(out, img, atol=1e-12)

    def test_zero_model_equals_pinv(self):
        img = np.random.default_rng(1).random((12, 12))
        phi = gen_frgm(6, 16, 1)
        zero = CoastParams.zeros(tiny_coast_config())
        a = reconstruct(img, phi, "coast", zero, pnpd=False)
        b = reconstruct(img, phi, "pinv")
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_ista_runs(self):
        img = np.random.default_rng(2).random((8, 8))
        out = reconstruct(img, gen_frgm(8, 16, 2), "ista", ista=IstaConfig(max_iters=20))
        assert out.shape == img.shape and out.min() >= 0 and out.max() <= 1

    def test_coast_needs_model(self):
        with pytest.raises(ValueError):
            reconstruct(np.zeros((4, 4)), gen_frgm(4, 16, 0), "coast")

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            reconstruct(np.zeros((4, 4)), gen_frgm(4, 16, 0), "magic")


@pytest.fixture
def seen_set():
    return build_matrix_set(TrainConfig(ratios=(0.25, 0.5), ns=3, patch_side=4))


class TestSeenUnseen:
    def test_row_count_and_flags(self, seen_set):
        model = CoastParams.zeros(tiny_coast_config())
        images = small_images(3, 12)
        report = eval_seen_unseen(model, seen_set, [9001, 9002], images, [0.25, 0.5], method="coast")
        assert len(report) == 2 * 3 * 3
        assert len(report.select(seen=True)) == 2 * 3
        assert {r.gamma for r in report.rows} == {0.25, 0.5}

    def test_one_unseen_matrix_doubles_rows(self, seen_set):
        images = small_images(3, 12)
        report = eval_seen_unseen(None, seen_set, [9001], images, [0.25, 0.5], method="pinv")
        assert len(report) == 2 * 3 * 2

    def test_seen_is_base_matrix(self, seen_set):
        assert seen_matrix(seen_set, 4) is seen_set.bases[0]
        with pytest.raises(ValueError):
            seen_matrix(seen_set, 5)

    def test_seed_collision_rejected(self, seen_set):
        with pytest.raises(SeedCollisionError):
            unseen_matrices(seen_set, 4, 16, [9001, 1000])

    def test_identical_matrix_rejected(self):
        # a seen set that contains the FRGM for seed 7 under a different seed label
        phi = gen_frgm(4, 16, 7)
        aug = rpa_augment([(4, 16, 1)], 1, 2000)
        aug.matrices[0] = replace(phi, seed=1)
        with pytest.raises(SeedCollisionError):
            unseen_matrices(aug, 4, 16, [7])

    def test_zero_network_has_small_gap(self, seen_set):
        # with all-zero weights the output is phi^T y, which does not prefer any matrix
        model = CoastParams.zeros(tiny_coast_config())
        images = small_images(4, 16, seed=5)
        gaps = []
        for draw in range(10):
            seeds = [9100 + 10 * draw + k for k in range(3)]
            report = eval_seen_unseen(model, seen_set, seeds, images, [0.5], method="coast", noise_seed=draw)
            gaps.append(seen_unseen_gap(report, 0.5))
        assert all(abs(g) < 1.0 for g in gaps)

    def test_same_noise_per_image_across_matrices(self, seen_set):
        images = small_images(1, 12)
        a = evaluate_matrix(images, gen_frgm(16, 16, 3), "pinv", sigma=0.1, noise_seed=4)
        b = evaluate_matrix(images, gen_frgm(16, 16, 5), "pinv", sigma=0.1, noise_seed=4)
        # a square orthonormal matrix inverts exactly, so the error is the noise itself
        assert a.rows[0].psnr_db == pytest.approx(b.rows[0].psnr_db, abs=1e-9)

    def test_no_unseen_seeds(self, seen_set):
        with pytest.raises(ValueError):
            eval_seen_unseen(None, seen_set, [], small_images(1, 12), [0.25], method="pinv")


class TestReport:
    def test_csv_round_trip(self, seen_set, tmp_path):
        report = eval_seen_unseen(None, seen_set, [9001], small_images(2, 12), [0.25], method="pinv")
        report.write_csv(tmp_path / "r.csv")
        back = EvalReport.read_csv(tmp_path / "r.csv")
        for r, s in zip(report.rows, back.rows):
            assert (r.dataset, r.matrix_id, r.seen, r.gamma, r.psnr_db, r.ssim) == (
                s.dataset, s.matrix_id, s.seen, s.gamma, s.psnr_db, s.ssim)
        assert (tmp_path / "r.csv").read_text().splitlines()[0] == ",".join(CSV_HEADER)

    def test_deterministic(self, seen_set):
        run = lambda: eval_seen_unseen(None, seen_set, [9001], small_images(2, 12), [0.5], 0.05, "pinv", noise_seed=3)
        a, b = run(), run()
        assert [r.psnr_db for r in a.rows] == [r.psnr_db for r in b.rows]

    def test_bad_header(self, tmp_path):
        (tmp_path / "x.csv").write_text("a,b\n1,2\n")
        with pytest.raises(ValueError):
            EvalReport.read_csv(tmp_path / "x.csv")

    def test_mean_of_nothing(self):
        with pytest.raises(ValueError):
            EvalReport().mean_psnr(seen=True)


@pytest.fixture
def train_dir(tmp_path):
    d = tmp_path / "train"
    d.mkdir()
    rng = np.random.default_rng(0)
    for i in range(2):
        write_image(rng.random((20, 20)), d / f"t{i}.pgm")
    return d


def tiny_train(train_dir, out_dir, **kw):
    base = dict(image_dir=str(train_dir), out_dir=str(out_dir), patch_count=16, patch_side=4, batch_size=8,
                epochs=1, ratios=(0.5,), ns=2, phases=2, blocks=1, channels=2, checkpoint_every=5)
    base.update(kw)
    return TrainConfig(**base)


class TestRunners:
    def test_ns_sweep_single(self, train_dir, tmp_path):
        detail = EvalReport()
        report = eval_ns_sweep(tiny_train(train_dir, tmp_path / "sweep"), [1], 0.5, small_images(1, 12), [9001],
                               detail=detail)
        assert len(report) == 1 and report.rows[0].method == "coast-ns1"
        assert len(detail) == 2
        assert report.rows[0].psnr_db == detail.rows[1].psnr_db

    def test_ns_sweep_sorted(self, train_dir, tmp_path):
        report = eval_ns_sweep(tiny_train(train_dir, tmp_path / "sweep"), [3, 1, 3], 0.5, small_images(1, 12), [9001])
        assert [r.method for r in report.rows] == ["coast-ns1", "coast-ns3"]

    def test_noise_sweep_grid(self, train_dir, tmp_path):
        from coast.training import train

        cfg = tiny_train(train_dir, tmp_path / "run", sigma_hi=0.1)
        train(cfg)
        model = Model.load(tmp_path / "run")
        mats = [gen_frgm(8, 16, 1000), gen_frgm(8, 16, 42)]
        images = small_images(2, 12)
        report = noise_sweep(model, [0.0, 0.05, 0.1], mats, images)
        assert len(report) == 6
        assert report.rows[0].method == "coast[sigma 0-0.1]"
        assert [r.seen for r in report.rows[:2]] == [True, False]
        plain = evaluate_matrix(images, mats[1], "coast", model, 0.0)
        assert report.rows[1].psnr_db == pytest.approx(np.mean([r.psnr_db for r in plain.rows]), abs=1e-12)

    def test_ablation_rows(self, train_dir, tmp_path):
        report = eval_ablation(tiny_train(train_dir, tmp_path / "abl"), ["a", "e"], [0.5], small_images(1, 12))
        counts = [count_params(replace(tiny_coast_config(), cu_enabled=False)), count_params(tiny_coast_config())]
        assert [r.method for r in report.rows] == [f"ablation-a ({counts[0]} params)", f"ablation-e ({counts[1]} params)"]


def test_load_images_luminance(tmp_path):
    from PIL import Image

    arr = np.zeros((4, 4, 3), np.uint8)
    arr[..., 1] = 255
    Image.fromarray(arr).save(tmp_path / "g.png")
    write_image(np.ones((3, 3)), tmp_path / "w.pgm")
    imgs = dict(load_images(tmp_path))
    assert imgs["g"][0, 0] == pytest.approx(0.587) and np.all(imgs["w"] == 1.0)
    assert partition(imgs["g"], 2).count == 4
