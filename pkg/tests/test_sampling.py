"""Sampling matrices: generation, augmentation, measurement and file format."""
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coast.sampling import (
    EXTERNAL,
    FRGM,
    FormatError,
    SamplingMatrix,
    derived_seeds,
    gen_frgm,
    load_matrix,
    measure,
    parse_matrix,
    rows_for_ratio,
    rpa_augment,
    save_matrix,
)


def gram_loops(a):
    m = a.shape[0]
    return np.array([[sum(a[i, k] * a[j, k] for k in range(a.shape[1])) for j in range(m)] for i in range(m)])


class TestGenFrgm:
    def test_one_by_one(self):
        phi = gen_frgm(1, 1, 123)
        assert phi.data.tolist() == [[1.0]]

    def test_square_is_orthogonal(self):
        a = gen_frgm(4, 4, 3).data
        np.testing.assert_allclose(a @ a.T, np.eye(4), atol=1e-10)
        np.testing.assert_allclose(a.T @ a, np.eye(4), atol=1e-10)

    def test_gram_oracle_and_determinism(self):
        a = gen_frgm(4, 16, 7)
        assert np.abs(gram_loops(a.data) - np.eye(4)).max() < 1e-10
        assert np.array_equal(a.data, gen_frgm(4, 16, 7).data)
        assert not np.array_equal(a.data, gen_frgm(4, 16, 8).data)

    def test_sign_convention(self):
        a = gen_frgm(20, 64, 11).data
        first = a[np.arange(20), np.argmax(a != 0, axis=1)]
        assert np.all(first > 0)

    def test_metadata(self):
        phi = gen_frgm(109, 1089, 5)
        assert (phi.rows, phi.cols, phi.patch_side, phi.kind, phi.seed) == (109, 1089, 33, FRGM, 5)
        assert phi.ident == "phi_109x1089_5"
        assert phi.ratio == pytest.approx(0.1, abs=1e-3)

    def test_immutable(self):
        phi = gen_frgm(2, 4, 0)
        with pytest.raises(ValueError):
            phi.data[0, 0] = 3.0

    @pytest.mark.parametrize("m,n", [(5, 4), (0, 4)])
    def test_bad_dimensions(self, m, n):
        with pytest.raises(ValueError):
            gen_frgm(m, n, 0)

    def test_non_square_n_rejected(self):
        with pytest.raises(ValueError):
            SamplingMatrix(np.ones((1, 5)), EXTERNAL)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**32), side=st.integers(2, 8), frac=st.floats(0.05, 1.0))
    def test_energy_never_grows(self, seed, side, frac):
        n = side * side
        phi = gen_frgm(max(1, int(frac * n)), n, seed)
        x = np.random.default_rng(seed).standard_normal(n)
        assert np.linalg.norm(phi.data.T @ (phi.data @ x)) <= np.linalg.norm(x) + 1e-10


class TestRowsForRatio:
    @pytest.mark.parametrize("ratio,m", [(0.1, 109), (0.2, 218), (0.3, 327), (0.4, 436), (0.5, 545), (1.0, 1089)])
    def test_standard_row_counts(self, ratio, m):
        assert rows_for_ratio(ratio, 1089) == m

    def test_tiny_ratio_gives_zero(self):
        assert rows_for_ratio(1e-4, 1089) == 0


class TestRpaAugment:
    def test_ns_one_is_base_list(self):
        aug = rpa_augment([(4, 16, 1), (8, 16, 2)], 1, 99)
        assert len(aug) == 2
        assert aug.matrices[0].same_as(gen_frgm(4, 16, 1))
        assert aug.matrices[1].same_as(gen_frgm(8, 16, 2))

    def test_counts(self):
        assert len(rpa_augment([(2, 16, s) for s in range(3)], 5, 0)) == 15
        five = [(rows_for_ratio(r, 16), 16, i) for i, r in enumerate((0.1, 0.2, 0.3, 0.4, 0.5))]
        assert len(rpa_augment(five, 25, 0)) == 125

    def test_group_structure(self):
        aug = rpa_augment([(3, 16, 10), (6, 16, 11)], 4, 7)
        for i, (m, seed) in enumerate([(3, 10), (6, 11)]):
            group = aug.group(i)
            assert len(group) == 4
            assert group[0].same_as(gen_frgm(m, 16, seed))
            assert all(g.data.shape == (m, 16) for g in group)
            assert all(not g.same_as(group[0]) for g in group[1:])
            assert all(g.orthonormality_error() < 1e-10 for g in group)
        assert len(aug.seeds) == 8

    def test_derived_seeds_avoid_bases(self):
        seeds = derived_seeds(5, 50)
        clash = set(seeds[:3])
        again = derived_seeds(5, 50, exclude=clash)
        assert not clash & set(again)
        assert len(set(again)) == 50

    def test_deterministic(self):
        a = rpa_augment([(4, 16, 1)], 3, 42)
        b = rpa_augment([(4, 16, 1)], 3, 42)
        assert all(x.same_as(y) for x, y in zip(a.matrices, b.matrices))

    def test_accepts_loaded_matrices(self):
        ext = SamplingMatrix(np.eye(4)[:2], EXTERNAL)
        aug = rpa_augment([ext], 3, 0)
        assert aug.matrices[0] is ext and len(aug) == 3

    def test_ns_zero_rejected(self):
        with pytest.raises(ValueError):
            rpa_augment([(4, 16, 1)], 0, 0)


class TestMeasure:
    def test_zero_signal(self):
        phi = gen_frgm(4, 16, 0)
        assert np.all(measure(np.zeros((3, 16)), phi).y == 0)

    def test_matvec_oracle(self):
        phi = gen_frgm(5, 16, 2)
        x = np.random.default_rng(0).random((2, 16))
        y = measure(x, phi).y
        oracle = [[sum(phi.data[i, k] * x[b, k] for k in range(16)) for i in range(5)] for b in range(2)]
        np.testing.assert_allclose(y, oracle, atol=1e-12)

    def test_noise_variance(self):
        phi = gen_frgm(1, 1, 0)
        m = measure(np.zeros((100_000, 1)), phi, 0.02, seed=3)
        assert m.noise.var() == pytest.approx(0.02**2, rel=0.05)
        assert m.sigma == 0.02 and m.matrix_id == "phi_1x1_0"

    def test_noise_seeded(self):
        phi = gen_frgm(4, 16, 0)
        x = np.ones((2, 16))
        assert np.array_equal(measure(x, phi, 0.1, 5).y, measure(x, phi, 0.1, 5).y)

    def test_errors(self):
        phi = gen_frgm(4, 16, 0)
        with pytest.raises(ValueError):
            measure(np.zeros((1, 9)), phi)
        with pytest.raises(ValueError):
            measure(np.zeros((1, 16)), phi, -0.1)


class TestMatrixFile:
    def test_round_trip(self, tmp_path):
        phi = gen_frgm(4, 16, 7)
        save_matrix(phi, tmp_path / "p.bin")
        back = load_matrix(tmp_path / "p.bin")
        assert np.array_equal(back.data, phi.data) and back.kind == FRGM and back.seed == 7

    def test_layout(self, tmp_path):
        phi = gen_frgm(2, 4, 9)
        save_matrix(phi, tmp_path / "p.bin")
        raw = (tmp_path / "p.bin").read_bytes()
        assert raw[:8] == b"COASTPHI"
        assert struct.unpack("<IIBQ", raw[8:25]) == (2, 4, 0, 9)
        assert len(raw) == 25 + 8 * 8
        assert np.array_equal(np.frombuffer(raw[25:], "<f8").reshape(2, 4), phi.data)

    def test_hand_assembled_external(self):
        raw = b"COASTPHI" + struct.pack("<IIBQ", 1, 1, 1, 0) + struct.pack("<d", 1.0)
        phi = parse_matrix(raw)
        assert phi.data.tolist() == [[1.0]] and phi.kind == EXTERNAL and phi.seed is None

    def test_external_skips_orthonormality(self):
        raw = b"COASTPHI" + struct.pack("<IIBQ", 1, 4, 1, 0) + struct.pack("<4d", 1, 2, 3, 4)
        assert parse_matrix(raw).kind == EXTERNAL

    def test_bad_magic(self):
        raw = b"XOASTPHI" + struct.pack("<IIBQ", 1, 1, 1, 0) + struct.pack("<d", 1.0)
        with pytest.raises(FormatError, match="magic") as info:
            parse_matrix(raw)
        assert info.value.offset == 0

    def test_truncated_payload(self):
        raw = b"COASTPHI" + struct.pack("<IIBQ", 2, 4, 1, 0) + b"\0" * 20
        with pytest.raises(FormatError, match="truncated") as info:
            parse_matrix(raw)
        assert info.value.offset == len(raw)

    def test_truncated_header(self):
        with pytest.raises(FormatError):
            parse_matrix(b"COASTPHI\x01\x00")

    def test_nan_entry_offset(self):
        raw = b"COASTPHI" + struct.pack("<IIBQ", 1, 4, 1, 0) + struct.pack("<4d", 1, 2, float("nan"), 4)
        with pytest.raises(FormatError) as info:
            parse_matrix(raw)
        assert info.value.offset == 25 + 16

    def test_frgm_flag_checked(self):
        raw = b"COASTPHI" + struct.pack("<IIBQ", 1, 4, 0, 0) + struct.pack("<4d", 1, 2, 3, 4)
        with pytest.raises(FormatError, match="orthonormal"):
            parse_matrix(raw)

    def test_unknown_kind(self):
        raw = b"COASTPHI" + struct.pack("<IIBQ", 1, 1, 5, 0) + struct.pack("<d", 1.0)
        with pytest.raises(FormatError) as info:
            parse_matrix(raw)
        assert info.value.offset == 16
