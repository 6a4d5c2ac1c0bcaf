"""Sampling matrices: generation, random projection augmentation, measurement, file I/O."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FRGM = "FRGM"
EXTERNAL = "EXTERNAL"
_KIND_CODES = {FRGM: 0, EXTERNAL: 1}

MAGIC = b"COASTPHI"
HEADER = struct.Struct("<8sIIBQ")  # magic, M, N, kind, seed
ORTHO_TOL = 1e-10


class FormatError(ValueError):
    """Malformed matrix file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True, eq=False)
class SamplingMatrix:
    data: np.ndarray
    kind: str = FRGM
    seed: int | None = None

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True, order="C")
        if data.ndim != 2:
            raise ValueError(f"sampling matrix must be 2-d, got shape {data.shape}")
        m, n = data.shape
        if not 0 < m <= n:
            raise ValueError(f"need 0 < M <= N, got M={m}, N={n}")
        side = math.isqrt(n)
        if side * side != n:
            raise ValueError(f"N={n} is not a perfect square")
        if self.kind not in _KIND_CODES:
            raise ValueError(f"unknown matrix kind {self.kind!r}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def patch_side(self) -> int:
        return math.isqrt(self.cols)

    @property
    def ratio(self) -> float:
        return self.rows / self.cols

    @property
    def ident(self) -> str:
        seed = "ext" if self.seed is None else str(self.seed)
        return f"phi_{self.rows}x{self.cols}_{seed}"

    def orthonormality_error(self) -> float:
        gram = self.data @ self.data.T
        return float(np.abs(gram - np.eye(self.rows)).max())

    def same_as(self, other: "SamplingMatrix") -> bool:
        return self.data.shape == other.data.shape and np.array_equal(self.data, other.data)


def gen_frgm(m: int, n: int, seed: int) -> SamplingMatrix:
    """Gaussian matrix with orthonormalised rows, a pure function of (m, n, seed).

    Rows are drawn i.i.d. N(0, 1) and orthonormalised by a QR factorisation of
    the transpose.  Each row is then sign-flipped so that its first non-zero
    entry is positive.
    """
    if m > n:
        raise ValueError(f"cannot orthonormalise {m} rows of length {n}: M must not exceed N")
    if m < 1:
        raise ValueError(f"M must be at least 1, got {m}")
    gauss = np.random.default_rng(seed).standard_normal((m, n))
    q, _ = np.linalg.qr(gauss.T, mode="reduced")
    phi = q.T
    first = np.argmax(phi != 0.0, axis=1)
    signs = np.sign(phi[np.arange(m), first])
    phi = phi * signs[:, None]
    return SamplingMatrix(phi, FRGM, int(seed))


@dataclass
class AugmentedSet:
    matrices: list[SamplingMatrix]
    base_count: int
    per_base: int

    def __len__(self) -> int:
        return len(self.matrices)

    def group(self, i: int) -> list[SamplingMatrix]:
        return self.matrices[i * self.per_base : (i + 1) * self.per_base]

    @property
    def bases(self) -> list[SamplingMatrix]:
        return [self.matrices[i * self.per_base] for i in range(self.base_count)]

    @property
    def seeds(self) -> set[int]:
        return {p.seed for p in self.matrices if p.seed is not None}


def derived_seeds(master_seed: int, count: int, exclude=()) -> list[int]:
    """``count`` distinct 63-bit seeds drawn from ``master_seed``, skipping ``exclude``."""
    rng = np.random.default_rng(master_seed)
    taken = set(exclude)
    out: list[int] = []
    while len(out) < count:
        s = int(rng.integers(0, 2**63 - 1))
        if s in taken:
            continue
        taken.add(s)
        out.append(s)
    return out


def rpa_augment(bases, n_s: int, master_seed: int) -> AugmentedSet:
    """Expand each ``(M, N, base_seed)`` into itself plus ``n_s - 1`` fresh FRGMs.

    ``bases`` may also hold ready-made :class:`SamplingMatrix` objects (for
    instance externally learned ones); their augmentations are FRGMs of the
    same shape.
    """
    if n_s < 1:
        raise ValueError(f"N_S must be at least 1, got {n_s}")
    base_mats = [b if isinstance(b, SamplingMatrix) else gen_frgm(b[0], b[1], b[2]) for b in bases]
    base_seeds = {b.seed for b in base_mats if b.seed is not None}
    seeds = iter(derived_seeds(master_seed, len(base_mats) * (n_s - 1), exclude=base_seeds))
    out: list[SamplingMatrix] = []
    for base in base_mats:
        out.append(base)
        for _ in range(n_s - 1):
            extra = gen_frgm(base.rows, base.cols, next(seeds))
            while extra.same_as(base):  # unreachable in practice, guarded anyway
                extra = gen_frgm(base.rows, base.cols, extra.seed + 1)
            out.append(extra)
    return AugmentedSet(out, len(base_mats), n_s)


@dataclass
class Measurement:
    y: np.ndarray  # B x M
    sigma: float
    matrix_id: str
    noise: np.ndarray | None = field(default=None, repr=False)


def measure(x: np.ndarray, phi: SamplingMatrix, sigma: float = 0.0, seed=None) -> Measurement:
    """``y_i = phi (x_i + n_i)`` for every row ``x_i`` of the patch batch ``x``.

    ``x`` is ``B x N`` (or anything with a ``patches`` attribute of that
    shape).  ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    patches = getattr(x, "patches", x)
    patches = np.atleast_2d(np.asarray(patches, dtype=np.float64))
    if patches.shape[1] != phi.cols:
        raise ValueError(f"patch dimension N={patches.shape[1]} does not match sampling matrix N={phi.cols}")
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    noise = None
    if sigma > 0:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        noise = sigma * rng.standard_normal(patches.shape)
        patches = patches + noise
    return Measurement(patches @ phi.data.T, float(sigma), phi.ident, noise)


def save_matrix(phi: SamplingMatrix, path) -> None:
    header = HEADER.pack(MAGIC, phi.rows, phi.cols, _KIND_CODES[phi.kind], 0 if phi.seed is None else phi.seed)
    payload = phi.data.astype("<f8").tobytes(order="C")
    Path(path).write_bytes(header + payload)


def load_matrix(path) -> SamplingMatrix:
    raw = Path(path).read_bytes()
    return parse_matrix(raw)


def parse_matrix(raw: bytes) -> SamplingMatrix:
    if len(raw) < len(MAGIC) or raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"bad magic {raw[:8]!r}, expected {MAGIC!r}", 0)
    if len(raw) < HEADER.size:
        raise FormatError("truncated header", len(raw))
    _, m, n, kind_code, seed = HEADER.unpack_from(raw)
    kinds = {v: k for k, v in _KIND_CODES.items()}
    if kind_code not in kinds:
        raise FormatError(f"unknown kind code {kind_code}", 16)
    if m == 0 or n == 0 or m > n:
        raise FormatError(f"invalid dimensions M={m}, N={n}", 8)
    expected = HEADER.size + 8 * m * n
    if len(raw) < expected:
        raise FormatError(f"truncated payload: need {expected} bytes, file has {len(raw)}", len(raw))
    if len(raw) > expected:
        raise FormatError(f"{len(raw) - expected} trailing bytes after payload", expected)
    data = np.frombuffer(raw, dtype="<f8", count=m * n, offset=HEADER.size).astype(np.float64)
    bad = np.flatnonzero(~np.isfinite(data))
    if bad.size:
        raise FormatError("non-finite matrix entry", HEADER.size + 8 * int(bad[0]))
    kind = kinds[kind_code]
    try:
        phi = SamplingMatrix(data.reshape(m, n), kind, seed if kind == FRGM else (seed or None))
    except ValueError as exc:
        raise FormatError(str(exc), 8) from exc
    if kind == FRGM:
        err = phi.orthonormality_error()
        if err >= ORTHO_TOL:
            raise FormatError(f"FRGM rows are not orthonormal (max deviation {err:.3g})", HEADER.size)
    return phi


def rows_for_ratio(ratio: float, n: int) -> int:
    """Measurement count ``round(ratio * n)`` with halves rounded up (0.5 * 1089 -> 545)."""
    return int(math.floor(ratio * n + 0.5))
