"""Identity codebooks: maximally separated unit codewords and their decode.

A codebook holds n unit-norm rows in R^d. Codeword indices are 1-based
externally so that 0 can keep meaning background. Generation maximizes the
smallest pairwise Euclidean distance: each step finds the single closest
pair, pushes the two rows apart along their difference (the subgradient of
the max-min objective lives on that pair alone), and renormalizes them.
The step size decays linearly to zero so the configuration settles.

Decoding a feature map takes, per pixel, the codeword with the largest
inner product among those whose inner product clears the threshold; pixels
where no codeword clears it decode to background. Ties take the lowest
index. Since codewords are unit vectors, any pixel holding codeword i at
magnitude m decodes back to i exactly while m stays above the threshold.

The scalar "integer" mode exists only for ablation: codewords are the
plain scalars 1..n, nothing is normalized, and decoding rounds the single
channel to the nearest id. It shares the data path so the ablation is an
apples-to-apples swap, and it degrades under blending by design.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .scene import SegmentFrame

UNIT_NORM_TOL = 1e-6
DECODE_THRESHOLD = 0.5
_MAGIC = b"SMCB"
_VERSION = 1
_FLAG_INTEGER = 1
_HEADER = struct.Struct("<4sHHIIQ")
_DECODE_CHUNK = 65536


@dataclass
class Codebook:
    """n codewords of dimension d, rows of `vectors`."""

    vectors: np.ndarray  # (n, d) float64
    seed: int = 0
    integer_mode: bool = False

    def __post_init__(self) -> None:
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1:
            raise DataError("codebook needs a 2-D (n, d) vector array")
        if not np.isfinite(v).all():
            raise DataError("codebook contains non-finite values")
        self.vectors = v
        self.validate()

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def d_id(self) -> int:
        return self.vectors.shape[1]

    def validate(self) -> None:
        if not self.integer_mode:
            norms = np.linalg.norm(self.vectors, axis=1)
            if np.abs(norms - 1.0).max() > UNIT_NORM_TOL:
                raise DataError("codewords must be unit norm")
        if self.n > 1 and min_pairwise_distance(self.vectors) == 0.0:
            raise DataError("codebook holds duplicate codewords")

    def codeword(self, index: int) -> np.ndarray:
        """The codeword for 1-based index `index`."""
        if not 1 <= index <= self.n:
            raise DataError(f"codeword index {index} outside 1..{self.n}")
        return self.vectors[index - 1]


def min_pairwise_distance(vectors: np.ndarray) -> float:
    v = np.asarray(vectors, dtype=np.float64)
    if v.shape[0] < 2:
        raise DataError("pairwise distance needs at least two vectors")
    d2 = _pairwise_sq_dists(v)
    return float(np.sqrt(max(d2.min(), 0.0)))


def _pairwise_sq_dists(v: np.ndarray) -> np.ndarray:
    sq = np.sum(v * v, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (v @ v.T)
    np.fill_diagonal(d2, np.inf)
    return d2


def generate_codebook(n: int, d_id: int, seed: int,
                      steps: int = 2000,
                      learning_rate: float = 0.1) -> Codebook:
    """Spread n unit codewords in R^d by repulsing the closest pair.

    Deterministic for a given (n, d_id, seed, steps, learning_rate).
    """
    if n < 1:
        raise ConfigError("codebook size must be at least 1")
    if d_id < 1:
        raise ConfigError("codeword dimension must be at least 1")
    if steps < 0 or learning_rate <= 0:
        raise ConfigError("steps must be >= 0 and learning rate positive")
    if d_id == 1:
        # The 0-sphere holds exactly {+1, -1}; no room for more codewords
        # and nothing to optimize.
        if n > 2:
            raise ConfigError(f"cannot fit {n} distinct unit codewords in 1-D")
        v = np.array([[1.0], [-1.0]][:n])
        return Codebook(v, seed=seed)

    rng = np.random.default_rng(seed)
    v = rng.standard_normal((n, d_id))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    if n == 1:
        return Codebook(v, seed=seed)

    for step in range(steps):
        d2 = _pairwise_sq_dists(v)
        flat = int(np.argmin(d2))
        i, j = divmod(flat, n)
        dist = float(np.sqrt(max(d2[i, j], 0.0)))
        if dist < 1e-12:
            # coincident pair: split it along a random direction
            u = rng.standard_normal(d_id)
            u /= np.linalg.norm(u)
        else:
            u = (v[i] - v[j]) / dist
        lr = learning_rate * (1.0 - step / steps)
        v[i] += lr * u
        v[j] -= lr * u
        v[i] /= np.linalg.norm(v[i])
        v[j] /= np.linalg.norm(v[j])

    return Codebook(v, seed=seed)


def integer_codebook(n: int) -> Codebook:
    """Scalar codewords 1..n for the single-channel ablation."""
    if n < 1:
        raise ConfigError("codebook size must be at least 1")
    v = np.arange(1, n + 1, dtype=np.float64)[:, None]
    return Codebook(v, seed=0, integer_mode=True)


def encode(segments: SegmentFrame, book: Codebook,
           assignment: dict[int, int]) -> np.ndarray:
    """Paint each segment's codeword over its mask; background stays zero.

    `assignment` maps nonzero segment ids to 1-based codeword indices.
    """
    ids = segments.ids()
    out = np.zeros(segments.id_map.shape + (book.d_id,), dtype=np.float64)
    for sid in ids:
        sid = int(sid)
        if sid not in assignment:
            raise DataError(f"segment id {sid} has no codeword assignment")
        out[segments.id_map == sid] = book.codeword(assignment[sid])
    return out


def decode(feature_map: np.ndarray, book: Codebook,
           threshold: float = DECODE_THRESHOLD,
           frame_index: int = 1) -> SegmentFrame:
    """Per-pixel nearest codeword by inner product, gated by `threshold`."""
    f = np.asarray(feature_map, dtype=np.float64)
    if f.ndim != 3 or f.shape[2] != book.d_id:
        raise DataError(f"feature map shape {f.shape} does not match "
                        f"codeword dimension {book.d_id}")
    h, w, d = f.shape

    if book.integer_mode:
        v = np.rint(f[:, :, 0]).astype(np.int32)
        v[(v < 1) | (v > book.n)] = 0
        return SegmentFrame(v, frame_index)

    flat = f.reshape(-1, d)
    ids = np.zeros(flat.shape[0], dtype=np.int32)
    for start in range(0, flat.shape[0], _DECODE_CHUNK):
        chunk = flat[start:start + _DECODE_CHUNK]
        scores = chunk @ book.vectors.T
        best = np.argmax(scores, axis=1)
        accept = scores[np.arange(chunk.shape[0]), best] > threshold
        ids[start:start + _DECODE_CHUNK] = np.where(accept, best + 1, 0)
    return SegmentFrame(ids.reshape(h, w), frame_index)


def save_codebook(path: Path, book: Codebook) -> None:
    flags = _FLAG_INTEGER if book.integer_mode else 0
    header = _HEADER.pack(_MAGIC, _VERSION, flags, book.n, book.d_id,
                          book.seed & 0xFFFFFFFFFFFFFFFF)
    data = book.vectors.astype("<f4").tobytes(order="C")
    Path(path).write_bytes(header + data)


def load_codebook(path: Path) -> Codebook:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"codebook file {path} does not exist")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"codebook file {path} is truncated")
    magic, version, flags, n, d, seed = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise DataError(f"{path} is not a codebook file (bad magic)")
    if version != _VERSION:
        raise DataError(f"codebook file version {version} is not supported")
    expected = _HEADER.size + 4 * n * d
    if len(raw) != expected:
        raise DataError(f"codebook file {path} has {len(raw)} bytes, "
                        f"expected {expected}")
    v = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).astype(np.float64)
    v = v.reshape(n, d)
    integer_mode = bool(flags & _FLAG_INTEGER)
    if not integer_mode:
        # float32 storage perturbs norms; snap back to the unit sphere
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        if np.abs(norms - 1.0).max() > 1e-3:
            raise DataError(f"codebook file {path} holds non-unit codewords")
        v = v / norms
    return Codebook(v, seed=seed, integer_mode=integer_mode)
