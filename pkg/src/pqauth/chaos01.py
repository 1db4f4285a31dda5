"""Translation variables of the 0-1 test and their binary (p,q)-plane rasters.

The driven planar trajectory (p_n, q_n) of a scalar sequence is the
biometric feature here: consecutive points are joined with Bresenham
segments into a strict {0,1} image, three segments giving the three
channels of one pattern.  The K statistic (correlation of mean-square
displacement against time) is kept as a validation instrument for the
trajectory code, not as a feature.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import FormatError, InsufficientDataError, ParameterError, ShapeError
from .signal import SEGMENT_LEN, Segment

IMAGE_SIZE = 299  # canonical raster edge; reduced configs may use a smaller edge
DEFAULT_C = 1.7
C_INTERVAL = (np.pi / 5.0, 4.0 * np.pi / 5.0)  # resonance-avoiding band
MARGIN_FRACTION = 0.05  # of the trajectory extent, per side

PQI_MAGIC = b"PQI1"


@dataclass(frozen=True)
class PqParams:
    """Rotation parameters of the planar extension."""

    c: float = DEFAULT_C
    alpha: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.c < 2.0 * np.pi):
            raise ParameterError(f"c must lie in [0, 2*pi), got {self.c}")


@dataclass(frozen=True)
class PqTrajectory:
    """Translation-variable trajectory of one scalar sequence."""

    p: np.ndarray
    q: np.ndarray
    phi: np.ndarray
    params: PqParams

    def __len__(self) -> int:
        return self.p.size


def translation_vars(s: Sequence[float], params: PqParams) -> PqTrajectory:
    """Compute the translation variables of `s`.

    With alpha = 0 the closed cumulative-sum form is used
    (p_n = sum_{k<=n} s_k cos(kc), likewise q with sin, phi_n = c*n);
    otherwise the step recurrence with the rotation increment c + alpha*s_n
    is unrolled.  Both start from p_0 = q_0 = phi_0 = 0 and agree when
    alpha = 0.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1 or s.size < 2:
        raise InsufficientDataError(f"need at least 2 observations, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ParameterError("input sequence contains NaN or Inf")
    k = np.arange(1, s.size + 1, dtype=np.float64)
    if params.alpha == 0.0:
        phi = params.c * k
    else:
        phi = params.c * k + params.alpha * np.cumsum(s)
    p = np.cumsum(s * np.cos(phi))
    q = np.cumsum(s * np.sin(phi))
    return PqTrajectory(p=p, q=q, phi=phi, params=params)


def translation_vars_stepwise(s: Sequence[float], params: PqParams) -> PqTrajectory:
    """Reference per-sample unrolling of the recurrence form.

    Kept as the second route of the dual computation: the vectorized
    :func:`translation_vars` must reproduce it.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1 or s.size < 2:
        raise InsufficientDataError(f"need at least 2 observations, got shape {s.shape}")
    n = s.size
    p = np.empty(n)
    q = np.empty(n)
    phi = np.empty(n)
    p_acc = q_acc = alpha_acc = 0.0
    for i in range(n):
        # phi advances by c + alpha*s each step; the angle is reconstituted
        # from the step index so long sequences do not accumulate rounding.
        alpha_acc += s[i]
        phi_i = params.c * (i + 1) + params.alpha * alpha_acc
        p_acc += s[i] * np.cos(phi_i)
        q_acc += s[i] * np.sin(phi_i)
        p[i] = p_acc
        q[i] = q_acc
        phi[i] = phi_i
    return PqTrajectory(p=p, q=q, phi=phi, params=params)


def default_c(channel_index: int, c_values: Sequence[float] | None = None) -> float:
    """The rotation parameter used for one image channel.

    Defaults to a single fixed value for every channel; a configured sweep
    (see :func:`c_sweep`) assigns one value per channel instead.
    """
    if channel_index < 0:
        raise ParameterError(f"channel_index must be >= 0, got {channel_index}")
    if c_values is None:
        return DEFAULT_C
    if len(c_values) == 0:
        raise ParameterError("configured c sweep is empty")
    return float(c_values[channel_index % len(c_values)])


def c_sweep(n: int) -> np.ndarray:
    """`n` distinct rotation parameters evenly placed inside the safe band."""
    if n < 1:
        raise ParameterError(f"sweep size must be >= 1, got {n}")
    lo, hi = C_INTERVAL
    return np.linspace(lo, hi, n + 2)[1:-1]


def _bresenham_into(image: np.ndarray, r0: int, c0: int, r1: int, c1: int) -> None:
    """Mark every pixel of the integer segment (r0,c0)-(r1,c1), endpoints included."""
    dr = abs(r1 - r0)
    dc = abs(c1 - c0)
    sr = 1 if r0 < r1 else -1
    sc = 1 if c0 < c1 else -1
    err = dc - dr
    r, c = r0, c0
    while True:
        image[r, c] = 1
        if r == r1 and c == c1:
            return
        e2 = 2 * err
        if e2 > -dr:
            err -= dr
            c += sc
        if e2 < dc:
            err += dc
            r += sr


def trajectory_pixels(traj: PqTrajectory, size: int = IMAGE_SIZE) -> tuple[np.ndarray, np.ndarray]:
    """Integer pixel coordinates (rows, cols) of the trajectory points.

    The bounding box of (p,q) is widened by a 5% margin per side and mapped
    with one aspect-preserving scale, centered in the image; q grows upward.
    """
    if size < 3:
        raise ParameterError(f"image size must be >= 3, got {size}")
    p, q = traj.p, traj.q
    if p.size == 0:
        raise InsufficientDataError("empty trajectory")
    p_min, p_max = float(p.min()), float(p.max())
    q_min, q_max = float(q.min()), float(q.max())
    ext = max((p_max - p_min) * (1 + 2 * MARGIN_FRACTION),
              (q_max - q_min) * (1 + 2 * MARGIN_FRACTION))
    center = (size - 1) / 2.0
    if ext == 0.0:
        rows = np.full(p.shape, int(round(center)), dtype=np.int64)
        cols = rows.copy()
        return rows, cols
    scale = (size - 1) / ext
    x = center + (p - (p_min + p_max) / 2.0) * scale
    y = center + (q - (q_min + q_max) / 2.0) * scale
    cols = np.rint(x).astype(np.int64)
    rows = (size - 1) - np.rint(y).astype(np.int64)
    return rows, cols


def rasterize(traj: PqTrajectory, size: int = IMAGE_SIZE) -> np.ndarray:
    """Draw the trajectory as a (size, size) binary image.

    Consecutive points are connected with Bresenham segments; a degenerate
    (single-point) extent yields exactly one centered pixel.
    """
    rows, cols = trajectory_pixels(traj, size)
    image = np.zeros((size, size), dtype=np.uint8)
    if rows.size == 1:
        image[rows[0], cols[0]] = 1
        return image
    for i in range(rows.size - 1):
        _bresenham_into(image, int(rows[i]), int(cols[i]), int(rows[i + 1]), int(cols[i + 1]))
    return image


@dataclass(frozen=True)
class FeatureImage:
    """Three-channel binary (p,q) pattern plus its provenance."""

    pixels: np.ndarray  # (H, W, 3) uint8, strictly {0, 1}
    subject_id: str
    segment_starts: tuple[int, int, int]
    c: tuple[float, float, float]

    def __post_init__(self):
        pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        object.__setattr__(self, "pixels", pixels)
        if pixels.ndim != 3 or pixels.shape[0] != pixels.shape[1] or pixels.shape[2] != 3:
            raise ShapeError(f"feature image must be (N, N, 3), got {pixels.shape}")
        if pixels.max(initial=0) > 1:
            raise ShapeError("feature image values must be binary {0, 1}")

    @property
    def size(self) -> int:
        return self.pixels.shape[0]


def featurize(
    segments: Sequence[Segment],
    params: Union[PqParams, Sequence[PqParams]],
    size: int = IMAGE_SIZE,
) -> FeatureImage:
    """Build the 3-channel pattern of three 1000-point segments.

    Channel i is the raster of segment i under its per-channel rotation
    parameter.  Deterministic: identical inputs give bit-identical images.
    """
    if len(segments) != 3:
        raise ShapeError(f"expected exactly 3 segments, got {len(segments)}")
    for seg in segments:
        if seg.samples.size != SEGMENT_LEN:
            raise ShapeError(
                f"segment at {seg.start_index} has {seg.samples.size} samples, expected {SEGMENT_LEN}"
            )
    if len({seg.subject_id for seg in segments}) != 1:
        raise ParameterError("all three segments must come from the same subject")
    if isinstance(params, PqParams):
        params = [params] * 3
    if len(params) != 3:
        raise ShapeError(f"expected one PqParams per channel, got {len(params)}")
    channels = [rasterize(translation_vars(seg.samples, prm), size) for seg, prm in zip(segments, params)]
    return FeatureImage(
        pixels=np.stack(channels, axis=-1),
        subject_id=segments[0].subject_id,
        segment_starts=tuple(int(seg.start_index) for seg in segments),
        c=tuple(float(prm.c) for prm in params),
    )


@dataclass(frozen=True)
class KResult:
    """K statistic per rotation parameter plus the median over the set."""

    c_values: np.ndarray
    k_values: np.ndarray
    k_median: float


def compute_k(s: Sequence[float], c_values: Sequence[float]) -> KResult:
    """Growth indicator of the (p,q) displacement for each c.

    For each c the mean-square displacement of (p,q) over lags n <= N/10 is
    computed, the bounded oscillatory term proportional to the squared
    signal mean is removed, and K is the linear correlation of the result
    with the lag.  Zero displacement returns K = 0 by convention.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.size < 1000:
        raise InsufficientDataError(f"need at least 1000 observations, got {s.size}")
    c_values = np.asarray(c_values, dtype=np.float64)
    if c_values.size == 0:
        raise ParameterError("c_values must be non-empty")
    n_cut = s.size // 10
    lags = np.arange(1, n_cut + 1)
    mean_s = s.mean()
    k_values = np.empty(c_values.size)
    for i, c in enumerate(c_values):
        traj = translation_vars(s, PqParams(c=float(c) % (2 * np.pi)))
        p, q = traj.p, traj.q
        msd = np.empty(n_cut)
        for j in range(1, n_cut + 1):
            dp = p[j:] - p[:-j]
            dq = q[j:] - q[:-j]
            msd[j - 1] = np.mean(dp * dp + dq * dq)
        osc = mean_s**2 * (1.0 - np.cos(lags * c)) / (1.0 - np.cos(c))
        d = msd - osc
        spread = d.std()
        if spread == 0.0 or not np.isfinite(spread):
            k_values[i] = 0.0
        else:
            k_values[i] = np.corrcoef(lags, d)[0, 1]
    return KResult(c_values=c_values, k_values=k_values, k_median=float(np.median(k_values)))


def write_pqi(image: FeatureImage, path: Union[str, Path]) -> None:
    """Canonical binary dump: magic, u16 width/height/channels, row-major bytes."""
    h, w, ch = image.pixels.shape
    with Path(path).open("wb") as fh:
        fh.write(PQI_MAGIC)
        fh.write(struct.pack("<HHH", w, h, ch))
        fh.write(image.pixels.tobytes())


def read_pqi_pixels(path: Union[str, Path]) -> np.ndarray:
    """Read the canonical binary dump back into a (H, W, C) uint8 array."""
    raw = Path(path).read_bytes()
    return parse_pqi(raw)


def parse_pqi(raw: bytes, base_offset: int = 0) -> np.ndarray:
    """Decode a PQI block from bytes; offsets in errors are absolute."""
    if len(raw) < 10:
        raise FormatError("block too short for PQI header", offset=base_offset + len(raw))
    if raw[:4] != PQI_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {PQI_MAGIC!r}", offset=base_offset)
    w, h, ch = struct.unpack_from("<HHH", raw, 4)
    expected = 10 + w * h * ch
    if len(raw) < expected:
        raise FormatError(
            f"truncated pixel block: expected {expected} bytes, got {len(raw)}",
            offset=base_offset + len(raw),
        )
    pixels = np.frombuffer(raw, dtype=np.uint8, count=w * h * ch, offset=10)
    pixels = pixels.reshape(h, w, ch)
    if pixels.max(initial=0) > 1:
        raise FormatError("pixel values outside {0, 1}", offset=base_offset + 10)
    return pixels.copy()


def pqi_block_size(raw: bytes, base_offset: int = 0) -> int:
    """Byte length of the PQI block starting at the head of `raw`."""
    if len(raw) < 10:
        raise FormatError("block too short for PQI header", offset=base_offset + len(raw))
    w, h, ch = struct.unpack_from("<HHH", raw, 4)
    return 10 + w * h * ch


def write_pgm_channels(image: FeatureImage, stem: Union[str, Path]) -> list[Path]:
    """Write one P5 PGM per channel (value 1 scaled to 255) for inspection."""
    stem = Path(stem)
    paths = []
    for ch in range(image.pixels.shape[2]):
        path = stem.with_name(f"{stem.name}.c{ch}.pgm")
        plane = (image.pixels[:, :, ch] * 255).astype(np.uint8)
        with path.open("wb") as fh:
            fh.write(f"P5\n{plane.shape[1]} {plane.shape[0]}\n255\n".encode("ascii"))
            fh.write(plane.tobytes())
        paths.append(path)
    return paths
