"""Synthetic banded chromosomes and analytically invertible bends.

A straight chromosome is a vertical bar whose intensity follows a 1-D band
template along its axis.  Bending moves every axial station sideways along a
smooth curve while carrying its cross-section rigidly along the local normal,
so the medial axis keeps its arc length.  The backward flow from the straight
frame into the bent frame is available in closed form, which makes every
generated pair a ground-truth straightening example.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.interpolate import CubicSpline
from scipy.spatial import cKDTree

from . import fileio
from .errors import ConfigurationError, DatasetError, DegenerateBendError

IMAGE_SIZE = 256
MARGIN = 8
_AXIS_STEP = 0.125  # binary-exact sampling step of the dense axis polyline


def derive_seed(root: int, purpose: str) -> int:
    """Split a root seed into an independent per-purpose seed."""
    ss = np.random.SeedSequence([int(root) & 0xFFFFFFFF, zlib.crc32(purpose.encode())])
    return int(ss.generate_state(1)[0])


@dataclass(frozen=True)
class BandingProfile:
    band_intensities: tuple[float, ...]
    band_widths: tuple[int, ...]
    chromosome_length: int
    chromosome_width: int
    blur_sigma: float = 1.2
    interband_intensity: float = 0.25
    texture_noise: float = 0.0

    @property
    def num_bands(self) -> int:
        return len(self.band_intensities)

    def validate(self, size: int = IMAGE_SIZE) -> None:
        if self.num_bands < 1:
            raise ConfigurationError("num_bands must be >= 1")
        if len(self.band_widths) != self.num_bands:
            raise ConfigurationError("band_widths and band_intensities differ in length")
        if any(w < 1 for w in self.band_widths):
            raise ConfigurationError("band widths must be positive")
        if sum(self.band_widths) > self.chromosome_length:
            raise ConfigurationError("sum of band_widths exceeds chromosome_length")
        values = (*self.band_intensities, self.interband_intensity)
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise ConfigurationError("intensities must lie in [0, 1]")
        limit = size - 2 * MARGIN
        if not 1 <= self.chromosome_length <= limit or not 1 <= self.chromosome_width <= limit:
            raise ConfigurationError(
                f"chromosome {self.chromosome_length}x{self.chromosome_width} does not fit "
                f"a {size}x{size} field with {MARGIN} px margin"
            )
        if self.blur_sigma < 0 or self.texture_noise < 0:
            raise ConfigurationError("blur_sigma and texture_noise must be non-negative")


@dataclass(frozen=True)
class BendSpec:
    """Lateral offsets (px) at evenly spaced axial stations."""

    control_offsets: tuple[float, ...]
    interpolation: int = 3

    def validate(self) -> None:
        if len(self.control_offsets) < 1:
            raise ConfigurationError("at least one control offset is required")
        if self.interpolation not in (1, 3):
            raise ConfigurationError("interpolation must be 1 or 3")
        if not np.all(np.isfinite(self.control_offsets)):
            raise ConfigurationError("control offsets must be finite")

    def lateral(self, top: float, bottom: float):
        """Return callables (f, f') giving the lateral offset along rows [top, bottom]."""
        offsets = np.asarray(self.control_offsets, dtype=np.float64)
        n = len(offsets)
        if n == 1 or bottom <= top:
            return (lambda t: np.full_like(np.asarray(t, float), offsets[0]),
                    lambda t: np.zeros_like(np.asarray(t, float)))
        stations = np.linspace(top, bottom, n)
        if self.interpolation == 3 and n >= 3:
            spline = CubicSpline(stations, offsets, bc_type="natural")
            return spline, spline.derivative()
        slopes = np.diff(offsets) / np.diff(stations)

        def f(t):
            return np.interp(t, stations, offsets)

        def fprime(t):
            idx = np.clip(np.searchsorted(stations, t, side="right") - 1, 0, n - 2)
            return slopes[idx]

        return f, fprime

    def max_curvature(self, length: float) -> float:
        """Largest |curvature| (1/px) of the axis over a chromosome of the given length."""
        axis = _BentAxis(self, 0.0, float(length), 0.0, extension=0.0)
        inside = (axis.s >= 0) & (axis.s <= length)
        return float(np.max(np.abs(axis.curvature[inside]))) if inside.any() else 0.0


@dataclass
class ImagePair:
    pair_id: str
    source: np.ndarray      # bent
    driving: np.ndarray     # straight
    gt_flow: np.ndarray     # (H, W, 2) pixel displacement (dx, dy) on the driving grid
    type_label: int
    split: str = "train"


def band_template(profile: BandingProfile) -> np.ndarray:
    """1-D intensity along the axis: bright bands separated by equal interband gaps."""
    length = profile.chromosome_length
    template = np.full(length, profile.interband_intensity, dtype=np.float64)
    gap = (length - sum(profile.band_widths)) / (profile.num_bands + 1)
    pos = gap
    for value, width in zip(profile.band_intensities, profile.band_widths):
        start = int(round(pos))
        template[start:start + width] = value
        pos += width + gap
    return template


def gen_straight(profile: BandingProfile, seed: int, size: int = IMAGE_SIZE) -> np.ndarray:
    """Render a vertical chromosome centred in a ``size`` x ``size`` field."""
    profile.validate(size)
    length, width = profile.chromosome_length, profile.chromosome_width
    top, left = (size - length) // 2, (size - width) // 2
    body = np.repeat(band_template(profile)[:, None], width, axis=1)
    if profile.texture_noise > 0:
        rng = np.random.default_rng(seed)
        noise = ndimage.gaussian_filter(rng.standard_normal((length, width)), 1.0)
        noise /= noise.std() + 1e-12
        body = np.clip(body + profile.texture_noise * noise, 0.0, 1.0)
    image = np.zeros((size, size), dtype=np.float64)
    image[top:top + length, left:left + width] = body
    if profile.blur_sigma > 0:
        image = ndimage.gaussian_filter(image, profile.blur_sigma, mode="constant")
    return np.clip(image, 0.0, 1.0)


class _BentAxis:
    """Dense arc-length parametrisation of the bent medial axis.

    Rows ``t`` carry lateral offset ``f(t)``; outside [top, bottom] the axis
    continues along its end tangents so every pixel has a well-defined foot point.
    """

    def __init__(self, spec: BendSpec, top: float, bottom: float, axis_col: float,
                 extension: float = IMAGE_SIZE):
        f, fprime = spec.lateral(top, bottom)
        t = top + _AXIS_STEP * np.arange(
            -int(extension / _AXIS_STEP), int((bottom - top + extension) / _AXIS_STEP) + 1)
        inner = np.clip(t, top, bottom)
        slope = np.asarray(fprime(inner), dtype=np.float64)
        col = np.asarray(f(inner), dtype=np.float64) + slope * (t - inner)
        if spec.interpolation == 3 and len(spec.control_offsets) >= 3:
            second = np.asarray(fprime.derivative()(inner), dtype=np.float64)
            second[(t < top) | (t > bottom)] = 0.0
        else:
            second = np.zeros_like(t)
        arc = np.concatenate([[0.0], np.cumsum(np.hypot(np.diff(t), np.diff(col)))])
        arc -= arc[np.searchsorted(t, top)]
        self.s = arc
        self.rows = t
        self.cols = axis_col + col
        self.slope = slope
        self.curvature = second / (1.0 + slope ** 2) ** 1.5
        self._tree = None

    def frame(self, s):
        """Axis point (row, col) and unit normal (row, col) at arc length ``s``."""
        row = np.interp(s, self.s, self.rows)
        col = np.interp(s, self.s, self.cols)
        slope = np.interp(s, self.s, self.slope)
        norm = np.sqrt(1.0 + slope ** 2)
        return row, col, -slope / norm, 1.0 / norm

    def forward(self, s, n):
        """Bent-frame position of the straight-frame point (arc length s, normal offset n)."""
        row, col, nr, nc = self.frame(s)
        return row + n * nr, col + n * nc

    def inverse(self, rows, cols):
        """Arc length, normal offset and distance to the axis for bent-frame points."""
        if self._tree is None:
            self._tree = cKDTree(np.column_stack([self.rows, self.cols]))
        pts = np.column_stack([np.ravel(rows), np.ravel(cols)])
        dist, idx = self._tree.query(pts)
        slope = self.slope[idx]
        norm = np.sqrt(1.0 + slope ** 2)
        s = self.s[idx] + ((pts[:, 0] - self.rows[idx]) + (pts[:, 1] - self.cols[idx]) * slope) / norm
        row, col, nr, nc = self.frame(s)
        n = (pts[:, 0] - row) * nr + (pts[:, 1] - col) * nc
        return s, n, dist


def bend(straight: np.ndarray, spec: BendSpec) -> tuple[np.ndarray, np.ndarray]:
    """Bend a vertical chromosome.

    Returns the bent image and the backward flow on the straight grid: the
    pixel displacement (dx, dy) that, added to a straight-frame pixel, lands on
    the bent-frame position of the same material point.  Warping the bent image
    with this flow therefore reproduces the straight image.
    """
    spec.validate()
    straight = np.asarray(straight, dtype=np.float64)
    size_r, size_c = straight.shape
    mask = straight > 0
    if not mask.any():
        raise ConfigurationError("straight image has no foreground")
    rows, cols = np.nonzero(mask)
    top, bottom = float(rows.min()), float(rows.max())
    axis_col = (cols.min() + cols.max()) / 2.0
    if not np.any(spec.control_offsets):
        return straight.copy(), np.zeros((size_r, size_c, 2), dtype=np.float32)

    axis = _BentAxis(spec, top, bottom, axis_col)
    arc = np.arange(0.0, bottom - top + 1.0)
    a_row, a_col, _, _ = axis.frame(arc)
    if (a_row.min() < 0 or a_col.min() < 0 or a_row.max() > size_r - 1
            or a_col.max() > size_c - 1):
        raise DegenerateBendError("bent medial axis leaves the image")

    yy, xx = np.mgrid[0:size_r, 0:size_c].astype(np.float64)
    pos_r, pos_c = axis.forward(yy - top, xx - axis_col)

    dr_dy, dr_dx = np.gradient(pos_r)
    dc_dy, dc_dx = np.gradient(pos_c)
    jac = dr_dy * dc_dx - dr_dx * dc_dy
    if np.any(jac[mask] <= 0):
        raise DegenerateBendError("bend folds the chromosome (non-positive Jacobian)")
    fr, fc = pos_r[mask], pos_c[mask]
    if fr.min() < 0 or fc.min() < 0 or fr.max() > size_r - 1 or fc.max() > size_c - 1:
        raise DegenerateBendError("bent chromosome leaves the image")
    back_s, back_n, _ = axis.inverse(fr, fc)
    err = np.hypot(back_s - (yy[mask] - top), back_n - (xx[mask] - axis_col))
    if err.max() > 0.5:
        raise DegenerateBendError("bend maps distinct chromosome points onto each other")

    half_width = (cols.max() - cols.min()) / 2.0 + 2.0
    s, n, dist = axis.inverse(yy, xx)
    near = dist <= half_width
    bent = np.zeros(size_r * size_c, dtype=np.float64)
    bent[near] = ndimage.map_coordinates(
        straight, [top + s[near], axis_col + n[near]], order=1, mode="constant", cval=0.0)
    flow = np.stack([pos_c - xx, pos_r - yy], axis=-1).astype(np.float32)
    return np.clip(bent.reshape(size_r, size_c), 0.0, 1.0), flow


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 40
    n_test: int = 35
    n_pool: int = 70
    num_types: int = 7
    seed: int | None = None
    image_size: int = IMAGE_SIZE
    bend_amplitude: tuple[float, float] = (0.08, 0.2)
    n_stations: int = 4
    texture_noise: float = 0.02
    blur_sigma: float = 1.2

    def validate(self) -> None:
        if min(self.n_train, self.n_test, self.n_pool) < 0:
            raise ConfigurationError("dataset sizes must be non-negative")
        if self.num_types < 1:
            raise ConfigurationError("num_types must be >= 1")
        lo, hi = self.bend_amplitude
        if not 0 <= lo <= hi:
            raise ConfigurationError("bend_amplitude must satisfy 0 <= low <= high")
        if self.n_stations < 2:
            raise ConfigurationError("n_stations must be >= 2")


def type_templates(num_types: int, seed: int, size: int = IMAGE_SIZE) -> list[BandingProfile]:
    """One nominal banding profile per synthetic chromosome type."""
    rng = np.random.default_rng(derive_seed(seed, "types"))
    scale = size / IMAGE_SIZE
    lengths = np.linspace(105, 185, num_types) if num_types > 1 else np.array([150.0])
    lengths = lengths[rng.permutation(num_types)]
    out = []
    for k in range(num_types):
        length = int(round(lengths[k] * scale))
        n_bands = int(rng.integers(3, 8))
        fracs = rng.dirichlet(np.full(n_bands, 4.0)) * rng.uniform(0.45, 0.65)
        widths = tuple(max(2, int(w)) for w in np.floor(fracs * length))
        out.append(BandingProfile(
            band_intensities=tuple(float(v) for v in rng.uniform(0.6, 1.0, n_bands)),
            band_widths=widths,
            chromosome_length=length,
            chromosome_width=int(round(rng.uniform(18, 28) * scale)),
            interband_intensity=float(rng.uniform(0.2, 0.35)),
        ))
    return out


def sample_profile(template: BandingProfile, rng: np.random.Generator,
                   config: DataConfig) -> BandingProfile:
    """Jitter a type template into one chromosome instance."""
    factor = rng.uniform(0.94, 1.06)
    length = int(round(template.chromosome_length * factor))
    widths = tuple(max(1, int(round(w * factor))) for w in template.band_widths)
    while sum(widths) > length:
        widths = tuple(max(1, w - 1) for w in widths)
    intens = np.clip(np.asarray(template.band_intensities) + rng.uniform(-0.04, 0.04, len(widths)), 0, 1)
    return BandingProfile(
        band_intensities=tuple(float(v) for v in intens),
        band_widths=widths,
        chromosome_length=length,
        chromosome_width=max(3, template.chromosome_width + int(rng.integers(-2, 3))),
        blur_sigma=config.blur_sigma,
        interband_intensity=template.interband_intensity,
        texture_noise=config.texture_noise,
    )


def random_bend(straight: np.ndarray, length: int, rng: np.random.Generator,
                config: DataConfig, attempts: int = 20) -> tuple[np.ndarray, np.ndarray, BendSpec]:
    """Draw bends until one is valid; amplitude shrinks after every rejection."""
    amp = rng.uniform(*config.bend_amplitude) * length
    for _ in range(attempts):
        offsets = rng.uniform(-1.0, 1.0, config.n_stations) * amp
        offsets -= offsets.mean()
        spec = BendSpec(tuple(float(o) for o in offsets), interpolation=3)
        try:
            bent, flow = bend(straight, spec)
            return bent, flow, spec
        except DegenerateBendError:
            amp *= 0.7
    spec = BendSpec((0.0,), interpolation=3)
    bent, flow = bend(straight, spec)
    return bent, flow, spec


def make_pair(index: int, templates: list[BandingProfile], config: DataConfig,
              root_seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    label = index % len(templates)
    rng = np.random.default_rng([derive_seed(root_seed, "pairs"), index])
    profile = sample_profile(templates[label], rng, config)
    straight = gen_straight(profile, int(rng.integers(2 ** 31)), config.image_size)
    bent, flow, _ = random_bend(straight, profile.chromosome_length, rng, config)
    return bent, straight, flow, label


def make_dataset(config: DataConfig, out_dir) -> Path:
    """Write train/test pairs, a straight driving pool and manifests under ``out_dir``.

    Layout::

        manifest.jsonl                one record per pair
        pool.jsonl                    one record per pool image
        {train,test}/{source,driving}/pair_NNNN.png  (+ labels.json)
        {train,test}/flow/pair_NNNN.gtfl
        pool/pool_NNNN.png            (+ labels.json)
    """
    config.validate()
    root_seed = 0 if config.seed is None else config.seed
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create {out_dir}: {exc}") from exc
    templates = type_templates(config.num_types, root_seed, config.image_size)

    records = []
    labels: dict[str, dict[str, int]] = {"train": {}, "test": {}}
    for i in range(config.n_train + config.n_test):
        split = "train" if i < config.n_train else "test"
        bent, straight, flow, label = make_pair(i, templates, config, root_seed)
        pid = f"pair_{i:04d}"
        rec = {
            "pair_id": pid,
            "split": split,
            "source_path": f"{split}/source/{pid}.png",
            "driving_path": f"{split}/driving/{pid}.png",
            "flow_path": f"{split}/flow/{pid}.gtfl",
            "type_label": label,
        }
        fileio.write_png(out_dir / rec["source_path"], bent)
        fileio.write_png(out_dir / rec["driving_path"], straight)
        fileio.write_flow(out_dir / rec["flow_path"], flow)
        labels[split][pid] = label
        records.append(rec)
    for split, lab in labels.items():
        if lab:
            fileio.write_labels(out_dir / split / "source", lab)
            fileio.write_labels(out_dir / split / "driving", lab)

    pool_records, pool_labels = [], {}
    for j in range(config.n_pool):
        label = j % len(templates)
        rng = np.random.default_rng([derive_seed(root_seed, "pool"), j])
        profile = sample_profile(templates[label], rng, config)
        image = gen_straight(profile, int(rng.integers(2 ** 31)), config.image_size)
        iid = f"pool_{j:04d}"
        fileio.write_png(out_dir / "pool" / f"{iid}.png", image)
        pool_labels[iid] = label
        pool_records.append({"image_id": iid, "image_path": f"pool/{iid}.png", "type_label": label})
    if pool_labels:
        fileio.write_labels(out_dir / "pool", pool_labels)

    fileio.write_jsonl(out_dir / "manifest.jsonl", records)
    fileio.write_jsonl(out_dir / "pool.jsonl", pool_records)
    return out_dir / "manifest.jsonl"


def load_pairs(data_dir, split: str | None = None) -> list[ImagePair]:
    data_dir = Path(data_dir)
    manifest = data_dir / "manifest.jsonl"
    if not manifest.exists():
        raise DatasetError(f"no manifest.jsonl in {data_dir}")
    pairs = []
    for rec in fileio.read_jsonl(manifest):
        if split is not None and rec.get("split") != split:
            continue
        pairs.append(ImagePair(
            pair_id=rec["pair_id"],
            source=fileio.read_png(data_dir / rec["source_path"]),
            driving=fileio.read_png(data_dir / rec["driving_path"]),
            gt_flow=fileio.read_flow(data_dir / rec["flow_path"]),
            type_label=int(rec["type_label"]),
            split=rec.get("split", "train"),
        ))
    return pairs
