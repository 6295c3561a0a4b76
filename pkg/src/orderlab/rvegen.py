"""Procedural fibre-composite microstructures paired with descriptors and properties.

Stands in for an RVE simulation pipeline: fibres are placed by random
sequential addition (with a relaxation fallback at high volume fraction),
rendered as anti-aliased ellipses whose eccentricity encodes the
misalignment angle, and given surrogate yield-strength / elongation targets
anchored to the dataset extremes.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

VF_RANGE = (0.31, 0.65)
MMA_RANGE = (0.0, 4.97)
FIBER_COUNT_RANGE = (13, 26)
YIELD_RANGE = (13.0, 2149.8)
ELONGATION_RANGE = (1.6e-4, 0.02)
REFERENCE_RADIUS = 0.0885
FIBER_INTENSITY = 1.0
BACKGROUND_INTENSITY = 0.1

MANIFEST_COLUMNS = ["id", "vf", "mma", "fiber_count", "yield_strength", "elongation", "image_path", "seed"]
GENERATOR_KEYS = {"count": int, "seed": int, "image_size": int, "noise": None, "r_f": float}

_AUX_TAG = 0xA11C


class PlacementFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class Descriptor:
    vf: float
    mma: float
    fiber_count: int

    def as_array(self) -> np.ndarray:
        return np.array([self.vf, self.mma, self.fiber_count], dtype=float)


@dataclass(frozen=True)
class PropertyVector:
    yield_strength: float
    elongation: float

    def as_array(self) -> np.ndarray:
        return np.array([self.yield_strength, self.elongation], dtype=float)


@dataclass
class SamplePair:
    id: int
    descriptor: Descriptor
    image: np.ndarray
    targets: PropertyVector
    seed: int = 0
    image_path: str = ""
    meta: dict = field(default_factory=dict, repr=False)


def fiber_count(vf: float, r_f: float = REFERENCE_RADIUS) -> int:
    """Number of fibres of radius ``r_f`` covering fraction ``vf`` of a unit square."""
    if not 0.0 <= vf < 0.8:
        raise ValueError(f"volume fraction {vf} outside [0, 0.8)")
    if not 0.0 < r_f < 0.5:
        raise ValueError(f"fibre radius {r_f} outside (0, 0.5)")
    return int(round(vf / (math.pi * r_f * r_f)))


def _min_pair_distance(centers: np.ndarray) -> float:
    if len(centers) < 2:
        return math.inf
    diff = centers[:, None, :] - centers[None, :, :]
    d = np.sqrt((diff**2).sum(-1))
    d[np.diag_indices(len(centers))] = math.inf
    return float(d.min())


def place_fibers(n: int, r_f: float = REFERENCE_RADIUS, seed: int = 0, *,
                 overlap_tol: float = 0.0, max_attempts: int | None = None) -> np.ndarray:
    """Random sequential addition of ``n`` non-overlapping fibre centres.

    Centres stay at least ``r_f`` from the window border so every fibre lies
    inside the unit square. When a single insertion keeps getting rejected
    (dense packings beyond the RSA jamming limit), the remaining fibres are
    dropped in at random and the whole set is relaxed by pairwise pushes.
    Rejections and relaxation sweeps both count towards ``max_attempts``.
    """
    if n < 0 or r_f <= 0:
        raise ValueError(f"invalid placement request n={n}, r_f={r_f}")
    max_attempts = 10_000 * max(n, 1) if max_attempts is None else max_attempts
    rng = np.random.default_rng(seed)
    dmin = 2.0 * r_f * (1.0 - overlap_tol)
    lo, hi = r_f, 1.0 - r_f
    if hi <= lo:
        raise PlacementFailure(f"radius {r_f} leaves no room in the window")

    centers = np.empty((n, 2))
    placed, attempts, streak = 0, 0, 0
    streak_limit = 2_000
    while placed < n:
        p = rng.uniform(lo, hi, size=2)
        attempts += 1
        if placed == 0 or np.min(np.sum((centers[:placed] - p) ** 2, axis=1)) >= dmin * dmin:
            centers[placed] = p
            placed += 1
            streak = 0
            continue
        streak += 1
        if attempts >= max_attempts:
            raise PlacementFailure(f"placed {placed}/{n} fibres after {attempts} attempts")
        if streak >= streak_limit:
            break

    if placed == n:
        return centers

    centers[placed:] = rng.uniform(lo, hi, size=(n - placed, 2))
    target = dmin * (1.0 + 1e-3)
    while True:
        diff = centers[:, None, :] - centers[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        np.fill_diagonal(dist, math.inf)
        if dist.min() >= dmin:
            return centers
        attempts += n
        if attempts >= max_attempts:
            raise PlacementFailure(
                f"relaxation of {n} fibres did not converge within {max_attempts} attempts")
        overlap = np.clip(target - dist, 0.0, None)
        coincident = dist < 1e-12
        if coincident.any():
            diff = diff + coincident[..., None] * rng.normal(scale=1e-6, size=diff.shape)
            dist = np.where(coincident, 1e-6, dist)
        push = (0.5 * overlap / dist)[..., None] * diff
        centers = centers + push.sum(axis=1)
        centers += rng.normal(scale=1e-4 * r_f, size=centers.shape)
        np.clip(centers, lo, hi, out=centers)


def sample_angles(n: int, mma: float, seed: int = 0) -> np.ndarray:
    """Signed misalignment angles (degrees) with mean absolute value exactly ``mma``."""
    if n < 1 or mma < 0:
        raise ValueError(f"invalid angle request n={n}, mma={mma}")
    if mma == 0:
        return np.zeros(n)
    raw = np.random.default_rng(seed).standard_normal(n)
    scale = np.abs(raw).mean()
    if scale == 0:
        raw, scale = np.ones(n), 1.0
    return raw * (mma / scale)


def rasterize(centers, angles, r_f: float = REFERENCE_RADIUS, size=(64, 64),
              directions=None) -> np.ndarray:
    """Render fibre cross-sections as anti-aliased ellipses.

    Minor radius is ``r_f``; major radius is ``r_f / cos(angle)`` along
    ``directions`` (radians from the +x axis, default 0). Coordinates are in
    the unit square with x along columns and y along rows.
    """
    h, w = size
    img = np.full((h, w), BACKGROUND_INTENSITY)
    centers = np.asarray(centers, dtype=float).reshape(-1, 2)
    if len(centers) == 0:
        return img
    angles = np.broadcast_to(np.asarray(angles, dtype=float), (len(centers),))
    directions = np.zeros(len(centers)) if directions is None else np.broadcast_to(
        np.asarray(directions, dtype=float), (len(centers),))
    scale = np.array([w, h], dtype=float)
    coverage = np.zeros((h, w))
    for (cx, cy), ang, phi in zip(centers, angles, directions):
        a = r_f / math.cos(math.radians(ang))
        b = r_f
        reach_x, reach_y = (a + 2.0 / w), (a + 2.0 / h)
        c0 = max(int(math.floor((cx - reach_x) * w)), 0)
        c1 = min(int(math.ceil((cx + reach_x) * w)), w)
        r0 = max(int(math.floor((cy - reach_y) * h)), 0)
        r1 = min(int(math.ceil((cy + reach_y) * h)), h)
        if c0 >= c1 or r0 >= r1:
            continue
        xs = (np.arange(c0, c1) + 0.5) / w - cx
        ys = (np.arange(r0, r1) + 0.5) / h - cy
        dx, dy = np.meshgrid(xs * scale[0], ys * scale[1])  # pixel units
        cphi, sphi = math.cos(phi), math.sin(phi)
        u = cphi * dx + sphi * dy
        v = -sphi * dx + cphi * dy
        ap, bp = a * w, b * w
        f = (u / ap) ** 2 + (v / bp) ** 2 - 1.0
        gnorm = 2.0 * np.sqrt((u / ap**2) ** 2 + (v / bp**2) ** 2)
        sd = f / np.maximum(gnorm, 1e-12)
        cov = np.clip(0.5 - sd, 0.0, 1.0)
        block = coverage[r0:r1, c0:c1]
        np.maximum(block, cov, out=block)
    return BACKGROUND_INTENSITY + (FIBER_INTENSITY - BACKGROUND_INTENSITY) * coverage


def surrogate_properties(descriptor: Descriptor, angles=None, noise_seed: int | None = None) -> PropertyVector:
    """Surrogate yield strength (MPa) and elongation (mm).

    Endpoints hit the dataset extremes exactly: (vf=0.65, mma=0) gives the
    maximum yield and minimum elongation, vf=0.31 the minimum yield. With
    ``noise_seed`` set, each property gets independent multiplicative
    U(0.98, 1.02) noise. Results are clamped to the dataset ranges.
    """
    vf_norm = (descriptor.vf - VF_RANGE[0]) / (VF_RANGE[1] - VF_RANGE[0])
    vf_norm = min(max(vf_norm, 0.0), 1.0)
    mma = descriptor.mma if angles is None or len(angles) == 0 else float(np.mean(np.abs(angles)))
    ys = YIELD_RANGE[0] + (YIELD_RANGE[1] - YIELD_RANGE[0]) * vf_norm**1.5 * math.exp(-0.3 * mma)
    el = ELONGATION_RANGE[0] + (ELONGATION_RANGE[1] - ELONGATION_RANGE[0]) * (1.0 - vf_norm) ** 1.2 * math.exp(-0.1 * mma)
    if noise_seed is not None:
        u = np.random.default_rng(noise_seed).uniform(0.98, 1.02, size=2)
        ys, el = ys * u[0], el * u[1]
    ys = min(max(ys, YIELD_RANGE[0]), YIELD_RANGE[1])
    el = min(max(el, ELONGATION_RANGE[0]), ELONGATION_RANGE[1])
    return PropertyVector(float(ys), float(el))


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap intensities to the 8-bit grid used on disk."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def _sample_seed(*key: int) -> int:
    return int(np.random.SeedSequence(list(key)).generate_state(1)[0])


def render_sample(vf: float, mma: float, sample_seed: int, *, image_size: int = 64,
                  r_f: float = REFERENCE_RADIUS, noise: bool = True) -> tuple[Descriptor, np.ndarray, PropertyVector]:
    """Build one (descriptor, image, properties) triple from its own seed.

    Fibres are drawn with the radius that makes their total area equal ``vf``
    exactly; the fibre count itself comes from the reference radius.
    """
    n = fiber_count(vf, r_f)
    desc = Descriptor(float(vf), float(mma), n)
    ss = np.random.SeedSequence(sample_seed)
    s_place, s_angle, s_dir, s_noise = (int(s.generate_state(1)[0]) for s in ss.spawn(4))
    r_draw = math.sqrt(vf / (math.pi * n)) if n else r_f
    centers = place_fibers(n, r_draw, s_place)
    angles = sample_angles(n, mma, s_angle) if n else np.zeros(0)
    dirs = np.random.default_rng(s_dir).uniform(0.0, math.pi, size=n)
    img = quantize(rasterize(centers, angles, r_draw, (image_size, image_size), dirs))
    props = surrogate_properties(desc, angles, s_noise if noise else None)
    return desc, img, props


def _descriptor_grid(count: int, rng: np.random.Generator, stratified: bool) -> np.ndarray:
    if stratified:
        # latin hypercube over (vf, mma)
        u = (np.stack([rng.permutation(count), rng.permutation(count)], axis=1)
             + rng.uniform(size=(count, 2))) / count
    else:
        u = rng.uniform(size=(count, 2))
    vf = VF_RANGE[0] + u[:, 0] * (VF_RANGE[1] - VF_RANGE[0])
    mma = MMA_RANGE[0] + u[:, 1] * (MMA_RANGE[1] - MMA_RANGE[0])
    return np.stack([vf, mma], axis=1)


def generate_dataset(count: int = 436, seed: int = 0, out_dir=None, *, image_size: int = 64,
                     noise: bool = True, r_f: float = REFERENCE_RADIUS,
                     stratified: bool = False, max_retries: int = 10) -> list[SamplePair]:
    """Generate ``count`` paired samples; with ``out_dir`` also write PGMs and a manifest."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    grid = _descriptor_grid(count, rng, stratified)
    samples = []
    for i, (vf, mma) in enumerate(grid):
        for attempt in range(max_retries):
            s = _sample_seed(seed, i, attempt)
            try:
                desc, img, props = render_sample(vf, mma, s, image_size=image_size, r_f=r_f, noise=noise)
                break
            except PlacementFailure:
                log.warning("sample %d attempt %d: placement failed, reseeding", i, attempt)
        else:
            raise PlacementFailure(f"sample {i} failed after {max_retries} attempts")
        samples.append(SamplePair(i, desc, img, props, seed=s))
    if out_dir is not None:
        write_dataset(samples, out_dir)
    return samples


def generate_aux_corpus(count: int, seed: int = 0, *, image_size: int = 64,
                        r_f: float = REFERENCE_RADIUS) -> list[np.ndarray]:
    """Upright microstructures for self-supervised base pretraining.

    Each image carries a fibre-free resin-rich band along the top edge of
    random depth, so the four right-angle rotations are distinguishable.
    Seeds live in a key space disjoint from :func:`generate_dataset`.
    """
    images = []
    for i in range(count):
        rng = np.random.default_rng(aux_seed(seed, i))
        band = rng.uniform(0.2, 0.4)
        vf_local = rng.uniform(0.2, 0.45)
        r = r_f * rng.uniform(0.8, 1.1)
        n = max(1, int(round(vf_local * (1.0 - band) / (math.pi * r * r))))
        lo_y = band + r
        centers = np.empty((n, 2))
        placed = tries = 0
        while placed < n and tries < 3_000:
            tries += 1
            p = np.array([rng.uniform(r, 1 - r), rng.uniform(lo_y, 1 - r)])
            if placed == 0 or np.min(np.sum((centers[:placed] - p) ** 2, axis=1)) >= 4 * r * r:
                centers[placed] = p
                placed += 1
        centers = centers[:placed]
        angles = sample_angles(len(centers), rng.uniform(0, 10.0), int(rng.integers(2**31)))
        dirs = rng.uniform(0.0, math.pi, size=len(centers))
        images.append(quantize(rasterize(centers, angles, r, (image_size, image_size), dirs)))
    return images


def aux_seed(seed: int, index: int) -> int:
    return _sample_seed(_AUX_TAG, seed, index)


# ---------------------------------------------------------------------------
# disk formats


def write_pgm(path, img: np.ndarray) -> None:
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        end = pos
        while not blob[end:end + 1].isspace():
            end += 1
        tokens.append(blob[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pos += 1
    data = np.frombuffer(blob[pos:pos + w * h], dtype=np.uint8).reshape(h, w)
    return data.astype(float) / maxval


def write_dataset(samples: list[SamplePair], out_dir) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(MANIFEST_COLUMNS)
        for s in samples:
            rel = f"images/{s.id:05d}.pgm"
            write_pgm(out / rel, s.image)
            s.image_path = rel
            d, t = s.descriptor, s.targets
            wr.writerow([s.id, repr(d.vf), repr(d.mma), d.fiber_count,
                         repr(t.yield_strength), repr(t.elongation), rel, s.seed])
    return manifest


def load_dataset(manifest) -> list[SamplePair]:
    """Read a manifest CSV (this generator's or an external one with the same columns)."""
    manifest = Path(manifest)
    samples = []
    with open(manifest, newline="") as fh:
        rd = csv.DictReader(fh)
        missing = set(MANIFEST_COLUMNS) - set(rd.fieldnames or [])
        if missing:
            raise ValueError(f"{manifest}: missing columns {sorted(missing)}")
        for row in rd:
            img_path = Path(row["image_path"])
            if not img_path.is_absolute():
                img_path = manifest.parent / img_path
            desc = Descriptor(float(row["vf"]), float(row["mma"]), int(row["fiber_count"]))
            props = PropertyVector(float(row["yield_strength"]), float(row["elongation"]))
            samples.append(SamplePair(int(row["id"]), desc, read_pgm(img_path), props,
                                      seed=int(row["seed"]), image_path=row["image_path"]))
    ids = [s.id for s in samples]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{manifest}: duplicate sample ids")
    return samples


def read_generator_config(path) -> dict:
    """Parse a ``key = value`` generator config (keys: count, seed, image_size, noise, r_f)."""
    cfg = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in GENERATOR_KEYS:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        cast = GENERATOR_KEYS[key]
        cfg[key] = value.lower() in ("1", "true", "yes", "on") if cast is None else cast(value)
    return cfg


def descriptor_matrix(samples: list[SamplePair]) -> np.ndarray:
    return np.stack([s.descriptor.as_array() for s in samples])


def target_matrix(samples: list[SamplePair]) -> np.ndarray:
    return np.stack([s.targets.as_array() for s in samples])


def image_stack(samples: list[SamplePair]) -> np.ndarray:
    return np.stack([s.image for s in samples])
