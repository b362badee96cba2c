"""Synthetic low-contrast micrographs with coordinate annotations.

Two image domains stand in for the pretraining/adaptation gap: a
high-contrast source domain (bright particles on a dark background) and a
cryo-EM-like target domain (slightly dark particles on a noisy mid-gray
background with smooth intensity artifacts). Particles are filled disks by
default; masks are their exact pixel support, and each sample carries the
(x, y, diameter) list that rasterizes to its mask.

File formats, all byte-exact:
  * images: binary PGM (P5), maxval 65535, 16-bit big-endian samples,
    values mapped linearly to [0, 1]
  * masks: P5, maxval 255, entries 0 or 255
  * coordinates: CSV with header "x,y,diameter"
  * manifest: "# key=value" echo lines, then one "stem,domain" line per sample
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, asdict, replace
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "SyntheticConfig",
    "Sample",
    "DatasetManifest",
    "source_domain_config",
    "target_domain_config",
    "generate",
    "rasterize",
    "save_image",
    "load_image",
    "save_mask",
    "write_dataset",
    "load_dataset",
    "write_manifest",
    "read_manifest",
    "split",
]

_PLACEMENT_RETRIES = 24


@dataclass(frozen=True)
class SyntheticConfig:
    height: int = 128
    width: int = 128
    particle_rate: float = 6.0      # Poisson mean for particles per image
    radius_min: float = 6.0
    radius_max: float = 14.0
    foreground: float = 0.8
    background: float = 0.2
    noise_sigma: float = 0.05
    artifact_amplitude: float = 0.0  # smooth ice/carbon-like intensity field
    eccentricity: float = 0.0        # 0 = disks; >0 squashes one axis
    polarity: str = "bright"         # informational: fg vs bg relation
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.radius_min <= self.radius_max:
            raise ValueError("need 0 < radius_min <= radius_max")
        if self.radius_max >= min(self.height, self.width) / 2:
            raise ValueError("radius_max too large for the image")
        for name in ("foreground", "background"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError("%s must lie in [0, 1]" % name)
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        if not 0.0 <= self.eccentricity < 1.0:
            raise ValueError("eccentricity must lie in [0, 1)")


def source_domain_config(seed=0, **overrides):
    """High-contrast pretraining domain."""
    cfg = SyntheticConfig(foreground=0.8, background=0.2, noise_sigma=0.05,
                          artifact_amplitude=0.0, polarity="bright", seed=seed)
    return replace(cfg, **overrides) if overrides else cfg


def target_domain_config(seed=0, **overrides):
    """Low-contrast adaptation domain: dark particles, noise, artifacts."""
    cfg = SyntheticConfig(foreground=0.45, background=0.5, noise_sigma=0.10,
                          artifact_amplitude=0.1, polarity="dark", seed=seed)
    return replace(cfg, **overrides) if overrides else cfg


@dataclass
class Sample:
    image: np.ndarray                 # (1, H, W) in [0, 1]
    mask: np.ndarray                  # (H, W), entries 0.0 or 1.0
    coords: list | None = None        # [(x, y, diameter)] when particles are disks
    stem: str | None = None


def rasterize(coords, height, width):
    """Union of filled disks: pixel (i,j) set iff (i-y)^2+(j-x)^2 <= (d/2)^2.

    Out-of-bounds disks are clipped; a nonpositive diameter is rejected with
    its list index.
    """
    mask = np.zeros((height, width), dtype=bool)
    for idx, (x, y, dia) in enumerate(coords):
        if dia <= 0:
            raise ValueError("coordinate %d: nonpositive diameter %r" % (idx, dia))
        r = dia / 2.0
        i_lo = max(int(np.floor(y - r)), 0)
        i_hi = min(int(np.ceil(y + r)) + 1, height)
        j_lo = max(int(np.floor(x - r)), 0)
        j_hi = min(int(np.ceil(x + r)) + 1, width)
        if i_lo >= i_hi or j_lo >= j_hi:
            continue
        ii = np.arange(i_lo, i_hi)[:, None]
        jj = np.arange(j_lo, j_hi)[None, :]
        mask[i_lo:i_hi, j_lo:j_hi] |= (ii - y) ** 2 + (jj - x) ** 2 <= r * r
    return mask.astype(np.float64)


def _ellipse_support(cx, cy, rx, ry, height, width):
    i_lo = max(int(np.floor(cy - ry)), 0)
    i_hi = min(int(np.ceil(cy + ry)) + 1, height)
    j_lo = max(int(np.floor(cx - rx)), 0)
    j_hi = min(int(np.ceil(cx + rx)) + 1, width)
    out = np.zeros((height, width), dtype=bool)
    if i_lo >= i_hi or j_lo >= j_hi:
        return out
    ii = np.arange(i_lo, i_hi)[:, None]
    jj = np.arange(j_lo, j_hi)[None, :]
    out[i_lo:i_hi, j_lo:j_hi] = ((ii - cy) / ry) ** 2 + ((jj - cx) / rx) ** 2 <= 1.0
    return out


def _artifact_field(rng, height, width, amplitude):
    yy = np.arange(height)[:, None] / height
    xx = np.arange(width)[None, :] / width
    out = np.zeros((height, width))
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 2.0, 2)
        py, px = rng.uniform(0.0, 2 * np.pi, 2)
        out += rng.uniform(0.4, 1.0) * np.cos(2 * np.pi * fy * yy + py) \
            * np.cos(2 * np.pi * fx * xx + px)
    return amplitude * out


def generate(config, count):
    """Draw `count` samples, each deterministic given (config.seed, index).

    Particles are placed with center-distance rejection; after the retry
    budget a particle is skipped with a logged warning (the sample remains
    valid). With eccentricity 0 the mask is exactly rasterize(coords).
    """
    samples = []
    h, w = config.height, config.width
    for index in range(count):
        rng = np.random.default_rng([config.seed, index])
        n = int(rng.poisson(config.particle_rate))
        placed = []  # (cx, cy, r)
        for _ in range(n):
            ok = False
            for _ in range(_PLACEMENT_RETRIES):
                r = rng.uniform(config.radius_min, config.radius_max)
                cx = rng.uniform(r, w - 1 - r)
                cy = rng.uniform(r, h - 1 - r)
                if all((cx - ox) ** 2 + (cy - oy) ** 2 >= (r + orr + 1.0) ** 2
                       for ox, oy, orr in placed):
                    placed.append((cx, cy, r))
                    ok = True
                    break
            if not ok:
                logger.warning("sample %d: skipped a particle after %d "
                               "placement retries", index, _PLACEMENT_RETRIES)
        if config.eccentricity == 0.0:
            coords = [(cx, cy, 2.0 * r) for cx, cy, r in placed]
            mask = rasterize(coords, h, w)
        else:
            coords = None
            mask = np.zeros((h, w))
            for cx, cy, r in placed:
                ry = r * (1.0 - config.eccentricity)
                mask = np.maximum(mask,
                                  _ellipse_support(cx, cy, r, ry, h, w).astype(float))
        image = np.where(mask > 0, config.foreground, config.background)
        if config.artifact_amplitude > 0:
            image = image + _artifact_field(rng, h, w, config.artifact_amplitude)
        if config.noise_sigma > 0:
            image = image + rng.normal(0.0, config.noise_sigma, (h, w))
        image = np.clip(image, 0.0, 1.0)
        samples.append(Sample(image=image[None, :, :], mask=mask, coords=coords))
    return samples


# -- PGM I/O ----------------------------------------------------------------


def save_image(path, array):
    """Grayscale [0,1] image as 16-bit big-endian P5 (maxval 65535)."""
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError("expected (H,W) or (1,H,W) image, got %s" % (arr.shape,))
    q = np.clip(np.floor(arr * 65535.0 + 0.5), 0, 65535).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n65535\n" % (arr.shape[1], arr.shape[0]))
        fh.write(q.tobytes())


def save_mask(path, mask):
    """Binary mask as 8-bit P5 with entries 0 or 255. Round trip is exact."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError("expected (H,W) mask, got %s" % (arr.shape,))
    q = np.where(arr > 0, 255, 0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (arr.shape[1], arr.shape[0]))
        fh.write(q.tobytes())


def _read_pgm_tokens(blob, path):
    # magic, width, height, maxval; comments (#...) and whitespace between
    tokens = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(blob):
            raise ValueError("%s: truncated PGM header" % path)
        c = blob[pos:pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            pos = blob.find(b"\n", pos)
            if pos < 0:
                raise ValueError("%s: unterminated comment in header" % path)
        else:
            end = pos
            while end < len(blob) and not blob[end:end + 1].isspace():
                end += 1
            tokens.append(blob[pos:end])
            pos = end
    return tokens, pos + 1  # payload starts after one whitespace byte


def load_image(path):
    """Read a P5 file back to (H,W) float64 in [0,1].

    maxval 65535 files are images (big-endian 16-bit); maxval 255 files are
    masks and come back with exact {0, 1} values. Anything else is rejected.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens, payload_at = _read_pgm_tokens(blob, path)
    if tokens[0] != b"P5":
        raise ValueError("%s: not a binary PGM (magic %r)" % (path, tokens[0]))
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as err:
        raise ValueError("%s: malformed PGM header" % path) from err
    if width <= 0 or height <= 0:
        raise ValueError("%s: bad dimensions %dx%d" % (path, width, height))
    payload = blob[payload_at:]
    if maxval == 65535:
        expected = width * height * 2
        if len(payload) != expected:
            raise ValueError("%s: payload is %d bytes, expected %d"
                             % (path, len(payload), expected))
        data = np.frombuffer(payload, dtype=">u2").reshape(height, width)
        return data.astype(np.float64) / 65535.0
    if maxval == 255:
        expected = width * height
        if len(payload) != expected:
            raise ValueError("%s: payload is %d bytes, expected %d"
                             % (path, len(payload), expected))
        data = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
        return data.astype(np.float64) / 255.0
    raise ValueError("%s: unsupported maxval %d (expected 255 or 65535)"
                     % (path, maxval))


# -- datasets on disk ----------------------------------------------------------


@dataclass
class DatasetManifest:
    stems: list
    domain: str
    config_echo: dict
    seed: int


def write_manifest(path, manifest):
    with open(path, "w") as fh:
        fh.write("# promptseg dataset manifest v1\n")
        fh.write("# domain=%s\n" % manifest.domain)
        fh.write("# seed=%d\n" % manifest.seed)
        for key in sorted(manifest.config_echo):
            fh.write("# config.%s=%s\n" % (key, manifest.config_echo[key]))
        for stem in manifest.stems:
            fh.write("%s,%s\n" % (stem, manifest.domain))


def read_manifest(path):
    stems, echo, domain, seed = [], {}, "", 0
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if "=" in body:
                    key, _, value = body.partition("=")
                    if key == "domain":
                        domain = value
                    elif key == "seed":
                        seed = int(value)
                    elif key.startswith("config."):
                        echo[key[len("config."):]] = value
                continue
            stem, _, row_domain = line.partition(",")
            stems.append(stem)
            if not domain:
                domain = row_domain
    return DatasetManifest(stems=stems, domain=domain, config_echo=echo, seed=seed)


def write_dataset(root, samples, config, domain):
    """PGM pairs, coordinate CSVs, and a manifest under `root`."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    stems = []
    for i, sample in enumerate(samples):
        stem = "%s_%05d" % (domain, i)
        save_image(root / ("%s.pgm" % stem), sample.image)
        save_mask(root / ("%s_mask.pgm" % stem), sample.mask)
        if sample.coords is not None:
            with open(root / ("%s_coords.csv" % stem), "w") as fh:
                fh.write("x,y,diameter\n")
                for x, y, dia in sample.coords:
                    fh.write("%s,%s,%s\n" % (repr(x), repr(y), repr(dia)))
        sample.stem = stem
        stems.append(stem)
    echo = {k: str(v) for k, v in asdict(config).items()}
    manifest = DatasetManifest(stems=stems, domain=domain,
                               config_echo=echo, seed=config.seed)
    write_manifest(root / "manifest.txt", manifest)
    return manifest


def load_dataset(root, manifest=None):
    """Samples listed by a manifest (default: root/manifest.txt)."""
    root = Path(root)
    if manifest is None:
        manifest = read_manifest(root / "manifest.txt")
    samples = []
    for stem in manifest.stems:
        image_path = root / ("%s.pgm" % stem)
        mask_path = root / ("%s_mask.pgm" % stem)
        if not image_path.exists() or not mask_path.exists():
            raise FileNotFoundError("manifest stem %r missing files under %s"
                                    % (stem, root))
        image = load_image(image_path)[None, :, :]
        mask = load_image(mask_path)
        coords = None
        coords_path = root / ("%s_coords.csv" % stem)
        if coords_path.exists():
            coords = []
            with open(coords_path) as fh:
                next(fh)
                for line in fh:
                    x, y, dia = (float(v) for v in line.strip().split(","))
                    coords.append((x, y, dia))
        samples.append(Sample(image=image, mask=mask, coords=coords, stem=stem))
    return samples


def split(manifest, train_size, seed):
    """Seeded shuffle; first `train_size` stems to train, the rest to test."""
    total = len(manifest.stems)
    if train_size >= total:
        raise ValueError("train_size %d must be < total %d" % (train_size, total))
    order = np.random.default_rng(seed).permutation(total)
    train_stems = [manifest.stems[i] for i in order[:train_size]]
    test_stems = [manifest.stems[i] for i in order[train_size:]]
    make = lambda stems: DatasetManifest(stems=stems, domain=manifest.domain,
                                         config_echo=dict(manifest.config_echo),
                                         seed=manifest.seed)
    return make(train_stems), make(test_stems)
