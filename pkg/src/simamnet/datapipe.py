"""Paired radiograph data: PGM/manifest I/O, augmentation, synthetic pairs, splits."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .rng import derive_rng

__all__ = [
    "Label", "RadiographPair", "DataError", "read_pgm", "write_pgm", "read_image",
    "load_manifest", "write_manifest", "to_model_input", "stack_pairs", "AugmentPolicy",
    "Transform", "sample_transform", "apply_transform", "augment", "synth_generate",
    "split", "dark_pixel_count",
]


class DataError(ValueError):
    """Malformed data file, manifest, or pair."""


class Label(enum.IntEnum):
    GETTING_BETTER = 0
    NO_CHANGE = 1
    GROWING_WORSE = 2

    @property
    def token(self) -> str:
        return _TOKENS[self]

    @classmethod
    def parse(cls, token: str) -> "Label":
        for lab, tok in _TOKENS.items():
            if tok == token:
                return lab
        raise DataError(f"unknown label {token!r} (expected one of {sorted(_TOKENS.values())})")


_TOKENS = {Label.GETTING_BETTER: "better", Label.NO_CHANGE: "nochange",
           Label.GROWING_WORSE: "worse"}


@dataclass
class RadiographPair:
    id: str
    before: np.ndarray  # (H, W) grayscale, or (3, H, W) when RGB is kept
    after: np.ndarray
    label: Label

    def __post_init__(self):
        self.label = Label(self.label)
        if self.before.shape != self.after.shape:
            raise DataError(f"pair {self.id}: extents differ {self.before.shape} vs "
                            f"{self.after.shape}")


# -- image files -----------------------------------------------------------

def _pgm_tokens(raw: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("truncated PGM header")
        tokens.append(raw[start:pos])
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    """Binary (P5) or ASCII (P2) PGM, scaled to [0, 1]."""
    raw = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _pgm_tokens(raw, 4)
    w, h, maxval = int(w), int(h), int(maxval)
    if magic == b"P5":
        dt = np.dtype(">u2") if maxval > 255 else np.uint8
        data = np.frombuffer(raw, dtype=dt, count=w * h, offset=pos)
    elif magic == b"P2":
        data = np.array(raw[pos - 1:].split()[:w * h], dtype=np.int64)
    else:
        raise DataError(f"{path}: not a PGM file")
    if data.size != w * h:
        raise DataError(f"{path}: expected {w * h} pixels, found {data.size}")
    return data.reshape(h, w).astype(np.float64) / maxval


def write_pgm(path, img: np.ndarray) -> None:
    """8-bit binary PGM; values in [0, 1] are rounded to 0..255."""
    img = np.asarray(img, dtype=np.float64)
    q = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(q.tobytes())


def read_image(path, keep_rgb: bool = False) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".pnm"):
        return read_pgm(path)
    from PIL import Image
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    # luminance-only content: collapse colour channels by their mean
    return arr.transpose(2, 0, 1).copy() if keep_rgb else arr.mean(axis=2)


# -- manifest ----------------------------------------------------------------

def load_manifest(path, keep_rgb: bool = False) -> list[RadiographPair]:
    """Tab-separated ``id, before_path, after_path, label`` per line.

    Relative image paths resolve against the manifest's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest {path} not found")
    pairs, seen = [], set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields")
        pid, before, after, token = (f.strip() for f in fields)
        try:
            label = Label.parse(token)
        except DataError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
        if pid in seen:
            raise DataError(f"{path}:{lineno}: duplicate id {pid!r}")
        seen.add(pid)
        imgs = []
        for rel in (before, after):
            p = Path(rel) if Path(rel).is_absolute() else path.parent / rel
            if not p.is_file():
                raise DataError(f"{path}:{lineno}: image {p} not found")
            imgs.append(read_image(p, keep_rgb))
        if imgs[0].shape != imgs[1].shape:
            raise DataError(f"{path}:{lineno}: before {imgs[0].shape} and after "
                            f"{imgs[1].shape} extents differ")
        pairs.append(RadiographPair(pid, imgs[0], imgs[1], label))
    return pairs


def write_manifest(pairs, out_dir) -> Path:
    """Write each pair as two PGMs plus ``manifest.tsv``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(exist_ok=True)
    lines = []
    for p in pairs:
        b, a = f"{p.id}_before.pgm", f"{p.id}_after.pgm"
        write_pgm(out_dir / b, p.before)
        write_pgm(out_dir / a, p.after)
        lines.append("\t".join((p.id, b, a, p.label.token)))
    manifest = out_dir / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def to_model_input(p: RadiographPair) -> np.ndarray:
    """Channel-stacked [before, after]: (2, H, W), or (6, H, W) for RGB pairs."""
    if p.before.ndim == 2:
        return np.stack([p.before, p.after])
    return np.concatenate([p.before, p.after])


def stack_pairs(pairs) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([to_model_input(p) for p in pairs])
    y = np.array([int(p.label) for p in pairs], dtype=np.int64)
    return x, y


# -- augmentation ------------------------------------------------------------

@dataclass(frozen=True)
class AugmentPolicy:
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    rotation_degrees: tuple[float, ...] = (-15, -10, -5, 0, 5, 10, 15)
    brightness_range: tuple[float, float] = (0.8, 1.2)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "rotation_degrees", tuple(self.rotation_degrees))
        object.__setattr__(self, "brightness_range", tuple(self.brightness_range))
        if not (0 <= self.hflip_prob <= 1 and 0 <= self.vflip_prob <= 1):
            raise ValueError("flip probabilities must lie in [0, 1]")
        lo, hi = self.brightness_range
        if not 0 < lo <= hi:
            raise ValueError("brightness factors must be positive with lo <= hi")
        if not self.rotation_degrees:
            raise ValueError("rotation_degrees must not be empty")


@dataclass(frozen=True)
class Transform:
    hflip: bool = False
    vflip: bool = False
    angle: float = 0.0
    brightness: float = 1.0


def sample_transform(policy: AugmentPolicy, rng: np.random.Generator) -> Transform:
    hflip = bool(rng.random() < policy.hflip_prob)
    vflip = bool(rng.random() < policy.vflip_prob)
    angle = float(policy.rotation_degrees[rng.integers(len(policy.rotation_degrees))])
    brightness = float(rng.uniform(*policy.brightness_range))
    return Transform(hflip, vflip, angle, brightness)


def _rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Bilinear rotation about the image centre with edge-replicated borders.

    Positive angles turn the content clockwise as displayed (row 0 at the top).
    """
    h, w = img.shape[-2:]
    cy, cx = (h - 1) / 2, (w - 1) / 2
    t = math.radians(degrees)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # inverse map: output pixel -> source location
    sy = cy + (yy - cy) * math.cos(t) - (xx - cx) * math.sin(t)
    sx = cx + (yy - cy) * math.sin(t) + (xx - cx) * math.cos(t)
    sy = np.clip(sy, 0, h - 1)
    sx = np.clip(sx, 0, w - 1)
    y0 = np.minimum(np.floor(sy).astype(np.int64), h - 2 if h > 1 else 0)
    x0 = np.minimum(np.floor(sx).astype(np.int64), w - 2 if w > 1 else 0)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy, fx = sy - y0, sx - x0
    top = img[..., y0, x0] * (1 - fx) + img[..., y0, x1] * fx
    bot = img[..., y1, x0] * (1 - fx) + img[..., y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _apply_image(img: np.ndarray, t: Transform) -> np.ndarray:
    out = img
    if t.hflip:
        out = out[..., :, ::-1]
    if t.vflip:
        out = out[..., ::-1, :]
    if t.angle != 0:
        out = _rotate(out, t.angle)
    if t.brightness != 1.0:
        out = np.clip(out * t.brightness, 0.0, 1.0)
    return np.ascontiguousarray(out)


def apply_transform(p: RadiographPair, t: Transform) -> RadiographPair:
    """Apply one transform identically to both images; the label is unchanged."""
    return replace(p, before=_apply_image(p.before, t), after=_apply_image(p.after, t))


def augment(p: RadiographPair, policy: AugmentPolicy, rng: np.random.Generator) -> RadiographPair:
    return apply_transform(p, sample_transform(policy, rng))


# -- synthetic pairs ---------------------------------------------------------

_AFTER_SCALE = {Label.GETTING_BETTER: (0.3, 0.6), Label.NO_CHANGE: (0.95, 1.05),
                Label.GROWING_WORSE: (1.4, 1.8)}
BACKGROUND, TOOTH, LESION, NOISE_SIGMA = 0.7, 0.85, 0.35, 0.02
DARK_THRESHOLD = 0.5


def _render(size: int, tooth, lesion_c, radius: float, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.full((size, size), BACKGROUND)
    ty, tx, ay, ax = tooth
    img[((yy - ty) / ay) ** 2 + ((xx - tx) / ax) ** 2 <= 1.0] = TOOTH
    ly, lx = lesion_c
    img[(yy - ly) ** 2 + (xx - lx) ** 2 <= radius ** 2] = LESION
    img += rng.normal(0.0, NOISE_SIGMA, img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_generate(n: int, seed: int, size: int = 64) -> list[RadiographPair]:
    """Class-balanced synthetic before/after pairs with a dark lesion that
    shrinks (better), stays (no change) or grows (worse)."""
    if n < 3:
        raise ValueError("synth_generate needs n >= 3")
    labels = np.array([Label(i % 3) for i in range(n)])
    derive_rng(seed, "synth-order").shuffle(labels)
    s = size / 64.0
    pairs = []
    for i, lab in enumerate(labels):
        lab = Label(int(lab))
        rng = derive_rng(seed, "synth", i)
        tooth = (size / 2 + rng.uniform(-4, 4) * s, size / 2 + rng.uniform(-4, 4) * s,
                 rng.uniform(22, 28) * s, rng.uniform(14, 20) * s)
        lesion = (rng.uniform(24, 40) * s, rng.uniform(24, 40) * s)
        r = rng.uniform(6, 12) * s
        u = rng.uniform(*_AFTER_SCALE[lab])
        before = _render(size, tooth, lesion, r, rng)
        after = _render(size, tooth, lesion, r * u, rng)
        pairs.append(RadiographPair(f"s{i:05d}", before, after, lab))
    return pairs


def dark_pixel_count(img: np.ndarray, threshold: float = DARK_THRESHOLD) -> int:
    return int((np.asarray(img) < threshold).sum())


# -- splitting ---------------------------------------------------------------

def split(pairs, val_fraction: float, seed: int):
    """Stratified, seeded train/validation split; returns (train, val)."""
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must lie in (0, 1)")
    by_class = {lab: [] for lab in Label}
    for idx, p in enumerate(pairs):
        by_class[p.label].append(idx)
    train_idx, val_idx = [], []
    for lab, members in by_class.items():
        if not members:
            raise DataError(f"class {lab.token!r} has no members")
        order = derive_rng(seed, "split", int(lab)).permutation(len(members))
        n_val = int(round(val_fraction * len(members)))
        n_val = min(max(n_val, 0), len(members) - 1) if len(members) > 1 else 0
        chosen = [members[j] for j in order]
        val_idx.extend(chosen[:n_val])
        train_idx.extend(chosen[n_val:])
    return [pairs[i] for i in sorted(train_idx)], [pairs[i] for i in sorted(val_idx)]
