"""Procedural multi-style retrieval benchmark.

Each class is a glyph family (a fixed composition of polygons, ellipses and
strokes); each instance jitters that composition. Every instance is rendered in
all styles from the same geometry, so a query in any style has exactly one
gallery (photo) counterpart: the same class and instance.
"""
from __future__ import annotations

import csv
import io
import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ChecksumError, ConfigError, FormatError

STYLE_RENDERERS = ("photo", "sketch", "lowres", "art")
SUPERSAMPLE = 4
MANIFEST_COLUMNS = ["file", "class_id", "style_id", "instance_id", "gallery_file", "crc32"]


@dataclass
class DatasetConfig:
    n_classes: int = 20
    samples_per_class_per_style: int = 20
    image_size: int = 32
    styles: list[str] = field(default_factory=lambda: ["photo", "sketch", "lowres", "art"])
    seed: int = 0
    holdout_styles: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError("data.n_classes must be >= 2")
        if self.samples_per_class_per_style < 1:
            raise ConfigError("data.samples_per_class_per_style must be >= 1")
        if self.image_size < 8 or self.image_size % 4:
            raise ConfigError("data.image_size must be a multiple of 4, at least 8")
        if len(self.styles) < 2 or self.styles[0] != "photo":
            raise ConfigError("data.styles needs >= 2 entries with 'photo' (the gallery) first")
        unknown = [s for s in self.styles if s not in STYLE_RENDERERS]
        if unknown or len(set(self.styles)) != len(self.styles):
            raise ConfigError(f"data.styles: unknown or repeated styles {unknown or self.styles}")
        bad = [s for s in self.holdout_styles if s not in self.styles[1:]]
        if bad:
            raise ConfigError(f"data.holdout_styles must name non-gallery styles, got {bad}")
        if self.seed < 0:
            raise ConfigError("data.seed must be unsigned")


@dataclass
class Item:
    image: np.ndarray  # uint8, (H, W)
    class_id: int
    style_id: int
    instance_id: int

    @property
    def file(self) -> str:
        return f"s{self.style_id}_c{self.class_id:03d}_i{self.instance_id:03d}.pgm"


@dataclass
class StyleDataset:
    config: DatasetConfig
    items: list[Item]

    def __post_init__(self):
        self._index = {(it.class_id, it.instance_id, it.style_id): i for i, it in enumerate(self.items)}

    def __len__(self) -> int:
        return len(self.items)

    @property
    def styles(self) -> list[str]:
        return self.config.styles

    def gallery_index(self, idx: int) -> int:
        it = self.items[idx]
        return self._index[(it.class_id, it.instance_id, 0)]

    def indices(self, style_id: int | None = None, instances: set | None = None) -> list[int]:
        """Item indices, optionally filtered by style and by (class_id, instance_id) membership."""
        return [
            i
            for i, it in enumerate(self.items)
            if (style_id is None or it.style_id == style_id)
            and (instances is None or (it.class_id, it.instance_id) in instances)
        ]

    def images(self, idx) -> np.ndarray:
        """Float images in [0, 1] with shape (len(idx), H, W)."""
        return np.stack([self.items[i].image for i in idx]).astype(np.float32) / 255.0

    def __eq__(self, other) -> bool:
        if not isinstance(other, StyleDataset) or asdict(self.config) != asdict(other.config):
            return False
        if len(self.items) != len(other.items):
            return False
        return all(
            (a.class_id, a.style_id, a.instance_id) == (b.class_id, b.style_id, b.instance_id)
            and np.array_equal(a.image, b.image)
            for a, b in zip(self.items, other.items)
        )


# -- geometry -----------------------------------------------------------------

def _class_template(seed: int, class_id: int) -> list[dict]:
    rng = np.random.default_rng([seed, 0, class_id])
    parts = []
    for _ in range(int(rng.integers(2, 4))):
        kind = ["polygon", "ellipse", "stroke"][int(rng.integers(0, 3))]
        part = {
            "kind": kind,
            "center": rng.uniform(-0.35, 0.35, size=2),
            "size": rng.uniform(0.2, 0.45, size=2),
            "angle": rng.uniform(0, np.pi),
            "tone": rng.uniform(0.45, 1.0),
        }
        if kind == "polygon":
            n = int(rng.integers(3, 7))
            theta = np.sort(rng.uniform(0, 2 * np.pi, size=n))
            part["vertices"] = np.stack([np.cos(theta), np.sin(theta)], 1) * rng.uniform(0.6, 1.0, size=(n, 1))
        elif kind == "stroke":
            n = int(rng.integers(2, 5))
            part["vertices"] = rng.uniform(-1, 1, size=(n, 2))
            part["width"] = rng.uniform(0.05, 0.1)
        parts.append(part)
    return parts


def _instance_geometry(seed: int, class_id: int, instance_id: int) -> tuple[list[dict], dict]:
    template = _class_template(seed, class_id)
    rng = np.random.default_rng([seed, 1, class_id, instance_id])
    rot = rng.uniform(-0.6, 0.6)
    scale = rng.uniform(0.75, 1.15)
    shift = rng.uniform(-0.2, 0.2, size=2)
    c, s = np.cos(rot), np.sin(rot)
    R = np.array([[c, -s], [s, c]])
    parts = []
    for p in template:
        q = dict(p)
        q["center"] = (R @ (p["center"] + rng.normal(0, 0.05, size=2))) * scale + shift
        q["size"] = p["size"] * scale * rng.uniform(0.85, 1.15, size=2)
        q["angle"] = p["angle"] + rot + rng.normal(0, 0.15)
        q["tone"] = float(np.clip(p["tone"] + rng.normal(0, 0.08), 0.3, 1.0))
        parts.append(q)
    scene = {
        "bg_dir": rng.uniform(0, 2 * np.pi),
        "bg_lo": rng.uniform(0.0, 0.15),
        "bg_hi": rng.uniform(0.15, 0.35),
        "noise_seed": [seed, 2, class_id, instance_id],
        "warp_phase": rng.uniform(0, 2 * np.pi, size=2),
    }
    return parts, scene


def _local_coords(part: dict, X: np.ndarray, Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c, s = np.cos(part["angle"]), np.sin(part["angle"])
    dx, dy = X - part["center"][0], Y - part["center"][1]
    return (c * dx + s * dy) / part["size"][0], (-s * dx + c * dy) / part["size"][1]


def _inside_polygon(px: np.ndarray, py: np.ndarray, verts: np.ndarray) -> np.ndarray:
    inside = np.zeros(px.shape, dtype=bool)
    n = len(verts)
    for i in range(n):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % n]
        crosses = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (px < xint)
    return inside


def _segment_distance(px, py, a, b) -> np.ndarray:
    d = b - a
    t = np.clip(((px - a[0]) * d[0] + (py - a[1]) * d[1]) / max(d @ d, 1e-12), 0, 1)
    return np.hypot(px - (a[0] + t * d[0]), py - (a[1] + t * d[1]))


def _part_mask(part: dict, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    u, v = _local_coords(part, X, Y)
    if part["kind"] == "ellipse":
        return u * u + v * v <= 1.0
    if part["kind"] == "polygon":
        return _inside_polygon(u, v, part["vertices"])
    # stroke: thickness measured in image units, so undo the anisotropic local scaling
    pts = part["vertices"]
    su, sv = part["size"]
    dist = np.full(X.shape, np.inf)
    for a, b in zip(pts[:-1], pts[1:]):
        dist = np.minimum(dist, _segment_distance(u * su, v * sv, a * [su, sv], b * [su, sv]))
    return dist <= part["width"]


def _grid(n: int, warp: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    t = (np.arange(n) + 0.5) / n * 2 - 1
    X, Y = np.meshgrid(t, t)
    if warp is not None:
        X, Y = X + 0.08 * np.sin(3.0 * Y + warp[0]), Y + 0.08 * np.sin(3.0 * X + warp[1])
    return X, Y


def _block_mean(a: np.ndarray, k: int) -> np.ndarray:
    h, w = a.shape
    return a.reshape(h // k, k, w // k, k).mean(axis=(1, 3))


def _to_uint8(a: np.ndarray) -> np.ndarray:
    return np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)


def _render_fill(parts, scene, n_hi, warp=None, texture=True) -> np.ndarray:
    X, Y = _grid(n_hi, warp)
    ang = scene["bg_dir"]
    ramp = (np.cos(ang) * X + np.sin(ang) * Y + 1.5) / 3.0
    img = scene["bg_lo"] + (scene["bg_hi"] - scene["bg_lo"]) * ramp
    if texture:
        noise = np.random.default_rng(scene["noise_seed"]).normal(0, 0.04, size=img.shape)
        img = img + noise
    for p in parts:
        img = np.where(_part_mask(p, X, Y), p["tone"], img)
    return img


def render(parts: list[dict], scene: dict, style: str, size: int) -> np.ndarray:
    n_hi = size * SUPERSAMPLE
    if style == "photo":
        return _to_uint8(_block_mean(_render_fill(parts, scene, n_hi), SUPERSAMPLE))
    if style == "lowres":
        small = _block_mean(_render_fill(parts, scene, n_hi), SUPERSAMPLE * 4)
        return _to_uint8(np.kron(small, np.ones((4, 4))))
    if style == "sketch":
        X, Y = _grid(n_hi)
        edges = np.zeros((n_hi, n_hi), dtype=bool)
        for p in parts:
            m = _part_mask(p, X, Y)
            e = np.zeros_like(m)
            e[1:, :] |= m[1:, :] != m[:-1, :]
            e[:, 1:] |= m[:, 1:] != m[:, :-1]
            edges |= e
        thick = edges.copy()
        thick[1:, :] |= edges[:-1, :]
        thick[:, 1:] |= edges[:, :-1]
        return _to_uint8(1.0 - 0.9 * _block_mean(thick.astype(float), SUPERSAMPLE))
    if style == "art":
        v = _render_fill(parts, scene, n_hi, warp=scene["warp_phase"], texture=False)
        bands = np.floor(np.clip(v, 0, 0.999) * 4) / 3.0
        return _to_uint8(_block_mean(1.0 - 0.85 * bands, SUPERSAMPLE))
    raise ConfigError(f"unknown style {style!r}")


def generate(cfg: DatasetConfig) -> StyleDataset:
    items = []
    for c in range(cfg.n_classes):
        for i in range(cfg.samples_per_class_per_style):
            parts, scene = _instance_geometry(cfg.seed, c, i)
            for sid, style in enumerate(cfg.styles):
                items.append(Item(render(parts, scene, style, cfg.image_size), c, sid, i))
    return StyleDataset(cfg, items)


def split_instances(ds: StyleDataset, eval_fraction: float = 0.2, seed: int = 0) -> tuple[set, set]:
    """Per-class random split of instance ids into (train, eval) sets of (class_id, instance_id)."""
    n = ds.config.samples_per_class_per_style
    n_eval = max(1, int(round(n * eval_fraction))) if n > 1 else 0
    train, evaluation = set(), set()
    for c in range(ds.config.n_classes):
        order = np.random.default_rng([seed, 3, c]).permutation(n)
        evaluation.update((c, int(i)) for i in order[:n_eval])
        train.update((c, int(i)) for i in order[n_eval:])
    return train, evaluation


# -- on-disk format -----------------------------------------------------------

def encode_pgm(image: np.ndarray) -> bytes:
    h, w = image.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + image.astype(np.uint8).tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        fields.append(data[start:pos])
    if fields[0] != b"P5" or fields[3] != b"255":
        raise FormatError("only binary PGM (P5) with maxval 255 is supported")
    w, h = int(fields[1]), int(fields[2])
    pixels = data[pos + 1 :]
    if len(pixels) != w * h:
        raise FormatError(f"PGM payload has {len(pixels)} bytes, expected {w * h}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w).copy()


def write_dataset(ds: StyleDataset, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_COLUMNS)
    for idx, it in enumerate(ds.items):
        blob = encode_pgm(it.image)
        (path / it.file).write_bytes(blob)
        gallery = ds.items[ds.gallery_index(idx)].file
        writer.writerow([it.file, it.class_id, it.style_id, it.instance_id, gallery, f"{zlib.crc32(blob):08x}"])
    (path / "manifest.csv").write_bytes(buf.getvalue().encode("ascii"))
    (path / "dataset.json").write_text(json.dumps(asdict(ds.config), sort_keys=True) + "\n")


def read_dataset(path: str | Path) -> StyleDataset:
    path = Path(path)
    try:
        cfg = DatasetConfig(**json.loads((path / "dataset.json").read_text()))
        manifest = (path / "manifest.csv").read_bytes().decode("ascii")
    except FileNotFoundError as exc:
        raise FormatError(f"missing dataset file: {exc.filename}") from exc
    except (ValueError, TypeError) as exc:
        raise FormatError(f"malformed dataset metadata: {exc}") from exc

    rows = list(csv.reader(io.StringIO(manifest)))
    if not rows or rows[0] != MANIFEST_COLUMNS:
        raise FormatError("manifest header mismatch")
    items = []
    for row in rows[1:]:
        if len(row) != len(MANIFEST_COLUMNS):
            raise FormatError(f"malformed manifest row: {row}")
        file, class_id, style_id, instance_id, gallery_file, crc = row
        try:
            blob = (path / file).read_bytes()
        except FileNotFoundError as exc:
            raise FormatError(f"missing image {file}") from exc
        if f"{zlib.crc32(blob):08x}" != crc:
            raise ChecksumError(f"checksum mismatch for {file}")
        item = Item(decode_pgm(blob), int(class_id), int(style_id), int(instance_id))
        if item.file != file:
            raise FormatError(f"file name {file} does not match its manifest fields")
        items.append(item)
    ds = StyleDataset(cfg, items)
    for idx, row in enumerate(rows[1:]):
        if (idx_g := ds._index.get((ds.items[idx].class_id, ds.items[idx].instance_id, 0))) is None:
            raise FormatError(f"{row[0]} has no gallery counterpart")
        if ds.items[idx_g].file != row[4]:
            raise FormatError(f"{row[0]}: gallery_file {row[4]} disagrees with manifest fields")
    return ds
