"""Synthetic multi-source product data with planted, locatable instances.

Each category owns a unit "signature" vector; each product jitters its
category signature. A source image is a grid of background noise cells with
the product signature (plus noise) painted into a box whose position and
size are re-drawn for every source.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import SOURCE_TAGS, ConfigError, GenConfig, gen_config_from_dict, to_dict
from .encoders import ImageSample, TextSample
from .numerics import io as tio

CLS_TOKEN = 0


class ManifestError(ValueError):
    pass


@dataclass
class ProductSpec:
    product_id: int
    category_id: int
    signature: np.ndarray
    text: list[int]
    boxes: list[tuple[int, int, int, int]]


def category_signatures(rng: np.random.Generator, cfg: GenConfig, iters: int = 200) -> np.ndarray:
    """Unit vectors, one per category, pushed apart to lower mutual coherence."""
    sig = rng.normal(size=(cfg.num_categories, cfg.d_in))
    sig /= np.linalg.norm(sig, axis=1, keepdims=True)
    for _ in range(iters):
        gram = sig @ sig.T
        np.fill_diagonal(gram, 0.0)
        sig = sig - 0.05 * gram @ sig
        sig /= np.linalg.norm(sig, axis=1, keepdims=True)
    return sig


def _draw_box(rng, cfg: GenConfig) -> tuple[int, int, int, int]:
    w = int(rng.integers(cfg.box_min, cfg.box_max + 1))
    h = int(rng.integers(cfg.box_min, cfg.box_max + 1))
    x1 = int(rng.integers(0, cfg.grid_w - w + 1))
    y1 = int(rng.integers(0, cfg.grid_h - h + 1))
    return (x1, y1, x1 + w, y1 + h)


def box_token_indices(box, grid_w: int) -> np.ndarray:
    x1, y1, x2, y2 = box
    return np.array([y * grid_w + x for y in range(y1, y2) for x in range(x1, x2)], dtype=np.int64)


def render_image(rng, cfg: GenConfig, signature: np.ndarray, box, tag: str) -> ImageSample:
    scale = 1.0 / np.sqrt(cfg.d_in)
    grid = rng.normal(0.0, scale, size=(cfg.grid_h, cfg.grid_w, cfg.d_in))
    x1, y1, x2, y2 = box
    inst = signature + cfg.noise * rng.normal(0.0, scale, size=(y2 - y1, x2 - x1, cfg.d_in))
    grid[y1:y2, x1:x2] = inst
    return ImageSample(cfg.grid_h, cfg.grid_w, grid.reshape(-1, cfg.d_in), tag, tuple(box))


def generate_product(rng, cfg: GenConfig, product_id: int, category_id: int, signatures: np.ndarray):
    """Draw one product: (ProductSpec, [ImageSample per source])."""
    cfg.validate()
    base = signatures[category_id]
    jitter = rng.normal(0.0, 1.0 / np.sqrt(cfg.d_in), size=cfg.d_in)
    sig = base + cfg.product_jitter * jitter
    sig /= np.linalg.norm(sig)
    n_attr = int(rng.integers(cfg.min_attr_tokens, cfg.max_attr_tokens + 1))
    attrs = rng.integers(cfg.num_categories + 1, cfg.vocab_size, size=n_attr)
    text = [category_id + 1] + [int(a) for a in attrs]
    images, boxes = [], []
    for s in range(cfg.sources_per_product):
        box = _draw_box(rng, cfg)
        boxes.append(box)
        images.append(render_image(rng, cfg, sig, box, SOURCE_TAGS[s % len(SOURCE_TAGS)]))
    return ProductSpec(product_id, category_id, sig, text, boxes), images


def category_text(category_id: int) -> list[int]:
    return [category_id + 1]


def _record(spec: ProductSpec, images, paths) -> dict:
    return {
        "product_id": int(spec.product_id),
        "category_id": int(spec.category_id),
        "text": [int(t) for t in spec.text],
        "sources": [
            {"path": p, "tag": im.source_tag, "box": [int(c) for c in im.box]} for p, im in zip(paths, images)
        ],
    }


def generate_dataset(rng, n_products: int, cfg: GenConfig, out_dir, heldout: int = 0) -> Path:
    """Write ``n_products`` (+ ``heldout``) products under ``out_dir``.

    Products go to ``manifest.jsonl`` and the held-out ones to
    ``heldout.jsonl``; both share the same category signatures. Categories
    are assigned round-robin. On any failure every file written is removed.
    Returns the training manifest path.
    """
    cfg.validate()
    out = Path(out_dir)
    created_dir = not out.exists()
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    try:
        (out / "tensors").mkdir(exist_ok=True)
        signatures = category_signatures(rng, cfg)
        splits = {"manifest.jsonl": range(n_products), "heldout.jsonl": range(n_products, n_products + heldout)}
        for fname, ids in splits.items():
            if fname == "heldout.jsonl" and heldout == 0:
                continue
            lines = []
            for pid in ids:
                spec, images = generate_product(rng, cfg, pid, pid % cfg.num_categories, signatures)
                paths = []
                for s, im in enumerate(images):
                    rel = f"tensors/p{pid:06d}_s{s}.etns"
                    target = out / rel
                    tio.save(target, im.patch_features.reshape(cfg.grid_h, cfg.grid_w, cfg.d_in))
                    written.append(target)
                    paths.append(rel)
                lines.append(json.dumps(_record(spec, images, paths), sort_keys=True))
            target = out / fname
            target.write_text("\n".join(lines) + "\n", encoding="utf-8")
            written.append(target)
        meta = out / "gen_config.json"
        meta.write_text(json.dumps(to_dict(cfg), sort_keys=True, indent=2) + "\n", encoding="utf-8")
        written.append(meta)
    except BaseException:
        for p in written:
            p.unlink(missing_ok=True)
        if created_dir:
            shutil.rmtree(out, ignore_errors=True)
        raise
    return out / "manifest.jsonl"


class Dataset:
    """Lazily loaded products from a JSON-lines manifest."""

    def __init__(self, records: list[dict], root: Path, vocab_size: int = 256):
        self.records = records
        self.root = Path(root)
        self.vocab_size = vocab_size
        self._cache: dict[tuple[int, int], ImageSample] = {}

    def __len__(self) -> int:
        return len(self.records)

    def num_sources(self, i: int) -> int:
        return len(self.records[i]["sources"])

    def product_id(self, i: int) -> int:
        return self.records[i]["product_id"]

    def category(self, i: int) -> int:
        return self.records[i]["category_id"]

    def text(self, i: int) -> TextSample:
        return TextSample(self.records[i]["text"], self.vocab_size)

    def image(self, i: int, s: int) -> ImageSample:
        key = (i, s)
        if key not in self._cache:
            src = self.records[i]["sources"][s]
            arr = tio.load(self.root / src["path"])
            if arr.ndim != 3:
                raise ManifestError(f"{src['path']}: expected a (grid_h, grid_w, d_in) tensor")
            gh, gw, _ = arr.shape
            self._cache[key] = ImageSample(gh, gw, arr.reshape(gh * gw, -1), src["tag"], tuple(src["box"]))
        return self._cache[key]

    @property
    def grid(self) -> tuple[int, int, int]:
        s = self.image(0, 0)
        return s.grid_h, s.grid_w, s.patch_features.shape[1]

    def gen_config(self) -> GenConfig | None:
        meta = self.root / "gen_config.json"
        if not meta.exists():
            return None
        return gen_config_from_dict(json.loads(meta.read_text(encoding="utf-8")))


def _check_record(rec, lineno: int, path) -> None:
    def bad(msg):
        raise ManifestError(f"{path}:{lineno}: {msg}")

    if not isinstance(rec, dict):
        bad("record is not an object")
    for key in ("product_id", "category_id", "text", "sources"):
        if key not in rec:
            bad(f"missing field {key!r}")
    if not isinstance(rec["product_id"], int) or rec["product_id"] < 0:
        bad("product_id must be a non-negative integer")
    if not isinstance(rec["category_id"], int) or rec["category_id"] < 0:
        bad("category_id must be a non-negative integer")
    if not isinstance(rec["text"], list) or not all(isinstance(t, int) and t >= 0 for t in rec["text"]):
        bad("text must be a list of token ids")
    if not isinstance(rec["sources"], list) or not rec["sources"]:
        bad("sources must be a non-empty list")
    for src in rec["sources"]:
        if not isinstance(src, dict) or set(src) != {"path", "tag", "box"}:
            bad("each source needs exactly path, tag, box")
        if src["tag"] not in SOURCE_TAGS:
            bad(f"unknown source tag {src['tag']!r}")
        box = src["box"]
        if not (isinstance(box, list) and len(box) == 4 and box[2] > box[0] and box[3] > box[1] and min(box) >= 0):
            bad(f"invalid box {box!r}")


def load_manifest(path, vocab_size: int = 256) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            _check_record(rec, lineno, path)
            records.append(rec)
    if not records:
        raise ManifestError(f"{path}: no records")
    return Dataset(records, path.parent, vocab_size)


def augment(rng, sample: ImageSample, noise: float = 0.1) -> ImageSample:
    """Horizontal flip (with probability 1/2) plus small Gaussian noise."""
    feats = sample.patch_features.reshape(sample.grid_h, sample.grid_w, -1)
    box = sample.box
    if rng.random() < 0.5:
        feats = feats[:, ::-1]
        if box is not None:
            x1, y1, x2, y2 = box
            box = (sample.grid_w - x2, y1, sample.grid_w - x1, y2)
    feats = feats + noise * rng.normal(0.0, 1.0 / np.sqrt(feats.shape[-1]), size=feats.shape)
    return ImageSample(sample.grid_h, sample.grid_w, feats.reshape(sample.num_tokens, -1), sample.source_tag, box)


__all__ = [
    "ConfigError",
    "Dataset",
    "ManifestError",
    "ProductSpec",
    "augment",
    "box_token_indices",
    "category_signatures",
    "category_text",
    "generate_dataset",
    "generate_product",
    "load_manifest",
]
