"""Synthetic attribute-grid retrieval benchmark.

A catalog is the full Cartesian product of small attribute vocabularies
(shape x color x pattern by default).  Each item renders deterministically
to a 3x16x16 image; modification-text triplets pair a query item with a
target that differs in one attribute (image-dominant) or two
(text-dominant).  Everything is a pure function of (schema, sizes, seeds),
and images are always re-rendered from the catalog, never stored.
"""

from __future__ import annotations

import itertools
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, VocabularyError

IMAGE_SIZE = 16
NOISE_SIGMA = 0.05
MAX_TEXT_LEN = 16

SHAPE_VALUES = ("circle", "square", "triangle", "diamond", "cross", "ring", "star", "heart")
COLOR_VALUES = ("red", "green", "blue", "yellow", "cyan", "magenta", "white", "gray")
PATTERN_VALUES = ("solid", "stripes", "dots", "checker")
TEMPLATE_TOKENS = ("replace", "with", "and", "change", "to", "get")

COLOR_RGB = {
    "red": (0.9, 0.15, 0.15),
    "green": (0.15, 0.8, 0.2),
    "blue": (0.15, 0.25, 0.9),
    "yellow": (0.9, 0.85, 0.15),
    "cyan": (0.1, 0.8, 0.8),
    "magenta": (0.85, 0.15, 0.8),
    "white": (0.95, 0.95, 0.95),
    "gray": (0.5, 0.5, 0.5),
}


@dataclass(frozen=True)
class AttributeSchema:
    """Ordered attribute names, each with a token vocabulary."""

    attributes: tuple
    vocab: dict

    def __post_init__(self):
        seen = set()
        for name in self.attributes:
            values = self.vocab.get(name, ())
            if not values:
                raise ParameterError(f"attribute {name!r} has an empty vocabulary")
            for tok in values:
                if tok in seen or tok in TEMPLATE_TOKENS:
                    raise ParameterError(f"token {tok!r} is not unique across vocabularies")
                seen.add(tok)

    @classmethod
    def default(cls, n_shapes=8, n_colors=8, n_patterns=4):
        if not (1 <= n_shapes <= len(SHAPE_VALUES)):
            raise ParameterError(f"shape vocabulary size must be 1..{len(SHAPE_VALUES)}")
        if not (1 <= n_colors <= len(COLOR_VALUES)):
            raise ParameterError(f"color vocabulary size must be 1..{len(COLOR_VALUES)}")
        if not (1 <= n_patterns <= len(PATTERN_VALUES)):
            raise ParameterError(f"pattern vocabulary size must be 1..{len(PATTERN_VALUES)}")
        return cls(
            attributes=("shape", "color", "pattern"),
            vocab={
                "shape": SHAPE_VALUES[:n_shapes],
                "color": COLOR_VALUES[:n_colors],
                "pattern": PATTERN_VALUES[:n_patterns],
            },
        )

    def tokens(self):
        """Closed vocabulary: attribute tokens in schema order, then template words."""
        out = []
        for name in self.attributes:
            out.extend(self.vocab[name])
        out.extend(TEMPLATE_TOKENS)
        return tuple(out)


@dataclass(frozen=True)
class Item:
    id: int
    values: tuple  # one token per schema attribute, in schema order


@dataclass(frozen=True)
class Triplet:
    query_id: int
    target_id: int
    dominance: str  # "image" | "text"
    tokens: tuple


def generate_catalog(schema, seed=0):
    """Full Cartesian product of the vocabularies, ids in lexicographic order."""
    combos = itertools.product(*(schema.vocab[a] for a in schema.attributes))
    return [Item(id=i, values=tuple(c)) for i, c in enumerate(combos)]


# ---------------------------------------------------------------------------
# rendering

def _stencil(shape_name):
    y, x = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64)
    cx = cy = (IMAGE_SIZE - 1) / 2.0
    dx, dy = x - cx, y - cy
    r2 = dx * dx + dy * dy
    if shape_name == "circle":
        return r2 <= 25.0
    if shape_name == "square":
        return (np.abs(dx) <= 3.5) & (np.abs(dy) <= 3.5)
    if shape_name == "triangle":
        return (y >= 3) & (y <= 12) & (np.abs(dx) <= 0.55 * (y - 3))
    if shape_name == "diamond":
        return np.abs(dx) + np.abs(dy) <= 5.5
    if shape_name == "cross":
        arm_v = (np.abs(dx) <= 1.5) & (y >= 3) & (y <= 12)
        arm_h = (np.abs(dy) <= 1.5) & (x >= 3) & (x <= 12)
        return arm_v | arm_h
    if shape_name == "ring":
        return (r2 >= 9.0) & (r2 <= 25.0)
    if shape_name == "star":
        spokes = (
            (np.abs(dx) <= 1.2)
            | (np.abs(dy) <= 1.2)
            | (np.abs(dx - dy) <= 1.7)
            | (np.abs(dx + dy) <= 1.7)
        )
        return spokes & (r2 <= 30.25)
    if shape_name == "heart":
        lobe_l = (x - 5.5) ** 2 + (y - 5.0) ** 2 <= 6.5
        lobe_r = (x - 9.5) ** 2 + (y - 5.0) ** 2 <= 6.5
        tip = (y >= 6) & (y <= 12) & (np.abs(dx) <= 0.8 * (12 - y))
        return lobe_l | lobe_r | tip
    raise VocabularyError(f"unknown shape token {shape_name!r}")


def _pattern_gain(pattern_name):
    y, x = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    if pattern_name == "solid":
        return np.ones((IMAGE_SIZE, IMAGE_SIZE))
    if pattern_name == "stripes":
        return np.where((y // 2) % 2 == 0, 1.0, 0.4)
    if pattern_name == "dots":
        return np.where((y % 3 == 1) & (x % 3 == 1), 1.0, 0.55)
    if pattern_name == "checker":
        return np.where(((y // 2) + (x // 2)) % 2 == 0, 1.0, 0.55)
    raise VocabularyError(f"unknown pattern token {pattern_name!r}")


def render_base(item, schema):
    """Noise-free 3x16x16 image for an item: colored background + patterned stencil."""
    attrs = dict(zip(schema.attributes, item.values))
    rgb = np.asarray(COLOR_RGB[attrs["color"]])[:, None, None]
    mask = _stencil(attrs["shape"])[None, :, :]
    gain = _pattern_gain(attrs["pattern"])[None, :, :]
    background = 0.25 * rgb * np.ones((3, IMAGE_SIZE, IMAGE_SIZE))
    foreground = rgb * gain
    return np.where(mask, foreground, background)


def render(item, schema, seed, sigma=NOISE_SIGMA):
    """Rendered image with seeded Gaussian pixel noise, clipped to [0, 1]."""
    img = render_base(item, schema)
    if sigma > 0:
        rng = np.random.default_rng([seed, item.id])
        img = img + rng.normal(0.0, sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# triplets

def _edit_text(query, target, changed, schema, rng, noise_eta):
    """Template text for the attribute edits, plus the full target description."""
    old_new = [(query.values[i], target.values[i]) for i in changed]
    tokens = ["replace", old_new[0][0], "with", old_new[0][1]]
    for old, new in old_new[1:]:
        tokens.extend(["and", "change", old, "to", new])
    tokens.extend(["and", "get", *target.values])
    if noise_eta > 0 and rng.random() < noise_eta:
        attr_positions = [k for k, tok in enumerate(tokens) if tok not in TEMPLATE_TOKENS]
        k = int(rng.choice(attr_positions))
        vocab = next(v for a, v in schema.vocab.items() if tokens[k] in v)
        alternatives = [t for t in vocab if t != tokens[k]]
        if alternatives:
            tokens[k] = alternatives[int(rng.integers(len(alternatives)))]
    return tuple(tokens)


def make_triplets(catalog, schema, n, text_dominant_fraction, seed, noise_eta=0.0):
    """n modification triplets with the requested text-dominant share.

    Image-dominant triplets change exactly one attribute; text-dominant
    triplets change two (three-edit texts would exceed the 16-token cap).
    """
    if n < 1:
        raise ParameterError(f"triplet count must be >= 1, got {n}")
    if not 0.0 <= text_dominant_fraction <= 1.0:
        raise ParameterError(f"text_dominant_fraction must be in [0, 1], got {text_dominant_fraction}")
    if not 0.0 <= noise_eta <= 1.0:
        raise ParameterError(f"noise_eta must be in [0, 1], got {noise_eta}")
    multi_ok = sum(1 for a in schema.attributes if len(schema.vocab[a]) > 1) >= 2
    if text_dominant_fraction > 0 and not multi_ok:
        raise ParameterError("text-dominant triplets need >= 2 editable attributes")

    by_values = {item.values: item for item in catalog}
    editable = [i for i, a in enumerate(schema.attributes) if len(schema.vocab[a]) > 1]
    if not editable:
        raise ParameterError("schema has no editable attribute (all vocabularies are singletons)")

    n_text = int(round(n * text_dominant_fraction))
    kinds = np.array([2] * n_text + [1] * (n - n_text))
    rng = np.random.default_rng([seed])
    rng.shuffle(kinds)

    triplets = []
    for k in kinds:
        query = catalog[int(rng.integers(len(catalog)))]
        changed = sorted(rng.choice(editable, size=min(k, len(editable)), replace=False).tolist())
        values = list(query.values)
        for i in changed:
            vocab = schema.vocab[schema.attributes[i]]
            options = [v for v in vocab if v != query.values[i]]
            values[i] = options[int(rng.integers(len(options)))]
        target = by_values[tuple(values)]
        tokens = _edit_text(query, target, changed, schema, rng, noise_eta)
        dominance = "image" if k == 1 else "text"
        triplets.append(Triplet(query.id, target.id, dominance, tokens))
    return triplets


def split_triplets(triplets, val_fraction, seed):
    """Disjoint, exhaustive, seed-deterministic train/validation split."""
    if not 0.0 < val_fraction < 1.0:
        raise ParameterError(f"val_fraction must be in (0, 1), got {val_fraction}")
    n = len(triplets)
    n_val = int(round(n * val_fraction))
    if n_val == 0 or n_val == n:
        raise ParameterError(f"split is degenerate: {n - n_val} train / {n_val} val")
    perm = np.random.default_rng([seed]).permutation(n)
    val_idx = sorted(perm[:n_val].tolist())
    train_idx = sorted(perm[n_val:].tolist())
    return [triplets[i] for i in train_idx], [triplets[i] for i in val_idx]


def recover_edits(tokens, schema):
    """Symbolic oracle: read the (old -> new) attribute edits back out of the text.

    Returns {attribute_name: new_value}.  Raises VocabularyError if a token
    that should be an attribute value is not in any vocabulary.
    """

    def vocab_of(tok):
        for name in schema.attributes:
            if tok in schema.vocab[name]:
                return name
        raise VocabularyError(f"token {tok!r} is not an attribute value")

    edits = {}
    toks = list(tokens)
    i = 0
    while i < len(toks):
        if toks[i] == "replace" and i + 3 < len(toks) and toks[i + 2] == "with":
            edits[vocab_of(toks[i + 3])] = toks[i + 3]
            i += 4
        elif toks[i : i + 2] == ["and", "change"] and i + 4 < len(toks) and toks[i + 3] == "to":
            edits[vocab_of(toks[i + 4])] = toks[i + 4]
            i += 5
        elif toks[i : i + 2] == ["and", "get"]:
            break
        else:
            i += 1
    return edits


# ---------------------------------------------------------------------------
# dataset directory

@dataclass
class Dataset:
    """A generated benchmark plus its provenance, as loaded from disk."""

    schema: AttributeSchema
    catalog: list
    train: list
    val: list
    meta: dict
    _image_cache: dict = field(default_factory=dict, repr=False)

    @property
    def render_seed(self):
        return int(self.meta["render_seed"])

    @property
    def sigma(self):
        return float(self.meta["noise_sigma"])

    def image(self, item_id):
        """Rendered image for a catalog item (cached; rendering is deterministic)."""
        if item_id not in self._image_cache:
            self._image_cache[item_id] = render(
                self.catalog[item_id], self.schema, self.render_seed, self.sigma
            )
        return self._image_cache[item_id]

    def images(self, item_ids):
        return np.stack([self.image(i) for i in item_ids])

    def vocabulary(self):
        return self.schema.tokens()


def write_kv(path, pairs):
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in pairs.items():
            fh.write(f"{key} = {value}\n")


def read_kv(path):
    out = {}
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParameterError(f"malformed key-value line: {line!r}")
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def generate_dataset(
    out_dir,
    schema=None,
    n_triplets=4096,
    text_dominant_fraction=0.5,
    val_fraction=0.25,
    seed=0,
    noise_eta=0.0,
    sigma=NOISE_SIGMA,
):
    """Generate and write a full benchmark directory; returns the Dataset."""
    schema = schema or AttributeSchema.default()
    catalog = generate_catalog(schema, seed)
    triplets = make_triplets(catalog, schema, n_triplets, text_dominant_fraction, seed, noise_eta)
    train, val = split_triplets(triplets, val_fraction, seed + 1)

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "catalog.tsv"), "w", encoding="utf-8") as fh:
        fh.write("id\t" + "\t".join(schema.attributes) + "\n")
        for item in catalog:
            fh.write(f"{item.id}\t" + "\t".join(item.values) + "\n")
    for name, rows in (("triplets_train.tsv", train), ("triplets_val.tsv", val)):
        with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
            for t in rows:
                fh.write(f"{t.query_id}\t{t.target_id}\t{t.dominance}\t{' '.join(t.tokens)}\n")

    meta = {"attributes": ",".join(schema.attributes)}
    for name in schema.attributes:
        meta[f"vocab.{name}"] = ",".join(schema.vocab[name])
    meta.update(
        {
            "seed": seed,
            "render_seed": seed,
            "n_triplets": n_triplets,
            "text_dominant_fraction": text_dominant_fraction,
            "val_fraction": val_fraction,
            "noise_eta": noise_eta,
            "noise_sigma": sigma,
        }
    )
    write_kv(os.path.join(out_dir, "meta.kv"), meta)
    return Dataset(schema=schema, catalog=catalog, train=train, val=val, meta={k: str(v) for k, v in meta.items()})


def load_dataset(data_dir):
    """Load a benchmark directory written by generate_dataset."""
    meta = read_kv(os.path.join(data_dir, "meta.kv"))
    attributes = tuple(meta["attributes"].split(","))
    vocab = {name: tuple(meta[f"vocab.{name}"].split(",")) for name in attributes}
    schema = AttributeSchema(attributes=attributes, vocab=vocab)

    catalog = []
    with open(os.path.join(data_dir, "catalog.tsv"), encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header != ["id", *attributes]:
            raise ParameterError(f"catalog header {header} does not match schema {attributes}")
        for line in fh:
            cells = line.rstrip("\n").split("\t")
            catalog.append(Item(id=int(cells[0]), values=tuple(cells[1:])))

    def read_triplets(name):
        rows = []
        with open(os.path.join(data_dir, name), encoding="utf-8") as fh:
            for line in fh:
                q, t, dom, text = line.rstrip("\n").split("\t")
                rows.append(Triplet(int(q), int(t), dom, tuple(text.split(" "))))
        return rows

    return Dataset(
        schema=schema,
        catalog=catalog,
        train=read_triplets("triplets_train.tsv"),
        val=read_triplets("triplets_val.tsv"),
        meta=meta,
    )
