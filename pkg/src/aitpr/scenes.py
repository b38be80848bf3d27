"""Synthetic scene generator standing in for a detection pipeline.

Scenes are a handful of (category, attribute) objects on a small grid.
Spatial predicates between object pairs are derived from relative grid
positions, so the ground truth is exact and free.  Each scene yields:

* attribute feature vectors, one per object: a fixed unit-norm Gaussian
  prototype per (category, attribute) pair plus optional noise;
* interaction feature vectors, one per relation: a fixed per-predicate
  projection of the two participating object features;
* templated reference captions ("a red block left-of a blue cone").

Everything is pure and seed-driven.  File formats live at the bottom.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    CoverageError,
    DimensionError,
    FeatureError,
    FormatError,
    ParseError,
)

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

CATEGORY_WORDS = ("block", "ball", "cone", "ring", "cube", "disk", "slab", "tube")
ATTRIBUTE_WORDS = ("red", "blue", "green", "yellow", "purple", "orange", "teal", "gray")
PREDICATE_WORDS = ("left-of", "right-of", "above", "below")

# Seed-sequence tags keeping prototype / projection streams disjoint.
_PROTO_TAG = 0x41545052
_INTER_TAG = 0x49545052


@dataclass(frozen=True)
class SceneConfig:
    grid_w: int = 4
    grid_h: int = 4
    n_categories: int = 3
    n_attributes: int = 3
    min_objects: int = 1
    max_objects: int = 6
    relation_density: float = 0.5

    def __post_init__(self):
        if self.grid_w < 2 or self.grid_h < 2:
            raise ConfigError(f"grid must be at least 2x2, got {self.grid_w}x{self.grid_h}")
        if self.n_categories < 2:
            raise ConfigError(f"need at least 2 categories, got {self.n_categories}")
        if self.n_categories > len(CATEGORY_WORDS):
            raise ConfigError(
                f"at most {len(CATEGORY_WORDS)} categories available, got {self.n_categories}"
            )
        if not 1 <= self.n_attributes <= len(ATTRIBUTE_WORDS):
            raise ConfigError(
                f"attribute count must be in 1..{len(ATTRIBUTE_WORDS)}, got {self.n_attributes}"
            )
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigError(
                f"need 1 <= min_objects <= max_objects, got {self.min_objects}..{self.max_objects}"
            )
        if self.max_objects > self.grid_w * self.grid_h:
            raise ConfigError(
                f"max_objects {self.max_objects} exceeds grid capacity {self.grid_w * self.grid_h}"
            )
        if not 0.0 <= self.relation_density <= 1.0:
            raise ConfigError(f"relation_density must be in [0,1], got {self.relation_density}")


@dataclass(frozen=True)
class Scene:
    """objects: (category_id, attribute_id, x, y); relations: (subj, pred, obj)."""

    objects: tuple
    relations: tuple = ()

    def __post_init__(self):
        if len(self.objects) < 1:
            raise ConfigError("a scene needs at least one object")
        for s, p, o in self.relations:
            if not (0 <= s < len(self.objects) and 0 <= o < len(self.objects)) or s == o:
                raise ConfigError(f"relation ({s},{p},{o}) references invalid objects")
            if not 0 <= p < len(PREDICATE_WORDS):
                raise ConfigError(f"unknown predicate id {p}")


def spatial_predicate(sx: int, sy: int, ox: int, oy: int) -> int:
    """Predicate id for subject at (sx,sy) relative to object at (ox,oy).

    Horizontal wins ties; y grows downward, so smaller y is "above".
    """
    if abs(ox - sx) >= abs(oy - sy) and ox != sx:
        return PREDICATE_WORDS.index("left-of" if sx < ox else "right-of")
    return PREDICATE_WORDS.index("above" if sy < oy else "below")


def generate_scene(seed: int, config: SceneConfig) -> Scene:
    """Deterministic scene draw: placements, labels, then pair relations."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    cells = rng.choice(config.grid_w * config.grid_h, size=n, replace=False)
    cats = rng.integers(0, config.n_categories, size=n)
    attrs = rng.integers(0, config.n_attributes, size=n)
    objects = tuple(
        (int(cats[i]), int(attrs[i]), int(cells[i] % config.grid_w), int(cells[i] // config.grid_w))
        for i in range(n)
    )

    relations = []
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() >= config.relation_density:
                continue
            s, o = (i, j) if rng.integers(2) == 0 else (j, i)
            p = spatial_predicate(objects[s][2], objects[s][3], objects[o][2], objects[o][3])
            relations.append((s, p, o))
    if not relations and n >= 2:
        # Guarantee at least one relation for multi-object scenes.
        p = spatial_predicate(objects[0][2], objects[0][3], objects[1][2], objects[1][3])
        relations.append((0, p, 1))
    return Scene(objects=objects, relations=tuple(relations))


@dataclass(frozen=True)
class RegionFeatureSet:
    """Attribute rows v (k1 x D), interaction rows v_prime (k2 x D), mean v_bar."""

    v: np.ndarray
    v_prime: np.ndarray
    v_bar: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.v, dtype=np.float64)
        vp = np.asarray(self.v_prime, dtype=np.float64)
        vb = np.asarray(self.v_bar, dtype=np.float64)
        if v.ndim != 2 or vp.ndim != 2 or vb.ndim != 1:
            raise DimensionError(
                f"expected 2-D v/v_prime and 1-D v_bar, got {v.shape}/{vp.shape}/{vb.shape}"
            )
        if v.shape[0] < 1:
            raise FeatureError("feature set has no attribute rows")
        if v.shape[1] != vb.shape[0] or (vp.size and vp.shape[1] != v.shape[1]):
            raise DimensionError(
                f"inconsistent feature dims: v {v.shape}, v_prime {vp.shape}, v_bar {vb.shape}"
            )
        if np.abs(vb - v.mean(axis=0)).max() > 1e-10:
            raise FeatureError("v_bar does not equal the mean of the attribute rows")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "v_prime", vp.reshape(vp.shape[0], v.shape[1]) if vp.size else vp.reshape(0, v.shape[1]))
        object.__setattr__(self, "v_bar", vb)

    @property
    def dim(self) -> int:
        return self.v.shape[1]


def prototype_vector(category_id: int, attribute_id: int, dim: int) -> np.ndarray:
    """Fixed unit-norm Gaussian prototype for a (category, attribute) pair."""
    rng = np.random.default_rng(np.random.SeedSequence([_PROTO_TAG, category_id, attribute_id, dim]))
    vec = rng.standard_normal(dim)
    return vec / np.linalg.norm(vec)


def interaction_compose(a: np.ndarray, b: np.ndarray, predicate_id: int) -> np.ndarray:
    """tanh(P_p @ concat(a, b)) with a fixed seeded projection per predicate."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"need two equal-length vectors, got {a.shape} and {b.shape}")
    dim = a.shape[0]
    rng = np.random.default_rng(np.random.SeedSequence([_INTER_TAG, predicate_id, dim]))
    proj = rng.standard_normal((dim, 2 * dim)) / np.sqrt(2 * dim)
    return np.tanh(proj @ np.concatenate([a, b]))


def scene_to_features(scene: Scene, dim: int, noise_sigma: float, seed: int) -> RegionFeatureSet:
    if dim < 8:
        raise DimensionError(f"feature dim must be at least 8, got {dim}")
    if len(scene.objects) == 0:
        raise FeatureError("cannot featurize a scene with no objects")
    rng = np.random.default_rng(seed)
    v = np.stack([
        prototype_vector(cat, attr, dim) + noise_sigma * rng.standard_normal(dim)
        for cat, attr, _x, _y in scene.objects
    ])
    if scene.relations:
        v_prime = np.stack([
            interaction_compose(v[s], v[o], p) for s, p, o in scene.relations
        ])
    else:
        v_prime = np.zeros((0, dim))
    return RegionFeatureSet(v=v, v_prime=v_prime, v_bar=v.mean(axis=0))


class Vocabulary:
    """Token/id bijection with four fixed reserved ids (PAD 0, BOS 1, EOS 2, UNK 3)."""

    def __init__(self, tokens):
        tokens = list(tokens)
        seen = set()
        for tok in tokens:
            if tok in seen or tok in RESERVED_TOKENS:
                raise ConfigError(f"duplicate or reserved token in vocabulary: {tok!r}")
            seen.add(tok)
        self._id_to_token = list(RESERVED_TOKENS) + tokens
        self._token_to_id = {t: i for i, t in enumerate(self._id_to_token)}

    def __len__(self):
        return len(self._id_to_token)

    def __contains__(self, token):
        return token in self._token_to_id

    def id_of(self, token: str) -> int:
        """Strict lookup; unknown tokens raise a coverage error naming them."""
        try:
            return self._token_to_id[token]
        except KeyError:
            raise CoverageError(f"vocabulary does not cover token {token!r}") from None

    def encode_token(self, token: str) -> int:
        """Lenient lookup: unknown tokens map to UNK."""
        return self._token_to_id.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        if not 0 <= idx < len(self._id_to_token):
            raise CoverageError(f"vocabulary has no id {idx}")
        return self._id_to_token[idx]

    @property
    def tokens(self):
        return tuple(self._id_to_token[len(RESERVED_TOKENS):])


@dataclass(frozen=True)
class TokenSequence:
    """Caption as vocabulary ids framed BOS ... EOS, no interior framing ids."""

    ids: tuple = field(default_factory=tuple)

    def __post_init__(self):
        ids = tuple(int(i) for i in self.ids)
        if len(ids) < 2 or ids[0] != BOS_ID or ids[-1] != EOS_ID:
            raise FormatError(f"token sequence must be framed BOS..EOS, got {ids}")
        for t in ids[1:-1]:
            if t in (PAD_ID, BOS_ID, EOS_ID):
                raise FormatError(f"framing id {t} appears inside token sequence {ids}")
        object.__setattr__(self, "ids", ids)

    def words(self, vocab: Vocabulary):
        return tuple(vocab.token_of(t) for t in self.ids[1:-1])

    @property
    def length(self) -> int:
        """Interior token count, framing excluded."""
        return len(self.ids) - 2


def build_vocabulary(config: SceneConfig) -> Vocabulary:
    """All words scene captions can use, in a fixed order."""
    return Vocabulary(
        ("a",)
        + ATTRIBUTE_WORDS[: config.n_attributes]
        + CATEGORY_WORDS[: config.n_categories]
        + PREDICATE_WORDS
    )


def caption_words(scene: Scene):
    """Templated word lists, one per relation, then one per isolated object."""
    sentences = []
    covered = set()
    for s, p, o in scene.relations:
        covered.update((s, o))
        cs, as_, _, _ = scene.objects[s]
        co, ao, _, _ = scene.objects[o]
        sentences.append([
            "a", ATTRIBUTE_WORDS[as_], CATEGORY_WORDS[cs],
            PREDICATE_WORDS[p],
            "a", ATTRIBUTE_WORDS[ao], CATEGORY_WORDS[co],
        ])
    for idx, (cat, attr, _x, _y) in enumerate(scene.objects):
        if idx not in covered:
            sentences.append(["a", ATTRIBUTE_WORDS[attr], CATEGORY_WORDS[cat]])
    return sentences


def caption_oracle(scene: Scene, vocab: Vocabulary):
    """Ground-truth references as framed token sequences, one per template."""
    out = []
    for words in caption_words(scene):
        ids = (BOS_ID,) + tuple(vocab.id_of(w) for w in words) + (EOS_ID,)
        out.append(TokenSequence(ids=ids))
    return out


# ---------------------------------------------------------------------------
# File formats.  Features: JSON {"dim": D, "v": [[...]], "v_prime": [[...]]}.
# Captions: one per line, space-separated lowercase tokens.  Vocabulary: one
# token per line, line number = id after the 4 reserved ids.
# ---------------------------------------------------------------------------


def save_features(fs: RegionFeatureSet, path):
    payload = {"dim": fs.dim, "v": fs.v.tolist(), "v_prime": fs.v_prime.tolist()}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def _feature_rows(raw, name, dim):
    if not isinstance(raw, list) or any(not isinstance(r, list) for r in raw):
        raise ParseError(f"field {name!r} must be a list of rows")
    for i, row in enumerate(raw):
        if len(row) != dim:
            raise FormatError(
                f"row {i} of {name!r} has {len(row)} entries, header dim is {dim}"
            )
    arr = np.asarray(raw, dtype=np.float64) if raw else np.zeros((0, dim))
    return arr.reshape(len(raw), dim)


def load_features(path) -> RegionFeatureSet:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(
                f"malformed feature file {path}: {exc.msg} at line {exc.lineno} column {exc.colno}"
            ) from None
    if not isinstance(payload, dict):
        raise ParseError(f"feature file {path} must hold a JSON object")
    for key in ("dim", "v", "v_prime"):
        if key not in payload:
            raise ParseError(f"feature file {path} is missing field {key!r}")
    dim = payload["dim"]
    if not isinstance(dim, int) or dim < 1:
        raise FormatError(f"header dim must be a positive integer, got {dim!r}")
    v = _feature_rows(payload["v"], "v", dim)
    if v.shape[0] == 0:
        raise FormatError(f"feature file {path} contains no attribute rows")
    v_prime = _feature_rows(payload["v_prime"], "v_prime", dim)
    return RegionFeatureSet(v=v, v_prime=v_prime, v_bar=v.mean(axis=0))


def save_captions(captions, vocab: Vocabulary, path):
    with open(path, "w", encoding="utf-8") as fh:
        for seq in captions:
            fh.write(" ".join(seq.words(vocab)) + "\n")


def load_captions(path, vocab: Vocabulary):
    """Caption file to token sequences; unknown words map to UNK."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            words = line.split()
            if not words:
                raise ParseError(f"{path}: line {lineno} is empty")
            ids = (BOS_ID,) + tuple(vocab.encode_token(w) for w in words) + (EOS_ID,)
            out.append(TokenSequence(ids=ids))
    return out


def save_vocabulary(vocab: Vocabulary, path):
    with open(path, "w", encoding="utf-8") as fh:
        for tok in vocab.tokens:
            fh.write(tok + "\n")


def load_vocabulary(path) -> Vocabulary:
    with open(path, "r", encoding="utf-8") as fh:
        tokens = [line.strip() for line in fh if line.strip()]
    return Vocabulary(tokens)
