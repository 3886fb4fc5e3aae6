"""Raw vector representations of tuple records and text mentions.

Tuples are vectorized attribute by attribute (text encoder output, normalized
numerics, one-hot categoricals) plus summed foreign-key target vectors and
per-field presence bits, concatenated in schema order. Mentions concatenate
the encodings of the mention surface form and of its covering sentence.
"""

import hashlib
import json
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from .corpus import RelationSchema


class VectorizeError(ValueError):
    """Raised for schema/model mismatches and malformed vector files."""


class TextEncoder:
    """Interface: deterministic, total mapping from strings to f64 vectors."""

    dim: int

    def encode(self, text: str) -> np.ndarray:
        raise NotImplementedError

    def config(self) -> dict:
        raise NotImplementedError


_WORD = re.compile(r"\w+")


class HashingEncoder(TextEncoder):
    """Signed feature hashing over character 3-grams and word unigrams.

    Deterministic across processes: features are hashed with keyed BLAKE2b
    (the interpreter's built-in ``hash`` is salted per process). The output
    is L2-normalized when any feature was extracted, otherwise all-zero.
    """

    def __init__(self, dim=256, seed=0):
        if dim <= 0:
            raise VectorizeError(f"encoder dim must be positive, got {dim}")
        self.dim = int(dim)
        self.seed = int(seed)
        self._key = struct.pack("<q", self.seed)

    def _hash(self, namespace: bytes, feature: str) -> int:
        digest = hashlib.blake2b(
            namespace + b"\x1f" + feature.encode("utf-8"), digest_size=8, key=self._key
        ).digest()
        return int.from_bytes(digest, "little")

    def features(self, text: str):
        """All (namespace, feature) pairs of a text, with repetition."""
        feats = []
        for i in range(len(text) - 2):
            feats.append((b"c3", text[i : i + 3]))
        for word in _WORD.findall(text.lower()):
            feats.append((b"w", word))
        return feats

    def encode(self, text: str) -> np.ndarray:
        out = np.zeros(self.dim, dtype=np.float64)
        for namespace, feature in self.features(text):
            h = self._hash(namespace, feature)
            sign = 1.0 if h & 1 == 0 else -1.0
            out[(h >> 1) % self.dim] += sign
        norm = float(np.linalg.norm(out))
        if norm > 0.0:
            out /= norm
        return out

    def config(self) -> dict:
        return {"type": "hashing", "dim": self.dim, "seed": self.seed}


def encoder_from_config(config: dict) -> TextEncoder:
    if config.get("type") != "hashing":
        raise VectorizeError(f"unknown encoder type {config.get('type')!r}")
    return HashingEncoder(dim=config["dim"], seed=config["seed"])


@dataclass
class VectorizeDiagnostics:
    """Counters for degenerate inputs seen while vectorizing."""

    dangling_fk_targets: int = 0


@dataclass
class VectorizerModel:
    """Fitted per-schema vectorization state.

    ``numeric_stats`` maps attribute name to (mean, population std) over the
    non-NULL fit values; ``vocabularies`` map categorical attributes to their
    value->slot dictionaries with a trailing UNK slot. ``fk_depth`` bounds the
    foreign-key recursion; at depth 0 the fk sections are dropped entirely, so
    cycles terminate and a referenced tuple contributes its attribute sections
    and presence bits only.
    """

    schema: RelationSchema
    encoder: TextEncoder
    numeric_stats: dict  # attr -> (mean, std)
    vocabularies: dict  # attr -> {value: index}, UNK last
    fk_depth: int = 1
    diagnostics: VectorizeDiagnostics = field(default_factory=VectorizeDiagnostics)

    UNK = "\x00UNK"

    # -- layout ------------------------------------------------------------

    def attribute_dim(self, attribute: str) -> int:
        kind = self.schema.kind_of(attribute)
        if kind == "text":
            return self.encoder.dim
        if kind == "numeric":
            return 1
        return len(self.vocabularies[attribute])

    def presence_dim(self) -> int:
        return len(self.schema.attributes) + len(self.schema.foreign_keys)

    def base_dim(self) -> int:
        """Tuple-vector dim at fk depth 0 (attribute sections + presence)."""
        return sum(self.attribute_dim(a) for a in self.schema.attribute_names) + self.presence_dim()

    def fk_section_dim(self, depth=None) -> int:
        depth = self.fk_depth if depth is None else depth
        return self.dim(depth - 1)

    def dim(self, depth=None) -> int:
        depth = self.fk_depth if depth is None else depth
        d = self.base_dim()
        if depth >= 1:
            d += len(self.schema.foreign_keys) * self.dim(depth - 1)
        return d

    def layout(self):
        """Ordered (section, name, offset, dim) entries of the tuple vector."""
        entries, offset = [], 0
        for attr in self.schema.attribute_names:
            d = self.attribute_dim(attr)
            entries.append(("attr", attr, offset, d))
            offset += d
        fk_dim = self.fk_section_dim()
        for fk_name, _ in self.schema.foreign_keys:
            entries.append(("fk", fk_name, offset, fk_dim))
            offset += fk_dim
        entries.append(("presence", "", offset, self.presence_dim()))
        return entries

    # -- serialization -----------------------------------------------------

    def to_dict(self):
        return {
            "format_version": 1,
            "schema": {
                "name": self.schema.name,
                "attributes": [list(a) for a in self.schema.attributes],
                "foreign_keys": [list(f) for f in self.schema.foreign_keys],
            },
            "encoder": self.encoder.config(),
            "numeric_stats": {a: list(s) for a, s in sorted(self.numeric_stats.items())},
            "vocabularies": {
                a: sorted(v, key=v.get) for a, v in sorted(self.vocabularies.items())
            },
            "fk_depth": self.fk_depth,
            # informative; recomputed from the schema and encoder on load
            "layout": [list(entry) for entry in self.layout()],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format_version") != 1:
            raise VectorizeError(
                f"unsupported vectorizer format version {d.get('format_version')!r}; expected 1"
            )
        schema = RelationSchema(
            name=d["schema"]["name"],
            attributes=tuple((a, k) for a, k in d["schema"]["attributes"]),
            foreign_keys=tuple((f, t) for f, t in d["schema"]["foreign_keys"]),
        )
        return cls(
            schema=schema,
            encoder=encoder_from_config(d["encoder"]),
            numeric_stats={a: (s[0], s[1]) for a, s in d["numeric_stats"].items()},
            vocabularies={a: {v: i for i, v in enumerate(vals)} for a, vals in d["vocabularies"].items()},
            fk_depth=d["fk_depth"],
        )

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, sort_keys=True, indent=1)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def fit_vectorizer(tuples, schema: RelationSchema, encoder: TextEncoder, fk_depth=1):
    """Fit numeric stats and categorical vocabularies over a tuple set.

    Numeric attributes get mean and population standard deviation over
    their non-NULL values (mean 0, std 1 when there are none or variance
    is zero). Categorical vocabularies are the sorted distinct values plus
    one reserved UNK slot for unseen values at apply time.
    """
    records = list(tuples)
    if not records:
        raise VectorizeError("cannot fit a vectorizer on an empty tuple set")
    for rec in records:
        if rec.relation != schema.name:
            raise VectorizeError(
                f"tuple {rec.key!r} belongs to relation {rec.relation!r}, not {schema.name!r}"
            )
        for attr in rec.values:
            schema.kind_of(attr)

    numeric_stats, vocabularies = {}, {}
    for attr, kind in schema.attributes:
        if kind == "numeric":
            vals = [float(rec.values[attr]) for rec in records if rec.values.get(attr) not in (None, "")]
            if vals:
                arr = np.asarray(vals, dtype=np.float64)
                mean = float(arr.mean())
                std = float(arr.std())  # population std
                if std == 0.0:
                    mean, std = (mean, 1.0)
            else:
                mean, std = 0.0, 1.0
            if not (np.isfinite(mean) and np.isfinite(std)):
                raise VectorizeError(f"non-finite stats for numeric attribute {attr!r}")
            numeric_stats[attr] = (mean, std)
        elif kind == "categorical":
            seen = sorted(
                {str(rec.values[attr]) for rec in records if rec.values.get(attr) not in (None, "")}
            )
            vocab = {v: i for i, v in enumerate(seen)}
            vocab[VectorizerModel.UNK] = len(vocab)
            vocabularies[attr] = vocab
    return VectorizerModel(
        schema=schema,
        encoder=encoder,
        numeric_stats=numeric_stats,
        vocabularies=vocabularies,
        fk_depth=fk_depth,
    )


def vectorize_attribute(model: VectorizerModel, attribute: str, value) -> np.ndarray:
    """One attribute section. NULL values map to the all-zero section."""
    kind = model.schema.kind_of(attribute)
    if kind == "text":
        if value in (None, ""):
            return np.zeros(model.encoder.dim, dtype=np.float64)
        return model.encoder.encode(str(value))
    if kind == "numeric":
        if value in (None, ""):
            return np.zeros(1, dtype=np.float64)
        mean, std = model.numeric_stats[attribute]
        return np.array([(float(value) - mean) / std], dtype=np.float64)
    vocab = model.vocabularies[attribute]
    out = np.zeros(len(vocab), dtype=np.float64)
    if value not in (None, ""):
        out[vocab.get(str(value), vocab[VectorizerModel.UNK])] = 1.0
    return out


def embed_foreign_key(model: VectorizerModel, fk_values, tuple_lookup, depth=None) -> np.ndarray:
    """Component-wise sum of referenced tuples' vectors at depth-1.

    Dangling target keys contribute nothing and are counted in the model's
    diagnostics; an empty target list yields the zero vector.
    """
    depth = model.fk_depth if depth is None else depth
    if depth < 1:
        raise VectorizeError("embed_foreign_key requires depth >= 1")
    out = np.zeros(model.dim(depth - 1), dtype=np.float64)
    for key in fk_values:
        target = tuple_lookup(key) if callable(tuple_lookup) else tuple_lookup.get(key)
        if target is None:
            model.diagnostics.dangling_fk_targets += 1
            continue
        out += vectorize_tuple(model, target, depth=depth - 1, tuple_lookup=tuple_lookup)
    return out


def vectorize_tuple(model: VectorizerModel, rec, depth=None, tuple_lookup=None) -> np.ndarray:
    """Full tuple vector: attribute sections, fk sums, presence bits.

    At depth 0 the foreign-key sections are dropped, which both bounds the
    recursion and excludes a tuple's own fk part from the contribution it
    makes to referencing tuples.
    """
    depth = model.fk_depth if depth is None else depth
    if rec.relation != model.schema.name:
        raise VectorizeError(
            f"tuple {rec.key!r} belongs to relation {rec.relation!r}, not {model.schema.name!r}"
        )
    sections = [
        vectorize_attribute(model, attr, rec.values.get(attr))
        for attr in model.schema.attribute_names
    ]
    if depth >= 1:
        lookup = tuple_lookup if tuple_lookup is not None else {}
        for fk_name, _ in model.schema.foreign_keys:
            sections.append(
                embed_foreign_key(model, rec.fk_targets(fk_name), lookup, depth=depth)
            )
    presence = [
        1.0 if rec.values.get(attr) not in (None, "") else 0.0
        for attr in model.schema.attribute_names
    ] + [1.0 if rec.fk_targets(fk_name) else 0.0 for fk_name, _ in model.schema.foreign_keys]
    sections.append(np.asarray(presence, dtype=np.float64))
    out = np.concatenate(sections) if sections else np.zeros(0)
    if not np.all(np.isfinite(out)):
        raise VectorizeError(f"non-finite components in vector of tuple {rec.key!r}")
    return out


def vectorize_mention(model_or_encoder, mention) -> np.ndarray:
    """Mention vector: encode(mention text) concatenated with encode(sentence)."""
    encoder = getattr(model_or_encoder, "encoder", model_or_encoder)
    return np.concatenate([encoder.encode(mention.mention_text), encoder.encode(mention.sentence_text)])


# ---------------------------------------------------------------------------
# Keyed vector files
# ---------------------------------------------------------------------------

VEC_MAGIC = b"TLVC"
VEC_VERSION = 1


def write_vector_file(path, items):
    """Write keyed vectors: per record a key, a u32 dim, then f64 LE values."""
    if isinstance(items, dict):
        items = items.items()
    items = sorted(items, key=lambda kv: kv[0])
    with open(path, "wb") as f:
        f.write(VEC_MAGIC)
        f.write(struct.pack("<II", VEC_VERSION, len(items)))
        for key, vec in items:
            arr = np.ascontiguousarray(np.asarray(vec, dtype=np.float64), dtype="<f8")
            if arr.ndim != 1:
                raise VectorizeError(f"vector for key {key!r} is not 1-D")
            kb = key.encode("utf-8")
            f.write(struct.pack("<I", len(kb)))
            f.write(kb)
            f.write(struct.pack("<I", arr.shape[0]))
            f.write(arr.tobytes())


def read_vector_file(path, expected_dim=None):
    """Read a keyed vector file back into a key -> vector dict."""
    with open(path, "rb") as f:
        data = f.read()
    view = memoryview(data)
    if data[:4] != VEC_MAGIC:
        raise VectorizeError(f"{path}: not a keyed vector file (bad magic)")
    version, count = struct.unpack_from("<II", view, 4)
    if version != VEC_VERSION:
        raise VectorizeError(f"{path}: vector file version {version} unsupported; expected {VEC_VERSION}")
    pos, out = 12, {}
    for _ in range(count):
        try:
            (klen,) = struct.unpack_from("<I", view, pos)
            pos += 4
            if len(view) < pos + klen:
                raise struct.error("truncated key")
            key = bytes(view[pos : pos + klen]).decode("utf-8")
            pos += klen
            (dim,) = struct.unpack_from("<I", view, pos)
            pos += 4
            end = pos + 8 * dim
            if len(view) < end:
                raise struct.error("truncated vector")
            out[key] = np.frombuffer(view[pos:end], dtype="<f8").astype(np.float64)
            pos = end
        except struct.error as exc:
            raise VectorizeError(f"{path}: truncated or corrupt vector file: {exc}") from exc
        if expected_dim is not None and out[key].shape[0] != expected_dim:
            raise VectorizeError(
                f"{path}: vector for {key!r} has dim {out[key].shape[0]}, expected {expected_dim}"
            )
    if pos != len(data):
        raise VectorizeError(f"{path}: {len(data) - pos} trailing bytes after last record")
    return out
