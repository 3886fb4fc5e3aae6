"""Relational/text corpus loading, gold links, and entity-level splits.

The corpus holds two sides of the linking problem: tuples in relational
tables (one schema per entity category) and entity mentions in text
(mention surface form plus its containing sentence). Gold links join the
two sides and drive both training and evaluation.
"""

import csv
import io
import json
import logging
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

ATTRIBUTE_KINDS = ("text", "numeric", "categorical")

# Inference thresholds for delimited/XML data that carries no declared types.
CATEGORICAL_MAX_DISTINCT = 32
CATEGORICAL_MAX_LEN = 24


class CorpusError(ValueError):
    """Raised for malformed corpus inputs (XML, tables, split specs)."""


@dataclass(frozen=True)
class RelationSchema:
    """A relation with ordered, typed attributes and foreign keys.

    Attribute order is fixed: the tuple vector layout concatenates
    per-attribute sections in exactly this order.
    """

    name: str
    attributes: tuple  # of (name, kind) pairs
    foreign_keys: tuple = ()  # of (name, target_relation) pairs

    def __post_init__(self):
        names = [a for a, _ in self.attributes]
        if len(set(names)) != len(names):
            raise CorpusError(f"duplicate attribute names in schema {self.name!r}")
        for _, kind in self.attributes:
            if kind not in ATTRIBUTE_KINDS:
                raise CorpusError(f"unknown attribute kind {kind!r} in schema {self.name!r}")

    @property
    def attribute_names(self):
        return [a for a, _ in self.attributes]

    def kind_of(self, attribute: str) -> str:
        for a, kind in self.attributes:
            if a == attribute:
                return kind
        raise CorpusError(f"attribute {attribute!r} not declared in schema {self.name!r}")

    def text_attributes(self):
        return [a for a, kind in self.attributes if kind == "text"]


@dataclass(frozen=True)
class TupleRecord:
    """One row of a relation. Missing attribute values are NULL.

    ``key`` is the record's primary key; ``entity`` names the real-world
    entity the record describes (several records may describe the same
    entity with different attribute subsets).
    """

    relation: str
    key: str
    entity: str
    values: dict  # attribute name -> scalar (absent = NULL)
    fk_values: dict = field(default_factory=dict)  # fk name -> list of target keys

    def value(self, attribute: str):
        return self.values.get(attribute)

    def fk_targets(self, fk_name: str):
        return self.fk_values.get(fk_name, [])


@dataclass(frozen=True)
class TextMention:
    """An entity occurrence in text: span, surface form, covering sentence."""

    id: str
    span: tuple  # (start, end) character offsets, document-relative
    mention_text: str
    sentence_text: str
    entity_category: str | None = None

    def __post_init__(self):
        start, end = self.span
        if not (0 <= start < end):
            raise CorpusError(f"mention {self.id!r}: invalid span {self.span}")
        if not self.mention_text:
            raise CorpusError(f"mention {self.id!r}: empty mention text")


@dataclass(frozen=True)
class GoldLink:
    """A labelled positive pair between a tuple record and a text mention."""

    tuple_key: str
    mention_id: str


@dataclass(frozen=True)
class SplitSpec:
    """Deterministic entity-level split parameters."""

    seed: int = 0
    unseen_fraction: float = 0.20
    test_fraction_of_seen: float = 0.20

    def __post_init__(self):
        for name in ("unseen_fraction", "test_fraction_of_seen"):
            f = getattr(self, name)
            if not (0.0 < f < 1.0):
                raise CorpusError(f"{name} must lie in (0, 1), got {f}")


@dataclass(frozen=True)
class Splits:
    """Disjoint train/test/unseen entity sets covering the input."""

    train: frozenset
    test: frozenset
    unseen: frozenset
    seed: int

    def to_dict(self):
        return {
            "seed": self.seed,
            "splits": {
                "train": sorted(self.train),
                "test": sorted(self.test),
                "unseen": sorted(self.unseen),
            },
        }

    @classmethod
    def from_dict(cls, d):
        s = d["splits"]
        return cls(
            train=frozenset(s["train"]),
            test=frozenset(s["test"]),
            unseen=frozenset(s["unseen"]),
            seed=d["seed"],
        )


@dataclass(frozen=True)
class CategoryStats:
    instances: int
    tuples: int
    sentences: int
    sentences_per_instance: float
    columns: int
    avg_tuple_density: float


class Corpus:
    """An immutable, loaded corpus: schemas, tuple records, mentions, links."""

    def __init__(self, schemas, tuples, mentions, links):
        self.schemas = dict(schemas)
        self.tuples = dict(tuples)
        self.mentions = dict(mentions)
        self.links = list(links)
        self._validate()
        self._index()

    def _validate(self):
        for schema in self.schemas.values():
            for fk_name, target in schema.foreign_keys:
                if target not in self.schemas:
                    raise CorpusError(
                        f"schema {schema.name!r}: foreign key {fk_name!r} targets "
                        f"undeclared relation {target!r}"
                    )
        for link in self.links:
            if link.tuple_key not in self.tuples:
                raise CorpusError(f"gold link references unknown tuple {link.tuple_key!r}")
            if link.mention_id not in self.mentions:
                raise CorpusError(f"gold link references unknown mention {link.mention_id!r}")
        for rec in self.tuples.values():
            if rec.relation not in self.schemas:
                raise CorpusError(f"tuple {rec.key!r} references unknown relation {rec.relation!r}")
        self.dangling_fks = [
            (rec.key, fk, target)
            for rec in self.tuples.values()
            for fk, targets in rec.fk_values.items()
            for target in targets
            if target not in self.tuples
        ]
        if self.dangling_fks:
            logger.warning("corpus has %d dangling foreign-key targets", len(self.dangling_fks))

    def _index(self):
        self.links_by_tuple = {}
        self.links_by_mention = {}
        for link in self.links:
            self.links_by_tuple.setdefault(link.tuple_key, []).append(link.mention_id)
            self.links_by_mention.setdefault(link.mention_id, []).append(link.tuple_key)
        self.tuples_by_entity = {}
        for rec in self.tuples.values():
            self.tuples_by_entity.setdefault(rec.entity, []).append(rec.key)
        self.entity_category = {}
        for rec in self.tuples.values():
            self.entity_category.setdefault(rec.entity, rec.relation)
        # mentions reachable from an entity via gold links
        self.mentions_by_entity = {}
        for link in self.links:
            entity = self.tuples[link.tuple_key].entity
            self.mentions_by_entity.setdefault(entity, [])
            if link.mention_id not in self.mentions_by_entity[entity]:
                self.mentions_by_entity[entity].append(link.mention_id)

    def linked_entities(self):
        """Entities that participate in at least one gold link, sorted."""
        return sorted(self.mentions_by_entity)

    def categories(self):
        return sorted(self.schemas)

    def tuples_of_category(self, category):
        return [r for r in self.tuples.values() if r.relation == category]

    def mentions_of_category(self, category):
        return [m for m in self.mentions.values() if m.entity_category == category]

    def links_of_category(self, category):
        return [l for l in self.links if self.tuples[l.tuple_key].relation == category]

    def stats(self):
        return corpus_stats(self)

    def to_dict(self):
        return {
            "format_version": 1,
            "schemas": {
                name: {
                    "attributes": [list(a) for a in s.attributes],
                    "foreign_keys": [list(f) for f in s.foreign_keys],
                }
                for name, s in sorted(self.schemas.items())
            },
            "tuples": [
                {
                    "relation": r.relation,
                    "key": r.key,
                    "entity": r.entity,
                    "values": r.values,
                    "fk_values": r.fk_values,
                }
                for r in self.tuples.values()
            ],
            "mentions": [
                {
                    "id": m.id,
                    "span": list(m.span),
                    "mention_text": m.mention_text,
                    "sentence_text": m.sentence_text,
                    "entity_category": m.entity_category,
                }
                for m in self.mentions.values()
            ],
            "links": [[l.tuple_key, l.mention_id] for l in self.links],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format_version") != 1:
            raise CorpusError(
                f"unsupported corpus format version {d.get('format_version')!r}; expected 1"
            )
        schemas = {
            name: RelationSchema(
                name=name,
                attributes=tuple((a, k) for a, k in s["attributes"]),
                foreign_keys=tuple((f, t) for f, t in s["foreign_keys"]),
            )
            for name, s in d["schemas"].items()
        }
        tuples = {
            t["key"]: TupleRecord(
                relation=t["relation"],
                key=t["key"],
                entity=t["entity"],
                values=t["values"],
                fk_values=t["fk_values"],
            )
            for t in d["tuples"]
        }
        mentions = {
            m["id"]: TextMention(
                id=m["id"],
                span=tuple(m["span"]),
                mention_text=m["mention_text"],
                sentence_text=m["sentence_text"],
                entity_category=m["entity_category"],
            )
            for m in d["mentions"]
        }
        links = [GoldLink(t, m) for t, m in d["links"]]
        return cls(schemas, tuples, mentions, links)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, sort_keys=True, indent=1)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


# ---------------------------------------------------------------------------
# WebNLG-like XML ingestion
# ---------------------------------------------------------------------------

_WS = re.compile(r"\s+")


def _clean_text(s):
    return _WS.sub(" ", s).strip()


def _surface(name):
    """Entity identifier to surface form: underscores become spaces."""
    return _clean_text(name.replace("_", " "))


def _clean_value(obj):
    obj = _clean_text(obj)
    if len(obj) >= 2 and obj[0] == '"' and obj[-1] == '"':
        obj = obj[1:-1].strip()
    return obj.replace("_", " ")


@dataclass
class ParsedEntry:
    """One parsed entry: records keyed by subject, mentions, gold links."""

    category: str
    records: list  # of TupleRecord, root first
    mentions: list  # of TextMention
    links: list  # of GoldLink


def parse_webnlg_entry(xml_text, entry_id=None):
    """Parse a single entry element into tuple records, mentions and links.

    Each triple subject becomes one record whose attributes are predicate
    names. A triple whose object is itself a subject of the same entry
    additionally yields a foreign key to that subject's record. Each
    lexicalization yields one mention of the entry's root subject (the
    subject never used as an object) plus a gold link to the root record.
    """
    if isinstance(xml_text, bytes):
        xml_text = xml_text.decode("utf-8")
    try:
        elem = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        offset = _byte_offset(xml_text, exc.position)
        raise CorpusError(f"malformed XML at byte offset {offset}: {exc}") from exc
    if elem.tag != "entry":
        found = elem.find(".//entry")
        if found is None:
            raise CorpusError("no <entry> element found")
        elem = found
    return _parse_entry_element(elem, entry_id=entry_id)


def _byte_offset(text, position):
    line, column = position
    lines = text.splitlines(keepends=True)
    if line > len(lines):
        return len(text.encode("utf-8"))
    prefix = "".join(lines[: line - 1]) + lines[line - 1][:column]
    return len(prefix.encode("utf-8"))


def _parse_entry_element(elem, entry_id=None):
    eid = entry_id or elem.get("eid") or "entry"
    category = elem.get("category") or "Uncategorized"

    tripleset = elem.find("modifiedtripleset")
    if tripleset is None:
        tripleset = elem.find("originaltripleset")
    triples = []
    if tripleset is not None:
        for mt in tripleset:
            text = _clean_text(mt.text or "")
            if not text:
                continue
            parts = [p.strip() for p in text.split("|", 2)]
            if len(parts) != 3 or not all(parts):
                raise CorpusError(f"entry {eid!r}: malformed triple {text!r}")
            triples.append(tuple(parts))
    if not triples:
        raise CorpusError(f"entry {eid!r} rejected: empty triple set")

    lexes = [
        _clean_text(lex.text or "")
        for lex in elem.findall("lex")
        if _clean_text(lex.text or "")
    ]
    if not lexes:
        raise CorpusError(f"entry {eid!r} rejected: no lexicalization")

    by_subject = {}
    for subj, pred, obj in triples:
        by_subject.setdefault(subj, []).append((pred, obj))
    subjects = list(by_subject)
    objects = {obj for _, _, obj in triples}
    roots = [s for s in subjects if s not in objects]
    root = roots[0] if roots else subjects[0]

    records = []
    ordered = [root] + [s for s in subjects if s != root]
    for subj in ordered:
        values, fk_values = {}, {}
        for pred, obj in by_subject[subj]:
            cleaned = _clean_value(obj)
            if pred in values:
                values[pred] = f"{values[pred]}; {cleaned}"
            else:
                values[pred] = cleaned
            if obj in by_subject and obj != subj:
                fk_values.setdefault(pred, [])
                if obj not in fk_values[pred]:
                    fk_values[pred].append(obj)
        records.append(
            TupleRecord(relation=category, key=subj, entity=subj, values=values, fk_values=fk_values)
        )

    mention_text = _surface(root)
    mentions, links = [], []
    for i, sentence in enumerate(lexes, start=1):
        mid = f"{eid}.{i}"
        lowered, needle = sentence.lower(), mention_text.lower()
        pos = lowered.find(needle)
        span = (pos, pos + len(mention_text)) if pos >= 0 else (0, len(mention_text))
        mentions.append(
            TextMention(
                id=mid,
                span=span,
                mention_text=mention_text,
                sentence_text=sentence,
                entity_category=category,
            )
        )
        links.append(GoldLink(tuple_key=root, mention_id=mid))

    return ParsedEntry(category=category, records=records, mentions=mentions, links=links)


class CorpusBuilder:
    """Accumulates parsed entries and finalizes schemas and indices.

    Records with the same entity and identical content are merged; same
    entity with a different attribute set gets a fresh ``entity#n`` key.
    """

    def __init__(self):
        self._records = {}  # key -> TupleRecord
        self._content = {}  # (entity, content signature) -> key
        self._entity_counts = {}
        self._mentions = {}
        self._links = []
        self._attr_order = {}  # category -> list of attribute names
        self._attr_values = {}  # (category, attribute) -> list of values
        self._fk_order = {}  # category -> list of (fk name, target category)

    def add_entry(self, entry: ParsedEntry):
        key_of_subject = {}
        for rec in entry.records:
            sig = (
                rec.entity,
                tuple(sorted(rec.values.items())),
                tuple(sorted((k, tuple(v)) for k, v in rec.fk_values.items())),
            )
            if sig in self._content:
                key_of_subject[rec.entity] = self._content[sig]
                continue
            n = self._entity_counts.get(rec.entity, 0) + 1
            self._entity_counts[rec.entity] = n
            key = rec.entity if n == 1 else f"{rec.entity}#{n}"
            self._content[sig] = key
            key_of_subject[rec.entity] = key
            self._records[key] = TupleRecord(
                relation=rec.relation,
                key=key,
                entity=rec.entity,
                values=rec.values,
                fk_values=rec.fk_values,
            )
            order = self._attr_order.setdefault(rec.relation, [])
            for attr, value in rec.values.items():
                if attr not in order:
                    order.append(attr)
                self._attr_values.setdefault((rec.relation, attr), []).append(value)
            fks = self._fk_order.setdefault(rec.relation, [])
            for fk_name in rec.fk_values:
                if all(existing != fk_name for existing, _ in fks):
                    fks.append((fk_name, rec.relation))

        # rewrite fk target subjects to the deduplicated record keys
        for rec in entry.records:
            key = key_of_subject[rec.entity]
            stored = self._records[key]
            if stored.fk_values:
                rewritten = {
                    fk: [key_of_subject.get(t, t) for t in targets]
                    for fk, targets in stored.fk_values.items()
                }
                self._records[key] = TupleRecord(
                    relation=stored.relation,
                    key=stored.key,
                    entity=stored.entity,
                    values=stored.values,
                    fk_values=rewritten,
                )

        for mention in entry.mentions:
            if mention.id in self._mentions:
                raise CorpusError(f"duplicate mention id {mention.id!r}")
            self._mentions[mention.id] = mention
        for link in entry.links:
            self._links.append(
                GoldLink(tuple_key=key_of_subject[link.tuple_key], mention_id=link.mention_id)
            )

    def finalize(self):
        schemas = {}
        for category, order in sorted(self._attr_order.items()):
            attributes = tuple(
                (attr, _infer_kind(self._attr_values[(category, attr)])) for attr in order
            )
            schemas[category] = RelationSchema(
                name=category,
                attributes=attributes,
                foreign_keys=tuple(self._fk_order.get(category, [])),
            )
        return Corpus(schemas, self._records, self._mentions, self._links)


def _infer_kind(values):
    non_null = [v for v in values if v not in (None, "")]
    if non_null and all(_parses_numeric(v) for v in non_null):
        return "numeric"
    distinct = set(non_null)
    if distinct and len(distinct) <= CATEGORICAL_MAX_DISTINCT and all(
        len(str(v)) <= CATEGORICAL_MAX_LEN and " " not in str(v) for v in distinct
    ):
        return "categorical"
    return "text"


def _parses_numeric(v):
    try:
        float(str(v).replace(",", ""))
        return True
    except ValueError:
        return False


def load_corpus_xml(source):
    """Load a corpus from WebNLG-like XML (a path or an XML string)."""
    text = source
    if "\n" not in str(source) and not str(source).lstrip().startswith("<"):
        with open(source, encoding="utf-8") as f:
            text = f.read()
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        offset = _byte_offset(text, exc.position)
        raise CorpusError(f"malformed XML at byte offset {offset}: {exc}") from exc
    entries = [root] if root.tag == "entry" else root.findall(".//entry")
    if not entries:
        raise CorpusError("no <entry> elements found")
    builder = CorpusBuilder()
    for i, elem in enumerate(entries, start=1):
        entry_id = elem.get("eid") or f"e{i}"
        builder.add_entry(_parse_entry_element(elem, entry_id=entry_id))
    return builder.finalize()


# ---------------------------------------------------------------------------
# Delimited relational tables
# ---------------------------------------------------------------------------

def load_relation_table(schema: RelationSchema, rows, delimiter=","):
    """Load tuple records from delimited text with a header row.

    Expected header: ``key`` followed by the schema's attribute names and
    foreign-key names in declaration order. Empty cells are NULL; foreign
    key cells hold ``|``-separated target keys.
    """
    if hasattr(rows, "read"):
        reader = csv.reader(rows, delimiter=delimiter)
    else:
        reader = csv.reader(io.StringIO(rows), delimiter=delimiter)
    try:
        header = next(reader)
    except StopIteration:
        raise CorpusError("empty table: missing header row") from None
    expected = ["key"] + schema.attribute_names + [f for f, _ in schema.foreign_keys]
    if header != expected:
        raise CorpusError(
            f"header mismatch for relation {schema.name!r}: expected {expected}, got {header}"
        )

    n_attrs = len(schema.attributes)
    records = []
    for row_no, row in enumerate(reader, start=1):
        if len(row) != len(expected):
            raise CorpusError(
                f"row {row_no}: expected {len(expected)} cells, got {len(row)}"
            )
        key = row[0].strip()
        if not key:
            raise CorpusError(f"row {row_no}: empty key")
        values = {}
        for (attr, kind), cell in zip(schema.attributes, row[1 : 1 + n_attrs]):
            cell = cell.strip()
            if cell == "":
                continue
            if kind == "numeric":
                try:
                    values[attr] = float(cell)
                except ValueError:
                    raise CorpusError(
                        f"row {row_no}, column {attr!r}: cannot parse numeric value {cell!r}"
                    ) from None
            else:
                values[attr] = cell
        fk_values = {}
        for (fk_name, _), cell in zip(schema.foreign_keys, row[1 + n_attrs :]):
            cell = cell.strip()
            if cell:
                fk_values[fk_name] = [t.strip() for t in cell.split("|") if t.strip()]
        records.append(
            TupleRecord(
                relation=schema.name, key=key, entity=key, values=values, fk_values=fk_values
            )
        )
    return records


# ---------------------------------------------------------------------------
# Entity splits
# ---------------------------------------------------------------------------

def make_splits(entity_keys, spec: SplitSpec):
    """Partition entities into train/test/unseen, deterministically per seed.

    ``unseen_fraction`` of the entities is held out entirely; the remainder
    is split into train and test by ``test_fraction_of_seen``.
    """
    keys = sorted(entity_keys)
    n = len(keys)
    if n < 5:
        raise CorpusError(f"need at least 5 entities to split, got {n}")
    rng = np.random.default_rng(spec.seed)
    order = [keys[i] for i in rng.permutation(n)]
    n_unseen = int(round(spec.unseen_fraction * n))
    seen = order[n_unseen:]
    n_test = int(round(spec.test_fraction_of_seen * len(seen)))
    unseen = order[:n_unseen]
    test = seen[:n_test]
    train = seen[n_test:]
    if not (train and test and unseen):
        raise CorpusError(
            f"too few entities ({n}) to populate train/test/unseen with "
            f"fractions {spec.unseen_fraction}/{spec.test_fraction_of_seen}"
        )
    return Splits(
        train=frozenset(train), test=frozenset(test), unseen=frozenset(unseen), seed=spec.seed
    )


def make_stratified_splits(corpus: Corpus, spec: SplitSpec):
    """Split gold-linked entities per category so every category appears
    in all three sets."""
    by_category = {}
    for entity in corpus.linked_entities():
        by_category.setdefault(corpus.entity_category[entity], []).append(entity)
    train, test, unseen = set(), set(), set()
    for i, category in enumerate(sorted(by_category)):
        sub = make_splits(by_category[category], SplitSpec(
            seed=spec.seed + i,
            unseen_fraction=spec.unseen_fraction,
            test_fraction_of_seen=spec.test_fraction_of_seen,
        ))
        train |= sub.train
        test |= sub.test
        unseen |= sub.unseen
    return Splits(
        train=frozenset(train), test=frozenset(test), unseen=frozenset(unseen), seed=spec.seed
    )


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------

def corpus_stats(corpus: Corpus):
    """Per-category statistics: instances, tuples, sentences, density.

    Density is the fraction of non-NULL attribute cells per tuple,
    averaged over the category's tuples (foreign keys excluded).
    """
    out = {}
    for category in corpus.categories():
        schema = corpus.schemas[category]
        records = corpus.tuples_of_category(category)
        mentions = corpus.mentions_of_category(category)
        linked = {
            corpus.tuples[l.tuple_key].entity
            for l in corpus.links
            if corpus.tuples[l.tuple_key].relation == category
        }
        instances = len(linked) if linked else len({r.entity for r in records})
        n_attrs = len(schema.attributes)
        if n_attrs and records:
            density = float(
                np.mean([
                    sum(1 for a in schema.attribute_names if r.values.get(a) not in (None, ""))
                    / n_attrs
                    for r in records
                ])
            )
        else:
            density = 0.0
        out[category] = CategoryStats(
            instances=instances,
            tuples=len(records),
            sentences=len(mentions),
            sentences_per_instance=(len(mentions) / instances) if instances else 0.0,
            columns=n_attrs + len(schema.foreign_keys),
            avg_tuple_density=density,
        )
    return out
