"""Linking workflow: bootstrap matching, semantic retrieval, ranking,
Precision@k evaluation, and the full retrain cycle.

Candidates flow in two directions (tuple anchors retrieving mentions and
mention anchors retrieving tuples); ranked lists use dense ranks so that
equally scored candidates share a rank.
"""

import logging
import re
import time
from dataclasses import dataclass, field

import numpy as np

from . import annindex, neural, vectorize
from .corpus import Corpus, make_stratified_splits

logger = logging.getLogger(__name__)

TUPLE_TO_MENTIONS = "tuple_to_mentions"
MENTION_TO_TUPLES = "mention_to_tuples"
SPLIT_NAMES = ("test", "train", "unseen")
EXACT_SENTINEL_SCORE = 1.0


class LinkerError(RuntimeError):
    """Raised when the linking workflow cannot proceed."""


@dataclass(frozen=True)
class MatchCandidate:
    """A scored tuple/mention pair with its producing strategy."""

    tuple_key: str
    mention_id: str
    score: float
    strategy: str  # "exact" | "semantic"


@dataclass
class LinkResult:
    """Ranked counterparts of one anchor: (counterpart, score, dense rank)."""

    direction: str
    anchor: str
    ranked: list


# ---------------------------------------------------------------------------
# Bootstrap (exact) matching
# ---------------------------------------------------------------------------

_TOKEN = re.compile(r"\w+")


def _tokens(text):
    return _TOKEN.findall(text.lower())


def _contains_sequence(haystack, needle):
    if not needle or len(needle) > len(haystack):
        return False
    for i in range(len(haystack) - len(needle) + 1):
        if haystack[i : i + len(needle)] == needle:
            return True
    return False


def bootstrap_exact_match(tuples, mentions, schemas, name_attributes=None):
    """Seed candidates by exact token containment of name-like attributes.

    A candidate (r, t) is emitted iff the full token sequence of one of r's
    designated name attributes occurs contiguously (case-folded) in t's
    sentence. Name attributes default to the first text attribute of each
    schema. Scores are the 1.0 sentinel: the strategy carries no similarity.
    """
    if hasattr(schemas, "attribute_names"):
        schemas = {schemas.name: schemas}
    name_attributes = dict(name_attributes or {})
    attrs_by_relation = {}
    for relation, schema in schemas.items():
        if relation in name_attributes:
            chosen = name_attributes[relation]
            attrs_by_relation[relation] = [chosen] if isinstance(chosen, str) else list(chosen)
        else:
            text_attrs = schema.text_attributes()
            attrs_by_relation[relation] = text_attrs[:1]
    if not any(attrs_by_relation.values()):
        logger.warning("bootstrap: no text attributes on any schema; emitting no candidates")
        return []

    mention_tokens = [(m, _tokens(m.sentence_text)) for m in mentions]
    candidates = []
    for rec in tuples:
        names = []
        for attr in attrs_by_relation.get(rec.relation, []):
            value = rec.values.get(attr)
            if value not in (None, ""):
                toks = _tokens(str(value))
                if toks:
                    names.append(toks)
        if not names:
            continue
        for mention, sent_toks in mention_tokens:
            if any(_contains_sequence(sent_toks, name) for name in names):
                candidates.append(
                    MatchCandidate(
                        tuple_key=rec.key,
                        mention_id=mention.id,
                        score=EXACT_SENTINEL_SCORE,
                        strategy="exact",
                    )
                )
    return candidates


# ---------------------------------------------------------------------------
# Ranking
# ---------------------------------------------------------------------------

def dense_rank(scored):
    """Sort (id, score) ascending by (score, id) and assign dense ranks."""
    ordered = sorted(scored, key=lambda s: (s[1], s[0]))
    ranked, rank, prev = [], 0, None
    for counterpart, sc in ordered:
        if prev is None or sc != prev:
            rank += 1
            prev = sc
        ranked.append((counterpart, sc, rank))
    return ranked


def rank_candidates(candidates, direction=TUPLE_TO_MENTIONS):
    """Group candidates by anchor and dense-rank each group by score."""
    groups = {}
    for c in candidates:
        anchor, counterpart = (
            (c.tuple_key, c.mention_id)
            if direction == TUPLE_TO_MENTIONS
            else (c.mention_id, c.tuple_key)
        )
        groups.setdefault(anchor, []).append((counterpart, c.score))
    return {
        anchor: LinkResult(direction=direction, anchor=anchor, ranked=dense_rank(scored))
        for anchor, scored in groups.items()
    }


def semantic_link(pair: neural.EmbedderPair, forest: annindex.RpForest, anchor_vector,
                  n, direction=TUPLE_TO_MENTIONS, anchor_id="", search_k=None):
    """Embed an anchor through its side's network and retrieve counterparts."""
    net = pair.net_r if direction == TUPLE_TO_MENTIONS else pair.net_t
    embedded = neural.forward_embed(net, np.asarray(anchor_vector, dtype=np.float64))
    hits = forest.query(embedded, n, search_k=search_k)
    return LinkResult(direction=direction, anchor=anchor_id, ranked=dense_rank(hits))


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    """Precision@k per direction, split, and category, plus overall rows."""

    ks: tuple = (1, 5, 10)
    primary_direction: str = TUPLE_TO_MENTIONS
    # direction -> split -> category -> {"count": int, "excluded": int,
    #                                    "hits": {k: int}, "precision": {k: float}}
    cells: dict = field(default_factory=dict)

    def add_cell(self, direction, split, category, hits, count, excluded=0):
        self.cells.setdefault(direction, {}).setdefault(split, {})[category] = {
            "count": count,
            "excluded": excluded,
            "hits": {int(k): int(hits[k]) for k in self.ks},
            "precision": {int(k): (hits[k] / count if count else 0.0) for k in self.ks},
        }

    def finalize_overall(self):
        for by_split in self.cells.values():
            for by_category in by_split.values():
                cats = [c for name, c in by_category.items() if name != "overall"]
                count = sum(c["count"] for c in cats)
                hits = {k: sum(c["hits"][k] for c in cats) for k in self.ks}
                excluded = sum(c["excluded"] for c in cats)
                by_category["overall"] = {
                    "count": count,
                    "excluded": excluded,
                    "hits": hits,
                    "precision": {k: (hits[k] / count if count else 0.0) for k in self.ks},
                }

    def precision(self, split, category="overall", k=1, direction=None):
        direction = direction or self.primary_direction
        return self.cells[direction][split][category]["precision"][k]

    def categories(self):
        cats = set()
        for by_split in self.cells.values():
            for by_category in by_split.values():
                cats.update(n for n in by_category if n != "overall")
        return sorted(cats)

    def to_dict(self):
        return {
            "format_version": 1,
            "ks": list(self.ks),
            "primary_direction": self.primary_direction,
            "cells": {
                direction: {
                    split: {
                        category: {
                            "count": cell["count"],
                            "excluded": cell["excluded"],
                            "hits": {str(k): v for k, v in sorted(cell["hits"].items())},
                            "precision": {str(k): v for k, v in sorted(cell["precision"].items())},
                        }
                        for category, cell in by_category.items()
                    }
                    for split, by_category in by_split.items()
                }
                for direction, by_split in self.cells.items()
            },
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format_version") != 1:
            raise LinkerError(
                f"unsupported report format version {d.get('format_version')!r}; expected 1"
            )
        report = cls(ks=tuple(d["ks"]), primary_direction=d["primary_direction"])
        for direction, by_split in d["cells"].items():
            for split, by_category in by_split.items():
                for category, cell in by_category.items():
                    report.cells.setdefault(direction, {}).setdefault(split, {})[category] = {
                        "count": cell["count"],
                        "excluded": cell["excluded"],
                        "hits": {int(k): v for k, v in cell["hits"].items()},
                        "precision": {int(k): v for k, v in cell["precision"].items()},
                    }
        return report


def evaluate_precision(results, gold, ks=(1, 5, 10), split="test", category="overall",
                       direction=TUPLE_TO_MENTIONS, report=None):
    """Precision@k over anchors: fraction whose top-k holds a gold counterpart.

    ``results`` maps anchor id to LinkResult; ``gold`` maps anchor id to its
    set of gold counterparts. Top-k membership uses dense ranks. Anchors
    without any gold counterpart are excluded and counted. The cell is added
    to ``report`` (a fresh one when None), which is returned.
    """
    hits = {k: 0 for k in ks}
    evaluated = excluded = 0
    for anchor, result in results.items():
        positives = gold.get(anchor) or set()
        if not positives:
            excluded += 1
            continue
        evaluated += 1
        for k in ks:
            if any(cp in positives and rank <= k for cp, _, rank in result.ranked):
                hits[k] += 1
    if report is None:
        report = EvalReport(ks=tuple(ks), primary_direction=direction)
    report.add_cell(direction, split, category, hits, evaluated, excluded=excluded)
    return report


# ---------------------------------------------------------------------------
# Per-category training
# ---------------------------------------------------------------------------

@dataclass
class CategoryTraining:
    """Trained state for one category before indexing."""

    category: str
    vectorizer: vectorize.VectorizerModel
    pair: neural.EmbedderPair
    adam: neural.AdamState
    tuple_vecs: dict
    mention_vecs: dict
    matches: list
    match_source: str
    loss_history: list


@dataclass
class CategoryModel:
    """Everything trained and built for one category."""

    category: str
    vectorizer: vectorize.VectorizerModel
    pair: neural.EmbedderPair
    tuple_forest: annindex.RpForest
    mention_forest: annindex.RpForest
    tuple_embeddings: dict
    mention_embeddings: dict
    loss_history: list


@dataclass
class RetrainResult:
    pairs: dict  # category -> EmbedderPair
    forests: dict  # category -> (tuple forest, mention forest)
    report: EvalReport
    splits: object
    models: dict  # category -> CategoryModel
    timings: dict


def raw_vectors_for_category(corpus: Corpus, category, model: vectorize.VectorizerModel):
    """Raw (pre-network) vectors for every tuple and mention of a category."""
    lookup = corpus.tuples
    tuple_vecs = {
        rec.key: vectorize.vectorize_tuple(model, rec, tuple_lookup=lookup)
        for rec in corpus.tuples_of_category(category)
    }
    mention_vecs = {
        m.id: vectorize.vectorize_mention(model, m)
        for m in corpus.mentions_of_category(category)
    }
    return tuple_vecs, mention_vecs


def category_matches(corpus: Corpus, category, name_attributes=None):
    """Gold links of the category, or bootstrap candidates when none exist."""
    gold = corpus.links_of_category(category)
    if gold:
        return [(l.tuple_key, l.mention_id) for l in gold], "gold"
    candidates = bootstrap_exact_match(
        corpus.tuples_of_category(category),
        corpus.mentions_of_category(category),
        {category: corpus.schemas[category]},
        name_attributes=name_attributes,
    )
    return [(c.tuple_key, c.mention_id) for c in candidates], "bootstrap"


def train_category(corpus: Corpus, category, config, splits,
                   vmodel: vectorize.VectorizerModel, cat_index=0, progress=None):
    """Vectorize one category, obtain matches, and train its embedder pair.

    Only matches of train-split entities reach the sampler, so test- and
    unseen-split entities never appear in a batch.
    """
    tuple_vecs, mention_vecs = raw_vectors_for_category(corpus, category, vmodel)
    if not mention_vecs:
        raise LinkerError(f"category {category!r} has no mentions to train on")
    matches, source = category_matches(corpus, category, name_attributes=config.name_attributes)
    if not matches:
        raise LinkerError(
            f"category {category!r}: no gold links and the exact-match bootstrap found "
            "zero candidates; supply gold links or configure name_attributes to a text "
            "attribute whose values appear in sentences"
        )
    entity_of = {rec.key: rec.entity for rec in corpus.tuples_of_category(category)}
    train_links = {}
    for tk, mid in matches:
        entity = entity_of[tk]
        if entity in splits.train:
            train_links.setdefault(entity, []).append((tk, mid))
    if not train_links:
        raise LinkerError(f"category {category!r}: no matches among train-split entities")

    d_r = next(iter(tuple_vecs.values())).shape[0]
    d_t = next(iter(mention_vecs.values())).shape[0]
    pair = neural.EmbedderPair.build(
        input_dim_r=d_r,
        input_dim_t=d_t,
        hidden_r=tuple(config.network.hidden_r),
        hidden_t=tuple(config.network.hidden_t),
        joint_dim=config.network.joint_dim,
        margin=config.training.margin,
        keep_prob=config.training.keep_prob,
        seed=config.training.seed + cat_index,
    )
    adam = neural.AdamState(
        lr=config.training.lr,
        decay=config.training.decay,
        decay_every=config.training.decay_every,
    )
    sampler = neural.SamplerState(
        train_links,
        batch_size=config.training.batch_size,
        seed=config.training.seed + cat_index,
    )
    history = neural.train_pair(
        pair, adam, sampler, set(matches), tuple_vecs, mention_vecs,
        batches=config.training.batch_budget, log_fn=progress,
    )
    logger.info("category %s: trained on %d matches (%s)", category, len(matches), source)
    return CategoryTraining(
        category=category,
        vectorizer=vmodel,
        pair=pair,
        adam=adam,
        tuple_vecs=tuple_vecs,
        mention_vecs=mention_vecs,
        matches=matches,
        match_source=source,
        loss_history=history,
    )


def embed_category(pair: neural.EmbedderPair, tuple_vecs, mention_vecs):
    """Project all raw vectors of a category into the joint space."""
    tuple_keys = sorted(tuple_vecs)
    mention_ids = sorted(mention_vecs)
    e_r = pair.embed_tuples(np.stack([tuple_vecs[k] for k in tuple_keys]))
    e_t = pair.embed_mentions(np.stack([mention_vecs[k] for k in mention_ids]))
    return (
        {k: e_r[i] for i, k in enumerate(tuple_keys)},
        {k: e_t[i] for i, k in enumerate(mention_ids)},
    )


def evaluate_category(report, corpus: Corpus, category, splits, pair,
                      tuple_vecs, mention_vecs, tuple_forest, mention_forest,
                      n, search_k=None):
    """Add both link directions of one category to the report, per split."""
    entity_of_tuple = {rec.key: rec.entity for rec in corpus.tuples_of_category(category)}
    entity_of_mention = {}
    for link in corpus.links_of_category(category):
        entity_of_mention.setdefault(link.mention_id, corpus.tuples[link.tuple_key].entity)

    for split in SPLIT_NAMES:
        members = getattr(splits, split)

        results, gold = {}, {}
        for key in sorted(entity_of_tuple):
            if entity_of_tuple[key] not in members or key not in corpus.links_by_tuple:
                continue
            results[key] = semantic_link(
                pair, mention_forest, tuple_vecs[key], n,
                direction=TUPLE_TO_MENTIONS, anchor_id=key, search_k=search_k,
            )
            gold[key] = set(corpus.links_by_tuple[key])
        evaluate_precision(results, gold, ks=report.ks, split=split, category=category,
                           direction=TUPLE_TO_MENTIONS, report=report)

        results, gold = {}, {}
        for mid in sorted(entity_of_mention):
            if entity_of_mention[mid] not in members:
                continue
            results[mid] = semantic_link(
                pair, tuple_forest, mention_vecs[mid], n,
                direction=MENTION_TO_TUPLES, anchor_id=mid, search_k=search_k,
            )
            gold[mid] = set(corpus.links_by_mention.get(mid, ()))
        evaluate_precision(results, gold, ks=report.ks, split=split, category=category,
                           direction=MENTION_TO_TUPLES, report=report)
    return report


# ---------------------------------------------------------------------------
# Retrain cycle
# ---------------------------------------------------------------------------

def retrain_cycle(corpus: Corpus, config, splits=None, progress=None):
    """The full cycle: vectorize, match, train, embed, index, evaluate.

    Unseen-split entities never enter a training batch; they are embedded
    and evaluated with the trained networks as-is. Returns a RetrainResult
    with one trained pair and both direction forests per category.
    """
    timings = {}
    t0 = time.perf_counter()
    if splits is None:
        splits = make_stratified_splits(corpus, config.split_spec())
    report = EvalReport(ks=tuple(config.eval_ks), primary_direction=TUPLE_TO_MENTIONS)
    pairs, forests, models = {}, {}, {}

    for cat_index, category in enumerate(corpus.categories()):
        if not corpus.mentions_of_category(category):
            continue
        stage = time.perf_counter()
        encoder = vectorize.HashingEncoder(dim=config.encoder.dim, seed=config.encoder.seed)
        vmodel = vectorize.fit_vectorizer(
            corpus.tuples_of_category(category), corpus.schemas[category], encoder
        )
        timings["fit"] = timings.get("fit", 0.0) + time.perf_counter() - stage

        stage = time.perf_counter()
        trained = train_category(
            corpus, category, config, splits, vmodel, cat_index=cat_index, progress=progress
        )
        timings["train"] = timings.get("train", 0.0) + time.perf_counter() - stage

        stage = time.perf_counter()
        tuple_embeddings, mention_embeddings = embed_category(
            trained.pair, trained.tuple_vecs, trained.mention_vecs
        )
        timings["embed"] = timings.get("embed", 0.0) + time.perf_counter() - stage

        stage = time.perf_counter()
        tuple_forest = annindex.build_forest(
            tuple_embeddings, t=config.index.t,
            leaf_capacity=config.index.leaf_capacity, seed=config.index.seed,
        )
        mention_forest = annindex.build_forest(
            mention_embeddings, t=config.index.t,
            leaf_capacity=config.index.leaf_capacity, seed=config.index.seed,
        )
        timings["index"] = timings.get("index", 0.0) + time.perf_counter() - stage

        stage = time.perf_counter()
        evaluate_category(
            report, corpus, category, splits, trained.pair,
            trained.tuple_vecs, trained.mention_vecs, tuple_forest, mention_forest,
            n=max(config.eval_ks), search_k=config.index.search_k,
        )
        timings["evaluate"] = timings.get("evaluate", 0.0) + time.perf_counter() - stage

        pairs[category] = trained.pair
        forests[category] = (tuple_forest, mention_forest)
        models[category] = CategoryModel(
            category=category,
            vectorizer=vmodel,
            pair=trained.pair,
            tuple_forest=tuple_forest,
            mention_forest=mention_forest,
            tuple_embeddings=tuple_embeddings,
            mention_embeddings=mention_embeddings,
            loss_history=trained.loss_history,
        )

    if not models:
        raise LinkerError("corpus has no category with mentions to link")
    report.finalize_overall()
    timings["total"] = time.perf_counter() - t0
    return RetrainResult(
        pairs=pairs, forests=forests, report=report, splits=splits,
        models=models, timings=timings,
    )


def export_links(results, path, strategy="semantic"):
    """Write ranked links as delimited text: anchor, counterpart, score, rank."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("anchor\tcounterpart\tscore\trank\tstrategy\n")
        for anchor in sorted(results):
            for counterpart, score, rank in results[anchor].ranked:
                f.write(f"{anchor}\t{counterpart}\t{score:.17g}\t{rank}\t{strategy}\n")
