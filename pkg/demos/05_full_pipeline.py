"""The complete cycle on the synthetic corpus: vectorize, train, index,
link, and evaluate Precision@k per split.

Run from the repository root:  python demos/05_full_pipeline.py
(takes a minute or two; lower batch_budget for a quicker look)
"""

from tablelink.config import ProjectConfig
from tablelink.corpus import load_corpus_xml
from tablelink.cli import emit_report
from tablelink.linker import retrain_cycle, semantic_link
from tablelink.synthetic import synthetic_corpus_xml

corpus = load_corpus_xml(synthetic_corpus_xml(entities=30, mentions_per_entity=10, seed=7))

config = ProjectConfig()
config.training.batch_budget = 1000

result = retrain_cycle(corpus, config)
print(emit_report(result.report, "table").decode())
print("timings (s):", {k: round(v, 2) for k, v in sorted(result.timings.items())})

# Cold-start lookup: an unseen entity's tuple was never in a training batch,
# yet its mentions should surface near the top.
model = result.models["Landmark"]
unseen_entity = sorted(result.splits.unseen)[0]
anchor_key = corpus.tuples_by_entity[unseen_entity][0]
from tablelink.linker import raw_vectors_for_category

tuple_vecs, _ = raw_vectors_for_category(corpus, "Landmark", model.vectorizer)
hit_list = semantic_link(model.pair, model.mention_forest, tuple_vecs[anchor_key],
                         5, anchor_id=anchor_key)
gold = set(corpus.links_by_tuple[anchor_key])
print(f"top-5 mentions for unseen entity {unseen_entity}:")
for mention_id, dist, rank in hit_list.ranked:
    mark = "*" if mention_id in gold else " "
    print(f" {mark} rank {rank}  {dist:.4f}  {corpus.mentions[mention_id].sentence_text}")
