"""Deterministic synthetic corpus for demos and end-to-end verification.

Entity names are two-token combinations from small shared vocabularies, so
held-out entities are new combinations of tokens seen during training; the
text side verbalizes the name and attribute values inside short sentences.
"""

import numpy as np

ADJECTIVES = ("Amber", "Cobalt", "Crimson", "Ivory", "Teal", "Violet")
NOUNS = ("Canyon", "Harbor", "Meadow", "Orchard", "Summit")
REGIONS = ("Northway", "Eastvale", "Southmoor", "Westmere")

SENTENCE_TEMPLATES = (
    "{name} rises quietly over the open flats.",
    "Travellers often photograph {name} at dawn.",
    "The tourist office lists {name} among its landmarks.",
    "Guides recommend visiting {name} in early autumn.",
    "Few places rival {name} for quiet evenings.",
    "{name} appeared in a recent survey of walking routes.",
    "Locals say {name} looks finest in winter.",
    "A weathered plaque stands near {name}.",
    "The long path to {name} starts behind the old mill.",
    "{name} anchors the western stretch of the trail.",
)


def entity_names(count=30):
    names = [f"{a}_{n}" for a in ADJECTIVES for n in NOUNS]
    if count > len(names):
        raise ValueError(f"at most {len(names)} distinct synthetic entities available")
    return names[:count]


def synthetic_corpus_xml(entities=30, mentions_per_entity=10, seed=7, category="Landmark"):
    """Build the corpus XML text: one entry per entity with its sentences."""
    rng = np.random.default_rng(seed)
    parts = ["<benchmark>", " <entries>"]
    for i, name in enumerate(entity_names(entities), start=1):
        surface = name.replace("_", " ")
        region = REGIONS[int(rng.integers(len(REGIONS)))]
        height = int(rng.integers(80, 990))
        parts.append(f'  <entry size="3" eid="Id{i}" category="{category}">')
        parts.append("   <modifiedtripleset>")
        parts.append(f"    <mtriple>{name} | title | &quot;{surface}&quot;</mtriple>")
        parts.append(f"    <mtriple>{name} | region | {region}</mtriple>")
        parts.append(f"    <mtriple>{name} | height | {height}</mtriple>")
        parts.append("   </modifiedtripleset>")
        for j in range(mentions_per_entity):
            template = SENTENCE_TEMPLATES[j % len(SENTENCE_TEMPLATES)]
            sentence = template.format(name=surface, region=region, height=height)
            if j >= len(SENTENCE_TEMPLATES):
                sentence += f" Entry {j + 1}."
            parts.append(f'   <lex lid="Id{j + 1}">{sentence}</lex>')
        parts.append("  </entry>")
    parts.append(" </entries>")
    parts.append("</benchmark>")
    return "\n".join(parts) + "\n"


def write_synthetic_corpus(path, entities=30, mentions_per_entity=10, seed=7,
                           category="Landmark"):
    text = synthetic_corpus_xml(
        entities=entities, mentions_per_entity=mentions_per_entity, seed=seed,
        category=category,
    )
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    return path
