"""Train the two networks into one joint space on a toy matching problem.

Run from the repository root:  python demos/03_train_joint_space.py
"""

import numpy as np

from tablelink.neural import (
    AdamState,
    EmbedderPair,
    SamplerState,
    gradient_check,
    sample_batch,
    score,
    train_pair,
)

rng = np.random.default_rng(0)

# Ten entities; the tuple side sees a 24-dim signature, the mention side a
# noisy 32-dim view that shares the first 24 coordinates.
entities = [f"e{i}" for i in range(10)]
signatures = {e: rng.normal(size=24) for e in entities}
vectors_r = {e: signatures[e] for e in entities}
vectors_t, links = {}, {}
for e in entities:
    links[e] = []
    for j in range(6):
        mid = f"{e}.m{j}"
        view = np.concatenate([signatures[e] + 0.1 * rng.normal(size=24),
                               rng.normal(size=8)])
        vectors_t[mid] = view
        links[e].append((e, mid))

pair = EmbedderPair.build(input_dim_r=24, input_dim_t=32, hidden_r=(32,),
                          joint_dim=16, margin=1.0, keep_prob=0.75, seed=1)
adam = AdamState(lr=1e-3)
sampler = SamplerState(links, batch_size=16, seed=2)
gold = {pair_ for ls in links.values() for pair_ in ls}

# Check the analytic gradients against central finite differences before
# trusting the training loop (dropout off for the check).
check_pair = EmbedderPair.build(input_dim_r=24, input_dim_t=32, hidden_r=(4,),
                                joint_dim=3, margin=0.5, keep_prob=1.0, seed=3)
batch = sample_batch(SamplerState(links, batch_size=3, seed=4), gold, vectors_r, vectors_t)
print("max relative gradient error:", gradient_check(check_pair, batch, epsilon=1e-5))

history = train_pair(pair, adam, sampler, gold, vectors_r, vectors_t, batches=400)
print("loss: first=%.3f mid=%.3f last=%.3f" % (history[0][2], history[200][2], history[-1][2]))

# After training, a tuple scores its own mentions well below the others.
e = "e3"
own = np.mean([score(pair.embed_tuples(vectors_r[e][None])[0],
                     pair.embed_mentions(vectors_t[m][None])[0])
               for _, m in links[e]])
other = np.mean([score(pair.embed_tuples(vectors_r[e][None])[0],
                       pair.embed_mentions(vectors_t[m][None])[0])
                 for f in entities if f != e for _, m in links[f]])
print(f"mean cosine distance to own mentions: {own:.3f}, to others: {other:.3f}")
