"""Trainable joint embedding space over tuple and mention vectors.

Two feed-forward networks project the two raw vector spaces into one joint
space where cosine distance encodes match likelihood. Training minimizes a
pairwise contrastive hinge loss: for every anchor, each in-batch negative
must score at least a margin beyond the anchor's average positive score.
All forward/backward math is explicit numpy so gradients can be verified
against finite differences.
"""

import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Raised when training diverges (non-finite loss or gradients)."""

    def __init__(self, message, batch=None):
        super().__init__(message)
        self.batch = batch


def elu(z):
    return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))


def elu_grad(z):
    return np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))


class DenseNet:
    """Affine layers with elu on hidden layers and an identity output.

    Dropout (inverted, keep probability ``keep_prob``) applies to hidden
    activations only and only when ``training`` is set, so inference is
    deterministic.
    """

    def __init__(self, weights, biases, keep_prob=0.75):
        if len(weights) != len(biases):
            raise ValueError("weights/biases length mismatch")
        for i in range(len(weights) - 1):
            if weights[i + 1].shape[1] != weights[i].shape[0]:
                raise ValueError("layer dims do not chain")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.keep_prob = float(keep_prob)

    @classmethod
    def init(cls, dims, rng, keep_prob=0.75):
        """Glorot-initialized net for layer sizes ``dims = [in, ..., out]``."""
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            scale = np.sqrt(2.0 / (fan_in + fan_out))
            weights.append(rng.normal(0.0, scale, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, keep_prob=keep_prob)

    @property
    def input_dim(self):
        return self.weights[0].shape[1]

    @property
    def output_dim(self):
        return self.weights[-1].shape[0]

    def forward(self, x, training=False, rng=None):
        """Batched forward pass; returns (output, cache for backward)."""
        a = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if a.shape[1] != self.input_dim:
            raise ValueError(f"input dim {a.shape[1]} != net input dim {self.input_dim}")
        cache = []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w.T + b
            if i < last:
                h = elu(z)
                mask = None
                if training and self.keep_prob < 1.0:
                    if rng is None:
                        raise ValueError("training-mode forward needs an rng for dropout")
                    mask = (rng.random(h.shape) < self.keep_prob) / self.keep_prob
                    h = h * mask
                cache.append((a, z, mask))
                a = h
            else:
                cache.append((a, z, None))
                a = z
        return a, cache

    def backward(self, d_out, cache):
        """Gradients of all parameters (and the input) given d loss/d output."""
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)
        d_a = np.atleast_2d(d_out)
        last = len(self.weights) - 1
        for i in range(last, -1, -1):
            a_in, z, mask = cache[i]
            if i < last:
                if mask is not None:
                    d_a = d_a * mask
                d_z = d_a * elu_grad(z)
            else:
                d_z = d_a
            grads_w[i] = d_z.T @ a_in
            grads_b[i] = d_z.sum(axis=0)
            d_a = d_z @ self.weights[i]
        return grads_w, grads_b, d_a


def forward_embed(net: DenseNet, v, training=False, rng=None):
    """Embed a single raw vector; inference mode is deterministic."""
    out, _ = net.forward(v, training=training, rng=rng)
    return out[0] if np.asarray(v).ndim == 1 else out


@dataclass
class EmbedderPair:
    """The two networks of the joint space plus the training margin."""

    net_r: DenseNet
    net_t: DenseNet
    joint_dim: int
    margin: float = 0.001
    seed: int = 0
    train_rng: np.random.Generator = None

    def __post_init__(self):
        if self.net_r.output_dim != self.joint_dim or self.net_t.output_dim != self.joint_dim:
            raise ValueError("both networks must output joint_dim")
        if self.margin < 0:
            raise ValueError("margin must be nonnegative")
        if self.train_rng is None:
            self.train_rng = np.random.default_rng(self.seed)

    @classmethod
    def build(cls, input_dim_r, input_dim_t, hidden_r=(512,), hidden_t=(),
              joint_dim=256, margin=0.001, keep_prob=0.75, seed=0):
        rng = np.random.default_rng(seed)
        net_r = DenseNet.init([input_dim_r, *hidden_r, joint_dim], rng, keep_prob=keep_prob)
        net_t = DenseNet.init([input_dim_t, *hidden_t, joint_dim], rng, keep_prob=keep_prob)
        return cls(net_r=net_r, net_t=net_t, joint_dim=joint_dim, margin=margin, seed=seed)

    def parameters(self):
        """All parameter arrays in declaration order (net_r, then net_t)."""
        out = []
        for net in (self.net_r, self.net_t):
            for w, b in zip(net.weights, net.biases):
                out.extend((w, b))
        return out

    def embed_tuples(self, x):
        return self.net_r.forward(x)[0]

    def embed_mentions(self, x):
        return self.net_t.forward(x)[0]


# ---------------------------------------------------------------------------
# Scoring and loss
# ---------------------------------------------------------------------------

def score(u, v):
    """Cosine distance 1 - cos(u, v) in [0, 2]; small means similar.

    A zero vector carries no direction, so its score is defined as 1.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dim mismatch: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 1.0
    c = float(np.dot(u, v) / (nu * nv))
    return 1.0 - max(-1.0, min(1.0, c))


def average_positive_score(anchor, positives):
    """Arithmetic mean of score(anchor, p) over the positive set."""
    positives = list(positives)
    if not positives:
        raise ValueError("average_positive_score needs at least one positive")
    return float(np.mean([score(anchor, p) for p in positives]))


@dataclass
class LossStats:
    active_terms: int = 0
    skipped_tuple_anchors: int = 0
    skipped_mention_anchors: int = 0
    zero_vectors: int = 0
    min_hinge_gap: float = float("inf")


def score_matrix(e_r, e_t):
    """Pairwise cosine distances; zero-norm rows/columns score 1 everywhere."""
    norms_r = np.linalg.norm(e_r, axis=1)
    norms_t = np.linalg.norm(e_t, axis=1)
    u = e_r / np.where(norms_r > 0, norms_r, 1.0)[:, None]
    v = e_t / np.where(norms_t > 0, norms_t, 1.0)[:, None]
    return 1.0 - u @ v.T, u, v, norms_r, norms_t


def loss_from_embeddings(e_r, e_t, pos_pairs, margin):
    """Pairwise contrastive hinge loss and its embedding gradients.

    For a tuple anchor r with in-batch positives P and negatives N (the
    non-matching in-batch mentions), each negative contributes
    ``max(0, margin + avg_{p in P} S[r,p] - S[r,n])``; mention anchors
    contribute symmetrically. Anchors without in-batch positives are
    skipped and counted. Returns (loss, dL/dE_R, dL/dE_T, stats).
    """
    e_r = np.atleast_2d(np.asarray(e_r, dtype=np.float64))
    e_t = np.atleast_2d(np.asarray(e_t, dtype=np.float64))
    a, b = e_r.shape[0], e_t.shape[0]
    if not (np.all(np.isfinite(e_r)) and np.all(np.isfinite(e_t))):
        # surface as a non-finite loss so the optimizer aborts with a dump
        nan = float("nan")
        return nan, np.zeros_like(e_r), np.zeros_like(e_t), LossStats()
    pos = np.zeros((a, b), dtype=bool)
    for i, j in pos_pairs:
        pos[i, j] = True

    s, u, v, norms_r, norms_t = score_matrix(e_r, e_t)
    stats = LossStats(zero_vectors=int((norms_r == 0).sum() + (norms_t == 0).sum()))

    d_s = np.zeros_like(s)
    loss = 0.0

    # tuple-side anchors (rows)
    npos_r = pos.sum(axis=1)
    has_pos_r = npos_r > 0
    stats.skipped_tuple_anchors = int((~has_pos_r).sum())
    if has_pos_r.any():
        avg_r = np.where(has_pos_r, (s * pos).sum(axis=1) / np.maximum(npos_r, 1), 0.0)
        hinge = margin + avg_r[:, None] - s
        relevant = ~pos & has_pos_r[:, None]
        active = relevant & (hinge > 0)
        if relevant.any():
            stats.min_hinge_gap = min(stats.min_hinge_gap, float(np.min(np.abs(hinge[relevant]))))
        loss += float(hinge[active].sum())
        stats.active_terms += int(active.sum())
        d_s -= active.astype(np.float64)
        n_active = active.sum(axis=1)
        d_s += pos * np.where(has_pos_r, n_active / np.maximum(npos_r, 1), 0.0)[:, None]

    # mention-side anchors (columns)
    npos_t = pos.sum(axis=0)
    has_pos_t = npos_t > 0
    stats.skipped_mention_anchors = int((~has_pos_t).sum())
    if has_pos_t.any():
        avg_t = np.where(has_pos_t, (s * pos).sum(axis=0) / np.maximum(npos_t, 1), 0.0)
        hinge = margin + avg_t[None, :] - s
        relevant = ~pos & has_pos_t[None, :]
        active = relevant & (hinge > 0)
        if relevant.any():
            stats.min_hinge_gap = min(stats.min_hinge_gap, float(np.min(np.abs(hinge[relevant]))))
        loss += float(hinge[active].sum())
        stats.active_terms += int(active.sum())
        d_s -= active.astype(np.float64)
        d_s += pos * np.where(has_pos_t, active.sum(axis=0) / np.maximum(npos_t, 1), 0.0)[None, :]

    # back through S = 1 - U V^T and the row normalizations
    d_c = -d_s
    d_u = d_c @ v
    d_v = d_c.T @ u
    d_er = (d_u - (d_u * u).sum(axis=1, keepdims=True) * u) / np.where(
        norms_r > 0, norms_r, 1.0
    )[:, None]
    d_et = (d_v - (d_v * v).sum(axis=1, keepdims=True) * v) / np.where(
        norms_t > 0, norms_t, 1.0
    )[:, None]
    d_er[norms_r == 0] = 0.0
    d_et[norms_t == 0] = 0.0
    return loss, d_er, d_et, stats


@dataclass
class TrainingBatch:
    """A batch of raw vectors with the gold pairs marked among them."""

    x_tuples: np.ndarray  # (n_r, d_r)
    x_mentions: np.ndarray  # (n_t, d_t)
    pos_pairs: list  # of (tuple row, mention row) index pairs
    tuple_keys: list = field(default_factory=list)
    mention_ids: list = field(default_factory=list)


def pairwise_contrastive_loss(pair: EmbedderPair, batch: TrainingBatch,
                              margin=None, training=False):
    """Loss over a batch plus exact parameter gradients.

    Returns (loss, gradients aligned with ``pair.parameters()``, stats).
    """
    margin = pair.margin if margin is None else margin
    rng = pair.train_rng if training else None
    e_r, cache_r = pair.net_r.forward(batch.x_tuples, training=training, rng=rng)
    e_t, cache_t = pair.net_t.forward(batch.x_mentions, training=training, rng=rng)
    loss, d_er, d_et, stats = loss_from_embeddings(e_r, e_t, batch.pos_pairs, margin)
    gw_r, gb_r, _ = pair.net_r.backward(d_er, cache_r)
    gw_t, gb_t, _ = pair.net_t.backward(d_et, cache_t)
    grads = []
    for gw, gb in ((gw_r, gb_r), (gw_t, gb_t)):
        for w, b in zip(gw, gb):
            grads.extend((w, b))
    return loss, grads, stats


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Adam moments plus the stepped learning-rate schedule.

    The effective rate decays exponentially: ``lr * decay^(step // every)``.
    """

    lr: float = 1e-5
    decay: float = 0.9
    decay_every: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = None
    v: list = None

    def effective_lr(self, step=None):
        step = self.step if step is None else step
        return self.lr * self.decay ** (step // self.decay_every)

    def _ensure(self, params):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]


def gradient_step(pair: EmbedderPair, adam: AdamState, batch: TrainingBatch, margin=None):
    """One Adam update on the batch; returns (loss, stats).

    Aborts with a diagnostic dump of the offending batch if the loss or any
    gradient is non-finite.
    """
    loss, grads, stats = pairwise_contrastive_loss(pair, batch, margin=margin, training=True)
    if not np.isfinite(loss) or any(not np.all(np.isfinite(g)) for g in grads):
        dump = {
            "step": adam.step,
            "tuple_keys": list(batch.tuple_keys),
            "mention_ids": list(batch.mention_ids),
            "pos_pairs": list(map(list, batch.pos_pairs)),
            "loss": repr(loss),
        }
        raise TrainingError(f"non-finite loss or gradient at step {adam.step}: {dump}", batch=dump)
    params = pair.parameters()
    adam._ensure(params)
    lr_t = adam.effective_lr()
    t = adam.step + 1
    for p, g, m, v in zip(params, grads, adam.m, adam.v):
        m *= adam.beta1
        m += (1 - adam.beta1) * g
        v *= adam.beta2
        v += (1 - adam.beta2) * np.square(g)
        m_hat = m / (1 - adam.beta1**t)
        v_hat = v / (1 - adam.beta2**t)
        p -= lr_t * m_hat / (np.sqrt(v_hat) + adam.eps)
    adam.step += 1
    return loss, stats


def gradient_check(pair: EmbedderPair, batch: TrainingBatch, epsilon=1e-5, margin=None):
    """Max relative error between analytic and central-difference gradients.

    Dropout must be off (inference-mode forward is used). If some hinge sits
    within ~10*epsilon of its boundary the margin is nudged and the check
    retried, since the subgradient is not comparable to finite differences
    there. The relative error uses an absolute floor of 1e-6 so that pairs
    of essentially-zero gradients compare by absolute difference.
    """
    margin = pair.margin if margin is None else margin
    for attempt in range(8):
        _, _, stats = pairwise_contrastive_loss(pair, batch, margin=margin, training=False)
        if stats.min_hinge_gap > 10 * epsilon:
            break
        margin += max(0.01, 100 * epsilon) * (attempt + 1)
    _, analytic, _ = pairwise_contrastive_loss(pair, batch, margin=margin, training=False)

    params = pair.parameters()
    max_rel = 0.0
    for p, g in zip(params, analytic):
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        for idx in range(flat_p.size):
            saved = flat_p[idx]
            flat_p[idx] = saved + epsilon
            plus = pairwise_contrastive_loss(pair, batch, margin=margin, training=False)[0]
            flat_p[idx] = saved - epsilon
            minus = pairwise_contrastive_loss(pair, batch, margin=margin, training=False)[0]
            flat_p[idx] = saved
            numeric = (plus - minus) / (2 * epsilon)
            rel = abs(flat_g[idx] - numeric) / max(1e-6, abs(flat_g[idx]), abs(numeric))
            max_rel = max(max_rel, rel)
    return max_rel


# ---------------------------------------------------------------------------
# Batch sampling
# ---------------------------------------------------------------------------

class SamplerState:
    """Positive-pair sampler that compensates skewed entity frequencies.

    Entities are drawn with probability proportional to 1/(1 + seen count),
    so rarely sampled entities catch up; one of the entity's gold links is
    then drawn uniformly. Every batch therefore contains at least one
    positive pair by construction.
    """

    def __init__(self, links_by_entity, batch_size=32, seed=0):
        self.links_by_entity = {e: list(ls) for e, ls in links_by_entity.items() if ls}
        if not self.links_by_entity:
            raise ValueError("no gold links among trainable entities")
        self.entities = sorted(self.links_by_entity)
        self.batch_size = int(batch_size)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.rng = np.random.default_rng(seed)
        self.seen = {e: 0 for e in self.entities}

    def sample_pairs(self):
        """Draw one batch worth of (tuple_key, mention_id) positive pairs."""
        weights = np.array([1.0 / (1.0 + self.seen[e]) for e in self.entities])
        p = weights / weights.sum()
        idx = self.rng.choice(len(self.entities), size=self.batch_size, replace=True, p=p)
        pairs = []
        for i in idx:
            entity = self.entities[i]
            links = self.links_by_entity[entity]
            pairs.append(links[int(self.rng.integers(len(links)))])
        for i in idx:
            self.seen[self.entities[i]] += 1
        return pairs


def sample_batch(sampler: SamplerState, gold_pairs, vectors_r, vectors_t):
    """Assemble a TrainingBatch from sampled pairs and raw vector stores.

    ``gold_pairs`` is the full positive set; any gold pair that happens to
    fall inside the batch is marked positive, never treated as a negative.
    """
    drawn = sampler.sample_pairs()
    tuple_keys, mention_ids = [], []
    t_index, m_index = {}, {}
    for tk, mid in drawn:
        if tk not in t_index:
            t_index[tk] = len(tuple_keys)
            tuple_keys.append(tk)
        if mid not in m_index:
            m_index[mid] = len(mention_ids)
            mention_ids.append(mid)
    pos_pairs = [
        (i, j)
        for tk, i in t_index.items()
        for mid, j in m_index.items()
        if (tk, mid) in gold_pairs
    ]
    return TrainingBatch(
        x_tuples=np.stack([vectors_r[k] for k in tuple_keys]),
        x_mentions=np.stack([vectors_t[k] for k in mention_ids]),
        pos_pairs=pos_pairs,
        tuple_keys=tuple_keys,
        mention_ids=mention_ids,
    )


def train_pair(pair: EmbedderPair, adam: AdamState, sampler: SamplerState,
               gold_pairs, vectors_r, vectors_t, batches, log_fn=None):
    """Run a fixed budget of sampled batches; returns the loss history."""
    history = []
    for _ in range(batches):
        batch = sample_batch(sampler, gold_pairs, vectors_r, vectors_t)
        lr = adam.effective_lr()
        loss, _ = gradient_step(pair, adam, batch)
        history.append((adam.step - 1, lr, loss))
        if log_fn is not None:
            log_fn(adam.step - 1, lr, loss)
    return history


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"TLCK"
CKPT_VERSION = 1


def save_checkpoint(path, pair: EmbedderPair, step=0, extra=None):
    """JSON header (shapes, hyper-parameters, seed, step) + f64 LE params."""
    header = {
        "format_version": CKPT_VERSION,
        "shapes_r": [list(w.shape) for w in pair.net_r.weights],
        "shapes_t": [list(w.shape) for w in pair.net_t.weights],
        "keep_prob_r": pair.net_r.keep_prob,
        "keep_prob_t": pair.net_t.keep_prob,
        "joint_dim": pair.joint_dim,
        "margin": pair.margin,
        "seed": pair.seed,
        "step": step,
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        f.write(blob)
        for p in pair.parameters():
            f.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Rebuild an EmbedderPair from a checkpoint; returns (pair, header)."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CKPT_MAGIC:
        raise TrainingError(f"{path}: not a model checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise TrainingError(f"{path}: checkpoint version {version} unsupported; expected {CKPT_VERSION}")
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    pos = 12 + hlen

    def read_net(shapes, keep_prob):
        nonlocal pos
        weights, biases = [], []
        for out_dim, in_dim in shapes:
            n = out_dim * in_dim
            end = pos + 8 * n
            if len(data) < end:
                raise TrainingError(f"{path}: truncated checkpoint")
            weights.append(np.frombuffer(data[pos:end], dtype="<f8").reshape(out_dim, in_dim).copy())
            pos = end
            end = pos + 8 * out_dim
            if len(data) < end:
                raise TrainingError(f"{path}: truncated checkpoint")
            biases.append(np.frombuffer(data[pos:end], dtype="<f8").copy())
            pos = end
        return DenseNet(weights, biases, keep_prob=keep_prob)

    net_r = read_net(header["shapes_r"], header["keep_prob_r"])
    net_t = read_net(header["shapes_t"], header["keep_prob_t"])
    if pos != len(data):
        raise TrainingError(f"{path}: {len(data) - pos} trailing bytes after parameters")
    pair = EmbedderPair(
        net_r=net_r,
        net_t=net_t,
        joint_dim=header["joint_dim"],
        margin=header["margin"],
        seed=header["seed"],
    )
    return pair, header
