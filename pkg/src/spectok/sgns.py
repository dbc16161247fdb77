"""Skip-gram negative-sampling training over token sequences.

Learns a static embedding table: for each (center, context) pair drawn from a
dynamically shrunk window, the center's input vector is pulled toward the
context's output vector and pushed away from sampled negatives:

    loss = -log sigmoid(w.c) - sum_i log sigmoid(-w.c_neg_i)

Negatives come from an alias-table sampler over the unigram distribution
raised to ``ns_exponent`` (0 = uniform over occurring tokens, negative values
over-sample rare tokens). Frequent tokens are probabilistically dropped
before windowing using the classical discount keep_prob = min(1,
sqrt(t/r) + t/r) with r the token's corpus frequency.

Two training modes: the deterministic single-worker mode is reproducible
bit-for-bit per seed; the parallel mode shards sequences across threads that
update the shared tables without locks (benign races, statistical contract
only).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .codebook import TokenSequence
from .errors import ConfigError, DataError

NEG_REDRAW_ATTEMPTS = 3  # redraws when a negative collides with the positive context


@dataclass
class SgnsConfig:
    """Skip-gram training hyperparameters."""

    vector_size: int = 384
    window: int = 80
    negative: int = 5
    ns_exponent: float = 0.0
    sample: float = 1e-5
    min_count: int = 1
    epochs: int = 100
    initial_lr: float = 0.025
    final_lr: float = 1e-4
    seed: int = 0

    def __post_init__(self) -> None:
        if self.vector_size < 1:
            raise ConfigError(f"vector_size must be >= 1, got {self.vector_size}")
        if self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")
        if self.negative < 1:
            raise ConfigError(f"negative must be >= 1, got {self.negative}")
        if not 0 < self.sample <= 1:
            raise ConfigError(f"sample must be in (0, 1], got {self.sample}")
        if self.min_count < 0:
            raise ConfigError(f"min_count must be >= 0, got {self.min_count}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not self.initial_lr > self.final_lr > 0:
            raise ConfigError(
                f"need initial_lr > final_lr > 0; got {self.initial_lr}, {self.final_lr}"
            )


@dataclass
class VocabStats:
    """Token frequencies and subsampling keep probabilities for a corpus."""

    counts: np.ndarray        # V, token occurrence counts
    total_tokens: int
    keep_prob: np.ndarray     # V, in [0, 1]
    min_count: int = 1
    sample: float = 1e-5

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.keep_prob = np.asarray(self.keep_prob, dtype=np.float64)

    @property
    def V(self) -> int:
        return int(self.counts.size)

    @property
    def pruned(self) -> np.ndarray:
        """True for tokens seen fewer than min_count times (skipped in training)."""
        return self.counts < self.min_count


@dataclass
class EmbeddingTable:
    """Learned token vectors: input side feeds classification, output side is training-only."""

    input_vectors: np.ndarray    # V x d
    output_vectors: np.ndarray   # V x d
    d: int
    config: SgnsConfig
    epoch_losses: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        self.input_vectors = np.asarray(self.input_vectors, dtype=np.float64)
        self.output_vectors = np.asarray(self.output_vectors, dtype=np.float64)
        self.epoch_losses = np.asarray(self.epoch_losses, dtype=np.float64)
        if not (np.all(np.isfinite(self.input_vectors)) and np.all(np.isfinite(self.output_vectors))):
            raise DataError("embedding table contains non-finite values")

    @property
    def V(self) -> int:
        return int(self.input_vectors.shape[0])


def sigmoid(x):
    """Logistic function with overflow-safe branches."""
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def softplus(x):
    """log(1 + e^x) without overflow; equals -log(sigmoid(-x))."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def build_vocab(
    corpus: list[TokenSequence],
    min_count: int = 1,
    sample: float = 1e-5,
    vocab_size: int | None = None,
) -> VocabStats:
    """Count token frequencies and derive subsampling keep probabilities.

    keep_prob(c) = min(1, sqrt(t/r) + t/r) with r = f(c)/total and t the
    ``sample`` threshold; tokens that never occur get keep probability 1
    (the r -> 0 limit) but are never drawn anyway.
    """
    if not corpus:
        raise DataError("empty corpus")
    if not 0 < sample <= 1:
        raise ConfigError(f"sample must be in (0, 1], got {sample}")
    max_token = max((int(seq.tokens.max()) for seq in corpus if len(seq)), default=-1)
    if max_token < 0:
        raise DataError("corpus contains no tokens")
    V = vocab_size if vocab_size is not None else max_token + 1
    if max_token >= V:
        raise DataError(f"token {max_token} out of range for vocab_size {V}")

    counts = np.zeros(V, dtype=np.int64)
    for seq in corpus:
        counts += np.bincount(seq.tokens, minlength=V)
    total = int(counts.sum())

    with np.errstate(divide="ignore"):
        r = counts / total
        ratio = np.where(counts > 0, sample / np.where(r > 0, r, 1.0), np.inf)
    keep = np.minimum(1.0, np.sqrt(ratio) + ratio)
    return VocabStats(counts=counts, total_tokens=total, keep_prob=keep,
                      min_count=min_count, sample=sample)


class NegativeSampler:
    """O(1) draws from P(c) proportional to f(c)^alpha via Walker's alias method.

    The support is the set of unpruned tokens; alpha = 0 yields an exactly
    uniform distribution over that support.
    """

    def __init__(self, probs: np.ndarray, alpha: float, seed: int):
        probs = np.asarray(probs, dtype=np.float64)
        support = np.flatnonzero(probs > 0)
        if support.size == 0:
            raise DataError("negative sampler has empty support")
        p = probs[support]
        p = p / p.sum()
        self.probs = np.zeros_like(probs)
        self.probs[support] = p
        self.alpha = float(alpha)
        self.support = support
        self.rng = np.random.default_rng(seed)

        # Vose alias construction over the support.
        n = support.size
        scaled = p * n
        self.prob_table = np.ones(n, dtype=np.float64)
        self.alias_table = np.arange(n, dtype=np.int64)
        small = [i for i in range(n) if scaled[i] < 1.0]
        large = [i for i in range(n) if scaled[i] >= 1.0]
        scaled = scaled.copy()
        while small and large:
            s = small.pop()
            l = large.pop()
            self.prob_table[s] = scaled[s]
            self.alias_table[s] = l
            scaled[l] -= 1.0 - scaled[s]
            (small if scaled[l] < 1.0 else large).append(l)
        for i in large + small:
            self.prob_table[i] = 1.0

    def draw(self, n: int) -> np.ndarray:
        """Sample n token ids."""
        idx = self.rng.integers(0, self.support.size, size=n)
        accept = self.rng.random(n) < self.prob_table[idx]
        return self.support[np.where(accept, idx, self.alias_table[idx])]


def build_negative_sampler(stats: VocabStats, alpha: float, seed: int) -> NegativeSampler:
    """Smoothed-unigram sampler P(c) = f(c)^alpha / sum f(c')^alpha over unpruned tokens."""
    active = (~stats.pruned) & (stats.counts > 0)
    if not active.any():
        raise DataError("all tokens pruned; cannot build a negative sampler")
    weights = np.zeros(stats.V, dtype=np.float64)
    if alpha == 0.0:
        weights[active] = 1.0
    else:
        weights[active] = stats.counts[active].astype(np.float64) ** alpha
    return NegativeSampler(weights, alpha=alpha, seed=seed)


def sgns_pair_loss(w: np.ndarray, c: np.ndarray, negs: np.ndarray):
    """Loss and analytic gradients for one positive pair with sampled negatives.

    Returns (loss, grad_w, grad_c, grad_negs); ``negs`` is a (k, d) array and
    grad_negs matches it. With no negatives pass an empty (0, d) array.
    """
    w = np.asarray(w, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    negs = np.asarray(negs, dtype=np.float64).reshape(-1, w.size)

    s_pos = float(w @ c)
    s_negs = negs @ w
    loss = float(softplus(-s_pos) + softplus(s_negs).sum())

    sig_pos = float(sigmoid(s_pos))
    sig_negs = sigmoid(s_negs)
    grad_w = -(1.0 - sig_pos) * c + sig_negs @ negs
    grad_c = -(1.0 - sig_pos) * w
    grad_negs = sig_negs[:, None] * w[None, :]
    return loss, grad_w, grad_c, grad_negs


def _epoch_schedule(token_arrays, keep_prob, pruned, window, rng):
    """Yield (kept_tokens, half_windows) per sequence, consuming rng deterministically.

    Factored out so the pair-counting pass and the training pass replay the
    exact same random stream.
    """
    for tokens in token_arrays:
        valid = tokens[~pruned[tokens]]
        if valid.size == 0:
            continue
        kept = valid[rng.random(valid.size) < keep_prob[valid]]
        if kept.size == 0:
            continue
        half = rng.integers(1, window + 1, size=kept.size)
        yield kept, half


def _count_pairs(token_arrays, keep_prob, pruned, cfg) -> int:
    """Total positive pairs the deterministic pass will emit across all epochs."""
    rng = np.random.default_rng(cfg.seed)
    total = 0
    for _ in range(cfg.epochs):
        for kept, half in _epoch_schedule(token_arrays, keep_prob, pruned, cfg.window, rng):
            idx = np.arange(kept.size)
            total += int((np.minimum(idx + half, kept.size - 1) - np.maximum(idx - half, 0)).sum())
    return total


class _Trainer:
    """Shared state for one training run over the embedding tables."""

    def __init__(self, stats: VocabStats, sampler: NegativeSampler, cfg: SgnsConfig, total_pairs: int):
        self.cfg = cfg
        self.sampler = sampler
        init_rng = np.random.default_rng(cfg.seed)
        d = cfg.vector_size
        self.input_vectors = init_rng.uniform(-0.5 / d, 0.5 / d, size=(stats.V, d))
        self.output_vectors = np.zeros((stats.V, d), dtype=np.float64)
        self.total_pairs = total_pairs
        self.lr_span = cfg.final_lr - cfg.initial_lr

    def lr_at(self, pair_index: int) -> float:
        if self.total_pairs <= 1:
            return self.cfg.initial_lr
        progress = min(pair_index / (self.total_pairs - 1), 1.0)
        return self.cfg.initial_lr + self.lr_span * progress

    def train_pairs(self, kept, half, pair_index, sampler, on_pair=None):
        """Run SGD over all pairs of one effective sequence; returns (loss_sum, n_pairs)."""
        inp, out = self.input_vectors, self.output_vectors
        k_neg = self.cfg.negative
        n = kept.size
        kept_ids = kept.tolist()
        loss_sum = 0.0
        pairs = 0
        for i in range(n):
            lo = max(0, i - int(half[i]))
            hi = min(n - 1, i + int(half[i]))
            if hi <= lo:
                continue
            center = kept_ids[i]
            w = inp[center]
            draws = sampler.draw(k_neg * (hi - lo))  # one batch per center window
            offset = 0
            for j in range(lo, hi + 1):
                if j == i:
                    continue
                context = kept_ids[j]
                if on_pair is not None:
                    on_pair(center, context)
                negs = draws[offset : offset + k_neg]
                offset += k_neg
                hit = negs == context
                if hit.any():
                    negs = negs.copy()
                    for _ in range(NEG_REDRAW_ATTEMPTS):
                        negs[hit] = sampler.draw(int(hit.sum()))
                        hit = negs == context
                        if not hit.any():
                            break
                rows = np.empty(k_neg + 1, dtype=np.int64)
                rows[0] = context
                rows[1:] = negs
                vecs = out[rows]

                scores = vecs @ w
                ez = np.exp(-np.abs(scores))
                sig = np.where(scores >= 0, 1.0, ez) / (1.0 + ez)
                # loss = softplus(-s_pos) + sum softplus(s_neg), sharing exp(-|s|)
                signed = scores.copy()
                signed[0] = -signed[0]
                loss_sum += float((np.maximum(signed, 0.0) + np.log1p(ez)).sum())

                lr = self.lr_at(pair_index + pairs)
                g = -sig * lr
                g[0] += lr  # positive target is 1, negatives 0
                row_list = rows.tolist()
                if len(set(row_list)) == len(row_list):
                    out[rows] += g[:, None] * w[None, :]
                else:
                    np.add.at(out, rows, g[:, None] * w[None, :])
                inp[center] += g @ vecs
                pairs += 1
        return loss_sum, pairs


def train_sgns(
    corpus: list[TokenSequence],
    stats: VocabStats,
    sampler: NegativeSampler,
    cfg: SgnsConfig,
    mode: str = "deterministic",
    workers: int = 2,
    on_pair=None,
) -> EmbeddingTable:
    """Train the embedding table over the corpus.

    Deterministic mode replays a counted schedule so the learning rate decays
    linearly from initial_lr to final_lr over the exact realized pair count
    and the result is bit-identical per seed. Parallel mode shards sequences
    across ``workers`` threads with lock-free updates.
    """
    if mode not in ("deterministic", "parallel"):
        raise ConfigError(f"unknown mode {mode!r}")
    max_token = max((int(seq.tokens.max()) for seq in corpus if len(seq)), default=-1)
    if max_token >= stats.V:
        raise ConfigError(f"corpus token {max_token} out of range for vocabulary {stats.V}")
    if sampler.probs.size != stats.V:
        raise ConfigError(
            f"sampler vocabulary {sampler.probs.size} != stats vocabulary {stats.V}"
        )

    token_arrays = [seq.tokens.astype(np.int64) for seq in corpus]
    pruned = stats.pruned

    if mode == "parallel" and cfg.epochs > 0:
        return _train_parallel(token_arrays, stats, sampler, cfg, workers)

    total_pairs = _count_pairs(token_arrays, stats.keep_prob, pruned, cfg) if cfg.epochs else 0
    trainer = _Trainer(stats, sampler, cfg, total_pairs)
    epoch_losses = []
    schedule_rng = np.random.default_rng(cfg.seed)
    pair_index = 0
    for _ in range(cfg.epochs):
        loss_sum = 0.0
        n_pairs = 0
        for kept, half in _epoch_schedule(token_arrays, stats.keep_prob, pruned, cfg.window, schedule_rng):
            ls, np_ = trainer.train_pairs(kept, half, pair_index, sampler, on_pair)
            loss_sum += ls
            n_pairs += np_
            pair_index += np_
        epoch_losses.append(loss_sum / n_pairs if n_pairs else 0.0)

    return EmbeddingTable(
        input_vectors=trainer.input_vectors,
        output_vectors=trainer.output_vectors,
        d=cfg.vector_size,
        config=cfg,
        epoch_losses=np.asarray(epoch_losses),
    )


def _train_parallel(token_arrays, stats, sampler, cfg, workers) -> EmbeddingTable:
    """Sequence-sharded lock-free training (statistical contract, not bitwise)."""
    workers = max(1, workers)
    shards = [token_arrays[i::workers] for i in range(workers)]
    shards = [s for s in shards if s]

    # No realized-count pass here: the learning rate follows the expected pair
    # count, which is all the statistical contract needs.
    expected_kept = sum(float(stats.keep_prob[a[~stats.pruned[a]]].sum()) for a in token_arrays)
    total_est = max(1, int(cfg.epochs * expected_kept * (cfg.window + 1)))
    trainer = _Trainer(stats, sampler, cfg, total_est)

    progress = [0] * len(shards)
    epoch_loss_acc = np.zeros((len(shards), cfg.epochs))
    epoch_pair_acc = np.zeros((len(shards), cfg.epochs), dtype=np.int64)

    def run(worker_id: int) -> None:
        rng = np.random.default_rng((cfg.seed, worker_id))
        local_sampler = NegativeSampler(sampler.probs, sampler.alpha, seed=(cfg.seed, worker_id, 1))
        for epoch in range(cfg.epochs):
            for kept, half in _epoch_schedule(shards[worker_id], stats.keep_prob, stats.pruned,
                                              cfg.window, rng):
                ls, np_ = trainer.train_pairs(kept, half, sum(progress), local_sampler)
                progress[worker_id] += np_
                epoch_loss_acc[worker_id, epoch] += ls
                epoch_pair_acc[worker_id, epoch] += np_

    threads = [threading.Thread(target=run, args=(i,)) for i in range(len(shards))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()

    pair_totals = np.maximum(epoch_pair_acc.sum(axis=0), 1)
    return EmbeddingTable(
        input_vectors=trainer.input_vectors,
        output_vectors=trainer.output_vectors,
        d=cfg.vector_size,
        config=cfg,
        epoch_losses=epoch_loss_acc.sum(axis=0) / pair_totals,
    )


def embed_tokens(table: EmbeddingTable, seq: TokenSequence) -> np.ndarray:
    """Static lookup: row i = input_vectors[tokens[i]]."""
    tokens = seq.tokens.astype(np.int64)
    if tokens.size and int(tokens.max()) >= table.V:
        raise DataError(f"token {int(tokens.max())} out of range for vocabulary {table.V}")
    return table.input_vectors[tokens]
