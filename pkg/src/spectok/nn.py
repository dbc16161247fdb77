"""Minimal dense/conv neural kernels with hand-written backpropagation.

Two consumers: the two-layer classifier head used for surrogate-task
evaluation, and the distilled student model (token embedding -> Conv1d k=3
pad=1 -> ReLU -> BatchNorm -> global max pool -> Linear -> ReLU -> BatchNorm
-> Linear). Every layer exposes a forward that returns a cache and a backward
that consumes it; all backwards are validated against central finite
differences in the test suite.

No autodiff framework, float64 everywhere, CPU only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


# ---------------------------------------------------------------------------
# Layer kernels: forward returns (out, cache), backward consumes the cache.
# ---------------------------------------------------------------------------

def linear_forward(x, W, b):
    return x @ W + b, (x, W)


def linear_backward(dy, cache):
    x, W = cache
    return dy @ W.T, x.T @ dy, dy.sum(axis=0)


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy, mask):
    return dy * mask


def conv1d_forward(x, W, b):
    """1-D convolution, kernel 3, pad 1: x (B, Cin, S) -> (B, Cout, S)."""
    B, Cin, S = x.shape
    Cout, Cin_w, K = W.shape
    if Cin_w != Cin or K != 3:
        raise ShapeError(f"weight shape {W.shape} incompatible with input {x.shape}")
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1)))
    y = np.zeros((B, Cout, S))
    for k in range(3):
        y += np.einsum("oi,bis->bos", W[:, :, k], xp[:, :, k : k + S], optimize=True)
    return y + b[None, :, None], (xp, W, S)


def conv1d_backward(dy, cache):
    xp, W, S = cache
    dxp = np.zeros_like(xp)
    dW = np.zeros_like(W)
    for k in range(3):
        dxp[:, :, k : k + S] += np.einsum("oi,bos->bis", W[:, :, k], dy, optimize=True)
        dW[:, :, k] = np.einsum("bos,bis->oi", dy, xp[:, :, k : k + S], optimize=True)
    return dxp[:, :, 1:-1], dW, dy.sum(axis=(0, 2))


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train: bool,
                      momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
    """Per-channel batch norm for (B, C) or (B, C, S) inputs.

    Train mode normalizes with biased batch statistics and updates the
    running buffers in place (running variance uses the unbiased estimate);
    eval mode is a pure function of the running buffers.
    """
    axes = (0,) if x.ndim == 2 else (0, 2)
    shape = (1, -1) if x.ndim == 2 else (1, -1, 1)
    if train:
        m = x.shape[0] * (1 if x.ndim == 2 else x.shape[2])
        if m < 2:
            raise DataError("batch norm in train mode needs >= 2 values per channel")
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * m / (m - 1)
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.reshape(shape) * xhat + beta.reshape(shape)
    return out, (xhat, gamma, inv_std, train, axes, shape)


def batchnorm_backward(dy, cache):
    xhat, gamma, inv_std, train, axes, shape = cache
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma.reshape(shape)
    if not train:
        return dxhat * inv_std.reshape(shape), dgamma, dbeta
    m = float(np.prod([xhat.shape[a] for a in axes]))
    dx = (inv_std.reshape(shape) / m) * (
        m * dxhat
        - dxhat.sum(axis=axes).reshape(shape)
        - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape)
    )
    return dx, dgamma, dbeta


def global_max_pool_forward(x):
    """Max over the sequence axis: (B, C, S) -> (B, C)."""
    idx = x.argmax(axis=2)
    b, c = np.indices(idx.shape)
    return x[b, c, idx], (idx, x.shape)


def global_max_pool_backward(dy, cache):
    idx, shape = cache
    dx = np.zeros(shape)
    b, c = np.indices(idx.shape)
    dx[b, c, idx] = dy
    return dx


def softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits, labels):
    """Mean negative log likelihood; returns (loss, grad wrt logits)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, C = logits.shape
    if labels.min() < 0 or labels.max() >= C:
        raise DataError(f"labels out of range for {C} classes")
    lsm = log_softmax(logits)
    loss = -float(lsm[np.arange(n), labels].mean())
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def kl_distill_loss(student_logits, teacher_logits, T: float):
    """Temperature-scaled distillation loss.

    loss = T^2 * mean_batch KL(softmax(teacher/T) || softmax(student/T));
    the analytic gradient wrt the student logits simplifies to
    T * (softmax(student/T) - softmax(teacher/T)) / batch.
    """
    if T <= 0:
        raise ConfigError(f"temperature must be positive, got {T}")
    student_logits = np.asarray(student_logits, dtype=np.float64)
    teacher_logits = np.asarray(teacher_logits, dtype=np.float64)
    if student_logits.shape != teacher_logits.shape:
        raise ShapeError(
            f"student {student_logits.shape} vs teacher {teacher_logits.shape} logit shapes differ"
        )
    B = student_logits.shape[0]
    lp_s = log_softmax(student_logits / T)
    lp_t = log_softmax(teacher_logits / T)
    p_t = np.exp(lp_t)
    loss = float(T * T * (p_t * (lp_t - lp_s)).sum() / B)
    grad = T * (np.exp(lp_s) - p_t) / B
    return loss, grad


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    """Shared knobs for the gradient-descent training loops."""

    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    optimizer: str = "adam"   # "adam" | "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 0         # early-stop patience in epochs; 0 disables

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("learning_rate, batch_size and epochs must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("invalid adam parameters")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0")


class _Optimizer:
    def __init__(self, params: list[np.ndarray], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        if cfg.optimizer == "adam":
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
            self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        cfg = self.cfg
        if cfg.optimizer == "sgd":
            for p, g in zip(self.params, grads):
                p -= cfg.learning_rate * g
            return
        self.t += 1
        bias1 = 1.0 - cfg.beta1 ** self.t
        bias2 = 1.0 - cfg.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p -= cfg.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)


def _glorot(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# Classifier head: Linear(D_in -> hidden) -> ReLU -> Linear(hidden -> classes)
# ---------------------------------------------------------------------------


@dataclass
class ClassifierHead:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    labels: list[str] | None = None   # class names, index-aligned with logits

    def __post_init__(self) -> None:
        for name in ("W1", "b1", "W2", "b2"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise DataError(f"classifier parameter {name} contains non-finite values")
            setattr(self, name, arr)

    @property
    def d_in(self) -> int:
        return self.W1.shape[0]

    @property
    def n_classes(self) -> int:
        return self.W2.shape[1]

    def params(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2]

    def copy(self) -> "ClassifierHead":
        return ClassifierHead(self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy(),
                              labels=list(self.labels) if self.labels else None)


def init_head(d_in: int, n_classes: int, hidden: int = 512, seed: int = 0) -> ClassifierHead:
    rng = np.random.default_rng(seed)
    return ClassifierHead(
        W1=_glorot(rng, d_in, hidden, (d_in, hidden)),
        b1=np.zeros(hidden),
        W2=_glorot(rng, hidden, n_classes, (hidden, n_classes)),
        b2=np.zeros(n_classes),
    )


def head_forward(head: ClassifierHead, x: np.ndarray) -> np.ndarray:
    """logits = ReLU(x @ W1 + b1) @ W2 + b2."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != head.d_in:
        raise ShapeError(f"features shape {x.shape} incompatible with head d_in={head.d_in}")
    h, _ = relu_forward(x @ head.W1 + head.b1)
    return h @ head.W2 + head.b2


def _head_forward_cache(head, x):
    z1, lin1 = linear_forward(x, head.W1, head.b1)
    h, mask = relu_forward(z1)
    logits, lin2 = linear_forward(h, head.W2, head.b2)
    return logits, (lin1, mask, lin2)


def _head_backward(dlogits, caches):
    lin1, mask, lin2 = caches
    dh, dW2, db2 = linear_backward(dlogits, lin2)
    dz1 = relu_backward(dh, mask)
    _, dW1, db1 = linear_backward(dz1, lin1)
    return [dW1, db1, dW2, db2]


def train_head(
    features: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    val_features: np.ndarray | None = None,
    val_labels: np.ndarray | None = None,
    hidden: int = 512,
    history: dict | None = None,
) -> ClassifierHead:
    """Mini-batch training of the classification head.

    When a validation set is supplied, the parameters from the best
    validation-loss epoch are returned (with optional early stopping via
    cfg.patience); otherwise the final-epoch parameters are returned.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise ShapeError(f"features {features.shape} and labels {labels.shape} do not align")
    classes = np.unique(labels)
    if classes.size < 2:
        raise ConfigError("training needs at least 2 distinct classes")
    n_classes = int(labels.max()) + 1

    head = init_head(features.shape[1], n_classes, hidden=hidden, seed=cfg.seed)
    if cfg.epochs == 0:
        return head

    rng = np.random.default_rng(cfg.seed)
    opt = _Optimizer(head.params(), cfg)
    best: tuple[float, ClassifierHead] | None = None
    stale = 0
    train_losses, val_losses = [], []

    for _ in range(cfg.epochs):
        order = rng.permutation(features.shape[0])
        epoch_loss = 0.0
        for start in range(0, order.size, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            logits, caches = _head_forward_cache(head, features[batch])
            loss, dlogits = cross_entropy(logits, labels[batch])
            opt.step(_head_backward(dlogits, caches))
            epoch_loss += loss * batch.size
        train_losses.append(epoch_loss / order.size)

        if val_features is not None:
            val_loss, _ = cross_entropy(head_forward(head, val_features), val_labels)
            val_losses.append(val_loss)
            if best is None or val_loss < best[0]:
                best = (val_loss, head.copy())
                stale = 0
            else:
                stale += 1
                if cfg.patience and stale >= cfg.patience:
                    break

    if history is not None:
        history["train_loss"] = train_losses
        history["val_loss"] = val_losses
    return best[1] if best is not None else head


# ---------------------------------------------------------------------------
# Student model: embedding -> conv block -> projection head -> logits
# ---------------------------------------------------------------------------


@dataclass
class StudentModel:
    """Distillation student over token sequences (see module docstring for the stack)."""

    token_embedding: np.ndarray   # V x embed_dim
    conv_w: np.ndarray            # channels x embed_dim x 3
    conv_b: np.ndarray
    bn1_gamma: np.ndarray
    bn1_beta: np.ndarray
    bn1_mean: np.ndarray
    bn1_var: np.ndarray
    proj_w: np.ndarray            # channels x channels
    proj_b: np.ndarray
    bn2_gamma: np.ndarray
    bn2_beta: np.ndarray
    bn2_mean: np.ndarray
    bn2_var: np.ndarray
    head_w: np.ndarray            # channels x n_out
    head_b: np.ndarray
    temperature: float = 3.0

    def __post_init__(self) -> None:
        for name in self.array_fields():
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))

    @staticmethod
    def array_fields() -> list[str]:
        return [
            "token_embedding", "conv_w", "conv_b",
            "bn1_gamma", "bn1_beta", "bn1_mean", "bn1_var",
            "proj_w", "proj_b",
            "bn2_gamma", "bn2_beta", "bn2_mean", "bn2_var",
            "head_w", "head_b",
        ]

    @property
    def V(self) -> int:
        return self.token_embedding.shape[0]

    @property
    def n_out(self) -> int:
        return self.head_w.shape[1]

    def trainable(self) -> list[np.ndarray]:
        return [
            self.token_embedding, self.conv_w, self.conv_b,
            self.bn1_gamma, self.bn1_beta,
            self.proj_w, self.proj_b,
            self.bn2_gamma, self.bn2_beta,
            self.head_w, self.head_b,
        ]

    def copy(self) -> "StudentModel":
        return StudentModel(
            **{name: getattr(self, name).copy() for name in self.array_fields()},
            temperature=self.temperature,
        )


def init_student(
    vocab_size: int,
    n_out: int,
    embed_dim: int = 768,
    channels: int = 512,
    temperature: float = 3.0,
    seed: int = 0,
    embedding: np.ndarray | None = None,
) -> StudentModel:
    """Fresh student; pass ``embedding`` to start from a pre-trained token table."""
    rng = np.random.default_rng(seed)
    if embedding is not None:
        embedding = np.asarray(embedding, dtype=np.float64)
        if embedding.shape != (vocab_size, embed_dim):
            raise ShapeError(
                f"embedding shape {embedding.shape} != ({vocab_size}, {embed_dim})"
            )
        token_embedding = embedding.copy()
    else:
        token_embedding = rng.uniform(-0.5 / embed_dim, 0.5 / embed_dim, size=(vocab_size, embed_dim))
    return StudentModel(
        token_embedding=token_embedding,
        conv_w=_glorot(rng, embed_dim * 3, channels, (channels, embed_dim, 3)),
        conv_b=np.zeros(channels),
        bn1_gamma=np.ones(channels), bn1_beta=np.zeros(channels),
        bn1_mean=np.zeros(channels), bn1_var=np.ones(channels),
        proj_w=_glorot(rng, channels, channels, (channels, channels)),
        proj_b=np.zeros(channels),
        bn2_gamma=np.ones(channels), bn2_beta=np.zeros(channels),
        bn2_mean=np.zeros(channels), bn2_var=np.ones(channels),
        head_w=_glorot(rng, channels, n_out, (channels, n_out)),
        head_b=np.zeros(n_out),
        temperature=temperature,
    )


def _student_forward_cache(model: StudentModel, tokens: np.ndarray, train: bool):
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2 or tokens.shape[1] < 1:
        raise ShapeError(f"tokens must be (batch, S >= 1), got {tokens.shape}")
    if tokens.min() < 0 or tokens.max() >= model.V:
        raise DataError(f"token ids out of range for vocabulary {model.V}")

    emb = model.token_embedding[tokens]            # B x S x E
    x = emb.transpose(0, 2, 1)                     # B x E x S
    z, conv_cache = conv1d_forward(x, model.conv_w, model.conv_b)
    a1, relu1 = relu_forward(z)
    n1, bn1_cache = batchnorm_forward(a1, model.bn1_gamma, model.bn1_beta,
                                      model.bn1_mean, model.bn1_var, train)
    pooled, pool_cache = global_max_pool_forward(n1)
    p, proj_cache = linear_forward(pooled, model.proj_w, model.proj_b)
    a2, relu2 = relu_forward(p)
    n2, bn2_cache = batchnorm_forward(a2, model.bn2_gamma, model.bn2_beta,
                                      model.bn2_mean, model.bn2_var, train)
    logits, head_cache = linear_forward(n2, model.head_w, model.head_b)
    caches = (tokens, conv_cache, relu1, bn1_cache, pool_cache,
              proj_cache, relu2, bn2_cache, head_cache)
    return logits, caches


def student_forward(model: StudentModel, tokens: np.ndarray, mode: str = "eval") -> np.ndarray:
    """Logits for a (batch, S) token array; mode is "train" or "eval"."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"unknown mode {mode!r}")
    logits, _ = _student_forward_cache(model, tokens, train=(mode == "train"))
    return logits


def _student_backward(model: StudentModel, dlogits: np.ndarray, caches):
    (tokens, conv_cache, relu1, bn1_cache, pool_cache,
     proj_cache, relu2, bn2_cache, head_cache) = caches

    dn2, dhead_w, dhead_b = linear_backward(dlogits, head_cache)
    da2, dbn2_gamma, dbn2_beta = batchnorm_backward(dn2, bn2_cache)
    dp = relu_backward(da2, relu2)
    dpooled, dproj_w, dproj_b = linear_backward(dp, proj_cache)
    dn1 = global_max_pool_backward(dpooled, pool_cache)
    da1, dbn1_gamma, dbn1_beta = batchnorm_backward(dn1, bn1_cache)
    dz = relu_backward(da1, relu1)
    dx, dconv_w, dconv_b = conv1d_backward(dz, conv_cache)

    demb = dx.transpose(0, 2, 1)                   # B x S x E
    dembedding = np.zeros_like(model.token_embedding)
    np.add.at(dembedding, tokens, demb)
    return [dembedding, dconv_w, dconv_b, dbn1_gamma, dbn1_beta,
            dproj_w, dproj_b, dbn2_gamma, dbn2_beta, dhead_w, dhead_b]


def evaluate_student_kl(model: StudentModel, tokens_by_len: dict, teacher: np.ndarray, T: float) -> float:
    """Mean distillation loss over sequences grouped by length, eval mode."""
    total, count = 0.0, 0
    for toks, rows in tokens_by_len.values():
        logits = student_forward(model, toks, mode="eval")
        loss, _ = kl_distill_loss(logits, teacher[rows], T)
        total += loss * toks.shape[0]
        count += toks.shape[0]
    return total / max(count, 1)


def _group_by_length(token_seqs, indices) -> dict:
    """{length: (tokens array, original row indices)} for equal-length batching."""
    groups: dict[int, list[int]] = {}
    for i in indices:
        groups.setdefault(len(token_seqs[i]), []).append(i)
    return {
        length: (np.stack([np.asarray(token_seqs[i].tokens, dtype=np.int64) for i in rows]),
                 np.asarray(rows))
        for length, rows in sorted(groups.items())
    }


def train_student(
    token_seqs,
    teacher_logits: np.ndarray,
    cfg: TrainConfig,
    T: float = 3.0,
    vocab_size: int | None = None,
    embed_dim: int = 768,
    channels: int = 512,
    embedding: np.ndarray | None = None,
    val_fraction: float = 0.2,
    history: dict | None = None,
) -> StudentModel:
    """Distill teacher logits into a student over an 80/20 sequence split.

    One teacher logit row per sequence. Returns the parameters of the best
    validation-KL epoch; the batch-norm running buffers evolve during
    training and are frozen at evaluation.
    """
    teacher_logits = np.asarray(teacher_logits, dtype=np.float64)
    if len(token_seqs) != teacher_logits.shape[0]:
        raise DataError(
            f"{len(token_seqs)} sequences vs {teacher_logits.shape[0]} teacher logit rows"
        )
    if len(token_seqs) < 2:
        raise DataError("need at least 2 sequences for a train/validation split")

    if vocab_size is None:
        vocab_size = 1 + max(int(np.asarray(s.tokens).max()) for s in token_seqs if len(s))
    model = init_student(vocab_size, teacher_logits.shape[1], embed_dim=embed_dim,
                         channels=channels, temperature=T, seed=cfg.seed, embedding=embedding)
    if cfg.epochs == 0:
        return model

    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(token_seqs))
    n_val = max(1, int(round(val_fraction * len(token_seqs))))
    val_idx, train_idx = order[:n_val], order[n_val:]
    val_groups = _group_by_length(token_seqs, val_idx)

    opt = _Optimizer(model.trainable(), cfg)
    best: tuple[float, StudentModel] | None = None
    stale = 0
    val_kls = []
    init_val = evaluate_student_kl(model, val_groups, teacher_logits, T)

    for _ in range(cfg.epochs):
        perm = rng.permutation(train_idx)
        for length, (toks, rows) in _group_by_length(token_seqs, perm).items():
            for start in range(0, rows.size, cfg.batch_size):
                bt = toks[start : start + cfg.batch_size]
                br = rows[start : start + cfg.batch_size]
                if bt.shape[0] == 1:
                    continue  # the (B, C) batch norm needs >= 2 rows
                logits, caches = _student_forward_cache(model, bt, train=True)
                _, dlogits = kl_distill_loss(logits, teacher_logits[br], T)
                opt.step(_student_backward(model, dlogits, caches))

        val_kl = evaluate_student_kl(model, val_groups, teacher_logits, T)
        val_kls.append(val_kl)
        if best is None or val_kl < best[0]:
            best = (val_kl, model.copy())
            stale = 0
        else:
            stale += 1
            if cfg.patience and stale >= cfg.patience:
                break

    if history is not None:
        history["init_val_kl"] = init_val
        history["val_kl"] = val_kls
    return best[1] if best is not None else model
