"""Embedding alignment spaces and their training loop.

Each space pairs a trainable fusion network F (image feature and question
vector concatenated, passed through a small MLP) with a target function G
(frozen token embeddings, optionally through a trainable linear projection
into the common space). Compatibility between a fused feature and a candidate
token is the dot product of F's output with G's vector; probabilities are a
temperature-scaled softmax over those dots, and training minimizes the
negative log-likelihood of the gold token. The answer, relation, and entity
spaces share no trainable parameters.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .data import Dataset, Sample
from .embeddings import EmbeddingTable, Lemmatizer, phrase_vector
from .util import atomic_write_text

logger = logging.getLogger(__name__)

KINDS = ("answer", "relation", "entity")
_KIND_ID = {k: i for i, k in enumerate(KINDS)}

CHECKPOINT_FORMAT = "kgmask-space-v1"


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class FusionModel:
    """MLP over the concatenated (image feature, question vector) input.

    Hidden layers use tanh (smooth, so finite-difference checks behave); the
    output layer is linear into the common space.
    """

    def __init__(self, layer_dims: Sequence[int], weights: list[np.ndarray],
                 biases: list[np.ndarray], activation: str = "tanh"):
        if activation != "tanh":
            raise ValueError(f"unsupported activation '{activation}'")
        self.layer_dims = list(int(d) for d in layer_dims)
        if len(self.layer_dims) < 2:
            raise ValueError("need at least input and output dims")
        self.weights = weights
        self.biases = biases
        self.activation = activation
        for i, (w, b) in enumerate(zip(weights, biases)):
            expect = (self.layer_dims[i], self.layer_dims[i + 1])
            if w.shape != expect or b.shape != (expect[1],):
                raise ValueError(f"layer {i} parameter shapes {w.shape}/{b.shape} do not match dims {expect}")

    @classmethod
    def init(cls, layer_dims: Sequence[int], rng: np.random.Generator) -> "FusionModel":
        dims = list(layer_dims)
        weights = [_glorot(rng, dims[i], dims[i + 1]) for i in range(len(dims) - 1)]
        biases = [np.zeros(dims[i + 1]) for i in range(len(dims) - 1)]
        return cls(dims, weights, biases)

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Deterministic forward pass; accepts one vector or a batch of rows."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.shape[1] != self.input_dim:
            raise ValueError(f"input dim {h.shape[1]} does not match network input {self.input_dim}")
        h, _ = self._forward_trace(h)
        return h[0] if single else h

    def _forward_trace(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Batch forward keeping post-activation values for backprop."""
        h = x
        acts = [h]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = z if i == last else np.tanh(z)
            acts.append(h)
        return h, acts


def fuse(model: FusionModel, image_feat: np.ndarray, question_vec: np.ndarray) -> np.ndarray:
    """Concatenate an image feature with a question vector and run the fusion net."""
    x = np.concatenate([np.asarray(image_feat, dtype=np.float64),
                        np.asarray(question_vec, dtype=np.float64)])
    return model.forward(x)


class SpaceModel:
    """One alignment space: fusion net, target side, and its token vocabulary.

    `input_embeddings` holds the frozen per-token vectors (mean-pooled word
    embeddings); when a projection is present the target of token i is
    `input_embeddings[i] @ proj_weight`. The projection is linear with no
    bias: a shared offset would shift every candidate's score equally and so
    could never affect probabilities or rankings.
    """

    def __init__(self, kind: str, fusion: FusionModel, vocab: Sequence[str],
                 input_embeddings: np.ndarray, proj_weight: np.ndarray | None = None,
                 tau: float = 0.01, oov: frozenset[str] = frozenset()):
        if kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got '{kind}'")
        if tau <= 0:
            raise ValueError("tau must be positive")
        self.kind = kind
        self.fusion = fusion
        self.vocab = tuple(vocab)
        if len(set(self.vocab)) != len(self.vocab):
            raise ValueError("vocab contains duplicates")
        self._token_index = {t: i for i, t in enumerate(self.vocab)}
        self.input_embeddings = np.asarray(input_embeddings, dtype=np.float64)
        if self.input_embeddings.shape[0] != len(self.vocab):
            raise ValueError("one input embedding row per vocab token required")
        self.proj_weight = proj_weight
        if proj_weight is None and self.input_embeddings.shape[1] != fusion.output_dim:
            raise ValueError("without a projection, embedding dim must equal the common space dim")
        if proj_weight is not None and proj_weight.shape != (self.input_embeddings.shape[1], fusion.output_dim):
            raise ValueError("projection shape must be (embedding dim, common dim)")
        self.tau = float(tau)
        self.oov = frozenset(oov)

    @classmethod
    def build(cls, kind: str, vocab: Sequence[str], table: EmbeddingTable, input_dim: int,
              common_dim: int = 300, hidden_dims: Sequence[int] = (128,), tau: float = 0.01,
              projection: bool = True, seed: int = 0,
              lemmatizer: Lemmatizer | None = None) -> "SpaceModel":
        """Construct an untrained space over `vocab` with seeded initialization."""
        ordered = sorted(set(vocab))
        if not ordered:
            raise ValueError("vocab must be non-empty")
        rows = np.zeros((len(ordered), table.dim))
        oov = set()
        for i, token in enumerate(ordered):
            vec, missing = phrase_vector(table, token, lemmatizer)
            rows[i] = vec
            if missing:
                oov.add(token)
        rng = np.random.default_rng([seed, _KIND_ID[kind]])
        fusion = FusionModel.init([input_dim, *hidden_dims, common_dim], rng)
        pw = _glorot(rng, table.dim, common_dim) if projection else None
        return cls(kind, fusion, ordered, rows, pw, tau=tau, oov=frozenset(oov))

    @property
    def common_dim(self) -> int:
        return self.fusion.output_dim

    def rows(self, candidates: Sequence[str]) -> np.ndarray:
        try:
            return np.array([self._token_index[t] for t in candidates], dtype=np.intp)
        except KeyError as exc:
            raise KeyError(f"no target vector for token {exc.args[0]!r}") from None

    def target_matrix(self, candidates: Sequence[str] | None = None) -> np.ndarray:
        """Target vectors (one row per candidate, whole vocab when omitted)."""
        emb = self.input_embeddings if candidates is None else self.input_embeddings[self.rows(candidates)]
        return emb if self.proj_weight is None else emb @ self.proj_weight

    def target_vector(self, token: str) -> np.ndarray:
        return self.target_matrix([token])[0]

    def parameters(self) -> list[np.ndarray]:
        """Live references to all trainable arrays, in a fixed order."""
        params: list[np.ndarray] = []
        for w, b in zip(self.fusion.weights, self.fusion.biases):
            params.extend((w, b))
        if self.proj_weight is not None:
            params.append(self.proj_weight)
        return params

    def snapshot(self) -> list[np.ndarray]:
        return [p.copy() for p in self.parameters()]

    def restore(self, snapshot: Sequence[np.ndarray]) -> None:
        for p, s in zip(self.parameters(), snapshot, strict=True):
            p[...] = s


@dataclass(frozen=True)
class SpaceBundle:
    """The three independently parameterized spaces used by the masker."""

    answer: SpaceModel
    relation: SpaceModel
    entity: SpaceModel

    def __iter__(self) -> Iterator[tuple[str, SpaceModel]]:
        yield "answer", self.answer
        yield "relation", self.relation
        yield "entity", self.entity


def _logits(space: SpaceModel, fused: np.ndarray, candidates: Sequence[str]) -> np.ndarray:
    if len(candidates) == 0:
        raise ValueError("candidates must be non-empty")
    targets = space.target_matrix(candidates)
    return np.asarray(fused, dtype=np.float64) @ targets.T


def raw_scores(space: SpaceModel, fused: np.ndarray, candidates: Sequence[str]) -> np.ndarray:
    """Dot-product compatibility of a fused feature with each candidate target."""
    return _logits(space, fused, candidates)


def pmc_prob(space: SpaceModel, fused: np.ndarray, candidates: Sequence[str]) -> np.ndarray:
    """Temperature-scaled softmax over candidate compatibilities (sums to 1)."""
    scaled = _logits(space, fused, candidates) / space.tau
    scaled -= scaled.max(axis=-1, keepdims=True)
    exp = np.exp(scaled)
    return exp / exp.sum(axis=-1, keepdims=True)


def rank_tokens(candidates: Sequence[str], scores: np.ndarray) -> list[tuple[str, float]]:
    """Sort candidates by descending score, breaking ties lexicographically."""
    order = sorted(range(len(candidates)), key=lambda i: (-scores[i], candidates[i]))
    return [(candidates[i], float(scores[i])) for i in order]


def predict_unmasked(space: SpaceModel, fused: np.ndarray,
                     candidates: Sequence[str]) -> list[tuple[str, float]]:
    """Rank candidates by raw compatibility (the no-mask decision rule)."""
    return rank_tokens(list(candidates), raw_scores(space, fused, candidates))


def _gold_indices(space: SpaceModel, gold: Sequence[str], candidates: Sequence[str]) -> np.ndarray:
    lookup = {t: i for i, t in enumerate(candidates)}
    idx = np.empty(len(gold), dtype=np.intp)
    for n, g in enumerate(gold):
        if g not in lookup:
            raise ValueError(f"gold token {g!r} is not among the candidates")
        idx[n] = lookup[g]
    return idx


def loss(space: SpaceModel, inputs: np.ndarray, gold: Sequence[str],
         candidates: Sequence[str]) -> float:
    """Summed negative log-likelihood of the gold tokens for a batch of inputs.

    `inputs` holds one concatenated (image feature, question vector) row per
    sample. Zero iff every gold probability is 1; raises when a gold token is
    missing from the candidate list.
    """
    return _loss_grad(space, inputs, gold, candidates, want_grad=False)[0]


def loss_and_grad(space: SpaceModel, inputs: np.ndarray, gold: Sequence[str],
                  candidates: Sequence[str]) -> tuple[float, list[np.ndarray]]:
    """Loss plus analytic gradients, ordered like SpaceModel.parameters()."""
    value, grads = _loss_grad(space, inputs, gold, candidates, want_grad=True)
    return value, grads


def grad(space: SpaceModel, inputs: np.ndarray, gold: Sequence[str],
         candidates: Sequence[str]) -> list[np.ndarray]:
    return loss_and_grad(space, inputs, gold, candidates)[1]


def _loss_grad(space, inputs, gold, candidates, want_grad):
    X = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    gold_idx = _gold_indices(space, gold, candidates)
    if len(gold_idx) != X.shape[0]:
        raise ValueError("one gold token per input row required")
    cand_rows = space.rows(candidates)
    emb = space.input_embeddings[cand_rows]
    targets = emb if space.proj_weight is None else emb @ space.proj_weight

    fused, acts = space.fusion._forward_trace(X)
    scaled = (fused @ targets.T) / space.tau
    shift = scaled - scaled.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shift).sum(axis=1)) + scaled.max(axis=1)
    n = np.arange(X.shape[0])
    value = float(np.sum(logsumexp - scaled[n, gold_idx]))
    if not want_grad:
        return value, None

    delta = np.exp(scaled - logsumexp[:, None])
    delta[n, gold_idx] -= 1.0

    d_fused = (delta @ targets) / space.tau
    grads: list[np.ndarray] = []
    dz = d_fused
    last = len(space.fusion.weights) - 1
    layer_grads: list[tuple[np.ndarray, np.ndarray]] = []
    for i in range(last, -1, -1):
        h_prev = acts[i]
        layer_grads.append((h_prev.T @ dz, dz.sum(axis=0)))
        if i > 0:
            dh = dz @ space.fusion.weights[i].T
            dz = dh * (1.0 - acts[i] ** 2)
    for dw, db in reversed(layer_grads):
        grads.extend((dw, db))
    if space.proj_weight is not None:
        d_targets = (delta.T @ fused) / space.tau
        grads.append(emb.T @ d_targets)
    return value, grads


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer, batching, temperature, and learning-rate schedule settings."""

    batch_size: int = 128
    tau: float = 0.01
    epochs: int = 100
    patience: int = 30
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    learning_rate_scale: float = 1.0
    warmup_epochs: int = 7
    warmup_step: float = 1.25e-3
    decay_rate: float = 0.7
    decay_every: int = 3
    decay_start: int = 14
    decay_stop: int = 47
    holdout_fraction: float = 0.1

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must be in [0, 1)")


def lr_schedule(config: TrainConfig, epoch: int) -> float:
    """Learning rate for an epoch: linear warm-up, plateau, stepped decay, freeze.

    Epochs below `warmup_epochs` ramp as warmup_step * (epoch + 1); the rate
    then holds at the final warm-up value until `decay_start`, is multiplied by
    `decay_rate` once per `decay_every` epochs through `decay_stop`, and stays
    frozen afterwards.
    """
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if epoch < config.warmup_epochs:
        lr = config.warmup_step * (epoch + 1)
    else:
        lr = config.warmup_step * config.warmup_epochs
        if epoch >= config.decay_start:
            steps = (min(epoch, config.decay_stop) - config.decay_start) // config.decay_every + 1
            for _ in range(steps):
                lr *= config.decay_rate
    return lr * config.learning_rate_scale


class AdamState:
    """Per-parameter Adam moments with bias correction."""

    def __init__(self, params: Sequence[np.ndarray]):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
             lr: float, config: TrainConfig) -> None:
        self.t += 1
        b1, b2 = config.beta1, config.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v, strict=True):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= lr * (m / corr1) / (np.sqrt(v / corr2) + config.epsilon)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    monitor_loss: float


@dataclass
class TrainLog:
    kind: str
    n_samples: int
    n_skipped: int
    candidates: int
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "n_samples": self.n_samples,
            "n_skipped": self.n_skipped,
            "candidates": self.candidates,
            "best_epoch": self.best_epoch,
            "stopped_early": self.stopped_early,
            "epochs": [
                {"epoch": e.epoch, "lr": e.lr, "train_loss": e.train_loss, "monitor_loss": e.monitor_loss}
                for e in self.epochs
            ],
        }


class Featurizer:
    """Maps samples to the concatenated (image feature, question vector) input."""

    def __init__(self, table: EmbeddingTable, image_features: dict[str, np.ndarray],
                 lemmatizer: Lemmatizer | None = None):
        self.table = table
        self.image_features = image_features
        self.lemmatizer = lemmatizer
        self._question_cache: dict[str, tuple[np.ndarray, bool]] = {}
        if not image_features:
            raise ValueError("image feature map is empty")
        self.feature_dim = len(next(iter(image_features.values())))

    @property
    def input_dim(self) -> int:
        return self.feature_dim + self.table.dim

    def question_vector(self, question: str) -> tuple[np.ndarray, bool]:
        if question not in self._question_cache:
            self._question_cache[question] = phrase_vector(self.table, question, self.lemmatizer)
        return self._question_cache[question]

    def encode(self, sample: Sample) -> tuple[np.ndarray, bool]:
        """Input row for a sample plus a flag for fully out-of-vocabulary questions."""
        qvec, oov = self.question_vector(sample.question)
        img = self.image_features[sample.image_feature_id]
        return np.concatenate([img, qvec]), oov

    def encode_batch(self, samples: Sequence[Sample]) -> np.ndarray:
        return np.stack([self.encode(s)[0] for s in samples])


def _gold_token(sample: Sample, kind: str) -> str | None:
    if kind == "answer":
        return sample.answer
    if sample.fact is None:
        return None
    if kind == "relation":
        return sample.fact.relation
    return sample.support_entity()


def training_arrays(dataset: Dataset, featurizer: Featurizer,
                    kind: str) -> tuple[np.ndarray, list[str], int]:
    """Featurize the samples usable for one space; OOV questions are skipped.

    Returns (inputs, gold tokens, skipped count). Samples without a gold token
    for the space (no fact for relation/entity) are skipped silently; fully
    out-of-vocabulary questions are skipped and counted.
    """
    rows, gold, skipped = [], [], 0
    for sample in dataset.samples:
        token = _gold_token(sample, kind)
        if token is None:
            continue
        x, oov = featurizer.encode(sample)
        if oov:
            skipped += 1
            continue
        rows.append(x)
        gold.append(token)
    if not rows:
        return np.zeros((0, featurizer.input_dim)), [], skipped
    return np.stack(rows), gold, skipped


def train_space(space: SpaceModel, inputs: np.ndarray, gold: Sequence[str],
                candidates: Sequence[str], config: TrainConfig,
                rng: np.random.Generator, n_skipped: int = 0) -> TrainLog:
    """Adam-train one space in place with early stopping on held-out loss.

    A `holdout_fraction` slice of the data (when large enough to afford one)
    is withheld and its per-sample loss monitored; training stops after
    `patience` epochs without improvement and the best parameters are restored.
    """
    n = inputs.shape[0]
    if n == 0:
        raise ValueError(f"no trainable samples for the {space.kind} space")
    gold = list(gold)
    perm = rng.permutation(n)
    n_hold = int(n * config.holdout_fraction)
    hold_idx, train_idx = perm[:n_hold], perm[n_hold:]
    X_train = inputs[train_idx]
    g_train = [gold[i] for i in train_idx]
    X_hold = inputs[hold_idx]
    g_hold = [gold[i] for i in hold_idx]

    log = TrainLog(kind=space.kind, n_samples=n, n_skipped=n_skipped, candidates=len(candidates))
    params = space.parameters()
    adam = AdamState(params)
    best = np.inf
    best_snapshot = space.snapshot()
    bad_epochs = 0
    for epoch in range(config.epochs):
        lr = lr_schedule(config, epoch)
        order = rng.permutation(len(X_train))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            value, grads = loss_and_grad(space, X_train[idx], [g_train[i] for i in idx], candidates)
            adam.step(params, grads, lr, config)
            total += value
        train_loss = total / max(1, len(X_train))
        if n_hold > 0:
            monitor = loss(space, X_hold, g_hold, candidates) / n_hold
        else:
            monitor = loss(space, X_train, g_train, candidates) / max(1, len(X_train))
        log.epochs.append(EpochRecord(epoch, lr, train_loss, monitor))
        if monitor < best:
            best = monitor
            best_snapshot = space.snapshot()
            log.best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                log.stopped_early = True
                break
    space.restore(best_snapshot)
    return log


def train(bundle: SpaceBundle, dataset: Dataset, table: EmbeddingTable,
          config: TrainConfig, lemmatizer: Lemmatizer | None = None) -> dict[str, TrainLog]:
    """Train the three spaces independently on a dataset.

    Each space learns from the samples that carry its gold label (answers for
    the answer space; gold-fact relations and support entities for the other
    two), against the candidate set of gold tokens observed in training.
    Deterministic for a fixed config seed.
    """
    if not dataset.samples:
        raise ValueError("cannot train on an empty dataset")
    featurizer = Featurizer(table, dataset.image_features, lemmatizer)
    logs: dict[str, TrainLog] = {}
    for kind, space in bundle:
        X, gold, skipped = training_arrays(dataset, featurizer, kind)
        if skipped:
            logger.warning("%s space: skipped %d samples with out-of-vocabulary questions", kind, skipped)
        candidates = sorted(set(gold))
        rng = np.random.default_rng([config.seed, _KIND_ID[kind], 2])
        logs[kind] = train_space(space, X, gold, candidates, config, rng, n_skipped=skipped)
    return logs


def save_checkpoint(space: SpaceModel, path: str | Path, extra: dict | None = None) -> None:
    """Write a space to a self-describing JSON container (atomic, deterministic).

    The container records the space kind, layer dims, activation, temperature,
    all parameter arrays, the vocabulary with its frozen input embeddings, and
    any extra metadata (for example the training config).
    """
    payload = {
        "format": CHECKPOINT_FORMAT,
        "kind": space.kind,
        "tau": space.tau,
        "activation": space.fusion.activation,
        "layer_dims": space.fusion.layer_dims,
        "fusion_weights": [w.tolist() for w in space.fusion.weights],
        "fusion_biases": [b.tolist() for b in space.fusion.biases],
        "proj_weight": None if space.proj_weight is None else space.proj_weight.tolist(),
        "vocab": list(space.vocab),
        "input_embeddings": space.input_embeddings.tolist(),
        "oov": sorted(space.oov),
        "extra": extra or {},
    }
    atomic_write_text(path, json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n")


def load_checkpoint(path: str | Path) -> tuple[SpaceModel, dict]:
    """Load a checkpoint written by save_checkpoint; returns (space, extra)."""
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    fusion = FusionModel(
        payload["layer_dims"],
        [np.array(w, dtype=np.float64) for w in payload["fusion_weights"]],
        [np.array(b, dtype=np.float64) for b in payload["fusion_biases"]],
        activation=payload["activation"],
    )
    pw = payload["proj_weight"]
    space = SpaceModel(
        kind=payload["kind"],
        fusion=fusion,
        vocab=payload["vocab"],
        input_embeddings=np.array(payload["input_embeddings"], dtype=np.float64),
        proj_weight=None if pw is None else np.array(pw, dtype=np.float64),
        tau=payload["tau"],
        oov=frozenset(payload["oov"]),
    )
    return space, payload.get("extra", {})
