"""The feature optimizer: a recurrent encoder that embeds post-order token
sequences, an MLP head that predicts normalized loss from the embedding, and
an attention decoder that reconstructs the sequence.

The three parts are co-trained with a joint objective (prediction squared
error plus reconstruction cross-entropy, balanced by an adaptive weight),
and trained models support gradient descent directly on the encoder hidden
states to generate improved features.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import dsl
from .autodiff import Tensor, concat, gather_rows
from .dsl import ParseTree, TransformationRegistry, Vocabulary

__all__ = [
    "TrainConfig",
    "LatentStepConfig",
    "EmbeddingState",
    "DecodeFailure",
    "EpochStats",
    "NonFiniteLoss",
    "FeatureOptimizer",
    "save_checkpoint",
    "load_checkpoint",
    "write_loss_history",
]

NEG_INF = -1e9


class NonFiniteLoss(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite training loss at epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    max_epochs: int = 400
    warmup_epochs: int = 5
    batch_size: int = 128
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    augment_limit: int = 4  # equivalent strings per feature when building corpora


@dataclass
class LatentStepConfig:
    step_size: float = 0.01
    max_steps: int = 50

    def __post_init__(self):
        if self.step_size < 0 or self.max_steps < 1:
            raise ValueError("step_size must be >= 0 and max_steps >= 1")


@dataclass
class EmbeddingState:
    """All encoder hidden states (one row per input token) and their sum."""

    hidden: np.ndarray  # (T, H)
    summary: np.ndarray  # (H,) == hidden.sum(axis=0)


@dataclass
class DecodeFailure:
    """Greedy decoding emitted a token sequence that does not parse."""

    tokens: list[str]
    reason: str


@dataclass
class EpochStats:
    epoch: int
    loss_pp: float
    loss_rec: float
    lam: float

    @property
    def total(self) -> float:
        return self.lam * self.loss_pp + self.loss_rec


class Adam:
    """Adam with bias correction; state per parameter tensor."""

    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / (1 - self.b1**self.t)
            vhat = self.v[i] / (1 - self.b2**self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class _LSTMCell:
    """Single recurrent cell with input/forget/output/cell gates, fused into
    one (in, 4H) and one (H, 4H) weight matrix."""

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator):
        s = 1.0 / np.sqrt(hidden_size)
        self.Wx = Tensor(rng.uniform(-s, s, (input_size, 4 * hidden_size)))
        self.Wh = Tensor(rng.uniform(-s, s, (hidden_size, 4 * hidden_size)))
        b = np.zeros(4 * hidden_size)
        b[hidden_size : 2 * hidden_size] = 1.0  # open forget gates at init
        self.b = Tensor(b)
        self.hidden_size = hidden_size

    def parameters(self):
        return [self.Wx, self.Wh, self.b]

    def step(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        H = self.hidden_size
        gates = x @ self.Wx + h @ self.Wh + self.b
        i = gates.slice_cols(0, H).sigmoid()
        f = gates.slice_cols(H, 2 * H).sigmoid()
        o = gates.slice_cols(2 * H, 3 * H).sigmoid()
        g = gates.slice_cols(3 * H, 4 * H).tanh()
        c_new = f * c + i * g
        h_new = o * c_new.tanh()
        return h_new, c_new


class FeatureOptimizer:
    """Encoder + predictor + decoder over a fixed vocabulary."""

    PREDICTOR_LAYERS = 5

    def __init__(
        self,
        vocab: Vocabulary,
        hidden_size: int = 64,
        embed_size: int = 32,
        seed: int = 0,
    ):
        self.vocab = vocab
        self.hidden_size = hidden_size
        self.embed_size = embed_size
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(2,)))
        V, H, E = len(vocab), hidden_size, embed_size

        self.embedding = Tensor(rng.uniform(-0.1, 0.1, (V, E)))
        self.encoder = _LSTMCell(E, H, rng)
        self.decoder = _LSTMCell(E, H, rng)
        s = 1.0 / np.sqrt(H)
        self.pred_W = [Tensor(rng.uniform(-s, s, (H, H))) for _ in range(self.PREDICTOR_LAYERS - 1)]
        self.pred_W.append(Tensor(rng.uniform(-s, s, (H, 1))))
        # biases drawn away from zero so rectifier kinks never sit exactly at
        # the evaluation point (keeps finite-difference checks meaningful)
        self.pred_b = [Tensor(rng.uniform(-s, s, H)) for _ in range(self.PREDICTOR_LAYERS - 1)]
        self.pred_b.append(Tensor(rng.uniform(-s, s, 1)))
        self.out_W = Tensor(rng.uniform(-s, s, (2 * H, V)))
        self.out_b = Tensor(np.zeros(V))
        self.lam: Optional[float] = None  # frozen adaptive loss weight after warm-up

    def parameters(self) -> list[Tensor]:
        return (
            [self.embedding]
            + self.encoder.parameters()
            + self.decoder.parameters()
            + self.pred_W
            + self.pred_b
            + [self.out_W, self.out_b]
        )

    # -- forward passes ---------------------------------------------------

    def _encode_batch(self, tokens: np.ndarray, mask: np.ndarray) -> tuple[Tensor, Tensor]:
        """tokens (B,T) int ids, mask (B,T) floats -> hidden (B,T,H), summary (B,H)."""
        B, T = tokens.shape
        H = self.hidden_size
        h = Tensor(np.zeros((B, H)), requires_grad=False)
        c = Tensor(np.zeros((B, H)), requires_grad=False)
        states = []
        for t in range(T):
            x = gather_rows(self.embedding, tokens[:, t])
            h_new, c_new = self.encoder.step(x, h, c)
            m = mask[:, t : t + 1]
            h = h_new * m + h * (1.0 - m)
            c = c_new * m + c * (1.0 - m)
            states.append((h_new * m).reshape(B, 1, H))
        hidden = concat(states, axis=1)
        summary = hidden.sum(axis=1)
        return hidden, summary

    def _predict(self, summary: Tensor) -> Tensor:
        """(B,H) embedding sums -> (B,1) sigmoid scores."""
        z = summary
        for W, b in zip(self.pred_W[:-1], self.pred_b[:-1]):
            z = (z @ W + b).relu()
        return (z @ self.pred_W[-1] + self.pred_b[-1]).sigmoid()

    def _decode_step(self, prev_ids, h, c, enc_hidden, enc_mask_add):
        """One decoder step; returns (logits (B,V), attention (B,T), h, c)."""
        B = prev_ids.shape[0]
        x = gather_rows(self.embedding, prev_ids)
        h, c = self.decoder.step(x, h, c)
        scores = (enc_hidden * h.reshape(B, 1, self.hidden_size)).sum(axis=2)
        attn = (scores + enc_mask_add).softmax_cols()
        T = attn.shape[1]
        context = (attn.reshape(B, T, 1) * enc_hidden).sum(axis=1)
        logits = concat([h, context], axis=-1) @ self.out_W + self.out_b
        return logits, attn, h, c

    def _batch_losses(self, tokens, mask, scores) -> tuple[Tensor, Tensor]:
        """Joint-loss components for one padded batch (both are sums)."""
        B, T = tokens.shape
        enc_hidden, summary = self._encode_batch(tokens, mask)
        pred = self._predict(summary)
        target = scores.reshape(B, 1)
        loss_pp = (Tensor(target, requires_grad=False) - pred).square().sum()

        enc_mask_add = Tensor(np.where(mask > 0, 0.0, NEG_INF), requires_grad=False)
        # teacher forcing: inputs <sos>, x_1..x_T ; targets x_1..x_T, <eos>
        lengths = mask.sum(axis=1).astype(np.int64)
        dec_in = np.full((B, T + 1), self.vocab.pad_id, dtype=np.int64)
        dec_in[:, 0] = self.vocab.sos_id
        dec_in[:, 1:] = tokens
        dec_target = np.full((B, T + 1), self.vocab.pad_id, dtype=np.int64)
        dec_target[:, :T] = tokens
        dec_target[np.arange(B), lengths] = self.vocab.eos_id
        dec_mask = np.zeros((B, T + 1))
        for r, L in enumerate(lengths):
            dec_mask[r, : L + 1] = 1.0

        h, c = summary, Tensor(np.zeros((B, self.hidden_size)), requires_grad=False)
        loss_rec = None
        eye = np.eye(len(self.vocab))
        for t in range(T + 1):
            logits, _, h, c = self._decode_step(dec_in[:, t], h, c, enc_hidden, enc_mask_add)
            logp = logits - logits.logsumexp_cols()
            onehot = eye[dec_target[:, t]] * dec_mask[:, t : t + 1]
            step_loss = -(logp * Tensor(onehot, requires_grad=False)).sum()
            loss_rec = step_loss if loss_rec is None else loss_rec + step_loss
        return loss_pp, loss_rec

    # -- training ---------------------------------------------------------

    @staticmethod
    def _pad_batch(seqs: list[list[int]], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
        T = max(len(s) for s in seqs)
        tokens = np.full((len(seqs), T), pad_id, dtype=np.int64)
        mask = np.zeros((len(seqs), T))
        for i, s in enumerate(seqs):
            tokens[i, : len(s)] = s
            mask[i, : len(s)] = 1.0
        return tokens, mask

    def train(
        self,
        corpus: Sequence[tuple[list[int], float]],
        config: TrainConfig,
        rng: np.random.Generator,
        epochs: Optional[int] = None,
    ) -> list[EpochStats]:
        """Minimize lam * L_pp + L_rec over the scored corpus.

        The first ``warmup_epochs`` use lam = 1; afterwards lam is frozen at
        the ratio of warm-up reconstruction loss to warm-up prediction loss.
        Re-entrant: fine-tuning calls continue with the frozen lam.
        """
        if not corpus:
            raise ValueError("corpus is empty")
        n_epochs = config.max_epochs if epochs is None else epochs
        optimizer = Adam(self.parameters(), config.learning_rate, config.betas)
        history: list[EpochStats] = []
        warm_pp: list[float] = []
        warm_rec: list[float] = []

        # length-bucketed batches keep padding (and wasted work) small;
        # batch order is shuffled every epoch
        by_length = sorted(range(len(corpus)), key=lambda i: (len(corpus[i][0]), i))
        batches = [
            by_length[lo : lo + config.batch_size]
            for lo in range(0, len(by_length), config.batch_size)
        ]
        for epoch in range(n_epochs):
            if self.lam is None and epoch >= config.warmup_epochs:
                denom = sum(warm_pp)
                self.lam = (sum(warm_rec) / denom) if denom > 0 else 1.0
            lam = 1.0 if self.lam is None else self.lam

            epoch_pp = 0.0
            epoch_rec = 0.0
            for b in rng.permutation(len(batches)):
                batch = [corpus[i] for i in batches[b]]
                tokens, mask = self._pad_batch([b[0] for b in batch], self.vocab.pad_id)
                scores = np.array([b[1] for b in batch])
                loss_pp, loss_rec = self._batch_losses(tokens, mask, scores)
                total = loss_pp * lam + loss_rec
                if not np.isfinite(total.data):
                    raise NonFiniteLoss(epoch)
                optimizer.zero_grad()
                total.backward()
                optimizer.step()
                epoch_pp += float(loss_pp.data)
                epoch_rec += float(loss_rec.data)

            if self.lam is None:
                warm_pp.append(epoch_pp)
                warm_rec.append(epoch_rec)
            history.append(EpochStats(epoch, epoch_pp, epoch_rec, lam))
        return history

    # -- inference --------------------------------------------------------

    def encode(self, token_ids: Sequence[int]) -> EmbeddingState:
        """Hidden states and their sum for one id sequence."""
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size < 1:
            raise ValueError("need a non-empty 1-D id sequence")
        if ids.min() < 0 or ids.max() >= len(self.vocab):
            raise KeyError(f"token id outside vocabulary of size {len(self.vocab)}")
        hidden, summary = self._encode_batch(ids[None, :], np.ones((1, ids.size)))
        return EmbeddingState(hidden=hidden.data[0].copy(), summary=summary.data[0].copy())

    def predict(self, summary: np.ndarray) -> float:
        """Predicted normalized loss in (0,1) for an embedding sum."""
        out = self._predict(Tensor(np.asarray(summary, dtype=np.float64).reshape(1, -1), requires_grad=False))
        return float(out.data[0, 0])

    def gradient_wrt_hidden(self, state: EmbeddingState) -> np.ndarray:
        """d predict / d hidden_r for each encoder hidden state (T, H).

        The hidden states are free variables here: nothing flows back into
        the encoder weights, and because the embedding is their sum, every
        row receives the same gradient.
        """
        hidden = Tensor(state.hidden.copy())
        pred = self._predict(hidden.sum(axis=0).reshape(1, -1))
        pred.backward()
        return hidden.grad.copy()

    def decode(self, state: EmbeddingState, max_len: int) -> list[str] | DecodeFailure:
        """Greedy decode from (hidden, summary); parse-checked output."""
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        tokens = self._greedy_tokens(state, max_len)
        names, registry = self._content_vocab()
        try:
            dsl.parse_postorder(tokens, registry, names)
        except dsl.DslError as err:
            return DecodeFailure(tokens=tokens, reason=str(err))
        return tokens

    def _greedy_tokens(self, state: EmbeddingState, max_len: int) -> list[str]:
        T = state.hidden.shape[0]
        enc_hidden = Tensor(state.hidden[None, :, :], requires_grad=False)
        enc_mask_add = Tensor(np.zeros((1, T)), requires_grad=False)
        h = Tensor(state.summary[None, :], requires_grad=False)
        c = Tensor(np.zeros((1, self.hidden_size)), requires_grad=False)
        forbid = [self.vocab.pad_id, self.vocab.sos_id]
        prev = np.array([self.vocab.sos_id], dtype=np.int64)
        out: list[str] = []
        for _ in range(max_len):
            logits, _, h, c = self._decode_step(prev, h, c, enc_hidden, enc_mask_add)
            row = logits.data[0].copy()
            row[forbid] = -np.inf
            nxt = int(np.argmax(row))
            if nxt == self.vocab.eos_id:
                break
            out.append(self.vocab.token_of(nxt))
            prev = np.array([nxt], dtype=np.int64)
        return out

    def _content_vocab(self) -> tuple[list[str], TransformationRegistry]:
        registry = dsl.default_registry()
        names = [t for t in self.vocab.tokens[3:] if t not in registry]
        return names, registry

    def optimize_feature(
        self,
        tree: ParseTree,
        feature_names: Sequence[str],
        registry: TransformationRegistry,
        max_order: int,
        config: LatentStepConfig,
    ) -> Optional[ParseTree]:
        """Repeated small latent gradient steps until the decoder leaves the
        input's equivalence neighborhood; None when no step escapes.

        Each step moves every hidden state against the predictor gradient,
        recomputes the summary as their sum, and greedily decodes.  A decode
        is accepted when it parses, is canonically different from the input
        and respects the order bound.
        """
        tokens = dsl.to_postorder(tree, feature_names)
        start_key = dsl.canonical_key(tree, feature_names)
        state = self.encode(self.vocab.encode(tokens))
        max_len = 2 ** (max_order + 1) - 1
        hidden = state.hidden.copy()
        for _ in range(config.max_steps):
            grad = self.gradient_wrt_hidden(EmbeddingState(hidden, hidden.sum(axis=0)))
            hidden = hidden - config.step_size * grad
            current = EmbeddingState(hidden, hidden.sum(axis=0))
            decoded = self.decode(current, max_len)
            if isinstance(decoded, DecodeFailure):
                continue
            try:
                candidate = dsl.parse_postorder(decoded, registry, feature_names)
            except dsl.DslError:
                continue
            if dsl.canonical_key(candidate, feature_names) == start_key:
                continue
            if dsl.order(candidate) > max_order:
                continue
            return candidate
        return None


# -- persistence ----------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(model: FeatureOptimizer, path: str):
    """Versioned npz dump of every tensor plus vocabulary; bit-exact on load."""
    arrays = {f"param_{i}": p.data for i, p in enumerate(model.parameters())}
    meta = {
        "version": CHECKPOINT_VERSION,
        "hidden_size": model.hidden_size,
        "embed_size": model.embed_size,
        "vocab": model.vocab.tokens,
        "lam": model.lam,
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str) -> FeatureOptimizer:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        vocab = Vocabulary(tokens=meta["vocab"], _ids={t: i for i, t in enumerate(meta["vocab"])})
        model = FeatureOptimizer(vocab, meta["hidden_size"], meta["embed_size"])
        for i, p in enumerate(model.parameters()):
            p.data = data[f"param_{i}"].copy()
        model.lam = meta["lam"]
    return model


def write_loss_history(history: Sequence[EpochStats], path: str):
    with open(path, "w") as fh:
        fh.write("epoch,loss_pp,loss_rec,lambda,total\n")
        for h in history:
            fh.write(f"{h.epoch},{h.loss_pp:.10g},{h.loss_rec:.10g},{h.lam:.10g},{h.total:.10g}\n")
