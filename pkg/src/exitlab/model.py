"""Multi-exit transformer encoder: one classifier head per layer.

Tokens are embedded (learned token + position tables), passed through n
post-norm transformer blocks, and after every block a linear head over
the first-token (CLS) pooled state produces a prediction: a softmax
distribution for single-label tasks, per-label sigmoids for multi-label.
A second scalar head per layer produces the confidence value used by the
learned-confidence baseline.

Inference is per sample (batch size 1); prefix equivalence holds by
construction, i.e. stopping at layer j reproduces the first j entries of
a full pass bit for bit.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError
from .policies import FINAL_FALLBACK, ExitDecision, ExitPolicy, ExitTrace, TraceEntry
from .similarity import MLC, SLC, ProbDist

__all__ = [
    "ModelConfig",
    "PredictionStream",
    "MultiExitModel",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults are desk scale."""

    vocab_size: int
    n_classes: int
    task: str = SLC
    n_layers: int = 6
    d_model: int = 64
    n_heads: int = 2
    d_ff: int = 256
    max_seq_len: int = 64
    seed: int = 0
    share_layer_params: bool = False

    def __post_init__(self):
        if self.task not in (SLC, MLC):
            raise ConfigError(f"task must be {SLC!r} or {MLC!r}, got {self.task!r}")
        if self.n_layers < 2:
            raise ConfigError("need at least 2 layers for cross-layer comparison")
        if self.n_classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.vocab_size < 1 or self.max_seq_len < 1:
            raise ConfigError("vocab_size and max_seq_len must be positive")


@dataclass
class PredictionStream:
    """Ordered per-layer predictions (and confidence values) for one input."""

    probs: list[ProbDist]
    confidences: list[float]
    hidden: list[np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self.probs)


class MultiExitModel:
    """Embedding + n transformer blocks + n classifier heads."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, T.Tensor] = {}
        self._init_params()

    # -- parameters ----------------------------------------------------

    def _param(self, name: str, array: np.ndarray) -> T.Tensor:
        t = T.Tensor(array, requires_grad=True)
        self.params[name] = t
        return t

    def _init_params(self) -> None:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        std = 0.02

        def normal(*shape):
            return rng.normal(0.0, std, size=shape)

        self._param("embed.tok", normal(cfg.vocab_size, cfg.d_model))
        self._param("embed.pos", normal(cfg.max_seq_len, cfg.d_model))
        n_blocks = 1 if cfg.share_layer_params else cfg.n_layers
        for i in range(n_blocks):
            pre = f"block{i}"
            for w in ("wq", "wk", "wv", "wo"):
                self._param(f"{pre}.{w}", normal(cfg.d_model, cfg.d_model))
                self._param(f"{pre}.{w[0]}b{w[1]}", np.zeros(cfg.d_model))
            self._param(f"{pre}.ln1.g", np.ones(cfg.d_model))
            self._param(f"{pre}.ln1.b", np.zeros(cfg.d_model))
            self._param(f"{pre}.w1", normal(cfg.d_model, cfg.d_ff))
            self._param(f"{pre}.b1", np.zeros(cfg.d_ff))
            self._param(f"{pre}.w2", normal(cfg.d_ff, cfg.d_model))
            self._param(f"{pre}.b2", np.zeros(cfg.d_model))
            self._param(f"{pre}.ln2.g", np.ones(cfg.d_model))
            self._param(f"{pre}.ln2.b", np.zeros(cfg.d_model))
        # heads start at zero so an untrained model predicts uniformly
        for i in range(cfg.n_layers):
            self._param(f"head{i}.w", np.zeros((cfg.d_model, cfg.n_classes)))
            self._param(f"head{i}.b", np.zeros(cfg.n_classes))
            self._param(f"conf{i}.w", np.zeros((cfg.d_model, 1)))
            self._param(f"conf{i}.b", np.zeros(1))

    def parameters(self) -> dict[str, T.Tensor]:
        """Named parameter tensors (shared blocks appear once)."""
        return dict(self.params)

    def param_hash(self) -> str:
        """Stable digest of config plus every parameter's bytes."""
        h = hashlib.sha256()
        h.update(json.dumps(asdict(self.config), sort_keys=True).encode())
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].array.tobytes())
        return h.hexdigest()[:16]

    def _block_prefix(self, layer_index: int) -> str:
        return "block0" if self.config.share_layer_params else f"block{layer_index - 1}"

    # -- forward pieces --------------------------------------------------

    def embed(self, tokens) -> T.Tensor:
        """Token + position embeddings.

        1-D input of length t gives [t, d_model]; 2-D [b, t] input (already
        padded) gives [b, t, d_model].
        """
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim not in (1, 2) or ids.size == 0:
            raise DataError(f"embed needs a non-empty 1-D or 2-D id array, got shape {ids.shape}")
        seq_len = ids.shape[-1]
        if seq_len > self.config.max_seq_len:
            raise DataError(f"sequence length {seq_len} exceeds max_seq_len {self.config.max_seq_len}")
        bad = np.flatnonzero((ids < 0) | (ids >= self.config.vocab_size))
        if bad.size:
            pos = int(bad[0])
            raise DataError(
                f"token id {int(ids.reshape(-1)[pos])} at flat position {pos} "
                f"is outside the vocabulary (size {self.config.vocab_size})"
            )
        tok = T.embedding_lookup(self.params["embed.tok"], ids)
        pos = T.embedding_lookup(self.params["embed.pos"], np.arange(seq_len))
        return tok + pos

    def _attention_mask(self, pad_mask: np.ndarray, n_heads: int) -> T.Tensor:
        """Additive mask [b, h, t, t]: large negative where the key is padding."""
        b, t = pad_mask.shape
        add = (1.0 - pad_mask[:, None, None, :]) * -1e9
        return T.Tensor(np.broadcast_to(add, (b, n_heads, t, t)).copy())

    def _block(self, h: T.Tensor, layer_index: int, attn_mask: T.Tensor | None) -> T.Tensor:
        cfg = self.config
        pre = self._block_prefix(layer_index)
        p = self.params
        b, t, d = h.shape
        nh, hd = cfg.n_heads, cfg.d_model // cfg.n_heads

        def heads(x):
            return x.reshape((b, t, nh, hd)).transpose((0, 2, 1, 3))

        q = heads(T.matmul(h, p[f"{pre}.wq"]) + p[f"{pre}.wbq"])
        k = heads(T.matmul(h, p[f"{pre}.wk"]) + p[f"{pre}.wbk"])
        v = heads(T.matmul(h, p[f"{pre}.wv"]) + p[f"{pre}.wbv"])
        scores = T.matmul(q, k.transpose((0, 1, 3, 2))) * (1.0 / np.sqrt(hd))
        if attn_mask is not None:
            scores = scores + attn_mask
        ctx = T.matmul(T.softmax(scores, axis=-1), v)
        ctx = ctx.transpose((0, 2, 1, 3)).reshape((b, t, d))
        attn_out = T.matmul(ctx, p[f"{pre}.wo"]) + p[f"{pre}.wbo"]
        h = T.layer_norm(h + attn_out, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
        ff = T.gelu(T.matmul(h, p[f"{pre}.w1"]) + p[f"{pre}.b1"])
        ff = T.matmul(ff, p[f"{pre}.w2"]) + p[f"{pre}.b2"]
        return T.layer_norm(h + ff, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])

    def _head_logits(self, h: T.Tensor, layer_index: int) -> T.Tensor:
        cls = T.select(h, axis=1, index=0)
        i = layer_index - 1
        return T.matmul(cls, self.params[f"head{i}.w"]) + self.params[f"head{i}.b"]

    def _confidence_logits(self, h: T.Tensor, layer_index: int) -> T.Tensor:
        cls = T.select(h, axis=1, index=0)
        i = layer_index - 1
        out = T.matmul(cls, self.params[f"conf{i}.w"]) + self.params[f"conf{i}.b"]
        return out.reshape((h.shape[0],))

    def _to_probdist(self, prob_row: np.ndarray) -> ProbDist:
        if self.config.task == SLC:
            return ProbDist.slc(prob_row)
        return ProbDist.mlc(prob_row)

    # -- training-side forward -------------------------------------------

    def forward_batch(self, ids: np.ndarray, pad_mask: np.ndarray) -> tuple[list[T.Tensor], list[T.Tensor]]:
        """Tape-recording pass over a padded batch.

        Returns per-layer class probabilities [b, k] and per-layer
        confidence values [b], both as tensors attached to the tape.
        """
        mask_t = self._attention_mask(pad_mask, self.config.n_heads)
        h = self.embed(ids)
        probs, confs = [], []
        for layer in range(1, self.config.n_layers + 1):
            h = self._block(h, layer, mask_t)
            logits = self._head_logits(h, layer)
            if self.config.task == SLC:
                probs.append(T.softmax(logits, axis=-1))
            else:
                probs.append(T.sigmoid(logits))
            confs.append(T.sigmoid(self._confidence_logits(h, layer)))
        return probs, confs

    # -- inference-side forward ---------------------------------------

    def forward_layer(self, h_prev: T.Tensor, layer_index: int) -> tuple[T.Tensor, ProbDist]:
        """Run one block on a [t, d_model] state; return new state + prediction."""
        if not 1 <= layer_index <= self.config.n_layers:
            raise ValueError(f"layer_index {layer_index} outside [1, {self.config.n_layers}]")
        t, d = h_prev.shape
        with T.no_grad():
            h = self._block(h_prev.reshape((1, t, d)), layer_index, None)
            if self.config.task == SLC:
                prob = T.softmax(self._head_logits(h, layer_index), axis=-1)
            else:
                prob = T.sigmoid(self._head_logits(h, layer_index))
        return h.reshape((t, d)), self._to_probdist(prob.array[0])

    def layer_confidence(self, h: T.Tensor, layer_index: int) -> float:
        """Confidence-head output in (0, 1) for a [t, d_model] state."""
        t, d = h.shape
        with T.no_grad():
            c = T.sigmoid(self._confidence_logits(h.reshape((1, t, d)), layer_index))
        return float(c.array[0])

    def forward_full(self, tokens, keep_hidden: bool = False) -> PredictionStream:
        """All n layers; the stream used for training targets and oracles."""
        with T.no_grad():
            h = self.embed(tokens)
            stream = PredictionStream([], [], [] if keep_hidden else None)
            for layer in range(1, self.config.n_layers + 1):
                h, p = self.forward_layer(h, layer)
                stream.probs.append(p)
                stream.confidences.append(self.layer_confidence(h, layer))
                if keep_hidden:
                    stream.hidden.append(h.numpy())
        return stream

    def forward_early_exit(self, tokens, policy: ExitPolicy) -> tuple[ProbDist, int, ExitTrace]:
        """Run layers until ``policy`` halts; fall back to the final classifier.

        The returned prediction is bit-identical to the same layer's entry
        in :meth:`forward_full`.
        """
        policy.reset()
        n = self.config.n_layers
        entries: list[TraceEntry] = []
        with T.no_grad():
            h = self.embed(tokens)
            prob = None
            for layer in range(1, n + 1):
                h, prob = self.forward_layer(h, layer)
                conf = self.layer_confidence(h, layer)
                decision = policy.step(layer, prob, conf)
                entries.append(
                    TraceEntry(layer, _pred_summary(prob), policy.last_score, policy.pat, decision)
                )
                if decision.halt:
                    return prob, layer, ExitTrace(tuple(entries), layer, decision.reason)
        fallback = ExitDecision(True, FINAL_FALLBACK)
        entries[-1] = replace(entries[-1], decision=fallback)
        return prob, n, ExitTrace(tuple(entries), n, FINAL_FALLBACK)


def _pred_summary(p: ProbDist) -> int | frozenset[int]:
    return p.argmax() if p.kind == SLC else p.label_set()


# -- checkpointing --------------------------------------------------------


def save_checkpoint(model: MultiExitModel, path, vocab: list[str] | None = None) -> None:
    """Write an npz container: config + named tensors + optional vocab."""
    meta = {
        "format": "exitlab-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "vocab": vocab,
    }
    arrays = {name: t.array for name, t in model.params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path) -> tuple[MultiExitModel, list[str] | None]:
    """Rebuild a model (and its vocab, if stored) from :func:`save_checkpoint`."""
    with np.load(path, allow_pickle=False) as data:
        if "__meta__" not in data:
            raise DataError(f"{path}: not an exitlab checkpoint (missing metadata)")
        meta = json.loads(str(data["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise DataError(
                f"{path}: checkpoint version {meta.get('version')!r} unsupported "
                f"(expected {CHECKPOINT_VERSION})"
            )
        config = ModelConfig(**meta["config"])
        model = MultiExitModel(config)
        for name, t in model.params.items():
            if name not in data:
                raise DataError(f"{path}: checkpoint is missing parameter {name!r}")
            arr = np.asarray(data[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise DataError(f"{path}: parameter {name!r} has shape {arr.shape}, expected {t.shape}")
            t.array[...] = arr
    return model, meta.get("vocab")
