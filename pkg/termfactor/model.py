"""
Transformer encoder-decoder with a source factor stream.

Source positions are embedded as the concatenation of a subword embedding and
a factor embedding (three rows, one per factor value); the two widths add up
to model_size. Target positions reuse the shared subword table and the
factor-0 row, so both sides enter the network with the same width.
"""

import copy
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .subword import Vocabulary
from .utils import PathLike

logger = logging.getLogger(__name__)

NUM_FACTORS = 3
CHECKPOINT_MAGIC = b"TERMFACT"
CHECKPOINT_VERSION = 1


def _from_dict(cls, data: Dict[str, Any]):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"Unknown {cls.__name__} field(s): {', '.join(unknown)}")
    return cls(**data)


@dataclass
class ModelConfig:
    model_size: int = 128
    num_layers_enc: int = 2
    num_layers_dec: int = 2
    attention_heads: int = 4
    feed_forward_hidden: int = 256
    dropout: float = 0.1
    label_smoothing: float = 0.1
    factor_embed_size: int = 8
    vocab_size: int = 0
    max_seq_len: int = 64
    seed: int = 1

    def __post_init__(self):
        if self.factor_embed_size < 1:
            raise ValueError("factor_embed_size must be >= 1")
        if self.factor_embed_size >= self.model_size:
            raise ValueError("factor_embed_size must be smaller than model_size")
        if self.model_size % self.attention_heads:
            raise ValueError("model_size must be divisible by attention_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")

    @property
    def word_embed_size(self) -> int:
        return self.model_size - self.factor_embed_size

    @classmethod
    def full_size(cls, vocab_size: int = 0) -> "ModelConfig":
        """The full-size configuration: 512 wide, 2+2 layers, 8 heads, 16-wide factors."""
        return cls(
            model_size=512,
            num_layers_enc=2,
            num_layers_dec=2,
            attention_heads=8,
            feed_forward_hidden=2048,
            dropout=0.1,
            label_smoothing=0.1,
            factor_embed_size=16,
            vocab_size=vocab_size,
            max_seq_len=101,
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        return _from_dict(cls, data)


@dataclass
class TrainingConfig:
    batch_size: int = 32
    learning_rate: float = 1e-3
    warmup_steps: int = 200
    min_epochs: int = 10
    max_epochs: int = 100
    patience: int = 10
    clip_gradient: float = 1.0

    def __post_init__(self):
        if self.min_epochs > self.max_epochs:
            raise ValueError("min_epochs must not exceed max_epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainingConfig":
        return _from_dict(cls, data)


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, epoch: int, batch: int, loss: float):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"Training diverged at epoch {epoch}, batch {batch} (loss={loss})")


@dataclass(frozen=True)
class EncodedPair:
    """A subword-id training pair; tgt excludes BOS and EOS."""

    src: Tuple[int, ...]
    factors: Tuple[int, ...]
    tgt: Tuple[int, ...]


def sinusoid_table(length: int, width: int) -> torch.Tensor:
    position = torch.arange(length, dtype=torch.float32).unsqueeze(1)
    div_term = torch.exp(torch.arange(0, width, 2, dtype=torch.float32) * (-math.log(10000.0) / width))
    table = torch.zeros(length, width)
    table[:, 0::2] = torch.sin(position * div_term)
    table[:, 1::2] = torch.cos(position * div_term)[:, : width // 2]
    return table


class TermTransformer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.vocab_size < 1:
            raise ValueError("ModelConfig.vocab_size must be set before building the model")
        self.config = config
        d = config.model_size

        self.embedding = nn.Embedding(config.vocab_size, config.word_embed_size, padding_idx=0)
        self.factor_embedding = nn.Embedding(NUM_FACTORS, config.factor_embed_size)
        self.register_buffer("positions", sinusoid_table(config.max_seq_len + 1, d), persistent=False)
        self.dropout = nn.Dropout(config.dropout)

        encoder_layer = nn.TransformerEncoderLayer(
            d, config.attention_heads, config.feed_forward_hidden, config.dropout,
            activation="relu", batch_first=True, norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(
            encoder_layer, config.num_layers_enc, norm=nn.LayerNorm(d), enable_nested_tensor=False,
        )
        decoder_layer = nn.TransformerDecoderLayer(
            d, config.attention_heads, config.feed_forward_hidden, config.dropout,
            activation="relu", batch_first=True, norm_first=True,
        )
        self.decoder = nn.TransformerDecoder(decoder_layer, config.num_layers_dec, norm=nn.LayerNorm(d))
        self.output = nn.Linear(d, config.vocab_size)

    def _check_length(self, length: int, what: str) -> None:
        if length > self.config.max_seq_len:
            raise ValueError(f"{what} length {length} exceeds max_seq_len={self.config.max_seq_len}")

    def embed_source(self, src: torch.Tensor, factors: torch.Tensor) -> torch.Tensor:
        """
        Embed source subwords and factors.

        Args:
            src: Subword ids [batch, length]
            factors: Factor values [batch, length], each in {0, 1, 2}

        Returns:
            Tensor [batch, length, model_size]: concatenated embeddings plus positions
        """
        if src.shape != factors.shape:
            raise ValueError(f"Source ids {tuple(src.shape)} and factors {tuple(factors.shape)} differ in shape")
        if factors.numel() and (int(factors.min()) < 0 or int(factors.max()) >= NUM_FACTORS):
            raise ValueError(f"Factor values must be in [0, {NUM_FACTORS}), got {factors.unique().tolist()}")
        self._check_length(src.size(1), "Source")

        embedded = torch.cat([self.embedding(src), self.factor_embedding(factors)], dim=-1)
        return embedded + self.positions[: src.size(1)]

    def embed_target(self, tgt: torch.Tensor) -> torch.Tensor:
        self._check_length(tgt.size(1), "Target prefix")
        plain = torch.zeros_like(tgt)
        embedded = torch.cat([self.embedding(tgt), self.factor_embedding(plain)], dim=-1)
        return embedded + self.positions[: tgt.size(1)]

    def encode(self, src: torch.Tensor, factors: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        padding = src.eq(0)
        memory = self.encoder(self.dropout(self.embed_source(src, factors)), src_key_padding_mask=padding)
        return memory, padding

    def decode(self, memory: torch.Tensor, memory_padding: torch.Tensor, tgt_in: torch.Tensor) -> torch.Tensor:
        length = tgt_in.size(1)
        causal = torch.triu(torch.ones(length, length, dtype=torch.bool, device=tgt_in.device), diagonal=1)
        hidden = self.decoder(
            self.dropout(self.embed_target(tgt_in)),
            memory,
            tgt_mask=causal,
            tgt_key_padding_mask=tgt_in.eq(0),
            memory_key_padding_mask=memory_padding,
        )
        return self.output(hidden)

    def forward(self, src: torch.Tensor, factors: torch.Tensor, tgt_in: torch.Tensor) -> torch.Tensor:
        """Logits [batch, target length, vocab] for teacher-forced target prefixes."""
        memory, padding = self.encode(src, factors)
        return self.decode(memory, padding, tgt_in)

    @torch.no_grad()
    def next_token_distribution(
        self,
        src: Sequence[int],
        factors: Sequence[int],
        prefix: Sequence[int],
    ) -> torch.Tensor:
        """
        Probability distribution over the next subword.

        Args:
            src: Source subword ids
            factors: Source factors, one per subword
            prefix: Target ids emitted so far, starting with BOS

        Returns:
            Tensor [vocab]: probabilities summing to one
        """
        src_t = torch.tensor([list(src)], dtype=torch.long)
        factors_t = torch.tensor([list(factors)], dtype=torch.long)
        prefix_t = torch.tensor([list(prefix)], dtype=torch.long)
        logits = self.forward(src_t, factors_t, prefix_t)[0, -1]
        return torch.softmax(logits.double(), dim=-1)


def collate(pairs: Sequence[EncodedPair], bos_id: int, eos_id: int) -> Dict[str, torch.Tensor]:
    """Pad a list of pairs into source, factor, decoder-input and label tensors."""
    src_len = max(len(p.src) for p in pairs)
    tgt_len = max(len(p.tgt) for p in pairs) + 1
    batch = {
        "src": torch.zeros(len(pairs), src_len, dtype=torch.long),
        "factors": torch.zeros(len(pairs), src_len, dtype=torch.long),
        "tgt_in": torch.zeros(len(pairs), tgt_len, dtype=torch.long),
        "labels": torch.zeros(len(pairs), tgt_len, dtype=torch.long),
    }
    for i, pair in enumerate(pairs):
        batch["src"][i, : len(pair.src)] = torch.tensor(pair.src, dtype=torch.long)
        batch["factors"][i, : len(pair.factors)] = torch.tensor(pair.factors, dtype=torch.long)
        batch["tgt_in"][i, : len(pair.tgt) + 1] = torch.tensor((bos_id,) + pair.tgt, dtype=torch.long)
        batch["labels"][i, : len(pair.tgt) + 1] = torch.tensor(pair.tgt + (eos_id,), dtype=torch.long)
    return batch


def sequence_loss(
    model: TermTransformer,
    batch: Dict[str, torch.Tensor],
    label_smoothing: float,
) -> Tuple[torch.Tensor, int]:
    """Summed label-smoothed cross-entropy over non-padding labels, and their count."""
    logits = model(batch["src"], batch["factors"], batch["tgt_in"])
    labels = batch["labels"]
    loss = F.cross_entropy(
        logits.reshape(-1, logits.size(-1)),
        labels.reshape(-1),
        ignore_index=0,
        label_smoothing=label_smoothing,
        reduction="sum",
    )
    return loss, int(labels.ne(0).sum())


@dataclass
class TrainState:
    model: TermTransformer
    optimizer: torch.optim.Optimizer
    epoch: int = 0
    best_dev_loss: float = math.inf
    bad_evaluations: int = 0
    best_epoch: int = 0
    history: List[Dict[str, float]] = field(default_factory=list)


def _fits(pair: EncodedPair, config: ModelConfig) -> bool:
    return len(pair.src) <= config.max_seq_len and len(pair.tgt) + 1 <= config.max_seq_len


def evaluate_loss(model: TermTransformer, pairs: Sequence[EncodedPair], config: ModelConfig,
                  batch_size: int, bos_id: int, eos_id: int) -> float:
    """Per-token label-smoothed loss with dropout disabled."""
    was_training = model.training
    model.eval()
    total, tokens = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(pairs), batch_size):
            loss, n = sequence_loss(model, collate(pairs[start:start + batch_size], bos_id, eos_id),
                                    config.label_smoothing)
            total += float(loss)
            tokens += n
    model.train(was_training)
    return total / max(tokens, 1)


def train(
    config: ModelConfig,
    corpus: Sequence[EncodedPair],
    dev: Sequence[EncodedPair],
    training: Optional[TrainingConfig] = None,
    vocab: Optional[Vocabulary] = None,
    checkpoint_path: Optional[PathLike] = None,
) -> TrainState:
    """
    Train a model with label-smoothed cross-entropy and dev-loss early stopping.

    The dev loss is evaluated after every epoch; improvements are kept (and
    written to checkpoint_path when given). Training stops once min_epochs have
    run and the dev loss has not improved for `patience` evaluations, or at
    max_epochs. The returned model holds the best parameters.

    Args:
        config: Architecture, with vocab_size set
        corpus: Subword-encoded training pairs
        dev: Subword-encoded development pairs
        training: Optimizer and stopping settings
        vocab: Vocabulary to store alongside checkpoints
        checkpoint_path: Where to write the best checkpoint

    Returns:
        TrainState: Final state holding the best model

    Raises:
        ValueError: If either corpus is empty
        TrainingDivergedError: If a batch loss is not finite
    """
    training = training or TrainingConfig()
    vocab = vocab or Vocabulary()
    if not corpus or not dev:
        raise ValueError("Training and development corpora must be non-empty")

    pairs = [p for p in corpus if _fits(p, config)]
    dev_pairs = [p for p in dev if _fits(p, config)]
    if len(pairs) < len(corpus) or len(dev_pairs) < len(dev):
        logger.warning(
            "Skipping %d training and %d dev pairs longer than max_seq_len=%d",
            len(corpus) - len(pairs), len(dev) - len(dev_pairs), config.max_seq_len,
        )
    if not pairs or not dev_pairs:
        raise ValueError("No pairs left after length filtering")

    torch.manual_seed(config.seed)
    model = TermTransformer(config)
    optimizer = torch.optim.Adam(model.parameters(), lr=training.learning_rate, betas=(0.9, 0.98), eps=1e-9)
    warmup = max(training.warmup_steps, 1)
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, lambda step: min(1.0, (step + 1) / warmup))
    generator = torch.Generator().manual_seed(config.seed)
    bos_id, eos_id = vocab.bos_id, vocab.eos_id

    state = TrainState(model=model, optimizer=optimizer)
    best_params = copy.deepcopy(model.state_dict())

    while state.epoch < training.max_epochs:
        state.epoch += 1
        model.train()
        order = torch.randperm(len(pairs), generator=generator).tolist()
        total, tokens = 0.0, 0

        for batch_index, start in enumerate(range(0, len(order), training.batch_size), 1):
            batch = collate([pairs[i] for i in order[start:start + training.batch_size]], bos_id, eos_id)
            loss_sum, n = sequence_loss(model, batch, config.label_smoothing)
            loss = loss_sum / max(n, 1)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(state.epoch, batch_index, float(loss))

            optimizer.zero_grad()
            loss.backward()
            if training.clip_gradient > 0:
                nn.utils.clip_grad_norm_(model.parameters(), training.clip_gradient)
            optimizer.step()
            scheduler.step()
            total += float(loss_sum)
            tokens += n
            logger.debug("epoch %d batch %d loss %.4f", state.epoch, batch_index, float(loss))

        train_loss = total / max(tokens, 1)
        dev_loss = evaluate_loss(model, dev_pairs, config, training.batch_size, bos_id, eos_id)
        state.history.append({"epoch": state.epoch, "train_loss": train_loss, "dev_loss": dev_loss})

        if dev_loss < state.best_dev_loss:
            state.best_dev_loss = dev_loss
            state.best_epoch = state.epoch
            state.bad_evaluations = 0
            best_params = copy.deepcopy(model.state_dict())
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, model, vocab)
        else:
            state.bad_evaluations += 1

        logger.info(
            "Epoch %d: train loss %.4f, dev loss %.4f (best %.4f @ %d)",
            state.epoch, train_loss, dev_loss, state.best_dev_loss, state.best_epoch,
        )
        if state.epoch >= training.min_epochs and state.bad_evaluations >= training.patience:
            logger.info("Stopping: no dev improvement for %d epochs", state.bad_evaluations)
            break

    model.load_state_dict(best_params)
    model.eval()
    return state


def save_checkpoint(path: PathLike, model: TermTransformer, vocab: Vocabulary) -> Path:
    """
    Write a versioned binary checkpoint.

    Layout (little-endian): magic, uint32 version, uint32 header length, JSON
    header with the ModelConfig and vocabulary, uint32 tensor count, then per
    tensor its name, rank, shape and row-major float32 data.
    """
    output_file = Path(path).expanduser()
    output_file.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps({"config": model.config.to_dict(), "vocab": vocab.tokens}, ensure_ascii=False).encode("utf-8")
    tensors = model.state_dict()

    with open(output_file, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        f.write(struct.pack("<I", len(tensors)))
        for name, tensor in tensors.items():
            encoded_name = name.encode("utf-8")
            data = tensor.detach().cpu().numpy().astype("<f4", copy=False)
            f.write(struct.pack("<I", len(encoded_name)))
            f.write(encoded_name)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(np.ascontiguousarray(data).tobytes())
    return output_file


def load_checkpoint(path: PathLike) -> Tuple[TermTransformer, Vocabulary]:
    """
    Read a checkpoint written by save_checkpoint.

    Returns:
        Tuple of (model in eval mode, vocabulary)
    """
    with open(Path(path).expanduser(), "rb") as f:
        payload = f.read()

    if payload[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"Not a termfactor checkpoint: {path}")
    offset = len(CHECKPOINT_MAGIC)
    version, header_len = struct.unpack_from("<II", payload, offset)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"Unsupported checkpoint version {version} in {path}")
    offset += 8
    header = json.loads(payload[offset:offset + header_len].decode("utf-8"))
    offset += header_len

    (count,) = struct.unpack_from("<I", payload, offset)
    offset += 4
    tensors: Dict[str, torch.Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", payload, offset)
        offset += 4
        name = payload[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<I", payload, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}I", payload, offset)
        offset += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(payload, dtype="<f4", count=size, offset=offset).reshape(shape)
        offset += 4 * size
        tensors[name] = torch.from_numpy(data.astype(np.float32))

    model = TermTransformer(ModelConfig.from_dict(header["config"]))
    model.load_state_dict(tensors)
    model.eval()
    return model, Vocabulary(tokens=header["vocab"])


class ModelScorer:
    """
    Adapter exposing a trained model to the beam search decoders.

    Sources are (subword ids, factors) tuples; prefixes exclude BOS.
    """

    def __init__(self, model: TermTransformer, vocab: Vocabulary):
        self.model = model.eval()
        self.vocab = vocab
        self.bos_id = vocab.bos_id
        self.eos_id = vocab.eos_id
        self.vocab_size = len(vocab)
        self.max_len = model.config.max_seq_len - 1
        self._blocked = [vocab.pad_id, vocab.bos_id]

    @torch.no_grad()
    def encode(self, source: Tuple[Sequence[int], Sequence[int]]) -> Tuple[torch.Tensor, torch.Tensor]:
        ids, factors = source
        src = torch.tensor([list(ids)], dtype=torch.long)
        return self.model.encode(src, torch.tensor([list(factors)], dtype=torch.long))

    @torch.no_grad()
    def log_probs(self, state: Tuple[torch.Tensor, torch.Tensor], prefixes: Sequence[Sequence[int]]) -> np.ndarray:
        memory, padding = state
        n = len(prefixes)
        tgt_in = torch.tensor([[self.bos_id] + list(p) for p in prefixes], dtype=torch.long)
        logits = self.model.decode(memory.expand(n, -1, -1), padding.expand(n, -1), tgt_in)[:, -1]
        scores = torch.log_softmax(logits.double(), dim=-1)
        scores[:, self._blocked] = -math.inf
        return scores.numpy()
