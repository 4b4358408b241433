"""Generator-model contract and a small encoder-decoder reference backend.

Both the Simplifier and the Rewriter are :class:`GeneratorModel` instances;
they differ only in which direction their training pairs point.

Inputs are ``h_1 <sep> h_2 <sep> ... <sep> source``, truncated from the left
to ``max_input_tokens``. Confidence of a generation is the sum of the
log-probabilities of every emitted token, including the closing ``<eos>``
when decoding stops on it.
"""
from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .core import ContractViolation
from .metrics import tokenize

CKPT_FORMAT = "genmodel-ckpt/1"

PAD, UNK, BOS, EOS, SEP = "<pad>", "<unk>", "<bos>", "<eos>", "<sep>"
SPECIALS = (PAD, UNK, BOS, EOS, SEP)
PAD_ID, UNK_ID, BOS_ID, EOS_ID, SEP_ID = range(5)


class CheckpointError(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


class Vocab:
    def __init__(self, words: Iterable[str] = ()):
        self.itos = list(SPECIALS)
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        for w in words:
            if w not in self.stoi:
                self.stoi[w] = len(self.itos)
                self.itos.append(w)

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocab":
        words = set()
        for t in texts:
            words.update(tokenize(t))
        return cls(sorted(words))

    def __len__(self):
        return len(self.itos)

    def encode(self, text: str) -> list[int]:
        return [self.stoi.get(w, UNK_ID) for w in tokenize(text)]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.itos[i] for i in ids)


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    enc_layers: int = 2
    dec_layers: int = 2
    dropout: float = 0.1
    max_input_tokens: int = 64
    max_target_tokens: int = 32
    seed: int = 0


class Seq2Seq(nn.Module):
    """Bidirectional GRU encoder, GRU decoder with bilinear attention.

    The output projection is tied to the input embedding, which lets the
    decoder copy history tokens through attention.
    """

    def __init__(self, vocab_size: int, cfg: ModelConfig):
        super().__init__()
        if cfg.dim % 2:
            raise ValueError("dim must be even (bidirectional encoder)")
        self.cfg = cfg
        d = cfg.dim
        self.embed = nn.Embedding(vocab_size, d, padding_idx=PAD_ID)
        self.drop = nn.Dropout(cfg.dropout)
        self.encoder = nn.GRU(d, d // 2, num_layers=cfg.enc_layers, bidirectional=True,
                              batch_first=True, dropout=cfg.dropout if cfg.enc_layers > 1 else 0.0)
        self.bridge = nn.Linear(d, d * cfg.dec_layers)
        self.decoder = nn.GRU(d, d, num_layers=cfg.dec_layers, batch_first=True,
                              dropout=cfg.dropout if cfg.dec_layers > 1 else 0.0)
        self.attn = nn.Linear(d, d, bias=False)
        self.combine = nn.Linear(2 * d, d)
        self.out_bias = nn.Parameter(torch.zeros(vocab_size))

    def encode(self, src: torch.Tensor):
        pad_mask = src.eq(PAD_ID)
        lengths = (~pad_mask).sum(1).clamp_min(1).cpu()
        x = self.drop(self.embed(src))
        packed = nn.utils.rnn.pack_padded_sequence(x, lengths, batch_first=True, enforce_sorted=False)
        out, _ = self.encoder(packed)
        mem, _ = nn.utils.rnn.pad_packed_sequence(out, batch_first=True, total_length=src.shape[1])
        return self.drop(mem), pad_mask

    def init_hidden(self, mem, pad_mask):
        h = torch.tanh(self.bridge(pool(mem, pad_mask)))
        return h.view(h.shape[0], self.cfg.dec_layers, self.cfg.dim).transpose(0, 1).contiguous()

    def _readout(self, h, mem, pad_mask):
        scores = self.attn(h) @ mem.transpose(1, 2)
        scores = scores.masked_fill(pad_mask.unsqueeze(1), float("-inf"))
        ctx = torch.softmax(scores, dim=-1) @ mem
        out = self.drop(torch.tanh(self.combine(torch.cat([h, ctx], dim=-1))))
        return out @ self.embed.weight.T + self.out_bias

    def decode(self, mem, pad_mask, tgt_in: torch.Tensor, hidden=None):
        """Logits for every position of ``tgt_in``; returns (logits, hidden)."""
        if hidden is None:
            hidden = self.init_hidden(mem, pad_mask)
        h, hidden = self.decoder(self.drop(self.embed(tgt_in)), hidden)
        return self._readout(h, mem, pad_mask), hidden


def pool(mem: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
    """Mean over non-pad encoder states."""
    keep = (~pad_mask).unsqueeze(-1).to(mem.dtype)
    return (mem * keep).sum(1) / keep.sum(1).clamp_min(1.0)


@dataclass
class GenerationResult:
    text: str
    confidence: float
    token_count: int


class Origin(str, enum.Enum):
    GOLD = "gold"
    PSEUDO = "pseudo"


@dataclass
class TrainBatch:
    examples: list  # (history, source, target) triples
    weight: float = 1.0
    origin: Origin = Origin.GOLD

    def __post_init__(self):
        if not self.weight > 0:
            raise ValueError(f"batch weight must be > 0, got {self.weight}")


@dataclass
class GeneratorModel:
    """A trainable seq2seq model plus its vocabulary and optimizer."""

    vocab: Vocab
    config: ModelConfig = field(default_factory=ModelConfig)
    learning_rate: float = 5e-5
    name: str = "model"
    net: Optional[Seq2Seq] = None
    optimizer: Optional[torch.optim.Optimizer] = None
    dtype: torch.dtype = torch.float32

    def __post_init__(self):
        if self.net is None:
            reinitialize(self, self.config.seed)

    # -- input encoding
    def source_ids(self, history: Sequence[str], source: str) -> list[int]:
        ids = []
        for h in history:
            ids.extend(self.vocab.encode(h))
            ids.append(SEP_ID)
        ids.extend(self.vocab.encode(source))
        return ids[-self.config.max_input_tokens:]

    def target_ids(self, target: str) -> list[int]:
        return self.vocab.encode(target)[: self.config.max_target_tokens]

    def _src_tensor(self, items):
        rows = [self.source_ids(h, s) or [UNK_ID] for h, s in items]
        width = max(len(r) for r in rows)
        return torch.tensor([r + [PAD_ID] * (width - len(r)) for r in rows], dtype=torch.long)

    def _tgt_tensors(self, targets):
        rows = [self.target_ids(t) for t in targets]
        width = max(len(r) for r in rows) + 1
        tin = [[BOS_ID] + r + [PAD_ID] * (width - 1 - len(r)) for r in rows]
        tout = [r + [EOS_ID] + [PAD_ID] * (width - 1 - len(r)) for r in rows]
        return torch.tensor(tin), torch.tensor(tout)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.net.state_dict().items():
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def _require_ready(model: GeneratorModel):
    if model is None or model.net is None:
        raise ContractViolation("model is not initialized")


def reinitialize(model: GeneratorModel, seed: int) -> GeneratorModel:
    """Fresh parameters drawn deterministically from ``seed``; resets the optimizer."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model.net = Seq2Seq(len(model.vocab), model.config).to(model.dtype)
    model.optimizer = torch.optim.Adam(model.net.parameters(), lr=model.learning_rate)
    return model


def sequence_nll(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Per-example summed token NLL; ``targets`` uses PAD_ID for padding."""
    logp = F.log_softmax(logits, dim=-1)
    picked = logp.gather(-1, targets.clamp_min(0).unsqueeze(-1)).squeeze(-1)
    return -(picked * targets.ne(PAD_ID).to(picked.dtype)).sum(-1)


def forward_batch(model: GeneratorModel, examples, stochastic: bool = True):
    """Teacher-forced pass. Returns (per-example NLL, pooled input embeddings)."""
    _require_ready(model)
    if not examples:
        raise ContractViolation("empty batch")
    model.net.train(stochastic)
    src = model._src_tensor([(h, s) for h, s, _ in examples])
    tin, tout = model._tgt_tensors([t for _, _, t in examples])
    mem, pad_mask = model.net.encode(src)
    logits, _ = model.net.decode(mem, pad_mask, tin)
    return sequence_nll(logits, tout), pool(mem, pad_mask)


def generation_loss(model: GeneratorModel, batch: TrainBatch, stochastic: bool = True) -> torch.Tensor:
    """Mean over examples of the summed target-token negative log-likelihood."""
    nll, _ = forward_batch(model, batch.examples, stochastic)
    return nll.mean()


def encode_batch(model: GeneratorModel, items: Sequence[tuple[Sequence[str], str]],
                 stochastic: bool) -> torch.Tensor:
    """Mean-pooled encoder states, one row per (history, source)."""
    _require_ready(model)
    model.net.train(stochastic)
    mem, pad_mask = model.net.encode(model._src_tensor(items))
    return pool(mem, pad_mask)


def encode(model: GeneratorModel, history: Sequence[str], source: str, stochastic: bool) -> torch.Tensor:
    with torch.set_grad_enabled(stochastic and torch.is_grad_enabled()):
        return encode_batch(model, [(history, source)], stochastic)[0]


@torch.no_grad()
def generate_batch(model: GeneratorModel, items: Sequence[tuple[Sequence[str], str]],
                   max_len: Optional[int] = None, chunk: int = 256) -> list[GenerationResult]:
    """Greedy decoding. The first step may not emit <eos>; specials are never emitted."""
    _require_ready(model)
    max_len = model.config.max_target_tokens if max_len is None else max_len
    if max_len < 1:
        raise ContractViolation("max_len must be >= 1")
    max_len = min(max_len, model.config.max_target_tokens)
    for _, s in items:
        if not s or not s.strip():
            raise ContractViolation("empty source")
    model.net.eval()
    out: list[GenerationResult] = []
    banned = torch.tensor([PAD_ID, UNK_ID, BOS_ID, SEP_ID])
    for start in range(0, len(items), chunk):
        part = items[start:start + chunk]
        mem, pad_mask = model.net.encode(model._src_tensor(part))
        b = len(part)
        tok = torch.full((b, 1), BOS_ID, dtype=torch.long)
        hidden = None
        steps = []
        score = torch.zeros(b, dtype=torch.float64)
        done = torch.zeros(b, dtype=torch.bool)
        length = torch.zeros(b, dtype=torch.long)
        for step in range(max_len):
            logits, hidden = model.net.decode(mem, pad_mask, tok, hidden)
            logp = F.log_softmax(logits[:, -1].double(), dim=-1)
            masked = logp.clone()
            masked[:, banned] = float("-inf")
            if step == 0:
                masked[:, EOS_ID] = float("-inf")
            nxt = masked.argmax(-1)
            gain = logp.gather(1, nxt.unsqueeze(1)).squeeze(1)
            score = torch.where(done, score, score + gain)
            length = length + ((~done) & nxt.ne(EOS_ID)).long()
            nxt = torch.where(done, torch.full_like(nxt, EOS_ID), nxt)
            steps.append(nxt)
            tok = nxt.unsqueeze(1)
            done = done | nxt.eq(EOS_ID)
            if done.all():
                break
        seq = torch.stack(steps, 1)
        for i in range(b):
            ids = seq[i, :int(length[i])].tolist()
            out.append(GenerationResult(model.vocab.decode(ids), float(score[i]), len(ids)))
    return out


def generate(model: GeneratorModel, history: Sequence[str], source: str,
             max_len: Optional[int] = None) -> GenerationResult:
    return generate_batch(model, [(history, source)], max_len)[0]


@torch.no_grad()
def sequence_logprob(model: GeneratorModel, history: Sequence[str], source: str,
                     target: str, with_eos: bool = True) -> float:
    """Teacher-forced log-probability of ``target`` (deterministic, no dropout)."""
    model.net.eval()
    src = model._src_tensor([(history, source)])
    ids = model.target_ids(target)
    tin = torch.tensor([[BOS_ID] + ids])
    tout = torch.tensor([ids + [EOS_ID]])
    mem, pad_mask = model.net.encode(src)
    logits, _ = model.net.decode(mem, pad_mask, tin)
    logp = F.log_softmax(logits.double(), dim=-1)
    picked = logp.gather(-1, tout.unsqueeze(-1)).squeeze(-1)[0]
    if not with_eos:
        picked = picked[:-1]
    return float(picked.sum())


def train_step(model: GeneratorModel, loss: torch.Tensor, context: str = "") -> float:
    """One optimizer step on ``loss``; returns its value."""
    _require_ready(model)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NonFiniteLoss(f"{model.name}: non-finite loss {value} on batch {context or '?'}")
    model.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    model.optimizer.step()
    return value


def set_learning_rate(model: GeneratorModel, lr: float) -> None:
    model.learning_rate = lr
    for group in model.optimizer.param_groups:
        group["lr"] = lr


# -------------------------------------------------------------- checkpoints

def save_checkpoint(model: GeneratorModel, path) -> None:
    _require_ready(model)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CKPT_FORMAT,
        "name": model.name,
        "vocab": list(model.vocab.itos),
        "config": asdict(model.config),
        "state_dict": model.net.state_dict(),
    }
    torch.save(payload, path)


def load_checkpoint(path) -> GeneratorModel:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:  # torch raises several unrelated types here
        raise CheckpointError(f"{path}: unreadable checkpoint ({e})") from None
    if not isinstance(payload, dict) or payload.get("format") != CKPT_FORMAT:
        got = payload.get("format") if isinstance(payload, dict) else None
        raise CheckpointError(f"{path}: expected format {CKPT_FORMAT!r}, found {got!r}")
    vocab = Vocab()
    vocab.itos = list(payload["vocab"])
    vocab.stoi = {w: i for i, w in enumerate(vocab.itos)}
    model = GeneratorModel(vocab, ModelConfig(**payload["config"]), name=payload.get("name", "model"))
    model.net.load_state_dict(payload["state_dict"])
    return model
