"""Rewrite policy: word-level vocabulary, prompt rendering, a small decoder-only
transformer, exact sequence log-probabilities, sampling and checkpoints."""

from __future__ import annotations

import copy
import json
import math
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import tokenize_text

BOS, EOS, SEP, PAD, UNK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ["<bos>", "<eos>", "<sep>", "<pad>", "<unk>"]
MIN_VOCAB_SIZE = 16

PROMPT_TEMPLATE = "Instruction: output the rewrite of input query\n\nQuery: {query}\n\nOutput:"

CKPT_MAGIC = b"RAFECKPT"
CKPT_VERSION = 1

GREEDY_TEMPERATURE = 1e-5


# -- vocabulary --------------------------------------------------------------


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[: len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the reserved special tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.tokens = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, text: str) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokenize_text(text)]

    def decode(self, ids: Iterable[int], skip_special: bool = True) -> str:
        out = []
        for i in ids:
            i = int(i)
            if skip_special and i < len(SPECIAL_TOKENS):
                continue
            out.append(self.tokens[i])
        return " ".join(out)


def build_vocabulary(texts: Iterable[str], max_size: int = 4096) -> Vocabulary:
    """Most frequent corpus tokens (ties lexicographic) after the five specials.

    ``max_size`` counts the specials.
    """
    if max_size < MIN_VOCAB_SIZE:
        raise ValueError(f"max_size must be >= {MIN_VOCAB_SIZE}, got {max_size}")
    counts: Counter[str] = Counter()
    n_texts = 0
    for t in texts:
        counts.update(tokenize_text(t))
        n_texts += 1
    if n_texts == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [t for t, _ in ranked if t not in SPECIAL_TOKENS][: max_size - len(SPECIAL_TOKENS)]
    return Vocabulary(SPECIAL_TOKENS + keep)


def render_prompt(query: str) -> str:
    return PROMPT_TEMPLATE.format(query=query)


def format_prompt(vocab: Vocabulary, query: str) -> list[int]:
    """BOS + rendered prompt tokens + SEP."""
    return [BOS] + vocab.encode(render_prompt(query)) + [SEP]


def encode_rewrite(vocab: Vocabulary, rewrite: str) -> list[int]:
    ids = vocab.encode(rewrite)
    if not ids:
        raise ValueError(f"rewrite {rewrite!r} is empty after tokenization")
    return ids + [EOS]


# -- model -------------------------------------------------------------------


@dataclass
class PolicyConfig:
    vocab_size: int
    d_model: int = 48
    n_layers: int = 2
    n_heads: int = 2
    context_length: int = 64
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model)
        self.proj = nn.Linear(cfg.d_model, cfg.d_model)

    def forward(self, x):
        bsz, t, d = x.shape
        q, k, v = self.qkv(x).split(d, dim=2)
        hd = d // self.n_heads
        q = q.view(bsz, t, self.n_heads, hd).transpose(1, 2)
        k = k.view(bsz, t, self.n_heads, hd).transpose(1, 2)
        v = v.view(bsz, t, self.n_heads, hd).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        mask = torch.ones(t, t, dtype=torch.bool, device=x.device).tril()
        att = att.masked_fill(~mask, float("-inf")).softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(bsz, t, d)
        return self.proj(y)


class Block(nn.Module):
    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = CausalSelfAttention(cfg)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.mlp_ratio * cfg.d_model),
            nn.GELU(),
            nn.Linear(cfg.mlp_ratio * cfg.d_model, cfg.d_model),
        )

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class RewritePolicy(nn.Module):
    """Decoder-only transformer with learned positions and an untied output head.

    Inputs are right-padded; causal masking means padding never influences
    the real positions before it, so no attention mask is needed.
    """

    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.context_length, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size)
        self.apply(self._init)

    @staticmethod
    def _init(m):
        if isinstance(m, (nn.Linear, nn.Embedding)):
            nn.init.normal_(m.weight, std=0.02)
        if isinstance(m, nn.Linear) and m.bias is not None:
            nn.init.zeros_(m.bias)

    def hidden(self, ids: torch.Tensor) -> torch.Tensor:
        t = ids.shape[1]
        if t > self.cfg.context_length:
            raise ValueError(f"sequence length {t} exceeds context length {self.cfg.context_length}")
        pos = torch.arange(t, device=ids.device)
        x = self.tok_emb(ids) + self.pos_emb(pos)[None]
        for blk in self.blocks:
            x = blk(x)
        return self.ln_f(x)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return self.head(self.hidden(ids))


class ValueModel(nn.Module):
    """Value network: a copy of the policy trunk plus a scalar head per position."""

    def __init__(self, policy: RewritePolicy):
        super().__init__()
        self.trunk = copy.deepcopy(policy)
        del self.trunk.head
        self.value_head = nn.Linear(policy.cfg.d_model, 1)
        nn.init.zeros_(self.value_head.weight)
        nn.init.zeros_(self.value_head.bias)
        self.to(next(policy.parameters()).dtype)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return self.value_head(self.trunk.hidden(ids)).squeeze(-1)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def model_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


# -- batching and log-probabilities ------------------------------------------


@dataclass
class EncodedBatch:
    """Right-padded prompt+rewrite sequences with a mask over predicted rewrite tokens.

    ``target_mask[b, t]`` is true when ``ids[b, t + 1]`` is a rewrite token (or
    the closing EOS) of row ``b``.
    """

    ids: torch.Tensor
    target_mask: torch.Tensor
    prompt_lengths: list[int]
    rewrite_lengths: list[int]


def encode_batch(vocab: Vocabulary, pairs: Sequence[tuple[str, str | Sequence[int]]],
                 context_length: int | None = None) -> EncodedBatch:
    """Encode (query, rewrite) pairs; a rewrite may be text or explicit token ids
    (ids must already end with EOS)."""
    seqs, plens, rlens = [], [], []
    for query, rewrite in pairs:
        prompt = format_prompt(vocab, query)
        rids = encode_rewrite(vocab, rewrite) if isinstance(rewrite, str) else list(rewrite)
        if not rids:
            raise ValueError(f"empty rewrite for query {query!r}")
        seq = prompt + rids
        if context_length is not None and len(seq) > context_length:
            raise ValueError(f"sequence of {len(seq)} tokens exceeds context length {context_length}")
        seqs.append(seq)
        plens.append(len(prompt))
        rlens.append(len(rids))
    width = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), width), PAD, dtype=torch.long)
    mask = torch.zeros((len(seqs), width - 1), dtype=torch.bool)
    for b, s in enumerate(seqs):
        ids[b, : len(s)] = torch.tensor(s)
        mask[b, plens[b] - 1 : len(s) - 1] = True
    return EncodedBatch(ids, mask, plens, rlens)


def token_logprobs(model: RewritePolicy, batch: EncodedBatch) -> torch.Tensor:
    """Per-position log-prob of the next token, zeroed outside the target mask. Shape [B, T-1]."""
    logits = model(batch.ids[:, :-1])
    logp = F.log_softmax(logits, dim=-1)
    tgt = batch.ids[:, 1:].unsqueeze(-1)
    lp = logp.gather(-1, tgt).squeeze(-1)
    return lp.masked_fill(~batch.target_mask, 0.0)


def sequence_logprobs(model: RewritePolicy, batch: EncodedBatch) -> torch.Tensor:
    return token_logprobs(model, batch).sum(dim=1)


def rewrite_token_logprobs(model: RewritePolicy, batch: EncodedBatch) -> list[torch.Tensor]:
    """Per-row tensors of rewrite-token log-probs (EOS included)."""
    lp = token_logprobs(model, batch)
    return [lp[b][batch.target_mask[b]] for b in range(lp.shape[0])]


def log_prob(model: RewritePolicy, vocab: Vocabulary, query: str, rewrite: str) -> tuple[float, list[float]]:
    """Exact log M(rewrite | query), summed over rewrite tokens and the closing EOS."""
    batch = encode_batch(vocab, [(query, rewrite)], model.cfg.context_length)
    with torch.no_grad():
        per_tok = rewrite_token_logprobs(model, batch)[0]
    vals = [float(x) for x in per_tok]
    return float(per_tok.sum()), vals


# -- sampling ----------------------------------------------------------------


@dataclass
class GenerationConfig:
    temperature: float = 0.8
    max_new_tokens: int = 24
    num_samples: int = 2
    seed: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.max_new_tokens < 1 or self.num_samples < 1:
            raise ValueError("max_new_tokens and num_samples must be >= 1")


@torch.no_grad()
def generate_ids(model: RewritePolicy, prompts: Sequence[Sequence[int]], temperature: float,
                 max_new_tokens: int, generator: torch.Generator | None = None) -> list[list[int]]:
    """Sample continuations for a batch of prompts. Each result ends with EOS unless
    truncated by ``max_new_tokens`` or the context length."""
    ctx = model.cfg.context_length
    n = len(prompts)
    lengths = [len(p) for p in prompts]
    width = min(ctx, max(lengths) + max_new_tokens)
    buf = torch.full((n, width), PAD, dtype=torch.long)
    for i, p in enumerate(prompts):
        buf[i, : len(p)] = torch.tensor(list(p))
    outs: list[list[int]] = [[] for _ in range(n)]
    active = [lengths[i] < width for i in range(n)]
    greedy = temperature <= GREEDY_TEMPERATURE
    for _ in range(max_new_tokens):
        rows = [i for i in range(n) if active[i]]
        if not rows:
            break
        cur = max(lengths[i] for i in rows)
        logits = model(buf[rows, :cur]).double()
        last = logits[torch.arange(len(rows)), torch.tensor([lengths[i] - 1 for i in rows])]
        if greedy:
            nxt = last.argmax(dim=-1)
        else:
            probs = F.softmax(last / temperature, dim=-1)
            nxt = torch.multinomial(probs, 1, generator=generator).squeeze(-1)
        for j, i in enumerate(rows):
            tok = int(nxt[j])
            outs[i].append(tok)
            buf[i, lengths[i]] = tok
            lengths[i] += 1
            if tok == EOS or lengths[i] >= width:
                active[i] = False
    return outs


def sample_rewrites(model: RewritePolicy, vocab: Vocabulary, query: str, gen: GenerationConfig,
                    generator: torch.Generator | None = None) -> list[str]:
    """Distinct nonempty rewrites; duplicates trigger up to three extra draws."""
    if generator is None:
        generator = torch.Generator().manual_seed(gen.seed)
    prompt = format_prompt(vocab, query)
    seen: list[str] = []
    for ids in generate_ids(model, [prompt] * gen.num_samples, gen.temperature, gen.max_new_tokens, generator):
        text = vocab.decode(ids)
        if text and text not in seen:
            seen.append(text)
    extra = 0
    while len(seen) < gen.num_samples and extra < 3:
        extra += 1
        ids = generate_ids(model, [prompt], gen.temperature, gen.max_new_tokens, generator)[0]
        text = vocab.decode(ids)
        if text and text not in seen:
            seen.append(text)
    return seen[: gen.num_samples]


def greedy_rewrite(model: RewritePolicy, vocab: Vocabulary, query: str, max_new_tokens: int = 24) -> str:
    ids = generate_ids(model, [format_prompt(vocab, query)], GREEDY_TEMPERATURE, max_new_tokens)[0]
    return vocab.decode(ids)


def greedy_rewrites(model: RewritePolicy, vocab: Vocabulary, queries: Sequence[str],
                    max_new_tokens: int = 24, batch_size: int = 64) -> list[str]:
    out = []
    for s in range(0, len(queries), batch_size):
        chunk = [format_prompt(vocab, q) for q in queries[s : s + batch_size]]
        out.extend(vocab.decode(ids) for ids in generate_ids(model, chunk, GREEDY_TEMPERATURE, max_new_tokens))
    return out


# -- gradients ---------------------------------------------------------------


def grad(model: nn.Module, loss_fn: Callable[[nn.Module], torch.Tensor]) -> dict[str, torch.Tensor]:
    """Reverse-mode gradient of a scalar loss w.r.t. every trainable parameter."""
    params = dict(model.named_parameters())
    loss = loss_fn(model)
    if loss.dim() != 0:
        raise ValueError("loss must be a scalar")
    if not torch.isfinite(loss):
        raise ValueError(f"non-finite loss {loss.item()}")
    names = [n for n, p in params.items() if p.requires_grad]
    if not loss.requires_grad:
        return {n: torch.zeros_like(params[n]) for n in names}
    gs =torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    return {n: (torch.zeros_like(params[n]) if g is None else g) for n, g in zip(names, gs)}


# -- checkpoints -------------------------------------------------------------


@dataclass
class PolicyCheckpoint:
    model: RewritePolicy
    vocab: Vocabulary
    metadata: dict = field(default_factory=dict)
    seed: int = 0


def serialize_checkpoint(ckpt: PolicyCheckpoint) -> bytes:
    state = ckpt.model.state_dict()
    names = list(state)
    header = {
        "config": asdict(ckpt.model.cfg),
        "vocabulary": ckpt.vocab.tokens,
        "metadata": ckpt.metadata,
        "seed": ckpt.seed,
        "tensors": [{"name": n, "shape": list(state[n].shape)} for n in names],
    }
    hbytes = json.dumps(header, ensure_ascii=False, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [CKPT_MAGIC, bytes([CKPT_VERSION]), struct.pack("<I", len(hbytes)), hbytes]
    for n in names:
        chunks.append(state[n].detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes())
    return b"".join(chunks)


def deserialize_checkpoint(blob: bytes) -> PolicyCheckpoint:
    if blob[:8] != CKPT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    if blob[8] != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob[8]}")
    (hlen,) = struct.unpack_from("<I", blob, 9)
    header = json.loads(blob[13 : 13 + hlen].decode("utf-8"))
    model = RewritePolicy(PolicyConfig(**header["config"]))
    off = 13 + hlen
    state = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(t["shape"])
        state[t["name"]] = torch.from_numpy(arr.astype(np.float32))
        off += 4 * n
    model.load_state_dict(state)
    return PolicyCheckpoint(model, Vocabulary(header["vocabulary"]), header["metadata"], header["seed"])


def save_checkpoint(ckpt: PolicyCheckpoint, path: str | Path) -> None:
    Path(path).write_bytes(serialize_checkpoint(ckpt))


def load_checkpoint(path: str | Path) -> PolicyCheckpoint:
    return deserialize_checkpoint(Path(path).read_bytes())


def new_policy(vocab: Vocabulary, seed: int = 0, dtype: torch.dtype = torch.float32, **arch) -> RewritePolicy:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = RewritePolicy(PolicyConfig(vocab_size=len(vocab), **arch))
    return model.to(dtype)
