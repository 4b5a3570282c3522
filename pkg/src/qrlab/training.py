"""SFT, DPO, KTO and PPO for the rewrite policy.

Loss functions come in two layers: tensor-level functions on log-probs, which
the oracle tests hit directly, and model-level wrappers that encode batches.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import SearchIndex
from .policy import (
    EOS,
    SPECIAL_TOKENS,
    EncodedBatch,
    PolicyCheckpoint,
    RewritePolicy,
    ValueModel,
    Vocabulary,
    encode_batch,
    format_prompt,
    generate_ids,
    new_policy,
    rewrite_token_logprobs,
    sequence_logprobs,
)
from .reranker import BAD, GOOD, FeedbackDataset, PreferencePair, RewriteRecord, Scorer, score_rewrite

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    sft_epochs: int = 2
    sft_lr: float = 5e-5
    sft_batch_size: int = 1
    offline_epochs: int = 1
    offline_lr: float = 5e-6
    offline_batch_size: int = 8
    beta: float = 0.1
    ppo_steps: int = 1000
    ppo_batch: int = 32
    ppo_epochs: int = 4
    ppo_lr: float = 1e-5
    clip_eps: float | None = 0.2
    beta_kl: float = 0.2
    gae_lambda: float = 0.95
    whiten_advantages: bool = True
    rollout_temperature: float = 1.0
    max_new_tokens: int = 24
    retrieval_k: int = 3
    lambda_good: float = 1.0
    lambda_bad: float = 1.0
    auto_lambda: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("sft_epochs", "sft_lr", "sft_batch_size", "offline_epochs", "offline_lr",
                     "offline_batch_size", "beta", "ppo_steps", "ppo_batch", "ppo_epochs", "ppo_lr",
                     "lambda_good", "lambda_bad", "max_new_tokens", "retrieval_k", "rollout_temperature"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.clip_eps is not None and not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.beta_kl < 0:
            raise ValueError("beta_kl must be nonnegative")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("gae_lambda must lie in [0, 1]")


def _adam(params, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), weight_decay=0.0)


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + size] for i in range(0, n, size)]


class RunLog:
    """JSON Lines run log; kept in memory and optionally mirrored to disk."""

    def __init__(self, path: str | Path | None = None):
        self.rows: list[dict] = []
        self.path = Path(path) if path else None
        self._t0 = time.perf_counter()
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("", encoding="utf-8")

    def write(self, **row) -> None:
        row["wall_clock"] = round(time.perf_counter() - self._t0, 4)
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")


# -- base model --------------------------------------------------------------


@dataclass
class PretrainConfig:
    """Paraphrase pre-training that stands in for a pretrained language model.

    Each example is a random word span copied to the output, with thesaurus
    entries swapped in at ``swap_prob``. The base model thus knows how to copy
    and which words are interchangeable, but not which replacements a rewrite
    should make; SFT has to teach that part.
    """

    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    swap_prob: float = 0.5
    thesaurus_rate: float = 0.4
    min_span: int = 2
    max_span: int = 9
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if not 0.0 <= self.swap_prob <= 1.0 or not 0.0 <= self.thesaurus_rate <= 1.0:
            raise ValueError("swap_prob and thesaurus_rate must lie in [0, 1]")
        if not 1 <= self.min_span <= self.max_span:
            raise ValueError("need 1 <= min_span <= max_span")


def paraphrase_example(rng: np.random.Generator, words: Sequence[str], thesaurus: dict[str, str],
                       config: PretrainConfig) -> tuple[str, str]:
    keys = sorted(thesaurus)
    n = int(rng.integers(config.min_span, config.max_span + 1))
    src = []
    for _ in range(n):
        pool = keys if keys and rng.random() < config.thesaurus_rate else words
        src.append(pool[int(rng.integers(len(pool)))])
    out = [thesaurus[t] if t in thesaurus and rng.random() < config.swap_prob else t for t in src]
    return " ".join(src), " ".join(out)


def pretrain_base(vocab: Vocabulary, thesaurus: dict[str, str], config: PretrainConfig,
                  log_path: str | Path | None = None, **arch) -> PolicyCheckpoint:
    words = [t for t in vocab.tokens if t not in SPECIAL_TOKENS]
    if not words:
        raise ValueError("vocabulary has no ordinary tokens")
    unknown = sorted(t for kv in thesaurus.items() for t in kv if t not in vocab.stoi)
    if unknown:
        raise ValueError(f"thesaurus words missing from the vocabulary: {unknown[:5]}")
    model = new_policy(vocab, seed=config.seed, **arch)
    model.train()
    opt = _adam(model.parameters(), config.lr)
    rng = np.random.default_rng(config.seed)
    runlog = RunLog(log_path)
    for step in range(1, config.steps + 1):
        batch = [paraphrase_example(rng, words, thesaurus, config) for _ in range(config.batch_size)]
        loss = sft_loss(model, vocab, batch)
        opt.zero_grad()
        loss.backward()
        opt.step()
        runlog.write(stage="pretrain", step=step, loss=loss.item())
    meta = {"stage": "pretrain", "pretrain_steps": config.steps, "thesaurus_size": len(thesaurus)}
    return PolicyCheckpoint(model, vocab, meta, config.seed)


# -- SFT ---------------------------------------------------------------------


def sft_loss(model: RewritePolicy, vocab: Vocabulary, batch: Sequence[tuple[str, str]]) -> torch.Tensor:
    """Mean over the batch of the per-token negative log-likelihood of each rewrite."""
    if not batch:
        raise ValueError("empty SFT batch")
    enc = encode_batch(vocab, batch, model.cfg.context_length)
    lengths = torch.tensor(enc.rewrite_lengths, dtype=next(model.parameters()).dtype)
    return (-sequence_logprobs(model, enc) / lengths).mean()


def run_sft(config: TrainConfig, pairs: Sequence[tuple[str, str]], ckpt: PolicyCheckpoint,
            log_path: str | Path | None = None) -> tuple[PolicyCheckpoint, list[float]]:
    if not pairs:
        raise ValueError("SFT set is empty")
    model = copy.deepcopy(ckpt.model)
    model.train()
    opt = _adam(model.parameters(), config.sft_lr)
    rng = np.random.default_rng(config.seed)
    runlog = RunLog(log_path)
    losses = []
    step = 0
    for epoch in range(config.sft_epochs):
        for idx in _batches(len(pairs), config.sft_batch_size, rng):
            loss = sft_loss(model, ckpt.vocab, [pairs[i] for i in idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            losses.append(loss.item())
            runlog.write(stage="sft", step=step, epoch=epoch, loss=losses[-1])
    meta = dict(ckpt.metadata)
    meta.update(stage="sft", sft_steps=step, sft_loss_normalization="per_token_mean",
                sft_epochs=config.sft_epochs, sft_lr=config.sft_lr, train_seed=config.seed)
    return PolicyCheckpoint(model, ckpt.vocab, meta, config.seed), losses


# -- DPO ---------------------------------------------------------------------


def dpo_loss_from_logps(pol_good: torch.Tensor, pol_bad: torch.Tensor, ref_good: torch.Tensor,
                        ref_bad: torch.Tensor, beta: float) -> torch.Tensor:
    margin = beta * (pol_good - ref_good) - beta * (pol_bad - ref_bad)
    return -F.logsigmoid(margin).mean()


def _pair_logps(model: RewritePolicy, vocab: Vocabulary, pairs: Sequence[PreferencePair]):
    enc = encode_batch(vocab, [(p.original_query, p.good_rewrite) for p in pairs]
                       + [(p.original_query, p.bad_rewrite) for p in pairs], model.cfg.context_length)
    lp = sequence_logprobs(model, enc)
    return lp[: len(pairs)], lp[len(pairs):]


def dpo_loss(policy: RewritePolicy, ref: RewritePolicy, vocab: Vocabulary,
             pairs: Sequence[PreferencePair], beta: float) -> torch.Tensor:
    pg, pb = _pair_logps(policy, vocab, pairs)
    with torch.no_grad():
        rg, rb = _pair_logps(ref, vocab, pairs)
    return dpo_loss_from_logps(pg, pb, rg.to(pg.dtype), rb.to(pb.dtype), beta)


# -- KTO ---------------------------------------------------------------------


def compute_lambda_weights(n_good: int, n_bad: int) -> tuple[float, float]:
    """Class weights with lambda_good*n_good / (lambda_bad*n_bad) == 1.

    The majority class keeps weight 1; balanced data gives (1, 1).
    """
    if n_good < 1 or n_bad < 1:
        raise ValueError(f"KTO needs both classes (n_good={n_good}, n_bad={n_bad})")
    if n_good == n_bad:
        return 1.0, 1.0
    lg, lb = (1.0, n_good / n_bad) if n_good > n_bad else (n_bad / n_good, 1.0)
    # the quotient can round to just below 1; step the minority weight one ulp at a time
    while lg * n_good / (lb * n_bad) < 1.0:
        if n_good > n_bad:
            lb = math.nextafter(lb, 0.0)
        else:
            lg = math.nextafter(lg, math.inf)
    return lg, lb


def kto_kl_estimate(policy: RewritePolicy, ref: RewritePolicy, vocab: Vocabulary,
                    examples: Sequence[RewriteRecord]) -> float:
    """Detached reference point: mean log-ratio over mismatched (query_i, rewrite_{i+1}) pairs, clamped at 0."""
    n = len(examples)
    if n < 2:
        warnings.warn("KL reference point needs >= 2 examples; using 0", RuntimeWarning, stacklevel=2)
        return 0.0
    mism = [(examples[i].original_query, examples[(i + 1) % n].rewrite) for i in range(n)]
    with torch.no_grad():
        enc = encode_batch(vocab, mism, policy.cfg.context_length)
        diff = sequence_logprobs(policy, enc).double() - sequence_logprobs(ref, enc).double()
    return max(0.0, float(diff.mean()))


def kto_loss_from_logps(pol: torch.Tensor, ref: torch.Tensor, is_good: torch.Tensor, kl: float,
                        beta: float, lambda_good: float, lambda_bad: float) -> torch.Tensor:
    g = beta * (pol - ref) - beta * kl
    h = torch.where(is_good, torch.sigmoid(g), torch.sigmoid(-g))
    w = torch.where(is_good, torch.full_like(g, lambda_good), torch.full_like(g, lambda_bad))
    return (w * (1.0 - h)).mean()


def kto_loss(policy: RewritePolicy, ref: RewritePolicy, vocab: Vocabulary, examples: Sequence[RewriteRecord],
             beta: float, lambdas: tuple[float, float] = (1.0, 1.0), kl: float | None = None) -> torch.Tensor:
    for r in examples:
        if r.label not in (GOOD, BAD):
            raise ValueError(f"KTO example for query {r.query_id!r} is unlabeled")
    if lambdas[0] <= 0 or lambdas[1] <= 0:
        raise ValueError("KTO weights must be positive")
    if kl is None:
        kl = kto_kl_estimate(policy, ref, vocab, examples)
    enc = encode_batch(vocab, [(r.original_query, r.rewrite) for r in examples], policy.cfg.context_length)
    pol = sequence_logprobs(policy, enc)
    with torch.no_grad():
        rl = sequence_logprobs(ref, enc).to(pol.dtype)
    is_good = torch.tensor([r.label == GOOD for r in examples])
    return kto_loss_from_logps(pol, rl, is_good, kl, beta, *lambdas)


# -- offline loop --------------------------------------------------------------


def run_offline(config: TrainConfig, dataset: FeedbackDataset, sft_ckpt: PolicyCheckpoint, method: str,
                log_path: str | Path | None = None) -> PolicyCheckpoint:
    if method not in ("dpo", "kto"):
        raise ValueError(f"unknown offline method {method!r}")
    stats = f"(pairs={len(dataset.pairs)}, n_good={dataset.n_good}, n_bad={dataset.n_bad}, mu={dataset.mu:.4f})"
    if method == "dpo" and not dataset.pairs:
        raise ValueError(f"DPO needs at least one preference pair {stats}")
    if method == "kto" and (dataset.n_good == 0 or dataset.n_bad == 0):
        raise ValueError(f"KTO needs both good and bad examples {stats}")

    vocab = sft_ckpt.vocab
    ref = copy.deepcopy(sft_ckpt.model).eval()
    for p in ref.parameters():
        p.requires_grad_(False)
    policy = copy.deepcopy(sft_ckpt.model).train()
    opt = _adam(policy.parameters(), config.offline_lr)
    rng = np.random.default_rng(config.seed)
    runlog = RunLog(log_path)
    if method == "kto":
        lambdas = (compute_lambda_weights(dataset.n_good, dataset.n_bad) if config.auto_lambda
                   else (config.lambda_good, config.lambda_bad))
    items = dataset.pairs if method == "dpo" else dataset.kto_examples

    step = 0
    for epoch in range(config.offline_epochs):
        for idx in _batches(len(items), config.offline_batch_size, rng):
            batch = [items[i] for i in idx]
            if method == "dpo":
                loss = dpo_loss(policy, ref, vocab, batch, config.beta)
                extra = {}
            else:
                kl = kto_kl_estimate(policy, ref, vocab, batch) if len(batch) > 1 else 0.0
                loss = kto_loss(policy, ref, vocab, batch, config.beta, lambdas, kl=kl)
                extra = {"kl": kl}
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite {method} loss at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            runlog.write(stage=method, step=step, epoch=epoch, loss=loss.item(), **extra)

    meta = dict(sft_ckpt.metadata)
    meta.update(stage=method, offline_steps=step, beta=config.beta, offline_lr=config.offline_lr,
                mu=dataset.mu, train_seed=config.seed)
    if method == "kto":
        meta.update(lambda_good=lambdas[0], lambda_bad=lambdas[1])
    return PolicyCheckpoint(policy, vocab, meta, config.seed)


# -- PPO ---------------------------------------------------------------------


@dataclass
class Trajectory:
    query: str
    token_ids: list[int]
    logp_behavior: list[float]
    logp_ref: list[float]
    values: list[float]
    score: float
    rewards: list[float] = field(default_factory=list)
    advantages: list[float] = field(default_factory=list)
    returns: list[float] = field(default_factory=list)
    rewrite: str = ""
    empty_retrieval: bool = False


def ppo_rewards(logp_policy: Sequence[float], logp_ref: Sequence[float], score: float,
                beta_kl: float) -> list[float]:
    """Per-token KL penalty, with the ranking score added on the final token."""
    if not logp_policy:
        raise ValueError("empty trajectory")
    if len(logp_policy) != len(logp_ref):
        raise ValueError("policy and reference log-prob lists differ in length")
    rewards = [-beta_kl * (a - b) for a, b in zip(logp_policy, logp_ref)]
    rewards[-1] += score
    return rewards


def gae_advantages(rewards: Sequence[float], values: Sequence[float],
                   gae_lambda: float) -> tuple[list[float], list[float]]:
    """A_t = sum_k lambda^k delta_{t+k}, delta_t = r_t + V_{t+1} - V_t, V_T = 0.

    Returns (advantages, value targets A_t + V_t).
    """
    if len(rewards) != len(values):
        raise ValueError(f"length mismatch: {len(rewards)} rewards vs {len(values)} values")
    n = len(rewards)
    adv = [0.0] * n
    acc = 0.0
    for t in reversed(range(n)):
        nxt = values[t + 1] if t + 1 < n else 0.0
        delta = rewards[t] + nxt - values[t]
        acc = delta + gae_lambda * acc
        adv[t] = acc
    return adv, [a + v for a, v in zip(adv, values)]


def ppo_losses_from_logps(new_logps: Sequence[torch.Tensor], old_logps: Sequence[torch.Tensor],
                          values: Sequence[torch.Tensor], advantages: Sequence[torch.Tensor],
                          returns: Sequence[torch.Tensor], clip_eps: float | None):
    """Clipped surrogate and squared value error, token-mean per trajectory then batch mean."""
    pls, vls = [], []
    for i, (new, old, v, a, r) in enumerate(zip(new_logps, old_logps, values, advantages, returns)):
        ratio = torch.exp(new - old)
        if not torch.isfinite(ratio).all():
            raise FloatingPointError(f"non-finite probability ratio in trajectory {i}")
        surr = ratio * a
        if clip_eps is not None:
            surr = torch.minimum(surr, ratio.clamp(1 - clip_eps, 1 + clip_eps) * a)
        pls.append(-surr.mean())
        vls.append(((v - r) ** 2).mean())
    policy_loss = torch.stack(pls).mean()
    value_loss = torch.stack(vls).mean()
    return policy_loss, value_loss, policy_loss + value_loss


def _traj_batch(vocab: Vocabulary, trajs: Sequence[Trajectory], ctx: int) -> EncodedBatch:
    return encode_batch(vocab, [(t.query, t.token_ids) for t in trajs], ctx)


def trajectory_values(value_model: ValueModel, batch: EncodedBatch) -> list[torch.Tensor]:
    v = value_model(batch.ids[:, :-1])
    return [v[b][batch.target_mask[b]] for b in range(v.shape[0])]


def ppo_losses(policy: RewritePolicy, value_model: ValueModel, vocab: Vocabulary,
               trajs: Sequence[Trajectory], clip_eps: float | None):
    batch = _traj_batch(vocab, trajs, policy.cfg.context_length)
    dt = next(policy.parameters()).dtype
    new = rewrite_token_logprobs(policy, batch)
    vals = trajectory_values(value_model, batch)
    as_t = lambda xs: [torch.tensor(x, dtype=dt) for x in xs]
    return ppo_losses_from_logps(new, as_t([t.logp_behavior for t in trajs]), vals,
                                 as_t([t.advantages for t in trajs]), as_t([t.returns for t in trajs]),
                                 clip_eps)


RewardFn = Callable[[str, str], tuple[float, bool]]


def retrieval_reward(index: SearchIndex, scorer: Scorer, k: int) -> RewardFn:
    def fn(query: str, rewrite: str) -> tuple[float, bool]:
        if not rewrite:
            return 0.0, True
        s = score_rewrite(query, rewrite, index, scorer, k)
        return s.value, s.empty_retrieval
    return fn


def collect_trajectories(policy: RewritePolicy, ref: RewritePolicy, value_model: ValueModel, vocab: Vocabulary,
                         queries: Sequence[str], reward_fn: RewardFn, config: TrainConfig,
                         generator: torch.Generator) -> list[Trajectory]:
    prompts = [format_prompt(vocab, q) for q in queries]
    outs = generate_ids(policy, prompts, config.rollout_temperature, config.max_new_tokens, generator)
    trajs = []
    with torch.no_grad():
        batch = encode_batch(vocab, list(zip(queries, outs)), policy.cfg.context_length)
        lp = rewrite_token_logprobs(policy, batch)
        lr = rewrite_token_logprobs(ref, batch)
        vals = trajectory_values(value_model, batch)
    for i, q in enumerate(queries):
        text = vocab.decode(outs[i])
        score, empty = reward_fn(q, text)
        t = Trajectory(q, outs[i], lp[i].tolist(), lr[i].tolist(), vals[i].tolist(), score,
                       rewrite=text, empty_retrieval=empty)
        t.rewards = ppo_rewards(t.logp_behavior, t.logp_ref, score, config.beta_kl)
        t.advantages, t.returns = gae_advantages(t.rewards, t.values, config.gae_lambda)
        trajs.append(t)
    if config.whiten_advantages:
        flat = np.array([a for t in trajs for a in t.advantages])
        if flat.size > 1:
            mu, sd = flat.mean(), flat.std()
            for t in trajs:
                t.advantages = [(a - mu) / (sd + 1e-8) for a in t.advantages]
    return trajs


def run_ppo(config: TrainConfig, queries: Sequence[str], sft_ckpt: PolicyCheckpoint,
            index: SearchIndex | None = None, scorer: Scorer | None = None, reward_fn: RewardFn | None = None,
            log_path: str | Path | None = None) -> tuple[PolicyCheckpoint, list[float]]:
    """Online feedback: rewrite, retrieve, score, update.

    Returns the trained checkpoint and the per-step mean terminal score.
    """
    if not queries:
        raise ValueError("no training queries")
    if reward_fn is None:
        if index is None or scorer is None:
            raise ValueError("run_ppo needs an index and scorer (or an explicit reward_fn)")
        reward_fn = retrieval_reward(index, scorer, config.retrieval_k)
    vocab = sft_ckpt.vocab
    ref = copy.deepcopy(sft_ckpt.model).eval()
    for p in ref.parameters():
        p.requires_grad_(False)
    policy = copy.deepcopy(sft_ckpt.model).train()
    value_model = ValueModel(policy).train()
    opt = _adam(list(policy.parameters()) + list(value_model.parameters()), config.ppo_lr)
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    runlog = RunLog(log_path)
    curve: list[float] = []
    order: list[int] = []
    for step in range(1, config.ppo_steps + 1):
        batch_q = []
        while len(batch_q) < config.ppo_batch:
            if not order:
                order = list(rng.permutation(len(queries)))
            batch_q.append(queries[order.pop()])
        trajs = collect_trajectories(policy, ref, value_model, vocab, batch_q, reward_fn, config, gen)
        if all(t.empty_retrieval for t in trajs):
            sample = "; ".join(f"{t.query!r} -> {t.rewrite!r}" for t in trajs[:3])
            raise RuntimeError(f"every rewrite in PPO step {step} retrieved nothing (e.g. {sample})")
        for _ in range(config.ppo_epochs):
            pl, vl, total = ppo_losses(policy, value_model, vocab, trajs, config.clip_eps)
            opt.zero_grad()
            total.backward()
            opt.step()
        mean_score = float(np.mean([t.score for t in trajs]))
        kl = float(np.mean([np.sum(np.subtract(t.logp_behavior, t.logp_ref)) for t in trajs]))
        curve.append(mean_score)
        runlog.write(stage="ppo", step=step, policy_loss=pl.item(), value_loss=vl.item(), loss=total.item(),
                     mean_reward=mean_score, kl=kl)
    meta = dict(sft_ckpt.metadata)
    meta.update(stage="ppo", ppo_steps=config.ppo_steps, ppo_batch=config.ppo_batch, clip_eps=config.clip_eps,
                beta_kl=config.beta_kl, ppo_lr=config.ppo_lr, train_seed=config.seed)
    return PolicyCheckpoint(policy, vocab, meta, config.seed), curve
