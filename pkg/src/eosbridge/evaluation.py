"""Embedding extraction, Precision@1 pools, ablation and mask-ratio
harnesses, and the qualitative bridge-reconstruction probe."""

import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import (VOCAB_WORDS, CorpusRecord, PatchCodebook, SymbolicImage,
                   TrainingInstance, build_layout, build_target_stream,
                   decode_ids, render_patches)
from .errors import DataError, LayoutError
from .losses import mntp_loss
from .masking import apply_token_mask, blockb_mask
from .masks import Role, SequenceLayout, build_bidirectional, build_truncated
from .model import (EOS_ID, MASK_ID, PAD_ID, ModelConfig, ModelParams,
                    embed_sequence, extract_eos_embedding, forward,
                    lm_logits)
from .pipeline import (StageConfig, save_state, stage1_train, stage2_train,
                       stage3_train)

ARM_NAMES = ("full", "no-stage1", "no-stage2", "stage1-MAE-only",
             "stage1-MNTP-only", "stage1-MLM-variant", "contrastive-only")

DEFAULT_POOL_SIZE = 64


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------

def _encode_eos(params: ModelParams, enc) -> np.ndarray:
    h0 = embed_sequence(params, enc.tokens, enc.patches, enc.layout)
    states = forward(params, h0, build_bidirectional(enc.layout), enc.layout)
    return extract_eos_embedding(states).data.copy()


def embed_query(params: ModelParams, instance: TrainingInstance,
                codebook: PatchCodebook) -> np.ndarray:
    query, _ = build_layout(instance, 3, codebook)
    return _encode_eos(params, query)


def embed_target(params: ModelParams, token_ids) -> np.ndarray:
    return _encode_eos(params,
                       build_target_stream(token_ids, params.cfg.patch_dim))


# ---------------------------------------------------------------------------
# pools and Precision@1
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalPool:
    queries: tuple              # TrainingInstances
    candidates: tuple           # token id tuples, no duplicates
    gold: tuple                 # query index -> candidate index

    def __post_init__(self):
        if len(self.candidates) < 2:
            raise DataError("pool needs at least 2 candidates")
        if len(self.gold) != len(self.queries) or not self.queries:
            raise DataError("gold mapping must cover every query")
        if len(set(self.candidates)) != len(self.candidates):
            raise DataError("duplicate candidates in pool")
        for qi, ci in enumerate(self.gold):
            if not 0 <= ci < len(self.candidates):
                raise DataError(f"gold index {ci} out of range")
            if self.queries[qi].block_b_text != self.candidates[ci]:
                raise DataError(f"gold candidate mismatch for query {qi}")


def build_pools(records, pool_size: int = DEFAULT_POOL_SIZE,
                seed: int = 0) -> list:
    """Chunk an evaluation corpus into pools; each pool's candidate list
    holds every distinct target in the chunk exactly once, shuffled."""
    instances = [r.instance if isinstance(r, CorpusRecord) else r
                 for r in records]
    pools = []
    for start in range(0, len(instances), pool_size):
        chunk = instances[start:start + pool_size]
        targets, gold, index = [], [], {}
        for inst in chunk:
            if inst.block_b_text not in index:
                index[inst.block_b_text] = len(targets)
                targets.append(inst.block_b_text)
            gold.append(index[inst.block_b_text])
        if len(targets) < 2:
            continue
        rng = np.random.default_rng(
            np.random.SeedSequence(seed, spawn_key=(len(pools),)))
        perm = rng.permutation(len(targets))
        slot = np.empty(len(targets), dtype=int)
        slot[perm] = np.arange(len(targets))
        pools.append(EvalPool(tuple(chunk),
                              tuple(targets[i] for i in perm),
                              tuple(int(slot[g]) for g in gold)))
    if not pools:
        raise DataError("no usable pools (need >= 2 distinct targets)")
    return pools


def precision_from_embeddings(queries: np.ndarray, candidates: np.ndarray,
                              gold) -> float:
    """Argmax-cosine accuracy; exact score ties resolve to the lowest
    candidate index."""
    if queries.size == 0:
        raise DataError("empty query set")
    qn = queries / np.maximum(np.linalg.norm(queries, axis=1,
                                             keepdims=True), 1e-30)
    cn = candidates / np.maximum(np.linalg.norm(candidates, axis=1,
                                                keepdims=True), 1e-30)
    picks = np.argmax(qn @ cn.T, axis=1)
    return float(np.mean(picks == np.asarray(gold)))


def precision_at_1(pool: EvalPool, params: ModelParams,
                   codebook: PatchCodebook) -> float:
    q = np.stack([embed_query(params, inst, codebook)
                  for inst in pool.queries])
    c = np.stack([embed_target(params, t) for t in pool.candidates])
    return precision_from_embeddings(q, c, pool.gold)


def evaluate_params(params: ModelParams, eval_records,
                    codebook: PatchCodebook,
                    pool_size: int = DEFAULT_POOL_SIZE,
                    pool_seed: int = 0) -> dict:
    """Per-meta-task Precision@1, query-weighted across pools."""
    by_task = {}
    for r in eval_records:
        inst = r.instance if isinstance(r, CorpusRecord) else r
        by_task.setdefault(inst.meta_task, []).append(inst)
    scores = {}
    for task in sorted(by_task):
        correct = total = 0.0
        for pool in build_pools(by_task[task], pool_size, seed=pool_seed):
            correct += precision_at_1(pool, params, codebook) \
                * len(pool.queries)
            total += len(pool.queries)
        scores[task] = correct / total
    return scores


# ---------------------------------------------------------------------------
# training plans and arms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingPlan:
    """Desk-scale recipe shared by every arm of a comparison."""
    model: ModelConfig
    epochs: tuple = (1, 1, 1)
    learning_rates: tuple = (1e-3, 1e-3, 1e-3)
    batch_size: int = 32
    blockb_ratio: float = 0.70
    temperature: float = 0.02

    def stage_config(self, stage: int, seed: int, **overrides) -> StageConfig:
        kw = dict(stage=stage, epochs=self.epochs[stage - 1],
                  batch_size=self.batch_size,
                  learning_rate=self.learning_rates[stage - 1],
                  mask_ratio_blockb=self.blockb_ratio,
                  temperature=self.temperature, root_seed=seed)
        kw.update(overrides)
        return StageConfig(**kw)

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "epochs": list(self.epochs),
                "learning_rates": list(self.learning_rates),
                "batch_size": self.batch_size,
                "blockb_ratio": self.blockb_ratio,
                "temperature": self.temperature}


_STAGE1_OVERRIDES = {"stage1-MAE-only": {"text_weight": 0.0},
                     "stage1-MNTP-only": {"mae_weight": 0.0},
                     "stage1-MLM-variant": {"text_objective": "mlm"}}


def run_arm(arm: str, seed: int, pretrain, contrastive, plan: TrainingPlan,
            codebook: PatchCodebook, workdir,
            stage2_ratio: Optional[float] = None,
            stage1_init=None) -> ModelParams:
    """Train one ablation arm end to end and return the final weights.

    stage1_init short-circuits the warm-up with an existing checkpoint
    (shared across a sweep); stage2_ratio overrides the plan's Block-B
    masking ratio."""
    if arm not in ARM_NAMES:
        raise ValueError(f"unknown arm {arm!r}; expected one of {ARM_NAMES}")
    wd = Path(workdir)
    tag = f"{arm.replace(' ', '')}-{seed}"
    s1 = None
    if arm not in ("no-stage1", "contrastive-only"):
        if stage1_init is not None:
            s1 = stage1_init
        else:
            cfg1 = plan.stage_config(1, seed,
                                     **_STAGE1_OVERRIDES.get(arm, {}))
            st = stage1_train(pretrain, cfg1, model_config=plan.model,
                              codebook=codebook)
            s1 = wd / f"{tag}-s1.ckpt"
            save_state(s1, st, cfg1)
    prev = s1
    if arm != "no-stage2" and arm != "contrastive-only":
        over = {} if stage2_ratio is None \
            else {"mask_ratio_blockb": stage2_ratio}
        cfg2 = plan.stage_config(2, seed, **over)
        st = stage2_train(pretrain, cfg2, init=prev,
                          model_config=None if prev else plan.model,
                          codebook=codebook, allow_stage_skip=prev is None)
        prev = wd / f"{tag}-s2.ckpt"
        save_state(prev, st, cfg2)
    cfg3 = plan.stage_config(3, seed)
    st = stage3_train(contrastive, cfg3, init=prev,
                      model_config=None if prev else plan.model,
                      codebook=codebook,
                      allow_stage_skip=arm in ("no-stage2",
                                               "contrastive-only"))
    return st.params


def _median_scores(per_seed: list) -> dict:
    tasks = sorted(per_seed[0])
    return {t: float(np.median([s[t] for s in per_seed])) for t in tasks}


def run_ablation(arms, seeds, pretrain, contrastive, eval_records,
                 plan: TrainingPlan, pool_size: int = DEFAULT_POOL_SIZE,
                 codebook: Optional[PatchCodebook] = None,
                 workdir=None) -> dict:
    """Train every arm under the same seeds and corpora; returns
    {arm: {meta_task: median P@1 over seeds}}."""
    for arm in arms:
        if arm not in ARM_NAMES:
            raise ValueError(f"unknown arm {arm!r}; expected one of "
                             f"{ARM_NAMES}")
    codebook = codebook or PatchCodebook(plan.model.patch_dim)
    wd = workdir or tempfile.mkdtemp(prefix="arms-")
    results = {}
    for arm in arms:
        per_seed = []
        for seed in seeds:
            params = run_arm(arm, seed, pretrain, contrastive, plan,
                             codebook, wd)
            per_seed.append(evaluate_params(params, eval_records, codebook,
                                            pool_size))
        results[arm] = _median_scores(per_seed)
    return results


def run_mask_sweep(ratios, seeds, pretrain, contrastive, eval_records,
                   plan: TrainingPlan, pool_size: int = DEFAULT_POOL_SIZE,
                   codebook: Optional[PatchCodebook] = None,
                   workdir=None) -> dict:
    """Stage 2+3 per Block-B masking ratio from one shared warm-up per
    seed; returns {ratio: {meta_task: median P@1 over seeds}}."""
    for r in ratios:
        if not 0.0 < r <= 1.0:
            raise ValueError(f"ratio {r} outside (0, 1]")
    codebook = codebook or PatchCodebook(plan.model.patch_dim)
    wd = Path(workdir or tempfile.mkdtemp(prefix="sweep-"))
    shared = {}
    for seed in seeds:
        cfg1 = plan.stage_config(1, seed)
        st = stage1_train(pretrain, cfg1, model_config=plan.model,
                          codebook=codebook)
        shared[seed] = wd / f"sweep-{seed}-s1.ckpt"
        save_state(shared[seed], st, cfg1)
    results = {}
    for ratio in ratios:
        per_seed = []
        for seed in seeds:
            params = run_arm("full", seed, pretrain, contrastive, plan,
                             codebook, wd, stage2_ratio=ratio,
                             stage1_init=shared[seed])
            per_seed.append(evaluate_params(params, eval_records, codebook,
                                            pool_size))
        results[float(ratio)] = _median_scores(per_seed)
    return results


# ---------------------------------------------------------------------------
# bridged-reconstruction diagnostics
# ---------------------------------------------------------------------------

def blockb_reconstruction_ce(params: ModelParams,
                             instance: TrainingInstance,
                             codebook: PatchCodebook, mask_seed: int,
                             noise_rng=None) -> float:
    """Eval-time masked Block-B cross-entropy through the bridge.

    noise_rng, when given, replaces every Block-A patch row with fresh unit
    Gaussians before encoding, so the (true - noise) margin measures how
    much real Block-A content reaches the reconstruction. The mask plan
    depends only on mask_seed, making paired comparisons exact."""
    enc = build_layout(instance, 2, codebook)
    rng = np.random.default_rng(
        np.random.SeedSequence(mask_seed, spawn_key=(7,)))
    plan = blockb_mask(enc.blockb_span, rng)
    tokens, targets = apply_token_mask(enc.tokens, plan, MASK_ID)
    patches = enc.patches
    if noise_rng is not None and patches.shape[0]:
        patches = noise_rng.normal(size=patches.shape)
    h0 = embed_sequence(params, tokens, patches, enc.layout)
    states = forward(params, h0, build_truncated(enc.layout), enc.layout)
    rows = [p - 1 for p in plan.masked_positions]
    logits = lm_logits(params, states, rows)
    return mntp_loss(logits,
                     [targets[p] for p in plan.masked_positions]).item()


# ---------------------------------------------------------------------------
# bridge-reconstruction probe
# ---------------------------------------------------------------------------

def eos_probe(instance: TrainingInstance, params: ModelParams,
              codebook: PatchCodebook, length: int = 6) -> list:
    """Greedy decode of an all-masked text block behind the bridge: what
    does the compressed embedding remember about Block A?"""
    if length < 1:
        raise LayoutError("probe length must be positive")
    patches = render_patches(codebook, instance.image)
    a_text = instance.block_a_text or ()
    n_vis = patches.shape[0]
    roles = (Role.VISUAL_A,) * n_vis + (Role.TEXT_A,) * len(a_text) \
        + (Role.EOS_BRIDGE,) + (Role.TEXT_B,) * length
    if len(roles) > params.cfg.max_seq:
        raise LayoutError(f"probe layout of {len(roles)} exceeds max_seq "
                          f"{params.cfg.max_seq}")
    layout = SequenceLayout(roles)
    eos = n_vis + len(a_text)
    tokens = np.full(len(roles), PAD_ID, dtype=np.int64)
    tokens[n_vis:eos] = a_text
    tokens[eos] = EOS_ID
    tokens[eos + 1:] = MASK_ID
    mask = build_truncated(layout)
    decoded = []
    for t in range(length):
        h0 = embed_sequence(params, tokens, patches, layout)
        states = forward(params, h0, mask, layout)
        logits = lm_logits(params, states, [eos + t])
        nxt = int(np.argmax(logits.data[0]))
        tokens[eos + 1 + t] = nxt
        decoded.append(nxt)
    return decoded


def true_attribute_words(image: SymbolicImage) -> set:
    words = set(image.shapes) | set(image.colors)
    if image.hard:
        words |= set(image.sizes) | set(image.borders)
    return words


def matched_attributes(image: SymbolicImage, decoded_ids) -> set:
    """Which of the image's true attribute words the probe reproduced.
    Ids outside the word list (the model head can emit them) match nothing."""
    known = [int(t) for t in decoded_ids if 0 <= int(t) < len(VOCAB_WORDS)]
    words = set(decode_ids(tuple(known)))
    return true_attribute_words(image) & words
