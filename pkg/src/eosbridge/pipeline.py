"""Three-stage training: bidirectional warm-up reconstruction, bridged
compression, and contrastive alignment on the bridge embeddings.

Determinism contract: every random draw derives from the stage config's
root_seed through named SeedSequence spawn keys ((0,) for init, (stage,
epoch) for the shuffle, (stage, epoch, batch) for masking), so a (seed,
corpus, config) triple always reproduces the same checkpoint bytes, and a
run resumed at an epoch boundary continues the exact trajectory.
"""

import csv
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor, backward, zero_grads
from .data import CorpusRecord, PatchCodebook, build_layout
from .errors import (BatchConstructionError, CheckpointError, DataError,
                     ShapeError, StageOrderError, TrainingDivergedError)
from .losses import infonce, mae_loss, mntp_loss
from .masking import (apply_patch_noise, apply_token_mask, blockb_mask,
                      mae_mask, mntp_mask)
from .masks import build_bidirectional, build_truncated
from .model import (MASK_ID, ModelConfig, ModelParams, embed_sequence,
                    extract_eos_embedding, forward, lm_logits,
                    load_checkpoint, mae_decode, save_checkpoint)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

TEXT_MNTP = "mntp"   # predict position i from row i-1
TEXT_MLM = "mlm"     # predict position i from its own row

METRIC_COLUMNS = ("step", "stage", "mntp", "mae", "infonce", "total",
                  "wall_ms")


@dataclass(frozen=True)
class StageConfig:
    stage: int
    epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 5e-5
    mask_ratio_text: float = 0.20
    mask_ratio_patch: float = 0.50
    mask_ratio_blockb: float = 0.70
    text_weight: float = 1.0
    mae_weight: float = 0.5
    temperature: float = 0.02
    text_objective: str = TEXT_MNTP
    root_seed: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2, or 3, got {self.stage}")
        for name in ("mask_ratio_text", "mask_ratio_patch",
                     "mask_ratio_blockb"):
            r = getattr(self, name)
            if not 0.0 < r <= 1.0:
                raise ValueError(f"{name} must be in (0, 1], got {r}")
        if self.temperature <= 0.0:
            raise ValueError(f"temperature must be positive, got "
                             f"{self.temperature}")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")
        if self.stage == 3 and self.batch_size < 2:
            raise ValueError("stage 3 needs batch_size >= 2 for in-batch "
                             "negatives")
        if self.text_objective not in (TEXT_MNTP, TEXT_MLM):
            raise ValueError(f"unknown text objective "
                             f"{self.text_objective!r}")
        if self.text_weight < 0.0 or self.mae_weight < 0.0:
            raise ValueError("objective weights must be non-negative")
        if self.stage == 1 and self.text_weight == 0.0 \
                and self.mae_weight == 0.0:
            raise ValueError("stage 1 needs at least one active objective")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainerState:
    params: ModelParams
    m: dict
    v: dict
    step: int = 0
    epochs_done: int = 0
    metrics: list = field(default_factory=list)

    @classmethod
    def fresh(cls, params: ModelParams) -> "TrainerState":
        return cls(params,
                   {n: np.zeros(t.shape) for n, t in params.items()},
                   {n: np.zeros(t.shape) for n, t in params.items()})


def adam_step(state: TrainerState, grads: dict, lr: float) -> TrainerState:
    for name, t in state.params.items():
        if name not in grads:
            raise ValueError(f"missing gradient for {name}")
        if np.shape(grads[name]) != t.shape:
            raise ShapeError(f"gradient for {name} has shape "
                             f"{np.shape(grads[name])}, param is {t.shape}")
    state.step += 1
    c1 = 1.0 - ADAM_BETA1 ** state.step
    c2 = 1.0 - ADAM_BETA2 ** state.step
    for name, p in state.params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        state.m[name] = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        state.v[name] = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * g * g
        p.data -= lr * (state.m[name] / c1) \
            / (np.sqrt(state.v[name] / c2) + ADAM_EPS)
    return state


# ---------------------------------------------------------------------------
# trainer checkpoints (optimizer state rides the model format as extras)
# ---------------------------------------------------------------------------

def save_state(path, state: TrainerState, config: StageConfig,
               meta_extra: Optional[dict] = None) -> None:
    meta = {"stage": config.stage, "epochs_done": state.epochs_done,
            "stage_config": config.to_dict()}
    if meta_extra:
        meta.update(meta_extra)
    extras = {"adam.step": np.asarray(float(state.step))}
    for name, arr in state.m.items():
        extras[f"adam.m.{name}"] = arr
    for name, arr in state.v.items():
        extras[f"adam.v.{name}"] = arr
    save_checkpoint(path, state.params, meta=meta, extras=extras)


def load_state(path):
    """Returns (model config, TrainerState, meta)."""
    cfg, params, meta, extras = load_checkpoint(path)
    state = TrainerState.fresh(params)
    if "adam.step" in extras:
        state.step = int(extras["adam.step"])
    for name in params.names():
        if f"adam.m.{name}" in extras:
            state.m[name] = extras[f"adam.m.{name}"]
        if f"adam.v.{name}" in extras:
            state.v[name] = extras[f"adam.v.{name}"]
    state.epochs_done = int(meta.get("epochs_done", 0))
    return cfg, state, meta


def _resolve_init(config: StageConfig, model_config, init,
                  allow_stage_skip: bool):
    """Work out starting parameters: fresh weights, a finished checkpoint
    from the previous stage, or an interrupted checkpoint of this stage."""
    if init is None:
        if config.stage > 1 and not allow_stage_skip:
            raise StageOrderError(
                f"stage {config.stage} requires a stage-{config.stage - 1} "
                f"checkpoint; pass allow_stage_skip to ablate")
        cfg = model_config if model_config is not None else ModelConfig()
        return cfg, TrainerState.fresh(ModelParams.init(cfg,
                                                        config.root_seed)), 0
    cfg, state, meta = load_state(init)
    if model_config is not None and model_config != cfg:
        raise CheckpointError("model config mismatch between checkpoint and "
                              "request")
    src_stage = int(meta.get("stage", 0))
    if src_stage == config.stage:
        saved = dict(meta.get("stage_config", {}))
        current = config.to_dict()
        saved.pop("epochs", None)
        current.pop("epochs", None)
        if saved and saved != current:
            raise CheckpointError("stage config mismatch on resume")
        return cfg, state, state.epochs_done
    if src_stage != config.stage - 1 and not allow_stage_skip:
        raise StageOrderError(f"stage {config.stage} expects a stage-"
                              f"{config.stage - 1} checkpoint, got stage "
                              f"{src_stage}")
    # new stage: keep weights, reinitialize the optimizer
    return cfg, TrainerState.fresh(state.params), 0


# ---------------------------------------------------------------------------
# per-batch losses
# ---------------------------------------------------------------------------

def _mean(tensors):
    acc = tensors[0]
    for t in tensors[1:]:
        acc = ad.add(acc, t)
    return ad.scale(acc, 1.0 / len(tensors))


def _stage1_instance(params, inst, codebook, config, rng):
    enc = build_layout(inst, 1, codebook)
    tokens, patches = enc.tokens, enc.patches
    tok_targets, patch_targets = {}, {}
    if config.text_weight > 0.0:
        plan = mntp_mask(enc.text_span, rng, config.mask_ratio_text)
        tokens, tok_targets = apply_token_mask(tokens, plan, MASK_ID)
    if config.mae_weight > 0.0:
        plan = mae_mask(enc.vis_span, rng, config.mask_ratio_patch)
        patches, patch_targets = apply_patch_noise(patches, plan,
                                                   enc.vis_span[0], rng)
    h0 = embed_sequence(params, tokens, patches, enc.layout)
    states = forward(params, h0, build_bidirectional(enc.layout), enc.layout)
    mntp_t = mae_t = None
    if tok_targets:
        positions = sorted(tok_targets)
        rows = ([p - 1 for p in positions]
                if config.text_objective == TEXT_MNTP else positions)
        mntp_t = mntp_loss(lm_logits(params, states, rows),
                           [tok_targets[p] for p in positions])
    if patch_targets:
        ppos = sorted(patch_targets)
        mae_t = mae_loss(mae_decode(params, states, ppos),
                         np.stack([patch_targets[p] for p in ppos]))
    return mntp_t, mae_t


def _stage2_instance(params, inst, codebook, config, rng):
    enc = build_layout(inst, 2, codebook)
    plan = blockb_mask(enc.blockb_span, rng, config.mask_ratio_blockb)
    tokens, targets = apply_token_mask(enc.tokens, plan, MASK_ID)
    h0 = embed_sequence(params, tokens, enc.patches, enc.layout)
    states = forward(params, h0, build_truncated(enc.layout), enc.layout)
    positions = sorted(targets)
    logits = lm_logits(params, states, [p - 1 for p in positions])
    return mntp_loss(logits, [targets[p] for p in positions])


def _encode_stream(params, enc):
    h0 = embed_sequence(params, enc.tokens, enc.patches, enc.layout)
    states = forward(params, h0, build_bidirectional(enc.layout), enc.layout)
    d = params.cfg.d_model
    return ad.reshape(extract_eos_embedding(states), [1, d])


def _stage3_batch(params, batch, codebook, config):
    ids = [inst.pair_id for inst in batch]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise BatchConstructionError(
            f"duplicate pair ids in batch (false negatives): {dupes[:3]}")
    q_rows, t_rows = [], []
    for inst in batch:
        q_enc, t_enc = build_layout(inst, 3, codebook)
        q_rows.append(_encode_stream(params, q_enc))
        t_rows.append(_encode_stream(params, t_enc))
    q = ad.concat(q_rows, axis=0)
    t = ad.concat(t_rows, axis=0)
    return infonce(q, t, config.temperature), q, t


def _similarity_separation(q: np.ndarray, t: np.ndarray) -> float:
    qn = q / np.linalg.norm(q, axis=1, keepdims=True)
    tn = t / np.linalg.norm(t, axis=1, keepdims=True)
    s = qn @ tn.T
    b = s.shape[0]
    off = (s.sum() - np.trace(s)) / (b * b - b)
    return float(np.trace(s) / b - off)


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

def _instances(corpus):
    out = [r.instance if isinstance(r, CorpusRecord) else r for r in corpus]
    if not out:
        raise DataError("empty corpus")
    return out


def _check_finite(step: int, row: dict) -> None:
    parts = {k: row[k] for k in ("mntp", "mae", "infonce", "total")}
    if not all(np.isfinite(v) for v in parts.values()):
        detail = " ".join(f"{k}={v:.6g}" for k, v in parts.items())
        raise TrainingDivergedError(f"step {step}: non-finite loss ({detail})")


def append_metrics(path, rows) -> None:
    fresh = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRIC_COLUMNS,
                           extrasaction="ignore")
        if fresh:
            w.writeheader()
        w.writerows(rows)


def _train(corpus, config: StageConfig, model_config=None, init=None,
           codebook: Optional[PatchCodebook] = None, metrics_path=None,
           allow_stage_skip: bool = False) -> TrainerState:
    instances = _instances(corpus)
    cfg, state, start_epoch = _resolve_init(config, model_config, init,
                                            allow_stage_skip)
    codebook = codebook if codebook is not None else PatchCodebook(cfg.patch_dim)
    if codebook.patch_dim != cfg.patch_dim:
        raise ShapeError(f"codebook patch_dim {codebook.patch_dim} != model "
                         f"patch_dim {cfg.patch_dim}")
    stage = config.stage
    for epoch in range(start_epoch, config.epochs):
        shuffle = np.random.default_rng(
            np.random.SeedSequence(config.root_seed, spawn_key=(stage, epoch)))
        perm = shuffle.permutation(len(instances))
        chunks = [perm[i:i + config.batch_size]
                  for i in range(0, len(instances), config.batch_size)]
        epoch_rows = []
        for bi, idxs in enumerate(chunks):
            batch = [instances[i] for i in idxs]
            if stage == 3 and len(batch) < 2:
                continue
            rng = np.random.default_rng(
                np.random.SeedSequence(config.root_seed,
                                       spawn_key=(stage, epoch, bi)))
            t0 = time.perf_counter()
            row = {"step": state.step + 1, "stage": stage, "mntp": 0.0,
                   "mae": 0.0, "infonce": 0.0, "total": 0.0}
            with Graph():
                if stage == 1:
                    mntp_ts, mae_ts = [], []
                    for inst in batch:
                        mn, ma = _stage1_instance(state.params, inst,
                                                  codebook, config, rng)
                        if mn is not None:
                            mntp_ts.append(mn)
                        if ma is not None:
                            mae_ts.append(ma)
                    total = None
                    if mntp_ts:
                        mean_mntp = _mean(mntp_ts)
                        row["mntp"] = mean_mntp.item()
                        total = ad.scale(mean_mntp, config.text_weight)
                    if mae_ts:
                        mean_mae = _mean(mae_ts)
                        row["mae"] = mean_mae.item()
                        weighted = ad.scale(mean_mae, config.mae_weight)
                        total = weighted if total is None \
                            else ad.add(total, weighted)
                elif stage == 2:
                    total = _mean([_stage2_instance(state.params, inst,
                                                    codebook, config, rng)
                                   for inst in batch])
                    row["mntp"] = total.item()
                else:
                    total, q, t = _stage3_batch(state.params, batch,
                                                codebook, config)
                    row["infonce"] = total.item()
                    row["sep"] = _similarity_separation(q.data, t.data)
                row["total"] = total.item()
                _check_finite(row["step"], row)
                backward(total)
            grads = {name: (t.grad if t.grad is not None
                            else np.zeros(t.shape))
                     for name, t in state.params.items()}
            adam_step(state, grads, config.learning_rate)
            zero_grads(state.params.tensors())
            row["wall_ms"] = (time.perf_counter() - t0) * 1e3
            state.metrics.append(row)
            epoch_rows.append(row)
        state.epochs_done = epoch + 1
        if metrics_path:
            append_metrics(metrics_path, epoch_rows)
    return state


def stage1_train(corpus, config: StageConfig, model_config=None, init=None,
                 codebook=None, metrics_path=None) -> TrainerState:
    """Joint denoising warm-up: masked-token prediction plus patch
    reconstruction under a fully bidirectional mask."""
    if config.stage != 1:
        raise ValueError(f"stage1_train got a stage-{config.stage} config")
    return _train(corpus, config, model_config, init, codebook, metrics_path)


def stage2_train(corpus, config: StageConfig, init, model_config=None,
                 codebook=None, metrics_path=None,
                 allow_stage_skip: bool = False) -> TrainerState:
    """Bridged compression: aggressive masking on the text behind the
    bridge, prediction conditioned only on the bridge and local context."""
    if config.stage != 2:
        raise ValueError(f"stage2_train got a stage-{config.stage} config")
    return _train(corpus, config, model_config, init, codebook, metrics_path,
                  allow_stage_skip=allow_stage_skip)


def stage3_train(corpus, config: StageConfig, init, model_config=None,
                 codebook=None, metrics_path=None,
                 allow_stage_skip: bool = False) -> TrainerState:
    """Contrastive alignment of query and target bridge embeddings with
    in-batch negatives; both towers share one set of weights."""
    if config.stage != 3:
        raise ValueError(f"stage3_train got a stage-{config.stage} config")
    return _train(corpus, config, model_config, init, codebook, metrics_path,
                  allow_stage_skip=allow_stage_skip)
