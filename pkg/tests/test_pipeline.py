"""Trainer tests: Adam oracle, stage mechanics, determinism, resume."""

import csv

import numpy as np
import numpy.testing as npt
import pytest

from eosbridge.autodiff import Graph, backward
from eosbridge.data import (RETRIEVAL, PatchCodebook, TrainingInstance,
                            build_layout, gen_classification, gen_retrieval,
                            generate_corpus)
from eosbridge.errors import (BatchConstructionError, CheckpointError,
                              DataError, StageOrderError,
                              TrainingDivergedError)
from eosbridge.masking import blockb_mask, apply_token_mask
from eosbridge.masks import build_truncated
from eosbridge.model import (MASK_ID, ModelConfig, ModelParams,
                             embed_sequence, forward, lm_logits)
from eosbridge.pipeline import (StageConfig, TrainerState, adam_step,
                                append_metrics, load_state, save_state,
                                stage1_train, stage2_train, stage3_train)

CFG = ModelConfig(d_model=32, n_layers=2, n_heads=2, vocab_size=70,
                  patch_dim=12, max_seq=64, mae_decoder_layers=1)
CB = PatchCodebook(12)


def small_corpus(n=60, seed=1):
    return generate_corpus("mixed", n, root_seed=seed)


# --- config -------------------------------------------------------------

def test_stage_config_validation():
    with pytest.raises(ValueError):
        StageConfig(stage=4)
    with pytest.raises(ValueError):
        StageConfig(stage=1, mask_ratio_text=0.0)
    with pytest.raises(ValueError):
        StageConfig(stage=1, mask_ratio_blockb=1.2)
    with pytest.raises(ValueError):
        StageConfig(stage=3, temperature=0.0)
    with pytest.raises(ValueError):
        StageConfig(stage=3, batch_size=1)
    with pytest.raises(ValueError):
        StageConfig(stage=1, text_objective="span")
    with pytest.raises(ValueError):
        StageConfig(stage=1, text_weight=0.0, mae_weight=0.0)
    StageConfig(stage=2, batch_size=1)  # fine outside stage 3


# --- adam ----------------------------------------------------------------

def _micro_state(seed=0):
    return TrainerState.fresh(ModelParams.init(CFG, seed))


def test_adam_step1_update_magnitude_is_lr():
    state = _micro_state()
    before = {n: t.data.copy() for n, t in state.params.items()}
    grads = {n: np.ones(t.shape) for n, t in state.params.items()}
    adam_step(state, grads, lr=1e-3)
    for n, t in state.params.items():
        npt.assert_allclose(before[n] - t.data, 1e-3, rtol=1e-6)


def test_adam_zero_grads_from_fresh_state_no_op():
    state = _micro_state()
    before = {n: t.data.copy() for n, t in state.params.items()}
    grads = {n: np.zeros(t.shape) for n, t in state.params.items()}
    adam_step(state, grads, lr=1.0)
    for n, t in state.params.items():
        npt.assert_array_equal(before[n], t.data)
        npt.assert_array_equal(state.m[n], 0.0)


def test_adam_missing_grad_rejected():
    state = _micro_state()
    grads = {n: np.zeros(t.shape) for n, t in state.params.items()}
    del grads["tok_emb"]
    with pytest.raises(ValueError, match="tok_emb"):
        adam_step(state, grads, lr=1e-3)


def test_adam_matches_reference_recurrence():
    state = _micro_state(seed=3)
    rng = np.random.default_rng(0)
    ref_p = {n: t.data.copy() for n, t in state.params.items()}
    ref_m = {n: np.zeros(t.shape) for n, t in state.params.items()}
    ref_v = {n: np.zeros(t.shape) for n, t in state.params.items()}
    lr = 7e-4
    for t_ in range(1, 4):
        grads = {n: rng.normal(size=p.shape)
                 for n, p in state.params.items()}
        adam_step(state, grads, lr)
        for n in ref_p:
            g = grads[n]
            ref_m[n] = 0.9 * ref_m[n] + 0.1 * g
            ref_v[n] = 0.999 * ref_v[n] + 0.001 * g * g
            mhat = ref_m[n] / (1.0 - 0.9 ** t_)
            vhat = ref_v[n] / (1.0 - 0.999 ** t_)
            ref_p[n] = ref_p[n] - lr * mhat / (np.sqrt(vhat) + 1e-8)
    assert state.step == 3
    for n, t in state.params.items():
        npt.assert_allclose(t.data, ref_p[n], rtol=1e-12, atol=1e-15)


# --- stage 1 ---------------------------------------------------------------

def test_stage1_smoke_loss_decreases():
    sc = StageConfig(stage=1, epochs=2, batch_size=12, learning_rate=1e-3,
                     root_seed=7)
    st = stage1_train(small_corpus(), sc, model_config=CFG)
    assert st.step == 10
    first, last = st.metrics[0], st.metrics[-1]
    assert last["total"] < first["total"]
    # uniform-logit baseline at init
    assert abs(first["mntp"] - np.log(CFG.vocab_size)) \
        < 0.1 * np.log(CFG.vocab_size)
    steps = [m["step"] for m in st.metrics]
    assert steps == sorted(steps) and len(set(steps)) == len(steps)
    assert all(m["wall_ms"] >= 0.0 for m in st.metrics)


def test_stage1_zero_mae_weight_leaves_decoder_at_init():
    sc = StageConfig(stage=1, epochs=1, batch_size=12, learning_rate=1e-3,
                     mae_weight=0.0, root_seed=7)
    st = stage1_train(small_corpus(), sc, model_config=CFG)
    init = ModelParams.init(CFG, sc.root_seed)
    for name in init.names():
        if name.startswith("dec") or name == "pixel_head":
            npt.assert_array_equal(st.params[name].data, init[name].data)
    assert not np.array_equal(st.params["lm_head"].data, init["lm_head"].data)


def test_stage1_zero_text_weight_leaves_lm_head_at_init():
    sc = StageConfig(stage=1, epochs=1, batch_size=12, learning_rate=1e-3,
                     text_weight=0.0, root_seed=7)
    st = stage1_train(small_corpus(), sc, model_config=CFG)
    init = ModelParams.init(CFG, sc.root_seed)
    npt.assert_array_equal(st.params["lm_head"].data, init["lm_head"].data)
    assert st.metrics[0]["mntp"] == 0.0
    assert st.metrics[0]["mae"] > 0.0


def test_stage1_mlm_objective_diverges_from_mntp(tmp_path):
    corpus = small_corpus(24)
    outs = {}
    for obj in ("mntp", "mlm"):
        sc = StageConfig(stage=1, epochs=1, batch_size=12,
                         learning_rate=1e-3, text_objective=obj, root_seed=7)
        st = stage1_train(corpus, sc, model_config=CFG)
        p = tmp_path / f"{obj}.ckpt"
        save_state(p, st, sc)
        outs[obj] = p.read_bytes()
    assert outs["mntp"] != outs["mlm"]


def test_empty_corpus_rejected():
    sc = StageConfig(stage=1, root_seed=0)
    with pytest.raises(DataError, match="empty"):
        stage1_train([], sc, model_config=CFG)


def test_wrong_stage_config_for_entry_point():
    sc = StageConfig(stage=2)
    with pytest.raises(ValueError):
        stage1_train(small_corpus(12), sc, model_config=CFG)


# --- determinism and resume ---------------------------------------------

def test_training_bit_deterministic(tmp_path):
    corpus = small_corpus(24)
    blobs = []
    for run in range(2):
        sc = StageConfig(stage=1, epochs=2, batch_size=8,
                         learning_rate=1e-3, root_seed=42)
        st = stage1_train(corpus, sc, model_config=CFG)
        p = tmp_path / f"run{run}.ckpt"
        save_state(p, st, sc)
        blobs.append(p.read_bytes())
    assert blobs[0] == blobs[1]


def test_resume_reproduces_trajectory(tmp_path):
    corpus = small_corpus(24)
    sc4 = StageConfig(stage=1, epochs=4, batch_size=8, learning_rate=1e-3,
                      root_seed=11)
    straight = stage1_train(corpus, sc4, model_config=CFG)

    sc2 = StageConfig(stage=1, epochs=2, batch_size=8, learning_rate=1e-3,
                      root_seed=11)
    half = stage1_train(corpus, sc2, model_config=CFG)
    mid = tmp_path / "mid.ckpt"
    save_state(mid, half, sc2)
    resumed = stage1_train(corpus, sc4, init=mid)

    tail = straight.metrics[len(half.metrics):]
    assert len(resumed.metrics) == len(tail)
    for a, b in zip(resumed.metrics, tail):
        assert a["step"] == b["step"]
        assert a["mntp"] == b["mntp"]
        assert a["mae"] == b["mae"]
        assert a["total"] == b["total"]

    p1, p2 = tmp_path / "straight.ckpt", tmp_path / "resumed.ckpt"
    save_state(p1, straight, sc4)
    save_state(p2, resumed, sc4)
    assert p1.read_bytes() == p2.read_bytes()


def test_resume_config_mismatch_rejected(tmp_path):
    corpus = small_corpus(16)
    sc = StageConfig(stage=1, epochs=1, batch_size=8, learning_rate=1e-3,
                     root_seed=3)
    st = stage1_train(corpus, sc, model_config=CFG)
    p = tmp_path / "s1.ckpt"
    save_state(p, st, sc)
    other = StageConfig(stage=1, epochs=2, batch_size=8, learning_rate=5e-4,
                        root_seed=3)
    with pytest.raises(CheckpointError, match="config"):
        stage1_train(corpus, other, init=p)


def test_model_config_mismatch_rejected(tmp_path):
    corpus = small_corpus(16)
    sc = StageConfig(stage=1, epochs=1, batch_size=8, root_seed=3)
    st = stage1_train(corpus, sc, model_config=CFG)
    p = tmp_path / "s1.ckpt"
    save_state(p, st, sc)
    bigger = ModelConfig(d_model=64, n_layers=2, n_heads=2, vocab_size=70,
                         patch_dim=12, max_seq=64)
    sc2 = StageConfig(stage=2, epochs=1, batch_size=8, root_seed=3)
    with pytest.raises(CheckpointError, match="mismatch"):
        stage2_train(corpus, sc2, init=p, model_config=bigger)


def test_state_roundtrip_preserves_optimizer(tmp_path):
    corpus = small_corpus(16)
    sc = StageConfig(stage=1, epochs=1, batch_size=8, learning_rate=1e-3,
                     root_seed=5)
    st = stage1_train(corpus, sc, model_config=CFG)
    p = tmp_path / "s.ckpt"
    save_state(p, st, sc)
    cfg, loaded, meta = load_state(p)
    assert cfg == CFG
    assert loaded.step == st.step
    assert loaded.epochs_done == 1
    assert meta["stage"] == 1
    for n in st.params.names():
        npt.assert_array_equal(loaded.m[n], st.m[n])
        npt.assert_array_equal(loaded.v[n], st.v[n])
    p2 = tmp_path / "s2.ckpt"
    save_state(p2, loaded, sc)
    assert p.read_bytes() == p2.read_bytes()


def test_nan_abort_names_step(tmp_path):
    corpus = small_corpus(16)
    sc = StageConfig(stage=1, epochs=1, batch_size=8, root_seed=9)
    state = TrainerState.fresh(ModelParams.init(CFG, sc.root_seed))
    state.params["tok_emb"].data[:] = np.nan
    p = tmp_path / "poison.ckpt"
    save_state(p, state, sc)
    with pytest.raises(TrainingDivergedError, match="step 1"):
        stage1_train(corpus, sc, init=p)


# --- stage ordering ---------------------------------------------------------

def test_stage2_requires_stage1_checkpoint():
    sc = StageConfig(stage=2, epochs=1, batch_size=8)
    with pytest.raises(StageOrderError, match="stage-1"):
        stage2_train(small_corpus(16), sc, init=None)


def test_stage3_rejects_stage1_checkpoint(tmp_path):
    corpus = small_corpus(16)
    sc1 = StageConfig(stage=1, epochs=1, batch_size=8, root_seed=2)
    st = stage1_train(corpus, sc1, model_config=CFG)
    p = tmp_path / "s1.ckpt"
    save_state(p, st, sc1)
    sc3 = StageConfig(stage=3, epochs=1, batch_size=4, root_seed=2)
    ret = generate_corpus(RETRIEVAL, 8, root_seed=4, unique_images=True)
    with pytest.raises(StageOrderError, match="stage-2"):
        stage3_train(ret, sc3, init=p)
    # the ablation escape hatch
    st3 = stage3_train(ret, sc3, init=p, allow_stage_skip=True)
    assert st3.step == 2


def test_stage_skip_flag_allows_scratch_training():
    sc = StageConfig(stage=2, epochs=1, batch_size=8,
                     learning_rate=1e-3, root_seed=2)
    st = stage2_train(small_corpus(16), sc, init=None, model_config=CFG,
                      allow_stage_skip=True)
    assert st.step == 2
    assert all(np.isfinite(m["total"]) for m in st.metrics)


# --- stage 2 mechanics --------------------------------------------------------

def _short_label_instance(max_len=3):
    rng = np.random.default_rng(0)
    while True:
        inst = gen_classification(rng)
        if len(inst.block_b_text) <= max_len:
            return inst


def test_stage2_first_prediction_row_is_bridge():
    # a short target is fully masked, so the first prediction comes from
    # the bridge hidden state itself
    inst = _short_label_instance()
    enc = build_layout(inst, 2, CB)
    plan = blockb_mask(enc.blockb_span, np.random.default_rng(1))
    assert plan.masked_positions[0] == enc.eos_pos + 1
    tokens, targets = apply_token_mask(enc.tokens, plan, MASK_ID)
    params = ModelParams.init(CFG, 0)
    h0 = embed_sequence(params, tokens, enc.patches, enc.layout)
    states = forward(params, h0, build_truncated(enc.layout), enc.layout)
    positions = sorted(targets)
    pred_rows = [p - 1 for p in positions]
    assert pred_rows[0] == enc.eos_pos
    npt.assert_array_equal(states.h.data[pred_rows[0]],
                           states.h.data[enc.eos_pos])
    rows = lm_logits(params, states, pred_rows)
    bridge = lm_logits(params, states, [enc.eos_pos])
    # same hidden row; logits equal up to summation order
    npt.assert_allclose(rows.data[0], bridge.data[0], atol=1e-12)


def test_stage2_block_a_states_ignore_b_masking():
    rng = np.random.default_rng(2)
    inst = gen_classification(rng)
    enc = build_layout(inst, 2, CB)
    params = ModelParams.init(CFG, 0)
    mask = build_truncated(enc.layout)

    masked = enc.tokens.copy()
    masked[enc.eos_pos + 1:] = MASK_ID
    outs = []
    for toks in (enc.tokens, masked):
        h0 = embed_sequence(params, toks, enc.patches, enc.layout)
        outs.append(forward(params, h0, mask, enc.layout).h.data)
    npt.assert_array_equal(outs[0][:enc.eos_pos + 1],
                           outs[1][:enc.eos_pos + 1])
    assert not np.array_equal(outs[0][enc.eos_pos + 1:],
                              outs[1][enc.eos_pos + 1:])


def test_stage2_smoke_loss_decreases(tmp_path):
    corpus = small_corpus(36)
    sc1 = StageConfig(stage=1, epochs=1, batch_size=12, learning_rate=1e-3,
                      root_seed=7)
    st1 = stage1_train(corpus, sc1, model_config=CFG)
    p = tmp_path / "s1.ckpt"
    save_state(p, st1, sc1)
    sc2 = StageConfig(stage=2, epochs=4, batch_size=12, learning_rate=1e-3,
                      root_seed=7)
    st2 = stage2_train(corpus, sc2, init=p)
    assert st2.metrics[-1]["mntp"] < st2.metrics[0]["mntp"]
    assert all(m["mae"] == 0.0 for m in st2.metrics)


# --- stage 3 mechanics -----------------------------------------------------

def test_stage3_duplicate_pair_ids_rejected():
    rng = np.random.default_rng(5)
    a = gen_retrieval(rng)
    b = gen_retrieval(rng)
    twin = TrainingInstance(RETRIEVAL, b.image, None, a.block_b_text,
                            a.pair_id)
    sc = StageConfig(stage=3, epochs=1, batch_size=2, root_seed=1)
    with pytest.raises(BatchConstructionError, match="pair ids"):
        stage3_train([a, twin], sc, init=None, model_config=CFG,
                     allow_stage_skip=True)


def test_stage3_updates_both_modality_embeddings():
    # shared towers: one step moves the patch projection (query side) and
    # the token embedding (target side)
    ret = generate_corpus(RETRIEVAL, 8, root_seed=6, unique_images=True)
    sc = StageConfig(stage=3, epochs=1, batch_size=8, learning_rate=1e-3,
                     root_seed=3)
    st = stage3_train(ret, sc, init=None, model_config=CFG,
                      allow_stage_skip=True)
    assert st.step == 1
    init = ModelParams.init(CFG, sc.root_seed)
    assert not np.array_equal(st.params["patch_proj"].data,
                              init["patch_proj"].data)
    assert not np.array_equal(st.params["tok_emb"].data,
                              init["tok_emb"].data)


def test_stage3_partial_batch_below_two_dropped():
    ret = generate_corpus(RETRIEVAL, 9, root_seed=8, unique_images=True)
    sc = StageConfig(stage=3, epochs=2, batch_size=4, learning_rate=1e-3,
                     root_seed=3)
    st = stage3_train(ret, sc, init=None, model_config=CFG,
                      allow_stage_skip=True)
    assert st.step == 4  # 9 -> chunks 4,4,1; the 1 is dropped


def test_stage3_smoke_separation_improves(tmp_path):
    # from a warmed-up and bridged model, the contrastive stage pulls the
    # matching pairs together: windowed diagonal-minus-off-diagonal
    # similarity is non-decreasing (median over seeds)
    mixed = small_corpus(48)
    ret = generate_corpus(RETRIEVAL, 32, root_seed=2, unique_images=True)
    finals, seps = [], []
    for seed in (1, 2, 3):
        sc1 = StageConfig(stage=1, epochs=2, batch_size=12,
                          learning_rate=1e-3, root_seed=seed)
        st1 = stage1_train(mixed, sc1, model_config=CFG)
        p1 = tmp_path / f"s1_{seed}.ckpt"
        save_state(p1, st1, sc1)
        sc2 = StageConfig(stage=2, epochs=2, batch_size=12,
                          learning_rate=1e-3, root_seed=seed)
        st2 = stage2_train(mixed, sc2, init=p1)
        p2 = tmp_path / f"s2_{seed}.ckpt"
        save_state(p2, st2, sc2)
        sc3 = StageConfig(stage=3, epochs=10, batch_size=8,
                          learning_rate=1e-3, root_seed=seed)
        st3 = stage3_train(ret, sc3, init=p2)
        finals.append(st3.metrics[-1]["infonce"] < st3.metrics[0]["infonce"])
        s = [m["sep"] for m in st3.metrics]
        seps.append([np.mean(s[i:i + 10]) for i in range(0, 40, 10)])
    assert all(finals)
    med = np.median(np.array(seps), axis=0)
    assert all(med[i + 1] >= med[i] - 1e-9 for i in range(3)), med


# --- metrics log ---------------------------------------------------------

def test_metrics_csv_format(tmp_path):
    p = tmp_path / "metrics.csv"
    sc = StageConfig(stage=1, epochs=2, batch_size=8, learning_rate=1e-3,
                     root_seed=4)
    st = stage1_train(small_corpus(16), sc, model_config=CFG,
                      metrics_path=p)
    with open(p, newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == st.step
    assert list(rows[0]) == ["step", "stage", "mntp", "mae", "infonce",
                             "total", "wall_ms"]
    assert [int(r["step"]) for r in rows] == list(range(1, st.step + 1))
    assert float(rows[0]["mntp"]) == st.metrics[0]["mntp"]


def test_metrics_append_only(tmp_path):
    p = tmp_path / "m.csv"
    append_metrics(p, [{"step": 1, "stage": 1, "mntp": 0.5, "mae": 0.1,
                        "infonce": 0.0, "total": 0.55, "wall_ms": 3.0}])
    append_metrics(p, [{"step": 2, "stage": 1, "mntp": 0.4, "mae": 0.1,
                        "infonce": 0.0, "total": 0.45, "wall_ms": 3.0,
                        "sep": 0.2}])
    with open(p, newline="") as f:
        rows = list(csv.DictReader(f))
    assert [r["step"] for r in rows] == ["1", "2"]
    assert "sep" not in rows[0]
