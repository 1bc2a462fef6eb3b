"""Command-line surface: corpus generation, staged training, retrieval
evaluation, ablations, mask-ratio sweeps, mask dumps, and the bridge probe.

Exit codes: 0 success, 1 usage or stage-ordering error, 2 data or
checkpoint error."""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .data import (DEFAULT_PATCH_DIM, DEFAULT_TABLE_SEED, META_TASKS,
                   VOCAB_WORDS, PatchCodebook, generate_corpus, read_corpus,
                   write_corpus)
from .errors import EosBridgeError, StageOrderError
from .evaluation import (ARM_NAMES, TrainingPlan, eos_probe,
                         evaluate_params, matched_attributes, run_ablation,
                         run_mask_sweep, true_attribute_words)
from .figures import render_metrics, render_report, render_sweep
from .masks import Role, SequenceLayout, build_truncated
from .model import ModelConfig
from .pipeline import (StageConfig, load_state, save_state, stage1_train,
                       stage2_train, stage3_train)
from .report import Report, config_fingerprint, reports_from_results, \
    write_report


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors by default; this surface uses 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _add_model_flags(p) -> None:
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--n-layers", type=int, default=2)
    p.add_argument("--n-heads", type=int, default=2)
    p.add_argument("--max-seq", type=int, default=64)


def _model_config(args, overrides=None) -> ModelConfig:
    kw = dict(d_model=args.d_model, n_layers=args.n_layers,
              n_heads=args.n_heads, vocab_size=len(VOCAB_WORDS),
              patch_dim=DEFAULT_PATCH_DIM, max_seq=args.max_seq,
              mae_decoder_layers=1)
    kw.update(overrides or {})
    return ModelConfig(**kw)


def _codebook(records, patch_dim: int = DEFAULT_PATCH_DIM) -> PatchCodebook:
    seeds = {r.table_seed for r in records} or {DEFAULT_TABLE_SEED}
    if len(seeds) > 1:
        raise EosBridgeError(f"corpus mixes codebook table seeds {sorted(seeds)}")
    return PatchCodebook(patch_dim, seed=seeds.pop())


def _int_list(text: str) -> list:
    return [int(x) for x in text.split(",") if x != ""]


def _float_list(text: str) -> list:
    return [float(x) for x in text.split(",") if x != ""]


def _plan(args) -> TrainingPlan:
    epochs = tuple(_int_list(args.epochs))
    lrs = tuple(_float_list(args.learning_rates))
    if len(epochs) != 3 or len(lrs) != 3:
        raise StageOrderError("--epochs and --learning-rates need one value "
                              "per stage, e.g. 2,2,4")
    return TrainingPlan(model=_model_config(args), epochs=epochs,
                        learning_rates=lrs, batch_size=args.batch_size,
                        blockb_ratio=args.mask_ratio_blockb,
                        temperature=args.temperature)


def _print_scores(arm: str, scores: dict) -> None:
    for task in sorted(scores):
        print(f"{arm:>20s}  {task:<16s} P@1 = {scores[task]:.4f}")
    agg = sum(scores.values()) / len(scores)
    print(f"{arm:>20s}  {'aggregate':<16s} P@1 = {agg:.4f}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, parser) -> int:
    if args.count < 0:
        parser.error("--count must be non-negative")
    records = generate_corpus(args.meta_task, args.count,
                              root_seed=args.seed, hard=args.hard_mode,
                              split=args.split,
                              unique_images=args.unique_images)
    write_corpus(args.out, records)
    print(f"wrote {len(records)} {args.meta_task} instances to {args.out}")
    return 0


_STAGE_FNS = {1: stage1_train, 2: stage2_train, 3: stage3_train}

_STAGE_FLAG_FIELDS = ("epochs", "batch_size", "learning_rate",
                      "mask_ratio_text", "mask_ratio_patch",
                      "mask_ratio_blockb", "text_weight", "mae_weight",
                      "temperature", "text_objective")


def cmd_train(args, parser) -> int:
    file_cfg = {}
    if args.config is not None:
        file_cfg = json.loads(Path(args.config).read_text())
    model_overrides = file_cfg.pop("model", {})
    kw = {"stage": args.stage}
    kw.update(file_cfg)
    for field in _STAGE_FLAG_FIELDS:
        v = getattr(args, field)
        if v is not None:
            kw[field] = v
    if args.seed is not None:
        kw["root_seed"] = args.seed
    cfg = StageConfig(**kw)
    records = read_corpus(args.corpus)
    codebook = _codebook(records)
    fn = _STAGE_FNS[args.stage]
    extra = {} if args.stage == 1 \
        else {"allow_stage_skip": args.allow_stage_skip}
    state = fn(records, cfg,
               model_config=None if args.init
               else _model_config(args, model_overrides),
               init=args.init, codebook=codebook,
               metrics_path=args.metrics, **extra)
    save_state(args.out, state, cfg)
    if args.metrics is not None:
        fig = Path(args.metrics).with_suffix(".png")
        render_metrics(args.metrics, fig)
        print(f"metrics: {args.metrics} ({fig.name} alongside)")
    last = state.metrics[-1] if state.metrics else {}
    print(f"stage {args.stage} done: {state.step} steps, "
          f"final loss {last.get('total', float('nan')):.4f} -> {args.out}")
    return 0


def cmd_eval(args, parser) -> int:
    model_cfg, state, meta = load_state(args.checkpoint)
    records = read_corpus(args.pool)
    if not records:
        raise EosBridgeError(f"no instances in {args.pool}")
    codebook = _codebook(records, model_cfg.patch_dim)
    scores = evaluate_params(state.params, records, codebook,
                             pool_size=args.pool_size,
                             pool_seed=args.pool_seed)
    stage_cfg = meta.get("stage_config", {})
    fp = config_fingerprint({"model": model_cfg.to_dict(),
                             "stage_config": stage_cfg,
                             "pool_size": args.pool_size,
                             "pool_seed": args.pool_seed})
    rep = Report(arm=Path(args.checkpoint).stem, task_scores=scores,
                 seeds=(int(stage_cfg.get("root_seed", 0)),),
                 config_hash=fp)
    write_report(args.out, [rep])
    fig = Path(args.out).with_suffix(".png")
    render_report(args.out, fig)
    _print_scores(rep.arm, scores)
    print(f"report: {args.out} ({fig.name} alongside)")
    return 0


def cmd_ablate(args, parser) -> int:
    arms = tuple(a.strip() for a in args.arms.split(",") if a.strip())
    for arm in arms:
        if arm not in ARM_NAMES:
            parser.error(f"unknown arm {arm!r}; choose from "
                         f"{', '.join(ARM_NAMES)}")
    seeds = tuple(_int_list(args.seeds))
    plan = _plan(args)
    pretrain = read_corpus(args.pretrain)
    contrastive = read_corpus(args.contrastive)
    eval_records = read_corpus(args.eval)
    codebook = _codebook(pretrain + contrastive + eval_records)
    results = run_ablation(arms, seeds, pretrain, contrastive, eval_records,
                           plan, pool_size=args.pool_size,
                           codebook=codebook, workdir=args.workdir)
    fp = config_fingerprint({"plan": plan.to_dict(),
                             "pool_size": args.pool_size})
    reports = reports_from_results(results, seeds, fp)
    write_report(args.out, reports)
    fig = Path(args.out).with_suffix(".png")
    render_report(args.out, fig)
    for rep in reports:
        _print_scores(rep.arm, rep.task_scores)
    print(f"report: {args.out} ({fig.name} alongside)")
    return 0


def cmd_sweep(args, parser) -> int:
    ratios = _float_list(args.ratios)
    if not ratios:
        parser.error("--ratios must name at least one value")
    seeds = tuple(_int_list(args.seeds))
    plan = _plan(args)
    pretrain = read_corpus(args.pretrain)
    contrastive = read_corpus(args.contrastive)
    eval_records = read_corpus(args.eval)
    codebook = _codebook(pretrain + contrastive + eval_records)
    results = run_mask_sweep(ratios, seeds, pretrain, contrastive,
                             eval_records, plan, pool_size=args.pool_size,
                             codebook=codebook, workdir=args.workdir)
    fp = config_fingerprint({"plan": plan.to_dict(),
                             "pool_size": args.pool_size})
    labeled = {f"ratio-{r:g}": scores for r, scores in results.items()}
    reports = reports_from_results(labeled, seeds, fp)
    write_report(args.out, reports)
    fig = Path(args.out).with_suffix(".png")
    render_sweep(args.out, fig)
    for rep in reports:
        _print_scores(rep.arm, rep.task_scores)
    print(f"report: {args.out} ({fig.name} alongside)")
    return 0


_SPEC_ROLES = {"A": Role.VISUAL_A, "V": Role.VISUAL_A, "T": Role.TEXT_A,
               "E": Role.EOS_BRIDGE, "EOS": Role.EOS_BRIDGE,
               "B": Role.TEXT_B, "P": Role.PAD, "PAD": Role.PAD}


def parse_layout_spec(spec: str) -> SequenceLayout:
    """``A:2,EOS,B:2`` -> role sequence; counts default to 1."""
    roles = []
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        name, _, count = part.partition(":")
        key = name.strip().upper()
        if key not in _SPEC_ROLES:
            raise EosBridgeError(f"unknown layout token {name!r}")
        try:
            n = int(count) if count else 1
        except ValueError:
            raise EosBridgeError(f"bad count in layout token {part!r}")
        if n < 1:
            raise EosBridgeError(f"bad count in layout token {part!r}")
        roles.extend([_SPEC_ROLES[key]] * n)
    return SequenceLayout(tuple(roles))


def cmd_dump_mask(args, parser) -> int:
    layout = parse_layout_spec(args.layout_spec)
    allowed = build_truncated(layout).allowed
    if args.format == "ascii":
        lines = [" ".join("1" if a else "0" for a in row) for row in allowed]
        text = "\n".join(lines) + "\n"
    else:  # plain portable graymap, 0 = forbidden, 255 = allowed
        n = allowed.shape[0]
        rows = [" ".join("255" if a else "0" for a in row) for row in allowed]
        text = f"P2\n{n} {n}\n255\n" + "\n".join(rows) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.format} mask to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_probe(args, parser) -> int:
    model_cfg, state, meta = load_state(args.checkpoint)
    record = generate_corpus("retrieval", 1, root_seed=args.image_seed,
                             hard=args.hard)[0]
    inst = record.instance
    codebook = PatchCodebook(state.params.cfg.patch_dim,
                             seed=record.table_seed)
    decoded = eos_probe(inst, state.params, codebook, length=args.length)
    words = [VOCAB_WORDS[t] if 0 <= t < len(VOCAB_WORDS) else f"<{t}>"
             for t in decoded]
    matched = matched_attributes(inst.image, decoded)
    print("image cells:", " | ".join(
        " ".join(filter(None, (inst.image.sizes[i] if inst.image.hard
                               else None, inst.image.colors[i],
                               inst.image.shapes[i])))
        for i in range(len(inst.image.shapes))))
    print("decoded    :", " ".join(words))
    print(f"matched    : {sorted(matched) or '(none)'} "
          f"of {sorted(true_attribute_words(inst.image))}")
    return 0


# ---------------------------------------------------------------------------
# parser assembly
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="eosbridge",
                     description="Staged multimodal embedding training at "
                                 "desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--meta-task", choices=META_TASKS + ("mixed",),
                   default="mixed")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hard-mode", action="store_true")
    p.add_argument("--split", default="pretrain",
                   choices=("pretrain", "contrastive", "eval"))
    p.add_argument("--unique-images", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--config", help="JSON stage-config overrides; a "
                                    "'model' key sizes fresh models")
    p.add_argument("--init", help="checkpoint to resume or warm-start from")
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", help="CSV loss log; a PNG renders alongside")
    p.add_argument("--allow-stage-skip", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--mask-ratio-text", type=float)
    p.add_argument("--mask-ratio-patch", type=float)
    p.add_argument("--mask-ratio-blockb", type=float)
    p.add_argument("--text-weight", type=float)
    p.add_argument("--mae-weight", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--text-objective", choices=("mntp", "mlm"))
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Precision@1 of a checkpoint on a pool "
                                    "corpus")
    p.add_argument("--pool", required=True, help="evaluation corpus file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="report CSV; a PNG renders "
                                                "alongside")
    p.add_argument("--pool-size", type=int, default=64)
    p.add_argument("--pool-seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    for name, fn in (("ablate", cmd_ablate), ("sweep", cmd_sweep)):
        p = sub.add_parser(name, help=f"run the {name} harness")
        if name == "ablate":
            p.add_argument("--arms", default=",".join(ARM_NAMES))
        else:
            p.add_argument("--ratios", default="0.2,0.5,0.7")
        p.add_argument("--seeds", default="0,1,2,3,4")
        p.add_argument("--pretrain", required=True)
        p.add_argument("--contrastive", required=True)
        p.add_argument("--eval", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--workdir", help="where arm checkpoints land "
                                         "(default: temp dir)")
        p.add_argument("--epochs", default="1,1,1",
                       help="per-stage epochs, e.g. 2,2,4")
        p.add_argument("--learning-rates", default="1e-3,1e-3,1e-3")
        p.add_argument("--batch-size", type=int, default=32)
        p.add_argument("--mask-ratio-blockb", type=float, default=0.70)
        p.add_argument("--temperature", type=float, default=0.02)
        p.add_argument("--pool-size", type=int, default=64)
        _add_model_flags(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("dump-mask", help="print a truncated attention mask")
    p.add_argument("--layout-spec", required=True,
                   help="e.g. A:2,EOS,B:2")
    p.add_argument("--format", choices=("ascii", "pgm"), default="ascii")
    p.add_argument("--out")
    p.set_defaults(func=cmd_dump_mask)

    p = sub.add_parser("probe", help="greedy bridge reconstruction of a "
                                     "seeded image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image-seed", type=int, required=True)
    p.add_argument("--length", type=int, default=6)
    p.add_argument("--hard", action="store_true")
    p.set_defaults(func=cmd_probe)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except StageOrderError as e:
        print(f"eosbridge: error: {e}", file=sys.stderr)
        return 1
    except EosBridgeError as e:
        print(f"eosbridge: error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"eosbridge: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
