"""Command-line entry point.

Subcommands map one-to-one onto the experiment protocols: gen-data,
pretrain, adapt (dapt/tapt), finetune (strategies and baselines), eval
(MLM loss, classification, ensemble), sweep, gradcheck, and census.
Reports are written as key=value files plus CSV tables, with matching PNG
figures rendered alongside.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (Vocab, batch_encode, default_domain_specs,
                   gen_classification_task, gen_domain_corpus, mask_tokens,
                   read_task_files, split_corpus, write_task_files)
from .encoder import EncoderConfig, EncoderModel
from .errors import (CheckpointError, ConfigError, DataError,
                     DivergenceError, GradientCheckError)
from .fusion import STRATEGIES, VARIANTS, FusionSpec
from .model import (LogitsFusionModel, MemoryAugmentedModel, ensemble_predict,
                    fusion_added_trainable, param_census)
from .reporting import (ensure_dir, save_bars_png, save_curve_png, write_csv,
                        write_kv)
from .training import (TrainConfig, accuracy_score, adapt, aggregate_sweep,
                       equal_interval_pairs, eval_mlm_loss,
                       evaluate_classification, finetune_classify, macro_f1,
                       micro_f1, mlm_grad_check, multi_seed_reports,
                       pretrain_mlm, quarter_layers, sweep_fused)

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_DIVERGED = 4
EXIT_CHECKPOINT = 5
EXIT_GRADCHECK = 6


def _read_lines(path: str) -> list:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]


def _write_lines(path: str, lines) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")


def _load_vocab(path: str) -> Vocab:
    return Vocab(_read_lines(path))


def _strategy_name(flag: str) -> str:
    return flag.replace("-", "_")


def _fusion_spec_from_args(args) -> FusionSpec:
    return FusionSpec(strategy=_strategy_name(args.strategy),
                      variant=args.variant, dst=args.dst, split=args.split,
                      dst_low=args.dst_low, dst_high=args.dst_high)


def _train_config(args, seed=None) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                       lr=args.lr, adam_beta1=args.adam_beta1,
                       adam_beta2=args.adam_beta2, adam_eps=args.adam_epsilon,
                       seed=args.seed if seed is None else seed,
                       mask_prob=args.mask_prob, dropout=args.dropout,
                       max_steps=args.max_steps)


def _encoder_config(args, vocab_size: int) -> EncoderConfig:
    return EncoderConfig(num_layers=args.layers, d_model=args.d_model,
                         num_heads=args.heads, d_ff=args.d_ff,
                         vocab_size=vocab_size, max_seq_len=args.max_seq_len)


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = ensure_dir(args.out_dir)
    specs = default_domain_specs(num_tokens=args.num_tokens,
                                 overlap=args.overlap, seed=args.seed,
                                 doc_len=(args.doc_len[0], args.doc_len[1]))
    vocab_path = os.path.join(out, "vocab.txt")
    _write_lines(vocab_path, specs["general"].tokens)
    manifest = {"seed": args.seed, "num_tokens": args.num_tokens,
                "overlap": args.overlap, "docs_per_domain": args.docs}
    for name, spec in specs.items():
        docs = gen_domain_corpus(spec, args.docs)
        train, test = split_corpus(docs, train_frac=0.7, seed=args.seed)
        _write_lines(os.path.join(out, f"{name}.train.txt"), train)
        _write_lines(os.path.join(out, f"{name}.test.txt"), test)
        manifest[f"{name}.train_docs"] = len(train)
        manifest[f"{name}.test_docs"] = len(test)
        print(f"{name}: {len(train)} train docs, {len(test)} test docs")
    task = gen_classification_task(specs["general"], specs["domain_a"],
                                   num_examples=args.task_examples,
                                   num_classes=args.classes, seed=args.seed,
                                   signal=args.signal)
    write_task_files(task, os.path.join(out, "task"))
    manifest["task.classes"] = task.num_classes
    for split in ("train", "dev", "test"):
        manifest[f"task.{split}_examples"] = len(task.split(split))
    print(f"task: {len(task.train)} train / {len(task.dev)} dev / "
          f"{len(task.test)} test examples, {task.num_classes} classes")
    write_kv(os.path.join(out, "gen_data_report.kv"), manifest)
    return 0


def cmd_pretrain(args) -> int:
    vocab = _load_vocab(args.vocab)
    corpus = _read_lines(args.corpus)
    config = _encoder_config(args, len(vocab))
    model = EncoderModel(config, vocab, seed=args.seed)
    curve = pretrain_mlm(model, corpus, _train_config(args))
    save_checkpoint(model, args.out)
    report_dir = ensure_dir(args.report_dir)
    write_kv(os.path.join(report_dir, "pretrain_report.kv"),
             {"steps": len(curve), "final_loss": f"{curve[-1]:.6f}",
              "seed": args.seed, "checkpoint": args.out})
    write_csv(os.path.join(report_dir, "pretrain_curve.csv"), ["step", "loss"],
              list(enumerate(curve, 1)))
    save_curve_png(os.path.join(report_dir, "pretrain_curve.png"),
                   {"train": curve}, title="MLM pretraining loss")
    print(f"pretrained {len(curve)} steps, final loss {curve[-1]:.4f}")
    return 0


def cmd_adapt(args) -> int:
    model = load_checkpoint(args.checkpoint)
    if args.mode == "tapt":
        if not args.task:
            raise ConfigError("tapt needs --task (it trains on task text)")
        corpus = [ex.text for ex in read_task_files(args.task).train]
    else:
        if not args.corpus:
            raise ConfigError("dapt needs --corpus")
        corpus = _read_lines(args.corpus)
    curve = adapt(model, corpus, _train_config(args), mode=args.mode)
    save_checkpoint(model, args.out)
    report_dir = ensure_dir(args.report_dir)
    write_kv(os.path.join(report_dir, f"{args.mode}_report.kv"),
             {"mode": args.mode, "steps": len(curve),
              "final_loss": f"{curve[-1]:.6f}", "checkpoint": args.out})
    write_csv(os.path.join(report_dir, f"{args.mode}_curve.csv"),
              ["step", "loss"], list(enumerate(curve, 1)))
    save_curve_png(os.path.join(report_dir, f"{args.mode}_curve.png"),
                   {args.mode: curve}, title=f"{args.mode.upper()} loss")
    print(f"{args.mode} finished: {len(curve)} steps, final loss "
          f"{curve[-1]:.4f}")
    return 0


def _general_checkpoint(args):
    if not args.general_checkpoint:
        raise ConfigError("this mode needs --general-checkpoint")
    return load_checkpoint(args.general_checkpoint)


def _build_finetune_model(args, task):
    backbone = load_checkpoint(args.checkpoint)
    if isinstance(backbone, MemoryAugmentedModel):
        # The header owns the fusion spec; flags that disagree are reported.
        if args.strategy != "none" and \
                _strategy_name(args.strategy) != backbone.fusion.strategy:
            print(f"warning: --strategy {args.strategy} conflicts with the "
                  f"checkpoint header ({backbone.fusion.strategy}); "
                  f"using the header", file=sys.stderr)
        return backbone
    if not isinstance(backbone, EncoderModel):
        raise ConfigError("--checkpoint must hold an encoder or fused model")
    if args.baseline == "logits-fusion":
        general = _general_checkpoint(args)
        return LogitsFusionModel(general, backbone, task.num_classes,
                                 args.classification_layers, seed=args.seed)
    if args.strategy == "none":
        return backbone
    general = _general_checkpoint(args)
    if not isinstance(general, EncoderModel):
        raise ConfigError("--general-checkpoint must hold a plain encoder")
    spec = _fusion_spec_from_args(args)
    return MemoryAugmentedModel(general, backbone, spec,
                                frozen=not args.no_frozen, seed=args.seed)


def cmd_finetune(args) -> int:
    task = read_task_files(args.task)
    seeds = list(range(args.seed, args.seed + args.seeds))
    report_dir = ensure_dir(args.report_dir)
    last = {}

    def run_one(seed):
        model = _build_finetune_model(replace_seed(args, seed), task)
        report, history = finetune_classify(
            model, task, _train_config(args, seed=seed),
            num_head_layers=args.classification_layers)
        last["model"] = model
        last["history"] = history
        return report

    outcome = multi_seed_reports(run_one, seeds)
    if args.out and isinstance(last["model"],
                               (EncoderModel, MemoryAugmentedModel)):
        save_checkpoint(last["model"], args.out)
    kv = dict(outcome["summary"])
    kv.update({"seeds": ",".join(str(s) for s in seeds),
               "strategy": args.strategy, "variant": args.variant,
               "baseline": args.baseline})
    write_kv(os.path.join(report_dir, "finetune_report.kv"), kv)
    write_csv(os.path.join(report_dir, "finetune_seeds.csv"),
              ["seed", "accuracy", "macro_f1", "micro_f1"],
              [(r.seed, r.accuracy, r.macro_f1, r.micro_f1)
               for r in outcome["reports"]])
    history = last["history"]
    save_curve_png(os.path.join(report_dir, "finetune_curve.png"),
                   {"train_loss": [h["train_loss"] for h in history],
                    "dev_macro_f1": [h["dev_macro_f1"] for h in history]},
                   xlabel="epoch", ylabel="value",
                   title="fine-tuning (last seed)")
    for key in ("macro_f1_mean", "macro_f1_std", "accuracy_mean"):
        if key in kv:
            print(f"{key}={kv[key]:.4f}")
    return 0


def replace_seed(args, seed):
    clone = argparse.Namespace(**vars(args))
    clone.seed = seed
    return clone


def cmd_eval(args) -> int:
    report_dir = ensure_dir(args.report_dir)
    kv = {}
    if args.ensemble:
        task = read_task_files(args.task)
        model_a = load_checkpoint(args.ensemble[0])
        model_b = load_checkpoint(args.ensemble[1])
        y_true, y_pred = [], []
        for start in range(0, len(task.test), args.batch_size):
            chunk = task.test[start:start + args.batch_size]
            ids, pad = batch_encode([ex.text for ex in chunk],
                                    model_a.vocab, model_a.config.max_seq_len)
            probs = ensemble_predict(model_a, model_b, ids, pad)
            y_pred.extend(np.argmax(probs, axis=1).tolist())
            y_true.extend(ex.label for ex in chunk)
        kv["ensemble.accuracy"] = f"{accuracy_score(y_true, y_pred):.6f}"
        kv["ensemble.macro_f1"] = \
            f"{macro_f1(y_true, y_pred, task.num_classes):.6f}"
        kv["ensemble.micro_f1"] = \
            f"{micro_f1(y_true, y_pred, task.num_classes):.6f}"
    else:
        model = load_checkpoint(args.checkpoint)
        if args.mlm:
            losses = {}
            for entry in args.corpus:
                name, _, path = entry.partition("=")
                if not path:
                    raise ConfigError("--corpus entries look like name=path")
                losses[name] = eval_mlm_loss(model, _read_lines(path),
                                             eval_seed=args.eval_seed)
                kv[f"mlm_loss.{name}"] = f"{losses[name]:.6f}"
            if losses:
                save_bars_png(os.path.join(report_dir, "eval_mlm.png"),
                              list(losses), list(losses.values()),
                              ylabel="MLM loss", title="held-out MLM loss")
        if args.task and not args.mlm:
            task = read_task_files(args.task)
            metrics = evaluate_classification(model, task.test)
            kv.update({k: f"{v:.6f}" for k, v in metrics.items()})
    write_kv(os.path.join(report_dir, "eval_report.kv"), kv)
    for key, value in kv.items():
        print(f"{key}={value}")
    return 0


def cmd_sweep(args) -> int:
    general = load_checkpoint(args.general_checkpoint)
    backbone = load_checkpoint(args.checkpoint)
    task = read_task_files(args.task)
    family = _strategy_name(args.family)
    depth = backbone.config.num_layers
    if args.layers:
        if family == "chunk_gated":
            assignments = []
            for pair in args.layers.split(";"):
                low, high = pair.split(",")
                assignments.append((int(low), int(high)))
        else:
            assignments = [int(v) for v in args.layers.split(",")]
    elif family == "chunk_gated":
        assignments = equal_interval_pairs(depth)
    else:
        assignments = quarter_layers(depth)
    seeds = list(range(args.seed, args.seed + args.seeds))
    rows = sweep_fused(general, backbone, family, assignments, task,
                       _train_config(args), seeds, variant=args.variant)
    report_dir = ensure_dir(args.report_dir)
    write_csv(os.path.join(report_dir, "sweep_cells.csv"),
              ["assignment", "seed", "accuracy", "macro_f1", "micro_f1"],
              [(r.assignment, r.seed, r.accuracy, r.macro_f1, r.micro_f1)
               for r in rows])
    agg = aggregate_sweep(rows)
    write_csv(os.path.join(report_dir, "sweep_summary.csv"),
              ["assignment", "macro_f1_mean", "macro_f1_std"], agg)
    save_bars_png(os.path.join(report_dir, "sweep_summary.png"),
                  [a for a, _, _ in agg], [m for _, m, _ in agg],
                  errors=[s for _, _, s in agg], ylabel="macro-F1",
                  title=f"{args.family} layer sweep")
    for assignment, mean, std in agg:
        print(f"{assignment}: macro_f1 {mean:.4f} +/- {std:.4f}")
    return 0


def _tiny_gradcheck_batch(vocab, max_seq_len, seed):
    rng = np.random.default_rng(seed)
    texts = [" ".join(rng.choice(vocab.content_tokens, size=6)),
             " ".join(rng.choice(vocab.content_tokens, size=5))]
    ids, pad = batch_encode(texts, vocab, max_seq_len)
    return mask_tokens(ids, pad, vocab, mask_prob=0.3, seed=seed)


def cmd_gradcheck(args) -> int:
    vocab = Vocab([f"w{i:03d}" for i in range(20)])
    config = _encoder_config(args, len(vocab))
    batch = _tiny_gradcheck_batch(vocab, config.max_seq_len, args.seed)
    strategies = (list(STRATEGIES) if args.strategy == "all"
                  else [_strategy_name(args.strategy)])
    variants = (list(VARIANTS) if args.variant == "all" else [args.variant])
    report_dir = ensure_dir(args.report_dir)
    rows = []
    failed = []
    for strategy in strategies:
        for variant in variants:
            general = EncoderModel(config, vocab, seed=args.seed)
            domain = EncoderModel(config, vocab, seed=args.seed + 1)
            fused = MemoryAugmentedModel(general, domain,
                                         FusionSpec(strategy, variant),
                                         seed=args.seed)
            try:
                report = mlm_grad_check(fused, batch,
                                        samples_per_param=args.samples,
                                        seed=args.seed,
                                        tolerance=args.tolerance)
                worst = max(report.values())
                status = "ok"
            except GradientCheckError as exc:
                failed.append(f"{strategy}/{variant}: {exc}")
                worst, status = float("nan"), "FAIL"
            rows.append((strategy, variant, f"{worst:.3e}", status))
            print(f"gradcheck {strategy}/{variant}: worst rel err "
                  f"{worst:.3e} [{status}]")
    write_csv(os.path.join(report_dir, "gradcheck.csv"),
              ["strategy", "variant", "worst_rel_err", "status"], rows)
    if failed:
        raise GradientCheckError("; ".join(failed))
    return 0


def cmd_census(args) -> int:
    vocab = Vocab([f"w{i:03d}" for i in range(20)])
    config = _encoder_config(args, len(vocab))
    general = EncoderModel(config, vocab, seed=args.seed)
    domain = EncoderModel(config, vocab, seed=args.seed + 1)
    bare_trainable = domain.store.num_params(trainable=True)
    fused = MemoryAugmentedModel(general, domain,
                                 _fusion_spec_from_args(args),
                                 seed=args.seed)
    rows = param_census(fused)
    added = fusion_added_trainable(fused)
    report_dir = ensure_dir(args.report_dir)
    write_csv(os.path.join(report_dir, "census.csv"),
              ["component", "trainable", "frozen"], rows)
    for component, trainable, frozen in rows:
        print(f"{component}: trainable={trainable} frozen={frozen}")
    print(f"bare domain encoder trainable={bare_trainable}")
    print(f"+{added} trainable")
    write_kv(os.path.join(report_dir, "census.kv"),
             {"strategy": args.strategy, "variant": args.variant,
              "added_trainable": added,
              "bare_trainable": bare_trainable})
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_model_flags(p):
    p.add_argument("--layers", type=int, default=6)
    p.add_argument("--d-model", type=int, default=32)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--d-ff", type=int, default=64)
    p.add_argument("--max-seq-len", type=int, default=32)


def _add_train_flags(p):
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--adam-epsilon", type=float, default=1e-8)
    p.add_argument("--adam-beta1", type=float, default=0.9)
    p.add_argument("--adam-beta2", type=float, default=0.999)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mask-prob", type=float, default=0.15)
    p.add_argument("--dropout", type=float, default=0.0,
                   help="classification-head dropout")
    p.add_argument("--max-steps", type=int, default=0)


def _add_fusion_flags(p):
    p.add_argument("--strategy", default="none",
                   choices=["none", "single", "multi", "gated", "chunk-gated"])
    p.add_argument("--variant", default="memory",
                   choices=list(VARIANTS))
    p.add_argument("--dst", type=int, default=None)
    p.add_argument("--split", type=int, default=None)
    p.add_argument("--dst-low", type=int, default=None)
    p.add_argument("--dst-high", type=int, default=None)
    p.add_argument("--no-frozen", action="store_true",
                   help="unfreeze the general side (ablation)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="memaug",
        description="memory-augmented encoder laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic corpora and task")
    p.add_argument("--out-dir", default="data")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-tokens", type=int, default=60)
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--docs", type=int, default=300)
    p.add_argument("--doc-len", type=int, nargs=2, default=[12, 24])
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--task-examples", type=int, default=240)
    p.add_argument("--signal", type=float, default=1.0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="MLM-pretrain a fresh encoder")
    p.add_argument("--vocab", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report-dir", default="reports")
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="continue MLM training (dapt/tapt)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus")
    p.add_argument("--task", help="task prefix; tapt trains on its train text")
    p.add_argument("--mode", choices=["dapt", "tapt"], default="dapt")
    p.add_argument("--out", required=True)
    p.add_argument("--report-dir", default="reports")
    _add_train_flags(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("finetune", help="classification fine-tuning")
    p.add_argument("--checkpoint", required=True,
                   help="backbone encoder checkpoint")
    p.add_argument("--general-checkpoint")
    p.add_argument("--task", required=True, help="task file prefix")
    p.add_argument("--baseline", choices=["none", "logits-fusion"],
                   default="none")
    p.add_argument("--classification-layers", type=int, choices=[1, 2],
                   default=1)
    p.add_argument("--seeds", type=int, default=1,
                   help="number of consecutive seeds to run")
    p.add_argument("--out", help="checkpoint path for the last seed's model")
    p.add_argument("--report-dir", default="reports")
    _add_fusion_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--mlm", action="store_true")
    p.add_argument("--corpus", action="append", default=[],
                   metavar="NAME=PATH")
    p.add_argument("--task")
    p.add_argument("--ensemble", nargs=2, metavar=("CKPT_A", "CKPT_B"))
    p.add_argument("--eval-seed", type=int, default=123457)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--report-dir", default="reports")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="layer-selection sweep")
    p.add_argument("--general-checkpoint", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--family", required=True,
                   choices=["single", "gated", "chunk-gated"])
    p.add_argument("--variant", default="memory", choices=list(VARIANTS))
    p.add_argument("--layers",
                   help="comma list, or 'low,high;low,high' pairs for chunks;"
                        " default: quarter depths / equal-interval pairs")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--report-dir", default="reports")
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--strategy", default="all",
                   choices=["all", "single", "multi", "gated", "chunk-gated"])
    p.add_argument("--variant", default="all",
                   choices=["all"] + list(VARIANTS))
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--samples", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report-dir", default="reports")
    _add_model_flags(p)
    p.set_defaults(func=cmd_gradcheck, layers=2, d_model=16, d_ff=32,
                   max_seq_len=16)

    p = sub.add_parser("census", help="parameter census for a fusion setup")
    p.add_argument("--strategy", default="single",
                   choices=["single", "multi", "gated", "chunk-gated"])
    p.add_argument("--variant", default="memory", choices=list(VARIANTS))
    p.add_argument("--dst", type=int, default=None)
    p.add_argument("--split", type=int, default=None)
    p.add_argument("--dst-low", type=int, default=None)
    p.add_argument("--dst-high", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report-dir", default="reports")
    _add_model_flags(p)
    p.set_defaults(func=cmd_census)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError) as exc:
        print(f"error: code=config detail={exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: code=missing-file detail={exc}", file=sys.stderr)
        return EXIT_MISSING
    except DivergenceError as exc:
        print(f"error: code=divergence detail={exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointError as exc:
        print(f"error: code=checkpoint detail={exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except GradientCheckError as exc:
        print(f"error: code=gradcheck detail={exc}", file=sys.stderr)
        return EXIT_GRADCHECK


if __name__ == "__main__":
    raise SystemExit(main())
