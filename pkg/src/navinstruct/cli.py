"""navinstruct command-line entry point.

One verb per pipeline phase::

    navinstruct prepare --out data --maps 3 --demos 500
    navinstruct augment --dataset data
    navinstruct train-irl --dataset data --checkpoint-dir ck
    navinstruct train-seq2seq --dataset data --checkpoint-dir ck [--no-aligner]
    navinstruct train-lm --dataset data --checkpoint-dir ck
    navinstruct generate --map data/maps/map0.map --start 0,0,N --goal 3,2 --checkpoint-dir ck
    navinstruct evaluate --dataset data --checkpoint-dir ck [--ablation no_aligner]
    navinstruct export-figures --dataset data --checkpoint-dir ck --out figs
    navinstruct gradcheck
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path as FsPath

from . import cas
from . import corpus
from . import pipeline as pl
from . import worldmodel as wm

log = logging.getLogger("navinstruct")

SPLIT_FILE = "split.json"
PAIRS_FILE = "train_pairs.jsonl"


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON file overriding pipeline defaults")
    p.add_argument("--seed", type=int)
    p.add_argument("--beam-width", type=int, dest="beam_width")
    p.add_argument("--kc", type=int, dest="k_c")
    p.add_argument("--pt", type=float, dest="p_t")
    p.add_argument("--lt", type=float, dest="l_t")
    p.add_argument("--checkpoint-dir", dest="checkpoint_dir")
    p.add_argument("--dataset")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _config(args) -> pl.PipelineConfig:
    keys = ("seed", "beam_width", "k_c", "p_t", "l_t", "checkpoint_dir", "dataset")
    return pl.PipelineConfig.from_file(args.config, **{k: getattr(args, k, None) for k in keys})


def _write(path: FsPath, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


# --------------------------------------------------------------------------
# dataset helpers

def load_split(cfg: pl.PipelineConfig) -> tuple[dict, corpus.DatasetSplit]:
    root = FsPath(cfg.dataset)
    maps = corpus.load_maps(root)
    demos = corpus.load_dataset(root)
    split_file = root / SPLIT_FILE
    if split_file.exists():
        parts = json.loads(split_file.read_text(encoding="utf-8"))
        where = {p: k for k, name in enumerate(("train", "validation", "test")) for p in parts[name]}
        buckets = ([], [], [])
        for d in demos:
            buckets[where.get(d.paragraph_id, 0)].append(d)
        return maps, corpus.DatasetSplit(*buckets, ratios=tuple(parts.get("ratios", corpus.DEFAULT_RATIOS)))
    return maps, corpus.split(demos, seed=cfg.seed)


def _lexicon(cfg: pl.PipelineConfig) -> corpus.Lexicon:
    p = FsPath(cfg.dataset) / "lexicon.json"
    return corpus.Lexicon.load(p) if p.exists() else corpus.Lexicon.default()


def _read_pairs(path: FsPath):
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            out.append((cas.parse_cas(rec["cas"]), rec["words"].split()))
    return out


def train_pairs(cfg: pl.PipelineConfig, split: corpus.DatasetSplit):
    stored = FsPath(cfg.dataset) / PAIRS_FILE
    if stored.exists():
        return _read_pairs(stored), corpus.pairs_of(split.validation)
    return pl.training_pairs(split, _lexicon(cfg))


# --------------------------------------------------------------------------
# verbs

def cmd_prepare(args, cfg) -> int:
    out = FsPath(args.out)
    if args.source:
        maps, demos = corpus.load_maps(args.source), corpus.load_dataset(args.source)
    else:
        maps = {f"map{i}": corpus.generate_map(cfg.seed * 1000 + i, args.width, args.height) for i in range(args.maps)}
        demos = corpus.synth_corpus(maps, args.demos, seed=cfg.seed)
    corpus.save_dataset(out, maps, demos, corpus.Lexicon.default())
    sp = corpus.split(demos, seed=cfg.seed)
    parts = {name: sorted({d.paragraph_id for d in getattr(sp, name)}) for name in ("train", "validation", "test")}
    parts["ratios"] = list(sp.ratios)
    parts["seed"] = cfg.seed
    _write(out / SPLIT_FILE, json.dumps(parts, indent=1))
    print(f"{len(maps)} maps, {len(demos)} demonstrations -> {out} "
          f"(train/val/test demos {len(sp.train)}/{len(sp.validation)}/{len(sp.test)})")
    return 0


def cmd_augment(args, cfg) -> int:
    _, sp = load_split(cfg)
    original = corpus.pairs_of(sp.train)
    pairs = corpus.augment(original, _lexicon(cfg), combinatorial=args.combinatorial)
    lines = [json.dumps({"cas": cas.serialize_cas(c), "words": " ".join(w)}) for c, w in pairs]
    _write(FsPath(cfg.dataset) / PAIRS_FILE, "\n".join(lines) + "\n")
    print(f"{len(original)} training pairs -> {len(pairs)} after augmentation")
    return 0


def cmd_train_irl(args, cfg) -> int:
    maps, sp = load_split(cfg)
    model = pl.train_irl_phase(sp.train, maps, cfg)
    ck = FsPath(cfg.checkpoint_dir)
    ck.mkdir(parents=True, exist_ok=True)
    from . import content_select as cs

    cs.save_irl(model, ck / pl.IRL_FILE)
    report = {"segments": len(pl.irl_demonstrations(sp.train, maps)[0]), "actions": len(model.actions),
              "database": len(model.action_db), "converged": model.converged,
              "grad_norm": model.grad_norm, "feature_gap": model.feature_gap,
              "mi_weights": [float(w) for w in model.mi_weights]}
    _write(ck / "irl_report.json", json.dumps(report, indent=1))
    print(f"IRL: {report['segments']} segments, {report['actions']} property vectors, "
          f"feature gap {model.feature_gap:.2e}, converged={model.converged}")
    return 0


def cmd_train_seq2seq(args, cfg) -> int:
    _, sp = load_split(cfg)
    pairs, val = train_pairs(cfg, sp)
    if args.epochs:
        cfg.epochs = args.epochs
    result = pl.train_seq2seq_phase(pairs, val, cfg, aligner=not args.no_aligner)
    ck = FsPath(cfg.checkpoint_dir)
    ck.mkdir(parents=True, exist_ok=True)
    name = pl.SEQ2SEQ_ABLATED_FILE if args.no_aligner else pl.SEQ2SEQ_FILE
    result.model.save(ck / name)
    log_file = ck / (FsPath(name).stem + "_log.json")
    _write(log_file, json.dumps({"train_nll": result.train_loss, "val_nll": result.val_loss,
                                 "best_epoch": result.best_epoch, "seconds": result.seconds,
                                 "pairs": len(pairs)}, indent=1))
    print(f"seq2seq{' (no aligner)' if args.no_aligner else ''}: {len(pairs)} pairs, "
          f"final train NLL {result.train_loss[-1]:.4f}, best epoch {result.best_epoch + 1}, "
          f"{result.seconds:.0f} s -> {ck / name}")
    return 0


def cmd_train_lm(args, cfg) -> int:
    from . import realize

    _, sp = load_split(cfg)
    pairs, val = train_pairs(cfg, sp)
    vocab = None
    s2s = FsPath(cfg.checkpoint_dir) / pl.SEQ2SEQ_FILE
    if s2s.exists():
        vocab = realize.Seq2SeqModel.load(s2s).word_vocab
    if args.epochs:
        cfg.lm_epochs = args.epochs
    result = pl.train_lm_phase([w for _, w in pairs], [w for _, w in val], cfg, vocab)
    ck = FsPath(cfg.checkpoint_dir)
    ck.mkdir(parents=True, exist_ok=True)
    result.model.save(ck / pl.LM_FILE)
    _write(ck / "lm_log.json", json.dumps({"train_ppl": result.train_ppl, "val_ppl": result.val_ppl,
                                           "seconds": result.seconds}, indent=1))
    for k, v in enumerate(result.val_ppl, 1):
        print(f"lm epoch {k}: validation perplexity {v:.3f}")
    print(f"language model -> {ck / pl.LM_FILE}")
    return 0


def _goal(text: str):
    parts = [p.strip() for p in text.split(",")]
    if len(parts) == 3:
        return wm.Pose.parse(text)
    if len(parts) == 2:
        return (int(parts[0]), int(parts[1]))
    raise ValueError(f"bad goal {text!r}; expected 'x,y' or 'x,y,H'")


def cmd_generate(args, cfg) -> int:
    world = wm.load_map(FsPath(args.map).read_text(encoding="utf-8"))
    models = pl.load_models(cfg.checkpoint_dir)
    start = time.perf_counter()
    gen = pl.generate(models, world, wm.Pose.parse(args.start), _goal(args.goal), cfg)
    seconds = time.perf_counter() - start
    if gen.notice:
        print(f"notice: {gen.notice}", file=sys.stderr)
    for s in gen.segments:
        if s.fallback:
            print(f"warning: segment {s.index}: {s.fallback} (flagged)", file=sys.stderr)
    print(gen.text)
    if args.trace:
        print(gen.trace(), end="", file=sys.stderr)
        print(f"generation took {seconds:.2f} s", file=sys.stderr)
    return 0


def cmd_evaluate(args, cfg) -> int:
    _, sp = load_split(cfg)
    test = corpus.pairs_of(getattr(sp, args.split))
    if args.seen_only:
        pairs, _ = train_pairs(cfg, sp)
        test = pl.seen_pattern_pairs(test, pairs)
    need = () if args.ablation == "references" else (
        ("seq2seq_ablated",) if args.ablation == "no_aligner" else ("seq2seq",))
    models = pl.load_models(cfg.checkpoint_dir, need=need)
    report = pl.evaluate(models, test, cfg, args.ablation)
    print(report.table(), end="")
    if args.json:
        _write(FsPath(args.json), report.to_json())
    return 0


def cmd_export_figures(args, cfg) -> int:
    from . import plotting, realize

    out = FsPath(args.out)
    out.mkdir(parents=True, exist_ok=True)
    maps, sp = load_split(cfg)
    models = pl.load_models(cfg.checkpoint_dir, need=("seq2seq",))
    pairs = corpus.pairs_of(sp.test or sp.train)[: args.samples]
    for k, (cmd, words) in enumerate(pairs):
        hyp = realize.greedy_decode(models.seq2seq, cmd)
        export = realize.export_alignment(models.seq2seq, cmd, hyp)
        _write(out / f"alignment_{k}.tsv", realize.alignment_to_text(export))
        plotting.plot_alignment(export, out / f"alignment_{k}.png", cas.serialize_cas(cmd))
    demos = sp.test or sp.train
    for map_id, world in sorted(maps.items()):
        sample = next((d for d in demos if d.map_id == map_id), None)
        plotting.plot_map(world, out / f"{map_id}.svg", sample.path if sample else None, map_id)
    curves = {}
    for name in ("seq2seq_log.json", "seq2seq_no_aligner_log.json"):
        p = FsPath(cfg.checkpoint_dir) / name
        if p.exists():
            curves[name[:-9]] = json.loads(p.read_text())["train_nll"]
    if curves:
        plotting.plot_curves(curves, out / "training_nll.png", "train NLL per token")
    reports = {}
    for p in sorted(FsPath(cfg.checkpoint_dir).glob("bleu_*.json")):
        rep = json.loads(p.read_text())
        reports[p.stem[5:]] = (rep["sentence_bleu_mean"], rep["corpus_bleu"])
    if reports:
        plotting.plot_bleu(reports, out / "bleu.png")
    print(f"{len(pairs)} alignment matrices and {len(maps)} map drawings -> {out}")
    return 0


def cmd_gradcheck(args, cfg) -> int:
    from . import gradchecks

    ok = True
    for check in gradchecks.run_all():
        ok &= check.ok
        print(f"{'PASS' if check.ok else 'FAIL'}  {check.name:<26} max rel. error {check.max_error:.2e} "
              f"(< {check.tolerance:.0e})")
    return 0 if ok else 1


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="navinstruct", description="Navigational instruction generation.",
                                     parents=[common])
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("prepare", parents=[common], help="synthesise (or re-validate) a dataset and split it")
    p.add_argument("--out", required=True)
    p.add_argument("--source", help="existing dataset directory to validate and re-split")
    p.add_argument("--maps", type=int, default=3)
    p.add_argument("--demos", type=int, default=500)
    p.add_argument("--width", type=int, default=6)
    p.add_argument("--height", type=int, default=6)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("augment", parents=[common], help="augment the training pairs through the lexicon")
    p.add_argument("--combinatorial", action="store_true")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train-irl", parents=[common], help="fit the content-selection policy")
    p.set_defaults(func=cmd_train_irl)

    p = sub.add_parser("train-seq2seq", parents=[common], help="train the surface realiser")
    p.add_argument("--no-aligner", action="store_true")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train_seq2seq)

    p = sub.add_parser("train-lm", parents=[common], help="train the ranking language model")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train_lm)

    p = sub.add_parser("generate", parents=[common], help="instruction for a map and a start/goal pair")
    p.add_argument("--map", required=True)
    p.add_argument("--start", required=True, help="x,y,H")
    p.add_argument("--goal", required=True, help="x,y or x,y,H")
    p.add_argument("--trace", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", parents=[common], help="BLEU on a split")
    p.add_argument("--ablation", choices=("none", "no_aligner", "references"), default="none")
    p.add_argument("--split", choices=("train", "validation", "test"), default="test")
    p.add_argument("--seen-only", action="store_true", help="only test pairs whose CAS structure occurs in training")
    p.add_argument("--json", help="also write the report as JSON")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-figures", parents=[common], help="alignment heat maps and map drawings")
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=2)
    p.set_defaults(func=cmd_export_figures)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    cfg = _config(args)
    try:
        return args.func(args, cfg)
    except (FileNotFoundError, ValueError, wm.UnreachableError, pl.PhaseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
