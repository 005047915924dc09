"""Batch command-line entry point.

Exit codes: 0 success, 2 usage error (bad flags, violated preconditions),
1 runtime error (unreadable or malformed inputs, capacity limits). Every
subcommand is fully determined by its flags plus config file; outputs carry
no timestamps, so identical invocations produce identical primary outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis as analysis_mod
from .core import (
    CapacityError,
    DegenerateInputError,
    InfiniteLossError,
    ScaleSet,
    UsageError,
    Vocabulary,
    load_scales,
    save_scales,
)
from .decode import (
    BeamConfig,
    beam_search,
    load_nbest,
    rescore_nbest,
    save_nbest,
    strip_trailing_eos,
)
from .metrics import corpus_wer
from .objectives import gradient_check
from .providers import (
    GeneratorConfig,
    NGramLM,
    generate_synthetic_corpus,
    load_corpus,
    save_corpus,
    split_noise,
    train_ngram,
    uniform_noise,
)
from .train import (
    TrainConfig,
    grid_search_scales,
    init_scales,
    joint_train,
    train_scales,
)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj) + "\n")


def _scales_from_args(args, need: bool = True) -> ScaleSet | None:
    if getattr(args, "scales", None):
        scales, _ = load_scales(args.scales)
        return scales
    if getattr(args, "alpha", None) is not None or getattr(args, "beta", None) is not None:
        alpha = args.alpha if args.alpha is not None else 1.0
        beta = args.beta if args.beta is not None else 0.0
        return ScaleSet("agnostic", alpha, beta)
    if need:
        raise UsageError("provide --scales FILE or --alpha/--beta values")
    return None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    k = args.vocab_size
    if args.noise_file:
        noise = tuple(json.loads(Path(args.noise_file).read_text()))
    elif args.noise_split:
        low, high = (float(x) for x in args.noise_split.split(","))
        noise = split_noise(k, k - 1, low, high)
    else:
        noise = uniform_noise(k, args.noise)
    cfg = GeneratorConfig(
        vocab_size=k,
        len_range=(args.min_len, args.max_len),
        sizes=(args.train, args.dev, args.test),
        noise=noise,
        seed=args.seed,
        marker_fraction=args.marker_fraction,
        chain_concentration=args.chain_concentration,
    )
    vocab, splits = generate_synthetic_corpus(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.json")
    for split, utts in splits.items():
        save_corpus(out / f"{split}.jsonl", utts)
    _write_json(out / "generator_config.json", {
        "vocab_size": cfg.vocab_size, "len_range": list(cfg.len_range),
        "sizes": list(cfg.sizes), "noise": list(cfg.noise), "seed": cfg.seed,
        "marker_fraction": cfg.marker_fraction,
        "chain_concentration": cfg.chain_concentration,
    })
    print(f"wrote vocab + {', '.join(f'{len(u)} {s}' for s, u in splits.items())} utterances to {out}")
    return 0


def cmd_train_lm(args) -> int:
    vocab = Vocabulary.load(args.vocab)
    corpus = load_corpus(args.corpus)
    lm = train_ngram([u.reference for u in corpus], args.order, args.k_s, vocab.k)
    lm.save(args.out)
    print(f"trained order-{args.order} LM on {len(corpus)} sequences -> {args.out}")
    return 0


_DECODE_CTX = {}


def _decode_init(lm, scales, beam, max_len_factor, max_len, eos_id, eos_rule):
    _DECODE_CTX.update(lm=lm, scales=scales, beam=beam, factor=max_len_factor,
                       max_len=max_len, eos_id=eos_id, eos_rule=eos_rule)


def _decode_one(utt):
    c = _DECODE_CTX
    max_len = c["max_len"] or max(1, int(round(c["factor"] * len(utt.reference))))
    cfg = BeamConfig(beam_size=c["beam"], max_len=max_len,
                     eos_id=c["eos_id"], eos_rule=c["eos_rule"])
    return beam_search(utt.am, c["lm"], c["scales"], cfg, utt.utt_id, utt.reference)


def cmd_decode(args) -> int:
    vocab = Vocabulary.load(args.vocab)
    corpus = load_corpus(args.corpus)
    lm = NGramLM.load(args.lm)
    scales = _scales_from_args(args)
    init_args = (lm, scales, args.beam, args.max_len_factor, args.max_len,
                 vocab.eos_id, args.eos_rule)
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers, initializer=_decode_init,
                                 initargs=init_args) as pool:
            nbests = list(pool.map(_decode_one, corpus, chunksize=16))
    else:
        _decode_init(*init_args)
        nbests = [_decode_one(u) for u in corpus]
    save_nbest(args.out, nbests)
    print(f"decoded {len(nbests)} utterances (beam {args.beam}) -> {args.out}")
    return 0


def cmd_rescore(args) -> int:
    scales = _scales_from_args(args)
    nbests = [rescore_nbest(nb, scales) for nb in load_nbest(args.nbest)]
    save_nbest(args.out, nbests)
    print(f"rescored {len(nbests)} n-best lists -> {args.out}")
    return 0


def _train_config_from_args(args) -> TrainConfig:
    base = {}
    if args.config:
        base = json.loads(Path(args.config).read_text())
    overrides = {
        "criterion": args.criterion, "mode": args.mode, "epochs": args.epochs,
        "lr": args.lr, "batch_size": args.batch_size, "seed": args.seed,
    }
    for key, value in overrides.items():
        if value is not None:
            base[key] = value
    if getattr(args, "regenerate_nbest", False):
        base["regenerate_nbest"] = True
    return TrainConfig.from_json_dict(base)


def _initial_scales(args, mode: str, k: int) -> ScaleSet:
    if args.init_scales:
        scales, _ = load_scales(args.init_scales)
        if scales.mode != mode:
            raise UsageError(f"--init-scales file has mode {scales.mode!r}, expected {mode!r}")
        return scales
    return init_scales(mode, k, args.seed_init, args.stddev)


def cmd_train_scales(args) -> int:
    vocab = Vocabulary.load(args.vocab)
    cfg = _train_config_from_args(args)
    scales0 = _initial_scales(args, cfg.mode, vocab.k)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    corpus = load_corpus(args.corpus) if args.corpus else None
    lm = NGramLM.load(args.lm) if args.lm else None
    nbests = load_nbest(args.nbest) if args.nbest else None
    beam_cfg = None
    if cfg.regenerate_nbest:
        beam_cfg = BeamConfig(beam_size=args.beam, max_len=args.max_len or 64,
                              eos_id=vocab.eos_id)

    ckpt_dir = out / "checkpoints"
    every = args.checkpoint_every

    def checkpoint(epoch, scales):
        if every > 0 and (epoch + 1) % every == 0:
            ckpt_dir.mkdir(exist_ok=True)
            save_scales(scales, vocab.k, ckpt_dir / f"epoch_{epoch:04d}.json")

    report = train_scales(cfg, scales0, corpus=corpus, lm=lm, nbests=nbests,
                          beam_cfg=beam_cfg, checkpoint_cb=checkpoint)
    save_scales(report.final_scales, vocab.k, out / "scales_final.json")
    _write_json(out / "train_report.json", report.to_json_dict(vocab.k))
    last = report.loss_per_epoch[-1] if report.loss_per_epoch else float("nan")
    print(f"{cfg.criterion} training ({cfg.mode}): {len(report.loss_per_epoch)} epochs, "
          f"final loss {last:.6f}, mean alpha {report.mean_alpha:.4f}, "
          f"mean beta {report.mean_beta:.4f}")
    if report.diverged:
        print("warning: training diverged; kept the last finite state", file=sys.stderr)
    return 0


def cmd_joint_train(args) -> int:
    vocab = Vocabulary.load(args.vocab)
    cfg = _train_config_from_args(args)
    cfg = TrainConfig.from_json_dict({**cfg.to_json_dict(),
                                      "criterion": "ce",
                                      "train_toy_am": True,
                                      "train_scales": not args.freeze_scales})
    scales0 = _initial_scales(args, cfg.mode, vocab.k)
    corpus = load_corpus(args.corpus)
    lm = NGramLM.load(args.lm)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    report, trained_ams, final = joint_train(cfg, scales0, corpus, lm)
    from .providers import Utterance
    updated = [Utterance(u.utt_id, u.reference, t.frozen())
               for u, t in zip(corpus, trained_ams)]
    save_corpus(out / "am_out.jsonl", updated)
    save_scales(final, vocab.k, out / "scales_final.json")
    _write_json(out / "train_report.json", report.to_json_dict(vocab.k))
    last = report.loss_per_epoch[-1] if report.loss_per_epoch else float("nan")
    print(f"joint training: {len(report.loss_per_epoch)} epochs, final loss {last:.6f} "
          f"(scales {'frozen' if args.freeze_scales else 'trainable'})")
    return 0


def cmd_grid_search(args) -> int:
    vocab = Vocabulary.load(args.vocab)
    nbests = load_nbest(args.nbest)
    grid = np.arange(args.beta_min, args.beta_max + 1e-12, args.beta_step)
    eos = None if args.no_strip_eos else vocab.eos_id
    result = grid_search_scales(nbests, grid, alpha=args.alpha, eos_id=eos)
    _write_json(args.out, result.to_json_dict())
    print(f"grid search over {len(result.table)} beta values: "
          f"best beta {result.best_beta:g} at error rate {result.best_error_rate:.4f}")
    return 0


def _read_token_file(path, prefer_hyps: bool):
    ids, seqs = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
                if prefer_hyps and "hyps" in d:
                    tokens = d["hyps"][0]["tokens"]
                elif "tokens" in d:
                    tokens = d["tokens"]
                elif "ref" in d:
                    tokens = d["ref"]
                else:
                    raise KeyError("no 'hyps', 'tokens', or 'ref' field")
                ids.append(str(d.get("id", lineno)))
                seqs.append(tuple(int(t) for t in tokens))
            except (KeyError, ValueError, TypeError, IndexError) as e:
                raise UsageError(f"{path}: line {lineno}: {e}") from e
    return ids, seqs


def cmd_evaluate(args) -> int:
    vocab = Vocabulary.load(args.vocab) if args.vocab else None
    ref_ids, refs = _read_token_file(args.refs, prefer_hyps=False)
    hyp_ids, hyps = _read_token_file(args.hyps, prefer_hyps=True)
    if len(refs) != len(hyps):
        raise UsageError(f"--refs has {len(refs)} utterances, --hyps has {len(hyps)}")
    for i, (ri, hi) in enumerate(zip(ref_ids, hyp_ids)):
        if ri != hi:
            raise UsageError(f"utterance {i}: id mismatch ({ri!r} vs {hi!r})")
    if vocab is not None and not args.no_strip_eos:
        refs = [strip_trailing_eos(r, vocab.eos_id) for r in refs]
        hyps = [strip_trailing_eos(h, vocab.eos_id) for h in hyps]
    detok = None
    if args.words:
        if vocab is None:
            raise UsageError("--words needs --vocab for detokenization")
        detok = lambda tokens: vocab.detokenize(tokens)
    report = corpus_wer(refs, hyps, detokenizer=detok, ids=ref_ids)
    if args.out:
        _write_json(args.out, report.to_json_dict())
    print(f"WER {report.error_rate:.4f} "
          f"({report.errors} errors / {report.ref_tokens} reference tokens; "
          f"S={report.substitutions} I={report.insertions} D={report.deletions})")
    return 0


def cmd_analyze(args) -> int:
    vocab = Vocabulary.load(args.vocab)
    scales, k = load_scales(args.scales)
    if k != vocab.k:
        raise UsageError(f"scales file has vocab_size {k}, vocabulary has {vocab.k}")
    report = analysis_mod.build_scale_report(scales, vocab, bins=args.bins)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "scale_report.json", report)
    for name in ("alpha", "beta"):
        hist = report[f"{name}_histogram"]
        lines = ["bin_lo,bin_hi,count"]
        for lo, hi, c in zip(hist["bin_edges"][:-1], hist["bin_edges"][1:], hist["counts"]):
            lines.append(f"{lo!r},{hi!r},{c}")
        (out / f"{name}_histogram.csv").write_text("\n".join(lines) + "\n")
    lines = ["length,count,mean_alpha,mean_beta"]
    for length, stats in report["length_profile"].items():
        lines.append(f"{length},{stats['count']},{stats['mean_alpha']!r},{stats['mean_beta']!r}")
    (out / "length_profile.csv").write_text("\n".join(lines) + "\n")
    print(f"pearson(alpha, beta) = {report['pearson_alpha_beta']:.4f}; "
          f"alpha {report['alpha_mean']:.4f}+-{report['alpha_std']:.4f}, "
          f"beta {report['beta_mean']:.4f}+-{report['beta_std']:.4f}")
    return 0


def cmd_grad_check(args) -> int:
    criteria = ["ce", "minwer"] if args.criterion == "both" else [args.criterion]
    modes = ["agnostic", "subword"] if args.mode == "both" else [args.mode]
    results = []
    worst = 0.0
    for criterion in criteria:
        for mode in modes:
            r = gradient_check(criterion, mode, args.trials, args.seed, h=args.h)
            r["pass"] = r["max_rel_err"] < args.threshold
            results.append(r)
            worst = max(worst, r["max_rel_err"])
            print(f"grad-check {criterion}/{mode}: max relative error "
                  f"{r['max_rel_err']:.3e} ({'PASS' if r['pass'] else 'FAIL'})")
    report = {"threshold": args.threshold, "max_rel_err": worst,
              "pass": worst < args.threshold, "results": results}
    if args.out:
        _write_json(args.out, report)
    return 0 if report["pass"] else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_scale_source(p):
    p.add_argument("--scales", help="scales JSON file")
    p.add_argument("--alpha", type=float, help="agnostic AM scale (with --beta)")
    p.add_argument("--beta", type=float, help="agnostic LM scale (with --alpha)")


def _add_train_common(p):
    p.add_argument("--vocab", required=True)
    p.add_argument("--config", help="JSON file mirroring the train config")
    p.add_argument("--mode", choices=["agnostic", "subword"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--seed", type=int)
    p.add_argument("--init-scales", dest="init_scales", help="initial scales JSON file")
    p.add_argument("--seed-init", type=int, dest="seed_init", default=0,
                   help="seed for random scale initialization")
    p.add_argument("--stddev", type=float, default=0.01,
                   help="stddev of the Gaussian scale initialization")
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--checkpoint-every", type=int, default=1, dest="checkpoint_every",
                   help="write scale checkpoints every N epochs (0 disables)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scalefusion",
        description="Log-linear AM/LM combination with learnable scales",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--vocab-size", type=int, required=True, dest="vocab_size")
    p.add_argument("--train", type=int, default=0)
    p.add_argument("--dev", type=int, default=0)
    p.add_argument("--test", type=int, default=0)
    p.add_argument("--min-len", type=int, default=4, dest="min_len")
    p.add_argument("--max-len", type=int, default=10, dest="max_len")
    p.add_argument("--noise", type=float, default=0.3,
                   help="homogeneous confusion strength")
    p.add_argument("--noise-split", dest="noise_split",
                   help="LOW,HIGH: half the units get LOW, half HIGH (EOS stays low)")
    p.add_argument("--noise-file", dest="noise_file", help="JSON list of length k")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--marker-fraction", type=float, default=0.3, dest="marker_fraction")
    p.add_argument("--chain-concentration", type=float, default=0.3,
                   dest="chain_concentration")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train-lm", help="train the add-k smoothed n-gram LM")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--order", type=int, default=2)
    p.add_argument("--k-s", type=float, default=0.1, dest="k_s")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_lm)

    p = sub.add_parser("decode", help="shallow-fusion beam search over a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--lm", required=True)
    _add_scale_source(p)
    p.add_argument("--beam", type=int, default=12)
    p.add_argument("--max-len-factor", type=float, default=2.0, dest="max_len_factor",
                   help="max length as a multiple of the reference length")
    p.add_argument("--max-len", type=int, dest="max_len",
                   help="absolute max length (overrides the factor)")
    p.add_argument("--eos-rule", choices=["terminate", "fixed_length"],
                   default="terminate", dest="eos_rule")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--deterministic", action="store_true",
                   help="force ordered reduction (always on; flag kept for symmetry)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("rescore", help="reorder n-best lists under given scales")
    p.add_argument("--nbest", required=True)
    _add_scale_source(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rescore)

    p = sub.add_parser("train-scales", help="learn the combination scales")
    p.add_argument("--criterion", choices=["ce", "minwer"])
    p.add_argument("--corpus", help="corpus JSONL (required for CE)")
    p.add_argument("--lm", help="LM JSON (required for CE)")
    p.add_argument("--nbest", help="n-best JSONL (required for minWER)")
    p.add_argument("--regenerate-nbest", action="store_true", dest="regenerate_nbest",
                   help="re-decode the n-best lists at the start of every epoch")
    p.add_argument("--beam", type=int, default=12, help="beam size for regeneration")
    p.add_argument("--max-len", type=int, dest="max_len", help="max length for regeneration")
    _add_train_common(p)
    p.set_defaults(func=cmd_train_scales)

    p = sub.add_parser("joint-train", help="fine-tune toy-AM logits with the LM fixed")
    p.add_argument("--corpus", required=True)
    p.add_argument("--lm", required=True)
    p.add_argument("--freeze-scales", action="store_true", dest="freeze_scales")
    p.add_argument("--criterion", choices=["ce"], default="ce")
    _add_train_common(p)
    p.set_defaults(func=cmd_joint_train)

    p = sub.add_parser("grid-search", help="manual baseline: scan LM scales")
    p.add_argument("--nbest", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta-min", type=float, default=0.0, dest="beta_min")
    p.add_argument("--beta-max", type=float, default=1.5, dest="beta_max")
    p.add_argument("--beta-step", type=float, default=0.05, dest="beta_step")
    p.add_argument("--no-strip-eos", action="store_true", dest="no_strip_eos")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_grid_search)

    p = sub.add_parser("evaluate", help="corpus error rate between two token files")
    p.add_argument("--refs", required=True)
    p.add_argument("--hyps", required=True)
    p.add_argument("--vocab", help="needed for EOS stripping and --words")
    p.add_argument("--words", action="store_true",
                   help="score detokenized words instead of subword ids")
    p.add_argument("--no-strip-eos", action="store_true", dest="no_strip_eos")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="scale distribution / correlation / length report")
    p.add_argument("--scales", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("grad-check", help="verify analytic gradients against finite differences")
    p.add_argument("--criterion", choices=["ce", "minwer", "both"], default="both")
    p.add_argument("--mode", choices=["agnostic", "subword", "both"], default="both")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--threshold", type=float, default=1e-5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_grad_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError, CapacityError, DegenerateInputError,
            InfiniteLossError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
