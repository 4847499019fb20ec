"""Command line front end: ``ctxspike <command> [options]``.

Exit status is 0 on success, 1 when inputs fail validation and 2 on any
other runtime failure. Inputs are fully loaded and checked before the
first output file is written.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import io_formats as iof
from .augment import HomophoneLexicon, augment_utterance, sample_phrases
from .bias_graph import build_graph
from .context_bias import (
    DECODER_KEYS, ENCODER_KEYS, HEAD_KEYS, INTEGRATION_KEYS, BiasingList, ContractError,
)
from .ctc_core import PosteriorMatrix, greedy_spikes
from .eval_metrics import EvalReport, score as score_utt
from .phrase_filter import FilterConfig, filter_list
from .shallow_fusion import CascadeConfig, ConfigurationError, DecodeParams, Utterance, run_cascade
from .synthgen import CorruptionPolicy, fixture_weights, random_phrases, synth_corpus

log = logging.getLogger("ctxspike")


class ValidationError(Exception):
    pass


VALIDATION_ERRORS = (ValidationError, iof.FormatError, ConfigurationError, ContractError,
                     FileNotFoundError, KeyError)


# configuration plumbing

def _add_config_flags(p: argparse.ArgumentParser, names) -> None:
    defaults = iof.RunConfig()
    p.add_argument("--config", help="JSON run configuration")
    for name in names:
        f = iof.CONFIG_FIELDS[name]
        flag = "--" + name.replace("_", "-")
        helptext = f"{f.metadata['help']} [default: {getattr(defaults, name)}]"
        if f.type == "bool":
            p.add_argument(flag, dest=name, action=argparse.BooleanOptionalAction,
                           default=None, help=helptext)
            continue
        kind = float if "float" in f.type else int if f.type == "int" else str
        p.add_argument(flag, dest=name, type=kind, default=None, help=helptext)


def _resolve_config(args) -> iof.RunConfig:
    cfg = iof.load_config(args.config) if getattr(args, "config", None) else iof.RunConfig()
    overrides = {k: getattr(args, k) for k in iof.CONFIG_FIELDS
                 if getattr(args, k, None) is not None}
    return dataclasses.replace(cfg, **overrides)


def _need(cfg: iof.RunConfig, *names) -> None:
    missing = [n for n in names if getattr(cfg, n) is None]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise ValidationError(f"missing required input(s): {flags}")


def _filter_config(cfg: iof.RunConfig) -> FilterConfig:
    try:
        return FilterConfig(q=cfg.q, p=cfg.penalty, window_factor=cfg.window_factor,
                            stage2_enabled=cfg.stage2)
    except ValueError as e:
        raise ValidationError(str(e)) from None


def _write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _load_text_table(path) -> dict[str, str]:
    """``id<TAB>text`` lines, or a manifest (``.jsonl``) whose refs are used."""
    if str(path).endswith(".jsonl"):
        return {e.uid: e.ref for e in iof.load_manifest(path)}
    out = {}
    for no, line in enumerate(iof._read_text(path).splitlines(), start=1):
        if not line.strip():
            continue
        uid, _, text = line.partition("\t")
        if uid in out:
            raise ValidationError(f"{path}:{no}: duplicate id {uid!r}")
        out[uid] = text
    return out


def _chars(text: str) -> list[str]:
    """Characters scored by CER; whitespace is not a character."""
    return list("".join(text.split()))


# synth

def cmd_synth(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    V = args.vocab_size
    if V < 12 or V > 20000:
        raise ValidationError("--vocab-size must lie in [12, 20000]")
    if args.n < 1 or args.phrases < 1:
        raise ValidationError("--n and --phrases must be at least 1")
    if args.margin < 0:
        raise ValidationError("--margin must be non-negative")
    rng = np.random.default_rng(cfg.seed)
    pool = random_phrases(rng, args.phrases, V)
    policy = CorruptionPolicy(margin=args.margin, rate=1.0 if args.margin > 0 else 0.0)
    corpus = synth_corpus(args.n, pool, policy, seed=cfg.seed + 1, vocab_size=V)
    vocab = iof.Vocab([iof.BLANK_TOKEN] + [chr(0x4E00 + i) for i in range(V - 1)])

    out.mkdir(parents=True, exist_ok=True)
    (out / "post").mkdir(exist_ok=True)
    (out / "emb").mkdir(exist_ok=True)
    iof.save_vocab(out / "vocab.txt", vocab)
    iof.save_phrase_list(out / "phrases.txt", corpus.phrases, vocab)
    iof.save_weights(out / "weights", fixture_weights(V))
    entries, refs = [], []
    for utt in corpus.utterances:
        su = corpus.render(utt)
        iof.save_tensor(out / "post" / f"{utt.uid}.ctxt", su.post.logp)
        iof.save_tensor(out / "emb" / f"{utt.uid}.ctxt", su.h_e)
        text = vocab.detokenize(utt.reference)
        entries.append(iof.ManifestEntry(utt.uid, text, f"post/{utt.uid}.ctxt", f"emb/{utt.uid}.ctxt"))
        refs.append(f"{utt.uid}\t{text}\n")
    iof.save_manifest(out / "manifest.jsonl", entries)
    _write(out / "refs.txt", "".join(refs))
    # every token gets one homophone, drawn at random
    lex = {}
    for t in range(1, V):
        alt = int(rng.integers(1, V - 1))
        lex[t] = [alt if alt < t else alt + 1]
    iof.save_lexicon(out / "lexicon.tsv", HomophoneLexicon(lex), vocab)
    run = iof.RunConfig(manifest="manifest.jsonl", weights="weights", vocab="vocab.txt",
                        biasing_list="phrases.txt", lexicon="lexicon.tsv", seed=cfg.seed)
    iof.save_config(out / "config.json", run)
    print(f"wrote {len(entries)} utterances, {len(corpus.phrases)} phrases to {out}")
    return 0


# spikes

def cmd_spikes(args) -> int:
    logp = iof.load_tensor(args.posterior)
    post = PosteriorMatrix(logp, args.blank)
    spikes = greedy_spikes(post)
    text = "frame\ttoken\tlogp\n" + "".join(f"{s.frame}\t{s.token}\t{s.logp!r}\n" for s in spikes)
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)
    if args.plot:
        from .plotting import plot_posterior
        plot_posterior(post, spikes, args.plot)
    return 0


# filter

def cmd_filter(args) -> int:
    cfg = _resolve_config(args)
    _need(cfg, "vocab", "biasing_list")
    fcfg = _filter_config(cfg)
    vocab = iof.load_vocab(cfg.vocab)
    blist = BiasingList.from_phrases(iof.load_phrase_list(cfg.biasing_list, vocab))
    post = PosteriorMatrix(iof.load_tensor(args.posterior), 0)
    if post.V != len(vocab):
        raise ValidationError(f"posterior has {post.V} columns, vocabulary has {len(vocab)} tokens")
    report = filter_list(post, blist, fcfg)
    text = iof.format_filter_report(report, vocab)
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)
    if args.plot:
        from .plotting import plot_filter_scores
        plot_filter_scores(report, fcfg.q, args.plot)
    return 0


# build-graph

def cmd_build_graph(args) -> int:
    cfg = _resolve_config(args)
    _need(cfg, "vocab", "biasing_list")
    vocab = iof.load_vocab(cfg.vocab)
    phrases = iof.load_phrase_list(cfg.biasing_list, vocab)
    text = iof.dump_graph(build_graph(phrases, cfg.graph_score))
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


# decode

_WORKER: dict = {}


def _decode_init(state: dict) -> None:
    _WORKER.clear()
    _WORKER.update(state)
    _WORKER["cache"] = {}


def _decode_one(item):
    uid, post_path, emb_path, phrases = item
    w = _WORKER
    weights = w["weights"]
    post = PosteriorMatrix(iof.load_tensor(post_path), 0) if post_path else None
    h_e = iof.load_tensor(emb_path) if emb_path else None
    blist = BiasingList.from_phrases(phrases)
    res = run_cascade(Utterance(post, blist, h_e, uid), w["methods"], w["params"], weights,
                      w["cache"])
    return res.hypotheses[0].tokens if res.hypotheses else (), res.trace


def _method_requirements(methods: CascadeConfig) -> list[str]:
    keys: list[str] = []
    if methods.implicit or methods.explicit:
        keys += list(ENCODER_KEYS) + list(INTEGRATION_KEYS)
    if methods.implicit:
        keys += list(HEAD_KEYS)
    if methods.explicit:
        keys += list(DECODER_KEYS)
    return keys


def cmd_decode(args) -> int:
    cfg = _resolve_config(args)
    _need(cfg, "manifest", "vocab")
    try:
        methods = CascadeConfig.from_mode(cfg.mode, implicit_weight=cfg.implicit_weight,
                                          explicit_weight=cfg.explicit_weight,
                                          sf_weight=cfg.sf_weight)
    except ValueError as e:
        raise ValidationError(str(e)) from None
    if cfg.beam < 1 or cfg.context_beam < 1 or cfg.jobs < 1:
        raise ValidationError("beam widths and --jobs must be at least 1")
    fcfg = _filter_config(cfg) if cfg.filter else None
    vocab = iof.load_vocab(cfg.vocab)
    entries = iof.load_manifest(cfg.manifest)
    base = Path(cfg.manifest).parent
    shared = iof.load_phrase_list(cfg.biasing_list, vocab) if cfg.biasing_list else []
    weights = None
    required = _method_requirements(methods)
    if required:
        if cfg.weights is None:
            name = "implicit" if methods.implicit else "explicit"
            raise ConfigurationError(f"{name} biasing needs --weights")
        weights = iof.load_weights(cfg.weights, required)
    items = []
    for e in entries:
        post_path = str(base / e.posterior) if e.posterior else None
        emb_path = str(base / e.embeddings) if e.embeddings else None
        for pth in (post_path, emb_path):
            if pth and not Path(pth).exists():
                raise ValidationError(f"{e.uid}: missing tensor file {pth}")
        if required and emb_path is None:
            raise ConfigurationError(f"{e.uid}: mode {cfg.mode!r} needs encoder embeddings")
        if post_path is None and (emb_path is None or weights is None or "ctc_head.w" not in weights):
            raise ValidationError(f"{e.uid}: no posterior and no way to derive one")
        phrases = ([vocab.tokenize(t, f"{e.uid} biasing_list") for t in e.biasing_list]
                   if e.biasing_list is not None else shared)
        items.append((e.uid, post_path, emb_path, phrases))

    params = DecodeParams(beam=cfg.beam, token_topk=cfg.token_topk or None,
                          bias_score=cfg.bias_score, graph_score=cfg.graph_score,
                          context_beam=cfg.context_beam, bias_top_k=cfg.bias_top_k or None,
                          filter=fcfg, full_recompute=cfg.full_recompute)
    state = {"weights": weights, "methods": methods, "params": params}
    if cfg.jobs > 1:
        with ProcessPoolExecutor(cfg.jobs, initializer=_decode_init, initargs=(state,)) as ex:
            results = list(ex.map(_decode_one, items, chunksize=8))
    else:
        _decode_init(state)
        results = [_decode_one(it) for it in items]

    hyp_lines, trace_lines = [], []
    report = EvalReport()
    have_refs = all(e.ref for e in entries)
    for e, (uid, _, _, phrases), (tokens, trace) in zip(entries, items, results):
        text = vocab.detokenize(tokens)
        hyp_lines.append(f"{uid}\t{text}\n")
        trace["hyp_text"] = text
        trace["kept"] = [vocab.detokenize(p) for p in trace["kept"]]
        trace_lines.append(json.dumps(trace, ensure_ascii=False, sort_keys=True) + "\n")
        if have_refs:
            report = report + score_utt(_chars(e.ref), _chars(text),
                                        [_chars(vocab.detokenize(p)) for p in phrases])
    out = Path(args.out_dir)
    _write(out / "hyps.txt", "".join(hyp_lines))
    _write(out / "trace.jsonl", "".join(trace_lines))
    if have_refs:
        _write(out / "report.txt", "\n".join(report.key_values()) + "\n\n" + report.table() + "\n")
        if args.plot:
            from .plotting import plot_error_rates
            plot_error_rates({cfg.mode: report}, args.plot, title=f"mode={cfg.mode}")
    print(f"decoded {len(entries)} utterances (mode={cfg.mode}) into {out}")
    return 0


# augment

def cmd_augment(args) -> int:
    cfg = _resolve_config(args)
    _need(cfg, "manifest", "vocab")
    vocab = iof.load_vocab(cfg.vocab)
    entries = iof.load_manifest(cfg.manifest)
    lexicon = iof.load_lexicon(cfg.lexicon, vocab) if cfg.lexicon else None
    if lexicon is not None:
        lexicon.validate(len(vocab))
    if not 0.0 <= cfg.augment_prob <= 1.0:
        raise ValidationError("--augment-prob must lie in [0, 1]")
    refs = [vocab.tokenize(e.ref, f"{e.uid} ref") for e in entries]
    rng = np.random.default_rng(cfg.seed)
    # distractors come from substrings of the other utterances
    sampled = [[tuple(r[s:s + n]) for s, n in sample_phrases(r, rng)] for r in refs]
    out_entries = []
    for i, (e, ref) in enumerate(zip(entries, refs)):
        pool = [p for j, ps in enumerate(sampled) if j != i for p in ps]
        ex = augment_utterance(ref, pool, lexicon, cfg.augment_prob, rng)
        out_entries.append(iof.ManifestEntry(e.uid, vocab.detokenize(ex.transcript), e.posterior,
                                             e.embeddings,
                                             [vocab.detokenize(p) for p in ex.biasing_list]))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    iof.save_manifest(args.out, out_entries)
    return 0


# score

def cmd_score(args) -> int:
    cfg = _resolve_config(args)
    refs = _load_text_table(args.refs)
    hyps = _load_text_table(args.hyps)
    missing = sorted(set(refs) - set(hyps))
    if missing:
        raise ValidationError(f"no hypothesis for {len(missing)} utterance(s), e.g. {missing[0]!r}")
    phrases = []
    if cfg.biasing_list:
        phrases = [_chars(ln) for ln in iof._read_text(cfg.biasing_list).splitlines() if ln.strip()]
    report = EvalReport()
    for uid, ref in refs.items():
        report = report + score_utt(_chars(ref), _chars(hyps[uid]), phrases)
    text = "\n".join(report.key_values()) + "\n\n" + report.table() + "\n"
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)
    if args.plot:
        from .plotting import plot_error_rates
        plot_error_rates({Path(args.hyps).stem: report}, args.plot)
    return 1 if report.flagged and args.strict else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ctxspike", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus with fixture weights")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--vocab-size", type=int, default=100)
    p.add_argument("--phrases", type=int, default=50)
    p.add_argument("--margin", type=float, default=1.0, help="corruption margin in nats (0 = clean)")
    _add_config_flags(p, ["seed"])
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("spikes", help="detect emitting frames in a posterior tensor")
    p.add_argument("--posterior", required=True)
    p.add_argument("--blank", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--plot", help="write a posterior/spike figure here")
    p.set_defaults(func=cmd_spikes)

    p = sub.add_parser("filter", help="score and filter a biasing list")
    p.add_argument("--posterior", required=True)
    p.add_argument("--out")
    p.add_argument("--plot", help="write a PSC/SOC scatter figure here")
    _add_config_flags(p, ["vocab", "biasing_list", "q", "p", "window_factor", "stage2"])
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("build-graph", help="dump the bias decoding graph")
    p.add_argument("--out")
    _add_config_flags(p, ["vocab", "biasing_list", "graph_score"])
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("decode", help="decode a manifest with the selected biasing methods")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--plot", help="write an error-rate figure here when refs are present")
    _add_config_flags(p, [n for n in iof.CONFIG_FIELDS
                          if n not in ("lexicon", "augment_prob", "lambda1", "lambda2",
                                       "smoothing_eps")])
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("augment", help="sample biasing lists and apply homophone replacement")
    p.add_argument("--out", required=True)
    _add_config_flags(p, ["manifest", "vocab", "lexicon", "augment_prob", "seed"])
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("score", help="CER, B-CER and U-CER of hypotheses against references")
    p.add_argument("--refs", required=True, help="id<TAB>text file or manifest .jsonl")
    p.add_argument("--hyps", required=True, help="id<TAB>text file")
    p.add_argument("--out")
    p.add_argument("--plot", help="write an error-rate bar chart here")
    p.add_argument("--strict", action="store_true", help="exit 1 when a rate is undefined")
    _add_config_flags(p, ["biasing_list"])
    p.set_defaults(func=cmd_score)
    return ap


def main(argv=None) -> int:
    level = os.environ.get("CTXSPIKE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except VALIDATION_ERRORS as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"error: {msg}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
