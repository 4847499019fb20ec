"""On-disk formats.

Tensor file (``.ctxt``), all integers little-endian::

    offset 0   5 bytes   magic b"CTXT1"
    offset 5   1 byte    dtype code (1 = float64)
    offset 6   1 byte    rank r
    offset 7   8*r bytes dims as uint64
    then       8*prod(dims) bytes of row-major float64 payload

A weight bundle is a directory holding ``index.tsv`` and one tensor file
per parameter. The index starts with ``#ctxspike-weights 1``, then
``@key<TAB>value`` metadata lines, then ``name<TAB>file<TAB>dims`` rows
with dims comma-separated.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .augment import HomophoneLexicon
from .bias_graph import BiasGraph
from .phrase_filter import FilterReport, PhraseScore
from .tensor_nn import WeightBundle

MAGIC = b"CTXT1"
DTYPE_F64 = 1
BLANK_TOKEN = "<blank>"
WEIGHTS_HEADER = "#ctxspike-weights 1"
META_KEYS = ("d_model", "heads", "vocab", "conv_kernel", "hidden", "embed_dim")


class FormatError(ValueError):
    """Malformed input file; the message names the location."""


# tensors

def tensor_to_bytes(arr) -> bytes:
    a = np.asarray(arr, dtype="<f8")
    if a.ndim > 255:
        raise FormatError("tensor rank above 255")
    head = MAGIC + bytes([DTYPE_F64, a.ndim]) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes(order="C")


def tensor_from_bytes(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 7 or buf[:5] != MAGIC:
        raise FormatError(f"{source}: bad magic at byte 0 (expected {MAGIC!r})")
    if buf[5] != DTYPE_F64:
        raise FormatError(f"{source}: unsupported dtype code {buf[5]} at byte 5")
    rank = buf[6]
    end = 7 + 8 * rank
    if len(buf) < end:
        raise FormatError(f"{source}: header truncated at byte {len(buf)}")
    dims = struct.unpack(f"<{rank}Q", buf[7:end])
    n = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(buf) != end + 8 * n:
        raise FormatError(
            f"{source}: payload is {len(buf) - end} bytes from byte {end}, dims {dims} need {8 * n}"
        )
    return np.frombuffer(buf, dtype="<f8", offset=end).reshape(dims).astype(np.float64)


def save_tensor(path, arr) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes(), str(path))


# weight bundles

def save_weights(directory, bundle: WeightBundle) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = [WEIGHTS_HEADER]
    lines += [f"@{k}\t{v}" for k, v in bundle.metadata.items()]
    lines += [f"@{k}\t{v}" for k, v in sorted(bundle.extra.items())]
    for name in sorted(bundle.params):
        arr = bundle.params[name]
        fname = f"{name}.ctxt"
        save_tensor(d / fname, arr)
        lines.append(f"{name}\t{fname}\t{','.join(map(str, arr.shape))}")
    (d / "index.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_weights(directory, required: Sequence[str] = ()) -> WeightBundle:
    d = Path(directory)
    index = d / "index.tsv"
    text = _read_text(index)
    lines = text.splitlines()
    if not lines or lines[0].strip() != WEIGHTS_HEADER:
        raise FormatError(f"{index}:1: expected header {WEIGHTS_HEADER!r}")
    meta: dict[str, str] = {}
    params = {}
    for no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if line.startswith("@"):
            if len(parts) != 2:
                raise FormatError(f"{index}:{no}: metadata line needs key<TAB>value")
            meta[parts[0][1:]] = parts[1]
            continue
        if len(parts) != 3:
            raise FormatError(f"{index}:{no}: expected name<TAB>file<TAB>dims")
        name, fname, dims = parts
        declared = tuple(int(x) for x in dims.split(",")) if dims else ()
        arr = load_tensor(d / fname)
        if arr.shape != declared:
            raise FormatError(f"{index}:{no}: {name} has shape {arr.shape}, index declares {declared}")
        params[name] = arr
    missing = [k for k in META_KEYS[:3] if k not in meta]
    if missing:
        raise FormatError(f"{index}: missing metadata {', '.join(missing)}")
    absent = [r for r in required if r not in params]
    if absent:
        raise FormatError(f"{index}: weight bundle is missing {', '.join(absent)}")
    try:
        kw = {k: int(meta.pop(k)) for k in META_KEYS if k in meta}
    except ValueError as e:
        raise FormatError(f"{index}: non-integer metadata ({e})") from None
    for name, want in _declared_shapes(kw).items():
        if name in params and params[name].shape != want:
            raise FormatError(
                f"{index}: {name} has shape {params[name].shape}, metadata implies {want}"
            )
    return WeightBundle(params, extra=meta, **kw)


def _declared_shapes(meta: dict[str, int]) -> dict[str, tuple[int, ...]]:
    """Shapes implied by the bundle metadata for the weights it knows about."""
    d, V = meta["d_model"], meta["vocab"]
    k = meta.get("conv_kernel", 3)
    out: dict[str, tuple[int, ...]] = {
        "integration.conv.w": (k, d, d), "integration.conv.b": (d,),
        "integration.out.w": (d, d), "integration.out.b": (d,),
        "ctx_decoder.w": (2 * d, V), "ctx_decoder.b": (V,),
        "ctc_head.w": (d, V), "ctc_head.b": (V,),
        "context_encoder.out.b": (d,),
    }
    for m in ("wq", "wk", "wv"):
        out[f"integration.attn.{m}"] = (d, d)
    h, e = meta.get("hidden", 0), meta.get("embed_dim", 0)
    if h:
        out["context_encoder.out.w"] = (4 * h, d)
        for direction in ("fwd", "bwd"):
            out[f"context_encoder.{direction}.w_hh"] = (h, 4 * h)
            out[f"context_encoder.{direction}.b"] = (4 * h,)
            if e:
                out[f"context_encoder.{direction}.w_ih"] = (e, 4 * h)
    if e:
        out["context_encoder.embed"] = (V, e)
    return out


# text helpers

def _read_text(path) -> str:
    raw = Path(path).read_bytes()
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"{path}: invalid UTF-8 at byte offset {e.start}") from None


@dataclass
class Vocab:
    tokens: list[str]
    index: dict[str, int] = field(init=False)

    def __post_init__(self) -> None:
        if not self.tokens:
            raise FormatError("vocabulary is empty")
        self.index = {}
        for i, t in enumerate(self.tokens):
            if t in self.index:
                raise FormatError(f"vocabulary line {i + 1}: duplicate token {t!r}")
            self.index[t] = i
        self._maxlen = max(len(t) for t in self.tokens[1:]) if len(self.tokens) > 1 else 1

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def char_level(self) -> bool:
        return self._maxlen == 1

    def tokenize(self, text: str, where: str = "") -> tuple[int, ...]:
        """Greedy longest-match tokenization; whitespace separates tokens."""
        out = []
        for chunk in text.split():
            i = 0
            while i < len(chunk):
                for n in range(min(self._maxlen, len(chunk) - i), 0, -1):
                    tid = self.index.get(chunk[i:i + n])
                    if tid is not None and tid != 0:
                        out.append(tid)
                        i += n
                        break
                else:
                    loc = f"{where}: " if where else ""
                    raise FormatError(f"{loc}token {chunk[i]!r} not in vocabulary")
        return tuple(out)

    def detokenize(self, ids: Sequence[int]) -> str:
        """Inverse of ``tokenize``; multi-character vocabularies join with spaces."""
        sep = "" if self.char_level else " "
        return sep.join(self.tokens[i] for i in ids if i != 0)


def save_vocab(path, vocab: Vocab) -> None:
    Path(path).write_text("\n".join(vocab.tokens) + "\n", encoding="utf-8")


def load_vocab(path) -> Vocab:
    lines = _read_text(path).splitlines()
    for no, ln in enumerate(lines, start=1):
        if not ln.strip():
            raise FormatError(f"{path}:{no}: empty vocabulary entry")
    try:
        return Vocab(lines)
    except FormatError as e:
        raise FormatError(f"{path}: {e}") from None


def save_phrase_list(path, phrases, vocab: Vocab) -> None:
    Path(path).write_text("".join(vocab.detokenize(p) + "\n" for p in phrases), encoding="utf-8")


def load_phrase_list(path, vocab: Vocab) -> list[tuple[int, ...]]:
    phrases = []
    for no, line in enumerate(_read_text(path).splitlines(), start=1):
        if line.strip():
            phrases.append(vocab.tokenize(line, f"{path}:{no}"))
    return phrases


def save_lexicon(path, lex: HomophoneLexicon, vocab: Vocab) -> None:
    lines = [f"{vocab.tokens[t]}\t{','.join(vocab.tokens[a] for a in alts)}"
             for t, alts in sorted(lex.entries.items())]
    Path(path).write_text("".join(ln + "\n" for ln in lines), encoding="utf-8")


def load_lexicon(path, vocab: Vocab) -> HomophoneLexicon:
    entries: dict[int, list[int]] = {}
    for no, line in enumerate(_read_text(path).splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise FormatError(f"{path}:{no}: expected token<TAB>homophone[,homophone...]")

        def tid(tok: str) -> int:
            if tok not in vocab.index:
                raise FormatError(f"{path}:{no}: token {tok!r} not in vocabulary")
            return vocab.index[tok]

        entries[tid(parts[0])] = [tid(t) for t in parts[1].split(",") if t]
    try:
        return HomophoneLexicon(entries)
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from None


# corpus manifest (JSON lines)

@dataclass
class ManifestEntry:
    uid: str
    ref: str = ""
    posterior: str | None = None
    embeddings: str | None = None
    biasing_list: list[str] | None = None

    def to_json(self) -> dict[str, Any]:
        d: dict[str, Any] = {"id": self.uid, "ref": self.ref}
        for k in ("posterior", "embeddings", "biasing_list"):
            if getattr(self, k) is not None:
                d[k] = getattr(self, k)
        return d


def save_manifest(path, entries: Sequence[ManifestEntry]) -> None:
    Path(path).write_text(
        "".join(json.dumps(e.to_json(), ensure_ascii=False, sort_keys=True) + "\n" for e in entries),
        encoding="utf-8")


def load_manifest(path) -> list[ManifestEntry]:
    out = []
    allowed = {"id", "ref", "posterior", "embeddings", "biasing_list"}
    for no, line in enumerate(_read_text(path).splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}:{no}: {e.msg} at column {e.colno}") from None
        if not isinstance(obj, dict) or "id" not in obj:
            raise FormatError(f"{path}:{no}: entry must be an object with an 'id'")
        extra = set(obj) - allowed
        if extra:
            raise FormatError(f"{path}:{no}: unknown keys {sorted(extra)}")
        out.append(ManifestEntry(str(obj["id"]), obj.get("ref", ""), obj.get("posterior"),
                                 obj.get("embeddings"), obj.get("biasing_list")))
    return out


# bias graph text dump

def dump_graph(g: BiasGraph) -> str:
    """Deterministic text form: header, phrases, states, arcs."""
    lines = [f"graph states={g.num_states} s={g.s!r} blank={g.blank_id}"]
    for pid, p in enumerate(g.phrases):
        lines.append(f"phrase {pid} {' '.join(map(str, p))}")
    for n in range(g.num_states):
        outs = ",".join(map(str, g.outputs[n])) or "-"
        term = ",".join(map(str, g.terminal[n])) or "-"
        lines.append(f"state {n} depth={g.depth[n]} fail={g.fail[n]} end={term} out={outs}")
    for n in range(g.num_states):
        for tok, dst in sorted(g.goto[n].items()):
            lines.append(f"arc {n} {tok} {dst}")
    return "\n".join(lines) + "\n"


def parse_graph(text: str) -> BiasGraph:
    lines = text.splitlines()
    try:
        head = dict(kv.split("=") for kv in lines[0].split()[1:])
        n = int(head["states"])
        g = BiasGraph(phrases=[], s=float(head["s"]), blank_id=int(head["blank"]),
                      goto=[{} for _ in range(n)], fail=[0] * n, depth=[0] * n,
                      terminal=[()] * n, outputs=[()] * n)
        ids = lambda v: () if v == "-" else tuple(int(x) for x in v.split(","))
        for no, line in enumerate(lines[1:], start=2):
            kind, *rest = line.split()
            if kind == "phrase":
                g.phrases.append(tuple(int(x) for x in rest[1:]))
            elif kind == "state":
                i = int(rest[0])
                f = dict(kv.split("=") for kv in rest[1:])
                g.depth[i], g.fail[i] = int(f["depth"]), int(f["fail"])
                g.terminal[i], g.outputs[i] = ids(f["end"]), ids(f["out"])
            elif kind == "arc":
                src, tok, dst = map(int, rest)
                g.goto[src][tok] = dst
            else:
                raise FormatError(f"line {no}: unknown record {kind!r}")
    except (ValueError, KeyError, IndexError) as e:
        if isinstance(e, FormatError):
            raise
        raise FormatError(f"malformed graph dump: {e}") from None
    return g


# filter report

def format_filter_report(report: FilterReport, vocab: Vocab | None = None) -> str:
    lines = ["phrase\tpsc\tsoc\tkept"]
    for s in report.scores:
        name = vocab.detokenize(s.phrase) if vocab else " ".join(map(str, s.phrase))
        soc = "-" if s.soc is None else repr(s.soc)
        lines.append(f"{name}\t{s.psc!r}\t{soc}\t{int(s.kept)}")
    return "\n".join(lines) + "\n"


def parse_filter_report(text: str, vocab: Vocab | None = None) -> FilterReport:
    rows = text.splitlines()
    if not rows or rows[0] != "phrase\tpsc\tsoc\tkept":
        raise FormatError("line 1: bad filter report header")
    scores = []
    for no, line in enumerate(rows[1:], start=2):
        parts = line.split("\t")
        if len(parts) != 4:
            raise FormatError(f"line {no}: expected 4 tab-separated fields, got {len(parts)}")
        name, a, b, k = parts
        phrase = vocab.tokenize(name, f"line {no}") if vocab else tuple(int(x) for x in name.split())
        scores.append(PhraseScore(phrase, float(a), None if b == "-" else float(b), k == "1"))
    return FilterReport(scores)


# run configuration

def _opt(default, help: str, **extra):
    return field(default=default, metadata={"help": help, **extra})


@dataclass
class RunConfig:
    """Every tunable of a run; JSON keys are the field names."""

    manifest: str | None = _opt(None, "corpus manifest (JSON lines)", path=True)
    weights: str | None = _opt(None, "weight bundle directory", path=True)
    vocab: str | None = _opt(None, "vocabulary file, line 0 is blank", path=True)
    biasing_list: str | None = _opt(None, "phrase list shared by all utterances", path=True)
    lexicon: str | None = _opt(None, "homophone lexicon (TSV)", path=True)
    mode: str = _opt("baseline", "baseline or +-joined methods: implicit, explicit, sf, all")
    beam: int = _opt(10, "CTC prefix beam width")
    token_topk: int = _opt(20, "candidate tokens per frame in beam search (0 = all)")
    context_beam: int = _opt(10, "beam width over the context decoder posterior")
    bias_top_k: int = _opt(0, "context paths used for explicit bias (0 = whole beam)")
    bias_score: float = _opt(3.0, "explicit bias score in nats")
    graph_score: float = _opt(1.0, "bias graph score per token")
    q: float = _opt(-6.0, "filter confidence threshold")
    p: float | None = _opt(None, "filter mismatch penalty (default 2*q)")
    window_factor: float = _opt(1.5, "filter window length as a multiple of phrase length")
    filter: bool = _opt(True, "filter the biasing list before biasing")
    stage2: bool = _opt(True, "run the order-aware second filtering stage")
    implicit_weight: float | None = _opt(None, "implicit weight (default by cascade size)")
    explicit_weight: float | None = _opt(None, "explicit weight (default by cascade size)")
    sf_weight: float | None = _opt(None, "shallow fusion weight (default by cascade size)")
    full_recompute: bool = _opt(False, "recompute every posterior row after implicit bias")
    lambda1: float = _opt(0.3, "CTC loss weight")
    lambda2: float = _opt(0.2, "bias loss weight")
    smoothing_eps: float = _opt(0.1, "label smoothing")
    augment_prob: float = _opt(0.1, "homophone replacement probability per sampled phrase")
    seed: int = _opt(0, "random seed")
    jobs: int = _opt(1, "parallel utterance workers")

    @property
    def penalty(self) -> float:
        return 2 * self.q if self.p is None else self.p

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"


CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, value):
    f = CONFIG_FIELDS[name]
    if value is None:
        return None
    kind = f.type
    if "bool" in kind:
        if not isinstance(value, bool):
            raise FormatError(f"config key {name!r} must be true or false")
        return value
    if "int" in kind and "float" not in kind:
        if isinstance(value, bool) or not isinstance(value, int):
            raise FormatError(f"config key {name!r} must be an integer")
        return value
    if "float" in kind:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise FormatError(f"config key {name!r} must be a number")
        return float(value)
    if not isinstance(value, str):
        raise FormatError(f"config key {name!r} must be a string")
    return value


def config_from_dict(d: dict, base_dir: Path | None = None) -> RunConfig:
    unknown = sorted(set(d) - set(CONFIG_FIELDS))
    if unknown:
        raise FormatError(f"unknown config keys: {', '.join(unknown)}")
    values = {k: _coerce(k, v) for k, v in d.items()}
    if base_dir is not None:
        for k, v in values.items():
            if v is not None and CONFIG_FIELDS[k].metadata.get("path"):
                values[k] = str((base_dir / v)) if not Path(v).is_absolute() else v
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    try:
        d = json.loads(_read_text(path))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}:{e.lineno}: {e.msg}") from None
    if not isinstance(d, dict):
        raise FormatError(f"{path}: config must be a JSON object")
    return config_from_dict(d, Path(path).parent)


def save_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(cfg.to_json(), encoding="utf-8")
