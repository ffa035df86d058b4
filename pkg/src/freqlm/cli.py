"""Command-line pipeline: synth -> vocab -> partition -> train -> generate -> evaluate.

One JSON config document drives everything; any key can be overridden on
the command line with --set dotted.path=value (values parsed as JSON,
falling back to strings). Every run prints and stamps a short hash of
the effective config so artifacts can be traced back. Exit codes: 0
success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import os

# Thread cap must land in the environment before numpy initializes its
# BLAS; this module is imported before main() runs, so do it here.
_threads = os.environ.get("FREQLM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import copy
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import (CHECKPOINT_FORMAT_VERSION, GENERATIONS_FORMAT_VERSION,
               PARTITION_FORMAT_VERSION, ConfigError, DataError, NumericError,
               __version__)
from .corpus import (FrequencyTable, Vocabulary, build_frequency_table, load_split,
                     make_tokenizer, read_documents, train_bpe, WordBpe)
from .decoding import DecodeConfig, load_generations, save_generations, generate_batch
from .metrics import (DEFAULT_BUCKET_CUTS, EvalReport, evaluate_generations,
                      report_tsv, write_report)
from .model import Model, ModelConfig
from .partition import ClassPartition, make_partition
from .synth import SynthConfig, write_corpus
from .training import TrainConfig, load_checkpoint, perplexity, save_checkpoint, train

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "out_dir": "runs/default",
    "run_name": None,  # defaults to model.head_type
    "corpus": {"train": None, "valid": None, "test": None},
    "synth": {
        "num_function": 40, "num_content": 960, "num_topics": 30,
        "zipf_function": 1.2, "zipf_content": 1.0, "zipf_topic": 0.8,
        "topics_per_doc": 2, "p_function_to_function": 0.35,
        "p_content_to_function": 0.65, "doc_len_min": 60, "doc_len_max": 160,
        "train_tokens": 200000, "valid_tokens": 20000, "test_tokens": 30000,
    },
    "tokenizer": {"mode": "whitespace", "num_merges": 200, "mark_word_end": True},
    "vocab": {"max_size": 2000},
    "partition": {"strategy": "mefmax", "k": None},
    "model": {
        "layers": 2, "hidden_dim": 64, "heads": 2, "head_dim": 32, "ffn_dim": 256,
        "dropout": 0.1, "sequence_length": 128, "head_type": "f2",
        "head_bias": False, "tie_embeddings": False,
    },
    "train": {
        "batch_size": 16, "learning_rate": 3e-4, "beta1": 0.9, "beta2": 0.999,
        "eps": 1e-8, "clip_norm": 0.25, "weight_decay": 0.0,
        "total_steps": 500, "eval_interval": 50,
    },
    "decode": {"strategy": "topk", "k": 10, "mode": "decoupled", "max_new_tokens": 100},
    "generate": {"prefix_tokens": 50, "continuation_tokens": 100, "num_prefixes": 32},
    "metrics": {"kld_direction": "gen_ref", "bleu_smooth": False,
                "bucket_cuts": list(DEFAULT_BUCKET_CUTS)},
}


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------


def _deep_merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _deep_merge(base[key], val, here)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for key in keys[:-1]:
        if not isinstance(node, dict) or key not in node:
            raise ConfigError(f"unknown config key: {dotted}")
        node = node[key]
    if not isinstance(node, dict) or keys[-1] not in node:
        raise ConfigError(f"unknown config key: {dotted}")
    node[keys[-1]] = value


def load_config(path: str | None, overrides) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            file_cfg = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {p} is not valid JSON: {e}") from e
        cfg = _deep_merge(cfg, file_cfg)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        apply_override(cfg, key.strip(), _parse_value(raw))
    return cfg


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]


def _write_sidecar(artifact: Path, cfg: dict, kind: str, extra: dict | None = None) -> None:
    """Line-oriented formats can't embed metadata, so it rides alongside."""
    meta = {"artifact": kind, "config_hash": config_hash(cfg), "tool_version": __version__}
    if extra:
        meta.update(extra)
    Path(str(artifact) + ".meta.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Shared artifact helpers
# ---------------------------------------------------------------------------


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _run_name(cfg: dict) -> str:
    return cfg["run_name"] or cfg["model"]["head_type"]


def _corpus_paths(cfg: dict) -> dict:
    paths = dict(cfg["corpus"])
    out = Path(cfg["out_dir"])
    for split in ("train", "valid", "test"):
        if paths.get(split) is None:
            candidate = out / "corpus" / f"{split}.txt"
            paths[split] = str(candidate)
    for split, p in paths.items():
        if not Path(p).exists():
            raise DataError(f"{split} corpus file not found: {p}")
    return paths


def _tokenizer(cfg: dict, out: Path):
    tok_cfg = cfg["tokenizer"]
    mode = tok_cfg["mode"]
    if mode == "whitespace":
        return make_tokenizer("whitespace")
    if mode == "bpe":
        merges_path = out / "merges.txt"
        if not merges_path.exists():
            raise DataError(f"merge list not found (run the vocab command first): {merges_path}")
        return WordBpe.load_merges(merges_path, mark_word_end=tok_cfg["mark_word_end"])
    raise ConfigError(f"unknown tokenizer mode {mode!r}")


def _load_vocab_artifacts(cfg: dict, out: Path):
    vocab_path = out / "vocab.txt"
    freq_path = out / "freq.txt"
    if not vocab_path.exists() or not freq_path.exists():
        raise DataError(f"vocabulary artifacts missing in {out} (run the vocab command first)")
    vocab = Vocabulary.load(vocab_path)
    freq = FrequencyTable.load(freq_path)
    if len(freq) != len(vocab):
        raise DataError("frequency table and vocabulary disagree on size")
    return vocab, freq


def _load_partition(cfg: dict, out: Path, vocab_size: int) -> ClassPartition:
    p = out / "partition.json"
    if not p.exists():
        raise DataError(f"partition file not found (run the partition command first): {p}")
    part = ClassPartition.load(p)
    if part.vocab_size != vocab_size:
        raise DataError(
            f"partition covers {part.vocab_size} tokens but vocabulary has {vocab_size}")
    return part


def _model_config(cfg: dict, vocab_size: int) -> ModelConfig:
    m = dict(cfg["model"])
    m["vocab_size"] = vocab_size
    m["seed"] = cfg["seed"]
    try:
        mc = ModelConfig.from_dict(m)
    except TypeError as e:
        raise ConfigError(f"bad model config: {e}") from e
    mc.validate()
    return mc


def _train_config(cfg: dict) -> TrainConfig:
    try:
        tc = TrainConfig.from_dict(cfg["train"])
    except TypeError as e:
        raise ConfigError(f"bad train config: {e}") from e
    tc.validate()
    return tc


def _decode_config(cfg: dict) -> DecodeConfig:
    d = dict(cfg["decode"])
    d["seed"] = cfg["seed"]
    try:
        dc = DecodeConfig.from_dict(d)
    except TypeError as e:
        raise ConfigError(f"bad decode config: {e}") from e
    dc.validate()
    return dc


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: dict) -> None:
    out = _out_dir(cfg)
    s = dict(cfg["synth"])
    sizes = {k: s.pop(f"{k}_tokens") for k in ("train", "valid", "test")}
    scfg = SynthConfig(**s, seed=cfg["seed"])
    scfg.validate()
    paths = write_corpus(out / "corpus", scfg, sizes["train"], sizes["valid"], sizes["test"])
    for split, p in paths.items():
        _write_sidecar(Path(p), cfg, f"corpus-{split}")
        print(f"wrote {split}: {p}")
    print(f"config {config_hash(cfg)}")


def cmd_vocab(cfg: dict) -> None:
    out = _out_dir(cfg)
    paths = _corpus_paths(cfg)
    tok_cfg = cfg["tokenizer"]
    train_text = Path(paths["train"]).read_text(encoding="utf-8")
    if tok_cfg["mode"] == "bpe":
        merges = train_bpe(train_text, tok_cfg["num_merges"], tok_cfg["mark_word_end"])
        tokenizer = WordBpe(merges, mark_word_end=tok_cfg["mark_word_end"])
        tokenizer.save_merges(out / "merges.txt")
        _write_sidecar(out / "merges.txt", cfg, "merges")
        print(f"wrote merges: {out / 'merges.txt'} ({len(merges)} merges)")
    else:
        tokenizer = _tokenizer(cfg, out)
    docs = read_documents(paths["train"])
    vocab = Vocabulary.build((tokenizer.tokenize(d) for d in docs),
                             max_size=cfg["vocab"]["max_size"])
    stream = load_split(paths["train"], tokenizer, vocab, "train")
    freq = build_frequency_table(stream, vocab)
    vocab.save(out / "vocab.txt")
    _write_sidecar(out / "vocab.txt", cfg, "vocab", {"size": len(vocab)})
    freq.save(out / "freq.txt")
    _write_sidecar(out / "freq.txt", cfg, "freq", {"total": int(freq.total)})
    print(f"wrote vocab: {out / 'vocab.txt'} ({len(vocab)} tokens)")
    print(f"wrote freq: {out / 'freq.txt'} ({freq.total} training tokens)")
    print(f"config {config_hash(cfg)}")


def cmd_partition(cfg: dict) -> None:
    out = _out_dir(cfg)
    _, freq = _load_vocab_artifacts(cfg, out)
    strategy = cfg["partition"]["strategy"]
    k = cfg["partition"]["k"]
    try:
        part = make_partition(freq, strategy, k)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    part.save(out / "partition.json")
    _write_sidecar(out / "partition.json", cfg, "partition")
    s = part.score
    print(f"wrote partition: {out / 'partition.json'}")
    print(f"strategy {strategy}  classes {part.num_classes}")
    print(f"score {s.total:.6f} (class {s.class_efficiency:.6f} "
          f"+ within {s.mean_within_efficiency:.6f})")
    sizes = ",".join(str(part.class_size(c)) for c in range(part.num_classes))
    print(f"class sizes {sizes}")
    print(f"config {config_hash(cfg)}")


def cmd_train(cfg: dict) -> None:
    out = _out_dir(cfg)
    paths = _corpus_paths(cfg)
    vocab, freq = _load_vocab_artifacts(cfg, out)
    tokenizer = _tokenizer(cfg, out)
    mcfg = _model_config(cfg, len(vocab))
    partition = _load_partition(cfg, out, len(vocab)) if mcfg.head_type == "f2" else None
    model = Model(mcfg, partition)
    tcfg = _train_config(cfg)
    train_stream = load_split(paths["train"], tokenizer, vocab, "train")
    valid_stream = load_split(paths["valid"], tokenizer, vocab, "valid")
    name = _run_name(cfg)

    def log(step, loss, valid):
        if valid is not None:
            print(f"step {step}  train {loss:.4f}  valid {valid:.4f}")

    result = train(model, train_stream, valid_stream, tcfg,
                   curve_path=out / f"{name}_loss.csv", log=log)
    ckpt = out / f"{name}.ckpt"
    save_checkpoint(ckpt, model, result.optimizer, result.step, tcfg,
                    extra={"config_hash": config_hash(cfg)})
    print(f"wrote checkpoint: {ckpt}")
    print(f"wrote loss curve: {out / (name + '_loss.csv')}")
    print(f"final train loss {result.final_train_loss():.4f}")
    print(f"config {config_hash(cfg)}")


def slice_eval_windows(ids: np.ndarray, prefix_tokens: int, continuation_tokens: int,
                       num_prefixes: int | None):
    """Consecutive (prefix, reference continuation) windows of the stream."""
    window = prefix_tokens + continuation_tokens
    n = ids.shape[0] // window
    if num_prefixes is not None:
        n = min(n, num_prefixes)
    if n == 0:
        raise DataError(
            f"test stream too short for one {window}-token evaluation window")
    prefixes = [ids[i * window : i * window + prefix_tokens] for i in range(n)]
    refs = [ids[i * window + prefix_tokens : (i + 1) * window] for i in range(n)]
    return prefixes, refs


def cmd_generate(cfg: dict, checkpoint: str | None = None) -> None:
    out = _out_dir(cfg)
    paths = _corpus_paths(cfg)
    vocab, freq = _load_vocab_artifacts(cfg, out)
    tokenizer = _tokenizer(cfg, out)
    name = _run_name(cfg)
    ckpt_path = Path(checkpoint) if checkpoint else out / f"{name}.ckpt"
    model, _, step, header = load_checkpoint(ckpt_path)
    if model.config.vocab_size != len(vocab):
        raise DataError("checkpoint vocabulary size does not match vocab artifacts")
    test_stream = load_split(paths["test"], tokenizer, vocab, "test")
    gcfg = cfg["generate"]
    dcfg = _decode_config(cfg)
    dcfg.max_new_tokens = gcfg["continuation_tokens"]
    prefixes, _ = slice_eval_windows(test_stream.ids, gcfg["prefix_tokens"],
                                     gcfg["continuation_tokens"], gcfg["num_prefixes"])
    records = generate_batch(model, prefixes, dcfg, eos_id=None)
    ppl = perplexity(model, test_stream)
    meta = {
        "format_version": GENERATIONS_FORMAT_VERSION,
        "config_hash": config_hash(cfg),
        "checkpoint": str(ckpt_path),
        "checkpoint_step": step,
        "head_type": model.config.head_type,
        "decode": dcfg.to_dict(),
        "ppl": round(float(ppl), 6),
        "tool_version": __version__,
    }
    gen_path = out / f"{name}_gens.jsonl"
    save_generations(gen_path, records, meta)
    print(f"wrote generations: {gen_path} ({len(records)} continuations)")
    print(f"test ppl {ppl:.3f}")
    print(f"config {config_hash(cfg)}")


def cmd_evaluate(cfg: dict, generation_files, names=None, tsv: bool = False) -> None:
    out = _out_dir(cfg)
    paths = _corpus_paths(cfg)
    vocab, freq = _load_vocab_artifacts(cfg, out)
    tokenizer = _tokenizer(cfg, out)
    test_stream = load_split(paths["test"], tokenizer, vocab, "test")
    gcfg = cfg["generate"]
    _, refs = slice_eval_windows(test_stream.ids, gcfg["prefix_tokens"],
                                 gcfg["continuation_tokens"], gcfg["num_prefixes"])
    ref_texts = [list(map(int, r)) for r in refs]
    mcfg = cfg["metrics"]
    rows: dict[str, EvalReport] = {}
    rows["reference"] = evaluate_generations(
        ref_texts, ref_texts, freq=freq, ppl=None,
        kld_direction=mcfg["kld_direction"], bleu_smooth=mcfg["bleu_smooth"],
        bucket_cuts=tuple(mcfg["bucket_cuts"]))
    if names is not None and len(names) != len(generation_files):
        raise ConfigError("--names must list one name per generations file")
    for i, gf in enumerate(generation_files):
        records, meta = load_generations(gf)
        if not records:
            raise DataError(f"no generation records in {gf}")
        version = meta.get("format_version")
        if version is not None and version != GENERATIONS_FORMAT_VERSION:
            raise DataError(
                f"generations format version mismatch in {gf}: file has {version}, "
                f"expected {GENERATIONS_FORMAT_VERSION}")
        gen_texts = [r.tokens for r in records]
        row_name = names[i] if names else (meta.get("head_type") or Path(gf).stem)
        rows[row_name] = evaluate_generations(
            gen_texts, ref_texts, freq=freq, ppl=meta.get("ppl"),
            kld_direction=mcfg["kld_direction"], bleu_smooth=mcfg["bleu_smooth"],
            bucket_cuts=tuple(mcfg["bucket_cuts"]))
    report_path = out / "report.json"
    write_report(report_path, rows, meta={
        "config_hash": config_hash(cfg),
        "kld_direction": mcfg["kld_direction"],
        "bucket_cuts": list(mcfg["bucket_cuts"]),
        "tool_version": __version__,
    })
    print(f"wrote report: {report_path}")
    if tsv:
        tsv_path = out / "report.tsv"
        tsv_path.write_text(report_tsv(rows), encoding="utf-8")
        print(f"wrote table: {tsv_path}")
    for name, rep in rows.items():
        d = rep.to_dict()
        ppl = "-" if d["ppl"] is None else f"{d['ppl']:.2f}"
        print(f"{name}: ppl {ppl}  kld {d['kld']:.4f}  msj2 {d['msj']['2']:.4f}  "
              f"uniq {d['uniq']}")
    print(f"config {config_hash(cfg)}")


def cmd_sweep(cfg: dict, over: str, run_eval: bool = True) -> None:
    """Run the train/generate/evaluate chain once per value of one config key.

    ``over`` looks like "partition.k=2,3,5"; each run writes into its own
    subdirectory out_dir/sweep/<key>=<value>/ and the collected reports
    land in out_dir/sweep_report.json.
    """
    if "=" not in over:
        raise ConfigError(f"--over expects key=v1,v2,..., got {over!r}")
    key, _, raw_values = over.partition("=")
    key = key.strip()
    values = [_parse_value(v) for v in raw_values.split(",") if v != ""]
    if not values:
        raise ConfigError("--over lists no values")
    base_out = _out_dir(cfg)
    collected = {}
    for value in values:
        sub = copy.deepcopy(cfg)
        apply_override(sub, key, value)
        sub["out_dir"] = str(base_out / "sweep" / f"{key}={value}")
        print(f"=== sweep {key}={value} -> {sub['out_dir']}")
        corpus_missing = any(sub["corpus"].get(s) is None
                             and not (Path(sub["out_dir"]) / "corpus" / f"{s}.txt").exists()
                             for s in ("train", "valid", "test"))
        if corpus_missing:
            cmd_synth(sub)
        cmd_vocab(sub)
        cmd_partition(sub)
        cmd_train(sub)
        cmd_generate(sub)
        if run_eval:
            name = _run_name(sub)
            cmd_evaluate(sub, [str(Path(sub["out_dir"]) / f"{name}_gens.jsonl")],
                         names=[f"{key}={value}"])
            report = json.loads((Path(sub["out_dir"]) / "report.json").read_text())
            collected[str(value)] = report["rows"]
    summary = {"swept_key": key, "values": [str(v) for v in values],
               "config_hash": config_hash(cfg), "rows": collected}
    summary_path = base_out / "sweep_report.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                            encoding="utf-8")
    print(f"wrote sweep summary: {summary_path}")


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="freqlm",
        description="Frequency-balanced language model training and evaluation. "
                    "Set FREQLM_THREADS to cap BLAS thread count.")
    parser.add_argument("--version", action="version", version=f"freqlm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (dotted path, JSON value)")
        return p

    add("synth", "write the bundled synthetic corpus splits")
    add("vocab", "build tokenizer artifacts, vocabulary, and frequency table")
    add("partition", "compute the frequency-class partition")
    add("train", "train a model (head type per config)")
    p_gen = add("generate", "generate continuations from test-set prefixes")
    p_gen.add_argument("--checkpoint", default=None, help="checkpoint path override")
    p_eval = add("evaluate", "score generation files against the test reference")
    p_eval.add_argument("--generations", nargs="+", required=True,
                        help="one or more generations .jsonl files")
    p_eval.add_argument("--names", nargs="*", default=None,
                        help="report row names, one per generations file")
    p_eval.add_argument("--tsv", action="store_true", help="also write report.tsv")
    p_sweep = add("sweep", "run the pipeline once per value of one config key")
    p_sweep.add_argument("--over", required=True, metavar="KEY=V1,V2,...",
                         help="config key and comma-separated values to sweep")
    p_sweep.add_argument("--no-eval", action="store_true",
                         help="skip evaluation inside the sweep")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        if args.command == "synth":
            cmd_synth(cfg)
        elif args.command == "vocab":
            cmd_vocab(cfg)
        elif args.command == "partition":
            cmd_partition(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "generate":
            cmd_generate(cfg, args.checkpoint)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.generations, args.names, args.tsv)
        elif args.command == "sweep":
            cmd_sweep(cfg, args.over, run_eval=not args.no_eval)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
