"""Command-line pipeline tests (driven through main(), in process)."""

import json
from pathlib import Path

import numpy as np
import pytest

from freqlm import DataError
from freqlm.cli import main, slice_eval_windows
from freqlm.corpus import FrequencyTable, Vocabulary
from freqlm.partition import (
    ClassPartition,
    max_class_count,
    relative_masses,
    score_partition,
    sort_by_frequency,
    sweep_boundaries,
)

TINY_CORPUS = "b a\n\na b b\n\nc\n"


def write_tiny_corpus(root: Path) -> list:
    """Three identical splits; returns the --set overrides pointing at them."""
    overrides = []
    for split in ("train", "valid", "test"):
        p = root / f"{split}.txt"
        p.write_text(TINY_CORPUS, encoding="utf-8")
        overrides += ["--set", f"corpus.{split}={p}"]
    return overrides


class TestConfigHandling:
    def test_unknown_set_key(self, tmp_path, capsys):
        assert main(["synth", "--set", "nope=1",
                     "--set", f"out_dir={tmp_path}"]) == 2
        assert "nope" in capsys.readouterr().err

    def test_unknown_nested_key(self, tmp_path):
        assert main(["synth", "--set", "model.window=5",
                     "--set", f"out_dir={tmp_path}"]) == 2

    def test_set_needs_equals(self, tmp_path):
        assert main(["synth", "--set", "seed", "--set", f"out_dir={tmp_path}"]) == 2

    def test_config_file_must_exist(self, tmp_path):
        assert main(["synth", "--config", str(tmp_path / "none.json")]) == 2

    def test_config_file_must_be_json(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["synth", "--config", str(bad)]) == 2

    def test_config_file_keys_validated(self, tmp_path):
        bad = tmp_path / "cfg.json"
        bad.write_text(json.dumps({"modle": {}}))
        assert main(["synth", "--config", str(bad)]) == 2

    def test_config_file_merges_with_overrides(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"out_dir": str(tmp_path / "out"),
                                   "synth": {"doc_len_min": 10, "doc_len_max": 20}}))
        code = main(["synth", "--config", str(cfg),
                     "--set", "synth.train_tokens=200",
                     "--set", "synth.valid_tokens=50",
                     "--set", "synth.test_tokens=50"])
        assert code == 0
        assert (tmp_path / "out" / "corpus" / "train.txt").exists()

    def test_version_flag(self):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0


class TestVocabCommand:
    def test_hand_counted_artifacts(self, tmp_path):
        overrides = write_tiny_corpus(tmp_path)
        out = tmp_path / "out"
        assert main(["vocab", "--set", f"out_dir={out}", *overrides]) == 0
        vocab = Vocabulary.load(out / "vocab.txt")
        assert vocab.tokens == ["<unk>", "<eos>", "b", "a", "c"]
        freq = FrequencyTable.load(out / "freq.txt")
        # three documents add three eos; b:3 a:2 c:1; unk unseen
        assert freq.counts.tolist() == [0, 3, 3, 2, 1]
        assert freq.total == 9

    def test_runs_are_byte_identical(self, tmp_path):
        overrides = write_tiny_corpus(tmp_path)
        out = tmp_path / "out"
        args = ["vocab", "--set", f"out_dir={out}", *overrides]
        assert main(args) == 0
        first = {p.name: p.read_bytes() for p in (out / "vocab.txt", out / "freq.txt")}
        assert main(args) == 0
        for p in (out / "vocab.txt", out / "freq.txt"):
            assert p.read_bytes() == first[p.name]

    def test_missing_corpus_names_path(self, tmp_path, capsys):
        missing = tmp_path / "nowhere.txt"
        code = main(["vocab", "--set", f"out_dir={tmp_path}",
                     "--set", f"corpus.train={missing}"])
        assert code == 3
        assert str(missing) in capsys.readouterr().err

    def test_bpe_mode_writes_merges(self, tmp_path):
        overrides = write_tiny_corpus(tmp_path)
        out = tmp_path / "out"
        code = main(["vocab", "--set", f"out_dir={out}", *overrides,
                     "--set", "tokenizer.mode=bpe",
                     "--set", "tokenizer.num_merges=5"])
        assert code == 0
        assert (out / "merges.txt").exists()
        assert (out / "merges.txt.meta.json").exists()

    def test_sidecars_carry_config_hash(self, tmp_path):
        overrides = write_tiny_corpus(tmp_path)
        out = tmp_path / "out"
        assert main(["vocab", "--set", f"out_dir={out}", *overrides]) == 0
        meta = json.loads((out / "vocab.txt.meta.json").read_text())
        assert meta["artifact"] == "vocab"
        assert len(meta["config_hash"]) == 12


class TestPartitionCommand:
    def run_vocab(self, tmp_path, text):
        for split in ("train", "valid", "test"):
            (tmp_path / f"{split}.txt").write_text(text, encoding="utf-8")
        out = tmp_path / "out"
        overrides = []
        for split in ("train", "valid", "test"):
            overrides += ["--set", f"corpus.{split}={tmp_path / (split + '.txt')}"]
        assert main(["vocab", "--set", f"out_dir={out}", *overrides]) == 0
        return out, overrides

    def test_uniform_counts_collapse_to_one_class(self, tmp_path):
        # every token (incl. eos and the floored unk) appears once
        out, overrides = self.run_vocab(tmp_path, "a b c d\n")
        assert main(["partition", "--set", f"out_dir={out}", *overrides]) == 0
        part = ClassPartition.load(out / "partition.json")
        assert part.num_classes == 1

    def test_fixed_eq_token_out_of_range(self, tmp_path, capsys):
        out, overrides = self.run_vocab(tmp_path, "a b c d\n")
        code = main(["partition", "--set", f"out_dir={out}", *overrides,
                     "--set", "partition.strategy=fixed_eq_token",
                     "--set", "partition.k=99"])
        assert code == 2

    def test_requires_vocab_artifacts(self, tmp_path):
        overrides = write_tiny_corpus(tmp_path)
        assert main(["partition", "--set", f"out_dir={tmp_path / 'fresh'}",
                     *overrides]) == 3

    def test_mefmax_matches_rescoring_oracle(self, tmp_path):
        out = tmp_path / "out"
        assert main(["synth", "--set", f"out_dir={out}",
                     "--set", "synth.train_tokens=4000",
                     "--set", "synth.valid_tokens=300",
                     "--set", "synth.test_tokens=300"]) == 0
        assert main(["vocab", "--set", f"out_dir={out}"]) == 0
        assert main(["partition", "--set", f"out_dir={out}"]) == 0
        part = ClassPartition.load(out / "partition.json")
        freq = FrequencyTable.load(out / "freq.txt")
        masses = relative_masses(freq.counts)[sort_by_frequency(freq.counts)]
        best = max(
            (score_partition(masses, sweep_boundaries(masses, k)).total
             for k in range(1, max_class_count(freq.counts) + 1)))
        np.testing.assert_allclose(part.score.total, best, atol=1e-12)


class TestSliceEvalWindows:
    def test_consecutive_non_overlapping(self):
        ids = np.arange(1000)
        prefixes, refs = slice_eval_windows(ids, 50, 100, 3)
        assert len(prefixes) == len(refs) == 3
        for i in range(3):
            np.testing.assert_array_equal(prefixes[i], np.arange(i * 150, i * 150 + 50))
            np.testing.assert_array_equal(refs[i], np.arange(i * 150 + 50, (i + 1) * 150))

    def test_count_capped_by_stream(self):
        prefixes, _ = slice_eval_windows(np.arange(400), 50, 100, None)
        assert len(prefixes) == 2

    def test_too_short_stream(self):
        with pytest.raises(DataError):
            slice_eval_windows(np.arange(100), 50, 100, 8)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One small end-to-end CLI run shared by the assertion tests below."""
    out = tmp_path_factory.mktemp("cli_run")
    base = ["--set", f"out_dir={out}",
            "--set", "synth.train_tokens=4000",
            "--set", "synth.valid_tokens=600",
            "--set", "synth.test_tokens=1200",
            "--set", "train.total_steps=30",
            "--set", "train.eval_interval=10",
            "--set", "generate.prefix_tokens=30",
            "--set", "generate.continuation_tokens=40",
            "--set", "generate.num_prefixes=6"]
    codes = [
        main(["synth", *base]),
        main(["vocab", *base]),
        main(["partition", *base]),
        main(["train", *base]),
        main(["generate", *base]),
        main(["evaluate", *base, "--tsv",
              "--generations", str(out / "f2_gens.jsonl")]),
    ]
    return {"out": out, "base": base, "codes": codes}


class TestPipeline:
    def test_all_stages_succeed(self, pipeline):
        assert pipeline["codes"] == [0, 0, 0, 0, 0, 0]

    def test_artifacts_exist(self, pipeline):
        out = pipeline["out"]
        for name in ("vocab.txt", "freq.txt", "partition.json", "f2.ckpt",
                     "f2_loss.csv", "f2_gens.jsonl", "report.json", "report.tsv"):
            assert (out / name).exists(), name

    def test_loss_curve_shape(self, pipeline):
        lines = (pipeline["out"] / "f2_loss.csv").read_text().splitlines()
        assert lines[0] == "step,train_loss,valid_loss"
        assert len(lines) == 31
        # validation column filled at the eval interval
        assert lines[10].count(",") == 2 and not lines[10].endswith(",")

    def test_generations_meta(self, pipeline):
        meta_line = (pipeline["out"] / "f2_gens.jsonl").read_text().splitlines()[0]
        meta = json.loads(meta_line)["meta"]
        assert meta["head_type"] == "f2"
        assert meta["decode"]["max_new_tokens"] == 40
        assert meta["ppl"] > 0
        records = (pipeline["out"] / "f2_gens.jsonl").read_text().splitlines()[1:]
        assert len(records) == 6
        assert all(len(json.loads(r)["tokens"]) == 40 for r in records)

    def test_report_rows_and_reference_fixed_points(self, pipeline):
        payload = json.loads((pipeline["out"] / "report.json").read_text())
        rows = payload["rows"]
        assert set(rows) == {"reference", "f2"}
        ref = rows["reference"]
        assert ref["ppl"] is None
        assert ref["kld"] == 0.0
        assert ref["msj"]["1"] == 1.0 and ref["msj"]["3"] == 1.0
        f2 = rows["f2"]
        for key in ("ppl", "kld", "msj", "self_bleu", "distinct", "rep", "uniq",
                    "bucket_shares"):
            assert key in f2
        assert f2["ppl"] > 0
        shares = f2["bucket_shares"]
        np.testing.assert_allclose(sum(shares.values()), 1.0, atol=1e-9)

    def test_tsv_table(self, pipeline):
        lines = (pipeline["out"] / "report.tsv").read_text().splitlines()
        assert lines[0].split("\t")[:3] == ["name", "ppl", "kld"]
        assert len(lines) == 3
        ref_row = next(l for l in lines if l.startswith("reference\t"))
        assert ref_row.split("\t")[1] == "-"

    def test_generate_is_reproducible(self, pipeline):
        out, base = pipeline["out"], pipeline["base"]
        first = (out / "f2_gens.jsonl").read_bytes()
        assert main(["generate", *base]) == 0
        assert (out / "f2_gens.jsonl").read_bytes() == first

    def test_generate_with_explicit_checkpoint(self, pipeline):
        out, base = pipeline["out"], pipeline["base"]
        code = main(["generate", *base, "--checkpoint", str(out / "f2.ckpt")])
        assert code == 0

    def test_evaluate_rejects_foreign_format_version(self, pipeline, tmp_path, capsys):
        out, base = pipeline["out"], pipeline["base"]
        lines = (out / "f2_gens.jsonl").read_text().splitlines()
        meta = json.loads(lines[0])
        meta["meta"]["format_version"] = 41
        tampered = tmp_path / "tampered.jsonl"
        tampered.write_text("\n".join([json.dumps(meta)] + lines[1:]) + "\n")
        code = main(["evaluate", *base, "--generations", str(tampered)])
        assert code == 3
        err = capsys.readouterr().err
        assert "41" in err

    def test_evaluate_names_must_align(self, pipeline):
        out, base = pipeline["out"], pipeline["base"]
        code = main(["evaluate", *base,
                     "--generations", str(out / "f2_gens.jsonl"),
                     "--names", "a", "b"])
        assert code == 2

    def test_evaluate_custom_name(self, pipeline):
        out, base = pipeline["out"], pipeline["base"]
        code = main(["evaluate", *base,
                     "--generations", str(out / "f2_gens.jsonl"),
                     "--names", "balanced"])
        assert code == 0
        payload = json.loads((out / "report.json").read_text())
        assert "balanced" in payload["rows"]

    def test_train_requires_partition_for_f2(self, tmp_path):
        overrides = write_tiny_corpus(tmp_path)
        out = tmp_path / "out"
        assert main(["vocab", "--set", f"out_dir={out}", *overrides]) == 0
        assert main(["train", "--set", f"out_dir={out}", *overrides,
                     "--set", "train.total_steps=1"]) == 3  # partition.json missing


class TestSweep:
    def test_sweep_over_partition_k(self, tmp_path):
        out = tmp_path / "sweepout"
        base = ["--set", f"out_dir={out}",
                "--set", "synth.train_tokens=2000",
                "--set", "synth.valid_tokens=300",
                "--set", "synth.test_tokens=900",
                "--set", "partition.strategy=fixed_eq_freq",
                "--set", "train.total_steps=8",
                "--set", "train.eval_interval=8",
                "--set", "generate.prefix_tokens=20",
                "--set", "generate.continuation_tokens=25",
                "--set", "generate.num_prefixes=4"]
        code = main(["sweep", *base, "--over", "partition.k=2,3"])
        assert code == 0
        summary = json.loads((out / "sweep_report.json").read_text())
        assert summary["swept_key"] == "partition.k"
        assert set(summary["rows"]) == {"2", "3"}
        for value in ("2", "3"):
            sub = out / "sweep" / f"partition.k={value}"
            assert (sub / "f2.ckpt").exists()
            assert f"partition.k={value}" in summary["rows"][value]

    def test_sweep_rejects_malformed_over(self, tmp_path):
        assert main(["sweep", "--set", f"out_dir={tmp_path}", "--over", "nothing"]) == 2
        assert main(["sweep", "--set", f"out_dir={tmp_path}", "--over", "seed="]) == 2
