import json

import pytest

from corank.cli import main
from corank.evalkit import evaluate_run, parse_qrels, parse_run, run_to_rankings
from corank.synthetic import generate, write_collection

TINY_CONFIG = """\
hidden=16
heads=2
base_layers=1
calib_layers=1
group_layers=1
vocab_size=256
max_seq_len=24
window=16
stride=8
epochs=1
n=6
m=2
o=1
k=12
base_lr=1e-3
first_pass_epochs=1
first_pass_lr=1e-3
seed=0
"""


def run_cli(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    col = generate(n_queries=5, docs_per_query=12, n_anchors=2, seed=0)
    write_collection(col, d)
    (d / "tiny.cfg").write_text(TINY_CONFIG)
    assert run_cli("index", "--corpus", d / "corpus.jsonl", "--out", d / "idx") == 0
    assert run_cli("search", "--index", d / "idx", "--queries", d / "queries.tsv",
                   "--k", 12, "--out", d / "bm25.txt") == 0
    assert run_cli("train", "--corpus", d / "corpus.jsonl", "--queries", d / "queries.tsv",
                   "--run", d / "bm25.txt", "--qrels", d / "qrels.txt", "--config",
                   d / "tiny.cfg", "--fold", "none", "--out", d / "model") == 0
    return d


def rerank(d, out, *extra):
    return run_cli("rerank", "--corpus", d / "corpus.jsonl", "--queries", d / "queries.tsv",
                   "--run", d / "bm25.txt", "--model", d / "model" / "model.bin",
                   "--out", out, *extra)


class TestPipeline:
    def test_search_run(self, work):
        run = run_to_rankings(parse_run(work / "bm25.txt"))
        assert len(run) == 5
        assert all(len(docs) <= 12 for docs in run.values())

    def test_train_outputs(self, work):
        names = {p.name for p in (work / "model").iterdir()}
        assert {"model.bin", "history.json", "manifest.json"} <= names
        hist = json.loads((work / "model" / "history.json").read_text())
        assert hist["selected_epoch"] == 1

    def test_rerank_keeps_candidates(self, work, tmp_path):
        assert rerank(work, tmp_path / "r.txt") == 0
        before = run_to_rankings(parse_run(work / "bm25.txt"))
        after = run_to_rankings(parse_run(tmp_path / "r.txt"))
        assert {q: sorted(d) for q, d in before.items()} == {q: sorted(d) for q, d in after.items()}

    def test_eval_matches_evalkit(self, work, capsys):
        capsys.readouterr()
        assert run_cli("eval", "--run", work / "bm25.txt", "--qrels", work / "qrels.txt",
                       "--cut", 20) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        expect = evaluate_run(run_to_rankings(parse_run(work / "bm25.txt")),
                              parse_qrels(work / "qrels.txt"), 20)
        assert lines == [f"{name}\tall\t{r.mean:.6f}" for name, r in expect.items()]

    def test_eval_baseline(self, work, capsys):
        capsys.readouterr()
        assert run_cli("eval", "--run", work / "bm25.txt", "--qrels", work / "qrels.txt",
                       "--baseline", work / "bm25.txt") == 0
        out = capsys.readouterr().out
        assert out.count("t-test") == 3

    def test_cv_files(self, work, tmp_path):
        assert run_cli("cv", "--queries", work / "queries.tsv", "--out", tmp_path / "cv") == 0
        tests = [q for i in range(5)
                 for q in (tmp_path / "cv" / f"fold{i}" / "test.qids").read_text().split()]
        qids = [line.split("\t")[0] for line in (work / "queries.tsv").read_text().splitlines()]
        assert sorted(tests) == sorted(qids)
        assert (tmp_path / "cv" / "manifest.json").exists()

    def test_flops_rows(self, work, capsys):
        capsys.readouterr()
        assert run_cli("flops", "--config", work / "tiny.cfg", "--queries", 3) == 0
        rows = capsys.readouterr().out.strip().splitlines()
        assert [r.split("\t")[0] for r in rows[1:]] == ["first-pass", "full", "prf-only",
                                                         "group-only"]


class TestInvariants:
    def test_byte_identical_runs(self, work, tmp_path):
        assert rerank(work, tmp_path / "a.txt") == 0
        assert rerank(work, tmp_path / "b.txt") == 0
        assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()

    def test_byte_identical_training(self, work, tmp_path):
        assert run_cli("train", "--corpus", work / "corpus.jsonl", "--queries",
                       work / "queries.tsv", "--run", work / "bm25.txt", "--qrels",
                       work / "qrels.txt", "--config", work / "tiny.cfg", "--fold", "none",
                       "--out", tmp_path / "m") == 0
        assert (tmp_path / "m" / "model.bin").read_bytes() == \
            (work / "model" / "model.bin").read_bytes()

    def test_group_only_ignores_m(self, work, tmp_path):
        for m in (1, 2, 4):
            assert rerank(work, tmp_path / f"g{m}.txt", "--variant", "group-only",
                          "--m", m, "--tag", "g") == 0
        ref = (tmp_path / "g1.txt").read_bytes()
        assert (tmp_path / "g2.txt").read_bytes() == ref
        assert (tmp_path / "g4.txt").read_bytes() == ref

    def test_no_residual_changes_full_only(self, work, tmp_path):
        for variant in ("full", "group-only"):
            assert rerank(work, tmp_path / f"{variant}.txt", "--variant", variant,
                          "--tag", "t") == 0
            assert rerank(work, tmp_path / f"{variant}-nr.txt", "--variant", variant,
                          "--tag", "t", "--no-residual") == 0
        assert (tmp_path / "full.txt").read_bytes() != (tmp_path / "full-nr.txt").read_bytes()
        # group-only never calibrates, so the averaging flag has nothing to act on
        assert (tmp_path / "group-only.txt").read_bytes() == \
            (tmp_path / "group-only-nr.txt").read_bytes()

    def test_manifest_contents(self, work, tmp_path):
        assert rerank(work, tmp_path / "r.txt") == 0
        man = json.loads((tmp_path / "r.txt.manifest.json").read_text())
        assert man["command"] == "rerank"
        assert man["seed"] == 0
        assert len(man["config_hash"]) > 8
        assert set(man["versions"]) == {"corank", "numpy", "scipy", "python"}
        assert (work / "idx" / "manifest.json").exists()
        assert (work / "bm25.txt.manifest.json").exists()


class TestErrors:
    def test_unknown_flag(self, work):
        with pytest.raises(SystemExit) as exc:
            run_cli("eval", "--run", work / "bm25.txt", "--qrels", work / "qrels.txt", "--bogus")
        assert exc.value.code == 2

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as exc:
            run_cli("serve")
        assert exc.value.code == 2

    def test_missing_file_named(self, work, capsys):
        assert run_cli("eval", "--run", work / "nope.txt", "--qrels", work / "qrels.txt") == 1
        assert "nope.txt" in capsys.readouterr().err

    def test_malformed_run_named(self, work, tmp_path, capsys):
        bad = tmp_path / "bad.txt"
        bad.write_text("1 Q0 d1\n")
        assert run_cli("eval", "--run", bad, "--qrels", work / "qrels.txt") == 1
        assert "bad.txt" in capsys.readouterr().err

    def test_bad_config_named(self, work, tmp_path, capsys):
        cfg = tmp_path / "x.cfg"
        cfg.write_text("hiden=3\n")
        assert run_cli("flops", "--config", cfg, "--queries", 1) == 1
        err = capsys.readouterr().err
        assert "x.cfg" in err and "hiden" in err

    def test_invalid_override(self, work, capsys):
        assert rerank(work, work / "never.txt", "--n", 4, "--o", 4) == 1
        assert "overlap" in capsys.readouterr().err

    def test_unknown_document(self, work, tmp_path, capsys):
        run = tmp_path / "run.txt"
        run.write_text("1 Q0 ghost 1 1.0 x\n")
        assert rerank(work, tmp_path / "o.txt") == 0  # sanity: valid inputs work
        assert run_cli("rerank", "--corpus", work / "corpus.jsonl", "--queries",
                       work / "queries.tsv", "--run", run, "--model",
                       work / "model" / "model.bin", "--out", tmp_path / "o2.txt") == 1
        assert "ghost" in capsys.readouterr().err
