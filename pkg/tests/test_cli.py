import json
import subprocess
import sys

import pytest
import torch

from conftest import tiny_config_text
from for_ovir.cli import main
from for_ovir.heads import EmbeddingSet
from for_ovir.pseudo_labels import load_text_table
from for_ovir.retrieval import write_embeddings


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(tiny_config_text())
    return p


def test_gen_synth_writes_four_identical_files(tmp_path, cfg_path, capsys):
    for d in ("a", "b"):
        assert main(["gen-synth", "--config", str(cfg_path), "--out-dir", str(tmp_path / d)]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == ["features.forf", "labels.jsonl", "manifest.json", "text_table.json"]
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_invalid_config_exit_2_names_field(tmp_path, cfg_path, capsys):
    code = main(["gen-synth", "--config", str(cfg_path), "--set", "data.n_tokens=2", "--out-dir", str(tmp_path)])
    err = capsys.readouterr().err
    assert code == 2 and "n_tokens" in err and err.startswith("for-ovir: error: ConfigError:")


def test_unknown_key_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("train.learning_rate = 1\n")
    assert main(["gen-synth", "--config", str(bad), "--out-dir", str(tmp_path)]) == 2
    assert "learning_rate" in capsys.readouterr().err


def test_missing_input_exit_2_with_path(tmp_path, capsys):
    missing = tmp_path / "nope.forf"
    code = main(["pseudo-label", "--features", str(missing), "--text-table", "t", "--manifest", "m",
                 "--out", str(tmp_path / "p")])
    assert code == 2 and str(missing) in capsys.readouterr().err


def test_usage_error_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == 2


def test_query_exact_row_ranks_first(tmp_path, cfg_path, capsys):
    main(["gen-synth", "--config", str(cfg_path), "--out-dir", str(tmp_path / "d")])
    table = load_text_table(tmp_path / "d" / "text_table.json")
    name = table.names("base")[1]
    e = torch.from_numpy(table.lookup([name])).float()
    other = torch.from_numpy(table.lookup([table.names("base")[0]])).float()
    write_embeddings(tmp_path / "e.fore", [EmbeddingSet(4, other, True), EmbeddingSet(7, e, True)])
    assert main(["build-index", "--embeddings", str(tmp_path / "e.fore"), "--out", str(tmp_path / "i.fori")]) == 0
    capsys.readouterr()
    assert main(["query", "--index", str(tmp_path / "i.fori"), "--text-table", str(tmp_path / "d" / "text_table.json"),
                 "--category", name, "--topk", "1"]) == 0
    image_id, score = capsys.readouterr().out.split()
    assert image_id == "7" and float(score) == pytest.approx(1.0, abs=1e-6)
    assert main(["query", "--index", str(tmp_path / "i.fori"), "--text-table", str(tmp_path / "d" / "text_table.json"),
                 "--category", "no_such"]) == 2


def test_eval_perfect_oracle(tmp_path, cfg_path, capsys):
    main(["gen-synth", "--config", str(cfg_path), "--out-dir", str(tmp_path / "d"), "--split", "eval"])
    table = load_text_table(tmp_path / "d" / "text_table.json")
    sets = []
    for line in (tmp_path / "d" / "labels.jsonl").read_text().splitlines():
        r = json.loads(line)
        sets.append(EmbeddingSet(r["image_id"], torch.from_numpy(table.lookup(r["categories"])).float(), True))
    write_embeddings(tmp_path / "e.fore", sets)
    main(["build-index", "--embeddings", str(tmp_path / "e.fore"), "--out", str(tmp_path / "i.fori")])
    capsys.readouterr()
    assert main(["eval", "--index", str(tmp_path / "i.fori"), "--text-table", str(tmp_path / "d" / "text_table.json"),
                 "--labels", str(tmp_path / "d" / "labels.jsonl"), "--out", str(tmp_path / "r.json")]) == 0
    assert capsys.readouterr().out.strip() == "base=100.00 novel=100.00 all=100.00"
    assert json.loads((tmp_path / "r.json").read_text())["aggregates"]["all"] == 100.0


def test_embed_cluster_head(tmp_path, cfg_path):
    d = tmp_path / "d"
    main(["gen-synth", "--config", str(cfg_path), "--out-dir", str(d)])
    assert main(["embed", "--config", str(cfg_path), "--head", "cluster", "--manifest", str(d / "manifest.json"),
                 "--features", str(d / "features.forf"), "--out", str(tmp_path / "z.fore")]) == 0
    assert main(["embed", "--head", "sum", "--features", str(d / "features.forf"), "--out", str(tmp_path / "x")]) == 2


def test_console_script_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "for_ovir.cli", "--threads", "0", "build-index",
                          "--embeddings", "x", "--out", "y"], capture_output=True, text=True)
    assert out.returncode == 2 and "threads" in out.stderr
    out = subprocess.run([sys.executable, "-m", "for_ovir.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and "0.1.0" in out.stdout
