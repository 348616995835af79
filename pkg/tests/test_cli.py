import numpy as np
import pytest

from mqrec.cli import main
from mqrec.config import Config, ConfigError, load_config, parse_config_text

from _support import write_lines

FAST = ["--set", "cf_dim=8", "--set", "cf_epochs=3", "--set", "cf_eval_every=0",
        "--set", "tok_K=2", "--set", "tok_L=8", "--set", "tok_code_dim=4", "--set", "tok_hidden=16",
        "--set", "tok_epochs=2", "--set", "rank_embed_dim=8", "--set", "rank_hidden=16",
        "--set", "rank_epochs=2", "--set", "rank_eval_every=0"]


class TestConfig:
    def test_defaults(self):
        c = Config()
        assert (c.tok_K, c.tok_rho, c.tok_beta, c.rank_margin, c.cf_layers, c.cf_dim) == (3, 0.2, 0.25, 0.1, 3, 64)
        assert c.cutoffs == (10, 20, 30) and c.eval_exclude_train

    def test_parse_text_with_comments(self):
        c = parse_config_text("# comment\ntok_K = 4  # inline\neval_exclude_train = false\n\nrank_mode=attention_pool")
        assert c.tok_K == 4 and c.eval_exclude_train is False and c.rank_mode == "attention_pool"

    def test_round_trip(self, tmp_path):
        c = Config(seed=9, tok_rho=0.5, data="x.tsv")
        (tmp_path / "c.txt").write_text(c.to_text())
        assert load_config(tmp_path / "c.txt") == c

    @pytest.mark.parametrize("text", ["nope = 1", "tok_K = three", "eval_exclude_train = maybe", "tok_K"])
    def test_errors(self, text):
        with pytest.raises(ConfigError):
            parse_config_text(text)

    def test_sub_configs(self):
        c = Config(seed=5, tok_L=0, rank_repeats=2)
        assert c.tokenizer().L is None and c.tokenizer().seed == 5
        assert c.ranker().repeats == 2 and c.cf().layers == 3


@pytest.fixture(scope="module")
def data_file(tmp_path_factory):
    rng = np.random.default_rng(3)
    lines = []
    for u in range(40):
        block = np.arange(0, 30) if u % 2 else np.arange(30, 60)
        for t, j in enumerate(rng.choice(block, size=8, replace=False)):
            lines.append(f"user{u}\titem{j}\t1\t{t}")
    return write_lines(tmp_path_factory.mktemp("data") / "inter.tsv", lines)


@pytest.fixture(scope="module")
def trained(data_file, tmp_path_factory):
    out = tmp_path_factory.mktemp("art")
    base = ["--out", str(out), "--set", f"data={data_file}", "--set", "unseen_fraction=0.1"] + FAST
    for cmd in ("ingest", "train-cf", "train-tokenizer", "train-ranker"):
        assert main([cmd] + base) == 0
    return out, base


class TestCli:
    def test_artifacts_written(self, trained):
        out, _ = trained
        for sub in ("cf", "tokenizer", "ranker"):
            assert (out / sub / "manifest.txt").exists()
        assert "users = 40" in (out / "dataset.txt").read_text()
        assert (out / "tokenizer" / "tokens_item.txt").exists()

    def test_evaluate_protocols(self, trained, capsys):
        out, base = trained
        for protocol in ("standard", "unseen_prompt", "user_id_only", "unseen_user"):
            assert main(["evaluate", "--protocol", protocol] + base) == 0
            kv = (out / f"metrics_{protocol}.txt").read_text()
            assert f"protocol = {protocol}" in kv and "hr@20 = " in kv
        assert (out / "cf_refreshed" / "manifest.txt").exists()

    def test_baseline(self, trained):
        out, base = trained
        assert main(["evaluate", "--baseline"] + base) == 0
        assert (out / "metrics_baseline_standard.txt").exists()

    def test_recommend_tsv(self, trained, capsys):
        _, base = trained
        capsys.readouterr()
        assert main(["recommend", "--users", "user3,user4", "--k", "5"] + base) == 0
        rows = [line.split("\t") for line in capsys.readouterr().out.splitlines()]
        assert len(rows) == 10
        assert [r[0] for r in rows] == ["user3"] * 5 + ["user4"] * 5
        assert [int(r[1]) for r in rows[:5]] == [1, 2, 3, 4, 5]
        assert all(r[2].startswith("item") for r in rows)
        scores = [float(r[3]) for r in rows[:5]]
        assert scores == sorted(scores, reverse=True)

    def test_unknown_user(self, trained, capsys):
        _, base = trained
        assert main(["recommend", "--users", "ghost"] + base) == 2
        assert "ghost" in capsys.readouterr().err

    def test_bench(self, trained, capsys):
        _, base = trained
        capsys.readouterr()
        assert main(["bench", "--users", "5"] + base) == 0
        out = capsys.readouterr().out
        assert "users = 5" in out and "retrieve_ms_mean" in out

    def test_ablate_sweep(self, trained, capsys):
        out, base = trained
        assert main(["ablate", "--variants", "kmeans,vq_single", "--sweep", "tok_rho=0.2,0.8"] + base) == 0
        rows = (out / "ablation.tsv").read_text().splitlines()
        assert rows[0].startswith("variant\tprotocol\thr@10")
        assert len(rows) == 1 + 4 * 2  # four runs, standard + unseen_user each

    def test_global_flags_either_side(self, data_file, tmp_path):
        assert main(["--out", str(tmp_path / "a"), "ingest", "--data", str(data_file)]) == 0
        assert main(["ingest", "--data", str(data_file), "--out", str(tmp_path / "b"), "--seed", "4"]) == 0
        assert "seed = 4" in (tmp_path / "b" / "config.txt").read_text()

    def test_missing_artifacts(self, data_file, tmp_path, capsys):
        assert main(["train-ranker", "--out", str(tmp_path), "--set", f"data={data_file}"]) == 2

    def test_bad_override(self, data_file, tmp_path, capsys):
        assert main(["ingest", "--data", str(data_file), "--set", "colour=blue", "--out", str(tmp_path)]) == 2
        assert "colour" in capsys.readouterr().err
