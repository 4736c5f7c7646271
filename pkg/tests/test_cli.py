import subprocess
import sys
import time

import numpy as np
import pytest

from sista import cli
from sista.corpus import read_corpus, write_corpus
from sista.errors import ConfigError
from sista.sta import read_heatmap
from sista.train import read_metrics

SMALL_CONFIG = """\
[corpus]
seed = 7
num_instances = 40
raw_dim = 8
num_clusters = 3
patches_per_image = 5
tokens_per_report = 4

[model]
dim = 4

[train]
epochs = 2
batch_size = 10
warmup_epochs = 1
"""


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "run.ini").write_text(SMALL_CONFIG)
    return tmp_path


def run(workdir, *argv):
    return cli.main([argv[0], "--config", str(workdir / "run.ini"), "--no-timestamp", *argv[1:]])


def gen(workdir, out="gen"):
    assert run(workdir, "gen", "--out", str(workdir / out)) == 0
    return workdir / out / "corpus.txt"


def with_paths(workdir, **paths):
    lines = "\n".join(f"{k} = {v}" for k, v in paths.items())
    (workdir / "run.ini").write_text(SMALL_CONFIG + "\n[paths]\n" + lines + "\n")


def test_gen_writes_round_trippable_corpus(workdir, capsys):
    path = gen(workdir)
    corpus = read_corpus(path)
    assert len(corpus) == 40
    write_corpus(corpus, workdir / "again.txt", read_corpus(path, with_spec=True)[1])
    assert (workdir / "again.txt").read_bytes() == path.read_bytes()
    out = capsys.readouterr().out
    assert "instances: 40" in out and "clusters: 3" in out


def test_gen_is_idempotent(workdir):
    path = gen(workdir)
    first = path.read_bytes(), (workdir / "gen" / "resolved_config.ini").read_bytes()
    gen(workdir)
    assert (path.read_bytes(), (workdir / "gen" / "resolved_config.ini").read_bytes()) == first
    assert gen(workdir, "elsewhere").read_bytes() == first[0]


def test_gen_requires_seed(tmp_path, capsys):
    (tmp_path / "run.ini").write_text("[corpus]\nnum_instances = 10\n")
    assert cli.main(["gen", "--config", str(tmp_path / "run.ini"), "--out", str(tmp_path)]) == 1
    assert "seed" in capsys.readouterr().err


def test_seed_flag_satisfies_gen(tmp_path):
    assert cli.main(["gen", "--seed", "3", "--out", str(tmp_path), "--no-timestamp"]) == 0


@pytest.mark.parametrize("text, key", [
    ("[corpus]\nseed = 1\nbogus = 2\n", "bogus"),
    ("[train]\nbatch_size = many\n", "batch_size"),
    ("[loss]\ntemperature = 0.5\n", "temperature"),
    ("[nowhere]\nx = 1\n", "nowhere"),
    ("[train]\nbase_lr = -1\n", "rates"),
])
def test_bad_config_names_the_key(tmp_path, capsys, text, key):
    (tmp_path / "run.ini").write_text(text)
    assert cli.main(["gen", "--config", str(tmp_path / "run.ini"), "--out", str(tmp_path)]) == 1
    assert key in capsys.readouterr().err


def test_bad_toggle_is_usage_error(workdir, capsys):
    assert run(workdir, "gen", "--toggle", "sta=maybe") == 1
    assert "--toggle" in capsys.readouterr().err


def test_unknown_subcommand():
    assert cli.main(["frobnicate"]) == 1


def test_timestamp_line_is_optional(workdir):
    cli.main(["gen", "--config", str(workdir / "run.ini"), "--out", str(workdir / "ts")])
    assert (workdir / "ts" / "resolved_config.ini").read_text().startswith("# generated ")
    gen(workdir, "nots")
    assert not (workdir / "nots" / "resolved_config.ini").read_text().startswith("# generated")


def test_paper_preset_is_echoed(workdir):
    assert run(workdir, "gen", "--paper-preset", "--out", str(workdir / "p")) == 0
    dump = (workdir / "p" / "resolved_config.ini").read_text()
    for line in ("temperature = 0.2", "dim = 128", "weight_decay = 0.05", "warmup_epochs = 10",
                 "init_lr = 1e-08", "base_lr = 2e-05"):
        assert line in dump.splitlines()


def test_flags_override_file():
    parser = cli.build_parser()
    args = parser.parse_args(["train", "--seed", "9", "--toggle", "sta=off", "--toggle", "sila=off"])
    cfg = cli.resolve(args)
    assert cfg.corpus.seed == 9 and cfg.train.seed == 9
    assert cfg.train.toggles.enabled() == ("sia", "sia_aug", "siva")


def test_temperature_follows_train_section(tmp_path):
    (tmp_path / "run.ini").write_text("[train]\ntemperature = 0.5\n")
    cfg = cli.resolve(cli.build_parser().parse_args(["gen", "--config", str(tmp_path / "run.ini")]))
    assert cfg.train.temperature == cfg.loss.temperature == cfg.sta.temperature == 0.5


def test_train_eval_export_pipeline(workdir, capsys):
    corpus_path = gen(workdir)
    with_paths(workdir, corpus=corpus_path, checkpoint=workdir / "tr" / "checkpoint.txt")
    start = time.perf_counter()
    assert run(workdir, "train", "--out", str(workdir / "tr"), "--toggle", "sta=off") == 0
    assert time.perf_counter() - start < 60
    rows = read_metrics(workdir / "tr" / "metrics.csv")
    assert rows and all(r.sta == 0.0 for r in rows)

    assert run(workdir, "eval", "--out", str(workdir / "ev")) == 0
    eval_lines = (workdir / "ev" / "eval.csv").read_text().splitlines()
    assert eval_lines[0] == "metric,value"
    assert any(line.startswith("cluster_recall@1,") for line in eval_lines)

    assert run(workdir, "export-heatmap", "--out", str(workdir / "hm")) == 0
    heat = read_heatmap(workdir / "hm" / "heatmap_0.txt")
    assert heat.shape == (4, 5)
    np.testing.assert_allclose(heat.sum(axis=1), 1.0, atol=1e-9)


def test_eval_untrained_is_chance_level(workdir):
    corpus_path = gen(workdir)
    with_paths(workdir, corpus=corpus_path)
    assert run(workdir, "eval", "--untrained", "--out", str(workdir / "ev")) == 0
    values = dict(line.split(",") for line in (workdir / "ev" / "eval.csv").read_text().splitlines()[1:])
    assert abs(float(values["pathology_hit_rate"]) - float(values["chance_hit_rate"])) < 0.2


def test_missing_checkpoint_and_corpus(workdir, capsys):
    assert run(workdir, "train", "--out", str(workdir / "x")) == 1
    corpus_path = gen(workdir)
    with_paths(workdir, corpus=corpus_path, checkpoint=workdir / "missing.txt")
    assert run(workdir, "eval", "--out", str(workdir / "x")) == 1
    assert "checkpoint" in capsys.readouterr().err


def test_export_instance_out_of_range(workdir):
    corpus_path = gen(workdir)
    (workdir / "run.ini").write_text(SMALL_CONFIG + f"\n[paths]\ncorpus = {corpus_path}\n"
                                     "\n[export]\ninstance = 99\n")
    assert run(workdir, "export-heatmap", "--untrained", "--out", str(workdir / "hm")) == 1


def test_ablate_writes_table(workdir, monkeypatch):
    corpus_path = gen(workdir)
    with_paths(workdir, corpus=corpus_path)
    monkeypatch.setenv("SISTA_THREADS", "2")
    assert run(workdir, "ablate", "--out", str(workdir / "ab")) == 0
    lines = (workdir / "ab" / "ablation.csv").read_text().splitlines()
    assert len(lines) == 5 and lines[-1].startswith("full,")


def test_thread_cap(monkeypatch):
    monkeypatch.delenv("SISTA_THREADS", raising=False)
    assert cli.thread_cap() == 1
    monkeypatch.setenv("SISTA_THREADS", "0")
    with pytest.raises(ConfigError):
        cli.thread_cap()


def test_gradcheck_passes(tmp_path):
    (tmp_path / "run.ini").write_text("[gradcheck]\nseeds = 1\n")
    assert cli.main(["gradcheck", "--config", str(tmp_path / "run.ini"), "--out", str(tmp_path),
                     "--no-timestamp"]) == 0
    rows = (tmp_path / "gradcheck.csv").read_text().splitlines()
    assert rows[0] == "loss,target,seed,max_rel_error,pass"
    assert all(r.endswith(",yes") for r in rows[1:])
    assert {r.split(",")[0] for r in rows[1:]} == {"sia", "sia_aug", "siva", "sila", "sta"}


def test_gradcheck_failure_exits_2(tmp_path, monkeypatch):
    monkeypatch.setattr(cli, "gradcheck_suite", lambda cfg: [("sia", "features", 0, 1.0)])
    assert cli.main(["gradcheck", "--out", str(tmp_path)]) == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "sista.cli", "gen", "--seed", "1", "--out",
                           str(tmp_path), "--no-timestamp"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "corpus.txt").exists()


def test_resolved_config_reloads_to_itself(workdir):
    gen(workdir, "first")
    dumped = workdir / "first" / "resolved_config.ini"
    assert cli.main(["gen", "--config", str(dumped), "--no-timestamp"]) == 0
    assert dumped.read_bytes() == (workdir / "first" / "resolved_config.ini").read_bytes()
    cfg = cli.resolve(cli.build_parser().parse_args(["gen", "--config", str(dumped)]))
    assert cli.dump_config(cfg, "gen", timestamp=False) == dumped.read_text()
