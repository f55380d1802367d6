import json

import pytest

from seqcount.cli import main
from seqcount.config import ConfigError, RunConfig, load_run_config, parse_config_text
from seqcount.episodes import META_TEST, read_episodes, split_classes
from seqcount.trainer import load_checkpoint, model_config_of


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


# --------------------------------------------------------------------- config

def test_config_defaults_and_echo():
    cfg = RunConfig()
    assert cfg.model.sigma == 8.0 and cfg.train.lr0 == 4e-5 and cfg.task.shots == (3, 5)
    text = cfg.to_text()
    assert "sigma = 8.0" in text and "ways = 2..5" in text and "widths = 16,32,64,64" in text
    assert RunConfig().with_values(parse_config_text(text)) == cfg


def test_config_rejects_unknown_key(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("lr0 = 1e-3\nlearning_rate = 3\n")
    with pytest.raises(ConfigError, match="learning_rate"):
        load_run_config(path)


def test_config_values_and_seed_env(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("# comment\nlr0 = 1e-3\nuse_coords = false\nways = 3..4\nwidths = 4,4,8,8\nseed = 3\n")
    cfg = load_run_config(path, environ={})
    assert cfg.train.lr0 == 1e-3 and cfg.model.use_coords is False
    assert cfg.task.ways == (3, 4) and cfg.model.widths == (4, 4, 8, 8) and cfg.train.seed == 3
    assert load_run_config(path, environ={"SEQCOUNT_SEED": "11"}).train.seed == 11
    with pytest.raises(ConfigError, match="gamma"):
        RunConfig().with_values({"gamma": "1.5"})
    with pytest.raises(ConfigError, match="key = value"):
        parse_config_text("just words")


# ------------------------------------------------------------------- gen-data

@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--out", str(out), "--seed", "7", "--train-tasks", "3",
                 "--val-tasks", "2", "--test-tasks", "4"]) == 0
    return out


def test_gen_data_is_deterministic(data_dir, tmp_path, capsys):
    code, out, _ = run(["gen-data", "--out", tmp_path, "--seed", 7, "--train-tasks", 3,
                        "--val-tasks", 2, "--test-tasks", 4], capsys)
    assert code == 0 and "meta-test classes (10)" in out
    for name in ("meta-train.sqep", "validation.sqep", "meta-test.sqep"):
        assert (tmp_path / name).read_bytes() == (data_dir / name).read_bytes()
    test = read_episodes(tmp_path / "meta-test.sqep")
    assert all(set(t.class_ids) <= set(split_classes(META_TEST)) for t in test)
    assert all(3 <= t.shots <= 5 and 2 <= t.ways <= 5 for t in test)


def test_gen_data_without_test_tasks_warns(tmp_path, capsys):
    code, _, err = run(["gen-data", "--out", tmp_path, "--train-tasks", 1, "--val-tasks", 0,
                        "--test-tasks", 0], capsys)
    assert code == 0 and "warning" in err
    assert not (tmp_path / "meta-test.sqep").exists()


def test_gen_data_overlapping_split(tmp_path, capsys):
    code, _, err = run(["gen-data", "--out", tmp_path, "--train-classes", "0,1,2,3,4",
                        "--test-classes", "4,5"], capsys)
    assert code == 2 and "overlap" in err


# ---------------------------------------------------------------------- train

def test_train_missing_data_file(tmp_path, capsys):
    code, _, err = run(["train", "--data", tmp_path / "nope", "--out", tmp_path / "run"], capsys)
    assert code == 2 and "not found" in err


def test_train_bad_config_key(tmp_path, capsys):
    (tmp_path / "c.txt").write_text("bogus = 1\n")
    code, _, err = run(["train", "--config", tmp_path / "c.txt", "--out", tmp_path / "run"], capsys)
    assert code == 2 and "bogus" in err


def test_usage_error_exit_code(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["eval"])
    assert exc.value.code == 2


@pytest.fixture(scope="module")
def micro_run(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = out / "micro.txt"
    cfg.write_text("widths = 4,4,8,8\nattn_dim = 8\nhidden = 8\ninput_dim = 8\nembed_dim = 8\n"
                   "episodes_per_epoch = 2\nlr0 = 1e-3\n")
    assert main(["train", "--data", str(data_dir), "--out", str(out), "--config", str(cfg),
                 "--epochs", "2", "--no-guide", "--sigma", "6"]) == 0
    return out


def test_train_writes_run_directory(micro_run):
    assert "guide = false" in (micro_run / "config.txt").read_text()
    assert "sigma = 6.0" in (micro_run / "config.txt").read_text()
    lines = (micro_run / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(l)["epoch"] for l in lines] == [0, 1]
    cfg = model_config_of(load_checkpoint(micro_run / "checkpoint.sqck"))
    assert cfg.widths == (4, 4, 8, 8) and cfg.guide is False and cfg.sigma == 6.0


def test_eval_report_has_all_metrics(micro_run, data_dir, tmp_path, capsys):
    code, out, _ = run(["eval", "--checkpoint", micro_run / "checkpoint.sqck", "--data", data_dir,
                        "--json", tmp_path / "r.json", "--plot", tmp_path / "r.png"], capsys)
    assert code == 0
    for key in ("mae:", "rmse:", "recall:", "precision:"):
        assert key in out
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["episodes"] == 4
    assert (tmp_path / "r.png").stat().st_size > 0


def test_eval_corrupt_checkpoint(data_dir, tmp_path, capsys):
    (tmp_path / "x.sqck").write_bytes(b"junk")
    code, _, err = run(["eval", "--checkpoint", tmp_path / "x.sqck", "--data", data_dir], capsys)
    assert code == 2 and "magic" in err


# ---------------------------------------------------------------------- count

def _write_user_task(tmp_path, data_dir):
    from PIL import Image

    task = read_episodes(data_dir / "meta-test.sqep")[0]
    names = [f"k{i}" for i in range(task.ways)]
    support = []
    for i, (img, labels) in enumerate(task.support):
        Image.fromarray(img).save(tmp_path / f"s{i}.png")
        (tmp_path / f"s{i}.txt").write_text("".join(f"{y} {x} {names[c]}\n" for y, x, c in labels))
        support.append(f"{tmp_path / f's{i}.png'}:{tmp_path / f's{i}.txt'}")
    Image.fromarray(task.query_image).save(tmp_path / "q.png")
    return names, support


def test_count_prints_per_class_counts(micro_run, data_dir, tmp_path, capsys):
    # the micro checkpoint expects 64x64 inputs, like the generated data
    names, support = _write_user_task(tmp_path, data_dir)
    code, out, _ = run(["count", "--checkpoint", micro_run / "checkpoint.sqck", "--classes", ",".join(names),
                        "--support", *support, "--query", tmp_path / "q.png"], capsys)
    assert code == 0
    lines = out.strip().splitlines()
    assert [l.split(":")[0] for l in lines] == names


def test_count_missing_class(micro_run, data_dir, tmp_path, capsys):
    names, support = _write_user_task(tmp_path, data_dir)
    code, _, err = run(["count", "--checkpoint", micro_run / "checkpoint.sqck",
                        "--classes", ",".join(names + ["ghost"]), "--support", *support,
                        "--query", tmp_path / "q.png"], capsys)
    assert code == 2 and "'ghost'" in err


def test_count_unreadable_image(micro_run, tmp_path, capsys):
    (tmp_path / "p.txt").write_text("1 1 a\n")
    code, _, err = run(["count", "--checkpoint", micro_run / "checkpoint.sqck", "--classes", "a",
                        "--support", f"{tmp_path / 'none.png'}:{tmp_path / 'p.txt'}",
                        "--query", tmp_path / "none.png"], capsys)
    assert code == 2 and "cannot read image" in err


# ------------------------------------------------------------------ gradcheck

def test_gradcheck_micro(capsys):
    code, out, _ = run(["gradcheck", "--micro"], capsys)
    assert code == 0
    assert out.startswith("PASS max_rel_err=")
    assert float(out.split("=")[1].split()[0]) <= 1e-3


def test_gradcheck_reports_failure(capsys):
    code, out, _ = run(["gradcheck", "--micro", "--tol", "1e-9"], capsys)
    assert code == 1 and out.startswith("FAIL")
