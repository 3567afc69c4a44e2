import csv

import pytest

from hkdlab.cli import main
from hkdlab.evaluation import parse_grid, read_report_csv

MIN_CONFIG = """
seed = 5
batch_size = 16
order = "mixed"
max_decode_len = 20

[data]
source = "synthetic"

[data.synthetic]
n_families = 1
langs_per_family = 2
noise = 0.05
train_sentences = 60
low_resource_sentences = 20
dev_sentences = 10
test_sentences = 10
min_words = 1
max_words = 2
alphabet_size = 6
lexicon_size = 12

[[clustering]]
type_id = 1
source = "kb"
n_clusters = 1

[model]
emb = 8
hidden = 16

[optimizer]
lr = 0.01

[epochs]
teacher = 2
ta = 2
student = 2
"""

ARTIFACTS = [
    "vocab.json", "languages.json", "clusterings.csv", "teachers/a1.ckpt", "teachers/a2.ckpt", "baseline.ckpt",
    "tas/1_1.ckpt", "student.ckpt", "logs/flags.csv", "logs/alpha.csv", "report.csv", "report.json", "report.md",
]


def _config(tmp_path, text=MIN_CONFIG, name="min.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    out = tmp / "run"
    assert main(["pipeline", "--config", str(_config(tmp)), "--output", str(out)]) == 0
    return tmp, out


def test_usage_errors_exit_one(capsys, tmp_path):
    assert main([]) == 1
    assert main(["frobnicate", "--config", "x"]) == 1
    assert main(["pipeline"]) == 1
    assert main(["pipeline", "--config", "x", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err


def test_invalid_config_exits_one(capsys, tmp_path):
    bad = _config(tmp_path, MIN_CONFIG.replace("lr = 0.01", "lr = -1"))
    assert main(["gen-data", "--config", str(bad), "--output", str(tmp_path / "o")]) == 1
    assert "optimizer.lr" in capsys.readouterr().err
    assert main(["gen-data", "--config", str(tmp_path / "missing.toml")]) == 1


def test_runtime_failure_exits_two(capsys, tmp_path):
    cfg = _config(tmp_path)
    assert main(["train-tas", "--config", str(cfg), "--output", str(tmp_path / "o")]) == 2
    assert "run cluster first" in capsys.readouterr().err


def test_pipeline_writes_every_artifact(pipeline_run):
    _, out = pipeline_run
    for name in ARTIFACTS + ["resolved_config.toml", "data/train/a1.src", "data/kb.csv"]:
        assert (out / name).exists(), name
    rows = read_report_csv(out / "report.csv")
    assert {r["system"] for r in rows} == {"individual", "multi", "ta_type1", "hkd"}
    assert {r["lang"] for r in rows} == {"a1", "a2"}


def test_report_grid_matches_csv(pipeline_run):
    _, out = pipeline_run
    grid = parse_grid((out / "report.md").read_text())
    rows = read_report_csv(out / "report.csv")
    assert len(grid) == len(rows)
    for r in rows:
        assert abs(grid[(r["system"], r["lang"])] - r["bleu"]) < 5e-3


def test_rerun_from_snapshot_is_bit_exact(pipeline_run):
    tmp, out = pipeline_run
    again = tmp / "again"
    assert main(["pipeline", "--config", str(out / "resolved_config.toml"), "--output", str(again)]) == 0
    for name in ARTIFACTS:
        assert (out / name).read_bytes() == (again / name).read_bytes(), name


def test_single_stage_rerun_is_bit_exact(pipeline_run):
    tmp, out = pipeline_run
    snap = out / "resolved_config.toml"
    assert main(["train-tas", "--config", str(snap)]) == 0
    assert main(["evaluate", "--config", str(snap)]) == 0
    again = tmp / "again"
    for name in ("tas/1_1.ckpt", "report.csv", "report.json"):
        assert (out / name).read_bytes() == (again / name).read_bytes(), name


def test_cluster_with_kb_csv_has_one_row_per_language(tmp_path):
    kb = tmp_path / "kb.csv"
    kb.write_text("lang,f1,f2,f3\na1,0,0,1\na2,1,1,0\n")
    text = MIN_CONFIG.replace('source = "kb"\nn_clusters = 1', f'source = "kb"\nn_clusters = 2\nkb_csv = "{kb}"')
    cfg = _config(tmp_path, text)
    out = tmp_path / "o"
    assert main(["gen-data", "--config", str(cfg), "--output", str(out)]) == 0
    assert main(["cluster", "--config", str(cfg), "--output", str(out)]) == 0
    with open(out / "clusterings.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert sorted(r["lang"] for r in rows) == ["a1", "a2"]
    assert {r["cluster"] for r in rows} == {"1", "2"}


def test_nmt_view_reuses_the_baseline_probe(tmp_path):
    text = MIN_CONFIG.replace('source = "kb"\nn_clusters = 1', 'source = "nmt"\nn_clusters = 2')
    cfg = _config(tmp_path, text)
    out = tmp_path / "o"
    for cmd in ("gen-data", "cluster"):
        assert main([cmd, "--config", str(cfg), "--output", str(out)]) == 0
    probe = (out / "baseline.ckpt").read_bytes()
    assert main(["train-baseline", "--config", str(cfg), "--output", str(out), "--resume"]) == 0
    assert (out / "baseline.ckpt").read_bytes() == probe


def test_stage_by_stage_equals_pipeline(pipeline_run, tmp_path):
    _, out = pipeline_run
    cfg = out / "resolved_config.toml"
    staged = tmp_path / "staged"
    for cmd in ("gen-data", "cluster", "train-teachers", "train-baseline", "train-tas", "train-student",
                "evaluate", "report"):
        assert main([cmd, "--config", str(cfg), "--output", str(staged)]) == 0, cmd
    for name in ARTIFACTS:
        assert (out / name).read_bytes() == (staged / name).read_bytes(), name


def test_seed_override_changes_the_data(tmp_path):
    cfg = _config(tmp_path)
    assert main(["gen-data", "--config", str(cfg), "--output", str(tmp_path / "a")]) == 0
    assert main(["gen-data", "--config", str(cfg), "--output", str(tmp_path / "b"), "--seed", "6"]) == 0
    assert (tmp_path / "a" / "data" / "train" / "a1.src").read_text() != (tmp_path / "b" / "data" / "train" / "a1.src").read_text()
    assert "seed = 6" in (tmp_path / "b" / "resolved_config.toml").read_text()


def test_files_source_builds_vocab_from_train_split(tmp_path):
    cfg = _config(tmp_path)
    assert main(["gen-data", "--config", str(cfg), "--output", str(tmp_path / "syn")]) == 0
    root = tmp_path / "syn" / "data"
    text = MIN_CONFIG.split("[data]")[0] + f'[data]\nsource = "files"\nroot = "{root}"\nmode = "char"\n' + \
        "[[clustering]]" + MIN_CONFIG.split("[[clustering]]")[1]
    fcfg = _config(tmp_path, text, "files.toml")
    out = tmp_path / "files"
    assert main(["gen-data", "--config", str(fcfg), "--output", str(out)]) == 0
    assert main(["cluster", "--config", str(fcfg), "--output", str(out)]) == 0
    assert (out / "vocab.json").exists() and (out / "clusterings.csv").exists()


def test_pipeline_without_resume_retrains_a_stale_baseline(tmp_path):
    cfg = _config(tmp_path)
    out = tmp_path / "o"
    assert main(["pipeline", "--config", str(cfg), "--output", str(out)]) == 0
    fresh = (out / "baseline.ckpt").read_bytes()
    (out / "baseline.ckpt").write_bytes((tmp_path / "o" / "student.ckpt").read_bytes())
    assert main(["pipeline", "--config", str(cfg), "--output", str(out)]) == 0
    assert (out / "baseline.ckpt").read_bytes() == fresh
