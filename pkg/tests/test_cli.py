import csv
import json
import shutil

import pytest
import yaml

from magekt import cli
from magekt.config import ConfigError, RunConfig, from_mapping, load_config
from magekt.synthetic import generate_relation_log, planted_kc_world, write_interactions_csv, write_kc_names

TINY = {"min_student": 3, "min_question": 3, "window": 20, "budget": 16, "topk_q": 3, "topk_s": 3,
        "embed_dim": 4, "attn_heads": 2, "attn_layers": 1, "gru_hidden": 4, "dropout": 0.0, "batch": 8,
        "max_epochs": 2, "patience": 2, "lr": 0.01, "seeds": [0, 1], "max_in_flight": 1,
        "variants": ["full", "no_sq_graph"]}


@pytest.fixture(scope="module")
def project(tmp_path_factory):
    root = tmp_path_factory.mktemp("proj")
    world = planted_kc_world()
    write_interactions_csv(generate_relation_log(world, n_students=60, seed=1), root / "inter.csv")
    write_kc_names(dict(world.names), root / "names.csv")
    with open(root / "gold.csv", "w") as fp:
        cli.dump_gold(world.gold, fp)
    cfg = {"interactions": "inter.csv", "kc_names": "names.csv", "gold": "gold.csv", "output_dir": "out", **TINY}
    (root / "config.yaml").write_text(yaml.safe_dump(cfg))
    return root


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def piped(project):
    """Full pipeline once; later tests read its artifacts."""
    assert cli.main(["pipeline", "-c", str(project / "config.yaml")]) == 0
    return project


# -- config ---------------------------------------------------------------

def test_config_round_trip_and_paths(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"seeds": [3], "embed_dim": 8, "attn_heads": 2, "sigma_q": 0.5}))
    cfg = load_config(path)
    assert cfg.seeds == (3,) and cfg.model().embed_dim == 8 and cfg.graph().sigma_q == 0.5
    assert cfg.path("x.csv") == tmp_path / "x.csv" and cfg.out == tmp_path / "out"
    assert load_config(path).hash() == cfg.hash()
    assert load_config(path, {"lr": 0.5}).hash() != cfg.hash()


def test_stage_hash_ignores_downstream_keys(tmp_path):
    a = from_mapping({}, tmp_path)
    b = from_mapping({"lr": 0.5, "embed_dim": 8, "attn_heads": 2}, tmp_path)
    for stage in ("ingest", "fit-irt", "extract-kc", "build-graphs"):
        assert a.hash(stage) == b.hash(stage)
    assert a.hash("train") != b.hash("train")
    c = from_mapping({"min_student": 3}, tmp_path)
    assert c.hash("ingest") != a.hash("ingest") and c.hash("train") != a.hash("train")


@pytest.mark.parametrize("data", [
    {"bogus_key": 1}, {"backend": "oracle"}, {"backend": "live"}, {"embed_dim": 10, "attn_heads": 4},
    {"seeds": []}, {"enable_completion": "yes"}, {"lr": "fast"}, {"train_ratio": 0.9},
])
def test_bad_configs_rejected(data):
    with pytest.raises(ConfigError):
        from_mapping(data)


def test_config_errors_exit_with_category(tmp_path, capsys):
    (tmp_path / "c.yaml").write_text("nonsense: 1\n")
    code, _, err = run(capsys, "ingest", "-c", str(tmp_path / "c.yaml"))
    assert code == 2 and err.startswith("error[config]:") and "nonsense" in err
    (tmp_path / "d.yaml").write_text("[1, 2]\n")
    code, _, err = run(capsys, "ingest", "-c", str(tmp_path / "d.yaml"))
    assert code == 2 and "mapping" in err
    code, _, err = run(capsys, "ingest", "-c", str(tmp_path / "missing.yaml"))
    assert code == 2


# -- ingest ---------------------------------------------------------------

def test_ingest_counts_and_split_files(piped):
    summary = json.loads((piped / "out" / "ingest" / "summary.json").read_text())
    assert summary["before"]["interactions"] > 0 and summary["after"]["students"] > 0
    assert sum(summary["splits"][s]["students"] for s in cli.SPLITS) == summary["after"]["students"]
    for s in cli.SPLITS:
        assert (piped / "out" / "ingest" / f"{s}.jsonl").stat().st_size > 0
    assert summary["_meta"]["config_hash"] == load_config(piped / "config.yaml").hash()


def test_ingest_rerun_is_byte_identical(piped, capsys):
    files = sorted((piped / "out" / "ingest").iterdir())
    before = {f.name: f.read_bytes() for f in files}
    code, _, _ = run(capsys, "ingest", "-c", str(piped / "config.yaml"), "--force")
    assert code == 0
    assert {f.name: f.read_bytes() for f in files} == before


def test_missing_column_is_named(project, tmp_path, capsys):
    cfg = yaml.safe_load((project / "config.yaml").read_text())
    cfg.update(interactions=str(project / "inter.csv"), col_kc="kc_column", output_dir=str(tmp_path / "o"))
    (tmp_path / "c.yaml").write_text(yaml.safe_dump(cfg))
    code, _, err = run(capsys, "ingest", "-c", str(tmp_path / "c.yaml"))
    assert code == 3 and err.startswith("error[input]:") and "kc_column" in err


def test_missing_input_file(tmp_path, capsys):
    (tmp_path / "c.yaml").write_text("interactions: nowhere.csv\n")
    code, _, err = run(capsys, "ingest", "-c", str(tmp_path / "c.yaml"))
    assert code == 3 and "nowhere.csv" in err


def test_filtering_everything_is_an_input_error(project, tmp_path, capsys):
    cfg = yaml.safe_load((project / "config.yaml").read_text())
    cfg.update(interactions=str(project / "inter.csv"), min_student=10_000, output_dir=str(tmp_path / "o"))
    (tmp_path / "c.yaml").write_text(yaml.safe_dump(cfg))
    code, _, err = run(capsys, "ingest", "-c", str(tmp_path / "c.yaml"))
    assert code == 3 and "filtering" in err


# -- prerequisites and restarts ---------------------------------------------

def test_stages_name_missing_prerequisites(project, tmp_path, capsys):
    cfg = yaml.safe_load((project / "config.yaml").read_text())
    cfg.update(interactions=str(project / "inter.csv"), kc_names=str(project / "names.csv"),
               gold=str(project / "gold.csv"), output_dir=str(tmp_path / "o"))
    (tmp_path / "c.yaml").write_text(yaml.safe_dump(cfg))
    c = str(tmp_path / "c.yaml")
    for stage, upstream in (("fit-irt", "ingest"), ("extract-kc", "ingest"), ("train", "build-graphs"),
                            ("eval", "build-graphs"), ("relation-eval", "build-graphs")):
        code, _, err = run(capsys, stage, "-c", c)
        assert code == 4 and err.startswith("error[missing-artifact]:") and f"magekt {upstream}" in err
    assert run(capsys, "ingest", "-c", c)[0] == 0
    code, _, err = run(capsys, "build-graphs", "-c", c)
    assert code == 4 and "magekt fit-irt" in err


def test_completed_stage_is_skipped(piped, capsys):
    params = piped / "out" / "irt" / "params.jsonl"
    stamp = params.stat().st_mtime_ns
    code, _, _ = run(capsys, "fit-irt", "-c", str(piped / "config.yaml"))
    assert code == 0 and params.stat().st_mtime_ns == stamp


def test_changed_config_needs_force(piped, tmp_path, capsys):
    shutil.copytree(piped, tmp_path / "p")
    c = str(tmp_path / "p" / "config.yaml")
    code, _, err = run(capsys, "fit-irt", "-c", c, "--set", "irt_l2_prior=0.5")
    assert code == 5 and err.startswith("error[config-mismatch]:") and "--force" in err
    # downstream stages refuse stale upstream artifacts
    code, _, err = run(capsys, "build-graphs", "-c", c, "--set", "irt_l2_prior=0.5", "--force")
    assert code == 5 and "fit-irt" in err
    assert run(capsys, "fit-irt", "-c", c, "--set", "irt_l2_prior=0.5", "--force")[0] == 0


def test_eval_rejects_checkpoint_from_other_graphs(piped, tmp_path, capsys):
    shutil.copytree(piped, tmp_path / "p")
    c = str(tmp_path / "p" / "config.yaml")
    sq = tmp_path / "p" / "out" / "graphs" / "sq.jsonl"
    sq.write_text(sq.read_text() + "\n")  # same provenance, different bytes
    code, _, err = run(capsys, "eval", "-c", c)
    assert code == 5 and "different graphs" in err


# -- outputs --------------------------------------------------------------

def test_every_output_embeds_config_hash_and_seed(piped):
    cfg = load_config(piped / "config.yaml")
    out = piped / "out"
    ws = cli.Workspace(cfg)
    for path in list(out.rglob("*.jsonl")) + list(out.rglob("*.npz")) + [out / "ingest" / "summary.json"]:
        if path.name.startswith("plot"):
            rec = json.loads(path.read_text().splitlines()[0])
            assert rec["config_hash"] == cfg.hash() and "seed" in rec and {"series", "x", "y"} <= set(rec)
        else:
            meta = ws.read_meta(path)
            assert meta["config_hash"] == cfg.hash() and "seed" in meta, path
    for path in out.rglob("*.tsv"):
        rows = cli.read_table(path)
        assert rows and all(r["config_hash"] == cfg.hash() for r in rows)


def test_history_table_shape(piped):
    rows = cli.read_table(piped / "out" / "train" / "history_full_s1.tsv")
    assert [r["epoch"] for r in rows] == ["1", "2"]
    assert {"train_loss", "val_auc", "val_acc", "seed"} <= set(rows[0]) and rows[0]["seed"] == "1"


def test_eval_reports_per_seed_and_mean(piped):
    rows = cli.read_table(piped / "out" / "train" / "results_full.tsv")
    for split in ("val", "test"):
        mine = {r["seed"]: float(r["auc"]) for r in rows if r["split"] == split}
        assert set(mine) == {"0", "1", "mean"}
        assert mine["mean"] == pytest.approx((mine["0"] + mine["1"]) / 2, abs=1e-15)


def test_train_is_reproducible(piped, tmp_path, capsys):
    shutil.copytree(piped, tmp_path / "p")
    c = str(tmp_path / "p" / "config.yaml")
    before = (tmp_path / "p" / "out" / "train" / "history_full_s0.tsv").read_bytes()
    assert run(capsys, "train", "-c", c, "--force")[0] == 0
    assert (tmp_path / "p" / "out" / "train" / "history_full_s0.tsv").read_bytes() == before


def test_ablate_full_matches_train_and_eval(piped, capsys):
    code, out, _ = run(capsys, "ablate", "-c", str(piped / "config.yaml"))
    assert code == 0 and set(json.loads(out)) == {"full", "no_sq_graph"}
    a = cli.read_table(piped / "out" / "ablate" / "results_full.tsv")
    b = cli.read_table(piped / "out" / "train" / "results_full.tsv")
    assert a == b
    grid = cli.read_table(piped / "out" / "ablate" / "grid.tsv")
    assert [g["variant"] for g in grid] == ["full", "no_sq_graph"]
    mean = next(r for r in b if r["split"] == "test" and r["seed"] == "mean")
    assert grid[0]["test_auc_mean"] == mean["auc"]


def test_relation_eval_identity_is_perfect(piped, capsys):
    code, out, _ = run(capsys, "relation-eval", "-c", str(piped / "config.yaml"),
                       "--predicted", str(piped / "gold.csv"))
    assert code == 0 and json.loads(out) == {"pred": 100.0, "corr": 100.0, "jacc": 100.0}
    rows = cli.read_table(piped / "out" / "relations" / "metrics.tsv")
    assert float(rows[0]["jacc"]) == 100.0


def test_relation_eval_on_extracted_graph(piped, capsys):
    code, out, _ = run(capsys, "relation-eval", "-c", str(piped / "config.yaml"))
    res = json.loads(out)
    assert code == 0 and all(0 <= res[k] <= 100 for k in ("pred", "corr", "jacc"))


def test_relation_eval_needs_gold(piped, tmp_path, capsys):
    empty = tmp_path / "g.csv"
    empty.write_text("src,dst,type\n")
    code, _, err = run(capsys, "relation-eval", "-c", str(piped / "config.yaml"), "--gold", str(empty),
                       "--predicted", str(piped / "gold.csv"))
    assert code == 3 and "empty" in err


def test_extracted_relations_are_deterministic(piped, tmp_path, capsys):
    shutil.copytree(piped, tmp_path / "p")
    c = str(tmp_path / "p" / "config.yaml")
    kc = tmp_path / "p" / "out" / "kc" / "decisions.jsonl"
    before = kc.read_bytes()
    assert run(capsys, "extract-kc", "-c", c, "--force")[0] == 0
    assert run(capsys, "build-graphs", "-c", c, "--force")[0] == 0
    assert kc.read_bytes() == before
    for g in ("sq.jsonl", "kc.jsonl"):
        assert (tmp_path / "p" / "out" / "graphs" / g).read_bytes() == (piped / "out" / "graphs" / g).read_bytes()


def test_demo_data_writes_runnable_project(tmp_path, capsys):
    code, out, _ = run(capsys, "demo-data", str(tmp_path / "demo"), "--students", "40")
    assert code == 0 and json.loads(out)["kcs"] == 30
    cfg = load_config(tmp_path / "demo" / "config.yaml")
    assert isinstance(cfg, RunConfig) and cfg.path(cfg.interactions).exists() and cfg.path(cfg.gold).exists()
    with open(cfg.path(cfg.kc_names)) as fp:
        assert len(list(csv.DictReader(fp))) == 30
