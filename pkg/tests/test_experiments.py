import json

import pytest

from styleaug import ContractError
from styleaug.experiments import (
    LEDGER_COLUMNS,
    REPORT_COLUMNS,
    ResultRecord,
    append_record,
    load_matrix,
    read_ledger,
    read_report_csv,
    report,
    run_matrix,
    verify_ledger,
    write_plots,
)
from styleaug.toy import make_shapes_dataset
from styleaug.transformnet import TransformNetConfig, build, save_checkpoint

CLASSIFIER = {"backbone": "small_cnn", "epochs": 2, "batch_size": 16, "learning_rate": 0.001, "input_size": 32}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("exp")
    make_shapes_dataset(root / "data", per_class=12, size=32, seed=1)
    net = build(TransformNetConfig(num_residual_blocks=1, base_channels=8), seed=0)
    save_checkpoint(net, {}, root / "Wave.ckpt", style_name="Wave")
    return root


def write_matrix(root, name, experiments, seeds=(0,)):
    path = root / f"{name}.json"
    path.write_text(
        json.dumps(
            {
                "dataset": "data",
                "split": {"train_fraction": 0.7, "seed": 0},
                "styles": {"Wave": "Wave.ckpt"},
                "classifier": CLASSIFIER,
                "seeds": list(seeds),
                "rotation_angles": [90],
                "experiments": experiments,
            }
        )
    )
    return path


TRADITIONAL = [
    {"name": "none", "traditional": []},
    {"name": "flip", "traditional": ["flip_horizontal"]},
    {"name": "flip-rot", "traditional": ["flip_horizontal", "rotation"]},
]


def record(name, acc, trad="None", styles="None", seed=0):
    return ResultRecord(name, trad, styles, "small_cnn", seed, acc, 1, (acc,), "d" * 64, "c" * 64, "1970-01-01T00:00:00Z", "0.1.0")


def test_three_configs_three_rows_then_resume(workspace):
    matrix = write_matrix(workspace, "trad", TRADITIONAL)
    ledger = workspace / "trad" / "ledger.csv"
    first = run_matrix(matrix, ledger, deterministic=True)
    assert first.ok and len(first.records) == 3
    rows = read_ledger(ledger)
    assert [r.traditional for r in rows] == ["None", "Flipping", "FlippingRotation"]
    assert all(r.styles == "None" and r.best_val_accuracy == max(r.per_epoch_val_accuracy) for r in rows)
    again = run_matrix(matrix, ledger, deterministic=True)
    assert again.records == [] and len(again.skipped) == 3
    assert len(read_ledger(ledger)) == 3
    forced = run_matrix(matrix, ledger, force=True, deterministic=True)
    assert len(forced.records) == 3 and len(read_ledger(ledger)) == 6
    assert verify_ledger(ledger)
    # each row replays to the same accuracy
    assert [r.best_val_accuracy for r in forced.records] == [r.best_val_accuracy for r in rows]


def test_style_row_and_run_dirs(workspace):
    matrix = write_matrix(workspace, "style", [{"name": "flip-wave", "traditional": ["flip_horizontal"], "styles": ["Wave"]}])
    ledger = workspace / "style" / "ledger.csv"
    res = run_matrix(matrix, ledger)
    assert res.ok
    (rec,) = read_ledger(ledger)
    assert (rec.traditional, rec.styles) == ("Flipping", "Wave")
    run_dirs = list((ledger.parent / "runs").iterdir())
    assert len(run_dirs) == 1 and (run_dirs[0] / "best.ckpt").exists()


def test_failing_row_does_not_stop_matrix(workspace):
    experiments = [
        {"name": "missing-style", "styles": ["Nope"]},
        {"name": "ok", "traditional": []},
    ]
    matrix = write_matrix(workspace, "fail", experiments)
    ledger = workspace / "fail" / "ledger.csv"
    res = run_matrix(matrix, ledger)
    assert not res.ok and [label for label, _ in res.failures] == ["missing-style[seed=0]"]
    assert [r.name for r in read_ledger(ledger)] == ["ok"]


def test_parallel_jobs_match_sequential(workspace):
    matrix = write_matrix(workspace, "par", TRADITIONAL[:2], seeds=(0, 1))
    seq = run_matrix(matrix, workspace / "seq" / "ledger.csv", deterministic=True)
    par = run_matrix(matrix, workspace / "par" / "ledger.csv", jobs=2, deterministic=True)
    key = lambda r: (r.name, r.seed)
    assert sorted((key(r), r.best_val_accuracy) for r in seq.records) == sorted((key(r), r.best_val_accuracy) for r in par.records)
    assert verify_ledger(workspace / "par" / "ledger.csv")


def test_load_matrix_expands_seeds_and_hash_ignores_paths(workspace, tmp_path):
    matrix = write_matrix(workspace, "seeds", TRADITIONAL[:1], seeds=(0, 1, 2))
    configs = load_matrix(matrix)
    assert [c.seed for c in configs] == [0, 1, 2]
    assert len({c.config_hash("x") for c in configs}) == 3
    assert configs[0].config_hash("x") != configs[0].config_hash("y")
    dup = write_matrix(workspace, "dup", TRADITIONAL[:1] * 2)
    with pytest.raises(ContractError, match="duplicate"):
        load_matrix(dup)


def test_report_sorted_descending(tmp_path):
    ledger = tmp_path / "ledger.csv"
    styles = ["Snow", "RainPrincess", "Scream", "Wave", "Sunflower", "LAMuse", "Udnie", "YourName"]
    accs = [0.81, 0.85, 0.79, 0.83, 0.80, 0.84, 0.82, 0.78]
    for s, a in zip(styles, accs):
        append_record(ledger, record(f"style-{s}", a, styles=s))
    (table,) = report(ledger)
    assert table.columns == REPORT_COLUMNS
    assert [r[1] for r in table.rows] == [s for _, s in sorted(zip(accs, styles), reverse=True)]
    assert [r[3] for r in table.rows] == sorted(accs, reverse=True)
    text = table.to_text()
    assert "RainPrincess" in text.splitlines()[4] and "0.8500" in text


def test_report_one_row_and_filters(tmp_path):
    ledger = tmp_path / "ledger.csv"
    append_record(ledger, record("a", 0.5))
    (table,) = report(ledger)
    assert len(table.rows) == 1 and table.rows[0][5] == 1
    append_record(ledger, record("b", 0.7, trad="Flipping"))
    append_record(ledger, record("b", 0.9, trad="Flipping", seed=1))
    (table,) = report(ledger, names=["b"])
    assert table.rows == [("Flipping", "None", "small_cnn", pytest.approx(0.8), pytest.approx(0.1414213562), 2)]
    grouped = report(ledger, group_by="traditional")
    assert [t.title for t in grouped] == ["traditional = Flipping", "traditional = None"]
    assert sum(r[5] for t in grouped for r in t.rows) == len(read_ledger(ledger))
    with pytest.raises(ContractError):
        report(ledger, group_by="colour")


def test_report_csv_round_trip(tmp_path):
    ledger = tmp_path / "ledger.csv"
    for i, a in enumerate([0.25, 0.5, 0.75]):
        append_record(ledger, record(f"r{i}", a, styles=f"S{i}"))
    (table,) = report(ledger)
    parsed = read_report_csv(table.to_csv())
    assert parsed == [(table.title,) + tuple(str(v) if not isinstance(v, float) else f"{v:.4f}" for v in r) for r in table.rows]
    assert [float(p[4]) for p in parsed] == [r.best_val_accuracy for r in sorted(read_ledger(ledger), key=lambda r: -r.best_val_accuracy)]


def test_ledger_round_trip_and_empty(tmp_path):
    ledger = tmp_path / "ledger.csv"
    assert read_ledger(ledger) == [] and report(ledger) == []
    recs = [record("x", 1 / 3), record("y", 0.1 + 0.2, seed=4)]
    for r in recs:
        append_record(ledger, r)
    assert read_ledger(ledger) == recs
    assert ledger.read_text().splitlines()[0] == ",".join(LEDGER_COLUMNS)


def test_hash_chain_detects_tampering(tmp_path):
    ledger = tmp_path / "ledger.csv"
    for i in range(3):
        append_record(ledger, record(f"r{i}", 0.5))
    assert verify_ledger(ledger)
    ledger.write_text(ledger.read_text().replace("r1,None,None,small_cnn,0,0.5", "r1,None,None,small_cnn,0,0.9"))
    assert not verify_ledger(ledger)
    with pytest.raises(RuntimeError, match="chain"):
        append_record(ledger, record("r3", 0.5))


def test_interrupted_append_leaves_whole_rows(tmp_path):
    ledger = tmp_path / "ledger.csv"
    append_record(ledger, record("a", 0.5))
    with open(ledger, "ab") as fh:
        fh.write(b"b,None,None,small_cnn,0,0.")
    assert [r.name for r in read_ledger(ledger)] == ["a"]
    assert verify_ledger(ledger)
    append_record(ledger, record("c", 0.6))
    assert [r.name for r in read_ledger(ledger)] == ["a", "c"]
    assert verify_ledger(ledger)


def test_plots(tmp_path):
    ledger = tmp_path / "ledger.csv"
    append_record(ledger, ResultRecord("a", "None", "None", "small_cnn", 0, 0.6, 2, (0.4, 0.6, 0.5), "d", "c", "t", "0.1.0"))
    paths = write_plots(ledger, tmp_path / "plots")
    assert [p.name for p in paths] == ["accuracy_small_cnn.png"] and paths[0].stat().st_size > 0
