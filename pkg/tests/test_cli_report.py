import json
import xml.etree.ElementTree as ET

import pytest

from msnn import cli
from msnn.report import ReportError, kruskal_table, plot_roc, run_report


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["gen", "--out", str(out), "--seed", "3"]) == 0
    assert cli.main(["label", "--out", str(out), "--seed", "3"]) == 0
    return out


def train(out, model, *extra):
    return cli.main(["train", "--out", str(out), "--seed", "3", "--model", model,
                     "--epochs", "3", *extra])


def test_gen_and_label_outputs(workdir):
    assert (workdir / "cohort.csv").exists()
    assert len(list((workdir / "volumes").glob("*.rvol"))) == 64 * 3
    split = json.loads((workdir / "split.json").read_text())
    assert len(split["test"]) == 16 and len(split["folds"]) == 4


def test_train_sweep_report(workdir):
    assert train(workdir, "clin") == 0
    assert (workdir / "metrics.csv").read_text().count("\n") == 2
    assert cli.main(["sweep-na", "--out", str(workdir), "--seed", "3", "--model", "clin",
                     "--na", "0,0.25"]) == 0
    assert train(workdir, "mlp") == 0
    assert cli.main(["sweep-na", "--out", str(workdir), "--seed", "3", "--model", "mlp",
                     "--na", "0,0.25"]) == 0
    assert cli.main(["report", "--out", str(workdir)]) == 0
    assert sorted(p.name for p in (workdir / "checkpoints").iterdir())[:2] == \
        ["clin_fold0.msnn", "clin_fold1.msnn"]
    for name in ("roc_clin_0.0000.csv", "roc_mlp_0.2500.csv", "roc.svg", "fold_auc.csv"):
        assert (workdir / name).exists()
    rows = (workdir / "metrics.csv").read_text().splitlines()
    assert [r.split(",")[:2] for r in rows[1:]] == [
        ["clin", "0.0000"], ["clin", "0.2500"], ["mlp", "0.0000"], ["mlp", "0.2500"]]
    root = ET.parse(workdir / "roc.svg").getroot()
    assert root.tag.endswith("svg")


def test_train_is_byte_reproducible(tmp_path, workdir):
    import shutil
    copy = tmp_path / "copy"
    shutil.copytree(workdir, copy, ignore=shutil.ignore_patterns("metrics.csv", "fold_auc.csv",
                                                                 "roc*", "checkpoints"))
    assert train(copy, "multi", "--folds", "4") == 0
    first = (copy / "metrics.csv").read_bytes()
    (copy / "metrics.csv").unlink()
    assert train(copy, "multi") == 0
    assert (copy / "metrics.csv").read_bytes() == first


def test_invalid_config_exit_code(tmp_path, workdir):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"epochs": 0}))
    assert cli.main(["train", "--out", str(workdir), "--config", str(bad)]) == 2
    bad.write_text(json.dumps({"learning_rate": 0.1}))
    assert cli.main(["train", "--out", str(workdir), "--config", str(bad)]) == 2
    assert cli.main(["sweep-na", "--out", str(workdir), "--na", "0,1.5"]) == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--model", "rnn"])
    assert exc.value.code == 2


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 5, "model": "clin", "seed": 9}))
    args = cli._parser().parse_args(["train", "--config", str(cfg), "--epochs", "7"])
    s = cli.resolve(args)
    assert (s["epochs"], s["model"], s["seed"], s["folds"]) == (7, "clin", 9, 4)


def test_data_error_exit_code(tmp_path, workdir):
    assert cli.main(["train", "--out", str(tmp_path / "empty")]) == 3
    bad = tmp_path / "badvol"
    import shutil
    shutil.copytree(workdir, bad, ignore=shutil.ignore_patterns("checkpoints"))
    victim = next((bad / "volumes").glob("*.rvol"))
    victim.write_bytes(b"JUNK" + victim.read_bytes()[4:])
    assert train(bad, "multi") == 3
    assert cli.main(["report", "--out", str(tmp_path / "nothing")]) == 3


def test_report_rejects_mixed_cohorts(tmp_path, workdir):
    import shutil
    mixed = tmp_path / "mixed"
    shutil.copytree(workdir, mixed)
    text = (mixed / "metrics.csv").read_text().splitlines()
    text[-1] = text[-1][:-16] + "0" * 16
    (mixed / "metrics.csv").write_text("\n".join(text) + "\n")
    with pytest.raises(ReportError, match="different cohorts"):
        run_report(mixed)


def test_single_model_report_has_no_kruskal(tmp_path):
    out = tmp_path / "one"
    assert cli.main(["gen", "--out", str(out), "--seed", "1"]) == 0
    assert cli.main(["label", "--out", str(out), "--seed", "1"]) == 0
    assert cli.main(["train", "--out", str(out), "--seed", "1", "--model", "clin",
                     "--epochs", "2"]) == 0
    result = run_report(out)
    assert result["kruskal"] == [] and not (out / "kruskal.csv").exists()
    root = ET.parse(out / "roc.svg").getroot()
    assert root.tag.endswith("svg")


def test_kruskal_table_one_row_per_level():
    rows = []
    for model, base in (("clin", 0.7), ("multi", 0.9)):
        for na in ("0.0000", "0.3750"):
            for k in range(4):
                rows.append({"model": model, "na_fraction": na, "fold": str(k),
                             "auc": str(base + 0.01 * k)})
    table = kruskal_table(rows)
    assert [(r["group_a"], r["group_b"], r["na_fraction"]) for r in table] == [
        ("clin", "multi", "0.0000"), ("clin", "multi", "0.3750")]
    assert float(table[0]["p"]) < 0.05


def test_plot_is_well_formed_svg(tmp_path):
    path = tmp_path / "roc.svg"
    plot_roc({"0.0000": {"clin": [(0, 0), (0.5, 0.8), (1, 1)]}}, path)
    root = ET.parse(path).getroot()
    assert root.tag == "{http://www.w3.org/2000/svg}svg"
    assert len(list(root.iter("{http://www.w3.org/2000/svg}path"))) >= 2
