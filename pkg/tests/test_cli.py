import json
from pathlib import Path

import pytest

from multigran.cli import EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, main
from multigran.corpus import SampleRecord, read_records
from multigran.visualize import render_svg

GOLDEN = Path(__file__).parent / "golden"

TINY_MODEL = {
    "dim": 32, "heads": 2, "enc_layers": 1, "dec_layers": 1, "num_queries": 4,
    "poly_points": 8, "backbone_channels": [8, 8, 16, 16],
}


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_json(root / "corpus.json", {"image_size": 64, "seed": 4, "line_height": [0.12, 0.14]})
    assert main(["corpus-gen", "--config", cfg, "--out", str(root / "data"), "--count", "2"]) == EXIT_OK
    return root


@pytest.fixture(scope="module")
def det_ckpt(dataset):
    cfg = write_json(dataset / "det.json", {"steps": 2, "batch_size": 2, "model": TINY_MODEL})
    out = dataset / "det"
    assert main(["train-det", "--config", cfg, "--dataset", str(dataset / "data"), "--out", str(out)]) == EXIT_OK
    return out / "det.ckpt"


def test_corpus_gen_empty_and_reproducible(tmp_path):
    assert main(["corpus-gen", "--out", str(tmp_path / "empty"), "--count", "0"]) == EXIT_OK
    assert (tmp_path / "empty" / "index.jsonl").read_text() == ""
    cfg = write_json(tmp_path / "c.json", {"image_size": 64, "seed": 1})
    for name in ("a", "b"):
        assert main(["corpus-gen", "--config", cfg, "--out", str(tmp_path / name), "--count", "2"]) == EXIT_OK
    for rel in ["index.jsonl"] + [p.name for p in (tmp_path / "a" / "images").iterdir()]:
        sub = "" if rel == "index.jsonl" else "images"
        assert (tmp_path / "a" / sub / rel).read_bytes() == (tmp_path / "b" / sub / rel).read_bytes()


def test_corpus_gen_invalid_range(tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", {"words_per_line": [5, 2]})
    assert main(["corpus-gen", "--config", cfg, "--out", str(tmp_path / "x"), "--count", "1"]) == EXIT_INVALID
    assert "words_per_line" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_usage_errors_exit_2(tmp_path):
    assert main([]) == EXIT_INVALID
    assert main(["corpus-gen", "--out", str(tmp_path), "--count", "x"]) == EXIT_INVALID
    assert main(["infer", "--ckpt", "a", "--dataset", "b", "--out", "c", "--factor", "7"]) == EXIT_INVALID


def test_train_and_infer(dataset, det_ckpt, tmp_path):
    log = (det_ckpt.parent / "det_loss.csv").read_text().splitlines()
    assert log[0] == "step,lr,total,word,line,para,page" and len(log) == 3
    preds = tmp_path / "preds.jsonl"
    data = str(dataset / "data")
    assert main(["infer", "--ckpt", str(det_ckpt), "--dataset", data, "--out", str(preds),
                 "--score-thresh", "0", "--factor", "disabled"]) == EXIT_OK
    records = read_records(preds)
    assert len(records) == 2
    for rec in records:
        assert rec.flags == {"word": 1, "line": 1, "para": 1, "page": 1}
        assert {i.granularity.key for i in rec.instances} == {"word", "line", "para", "page"}
        assert all(i.score is not None for i in rec.instances)
    assert main(["infer", "--ckpt", str(det_ckpt), "--dataset", data, "--out", str(preds),
                 "--score-thresh", "1.0"]) == EXIT_OK
    assert all(not r.instances for r in read_records(preds))


def test_infer_empty_dataset(det_ckpt, tmp_path):
    assert main(["corpus-gen", "--out", str(tmp_path / "d"), "--count", "0"]) == EXIT_OK
    out = tmp_path / "p.jsonl"
    assert main(["infer", "--ckpt", str(det_ckpt), "--dataset", str(tmp_path / "d"), "--out", str(out)]) == EXIT_OK
    assert out.read_text() == ""


def test_train_seg_and_masks(dataset, det_ckpt, tmp_path):
    cfg = write_json(tmp_path / "seg.json", {"stage": "seg", "steps": 1, "batch_size": 2, "model": TINY_MODEL})
    out = tmp_path / "seg"
    data = str(dataset / "data")
    assert main(["train-seg", "--config", cfg, "--dataset", data, "--det-ckpt", str(det_ckpt),
                 "--out", str(out)]) == EXIT_OK
    preds = tmp_path / "preds.jsonl"
    assert main(["infer", "--ckpt", str(out / "seg.ckpt"), "--dataset", data, "--out", str(preds),
                 "--score-thresh", "0", "--with-masks"]) == EXIT_OK
    rec = read_records(preds)[0]
    assert all(sum(i.mask_rle) == rec.width * rec.height for i in rec.instances)


def test_bad_checkpoint_and_dataset(dataset, tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint at all")
    data = str(dataset / "data")
    assert main(["infer", "--ckpt", str(bad), "--dataset", data, "--out", str(tmp_path / "p")]) == EXIT_INVALID
    assert "magic" in capsys.readouterr().err
    assert main(["infer", "--ckpt", str(bad), "--dataset", str(tmp_path), "--out", "p"]) == EXIT_INVALID


def test_stage_mismatch_is_invalid(dataset, tmp_path):
    cfg = write_json(tmp_path / "t.json", {"stage": "seg", "steps": 1})
    assert main(["train-det", "--config", cfg, "--dataset", str(dataset / "data"),
                 "--out", str(tmp_path / "o")]) == EXIT_INVALID


def test_unwritable_output_is_runtime_failure(dataset, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["corpus-gen", "--out", str(blocker / "sub"), "--count", "1"]) == EXIT_RUNTIME


def test_eval_round_trip(dataset, tmp_path):
    data = dataset / "data"
    out = tmp_path / "report.json"
    # ground truth scored against itself
    assert main(["eval", "--preds", str(data / "index.jsonl"), "--dataset", str(data), "--out", str(out)]) == EXIT_OK
    report = json.loads(out.read_text())
    assert all(g["f1"] == 1.0 for g in report["granularities"].values())
    assert report["page_miou"] == 1.0 and out.with_suffix(".txt").exists()


def test_visualize_layers_and_golden(dataset, tmp_path):
    data = dataset / "data"
    out = tmp_path / "viz"
    assert main(["visualize", "--preds", str(data / "index.jsonl"), "--dataset", str(data), "--out", str(out)]) == EXIT_OK
    svgs = sorted(out.glob("*.svg"))
    assert len(svgs) == 2 and len(list(out.glob("*.png"))) == 2
    text = svgs[0].read_text()
    for layer, color in (("word", "#ffff00"), ("line", "#00c800"), ("para", "#8b4513"), ("page", "#ff00ff")):
        assert f'class="{layer}" stroke="{color}"' in text
    rec = read_records(data / "index.jsonl")[0]
    assert render_svg(rec, rec.image) == (GOLDEN / "overlay_0004-000000.svg").read_text()


def test_visualize_no_instances(tmp_path):
    rec = SampleRecord("e", "images/e.png", 8, 8, {"word": 1, "line": 1, "para": 1, "page": 1}, [])
    svg = render_svg(rec, "images/e.png")
    assert "<image" in svg and "<g" not in svg
