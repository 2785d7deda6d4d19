import json

import numpy as np
import pytest

from attrnet import io as fmt
from attrnet.cli import main
from attrnet.interweave import CSV_COLUMNS
from attrnet.synthetic import FIXTURE_GRID, block_weight_matrix, fixture_attribute_network, separable_attribute_task
from conftest import DATA


def usage_code(argv):
    with pytest.raises(SystemExit) as e:
        main(argv)
    return e.value.code


def test_usage_errors_exit_two(capsys):
    assert usage_code([]) == 2
    assert usage_code(["frobnicate"]) == 2
    assert usage_code(["bench"]) == 2  # --seed is required
    assert usage_code(["group", "--model", "m", "--k", "2"]) == 2
    assert usage_code(["svm", "train", "--features", "f", "--labels", "l", "--out", "o"]) == 2
    assert "usage" in capsys.readouterr().err


def test_data_errors_exit_one(tmp_path, capsys):
    assert main(["infer", "--net", str(tmp_path / "missing"), "--input", "x", "--out", "y"]) == 1
    (tmp_path / "bad.lnet").write_bytes(b"NOPE")
    assert main(["infer", "--net", str(tmp_path / "bad.lnet"), "--input", "x", "--out", "y"]) == 1
    assert "error" in capsys.readouterr().err


@pytest.fixture
def fixture_net(tmp_path):
    path = tmp_path / "anet.lnet"
    fmt.save_network(path, fixture_attribute_network(0))
    return path


def test_extract_single_patch_equals_infer(tmp_path, fixture_net, rng):
    side = FIXTURE_GRID.patch_side
    image = rng.uniform(size=(1, side, side)).astype(np.float32)
    fmt.save_tensor(tmp_path / "x.lten", image)
    g = FIXTURE_GRID
    common = ["--net", str(fixture_net), "--input", str(tmp_path / "x.lten")]
    assert main(["infer", *common, "--out", str(tmp_path / "a.lten")]) == 0
    grid = ["--cells", str(g.cells), "--cell-size", str(g.cell_size), "--patch-stride", str(g.patch_stride)]
    assert main(["extract", *common, *grid, "--out", str(tmp_path / "b.lten")]) == 0
    a, b = fmt.load_tensor(tmp_path / "a.lten"), fmt.load_tensor(tmp_path / "b.lten")
    assert b.shape == a.shape == (1, 16)
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_extract_many_patches_matches_oracle_flag(tmp_path, fixture_net, rng):
    image = rng.uniform(size=(1, 22, 20)).astype(np.float32)
    fmt.save_tensor(tmp_path / "x.lten", image)
    base = ["extract", "--net", str(fixture_net), "--input", str(tmp_path / "x.lten"), "--cells", "2",
            "--cell-size", "8", "--patch-stride", "2"]
    assert main(base + ["--out", str(tmp_path / "fast.lten"), "--threads", "3"]) == 0
    assert main(base + ["--out", str(tmp_path / "slow.lten"), "--oracle"]) == 0
    fast, slow = fmt.load_tensor(tmp_path / "fast.lten"), fmt.load_tensor(tmp_path / "slow.lten")
    assert fast.shape == (4 * 3, 16)
    np.testing.assert_allclose(fast, slow, atol=1e-5)


def test_bench_header(tmp_path):
    out = tmp_path / "bench.csv"
    assert main(["bench", "--seed", "0", "--patches-per-side", "1,2", "--repetitions", "1", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].split(",") == CSV_COLUMNS
    assert [int(l.split(",")[0]) for l in lines[1:]] == [1, 4]


def test_localize_then_eval(tmp_path):
    corpus = DATA / "corpus"
    images = [str(corpus / f"img{i:03d}.pgm") for i in range(10)]
    det = tmp_path / "det.json"
    code = main(
        ["localize", "--images", *images, "--net-o", str(corpus / "net_o.lnet"), "--net-s", str(corpus / "net_s.lnet"),
         "--threshold", str(corpus / "threshold.txt"), "--scales", "0.7", "--scales-s", "0.6", "--out", str(det),
         "--dump-maps", str(tmp_path / "maps")]
    )
    assert code == 0
    found = json.loads(det.read_text())["images"]
    assert len(found) == 10 and all(len(v["detections"]) == 1 for v in found.values())
    assert any((tmp_path / "maps").iterdir())
    truth = json.loads((corpus / "truth.json").read_text())
    truth["images"] = {k: v for k, v in truth["images"].items() if k in found}
    (tmp_path / "truth.json").write_text(json.dumps(truth))
    out = tmp_path / "eval.csv"
    assert main(["eval", "--detections", str(det), "--truth", str(tmp_path / "truth.json"), "--out", str(out)]) == 0
    header, row = out.read_text().splitlines()
    assert header == "iou_min,fppi,recall,images,truths,detections"
    assert row.split(",")[2] == "1.000000"


def test_train_toy_is_seeded(tmp_path):
    x, y = separable_attribute_task(0, n=60)
    fmt.save_tensor(tmp_path / "x.lten", x.astype(np.float32))
    np.savetxt(tmp_path / "y.csv", y, fmt="%d", delimiter=",")
    runs = []
    for name in ("a", "b"):
        argv = ["train-toy", "--features", str(tmp_path / "x.lten"), "--labels", str(tmp_path / "y.csv"),
                "--loss", "cross_entropy", "--lr", "0.5", "--steps", "50", "--seed", "4",
                "--out", str(tmp_path / f"{name}.lnet"), "--trace", str(tmp_path / f"{name}.csv")]
        assert main(argv) == 0
        runs.append(((tmp_path / f"{name}.lnet").read_bytes(), (tmp_path / f"{name}.csv").read_text()))
    assert runs[0] == runs[1]
    trace = runs[0][1].splitlines()
    assert trace[0] == "step,loss" and len(trace) == 51


def test_svm_train_predict_group(tmp_path, rng):
    w, _ = block_weight_matrix(0, dim=12, sizes=(2, 3))
    x = rng.normal(size=(80, 12)).astype(np.float32)
    labels = np.where(x @ w >= 0, 1, -1)
    fmt.save_tensor(tmp_path / "x.lten", x)
    np.savetxt(tmp_path / "y.csv", labels, fmt="%d", delimiter=",")
    model = tmp_path / "m.lsvm"
    argv = ["svm", "train", "--features", str(tmp_path / "x.lten"), "--labels", str(tmp_path / "y.csv"),
            "--seed", "1", "--out", str(model)]
    assert main(argv) == 0
    assert main(["svm", "predict", "--model", str(model), "--features", str(tmp_path / "x.lten"),
                 "--out", str(tmp_path / "s.csv")]) == 0
    rows = (tmp_path / "s.csv").read_text().splitlines()
    assert rows[0] == "attr0,attr1,attr2,attr3,attr4" and len(rows) == 81
    scores = np.array([[float(v) for v in r.split(",")] for r in rows[1:]])
    assert np.mean(np.sign(scores) == labels) > 0.9
    assert main(["group", "--model", str(model), "--k", "2", "--seed", "0", "--out", str(tmp_path / "g.json")]) == 0
    g = json.loads((tmp_path / "g.json").read_text())
    assert g["k"] == 2 and sorted(i for c in g["clusters"] for i in c) == list(range(5))
    assert main(["group", "--model", str(model), "--k", "9", "--seed", "0"]) == 1


@pytest.mark.parametrize("threads", [1, 4])
def test_pipeline_reproduces_golden(tmp_path, threads):
    pipe = DATA / "pipeline"
    images = [str(DATA / p) for p in json.loads((pipe / "images.json").read_text())]
    out = tmp_path / "out.json"
    argv = ["pipeline", "--config", str(pipe / "config.txt"), "--threads", str(threads), "--images", *images,
            "--out", str(out)]
    assert main(argv) == 0
    assert out.read_bytes() == (pipe / "golden.json").read_bytes()
