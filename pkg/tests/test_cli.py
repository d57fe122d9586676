import csv

import numpy as np
import pytest

from lcodec import cli
from lcodec.qtensor import QTensor


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("toy")
    assert cli.main(["make-toy", "--out", str(d), "--images", "4", "--size", "48"]) == 0
    assert cli.main(["dump-latents", "--model", str(d / "enc.qmdl"), "--images", str(d / "images"),
                     "--out", str(d / "lat")]) == 0
    assert cli.main(["train-entropy", "--latents", str(d / "lat"), "--out", str(d / "m.qems")]) == 0
    return d


def codec_args(d, encoder=True):
    args = ["--model-dec", str(d / "dec.qmdl"), "--entropy", str(d / "m.qems")]
    return (["--model-enc", str(d / "enc.qmdl")] if encoder else []) + args


class TestCommands:
    def test_encode_decode_round_trip(self, workdir, capsys):
        d = workdir
        src = d / "images" / "img000.ppm"
        assert cli.main(["encode", *codec_args(d), "--lambda", "0.3", "--rdoq", "--dump-latent", str(d / "enc.qtns"),
                         str(src), str(d / "a.qbit")]) == 0
        out = capsys.readouterr().out
        assert "bpp:" in out and "psnr:" in out and "rd_cost:" in out and "rdoq:" in out
        assert cli.main(["decode", *codec_args(d, False), "--dump-latent", str(d / "dec.qtns"), str(d / "a.qbit"),
                         str(d / "a.ppm")]) == 0
        assert QTensor.load(d / "enc.qtns") == QTensor.load(d / "dec.qtns")

    def test_rdoq_never_raises_cost(self, workdir, capsys):
        d = workdir
        costs = []
        for extra in ([], ["--rdoq"]):
            cli.main(["encode", *codec_args(d), "--lambda", "1.0", *extra, str(d / "images" / "img001.ppm"),
                      str(d / "b.qbit")])
            line = capsys.readouterr().out.splitlines()[0]
            costs.append(float(line.split("rd_cost:")[1].split()[0]))
        assert costs[1] <= costs[0]

    def test_integerize(self, workdir, capsys):
        d = workdir
        assert cli.main(["integerize", "--float-model", str(d / "dec.fmdl"), "--calib", str(d / "lat"),
                         "--out", str(d / "dec2.qmdl")]) == 0
        assert "psnr" in capsys.readouterr().out
        assert cli.main(["integerize", "--float-model", str(d / "enc.fmdl"), "--calib", str(d / "images"),
                         "--out", str(d / "enc2.qmdl")]) == 0

    def test_eval_csv(self, workdir, capsys):
        d = workdir
        assert cli.main(["eval", *codec_args(d), "--images", str(d / "images"), "--out", str(d / "c.csv")]) == 0
        text = (d / "c.csv").read_text()
        rows = list(csv.DictReader(text.splitlines()))
        assert text.splitlines()[0] == "image,lambda,bpp,psnr"
        means = [r for r in rows if r["image"] == "mean"]
        assert len(means) == 7 and len(rows) == 7 * 5
        assert {r["lambda"] for r in means} == {"0.0018", "0.0035", "0.0067", "0.02", "0.04", "0.08", "0.013"}
        assert [float(r["bpp"]) for r in means] == sorted(float(r["bpp"]) for r in means)
        # deterministic output
        cli.main(["eval", *codec_args(d), "--images", str(d / "images"), "--out", str(d / "c2.csv")])
        assert (d / "c2.csv").read_text() == text

    def test_bdrate(self, tmp_path, capsys):
        def write(path, scale):
            lines = ["image,lambda,bpp,psnr"]
            for lam, r, q in [(1, 0.1, 27), (2, 0.3, 30.5), (3, 0.6, 33.2), (4, 1.1, 36)]:
                lines.append(f"mean,{lam},{r * scale:.6f},{q:.4f}")
            path.write_text("\n".join(lines) + "\n")

        write(tmp_path / "a.csv", 1.0)
        write(tmp_path / "b.csv", 1.1)
        assert cli.main(["bdrate", str(tmp_path / "a.csv"), str(tmp_path / "a.csv")]) == 0
        assert capsys.readouterr().out.strip() == "0.0000"
        assert cli.main(["bdrate", str(tmp_path / "a.csv"), str(tmp_path / "b.csv")]) == 0
        assert float(capsys.readouterr().out) == pytest.approx(10.0, abs=0.01)


class TestErrors:
    def test_usage_errors_exit_1(self, capsys):
        assert cli.main([]) == 1
        assert cli.main(["encode"]) == 1
        assert cli.main(["nonsense"]) == 1
        err = capsys.readouterr().err.strip().splitlines()
        assert all(line.startswith("error:") for line in err)

    def test_data_errors_exit_2(self, workdir, tmp_path, capsys):
        d = workdir
        (tmp_path / "junk.qbit").write_bytes(b"not a bitstream")
        assert cli.main(["decode", *codec_args(d, False), str(tmp_path / "junk.qbit"), str(tmp_path / "o.ppm")]) == 2
        assert cli.main(["encode", *codec_args(d), str(tmp_path / "missing.ppm"), str(tmp_path / "o.qbit")]) == 2
        (tmp_path / "bad.csv").write_text("x,y\n1,2\n")
        assert cli.main(["bdrate", str(tmp_path / "bad.csv"), str(tmp_path / "bad.csv")]) == 2
        err = capsys.readouterr().err.strip().splitlines()
        assert len(err) == 3 and all(line.startswith("error:") for line in err)

    def test_bad_passes(self, workdir):
        d = workdir
        assert cli.main(["encode", *codec_args(d), "--passes", "0", "x.ppm", "y.qbit"]) == 1

    def test_empty_directory(self, tmp_path):
        (tmp_path / "empty").mkdir()
        assert cli.main(["train-entropy", "--latents", str(tmp_path / "empty"), "--out", str(tmp_path / "m")]) == 2
