import csv
import io

import numpy as np
import pytest

from hqstream.cli import main
from hqstream.latent import GaussianParams, load_latent, store_latent
from hqstream.schedfile import read_schedule
from hqstream.stream import decode, measure, parse_header


@pytest.fixture()
def work(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["sample", "-o", "a.hql", "--source", "shape=2x12x12,sigma=0.5:5", "--seed", "3"]) == 0
    assert main(["trit", "-o", "t.txt", "--layers", "5", "--channels", "2", "--finest", "0.05"]) == 0
    assert main(["encode", "a.hql", "--schedule", "t.txt", "-o", "a.hqs"]) == 0
    return tmp_path


def test_encode_decode_round_trip(work, capsys):
    assert main(["decode", "a.hqs", "-o", "b.hql"]) == 0
    assert "achieved point 5" in capsys.readouterr().out
    y, p = load_latent((work / "a.hql").read_bytes())
    z, q = load_latent((work / "b.hql").read_bytes())
    want, _ = decode((work / "a.hqs").read_bytes())
    np.testing.assert_array_equal(z, want.astype(np.float32))
    np.testing.assert_array_equal(q.mu, p.mu)
    np.testing.assert_array_equal(q.sigma, p.sigma)


def test_encode_summary(work, capsys):
    main(["encode", "a.hql", "--schedule", "t.txt", "-o", "c.hqs"])
    out = capsys.readouterr().out
    assert "bytes" in out and "layers" in out
    assert (work / "c.hqs").read_bytes() == (work / "a.hqs").read_bytes()


def test_decode_bytes_zero_is_mean(work, capsys):
    assert main(["decode", "a.hqs", "--bytes", "0", "-o", "m.hql"]) == 0
    assert "achieved point 0" in capsys.readouterr().out
    z, q = load_latent((work / "m.hql").read_bytes())
    np.testing.assert_array_equal(z, q.mu)


def test_decode_fractional_point_printed(work, capsys):
    assert main(["decode", "a.hqs", "--point", "3.3", "-o", "f.hql"]) == 0
    out = capsys.readouterr().out
    achieved = float(out.split()[-1])
    n = 2 * 12 * 12
    assert 3.3 - 1.0 / n - 1e-6 <= achieved <= 3.3 + 1e-9


def test_truncate_full_is_copy(work):
    data = (work / "a.hqs").read_bytes()
    _, off = parse_header(data)
    assert main(["truncate", "a.hqs", "--bytes", str(len(data) - off), "-o", "t.hqs"]) == 0
    assert (work / "t.hqs").read_bytes() == data
    assert main(["truncate", "a.hqs", "--point", "5", "-o", "u.hqs"]) == 0
    assert (work / "u.hqs").read_bytes() == data


def test_truncate_needs_target(work):
    assert main(["truncate", "a.hqs", "-o", "x.hqs"]) == 2


def test_inspect_truncated(work, capsys):
    main(["truncate", "a.hqs", "--point", "2.5", "-o", "p.hqs"])
    capsys.readouterr()
    assert main(["inspect", "p.hqs"]) == 0
    out = capsys.readouterr().out
    assert "segments   2 complete of 5 (truncated)" in out
    assert main(["inspect", "p.hqs", "--format", "json"]) == 0


def test_rd_curve_round_trips_measure(work, capsys):
    assert main(["rd-curve", "a.hql", "--schedule", "t.txt", "--points", "0,1,2.5,5", "-o", "rd.csv"]) == 0
    rows = list(csv.DictReader(io.StringIO((work / "rd.csv").read_text())))
    assert list(rows[0]) == ["point", "bpp", "msqe", "selection_ratio", "header_bytes", "payload_bytes"]
    y, _ = load_latent((work / "a.hql").read_bytes())
    want = measure((work / "a.hqs").read_bytes(), y, [0, 1, 2.5, 5])
    lines = (work / "rd.csv").read_text().splitlines()[1:]
    assert lines == [r.to_csv() for r in want]
    assert main(["rd-curve", "a.hql", "--container", "a.hqs", "--format", "human"]) == 0
    assert "bits per latent component" in capsys.readouterr().out


def test_missing_file_exit_2(work):
    assert main(["decode", "nope.hqs", "-o", "x.hql"]) == 2
    assert main(["encode", "nope.hql", "--schedule", "t.txt", "-o", "x.hqs"]) == 2


def test_bad_schedule_exit_2(work, capsys):
    text = (work / "t.txt").read_text().replace("delta.2 = 1.35 1.35", "delta.2 = 9.0 1.35")
    (work / "bad.txt").write_text(text)
    assert main(["encode", "a.hql", "--schedule", "bad.txt", "-o", "x.hqs"]) == 2
    err = capsys.readouterr().err
    assert "layer 2, channel 0" in err


def test_corrupt_container_exit_2(work):
    (work / "bad.hqs").write_bytes(b"HQS1garbage")
    assert main(["decode", "bad.hqs", "-o", "x.hql"]) == 2


def test_usage_error_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_fit_writes_schedule(work):
    assert main(["fit", "--source", "shape=2x6x6", "--layers", "3", "--sweeps", "1", "--seed", "4", "-o", "fit.txt"]) == 0
    s, extras = read_schedule(work / "fit.txt")
    assert s.n_layers == 3 and s.n_channels == 2
    assert extras["seed"] == "4"
    assert main(["fit", "--source", "shape=2x6x6", "--layers", "3", "--sweeps", "1", "--seed", "4", "-o", "fit2.txt"]) == 0
    assert (work / "fit.txt").read_text() == (work / "fit2.txt").read_text()
    assert main(["fit", "--source", "shape=2x6x6,bogus=1", "-o", "x.txt"]) == 2


def test_directory_encode(work, monkeypatch):
    (work / "in").mkdir()
    for i in range(3):
        y = np.full((2, 3, 3), float(i))
        (work / "in" / f"{i}.hql").write_bytes(store_latent(y, GaussianParams(y * 0, y * 0 + 1)))
    monkeypatch.setenv("HQSTREAM_THREADS", "2")
    assert main(["encode", "in", "--schedule", "t.txt", "-o", "out"]) == 0
    assert sorted(p.name for p in (work / "out").iterdir()) == ["0.hqs", "1.hqs", "2.hqs"]
    monkeypatch.setenv("HQSTREAM_THREADS", "zero")
    assert main(["encode", "in", "--schedule", "t.txt", "-o", "out"]) == 2
