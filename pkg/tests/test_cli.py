import csv
import json
import multiprocessing as mp
import pathlib

import numpy as np
import pytest
from hypothesis import given, strategies as st

from subelliptic import SCHEMA_VERSION, __version__, cli
from subelliptic import config as C
from subelliptic import frames as F
from subelliptic import reports as R
from subelliptic.errors import ParseError, RangeError, UnknownKey

FIXTURE = pathlib.Path(__file__).parent / "fixtures" / "beta_hat_h1_p4.json"


def run(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


# ---------------------------------------------------------------------------
# configuration


def test_empty_file_plus_flags(tmp_path):
    path = tmp_path / "empty.ini"
    path.write_text("")
    cfg = C.load_config(str(path), {"command": "ubound", "p": 4, "q": 2, "frame": "h1", "seed": 3})
    assert cfg.command == "ubound" and cfg.get("p") == 4.0 and cfg.seed == 3


def test_flags_override_file(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[run]\ncommand = ubound\nseed = 1\n[params]\np = 3\n")
    cfg = C.load_config(str(path), {"p": 4.0})
    assert cfg.get("p") == 4.0 and cfg.seed == 1


def test_duplicate_key_names_the_key(tmp_path):
    path = tmp_path / "dup.ini"
    path.write_text("[params]\np = 4\np = 3\n")
    with pytest.raises(ParseError, match="'p'"):
        C.load_config(str(path), {"command": "ubound"})


def test_unknown_key(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[params]\nwidth = 4\n")
    with pytest.raises(UnknownKey):
        C.load_config(str(path), {"command": "ubound"})


def test_p_two_is_out_of_range():
    with pytest.raises(RangeError, match="p > 2"):
        C.load_config(None, {"command": "ubound", "p": 2})


def test_missing_samples_file():
    with pytest.raises(ParseError):
        C.load_config(None, {"command": "ubound", "p": 4, "samples": "/nonexistent/s.bin"})


def test_frame_file_round_trip(tmp_path):
    for frame in (F.heisenberg(), F.quaternionic(), F.grushin(1, 1, 2.0), F.heisenberg_greiner(1, 1.5)):
        text = C.format_frame(frame)
        back = C.parse_frame(text)
        assert back.digest() == frame.digest()
        path = tmp_path / "frame.ini"
        path.write_text(text)
        assert C.load_frame(str(path)).digest() == frame.digest()


def test_frame_file_errors():
    with pytest.raises(ParseError, match="j1 needs 4 entries"):
        C.parse_frame("[frame]\nkind = Metivier\nn = 1\nm = 1\n[J]\nj1 = 0, 1, -1\n")
    with pytest.raises(UnknownKey):
        C.parse_frame("[frame]\nkind = Grushin\nn = 1\nm = 1\ngamma = 1\ncolour = red\n")


def test_config_digest_ignores_output_location():
    a = C.load_config(None, {"command": "certificate", "p": 4, "eps": 0.01, "out": "x", "threads": 1})
    b = C.load_config(None, {"command": "certificate", "p": 4, "eps": 0.01, "out": "y", "threads": 4})
    c = C.load_config(None, {"command": "certificate", "p": 4, "eps": 0.02})
    assert a.digest() == b.digest() != c.digest()


# ---------------------------------------------------------------------------
# reports


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_numbers_round_trip(x):
    assert float(R.format_number(x)) == x


def test_empty_table_has_header_only(tmp_path):
    path = R.write_csv(tmp_path / "t.csv", ["a", "b"], [])
    assert path.read_text() == "a,b\n"


def test_json_is_stable():
    assert R.dumps({"b": 1, "a": [1.5, float("inf")]}) == R.dumps({"a": [1.5, float("inf")], "b": 1})


def _writer(args):
    path, k = args
    for i in range(200):
        R.append_ledger(path, json.dumps({"writer": k, "i": i, "pad": "x" * 3000}) + "\n")


def test_concurrent_ledger_lines_stay_intact(tmp_path):
    path = str(tmp_path / "ledger.jsonl")
    with mp.get_context("fork").Pool(4) as pool:
        pool.map(_writer, [(path, k) for k in range(4)])
    lines = R.read_ledger(path)
    assert len(lines) == 800
    assert sorted((d["writer"], d["i"]) for d in lines) == [(k, i) for k in range(4) for i in range(200)]


# ---------------------------------------------------------------------------
# command line


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--version"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    assert __version__ in out and f"schema {SCHEMA_VERSION}" in out


def test_certificate_command(tmp_path, capsys):
    code, out, _ = run(["certificate", "--p", "4", "--q", "2", "--eps", "0.01", "--out", str(tmp_path)], capsys)
    assert code == 0
    payload = json.loads(next(tmp_path.glob("certificate-*.json")).read_text())
    assert payload["result"]["R"] == "10" and payload["result"]["sigma"] == "2"
    ledger = R.read_ledger(tmp_path / "ledger.jsonl")
    assert ledger[0]["payload_hash"] == json.loads(out)["payload_hash"]
    assert ledger[0]["artifact_version"] == __version__


def test_certificate_with_conjugate_exponent(tmp_path, capsys):
    code, _, _ = run(["certificate", "--p", "4", "--q", str(4 / 3), "--eps", "0.0001", "--out", str(tmp_path)],
                     capsys)
    result = json.loads(next(tmp_path.glob("certificate-*.json")).read_text())["result"]
    assert code == 0 and result["R"] == "1000" and result["q"] == "4/3"


def test_rerun_appends_identical_payload_hash(tmp_path, capsys):
    argv = ["certificate", "--p", "4", "--eps", "0.01", "--out", str(tmp_path)]
    run(argv, capsys)
    run(argv, capsys)
    ledger = R.read_ledger(tmp_path / "ledger.jsonl")
    assert len(ledger) == 2 and ledger[0]["payload_hash"] == ledger[1]["payload_hash"]


def test_errors_exit_one_with_json(tmp_path, capsys):
    code, _, err = run(["ubound", "--p", "2", "--out", str(tmp_path)], capsys)
    assert code == 1
    body = json.loads(err)
    assert body["error"] == "range_error" and "p > 2" in body["message"]


def test_refused_precondition_exits_two(tmp_path, capsys):
    code, _, _ = run(["hardy", "--p", "4", "--variant", "general", "--out", str(tmp_path)], capsys)
    assert code == 2
    payload = json.loads(next(tmp_path.glob("hardy-*.json")).read_text())
    assert payload["result"]["precondition"]["status"] == "unmet"


def test_norm_check_csv(tmp_path, capsys):
    code, _, _ = run(["norm-check", "--points", "20", "--out", str(tmp_path)], capsys)
    assert code == 0
    with open(next(tmp_path.glob("norm-check-*-gauge.csv")), newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:2] == ["point_id", "quantity"] and rows[0][-5:] == ["N", "measured", "predicted", "rel_dev",
                                                                         "skipped"]
    assert len(rows) == 1 + 20 * 3


def test_spi_fit_matches_fixture(tmp_path, capsys):
    code, _, _ = run(["spi-fit", "--p", "4", "--q", "2", "--out", str(tmp_path)], capsys)
    assert code == 0
    payload = json.loads(next(tmp_path.glob("spi-fit-*.json")).read_text())
    fixture = json.loads(FIXTURE.read_text())
    assert R.dumps(payload["result"]) == R.dumps(fixture["result"])


def test_samples_feed_downstream_commands(tmp_path, capsys):
    code, _, _ = run(["sample", "--p", "4", "--n", "20000", "--out", str(tmp_path)], capsys)
    assert code == 0
    cache = next(tmp_path.glob("samples-*.bin"))
    with open(cache, "rb") as fh:
        header = json.loads(fh.readline())
        raw = fh.read()
    assert header["dim"] == 3 and len(raw) == 8 * 3 * header["n_points"]
    pts = np.frombuffer(raw, dtype="<f8").reshape(-1, 3)
    assert np.all(np.isfinite(pts))
    code, _, _ = run(["ubound", "--p", "4", "--samples", str(cache), "--out", str(tmp_path)], capsys)
    assert code == 0
    code, _, err = run(["hardy", "--p", "4", "--variant", "general", "--frame", "quaternionic", "--samples",
                        str(cache), "--out", str(tmp_path)], capsys)
    # the cache belongs to another frame
    assert code == 1 and json.loads(err)["error"] == "unusable_samples"


def test_spectrum_dump(tmp_path, capsys):
    code, _, _ = run(["spectrum", "--p", "4", "--grid", "12,12,12", "--k", "3", "--dump", "--out", str(tmp_path)],
                     capsys)
    assert code == 0
    payload = json.loads(next(tmp_path.glob("spectrum-*.json")).read_text())["result"]
    assert len(payload["rel_gap"]) == 3
    path = tmp_path / payload["vector_files"]["dirichlet"]
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        vecs = np.frombuffer(fh.read(), dtype="<f8").reshape(header["n_points"], header["dim"])
    assert vecs.shape[0] == 3 and header["eigenvalues"] == payload["dirichlet"]["eigenvalues"]


def test_spectrum_only_on_heisenberg(tmp_path, capsys):
    code, _, err = run(["spectrum", "--p", "4", "--frame", "quaternionic", "--out", str(tmp_path)], capsys)
    assert code == 1 and "H^1" in json.loads(err)["message"]
