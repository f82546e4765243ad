import json

import pytest

from src.backend.exceptions import DomainError
from src.main import SWEEP_HEADER, SweepSpec, coupling_table, main
from src.utils.report_io import read_csv_rows

COUPLING_CSV = (
    "system_spde_pct,channel_loss_db,spad_spde_pct\n"
    "10.25,1.97,17.0\n"
    "10.36,0.72,14.3\n"
    "10.27,0.89,13.8\n"
    "10.42,1.15,14.3\n"
)


@pytest.fixture(autouse=True)
def single_worker(monkeypatch):
    monkeypatch.setenv("QKDSIM_THREADS", "1")


def test_coupling_table_values(tmp_path):
    table = tmp_path / "table.csv"
    table.write_text(COUPLING_CSV, encoding="utf-8")
    out = tmp_path / "coupling.csv"
    assert main(["coupling", str(table), "--out", str(out)]) == 0
    losses = [row["coupling_loss_db"] for row in read_csv_rows(str(out))]
    assert losses[0] == "0.22"
    assert losses[1] == "0.68"
    assert losses[2] in ("0.39", "0.40")
    assert losses[3] == "0.22"


def test_coupling_errors_name_the_line():
    rows = [
        {"system_spde_pct": "10.25", "channel_loss_db": "1.97", "spad_spde_pct": "17.0"},
        {"system_spde_pct": "ten", "channel_loss_db": "0.72", "spad_spde_pct": "14.3"},
    ]
    with pytest.raises(DomainError, match="Line 3"):
        coupling_table(rows)
    with pytest.raises(DomainError, match="missing column"):
        coupling_table([{"system_spde_pct": "10"}])


def test_bad_coupling_table_exits_with_validation_code(tmp_path):
    table = tmp_path / "table.csv"
    table.write_text("system_spde_pct,channel_loss_db,spad_spde_pct\n10,1,0\n", encoding="utf-8")
    assert main(["coupling", str(table)]) == 2


def test_missing_file_exits_with_io_code(tmp_path):
    assert main(["coupling", str(tmp_path / "absent.csv")]) == 3


def test_balance_reachable_and_unreachable(tmp_path, capsys):
    payload = {
        "curves": [
            {"bias_v": [0.0, 10.0, 20.0], "spde": [0.0, 0.1, 0.2]},
            {"bias_v": [0.0, 10.0, 20.0], "spde": [0.0, 0.1, 0.2]},
        ],
        "channel_losses_db": [0.0, 1.0],
        "target_system_spde": 0.1,
    }
    path = tmp_path / "curves.json"
    path.write_text(json.dumps(payload), encoding="utf-8")
    assert main(["balance", str(path)]) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["system_spde"] == pytest.approx([0.1, 0.1])

    payload["curves"][1]["spde"] = [0.0, 0.06, 0.12]
    payload["channel_losses_db"] = [0.0, 3.0]
    path.write_text(json.dumps(payload), encoding="utf-8")
    assert main(["balance", str(path)]) == 4


def test_sweep_grid_validation():
    with pytest.raises(DomainError):
        SweepSpec(())
    with pytest.raises(DomainError):
        SweepSpec((0.0, 5.0, 5.0))
    with pytest.raises(DomainError):
        SweepSpec((0.0,), mode="quantum")
    assert SweepSpec.from_range(0.0, 1.0, 0.25, "analytic").grid_db == (0.0, 0.25, 0.5, 0.75, 1.0)
    assert SweepSpec((0.0,), mode="both").modes == ["analytic", "montecarlo"]


def test_non_increasing_grid_exits_with_validation_code(tmp_path):
    out = tmp_path / "sweep.csv"
    assert main(["sweep", "--grid", "10,5", "--out", str(out)]) == 2
    assert not out.exists()


def test_sweep_writes_csv_and_sidecar(tmp_path):
    out = tmp_path / "sweep.csv"
    assert main(["sweep", "--grid", "0,10,19.2,26", "--out", str(out)]) == 0
    raw = out.read_bytes()
    assert raw.count(b"\r\n") == 5
    rows = read_csv_rows(str(out))
    assert list(rows[0]) == SWEEP_HEADER
    assert [float(r["attenuation_db"]) for r in rows] == [0.0, 10.0, 19.2, 26.0]
    assert float(rows[-1]["secure_rate_hz"]) == 0.0
    assert 7.5e3 <= float(rows[2]["secure_rate_hz"]) <= 3e4
    sidecar = json.loads((tmp_path / "sweep.json").read_text(encoding="utf-8"))
    assert sidecar["config"]["name"] == "cold"
    assert len(sidecar["points"]) == 4
    assert set(sidecar["environment"]) >= {"python", "numpy", "scipy", "joblib"}


def test_sweep_is_reproducible(tmp_path):
    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    args = ["sweep", "--preset", "room", "--start", "0", "--stop", "12", "--step", "3"]
    assert main(args + ["--out", str(first)]) == 0
    assert main(args + ["--out", str(second)]) == 0
    assert first.read_bytes() == second.read_bytes()


def test_point_prints_json(capsys):
    assert main(["point", "--attenuation-db", "19.2"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["mode"] == "analytic"
    assert payload["attenuation_db"] == pytest.approx(19.2)
    assert 7.5e3 <= payload["secure_rate_hz"] <= 3e4
    assert payload["report"]["bound"] == "hoeffding"


def test_point_with_fibre_override(tmp_path, capsys):
    out = tmp_path / "point.json"
    argv = ["point", "--fibre-km", "100", "--loss-override-db", "19.2", "--out", str(out)]
    assert main(argv) == 0
    printed = json.loads(capsys.readouterr().out)
    written = json.loads(out.read_text(encoding="utf-8"))
    assert printed == written
    assert printed["equivalent_km"] == pytest.approx(100.0)


def test_config_file_errors_exit_with_validation_code(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"protocol": {"mu_decoy": 0.5}}), encoding="utf-8")
    assert main(["point", "--config", str(path)]) == 2
    err = capsys.readouterr().err
    assert "protocol.mu_decoy" in err


def test_characterize_writes_reports(tmp_path):
    out = tmp_path / "char"
    argv = ["characterize", "--gates", "64000", "--no-specificity", "--out", str(out)]
    assert main(argv) == 0
    report = json.loads((out / "characterization.json").read_text(encoding="utf-8"))
    assert report["n_gates"] == 64000
    assert read_csv_rows(str(out / "crosstalk_sync.csv"))[0]["pixel"] == "0"
    assert not (out / "specificity_rates_hz.csv").exists()


def test_characterize_rejects_bad_gate_count(tmp_path):
    assert main(["characterize", "--gates", "0", "--out", str(tmp_path)]) == 2


@pytest.mark.parametrize(
    "argv, field",
    [
        (["point", "--attenuation-db", "-3"], "channel.attenuation_db"),
        (["point", "--attenuation-db", "3", "--loss-override-db", "2"], "channel.loss_override_db"),
        (["point", "--loss-override-db", "2"], "channel.loss_override_db"),
        (["point", "--fibre-km", "50", "--db-per-km", "-0.2"], "channel.db_per_km"),
    ],
)
def test_point_rejects_bad_channel(argv, field, capsys):
    assert main(argv) == 2
    assert field in capsys.readouterr().err


def test_sweep_rejects_negative_attenuation(tmp_path, capsys):
    out = tmp_path / "sweep.csv"
    assert main(["sweep", "--grid=-5,0,5", "--out", str(out)]) == 2
    assert "channel.attenuation_db" in capsys.readouterr().err
    assert not out.exists()
