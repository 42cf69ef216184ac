import json

import pytest

from stsc.plots import PlotDataError, figure_spec, plot_data, write_plot_data
from stsc.storage import MetricsRow, write_metrics


def eval_rows(series, base, channel="awgn"):
    return [MetricsRow.from_mse("e", channel, snr, 0, 10 ** (-(base + snr) / 10), None, kind="eval",
                                series=series, config_hash="abc")
            for snr in (0.0, 6.0, 12.0)]


def round_rows(series, channel="rician"):
    return [MetricsRow.from_mse("e", channel, 12.0, t, 0.1 / t, None, kind="round", series=series,
                                psnr_eval=20.0 + t, config_hash="h" + series)
            for t in (1, 2, 3)]


def test_fig7_has_four_series(tmp_path):
    rows = eval_rows("global", 25) + [r for k in range(3) for r in eval_rows(f"client{k}", 22 + k)]
    write_metrics(tmp_path / "m.tsv", rows)
    path = write_plot_data([tmp_path / "m.tsv"], "fig7-awgn", tmp_path / "p.json")
    doc = json.loads(path.read_text())
    assert [s["key"] for s in doc["series"]] == ["global", "client0", "client1", "client2"]
    g = doc["series"][0]
    assert g["x"] == [0.0, 6.0, 12.0]
    assert g["y"] == pytest.approx([25.0, 31.0, 37.0])
    assert doc["config_hashes"] == ["abc"]


def test_fig6_and_fig9():
    doc = plot_data(round_rows("global"), "fig6-stsc-rician")
    assert doc["series"][0]["x"] == [1.0, 2.0, 3.0]
    assert doc["series"][0]["y"] == pytest.approx([0.1, 0.05, 0.1 / 3])
    doc = plot_data(round_rows("full") + round_rows("partial"), "fig9")
    assert [s["label"] for s in doc["series"]] == ["K=3/3", "K=2/3"]
    assert doc["series"][1]["y"] == [21.0, 22.0, 23.0]


def test_later_rows_replace_earlier():
    rows = eval_rows("global", 20) + eval_rows("global", 30)
    assert plot_data(rows, "fig4-awgn")["series"][0]["y"][0] == pytest.approx(30.0)


def test_missing_series_and_channel_filter(tmp_path):
    write_metrics(tmp_path / "empty.tsv", [])
    with pytest.raises(PlotDataError, match="missing series"):
        write_plot_data([tmp_path / "empty.tsv"], "fig4-awgn", tmp_path / "p.json")
    with pytest.raises(PlotDataError, match="client0"):
        plot_data(eval_rows("global", 25), "fig7-awgn")
    with pytest.raises(PlotDataError):
        plot_data(eval_rows("global", 25, channel="rayleigh"), "fig4-awgn")


def test_unknown_figure():
    with pytest.raises(PlotDataError):
        figure_spec("fig5")
