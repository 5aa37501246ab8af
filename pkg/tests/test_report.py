"""Rendering: tables, CSV, and figure files."""

import csv

from snifr import report as rp


def fake_report(value, drop_class=None):
    per_class = {}
    for name in ("SAFE", "SEXUAL", "VIOLENT", "BOTH"):
        per_class[name] = (None if name == drop_class
                           else {"acc": value, "f1": value / 2, "auc": value / 4})
    defined = [m for m in per_class.values() if m is not None]
    totals = {k: sum(m[k] for m in defined) / len(defined) for k in ("acc", "f1", "auc")}
    return {"per_class": per_class, "totals": totals}


def test_table_renders_percentages_and_alignment():
    table = rp.render_table([("SNIFR", fake_report(0.816049))])
    lines = table.splitlines()
    assert len({len(line) for line in lines[:2] + lines[3:]}) == 1
    assert "81.60" in lines[3]
    assert "SNIFR" in lines[3]


def test_undefined_class_renders_as_dashes():
    table = rp.render_table([("V", fake_report(0.5, drop_class="BOTH"))])
    assert "--" in table.splitlines()[3]


def test_csv_layout(tmp_path):
    path = tmp_path / "out.csv"
    rp.write_csv([("A", fake_report(0.4)), ("EC", fake_report(0.8, drop_class="SAFE"))],
                 str(path))
    with open(path) as f:
        rows = list(csv.DictReader(f))
    assert [r["model"] for r in rows] == ["A", "EC"]
    assert float(rows[0]["safe_acc"]) == 40.0
    assert rows[1]["safe_acc"] == ""  # undefined class stays blank
    assert float(rows[1]["total_f1"]) == 40.0


def test_figures_written(tmp_path):
    rows = [("A", fake_report(0.4)), ("SNIFR", fake_report(0.9))]
    bar = tmp_path / "bar.png"
    conf = tmp_path / "conf.png"
    curves = tmp_path / "curves.png"
    rp.totals_bar_figure(rows, str(bar))
    rp.confusion_figure([[5, 1, 0, 0], [0, 4, 0, 1], [2, 0, 3, 0], [0, 0, 0, 6]],
                        str(conf))
    rp.curves_figure([(0, [1.0, 0.6, 0.4], [0.3, 0.5, 0.6]),
                      (1, [1.1, 0.7], [0.2, 0.4])], str(curves))
    for path in (bar, conf, curves):
        assert path.stat().st_size > 1000
        assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
