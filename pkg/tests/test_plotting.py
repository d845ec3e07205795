import xml.etree.ElementTree as ET

import pytest

from diffbench.errors import UsageError
from diffbench.harness import TimingRecord
from diffbench.plotting import axis_limits, emit_plot, series_of

SVG = "{http://www.w3.org/2000/svg}"


def _records(statuses=("ok", "ok", "ok")):
    out = []
    for engine, scale in (("manual", 2.0), ("fd", 50.0)):
        for n, status in zip((30, 330, 3300), statuses if engine == "fd" else ("ok",) * 3):
            out.append(TimingRecord("gmm", engine, f"p{n}", n, 0.01, 0.01 * scale * (n / 30) ** 0.5, 10, status=status))
    return out


def _groups(path):
    root = ET.parse(path).getroot()
    return {g.get("id"): g for g in root.iter(f"{SVG}g") if g.get("id")}


def test_series_and_markers(tmp_path):
    out = emit_plot(_records(), tmp_path / "f.svg")
    groups = _groups(out)
    series = [k for k in groups if k.startswith("series-")]
    assert sorted(series) == ["series-fd", "series-manual"]
    markers = sum(len(list(groups[k].iter(f"{SVG}use"))) for k in series)
    assert markers == 6
    assert not any(k.startswith("end-") for k in groups)


def test_axis_bounds():
    s = series_of(_records())
    assert s["manual"]["x"] == [30, 330, 3300]
    (x0, x1), (y0, y1) = axis_limits(s)
    assert (x0, x1) == pytest.approx((3.0, 33000.0))
    assert y0 == pytest.approx(0.2)
    assert y1 == pytest.approx(10 * max(s["fd"]["y"]))


def test_absolute_uses_derivative_time():
    s = series_of(_records(), relative=False)
    assert s["manual"]["y"][0] == pytest.approx(0.02)


def test_timeout_truncates_series(tmp_path):
    recs = _records(("ok", "timeout", "ok"))
    s = series_of(recs)
    assert s["fd"]["x"] == [30] and s["fd"]["ended"]
    assert s["manual"]["x"] == [30, 330, 3300] and not s["manual"]["ended"]
    groups = _groups(emit_plot(recs, tmp_path / "t.svg"))
    assert len(list(groups["series-fd"].iter(f"{SVG}use"))) == 1
    assert "end-fd" in groups


def test_failed_points_are_skipped():
    s = series_of(_records(("ok", "failed", "ok")))
    assert s["fd"]["x"] == [30, 3300] and not s["fd"]["ended"]


def test_mixed_objectives_prefix_keys():
    recs = _records() + [TimingRecord("ba", "manual", "c2", 6, 1.0, 3.0, 1)]
    assert set(series_of(recs)) == {"gmm/manual", "gmm/fd", "ba/manual"}


def test_empty_input(tmp_path):
    with pytest.raises(UsageError):
        emit_plot([], tmp_path / "e.svg")
    with pytest.raises(UsageError):
        emit_plot([TimingRecord("gmm", "fd", "p30", 30, status="timeout")], tmp_path / "e.svg")
