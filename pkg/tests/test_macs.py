"""Analytical complexity estimator against the published operating points."""

import numpy as np
import pytest

from deformunet.macs import macs_estimate
from deformunet.model import preset_config

PUBLISHED = {
    "KKDDKK-O-1": 293.02e9,
    "KKDDKK-O-2": 57.91e9,
    "KKKKKK-O-1": 212.37e9,
}


def _giga(name, size=256):
    return macs_estimate(preset_config(name, size), name=name).total


def test_absolute_macs_within_ten_percent():
    for name, want in PUBLISHED.items():
        got = _giga(name)
        assert abs(got - want) / want <= 0.10, f"{name}: {got / 1e9:.2f}G vs {want / 1e9:.2f}G"


def test_offset_overhead_at_most_one_percent():
    with_off = _giga("KKDDKK-O-1")
    without = _giga("KKDDKK-NO-1")
    assert (with_off - without) / without <= 0.01


def test_dense_vs_sparse_growth_ratio():
    ratio = _giga("KKDDKK-O-1") / _giga("KKKKKK-O-1")
    assert abs(ratio - 1.3798) <= 0.03


def test_total_equals_sum_of_entries():
    rep = macs_estimate(preset_config("KKDDKK-O-2", 256), name="KKDDKK-O-2")
    assert rep.total == sum(e.macs for e in rep.entries)
    assert all(e.macs >= 0 for e in rep.entries)


def test_estimate_is_pure_function_of_config():
    a = macs_estimate(preset_config("KKDDKK-O-1", 256))
    b = macs_estimate(preset_config("KKDDKK-O-1", 256))
    assert a.total == b.total
    assert [e.macs for e in a.entries] == [e.macs for e in b.entries]


def test_offsets_disabled_drops_offset_entries():
    rep = macs_estimate(preset_config("KKDDKK-NO-1", 256))
    names = [e.name for e in rep.entries]
    assert not any("offset_net" in n or "sampling" in n for n in names)
    rep_o = macs_estimate(preset_config("KKDDKK-O-1", 256))
    assert any("offset_net" in e.name for e in rep_o.entries)


def test_extent_override_and_divisibility_error():
    rep = macs_estimate(preset_config("KKDDKK-O-1", 256), extent=64)
    assert rep.input_extent == (64, 64)
    with pytest.raises(ValueError):
        macs_estimate(preset_config("KKDDKK-O-1", 256), extent=48)


def test_patch_size_reduces_macs_strongly():
    assert _giga("KKDDKK-O-2") < _giga("KKDDKK-O-1") / 3
    assert _giga("KKDDKK-O-4") < _giga("KKDDKK-O-2")


def test_report_formats(tmp_path):
    rep = macs_estimate(preset_config("KKDDKK-O-1", 256), name="KKDDKK-O-1")
    table = rep.as_table()
    assert "total" in table
    kv = rep.as_kv_text()
    assert f"total = {rep.total}" in kv
    path = tmp_path / "macs.txt"
    rep.save(path)
    text = path.read_text()
    assert text == kv
    blocks = rep.block_totals()
    assert sum(m for _, m in blocks) == rep.total
