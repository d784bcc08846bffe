from datetime import datetime, timedelta

import pytest

from trace_har.utils import TimeUtils


class TestParseTimestamp:
    def test_separators_are_equivalent(self):
        expected = datetime(2024, 1, 1, 7, 5, 0)
        assert TimeUtils.parse_timestamp("2024-01-01T07:05:00") == expected
        assert TimeUtils.parse_timestamp("2024-01-01 07:05:00") == expected

    def test_casas_microseconds(self):
        assert TimeUtils.parse_date_time("2010-11-04", "05:40:51.303739") == datetime(2010, 11, 4, 5, 40, 51, 303739)

    def test_nanoseconds_round_to_nearest_microsecond(self):
        assert TimeUtils.parse_timestamp("2024-01-01 07:05:00.123456789").microsecond == 123457
        assert TimeUtils.parse_timestamp("2024-01-01 07:05:00.1234564").microsecond == 123456

    @pytest.mark.parametrize("text", ["2024-13-01 07:05:00", "not a time", "", "2024-01-01T07:05:00+02:00"])
    def test_rejects(self, text):
        with pytest.raises(ValueError):
            TimeUtils.parse_timestamp(text)


def test_floor_and_ceil_to_unit():
    unit = timedelta(minutes=10)
    stamp = datetime(2024, 1, 1, 7, 14, 30)
    assert TimeUtils.floor_to_unit(stamp, unit) == datetime(2024, 1, 1, 7, 10)
    assert TimeUtils.ceil_to_unit(stamp, unit) == datetime(2024, 1, 1, 7, 20)
    assert TimeUtils.ceil_to_unit(datetime(2024, 1, 1, 7, 20), unit) == datetime(2024, 1, 1, 7, 20)


def test_union_length_merges_overlaps():
    base = datetime(2024, 1, 1, 7)
    spans = [(base, base + timedelta(minutes=5)), (base + timedelta(minutes=3), base + timedelta(minutes=8)),
             (base + timedelta(minutes=10), base + timedelta(minutes=11))]
    assert TimeUtils.union_length(spans) == timedelta(minutes=9)
