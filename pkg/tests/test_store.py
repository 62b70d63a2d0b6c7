"""Tests for the report store."""

from concurrent.futures import ThreadPoolExecutor

from src.pwa.either import Left, Right
from src.pwa.errors import NumericalError
from src.pwa.store import ReportStore


class TestReportStore:
    """Test the ReportStore class."""

    def test_add_and_get(self):
        """Test that a stored report can be retrieved."""
        store = ReportStore()
        store.add(3, Right("report"))
        result = store.get(3)
        assert isinstance(result, Right)
        assert result.value == "report"

    def test_get_missing(self):
        """Test that a missing seed is a Left with a message."""
        result = ReportStore().get(7)
        assert isinstance(result, Left)
        assert "7" in result.error

    def test_get_failed(self):
        """Test that a failed seed is reported as a Left."""
        store = ReportStore()
        store.add(1, Left(NumericalError("nan in regret")))
        result = store.get(1)
        assert isinstance(result, Left)
        assert "nan in regret" in result.error
        assert len(store.errors()) == 1

    def test_ordered_by_seed(self):
        """Test that outcomes come back in seed order whatever the insert order."""
        store = ReportStore()
        with ThreadPoolExecutor(max_workers=4) as pool:
            list(pool.map(lambda s: store.add(s, Right(s * 10)), [5, 2, 9, 0, 7]))
        seeds = [seed for seed, _ in store.ordered()]
        assert seeds == [0, 2, 5, 7, 9]

    def test_stores_are_independent(self):
        """Test that two stores do not share outcomes."""
        first, second = ReportStore(), ReportStore()
        first.add(0, Right("a"))
        assert isinstance(second.get(0), Left)

    def test_clear(self):
        """Test that clear empties the store."""
        store = ReportStore()
        store.add(0, Right("a"))
        assert store.clear().ordered() == []
