#!/usr/bin/env python3
"""
測試自我檢查腳本
"""

import pytest

import selfcheck


class TestChecks:

    @pytest.mark.parametrize("name,check", [
        (name, fn) for name, fn in selfcheck.CHECKS
        if fn not in (selfcheck.check_safe_wrapper, selfcheck.check_heaven_hell)
    ])
    def test_fast_checks_pass(self, name, check):
        assert check() is True, name

    @pytest.mark.slow
    def test_safe_wrapper_check(self):
        assert selfcheck.check_safe_wrapper() is True

    @pytest.mark.slow
    def test_heaven_hell_check(self):
        assert selfcheck.check_heaven_hell() is True

    def test_failure_is_reported_not_raised(self, monkeypatch, capsys):
        def broken(*args, **kwargs):
            raise RuntimeError("boom")

        monkeypatch.setattr(selfcheck, "collect_trials", broken)
        assert selfcheck.check_query_identity() is False
        assert "boom" in capsys.readouterr().err


class TestMain:

    def test_exit_code_reflects_failures(self, monkeypatch, capsys):
        monkeypatch.setattr(selfcheck, "CHECKS", [("ok", lambda: True), ("skip", lambda: None)])
        with pytest.raises(SystemExit) as excinfo:
            selfcheck.main()
        assert excinfo.value.code == 0
        out = capsys.readouterr().out
        assert "✓ ok: OK" in out and "- skip: SKIPPED" in out

        monkeypatch.setattr(selfcheck, "CHECKS", [("ok", lambda: True), ("bad", lambda: False)])
        with pytest.raises(SystemExit) as excinfo:
            selfcheck.main()
        assert excinfo.value.code == 1
        assert "✗ bad: FAILED" in capsys.readouterr().out
