"""Tests fuer Umgebungsvariablen, .env-Dateien, Zeitmessung und Zufallsstroeme."""

from __future__ import annotations

import os

import numpy as np

from decomposer.models import Timer
from decomposer.utils import (
    apply_env_file,
    autoload_env,
    read_env_file,
    resolve_env_int,
    resolve_seed,
    resolve_threads,
    spawn_rng,
)


class TestResolveEnvInt:
    def test_unset_gives_default(self, monkeypatch):
        monkeypatch.delenv("VARDECOMP_TEST_INT", raising=False)
        assert resolve_env_int("VARDECOMP_TEST_INT", 4) == 4

    def test_invalid_value_warns(self, monkeypatch, caplog):
        monkeypatch.setenv("VARDECOMP_TEST_INT", "abc")
        with caplog.at_level("WARNING"):
            assert resolve_env_int("VARDECOMP_TEST_INT", 4) == 4
        assert caplog.messages == ["Ungueltiger VARDECOMP_TEST_INT Wert 'abc', nutze 4"]
        assert caplog.records[0].args == ()

    def test_below_minimum_warns(self, monkeypatch, caplog):
        monkeypatch.setenv("VARDECOMP_THREADS", "0")
        with caplog.at_level("WARNING"):
            assert resolve_threads(default=3) == 3
        assert caplog.messages == ["VARDECOMP_THREADS=0 unter Minimum 1, nutze 3"]

    def test_seed_from_environment(self, monkeypatch):
        monkeypatch.setenv("VARDECOMP_SEED", " 17 ")
        assert resolve_seed() == 17


class TestEnvFile:
    def test_only_prefixed_keys(self, tmp_path, caplog):
        path = tmp_path / ".env"
        path.write_text(
            "# Kommentar\n"
            "export VARDECOMP_SEED=5\n"
            "VARDECOMP_THREADS='2'\n"
            "VARDECOMP_LABEL=a b # Notiz\n"
            "HOME=/tmp\n"
            "kaputt\n",
            encoding="utf-8",
        )
        with caplog.at_level("WARNING"):
            values = read_env_file(path)
        assert values == {"VARDECOMP_SEED": "5", "VARDECOMP_THREADS": "2", "VARDECOMP_LABEL": "a b"}
        assert caplog.messages == [f"{path}:6: keine KEY=VALUE-Zeile, ignoriert"]

    def test_existing_values_win(self, tmp_path, monkeypatch):
        monkeypatch.setenv("VARDECOMP_SEED", "1")
        monkeypatch.setenv("VARDECOMP_THREADS", "")
        monkeypatch.delenv("VARDECOMP_THREADS")
        path = tmp_path / ".env"
        path.write_text("VARDECOMP_SEED=9\nVARDECOMP_THREADS=3\n", encoding="utf-8")
        assert apply_env_file(path) == ["VARDECOMP_THREADS"]
        assert os.environ["VARDECOMP_SEED"] == "1"
        assert os.environ["VARDECOMP_THREADS"] == "3"

    def test_first_directory_with_env_wins(self, tmp_path, monkeypatch):
        monkeypatch.setenv("VARDECOMP_SEED", "")
        monkeypatch.delenv("VARDECOMP_SEED")
        first, second = tmp_path / "a", tmp_path / "b"
        first.mkdir()
        second.mkdir()
        (second / ".env").write_text("VARDECOMP_SEED=8\n", encoding="utf-8")
        assert autoload_env([first, second, second]) == (second / ".env").resolve()
        assert os.environ["VARDECOMP_SEED"] == "8"
        assert autoload_env([first]) is None


class TestTimer:
    def test_elapsed_while_running_and_after(self):
        timer = Timer()
        assert timer.elapsed == 0.0
        with timer:
            running = timer.elapsed
            assert running >= 0.0
        done = timer.elapsed
        assert done >= running
        assert timer.elapsed == done

    def test_label_is_logged(self, caplog):
        with caplog.at_level("DEBUG", logger="decomposer.models"):
            with Timer("Fit"):
                pass
        assert caplog.messages[-1].startswith("Fit: ")


class TestSpawnRng:
    def test_streams_are_independent_and_reproducible(self):
        a = spawn_rng(1, 3, 0).random(4)
        np.testing.assert_array_equal(a, spawn_rng(1, 3, 0).random(4))
        assert not np.array_equal(a, spawn_rng(1, 3, 1).random(4))
