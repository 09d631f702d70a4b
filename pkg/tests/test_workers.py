import os

import numpy as np
import pandas as pd
import pytest

import config
from modules.artifacts import atomic_write_bytes, write_csv, write_json
from modules.workers import chunk_bounds, map_ordered, pairwise_sum


def test_map_ordered_keeps_input_order():
    def square(x):
        return x * x

    assert map_ordered(square, range(20), workers=4) == [x * x for x in range(20)]
    assert map_ordered(square, [], workers=4) == []
    assert map_ordered(square, [3], workers=4) == [9]


def test_map_ordered_propagates_errors():
    def boom(x):
        if x == 3:
            raise ValueError("bad item")
        return x

    with pytest.raises(ValueError, match="bad item"):
        map_ordered(boom, range(6), workers=3)


def test_pairwise_sum_uses_a_fixed_tree():
    parts = [np.array([1e16]), np.array([1.0]), np.array([-1e16]), np.array([1.0])]
    # ((1e16 + 1) + (-1e16 + 1)) loses both ones; a left fold would keep one
    assert pairwise_sum(parts)[0] == 0.0
    assert pairwise_sum([np.ones(3)] * 5).tolist() == [5.0, 5.0, 5.0]
    with pytest.raises(ValueError):
        pairwise_sum([])


def test_chunk_bounds_cover_the_range():
    assert chunk_bounds(10, 4) == [(0, 4), (4, 8), (8, 10)]
    assert chunk_bounds(0, 4) == []


def test_atomic_write_leaves_no_temporaries(tmp_path):
    target = tmp_path / "nested" / "out.bin"
    atomic_write_bytes(target, b"first")
    atomic_write_bytes(target, b"second")
    assert target.read_bytes() == b"second"
    assert os.listdir(target.parent) == ["out.bin"]


def test_csv_and_json_formatting(tmp_path):
    write_csv(tmp_path / "a.csv", pd.DataFrame({"step": [0, 1], "value": [1 / 3, 2.0]}))
    assert (tmp_path / "a.csv").read_text() == "step,value\n0,0.333333333\n1,2\n"
    write_json(tmp_path / "a.json", {"status": "diffusive", "peak_step": None})
    assert (tmp_path / "a.json").read_text().endswith("}\n")


def test_integer_environment_settings(monkeypatch):
    monkeypatch.delenv("WEIGHTDYN_TEST_INT", raising=False)
    assert config._int_env("WEIGHTDYN_TEST_INT", 7, 1) == 7
    monkeypatch.setenv("WEIGHTDYN_TEST_INT", "3")
    assert config._int_env("WEIGHTDYN_TEST_INT", 7, 1) == 3
    monkeypatch.setenv("WEIGHTDYN_TEST_INT", "zero")
    with pytest.raises(ValueError, match="must be an integer"):
        config._int_env("WEIGHTDYN_TEST_INT", 7, 1)
    monkeypatch.setenv("WEIGHTDYN_TEST_INT", "0")
    with pytest.raises(ValueError, match=">= 1"):
        config._int_env("WEIGHTDYN_TEST_INT", 7, 1)
