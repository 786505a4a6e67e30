"""Field snapshots and canonical JSON."""
import json

import numpy as np
import pytest

from snse.io import dumps, field_from_dict, field_to_dict, load_field, read_jsonl, save_field, write_jsonl
from snse.spectral import SpectralField, lattice, random_solenoidal


@pytest.mark.parametrize("suffix", [".json", ".npz"])
def test_field_round_trip_is_exact(tmp_path, suffix):
    f = random_solenoidal(lattice(8), np.random.default_rng(0))
    path = tmp_path / f"u0{suffix}"
    save_field(path, f, 0.25)
    g, delta = load_field(path)
    assert delta == 0.25 and g.solenoidal
    assert np.array_equal(g.coeffs, f.coeffs)


def test_snapshot_lists_nonzero_modes():
    f = SpectralField.single_mode(lattice(8), (1, -2, 0), 2, 0.5 + 0.25j)
    d = field_to_dict(f)
    assert d["schema"] == "snse.field/1" and d["delta"] is None
    rows = {tuple(r[:3]): r[3:] for r in d["modes"]}
    assert set(rows) == {(1, -2, 0), (-1, 2, 0)}
    assert rows[(1, -2, 0)] == [0, 0, 0, 0, 0.5, 0.25]
    g, _ = field_from_dict(json.loads(json.dumps(d)))
    assert np.array_equal(g.coeffs, f.coeffs)


def test_rejects_unknown_schema():
    with pytest.raises(ValueError, match="schema"):
        field_from_dict({"schema": "other/9", "N": 8, "modes": []})


def test_batched_field_rejected():
    with pytest.raises(ValueError):
        field_to_dict(SpectralField.zeros(lattice(8), (2,)))


def test_dumps_is_canonical():
    assert dumps({"b": 1, "a": [1.5, None]}) == '{"a":[1.5,null],"b":1}'
    with pytest.raises(ValueError):
        dumps({"x": float("nan")})


def test_jsonl(tmp_path):
    rows = [{"i": i, "x": i / 3} for i in range(4)]
    write_jsonl(tmp_path / "r.jsonl", rows)
    assert read_jsonl(tmp_path / "r.jsonl") == rows
