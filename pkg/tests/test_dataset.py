import json

import numpy as np
import pytest

from popdens import Dataset


def test_roundtrip_is_exact(tmp_path, rng):
    ds = Dataset(rng.standard_normal(200), rng.standard_normal(201), 0.1, {"seed": 4})
    csv_path, side = ds.write(tmp_path / "d.csv")
    back = Dataset.read(csv_path)
    np.testing.assert_array_equal(back.inputs, ds.inputs)
    np.testing.assert_array_equal(back.outputs, ds.outputs)
    assert back.tau == 0.1 and back.meta == {"seed": 4}
    assert json.loads(side.read_text())["n_steps"] == 200
    assert csv_path.read_text().splitlines()[-1].split(",")[1] == ""


def test_bad_columns(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        Dataset.read(p)
