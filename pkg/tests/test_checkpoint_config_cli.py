"""Checkpoint container, run configuration and the command line."""

import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bdcocc import checkpoint
from bdcocc.cli import (
    BENCH_COLUMNS,
    COST_COLUMNS,
    THEOREM_COLUMNS,
    main,
    module_of,
    parse_layer,
    read_csv,
    read_train_report,
    write_csv,
)
from bdcocc.config import parse_config
from bdcocc.errors import CheckpointError, ConfigError
from bdcocc.occtoy import NetSpec, build_network
from bdcocc.tensor import bit_pack

SMALL_RUN = """
[run]
seed = 1
[data]
n_train = 4
n_test = 2
[model]
variant = V3
n_mulbiconv = 1
[train]
lr = 3e-3
steps = 3
batch_size = 2
[output]
dir = {dir}
"""


def write_config(tmp_path, text=SMALL_RUN):
    path = tmp_path / "run.ini"
    path.write_text(text.format(dir=tmp_path / "out"))
    return path


# ---------------------------------------------------------------------------
# checkpoint


def test_checkpoint_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    records = {
        "f32": rng.standard_normal((3, 4)).astype(np.float32),
        "f64": rng.standard_normal(5),
        "i32": np.arange(6, dtype=np.int32).reshape(2, 3),
        "scalar": np.array(2.5),
        "bits": bit_pack(np.where(rng.random((2, 70, 3, 3)) < 0.5, -1.0, 1.0)),
        "名前": np.zeros(0, dtype=np.float32),
    }
    checkpoint.save(tmp_path / "a.bdc", records)
    back = checkpoint.load(tmp_path / "a.bdc")
    assert list(back) == list(records)
    for k, v in records.items():
        if isinstance(v, np.ndarray):
            assert back[k].dtype == v.dtype
            np.testing.assert_array_equal(back[k], v)
        else:
            assert back[k] == v


@settings(max_examples=50, deadline=None)
@given(data=st.binary(min_size=1, max_size=64), pos=st.integers(0, 10_000))
def test_checkpoint_any_corruption_rejected(data, pos):
    blob = bytearray(checkpoint.encode({"w": np.frombuffer(data.ljust(8, b"\0")[:8], np.float64)}))
    i = pos % len(blob)
    blob[i] ^= 0xFF
    with pytest.raises(CheckpointError):
        checkpoint.decode(bytes(blob))


def test_checkpoint_layout_and_errors():
    blob = checkpoint.encode({"x": np.array([1.0], dtype=np.float32)})
    assert blob[:4] == b"BDC1"
    assert int.from_bytes(blob[-4:], "little") == zlib.crc32(blob[:-4])
    with pytest.raises(CheckpointError):
        checkpoint.decode(blob[:-1])
    with pytest.raises(CheckpointError):
        checkpoint.decode(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError):
        checkpoint.encode({"x": np.zeros(2, dtype=np.int8)})


def test_network_state_roundtrip(tmp_path):
    net = build_network(NetSpec(), seed=0)
    checkpoint.save(tmp_path / "m.bdc", checkpoint.state_records(net.params))
    other = build_network(NetSpec(), seed=5)
    checkpoint.load_into(other.params, checkpoint.load(tmp_path / "m.bdc"))
    for k, v in net.parameters().items():
        np.testing.assert_array_equal(other.parameters()[k], v)
    x = np.random.default_rng(0).random((1, 2, 1, 32, 32)).astype(np.float32)
    np.testing.assert_array_equal(net(x), other(x))
    wrong = build_network(NetSpec(bev_blocks=1))
    with pytest.raises(CheckpointError):
        checkpoint.load_into(wrong.params, checkpoint.load(tmp_path / "m.bdc"))


def test_stored_signs_must_agree():
    net = build_network(NetSpec())
    rec = checkpoint.state_records(net.params)
    name = next(k for k in rec if k.endswith("latent_weights"))
    rec[name] = -rec[name]
    with pytest.raises(CheckpointError):
        checkpoint.load_into(build_network(NetSpec()).params, rec)


# ---------------------------------------------------------------------------
# config


def test_config_values_and_defaults():
    cfg = parse_config("[model]\nkernels = 3->3->1\nvariant = V2  # inline\n; comment\n[train]\nlr = 0.5\n")
    assert cfg.net_spec().unit.kernels == (3, 3, 1)
    assert cfg.train_config().lr == 0.5
    assert cfg.train_config().steps == 200
    assert parse_config("").net_spec() == NetSpec()
    assert cfg.hash == parse_config("[train]\nlr = 0.5\n[model]\nvariant = V2\nkernels = 3,3,1\n").hash
    assert cfg.hash != parse_config("").hash


@pytest.mark.parametrize("text", [
    "[nope]\nx = 1\n",
    "[train]\nlearning_rate = 1\n",
    "[train]\nsteps = many\n",
    "[model]\nvariant = V9\n",
    "[model]\nscope = huge\n",
    "no header\n",
])
def test_config_errors(text, tmp_path):
    with pytest.raises(ConfigError):
        parse_config(text)
    path = tmp_path / "bad.ini"
    path.write_text(text)
    assert main(["train", "--config", str(path)]) == 2


def test_missing_config_and_bad_command(tmp_path):
    assert main(["train", "--config", str(tmp_path / "none.ini")]) == 2
    assert main(["frobnicate"]) == 2


# ---------------------------------------------------------------------------
# CLI


def test_csv_roundtrip(tmp_path):
    rows = [{"a": 0.1 + 0.2, "b": 1}, {"a": 1e-300, "b": "x,y"}]
    write_csv(tmp_path / "t.csv", ["a", "b"], rows)
    back = read_csv(tmp_path / "t.csv")
    assert float(back[0]["a"]) == 0.1 + 0.2
    assert float(back[1]["a"]) == 1e-300 and back[1]["b"] == "x,y"
    assert (tmp_path / "t.csv").read_bytes().count(b"\r") == 0


def test_train_then_evaluate(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["train", "--config", str(cfg)]) == 0
    rep = read_train_report(tmp_path / "out" / "train_report.csv")
    assert len(rep.losses) == 3
    assert rep.config_hash == parse_config(cfg.read_text()).hash
    capsys.readouterr()
    assert main(["evaluate", "--config", str(cfg)]) == 0
    assert f"mIoU {rep.miou!r}" in capsys.readouterr().out
    # corrupt one payload byte
    ckpt = tmp_path / "out" / "model.bdc"
    blob = bytearray(ckpt.read_bytes())
    blob[len(blob) // 2] ^= 1
    ckpt.write_bytes(bytes(blob))
    assert main(["evaluate", "--config", str(cfg)]) == 1


def test_verify_theorem_reproducible(tmp_path):
    args = ["verify-theorem", "--samples", "20000", "--trials", "20", "--seed", "3"]
    assert main(args + ["--out", str(tmp_path / "a.csv")]) in (0, 1)
    main(args + ["--out", str(tmp_path / "b.csv")])
    a = (tmp_path / "a.csv").read_bytes()
    assert a == (tmp_path / "b.csv").read_bytes()
    rows = read_csv(tmp_path / "a.csv")
    assert list(rows[0]) == THEOREM_COLUMNS
    assert [r["check"] for r in rows] == ["analytic_constant", "monte_carlo", "gradient_error",
                                          "gradient_error", "kernel_ratio"]
    assert rows[0]["pass"] == "True"


def test_bench_kernel(tmp_path):
    rows = []
    for reps in (1, 20):
        out = tmp_path / f"b{reps}.csv"
        assert main(["bench-kernel", "--c-in", "70", "--size", "6", "--repetitions", str(reps),
                     "--out", str(out)]) == 0
        rows += read_csv(out)
    assert list(rows[0]) == BENCH_COLUMNS
    assert rows[0]["geometry"] == rows[1]["geometry"]
    assert rows[0]["deviation"] == rows[1]["deviation"] == "0.0"


def test_cost_command(tmp_path):
    out = tmp_path / "c.csv"
    assert main(["cost", "--layer", "16,16,3,1,8,8,b", "--layer", "4,8,1,2,8,8", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert list(rows[0]) == COST_COLUMNS
    total = rows[-1]
    assert total["level"] == "total"
    assert float(total["ops_b"]) == 2 * 9 * 16 * 16 * 64 / 64
    assert float(total["params_b"]) == 9 * 16 * 16 / 32
    assert float(total["ops_f"]) == 2 * 4 * 8 * 16 and float(total["params_f"]) == 32
    assert main(["cost", "--empty", "--out", str(out)]) == 0
    assert all(float(read_csv(out)[-1][c]) == 0 for c in COST_COLUMNS[2:])
    assert main(["cost", "--layer", "1,2,3", "--out", str(out)]) == 2


def test_cost_module_names():
    assert module_of("bev.0.rest.0.conv") == "bev.0"
    assert module_of("stem_bn") == "stem"
    assert module_of("adapter") == "adapter"
    assert parse_layer("3,4,3,2,8,8,b").binarized


def test_ablate_threads_do_not_change_results(tmp_path, monkeypatch):
    outs = []
    for n in ("1", "2"):
        monkeypatch.setenv("BDC_THREADS", n)
        out = tmp_path / f"abl{n}.csv"
        assert main(["ablate", "--tables", "kernel", "--steps", "1", "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    assert main(["ablate", "--tables", "nope", "--out", str(tmp_path / "x.csv")]) == 2
