"""Smoke test for the hflow_py extension.

Build first with `cargo build --release -p hflow-py`, or install with
`pip install --no-build-isolation ./crates/py` (needs maturin). The script
falls back to loading target/release/libhflow_py.so directly.
"""

import importlib.machinery
import importlib.util
import math
import struct
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load():
    try:
        import hflow_py

        return hflow_py
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libhflow_py.so"
        if lib.exists():
            loader = importlib.machinery.ExtensionFileLoader("hflow_py", str(lib))
            spec = importlib.util.spec_from_loader("hflow_py", loader)
            mod = importlib.util.module_from_spec(spec)
            loader.exec_module(mod)
            return mod
    sys.exit("hflow_py not built; run cargo build --release -p hflow-py")


def main():
    hf = load()

    u = hf.hit_times(50, 0)
    assert len(u) == 50 and abs(u[0] - 0.9) < 1e-12 and u[-1] == 0.0
    assert all(a >= b for a, b in zip(u, u[1:]))
    tau = hf.local_timesteps(1.0, 50, 5)
    assert tau[5:] == [1.0] * 45
    assert hf.steps_to_finalize(50, 0, 1) == 1

    assert abs(hf.dominance_probability(0, 2, 1, 3) - 0.875) < 1e-12

    t = hf.Timing.preset("pi05-rtx4090")
    assert t.delay_and_smin("sync")[1] == 3
    assert t.delay_and_smin("faster")[1] == 3
    lo, hi = t.reaction("faster")
    assert lo < hi
    modes, dom = t.compare()
    assert modes.startswith("mode,") and "faster" in modes
    assert dom.count("\n") >= 3

    table2, table3 = hf.reproduce_tables()
    assert "xvla-rtx4060" in table2 and "p_faster" in table3

    frame = hf.encode_action_packet(7, 3, [0.5, -1.0], 2, 123456)
    assert len(frame) == 28
    assert struct.unpack_from("<IB", frame) == (24, 3)
    assert hf.decode_action_packet(frame) == (7, 3, [0.5, -1.0], 2, 123456)
    try:
        hf.decode_action_packet(frame[:-1])
    except ValueError:
        pass
    else:
        raise AssertionError("truncated frame accepted")

    cli = ROOT / "target" / "release" / "hflow"
    if cli.exists():
        with tempfile.TemporaryDirectory() as tmp:
            cfg = Path(tmp) / "cfg.json"
            cfg.write_text('{"train": {"epochs": 1}, "env": {"episodes": 20}}')
            run = [str(cli), "--config", str(cfg), "--out", tmp, "--run", "py"]
            subprocess.run(run + ["gen-data"], check=True)
            subprocess.run(run + ["train", "--data", str(Path(tmp) / "py" / "demos.jsonl")], check=True)
            policy = hf.FlowPolicy.load(str(Path(tmp) / "py" / "checkpoint.bin"))
            rows, used = policy.sample([0.0, 0.0, 0.5, 0.5], s=4)
            assert len(rows) == policy.horizon and used <= 10
            assert all(math.isfinite(x) for r in rows for x in r)
            full, used_c = policy.sample([0.0, 0.0, 0.5, 0.5], constant=True)
            assert used_c == 10
        print("flow policy ok")

    print("hflow_py smoke test passed")


if __name__ == "__main__":
    main()
