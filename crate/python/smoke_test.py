#!/usr/bin/env python3
"""Smoke test for the spikessm Python extension.

Builds are picked up from the cargo target directory; run

    cargo build -p spikessm-python --release

first (or a debug build), then `python3 python/smoke_test.py`.
"""

import json
import math
import os
import shutil
import sys
import tempfile


def locate_extension():
    root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    candidates = [
        os.path.join(root, "target", profile, name)
        for profile in ("release", "debug")
        for name in ("libspikessm.so", "libspikessm.dylib", "spikessm.dll")
    ]
    for path in candidates:
        if os.path.isfile(path):
            return path
    sys.exit(
        "spikessm extension not found; build it with "
        "`cargo build -p spikessm-python` first"
    )


def import_module():
    src = locate_extension()
    stage = tempfile.mkdtemp(prefix="spikessm_py_")
    ext = ".so" if not src.endswith(".dll") else ".pyd"
    dst = os.path.join(stage, "spikessm" + ext)
    shutil.copyfile(src, dst)
    sys.path.insert(0, stage)
    import spikessm

    return spikessm


def check(name, ok, detail=""):
    status = "ok" if ok else "FAIL"
    print(f"  {name:<38} {status} {detail}")
    if not ok:
        sys.exit(f"smoke test failed at: {name}")


def main():
    m = import_module()
    print("spikessm smoke test")

    # LIF arithmetic matches the reference dynamics
    u, s = m.lif_step(0.5, 1.0, 2.0, 1.0, 0.0)
    check("lif_step", (u, s) == (0.5, 1.0), f"u={u} s={s}")

    u, w, s = m.adlif_step(0.5, 0.5, 0.1, 0.2, 1.0, 1.0, 0.0, 0.0, 0.0)
    check("adlif_step", (u, w, s) == (0.5, 0.1, 1.0))

    # S4D-Lin eigenvalues stay inside the unit disk, deterministically
    lam = m.s4d_lin_init(16, seed=3)
    moduli = [math.hypot(re, im) for re, im in lam]
    check("s4d_lin_init inside unit disk", all(r < 1.0 for r in moduli))
    check("s4d_lin_init deterministic", lam == m.s4d_lin_init(16, seed=3))

    # spike activations and surrogate boxes
    spikes = m.activate("signed_spike", [-2.0, -0.5, 0.5, 2.0])
    check("signed spikes", spikes == [-1.0, 0.0, 0.0, 1.0])
    sur = m.surrogate_derivative("signed_spike", [0.0, 1.0, -1.2])
    check("surrogate car-box", sur == [0.0, 1.0, 1.0])
    check("gelu(0) == 0", m.gelu(0.0) == 0.0)

    # FFT impulse and round trip
    spectrum = m.fft([(1.0, 0.0), (0.0, 0.0), (0.0, 0.0), (0.0, 0.0)])
    check(
        "fft impulse",
        all(abs(re - 1.0) < 1e-12 and abs(im) < 1e-12 for re, im in spectrum),
    )
    back = m.ifft(m.fft([(0.3, -0.1), (1.0, 2.0), (-4.0, 0.5), (0.0, 1.0)]))
    want = [(0.3, -0.1), (1.0, 2.0), (-4.0, 0.5), (0.0, 1.0)]
    check(
        "fft round trip",
        all(
            abs(a - c) < 1e-10 and abs(b - d) < 1e-10
            for (a, b), (c, d) in zip(back, want)
        ),
    )

    # stepping a neuron bank directly
    layer = m.SsmLayer(h=4, n=8, transition="non_diagonal_dft", seed=1)
    ys, ss = layer.step([0.5, -0.5, 1.0, 0.0])
    check("SsmLayer.step shapes", len(ys) == 4 and len(ss) == 4)
    check("SsmLayer spike values", all(v in (-1.0, 0.0, 1.0) for v in ss))
    layer.reset()
    ys2, _ = layer.step([0.5, -0.5, 1.0, 0.0])
    check("SsmLayer.reset reproduces step", ys == ys2)

    # a network over a synthetic batch, plus checkpoint round trip
    data = m.synthetic_dataset(
        classes=2, channels=16, t_len=20, train_per_class=4, test_per_class=4, seed=5
    )
    test = data["test"]
    spec_toml = """
input_dim = 16
num_classes = 2

[[layers]]
h = 4
n = 4
transition = "diagonal"
activation = { variant = "signed_spike" }
"""
    net = m.Network(spec_toml, 11)
    loss, acc, logits = net.eval(test["counts"], test["labels"], test["t_len"])
    check(
        "Network.eval",
        math.isfinite(loss) and len(logits) == test["batch"],
        f"loss={loss:.4f} acc={acc:.2f}",
    )
    spec = json.loads(net.spec_json)
    check("Network.spec_json", spec["num_classes"] == 2)

    with tempfile.TemporaryDirectory() as tmp:
        ckpt = os.path.join(tmp, "net.ckpt")
        net.save(ckpt)
        reloaded = m.Network.load(ckpt)
        loss2, acc2, _ = reloaded.eval(test["counts"], test["labels"], test["t_len"])
        check("checkpoint round trip", loss == loss2 and acc == acc2)

        # dataset container via JSONL
        jsonl = os.path.join(tmp, "events.jsonl")
        with open(jsonl, "w") as fh:
            fh.write('{"label": 0, "times": [0.1, 0.4], "units": [2, 5]}\n')
            fh.write('{"label": 1, "times": [0.2], "units": [7]}\n')
        sed = os.path.join(tmp, "train.sed")
        n = m.convert_jsonl(jsonl, sed, channels=16, classes=2)
        info = m.container_info(sed)
        check(
            "container convert + verify",
            n == 2 and info["samples"] == 2 and info["events"] == 3,
        )

    # end-to-end training on an easy synthetic task
    config = """
[dataset]
kind = "synthetic"
classes = 2
channels = 32
t_len = 40
train_per_class = 24
test_per_class = 12
rate_hi = 0.6
rate_lo = 0.03

[network]
input_dim = 32
num_classes = 2

[[network.layers]]
h = 8
n = 4
transition = "diagonal"
activation = { variant = "signed_spike" }

[optim]
dropout = 0.1

[run]
trials = 1
epochs = 3
batch_size = 16
seed = 4
"""
    summary = m.run_experiment(config)
    acc = summary["mean_acc"]
    check("run_experiment accuracy > 0.9", acc > 0.9, f"acc={acc:.3f}")

    # gradient check on a tiny config
    small = config.replace("h = 8", "h = 1").replace(
        'activation = { variant = "signed_spike" }',
        'activation = { variant = "gelu" }',
    )
    reports = m.gradient_check(small)
    check("gradient_check passes", all(r["pass"] for r in reports))

    print("all smoke checks passed")


if __name__ == "__main__":
    main()
