"""Linear-time attention, latency, and the command-line pipeline.

python3 demos/03_scaling_and_cli.py
"""

import json
import subprocess
import sys
import tempfile
from pathlib import Path

from gridlock import ModelConfig, init_params
from gridlock.training import bench_inference

# banded attention: doubling T should roughly double forward time
cfg = ModelConfig(input_dim=27, window=8, max_seq_len=512)
params = init_params(cfg, 0)
timing = {T: bench_inference(params, cfg, frames=T, runs=20)["median_s"] for T in (64, 128, 256, 512)}
for T, t in timing.items():
    print(f"T={T:4d}  {t * 1e3:7.2f} ms")
print("T512/T256 = %.2f" % (timing[512] / timing[256]))

# the same pipeline through the CLI
work = Path(tempfile.mkdtemp())


def run(*args):
    cmd = [sys.executable, "-m", "gridlock.cli", *map(str, args)]
    print("$ gridlock", " ".join(map(str, args)), flush=True)
    subprocess.run(cmd, check=True)


run("gen-data", "--out", work / "ds", "--seed", 1, "--sequences", 60, "--frames", 20)
manifest = work / "ds" / "manifest.json"
run("train", "--out", work / "run", "--seed", 1, "--manifest", manifest, "--epochs", 5)
run("eval", "--out", work / "eval", "--seed", 1, "--manifest", manifest, "--checkpoint", work / "run" / "checkpoint.cgck")
run("bench", "--out", work / "bench", "--checkpoint", work / "run" / "checkpoint.cgck", "--preset", "nuscenes", "--runs", 20)
run("replay", work / "run" / "run.json", "--out", work / "again")

same = (work / "run" / "checkpoint.cgck").read_bytes() == (work / "again" / "checkpoint.cgck").read_bytes()
print("replayed checkpoint identical:", same)
print(json.loads((work / "bench" / "bench.json").read_text()))
