"""AMP vs VAMP as the measurement operator gets ill-conditioned.

Runs the wavelet-sparse (l1) variants of both algorithms on the
structured Hadamard operator at M/N = 0.1 and 32 dB SNR, one trial per
condition number, and prints mean PSNR over the bundled images.  AMP
holds up on the flat spectrum and falls apart from cond 10 on; VAMP
loses a few dB by cond 1e4 but keeps converging.

    python demos/condition_sweep.py [--trials 3]
"""
import argparse
import csv
import io

from dvamp import ExperimentConfig, run_sweep

CONDS = (1.0, 10.0, 100.0, 1e3, 1e4)

ap = argparse.ArgumentParser()
ap.add_argument("--trials", type=int, default=1)
args = ap.parse_args()

cells = [ExperimentConfig(algorithm=alg, ensemble="structured", ratio=0.1, cond=c,
                          snr_db=32.0, iters=10, trials=args.trials)
         for alg in ("l1-amp", "l1-vamp") for c in CONDS]
rows = list(csv.DictReader(io.StringIO(run_sweep(cells))))

print(f"{'cond':>8}  {'l1-AMP':>16}  {'l1-VAMP':>16}")
for c in CONDS:
    line = [f"{c:8g}"]
    for alg in ("l1-amp", "l1-vamp"):
        r = next(r for r in rows if r["algorithm"] == alg and float(r["cond"]) == c)
        tag = f" ({r['diverged_count']} div)" if int(r["diverged_count"]) else ""
        line.append(f"{float(r['mean_psnr_db']):8.2f} dB{tag:>5}")
    print("  ".join(line))
