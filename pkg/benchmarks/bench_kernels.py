"""Compare the compiled and numpy loss kernels, then time training against N.

    python3 benchmarks/bench_kernels.py [--max-n 5] [--out bench_out]
"""

import argparse
import json
from pathlib import Path

from itigen.benchmark import compare_kernels, plot, read_csv, run_benchmark, write_csv


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--max-n", type=int, default=5)
    parser.add_argument("--repetitions", type=int, default=3)
    parser.add_argument("--out", default="bench_out")
    args = parser.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    per_call = compare_kernels()
    for name, seconds in sorted(per_call.items()):
        print(f"{name:>9} kernel: {seconds * 1e6:8.1f} us per call")
    if "compiled" in per_call:
        print(f"speedup: x{per_call['python'] / per_call['compiled']:.2f}")

    for kernel in per_call:
        report = run_benchmark(max_n=args.max_n, repetitions=args.repetitions, kernel=kernel,
                               log=print)
        write_csv(report, out / f"training_{kernel}.csv")
        plot(read_csv(out / f"training_{kernel}.csv"), out / f"training_{kernel}.png",
             (report.slope, report.intercept))
        print(f"{kernel}: slope {report.slope:.3f}, R^2 {report.r_squared:.4f}, "
              f"calls double: {report.calls_double}")
    (out / "kernels.json").write_text(json.dumps(per_call, indent=1))


if __name__ == "__main__":
    main()
