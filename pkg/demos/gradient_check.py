"""Certify the hand-written backward pass against finite differences.

Every gradient the optimiser uses comes from reverse-mode code written by
hand (batch norm, ReLU, the BSDE recursion).  This compares it with central
differences on small random instances of every problem.

    python demos/gradient_check.py [--trials 24]
"""

import argparse

from deepbsde import gradcheck

parser = argparse.ArgumentParser()
parser.add_argument("--trials", type=int, default=24)
args = parser.parse_args()

results = gradcheck.run_suite(trials=args.trials)
for r in results:
    flag = "ok " if r.passed else "BAD"
    print(f"{flag} {r.problem_id:16s} d={r.dim} N={r.steps} H={r.hidden_layers} B={r.batch_size} "
          f"entries={r.entries:4d} max rel err={r.max_relative_error:.2e}")
print(f"worst: {max(r.max_relative_error for r in results):.2e} (tolerance {gradcheck.TOLERANCE:g})")
