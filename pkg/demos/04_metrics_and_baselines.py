#!/usr/bin/env python3
"""Ranking metrics, the random baseline, and prompting-output ingestion.

Run:  python demos/04_metrics_and_baselines.py
"""

import json

from bugprobe.evalkit import (ingest_external, precision_at_k, random_baseline,
                              top_k_hit)
from bugprobe.repstore import CodeRecord

order = [4, 1, 0, 6, 2, 5, 3]
buggy = {1, 6}
print(f"predicted order {order}, true buggy lines {sorted(buggy)}")
for k in (1, 3, 5):
    print(f"  hit@{k} = {top_k_hit(order, buggy, k)}")
for k in (2, 3, 5):
    print(f"  P@{k}  = {precision_at_k(order, buggy, k):.3f}")

# How hard is this sample for blind guessing? Monte Carlo agrees with the
# closed form 1 - C(L-b, k)/C(L, k).
print("\nrandom-ranking hit rates (7 lines, 2 buggy):")
for k in (1, 3, 5):
    rb = random_baseline(7, buggy, k, seed=0, trials=20_000)
    print(f"  k={k}: exact {rb.exact:.4f}, monte carlo {rb.estimate:.4f}")

# Prompting-style tools answer in JSON; line numbers are 1-based and get a
# text-match fallback when they are wrong or missing.
code = CodeRecord(sample_id="ext", label=1, buggy_lines=frozenset({2}),
                  code="int a = 0;\nint b = 1;\na = b / 0;\nreturn a;")
response = json.dumps({"faultLocalization": [
    {"codeContent": "a = b / 0;", "lineNumber": 3},
    {"codeContent": "return a;", "lineNumber": 99},
]})
lines, dropped = ingest_external(response, code)
print(f"\nexternal prediction resolved to 0-based lines {lines} "
      f"({dropped} entries dropped)")
print(f"hit@1 = {top_k_hit(lines, code.buggy_lines, 1)}")
