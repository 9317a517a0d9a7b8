#!/usr/bin/env python3
"""Render a per-line score heatmap in the terminal.

Run:  python demos/05_heatmap_report.py
"""

import numpy as np

from bugprobe.localize import aggregate
from bugprobe.report import render_ansi, render_html
from bugprobe.repstore import CodeRecord

code = CodeRecord(
    sample_id="heatmap-demo",
    code=("def mean(values):\n"
          "    total = 0\n"
          "    for v in values:\n"
          "        total += v\n"
          "    return total / len(values) + 1\n"
          "\n"
          "print(mean([1, 2, 3]))"),
    label=1,
    buggy_lines=frozenset({4}),
)

# Attention mass per token, summed into lines; the off-by-one return line
# carries most of it.
a_bar = np.array([0.04, 0.03, 0.02, 0.04, 0.02, 0.05, 0.06,
                  0.31, 0.24, 0.08, 0.05, 0.06])
token_line = np.array([0, 0, 1, 1, 2, 2, 3, 4, 4, 5, 6, 6])
ranking = aggregate(a_bar, token_line, sample_id=code.sample_id)

print(render_ansi(ranking, code))
print("line ranking:", ranking.order)

html = render_html([(ranking, code)])
print(f"(HTML variant renders the same shading in {len(html)} bytes; "
      f"write it with bugprobe report --format html)")
