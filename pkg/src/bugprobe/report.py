"""Source heatmaps: render per-line scores over the code they belong to.

Each line's intensity is its score divided by the sample's maximum line
score, quantized to nine levels; the top-ranked line therefore always gets
the darkest shade. Output bytes are deterministic for fixed input.
"""

from __future__ import annotations

import html as html_mod

from .errors import BugprobeError
from .localize import LineRanking
from .repstore import CodeRecord

N_LEVELS = 8  # levels run 0..8

# 256-color grayscale ramp: level 0 lightest (255), level 8 darkest (232).
_ANSI_GRAYS = [255, 253, 250, 247, 244, 241, 238, 235, 232]

_HTML_STYLE = """\
body { font-family: monospace; background: #ffffff; color: #111111; }
pre { margin: 0; }
.ln { color: #888888; }
.heat-0 { background: #ffffff; } .heat-1 { background: #ffecec; }
.heat-2 { background: #ffd4d4; } .heat-3 { background: #ffb9b9; }
.heat-4 { background: #ff9d9d; } .heat-5 { background: #ff7f7f; }
.heat-6 { background: #f95f5f; } .heat-7 { background: #e83c3c; }
.heat-8 { background: #d01818; color: #ffffff; }
"""


class ReportError(BugprobeError):
    pass


def _levels(ranking: LineRanking, code: CodeRecord) -> list[int]:
    lines = code.lines
    if len(lines) != ranking.num_lines:
        raise ReportError(
            f"sample {code.sample_id!r}: code has {len(lines)} lines but the ranking "
            f"scores {ranking.num_lines}")
    peak = float(max(ranking.line_scores)) if ranking.num_lines else 0.0
    if peak <= 0:
        return [0] * len(lines)
    return [round(N_LEVELS * float(s) / peak) for s in ranking.line_scores]


def render_ansi(ranking: LineRanking, code: CodeRecord) -> str:
    levels = _levels(ranking, code)
    out = [f"== {code.sample_id} =="]
    for i, (line, level) in enumerate(zip(code.lines, levels)):
        gray = _ANSI_GRAYS[level]
        fg = 255 if level >= 7 else 232
        out.append(f"\x1b[48;5;{gray}m\x1b[38;5;{fg}m{i + 1:>4} | {line}\x1b[0m")
    return "\n".join(out) + "\n"


def render_html_body(ranking: LineRanking, code: CodeRecord) -> str:
    levels = _levels(ranking, code)
    parts = [f"<h3>{html_mod.escape(code.sample_id)}</h3>", "<pre>"]
    for i, (line, level) in enumerate(zip(code.lines, levels)):
        text = html_mod.escape(line) if line else "&nbsp;"
        parts.append(f'<span class="heat-{level}"><span class="ln">{i + 1:>4} |</span> '
                     f"{text}</span>")
    parts.append("</pre>")
    return "\n".join(parts)


def render_html(pairs: list[tuple[LineRanking, CodeRecord]],
                title: str = "line-score report") -> str:
    sections = "\n".join(render_html_body(r, c) for r, c in pairs)
    return (f"<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n"
            f"<title>{html_mod.escape(title)}</title>\n<style>\n{_HTML_STYLE}</style>\n"
            f"</head>\n<body>\n{sections}\n</body>\n</html>\n")
