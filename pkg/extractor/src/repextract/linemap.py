"""Map tokens to source lines through character offsets.

A token belongs to the line containing its first character; lines are
newline-delimited, so the line count is len(code.split("\n")) and a
trailing-newline file ends with an empty final line. Special tokens
(zero-width or flagged by the tokenizer) map to -1.
"""

from __future__ import annotations

import bisect


def line_starts(code: str) -> list[int]:
    starts = [0]
    for i, ch in enumerate(code):
        if ch == "\n":
            starts.append(i + 1)
    return starts


def line_of_offset(starts: list[int], offset: int) -> int:
    return bisect.bisect_right(starts, offset) - 1


def token_lines(code: str, offsets: list[tuple[int, int]],
                special_mask: list[int]) -> list[int]:
    """token -> 0-based line index, -1 for specials."""
    starts = line_starts(code)
    out = []
    for (begin, end), special in zip(offsets, special_mask):
        if special or end <= begin:
            out.append(-1)
        else:
            out.append(line_of_offset(starts, begin))
    return out
