from __future__ import annotations
from typing import Generator

def align_text(text: str, width: int, direction: str = 'left') -> str:
    if direction == 'right':
        return text.rjust(width)
    if direction == 'center':
        return text.center(width)
    return text.ljust(width)

def format_value(value) -> str:
    """ floats to 4 decimals, None as '-' """
    if value is None:
        return '-'
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)

def align_table(headers: list[str] | None,
                rows: list[list[str]],
                join_text = ' | ',
                directions: str | list[str] = 'left',
                underline_header = True,
                pad_last_field = False
) -> Generator[str]:
    """Return a table of headers and rows with every column aligned (monospace output)

    params:
      `headers`: table header (list of each column text)
      `rows`: table row data (each row is a list of column text)
      `join_text`: what chars to put between each aligned column
      `directions`: 'left', 'right', 'center' (provide a list and it will apply across columns,
      eg `directions[0]` for column 0, etc. Missing entries default to 'left')
      `underline_header`: if `True`, a line of '-' follows the header
      `pad_last_field`: if `False` and the last column is left-justified, it is not padded
    """
    headers = list(headers) if headers else []
    rows = [[str(col) for col in row] for row in rows]
    columns = max([len(headers)] + [len(row) for row in rows])
    if columns == 0:
        return
    if isinstance(directions, str):
        directions = [directions] * columns
    directions = list(directions) + ['left'] * (columns - len(directions))

    widths = [0] * columns
    for row in [headers] + rows:
        for c, col in enumerate(row):
            widths[c] = max(widths[c], len(col))
    if not pad_last_field and directions[-1] == 'left':
        widths[-1] = 0

    def line(row: list[str]) -> str:
        cells = [align_text(row[c] if c < len(row) else '', widths[c], directions[c]) for c in range(columns)]
        return join_text.join(cells).rstrip()

    if headers:
        header_text = line(headers)
        yield header_text
        if underline_header:
            yield '-' * len(header_text)
    for row in rows:
        yield line(row)
