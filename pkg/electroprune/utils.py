"""
Helpers for writing and reading the CSV and JSON-lines artifacts.
"""

import json
import logging
import os

import numpy as np

logger = logging.getLogger("electroprune")


def write_table(filename, rows, columns):
    """
    Write rows as a comma-separated table with a header line.

    Parameters
    ----------
    filename : str
       The location the table should be written to.
    rows : list of dict
       One mapping per row; only ``columns`` are written, in that order.
    columns : sequence of str
       The header.
    """
    directory = os.path.dirname(filename)
    if directory:
        os.makedirs(directory, exist_ok=True)
    table = np.empty((len(rows), len(columns)), dtype=object)
    for index, row in enumerate(rows):
        table[index] = [row[column] for column in columns]
    np.savetxt(filename, table, fmt="%s", delimiter=",",
               header=",".join(columns), comments="")
    logger.debug(f"Wrote {len(rows)} rows to {filename}")
    return filename


def read_table(filename):
    """
    Read a table written by `write_table` into a list of dicts.
    """
    data = np.genfromtxt(filename, delimiter=",", names=True, dtype=None, encoding="utf-8")
    data = np.atleast_1d(data)
    if data.dtype.names is None:
        return []
    return [{name: row[name].item() for name in data.dtype.names} for row in data]


def append_json_line(filename, record):
    """Append one JSON record to a JSON-lines file."""
    directory = os.path.dirname(filename)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(filename, "a") as handle:
        handle.write(json.dumps(record) + "\n")
