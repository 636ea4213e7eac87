"""Environment-family files and CSV traces.

Family file layout (all integers and floats little-endian)::

    8 bytes   magic b"SFACFAM\\0"
    4 bytes   uint32 length L of the JSON header
    L bytes   UTF-8 JSON header {version, seed, N, n_states, n_actions, gamma, h, reward_bound}
    then for each agent i = 0..N-1, row-major float64:
        transition[S, A, S], reward[S, A, S], initial_dist[S]
"""
from __future__ import annotations

import csv
import json
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .mdp import TabularMdp

MAGIC = b"SFACFAM\0"
FORMAT_VERSION = 1


class CsvFormatError(ValueError):
    pass


def save_family(path, envs: Sequence[TabularMdp], seed: int, heterogeneity: float) -> None:
    env0 = envs[0]
    header = {"version": FORMAT_VERSION, "seed": int(seed), "N": len(envs),
              "n_states": env0.n_states, "n_actions": env0.n_actions,
              "gamma": float(env0.discount), "h": float(heterogeneity),
              "reward_bound": float(max(e.reward_bound for e in envs))}
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for env in envs:
            for arr in (env.transition, env.reward, env.initial_dist):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_family(path) -> tuple[dict, list[TabularMdp]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not an environment-family file")
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + n])
    if header.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported family file version {header.get('version')}")
    S, A = header["n_states"], header["n_actions"]
    sizes = (S * A * S, S * A * S, S)
    flat = np.frombuffer(data, dtype="<f8", offset=12 + n)
    if flat.size != header["N"] * sum(sizes):
        raise ValueError(f"{path}: payload size does not match header")
    envs, pos = [], 0
    for _ in range(header["N"]):
        P = flat[pos:pos + sizes[0]].reshape(S, A, S); pos += sizes[0]
        R = flat[pos:pos + sizes[1]].reshape(S, A, S); pos += sizes[1]
        b = flat[pos:pos + sizes[2]].copy(); pos += sizes[2]
        envs.append(TabularMdp(P.copy(), R.copy(), header["gamma"], b,
                               reward_bound=header["reward_bound"]))
    return header, envs


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, columns: Sequence[str], rows: Iterable) -> None:
    """Rows may be dicts keyed by column or plain sequences in column order."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            vals = [row.get(c) for c in columns] if isinstance(row, dict) else list(row)
            w.writerow([_fmt(v) for v in vals])


def read_csv(path, required: Sequence[str] = ()) -> list[dict]:
    """Parse a trace CSV into dicts of floats (empty cells become None)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: row 1: file is empty") from None
        missing = [c for c in required if c not in header]
        if missing:
            raise CsvFormatError(f"{path}: row 1: missing columns {missing}")
        rows = []
        for lineno, raw in enumerate(reader, start=2):
            if len(raw) != len(header):
                raise CsvFormatError(f"{path}: row {lineno}: expected {len(header)} fields, "
                                     f"got {len(raw)}")
            rec = {}
            for col, cell in zip(header, raw):
                if cell == "":
                    rec[col] = None
                    continue
                try:
                    rec[col] = float(cell)
                except ValueError:
                    raise CsvFormatError(f"{path}: row {lineno}: column {col!r} holds "
                                         f"non-numeric value {cell!r}") from None
            rows.append(rec)
    return rows
