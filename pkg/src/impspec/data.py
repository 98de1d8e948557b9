"""Column tables with causal role tags, and their CSV/JSON serialization."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gp import TwoStageData

__all__ = ["ROLES", "Dataset", "read_dataset", "write_dataset"]

ROLES = ("Y", "W", "V", "Z")


def _columns(table: dict) -> dict:
    out = {}
    n = None
    for name, col in table.items():
        a = np.asarray(col, dtype=float).ravel()
        if n is None:
            n = a.size
        elif a.size != n:
            raise ValueError(f"column {name!r} has length {a.size}, expected {n}")
        if not np.all(np.isfinite(a)):
            raise ValueError(f"column {name!r} has non-finite values")
        out[str(name)] = a
    return out


@dataclass
class Dataset:
    """Observations as named columns plus a role map.

    Parameters
    ----------
    table : dict of str -> array
        Columns of the (first) table, all of equal length.
    roles : dict
        Maps each of ``"Y", "W", "V", "Z"`` to a list of column names. ``W``
        may be empty. Unlisted columns are carried along untouched.
    table2 : dict, optional
        Second table for two-sample (fusion) data. When present, ``Y, W, V``
        are read from ``table`` and ``V, Z`` from ``table2``.
    """

    table: dict
    roles: dict
    table2: dict | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.table = _columns(self.table)
        if self.table2 is not None:
            self.table2 = _columns(self.table2)
        roles = {}
        for r in ROLES:
            cols = self.roles.get(r, [])
            roles[r] = [cols] if isinstance(cols, str) else list(cols)
        unknown = set(self.roles) - set(ROLES)
        if unknown:
            raise ValueError(f"unknown roles {sorted(unknown)}")
        self.roles = roles
        if len(roles["Y"]) != 1:
            raise ValueError("exactly one outcome column is required")
        if not roles["V"] or not roles["Z"]:
            raise ValueError("V and Z must each name at least one column")
        second = self.table if self.table2 is None else self.table2
        for r, tab in (("Y", self.table), ("W", self.table), ("V", self.table), ("V", second), ("Z", second)):
            for c in roles[r]:
                if c not in tab:
                    raise ValueError(f"role {r} refers to missing column {c!r}")

    @property
    def fusion(self) -> bool:
        return self.table2 is not None

    @property
    def n(self) -> int:
        return len(next(iter(self.table.values())))

    @property
    def n2(self) -> int:
        return self.n if self.table2 is None else len(next(iter(self.table2.values())))

    def column(self, name, second: bool = False) -> np.ndarray:
        tab = self.table2 if second and self.table2 is not None else self.table
        return tab[name]

    def block(self, role: str, second: bool = False) -> np.ndarray | None:
        """Columns of one role stacked as an ``(n, d)`` array (``None`` if empty)."""
        cols = self.roles[role]
        if not cols:
            return None
        return np.column_stack([self.column(c, second) for c in cols])

    def to_arrays(self) -> TwoStageData:
        two = self.fusion
        return TwoStageData(
            self.block("Y")[:, 0],
            self.block("W"),
            self.block("V"),
            self.block("V", second=two),
            self.block("Z", second=two),
            shared=not two,
        )

    def take(self, idx, idx2=None) -> "Dataset":
        """Row subset; ``idx2`` indexes the second table (defaults to ``idx``)."""
        idx = np.asarray(idx)
        t1 = {k: v[idx] for k, v in self.table.items()}
        t2 = None
        if self.table2 is not None:
            j = idx if idx2 is None else np.asarray(idx2)
            t2 = {k: v[j] for k, v in self.table2.items()}
        return Dataset(t1, self.roles, t2, dict(self.meta))


def _write_csv(path: Path, table: dict):
    names = list(table)
    cols = [table[k] for k in names]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in zip(*cols):
            w.writerow(["%.17g" % x for x in row])


def _read_csv(path: Path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path} is empty")
    header, body = rows[0], rows[1:]
    if not body:
        raise ValueError(f"{path} has no data rows")
    try:
        arr = np.array(body, dtype=float)
    except ValueError as e:
        raise ValueError(f"{path}: non-numeric entry ({e})") from None
    return {h: arr[:, i] for i, h in enumerate(header)}


def write_dataset(ds: Dataset, path) -> dict:
    """Write ``path`` (CSV), a ``.roles.json`` sidecar and, for fusion, ``*_2.csv``.

    Returns the written paths keyed by ``"data"``, ``"roles"``, ``"table2"``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(path, ds.table)
    out = {"data": str(path)}
    side = {"roles": ds.roles, "meta": ds.meta, "table2": None}
    if ds.table2 is not None:
        p2 = path.with_name(path.stem + "_2.csv")
        _write_csv(p2, ds.table2)
        side["table2"] = p2.name
        out["table2"] = str(p2)
    rp = path.with_suffix(".roles.json")
    rp.write_text(json.dumps(side, indent=2, sort_keys=True))
    out["roles"] = str(rp)
    return out


def read_dataset(path, roles=None, fusion=None) -> Dataset:
    """Read a dataset written by :func:`write_dataset`.

    ``roles`` may be a path to a JSON file, a dict, or ``None`` (use the
    sidecar next to ``path``). The JSON holds either the role map itself or
    ``{"roles": {...}, "table2": ...}``. ``fusion`` overrides the second
    table's path.
    """
    path = Path(path)
    if roles is None:
        roles = path.with_suffix(".roles.json")
    if isinstance(roles, (str, Path)):
        rp = Path(roles)
        spec = json.loads(rp.read_text())
        base = rp.parent
    else:
        spec, base = dict(roles), path.parent
    role_map = spec.get("roles", spec)
    role_map = {k: v for k, v in role_map.items() if k in ROLES}
    t2 = None
    p2 = fusion if fusion is not None else spec.get("table2")
    if p2:
        p2 = Path(p2)
        if not p2.is_absolute() and not p2.exists():
            p2 = base / p2
        t2 = _read_csv(p2)
    return Dataset(_read_csv(path), role_map, t2, spec.get("meta", {}))
