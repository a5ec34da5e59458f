"""
Dataset I/O: JSON-Lines crystal datasets, prompt files, CSV tables and a minimal CIF subset
"""

import json
import logging
import re
import shlex
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError

from textcrystal.core.exceptions import DataError, UnsupportedFeatureError
from textcrystal.schemas.crystal import CrystalMeta, CrystalRecord
from textcrystal.schemas.prompt import PromptRecordIn
from textcrystal.services.crystal import (
    Crystal,
    LatticeParams,
    lattice_from_params,
    params_from_lattice,
)
from textcrystal.services.elements import get_element_table

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
PROVENANCE_KEY = "_provenance"
CSV_PROVENANCE_PREFIX = "# provenance: "


# ---------------------------------------------------------------- JSON Lines

def read_jsonl(path: PathLike) -> Iterator[Tuple[int, Dict[str, Any]]]:
    """Yield ``(line_number, object)`` pairs, skipping blank lines and provenance headers"""
    path = Path(path)
    if not path.exists():
        raise DataError(f"File not found: {path}")
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: malformed JSON ({e.msg})")
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            if PROVENANCE_KEY in obj:
                continue
            yield lineno, obj


def write_jsonl(
    path: PathLike,
    rows: Iterable[Dict[str, Any]],
    provenance: Optional[Dict[str, Any]] = None,
) -> int:
    """Write one JSON object per line, with an optional provenance header line"""
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", encoding="utf-8") as fh:
        if provenance is not None:
            fh.write(json.dumps({PROVENANCE_KEY: provenance}, sort_keys=True) + "\n")
        for row in rows:
            fh.write(json.dumps(row) + "\n")
            count += 1
    return count


def read_provenance(path: PathLike) -> Optional[Dict[str, Any]]:
    """Provenance header of a JSONL file, or None when it has none"""
    path = Path(path)
    if not path.exists():
        raise DataError(f"File not found: {path}")
    with path.open("r", encoding="utf-8") as fh:
        first = fh.readline().strip()
    try:
        obj = json.loads(first) if first else None
    except json.JSONDecodeError:
        return None
    if isinstance(obj, dict) and PROVENANCE_KEY in obj:
        return obj[PROVENANCE_KEY]
    return None


# ---------------------------------------------------------------- CSV tables

def write_frame(frame: pd.DataFrame, path: PathLike, provenance: Optional[Dict[str, Any]] = None) -> Path:
    """CSV with an optional ``# provenance: {...}`` first line"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        if provenance is not None:
            fh.write(f"{CSV_PROVENANCE_PREFIX}{json.dumps(provenance, sort_keys=True)}\n")
        frame.to_csv(fh, index=False, lineterminator="\n")
    return path


def read_frame(path: PathLike) -> Tuple[pd.DataFrame, Optional[Dict[str, Any]]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"File not found: {path}")
    with path.open("r", encoding="utf-8", newline="") as fh:
        first = fh.readline()
        provenance = None
        if first.startswith(CSV_PROVENANCE_PREFIX):
            provenance = json.loads(first[len(CSV_PROVENANCE_PREFIX):])
        else:
            fh.seek(0)
        return pd.read_csv(fh), provenance


def crystal_from_record(record: CrystalRecord) -> Crystal:
    return Crystal(
        atom_types=np.asarray(record.atom_types, dtype=np.int64),
        frac_coords=np.asarray(record.frac_coords, dtype=float),
        lattice=np.asarray(record.lattice, dtype=float),
        id=record.id,
        meta=record.meta,
    )


def crystal_to_record(crystal: Crystal) -> Dict[str, Any]:
    row: Dict[str, Any] = {
        "id": crystal.id,
        "atom_types": [int(a) for a in crystal.atom_types],
        "frac_coords": crystal.frac_coords.tolist(),
        "lattice": crystal.lattice.tolist(),
    }
    if crystal.meta is not None:
        row["meta"] = crystal.meta.model_dump(exclude_none=True)
    return row


def read_jsonl_dataset(path: PathLike) -> List[Crystal]:
    """Load a crystal dataset; errors name the offending line"""
    crystals: List[Crystal] = []
    for lineno, obj in read_jsonl(path):
        try:
            crystals.append(crystal_from_record(CrystalRecord.model_validate(obj)))
        except ValidationError as e:
            raise DataError(f"{path}:{lineno}: invalid crystal record ({_first_error(e)})")
        except DataError as e:
            raise DataError(f"{path}:{lineno}: {e.detail}")
    logger.info(f"✅ Loaded {len(crystals)} crystals from {path}")
    return crystals


def write_jsonl_dataset(
    crystals: Iterable[Crystal],
    path: PathLike,
    provenance: Optional[Dict[str, Any]] = None,
) -> int:
    count = write_jsonl(path, (crystal_to_record(c) for c in crystals), provenance)
    logger.info(f"💾 Wrote {count} crystals to {path}")
    return count


def read_prompt_records(path: PathLike) -> List[PromptRecordIn]:
    records: List[PromptRecordIn] = []
    seen = set()
    for lineno, obj in read_jsonl(path):
        try:
            record = PromptRecordIn.model_validate(obj)
        except ValidationError as e:
            raise DataError(f"{path}:{lineno}: invalid prompt record ({_first_error(e)})")
        if record.id in seen:
            raise DataError(f"{path}:{lineno}: duplicate prompt id {record.id!r}")
        seen.add(record.id)
        records.append(record)
    logger.info(f"✅ Loaded {len(records)} prompts from {path}")
    return records


def _first_error(e: ValidationError) -> str:
    err = e.errors()[0]
    loc = ".".join(str(x) for x in err.get("loc", ()))
    return f"{loc}: {err.get('msg')}" if loc else str(err.get("msg"))


# ---------------------------------------------------------------- minimal CIF

_CELL_KEYS = {
    "_cell_length_a": "a",
    "_cell_length_b": "b",
    "_cell_length_c": "c",
    "_cell_angle_alpha": "alpha",
    "_cell_angle_beta": "beta",
    "_cell_angle_gamma": "gamma",
}
_SPACEGROUP_KEYS = ("_symmetry_int_tables_number", "_space_group_it_number")
_SYMOP_PREFIXES = ("_symmetry_equiv_pos", "_space_group_symop")
_UNSUPPORTED_SITE_KEYS = ("_atom_site_cartn_x", "_atom_site_cartn_y", "_atom_site_cartn_z")
_SYMBOL = re.compile(r"^([A-Z][a-z]?)")


def cif_float(value: str, what: str) -> float:
    """Numeric CIF value with any standard uncertainty ``1.234(5)`` stripped"""
    text = value.split("(", 1)[0]
    try:
        return float(text)
    except ValueError:
        raise DataError(f"CIF value for {what} is not a number: {value!r}")


def _tokenize(text: str) -> List[Tuple[int, str]]:
    tokens: List[Tuple[int, str]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.startswith(";"):
            raise UnsupportedFeatureError(f"multi-line text field at CIF line {lineno}")
        try:
            parts = shlex.split(line, comments=True)
        except ValueError as e:
            raise DataError(f"CIF line {lineno}: {e}")
        tokens.extend((lineno, p) for p in parts)
    return tokens


def _is_keyword(token: str) -> bool:
    low = token.lower()
    return token.startswith("_") or low == "loop_" or low.startswith("data_")


def parse_cif_min(text: str, id: str = "") -> Crystal:
    """Parse the declared CIF subset: one data block, cell parameters and an
    ``_atom_site`` loop with type symbols and fractional coordinates.

    Symmetry operations, Cartesian sites, partial occupancy and multi-line text
    fields raise ``UnsupportedFeatureError`` instead of being approximated.
    """
    tokens = _tokenize(text)
    scalars: Dict[str, str] = {}
    site_keys: List[str] = []
    site_values: List[str] = []
    blocks = 0

    i = 0
    while i < len(tokens):
        lineno, tok = tokens[i]
        low = tok.lower()
        if low.startswith("data_"):
            blocks += 1
            if blocks > 1:
                raise UnsupportedFeatureError("multiple CIF data blocks")
            i += 1
        elif low == "loop_":
            i += 1
            keys: List[str] = []
            while i < len(tokens) and tokens[i][1].startswith("_"):
                keys.append(tokens[i][1].lower())
                i += 1
            values: List[str] = []
            while i < len(tokens) and not _is_keyword(tokens[i][1]):
                values.append(tokens[i][1])
                i += 1
            if not keys:
                raise DataError(f"CIF line {lineno}: loop_ without keys")
            if len(values) % len(keys):
                raise DataError(f"CIF line {lineno}: loop has a ragged value table")
            if any(k.startswith(_SYMOP_PREFIXES) for k in keys):
                raise UnsupportedFeatureError("symmetry-operation loop")
            if any(k.startswith("_atom_site_") and not k.startswith("_atom_site_aniso") for k in keys):
                if site_keys:
                    raise UnsupportedFeatureError("more than one _atom_site loop")
                site_keys, site_values = keys, values
            else:
                logger.debug(f"Ignoring CIF loop {keys[0]} at line {lineno}")
        elif tok.startswith("_"):
            if i + 1 >= len(tokens) or _is_keyword(tokens[i + 1][1]):
                raise DataError(f"CIF line {lineno}: key {tok} has no value")
            if low.startswith(_SYMOP_PREFIXES):
                raise UnsupportedFeatureError(f"symmetry operation item {tok}")
            if low.startswith("_atom_site_"):
                raise UnsupportedFeatureError(f"single-valued atom site item {tok}")
            scalars[low] = tokens[i + 1][1]
            i += 2
        else:
            raise DataError(f"CIF line {lineno}: unexpected token {tok!r}")

    missing = [k for k in _CELL_KEYS if k not in scalars]
    if missing:
        raise DataError(f"CIF is missing cell parameters: {', '.join(missing)}")
    params = LatticeParams(**{name: cif_float(scalars[key], key) for key, name in _CELL_KEYS.items()})

    if not site_keys:
        raise DataError("CIF has no _atom_site loop")
    if any(k in site_keys for k in _UNSUPPORTED_SITE_KEYS):
        raise UnsupportedFeatureError("Cartesian atom site coordinates")
    for needed in ("_atom_site_type_symbol", "_atom_site_fract_x", "_atom_site_fract_y", "_atom_site_fract_z"):
        if needed not in site_keys:
            raise UnsupportedFeatureError(f"_atom_site loop without {needed}")

    table = get_element_table()
    width = len(site_keys)
    rows = [site_values[r:r + width] for r in range(0, len(site_values), width)]
    labels: List[int] = []
    coords: List[List[float]] = []
    for row in rows:
        item = dict(zip(site_keys, row))
        occupancy = item.get("_atom_site_occupancy")
        if occupancy not in (None, "?", ".") and abs(cif_float(occupancy, "occupancy") - 1.0) > 1e-6:
            raise UnsupportedFeatureError(f"partial occupancy {occupancy}")
        m = _SYMBOL.match(item["_atom_site_type_symbol"])
        if m is None or not table.has_symbol(m.group(1)):
            raise DataError(f"Unknown CIF atom type {item['_atom_site_type_symbol']!r}")
        labels.append(table.label(m.group(1)))
        coords.append([cif_float(item[f"_atom_site_fract_{ax}"], f"fract_{ax}") for ax in "xyz"])

    meta = None
    for key in _SPACEGROUP_KEYS:
        if key in scalars:
            meta = CrystalMeta(spacegroup=int(cif_float(scalars[key], key)))
            break

    crystal = Crystal(
        atom_types=np.asarray(labels, dtype=np.int64),
        frac_coords=np.asarray(coords, dtype=float),
        lattice=lattice_from_params(params),
        id=id,
        meta=meta,
    )
    logger.debug(f"Parsed CIF with {crystal.num_atoms} sites")
    return crystal


def write_cif_min(crystal: Crystal) -> str:
    """Serialize a crystal into the same CIF subset ``parse_cif_min`` reads"""
    table = get_element_table()
    p = params_from_lattice(crystal.lattice)
    lines = [f"data_{crystal.id or 'crystal'}"]
    for key, name in _CELL_KEYS.items():
        lines.append(f"{key} {getattr(p, name):.10f}")
    lines += [
        "loop_",
        "_atom_site_type_symbol",
        "_atom_site_fract_x",
        "_atom_site_fract_y",
        "_atom_site_fract_z",
    ]
    for label, xyz in zip(crystal.atom_types, crystal.frac_coords):
        lines.append(f"{table.symbol(int(label))} " + " ".join(f"{x:.10f}" for x in xyz))
    return "\n".join(lines) + "\n"
