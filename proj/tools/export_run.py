#!/usr/bin/env python3
# SPDX-License-Identifier: Apache-2.0
"""Convert one fine-tuning run's checkpoints into TPAK files plus a manifest
fragment that `snapsoup validate --manifest a.json --manifest b.json` merges.

Export one run per process:

    export_run.py --run-dir runs/lr2e-5-bs32-s1 --out pool/ --head-pattern 'classifier\\..*'

Check that task heads agree across runs before averaging them:

    export_run.py --check-heads runs/a runs/b --head-pattern 'classifier\\..*'

Checkpoints may be torch files (.pt/.bin/.pth), .safetensors or .npz. A
snapshot is either such a file directly under the run directory or a
`checkpoint-<step>/` directory holding one. Snapshots are ordered by the
trailing step number in their name. Run hyperparameters come from
`run.json` ({"lr": .., "batch_size": .., "seed": .., "run_id": ..}) in the
run directory or from the command line.

Exit status: 0 ok, 1 usage, 2 data (bad checkpoint, count mismatch, head
divergence).
"""

from __future__ import annotations

import argparse
import json
import re
import struct
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"TPAK"
VERSION = 1
CHECKPOINT_SUFFIXES = (".pt", ".bin", ".pth", ".safetensors", ".npz")


class ExportError(Exception):
    """Bad input data. Maps to exit status 2."""


class UsageError(Exception):
    """Bad arguments. Maps to exit status 1."""


# ---------------------------------------------------------------------------
# TPAK


def encode_tpak(tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> bytes:
    """Same bytes the native writer produces: compact JSON header, tensors
    and meta keys in byte-lexicographic order, little-endian f32 payload."""
    index = {}
    offset = 0
    payload = []
    for name in sorted(tensors, key=lambda n: n.encode("utf-8")):
        arr = tensors[name]
        a = np.ascontiguousarray(arr, dtype="<f4")
        if not np.all(np.isfinite(a)):
            raise ExportError(f"non-finite value in tensor '{name}'")
        nbytes = a.size * 4
        index[name] = {"dtype": "f32", "shape": list(a.shape), "offset": offset, "nbytes": nbytes}
        offset += nbytes
        payload.append(a.tobytes())
    meta = meta or {}
    ordered_meta = {k: str(meta[k]) for k in sorted(meta, key=lambda k: k.encode("utf-8"))}
    header = json.dumps(
        {"tensors": index, "meta": ordered_meta}, separators=(",", ":"), ensure_ascii=False
    ).encode("utf-8")
    return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(payload)


def decode_tpak(data: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    if len(data) < 16 or data[:4] != MAGIC:
        raise ExportError("not a TPAK file")
    version, hlen = struct.unpack("<IQ", data[4:16])
    if version != VERSION:
        raise ExportError(f"unsupported TPAK version {version}")
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    body = data[16 + hlen :]
    out = {}
    for name, e in header["tensors"].items():
        if e["dtype"] != "f32":
            raise ExportError(f"unsupported dtype {e['dtype']}")
        n = int(np.prod(e["shape"], dtype=np.int64))
        a = np.frombuffer(body, dtype="<f4", count=n, offset=e["offset"])
        out[name] = a.reshape(e["shape"]).astype(np.float32)
    return out, header.get("meta", {})


def read_tpak(path: Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    return decode_tpak(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Checkpoint loading


def _to_numpy(value) -> np.ndarray:
    if isinstance(value, np.ndarray):
        return value
    # torch tensors; bf16 has no numpy dtype, widen first (exact).
    t = value.detach().cpu()
    if str(t.dtype) == "torch.bfloat16":
        t = t.float()
    return t.numpy()


def load_checkpoint(path: Path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        if path.suffix == ".npz":
            with np.load(path, allow_pickle=False) as z:
                return {k: z[k] for k in z.files}
        if path.suffix == ".safetensors":
            from safetensors.torch import load_file

            return {k: _to_numpy(v) for k, v in load_file(str(path)).items()}
        import torch

        obj = torch.load(str(path), map_location="cpu", weights_only=True)
    except ExportError:
        raise
    except Exception as e:  # any reader failure is a data problem
        raise ExportError(f"cannot read checkpoint '{path}': {e}") from e
    if isinstance(obj, dict) and "state_dict" in obj and isinstance(obj["state_dict"], dict):
        obj = obj["state_dict"]
    if not isinstance(obj, dict):
        raise ExportError(f"checkpoint '{path}' does not hold a state dict")
    return {k: _to_numpy(v) for k, v in obj.items()}


def cast_f32(name: str, a: np.ndarray) -> np.ndarray:
    """f16/bf16/f32 widen exactly; f64 rounds to nearest. Anything else is
    refused rather than silently reinterpreted."""
    if not np.issubdtype(a.dtype, np.floating):
        raise ExportError(f"tensor '{name}' has dtype {a.dtype}, which cannot be cast to f32")
    return a.astype(np.float32)


# ---------------------------------------------------------------------------
# Export


@dataclass
class ExportSpec:
    run_dir: Path
    out: Path
    run_id: str | None = None
    lr: float | None = None
    batch_size: int | None = None
    seed: int | None = None
    snapshots: int = 10
    renames: list[tuple[str, str]] = field(default_factory=list)
    exclude: list[str] = field(default_factory=list)
    head_patterns: list[str] = field(default_factory=list)


_STEP = re.compile(r"(\d+)(?!.*\d)")


def discover_snapshots(run_dir: Path) -> list[Path]:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ExportError(f"run directory '{run_dir}' does not exist")
    found = []
    for p in run_dir.iterdir():
        if p.is_file() and p.suffix in CHECKPOINT_SUFFIXES:
            found.append(p)
        elif p.is_dir() and p.name.startswith("checkpoint"):
            inner = sorted(q for q in p.iterdir() if q.is_file() and q.suffix in CHECKPOINT_SUFFIXES)
            if len(inner) != 1:
                raise ExportError(f"'{p}' should hold exactly one checkpoint file, found {len(inner)}")
            found.append(inner[0])

    def step(p: Path) -> int:
        name = p.parent.name if p.parent != run_dir else p.stem
        m = _STEP.search(name)
        if not m:
            raise ExportError(f"no step number in checkpoint name '{name}'")
        return int(m.group(1))

    found.sort(key=step)
    steps = [step(p) for p in found]
    if len(set(steps)) != len(steps):
        raise ExportError(f"duplicate step numbers in '{run_dir}'")
    return found


def rename_map(names: list[str], renames: list[tuple[str, str]], exclude: list[str]) -> dict[str, str]:
    """Source name to canonical name, with excluded names dropped. Two source
    names landing on one canonical name is an error."""
    out = {}
    seen = {}
    for n in names:
        if any(re.fullmatch(x, n) for x in exclude):
            continue
        new = n
        for pat, repl in renames:
            new = re.sub(pat, repl, new)
        if new in seen:
            raise ExportError(f"rename rules map both '{seen[new]}' and '{n}' to '{new}'")
        seen[new] = n
        out[n] = new
    return out


def _run_metadata(job: ExportSpec) -> dict:
    meta = {}
    f = Path(job.run_dir) / "run.json"
    if f.exists():
        try:
            meta = json.loads(f.read_text())
        except json.JSONDecodeError as e:
            raise ExportError(f"'{f}': {e}") from e
    for key, val in (("run_id", job.run_id), ("lr", job.lr), ("batch_size", job.batch_size), ("seed", job.seed)):
        if val is not None:
            meta[key] = val
    meta.setdefault("run_id", Path(job.run_dir).name)
    meta.setdefault("seed", 0)
    for key in ("lr", "batch_size"):
        if key not in meta:
            raise UsageError(f"'{key}' is missing: pass --{key.replace('_', '-')} or add it to run.json")
    if not (float(meta["lr"]) > 0) or int(meta["batch_size"]) <= 0:
        raise ExportError("lr and batch_size must be positive")
    return meta


def export_run(job: ExportSpec) -> Path:
    """Write TPAKs and `<out>/<run_id>.manifest.json`; return the fragment path."""
    meta = _run_metadata(job)
    run_id = str(meta["run_id"])
    files = discover_snapshots(job.run_dir)
    if len(files) != job.snapshots:
        raise ExportError(f"expected {job.snapshots} snapshots, found {len(files)}")

    out = Path(job.out)
    snap_dir = out / "snapshots" / run_id
    snap_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    layout = None
    for idx, src in enumerate(files, start=1):
        state = load_checkpoint(src)
        names = rename_map(list(state), job.renames, job.exclude)
        tensors = {new: cast_f32(old, state[old]) for old, new in names.items()}
        if job.head_patterns and not any(
            re.fullmatch(p, n) for p in job.head_patterns for n in tensors
        ):
            raise ExportError(f"head pattern matches nothing in '{src}'")
        shapes = {n: a.shape for n, a in tensors.items()}
        if layout is None:
            layout = shapes
        elif shapes != layout:
            raise ExportError(f"'{src}' has different tensor names or shapes than snapshot 1")
        rel = Path("snapshots") / run_id / f"snap-{idx:02d}.tpak"
        tmeta = {"id": f"{run_id}@{idx}", "run_id": run_id, "snapshot": str(idx), "source": src.name}
        (out / rel).write_bytes(encode_tpak(tensors, tmeta))
        entries.append({"index": idx, "path": rel.as_posix()})

    fragment = {
        "runs": [
            {
                "batch_size": int(meta["batch_size"]),
                "lr": float(meta["lr"]),
                "run_id": run_id,
                "seed": int(meta["seed"]),
                "snapshots": entries,
            }
        ],
        "snapshots_per_run": job.snapshots,
    }
    path = out / f"{run_id}.manifest.json"
    path.write_text(json.dumps(fragment, indent=2) + "\n")
    return path


# ---------------------------------------------------------------------------
# Head alignment


def check_head_alignment(run_dirs: list[Path], head_patterns: list[str]) -> dict:
    """Compare head tensors at snapshot 1 of every run against the first run.

    Returns {"aligned": bool, "parameters": {name: max_abs_diff}}. Only saved
    snapshots exist after the fact, so snapshot 1 is the comparison point.
    """
    if len(run_dirs) < 2:
        raise UsageError("head alignment needs at least two runs")
    if not head_patterns:
        raise UsageError("pass at least one --head-pattern")
    heads = []
    for d in run_dirs:
        first = discover_snapshots(d)
        if not first:
            raise ExportError(f"no checkpoints in '{d}'")
        state = load_checkpoint(first[0])
        picked = {n: cast_f32(n, a) for n, a in state.items() if any(re.fullmatch(p, n) for p in head_patterns)}
        if not picked:
            raise ExportError(f"head pattern matches nothing in '{first[0]}'")
        heads.append(picked)
    ref = heads[0]
    diffs = {}
    for other in heads[1:]:
        if set(other) != set(ref):
            raise ExportError("runs disagree on the set of head parameters")
        for n, a in ref.items():
            b = other[n]
            if a.shape != b.shape:
                raise ExportError(f"head parameter '{n}' has shape {b.shape}, expected {a.shape}")
            d = float(np.max(np.abs(a.astype(np.float64) - b.astype(np.float64)))) if a.size else 0.0
            diffs[n] = max(diffs.get(n, 0.0), d)
    return {"aligned": all(v == 0.0 for v in diffs.values()), "parameters": diffs}


# ---------------------------------------------------------------------------
# CLI


def _parse_rename(text: str) -> tuple[str, str]:
    if "=>" not in text:
        raise argparse.ArgumentTypeError("rename rule must look like 'PATTERN=>REPLACEMENT'")
    pat, repl = text.split("=>", 1)
    try:
        re.compile(pat)
    except re.error as e:
        raise argparse.ArgumentTypeError(str(e)) from e
    return pat, repl


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        sys.exit(1)


def main(argv: list[str] | None = None) -> int:
    ap = _Parser(description="Export fine-tuning checkpoints to TPAK plus a manifest fragment.")
    ap.add_argument("--run-dir", type=Path, help="run directory to export")
    ap.add_argument("--out", type=Path, help="pool directory to write into")
    ap.add_argument("--run-id")
    ap.add_argument("--lr", type=float)
    ap.add_argument("--batch-size", type=int)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--snapshots", type=int, default=10, help="expected snapshot count (default 10)")
    ap.add_argument("--rename", type=_parse_rename, action="append", default=[], metavar="PAT=>REPL")
    ap.add_argument("--exclude", action="append", default=[], metavar="REGEX", help="drop matching tensors")
    ap.add_argument("--head-pattern", action="append", default=[], metavar="REGEX")
    ap.add_argument("--check-heads", nargs="+", type=Path, metavar="RUN_DIR",
                    help="compare snapshot-1 heads across these runs instead of exporting")
    args = ap.parse_args(argv)
    try:
        if args.check_heads:
            report = check_head_alignment(args.check_heads, args.head_pattern)
            print(json.dumps(report, indent=2))
            return 0 if report["aligned"] else 2
        if not args.run_dir or not args.out:
            raise UsageError("--run-dir and --out are required")
        if args.snapshots <= 0:
            raise UsageError("--snapshots must be positive")
        job = ExportSpec(args.run_dir, args.out, args.run_id, args.lr, args.batch_size, args.seed,
                          args.snapshots, args.rename, args.exclude, args.head_pattern)
        print(export_run(job))
        return 0
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ExportError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
