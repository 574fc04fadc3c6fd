"""Execute an experiment, write CSVs, plot scripts and the run manifest."""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import metadata

import numpy as np

from .._validation import ConfigError
from ..conjugacy_ito import verify_conjugacy_ito
from ..flows import linear_system
from ..levy_paths import make_grid, path_to_csv, sample_path
from ..linearization import scalar_example_systems
from ..marcus import linear_marcus_system, ou_path, verify_conjugacy_marcus
from .checks import CHECKS_BY_KIND, CheckResult, Table, _triplet, run_check
from .config import ExperimentConfig
from .seeding import component_seed

MANIFEST = "manifest.json"


def code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    config: dict
    version: str
    wall_time: float
    checks: list
    outputs: dict = field(default_factory=dict)  # file name -> sha256
    directory: str = "."

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.checks)

    @property
    def exit_status(self) -> int:
        return 0 if self.passed else 1

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "code_version": self.version,
            "wall_time_s": self.wall_time,
            "passed": self.passed,
            "checks": self.checks,
            "outputs": [{"file": k, "sha256": v} for k, v in sorted(self.outputs.items())],
        }

    def write(self) -> str:
        dest = os.path.join(self.directory, MANIFEST)
        with open(dest, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=False)
            fh.write("\n")
        return dest


def verify_manifest(directory: str) -> list:
    """Files whose checksum no longer matches (or that are missing)."""
    with open(os.path.join(directory, MANIFEST), encoding="utf-8") as fh:
        data = json.load(fh)
    bad = []
    for entry in data["outputs"]:
        p = os.path.join(directory, entry["file"])
        if not os.path.exists(p) or sha256_file(p) != entry["sha256"]:
            bad.append(entry["file"])
    return bad


def gnuplot_script(csv_name: str, table: Table) -> str:
    """Plain gnuplot commands for a CSV with a header row."""
    plot = table.plot or {}
    lines = ["set datafile separator ','", "set key autotitle columnhead", f"set xlabel '{table.header[plot['x'] - 1]}'"]
    if plot.get("logx"):
        lines.append("set logscale x")
    if plot.get("logy"):
        lines.append("set logscale y")
    style = "points pt 7 ps 0.3" if plot.get("points") else "linespoints"
    series = [f"'{csv_name}' using {plot['x']}:{y} with {style}" for y in plot["y"]]
    lines.append("plot " + ", \\\n     ".join(series))
    lines.append("pause -1")
    return "\n".join(lines) + "\n"


def _experiment_tables(cfg: ExperimentConfig) -> dict:
    """Primary output of the single-experiment kinds."""
    kind = cfg.kind
    num, sysc = cfg["numerics"], cfg["system"]
    tri = _triplet(cfg)
    if kind == "simulate-levy":
        path = sample_path(tri, num["horizon"], num["base_step"], component_seed(cfg.seed, "simulate-levy"))
        return {"levy_path": path_to_csv(path)}
    if kind not in ("ito-conjugacy", "marcus-conjugacy"):
        return {}
    T_h = num["tail_horizon"]
    path = sample_path(tri, (-T_h - 2.0, num["t_end"] + 1.0), num["base_step"], component_seed(cfg.seed, kind))
    grid = make_grid(path, 0.0, num["t_end"], num["dt"])
    if kind == "ito-conjugacy":
        if sysc["name"] in ("linear-1d", "custom"):
            system = linear_system(sysc["B0"], sysc["B"], name=sysc["name"])
        elif sysc["name"] == "scalar-hartman":
            system = scalar_example_systems(sysc["alpha"], sysc["sigma"], sysc["l"])[0]
        else:
            raise ConfigError(f"[system] name: {sysc['name']!r} is not an Ito test system")
        x0 = num["x0"][: system.dim]
        if len(x0) != system.dim:
            raise ConfigError("[numerics] x0: length does not match the system dimension")
        r = verify_conjugacy_ito(system, path, x0, grid, T_h)
        return {"ito_conjugacy_residual": r.to_csv()}
    if sysc["name"] != "affine-marcus":
        raise ConfigError(f"[system] name: {sysc['name']!r} is not a Marcus test system")
    B0 = np.array(sysc["B0"])
    system = linear_marcus_system(lambda x: x @ B0.T, lambda x: np.broadcast_to(B0, x.shape + B0.shape[-1:]),
                                  sysc["B"], sysc["offsets"], name="affine-marcus")
    x0 = num["x0"][: system.dim]
    r = verify_conjugacy_marcus(system, path, x0, grid, num["mu"], T_h)
    ou = ou_path(path, num["mu"], grid, T_h)
    return {"marcus_conjugacy_residual": r.to_csv(), "ou_process": ou.to_csv()}


def _write(directory: str, name: str, text: str, outputs: dict):
    p = os.path.join(directory, name)
    with open(p, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    outputs[name] = sha256_file(p)


def _check_record(r: CheckResult) -> dict:
    return {
        "key": r.key,
        "title": r.title,
        "passed": r.passed,
        "error": r.error,
        "elapsed_s": r.elapsed,
        "conditions": [
            {"name": c.name, "value": c.value, "op": c.op, "threshold": c.threshold, "passed": c.passed}
            for c in r.conditions
        ],
        "notes": r.notes,
    }


def run(cfg: ExperimentConfig, log=None) -> tuple[RunManifest, list]:
    """Run the configured experiment; returns the manifest and the check results.

    The manifest is written even when checks fail or raise.
    """
    t0 = time.perf_counter()
    out = cfg.output
    os.makedirs(out, exist_ok=True)
    outputs: dict = {}
    results: list = []
    manifest = RunManifest(cfg.echo(), code_version(), 0.0, [], outputs, out)
    try:
        try:
            for name, text in _experiment_tables(cfg).items():
                _write(out, f"{name}.csv", text, outputs)
        except Exception as exc:
            results.append(CheckResult(f"{cfg.kind}_experiment", "primary experiment output", error=f"{type(exc).__name__}: {exc}"))
        keys = CHECKS_BY_KIND[cfg.kind]
        workers = cfg["experiment"]["workers"]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            # map keeps submission order, so the output does not depend on scheduling
            for res in pool.map(lambda k: run_check(k, cfg), keys):
                results.append(res)
                if log is not None:
                    log(res.summary())
        for res in results:
            for tname, table in res.tables.items():
                _write(out, f"{tname}.csv", table.to_csv(), outputs)
                if table.plot:
                    _write(out, f"{tname}.gp", gnuplot_script(f"{tname}.csv", table), outputs)
        report = "".join(r.summary() + "\n" + "".join(f"    {n}\n" for n in "\n".join(r.notes).splitlines()) for r in results)
        _write(out, "report.txt", report, outputs)
    finally:
        manifest.checks = [_check_record(r) for r in results]
        manifest.wall_time = time.perf_counter() - t0
        manifest.write()
    return manifest, results
