"""Command-line pipeline: simulate -> em -> localize -> backproject -> evaluate, plus ``lut build``.

Configuration is one JSON file; every key is optional and defaults to the
values in :data:`DEFAULTS`. ``--set section.key=VALUE`` (VALUE parsed as
JSON, falling back to a bare string) overrides file values, and the named
flags override both.

Each command writes ``<command>.manifest.json`` next to its outputs. The
manifest records the resolved configuration, its SHA-256, the master and
derived seeds, and SHA-256 digests of every input and output. Passing a
manifest back through ``--config`` replays the command with the recorded
configuration and inputs, then checks the new outputs against the recorded
digests.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, analysis, physics
from .energy_em import EmConfig, _grid, run_em
from .forward import NoiseScales, build_direction_lut, lut_cache_dir
from .geometry import DetectorArray, SphereModel
from .localize import GibbsConfig, Hyperparams, run_gibbs
from .simulate import EventFileError, SimConfig, SourceSpec, generate_events, read_events, write_events

log = logging.getLogger("comptonimager")

DEFAULTS = {
    "seed": 0,
    "output_dir": ".",
    "detector": "bars-4x7",  # preset name or path to a layout JSON
    "attenuation": None,  # CSV path; None uses the bundled LYSO table
    "radius": 300.0,
    "noise": {"sigma_xy": 0.43, "sigma_z": 0.72, "sigma_E": 0.029},
    "simulate": {
        "n_events": 10,
        "sources": [{"lon": 0.0, "lat": 0.0, "energy": 0.6617, "intensity": 1.0}],
        "outlier_fraction": 0.0,
        "add_noise": True,
    },
    "truths": None,  # list of {"lon", "lat"} or {"direction"}; None takes simulate.sources
    "em": {"e0_grid": [0.5, 1.0, 0.02], "sigma_grid": [1e-4, 1e-1, 0.002], "max_iter": 10, "n_nodes": 400},
    "gibbs": {"n_iter": 10000, "burn_in": 2000, "n_sources": 1, "E0": 0.6617, "window": 50,
              "check_every": 100},
    "hyper": {"alpha": None, "kappa": 80.0, "a": 400.0, "jacobian": False},
    "lut": {"energy": 0.6617, "energy_tolerance": 0.02, "n_nodes": 2563, "n_samples": 20000,
            "grid_size": 64, "seed": 0},
    "backproject": {"n_pixels": 10242, "width": 0.05, "min_separation_deg": 10.0},
    "evaluate": {"alphas": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]},
}

# keys whose default is None accept any JSON value; these are checked when used
_FREE = {("attenuation",), ("truths",), ("hyper", "alpha")}


class ConfigError(Exception):
    """Invalid configuration. Exit code 2."""


class DataError(Exception):
    """Invalid or missing input data. Exit code 3."""


# ---------------------------------------------------------------------------
# configuration


def _key_line(text: str | None, path: tuple) -> int | None:
    """Line of the innermost key of ``path`` in the config text, scanning keys in order."""
    if not text:
        return None
    lines = text.splitlines()
    start, found = 0, None
    for key in path:
        if isinstance(key, int):
            continue
        needle = json.dumps(key) + ":"
        hit = next((i for i in range(start, len(lines)) if needle in lines[i].replace(" ", "")), None)
        if hit is None:
            return found
        found = start = hit
    return None if found is None else found + 1


class Config:
    def __init__(self, data: dict, text: str | None = None, source: str = "<defaults>"):
        self.data = data
        self.text = text
        self.source = source

    def error(self, path: tuple, message: str) -> ConfigError:
        where = self.source
        line = _key_line(self.text, path)
        if line is not None:
            where += f", line {line}"
        dotted = ".".join(str(p) for p in path)
        return ConfigError(f"{where}: {dotted}: {message}")

    def __getitem__(self, key):
        return self.data[key]

    def digest(self) -> str:
        return _sha256_bytes(_canonical(self.data).encode())


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(out.get(k), dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _check_schema(cfg: Config, node, default, path=()):
    if path in _FREE:
        return
    if isinstance(default, dict):
        if not isinstance(node, dict):
            raise cfg.error(path, "expected an object")
        for k, v in node.items():
            if k not in default:
                raise cfg.error(path + (k,), "unknown key")
            _check_schema(cfg, v, default[k], path + (k,))
    elif isinstance(default, bool):
        if not isinstance(node, bool):
            raise cfg.error(path, "expected true or false")
    elif isinstance(default, (int, float)):
        if isinstance(node, bool) or not isinstance(node, (int, float)):
            raise cfg.error(path, "expected a number")
        if isinstance(default, int) and not isinstance(node, int):
            raise cfg.error(path, "expected an integer")
    elif isinstance(default, str):
        if not isinstance(node, str):
            raise cfg.error(path, "expected a string")
    elif isinstance(default, list):
        if not isinstance(node, list):
            raise cfg.error(path, "expected a list")


def _parse_set(item: str):
    if "=" not in item:
        raise ConfigError(f"--set {item!r}: expected KEY=VALUE")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node: dict = {}
    cur = node
    parts = key.split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return node


def load_config(path: str | None, sets=(), flags: dict | None = None, command: str | None = None):
    """Resolve defaults < file < ``--set`` < flags. Returns (Config, manifest or None)."""
    text, source, file_data, manifest = None, "<defaults>", {}, None
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {path} does not exist")
        text = p.read_text()
        source = str(path)
        try:
            file_data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}, line {exc.lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(file_data, dict):
            raise ConfigError(f"{source}, line 1: top level must be an object")
        if "command" in file_data and "config" in file_data:
            manifest = file_data
            if command is not None and manifest["command"] != command:
                raise ConfigError(f"{source}: manifest is for {manifest['command']!r}, not {command!r}")
            file_data = manifest["config"]
            # replay keeps the recorded output directory unless overridden
            file_data = dict(file_data, output_dir=manifest.get("output_dir", "."))
            text = None
    data = _merge(DEFAULTS, file_data)
    _check_schema(Config(data, text, source), data, DEFAULTS)
    overrides = list(sets) + [f"{k}={json.dumps(v)}" for k, v in (flags or {}).items() if v is not None]
    for item in overrides:
        data = _merge(data, _parse_set(item))
        _check_schema(Config(data, None, f"override {item!r}"), data, DEFAULTS)
    return Config(data, text, source), manifest


# ---------------------------------------------------------------------------
# seeds, hashing, manifests


def derive_seed(master: int, label: str) -> int:
    """63-bit seed for a labelled sub-task, from SHA-256 of ``"<master>/<label>"``."""
    digest = hashlib.sha256(f"{int(master)}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def _sha256_bytes(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hashed_config(cfg: Config) -> dict:
    # the output directory does not influence results, so it stays out of the hash
    return {k: v for k, v in cfg.data.items() if k != "output_dir"}


def write_manifest(out_dir: Path, command: str, cfg: Config, derived_seed, inputs: dict, outputs: list,
                   counts: dict | None = None, options: dict | None = None) -> Path:
    resolved = _hashed_config(cfg)
    manifest = {
        "command": command,
        "version": __version__,
        "config": resolved,
        "config_sha256": _sha256_bytes(_canonical(resolved).encode()),
        "seed": cfg["seed"],
        "derived_seed": derived_seed,
        "inputs": {name: {"path": str(Path(p).resolve()), "sha256": sha256_file(p)}
                   for name, p in inputs.items()},
        "outputs": {Path(p).name: sha256_file(p) for p in outputs},
        "output_dir": str(out_dir),
    }
    if counts:
        manifest["counts"] = counts
    if options:
        manifest["options"] = options
    path = out_dir / f"{command.replace(' ', '_')}.manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _recorded_input(name, rec) -> str:
    path = Path(rec["path"])
    if not path.is_file():
        raise DataError(f"manifest input {name} missing: {path}")
    if sha256_file(path) != rec["sha256"]:
        raise DataError(f"manifest input {name} changed since the recorded run: {path}")
    return str(path)


def _replay_inputs(manifest, names, args):
    """Fill input paths and options not given on the command line from a manifest."""
    if manifest is None:
        return
    inputs = manifest.get("inputs", {})
    for name in names:
        if name in inputs and not getattr(args, name, None):
            setattr(args, name, _recorded_input(name, inputs[name]))
    if "summaries" in names and not getattr(args, "summaries", None):
        args.summaries = [_recorded_input(k, v) for k, v in sorted(inputs.items()) if k.startswith("summary_")]
    for name, value in manifest.get("options", {}).items():
        if not getattr(args, name, None):
            setattr(args, name, value)


def _verify_replay(manifest, manifest_path: Path) -> None:
    if manifest is None:
        return
    new = json.loads(manifest_path.read_text())["outputs"]
    bad = sorted(k for k, v in manifest["outputs"].items() if new.get(k) != v)
    if bad:
        raise DataError(f"replay outputs differ from the manifest: {', '.join(bad)}")
    log.info("replay reproduced %d output(s) byte-for-byte", len(new))


# ---------------------------------------------------------------------------
# domain objects from config


def _detector(cfg: Config) -> DetectorArray:
    spec = cfg["detector"]
    try:
        if Path(spec).suffix == ".json":
            if not Path(spec).is_file():
                raise cfg.error(("detector",), f"layout file {spec} does not exist")
            return DetectorArray.from_json(Path(spec).read_text())
        return DetectorArray.from_preset(spec)
    except ValueError as exc:
        raise cfg.error(("detector",), str(exc)) from None


def _table(cfg: Config) -> physics.AttenuationTable:
    path = cfg["attenuation"]
    if path is None:
        return physics.load_lyso()
    if not isinstance(path, str) or not Path(path).is_file():
        raise cfg.error(("attenuation",), f"attenuation file {path} does not exist")
    try:
        return physics.AttenuationTable.from_csv(path)
    except ValueError as exc:
        raise cfg.error(("attenuation",), str(exc)) from None


def _noise(cfg: Config) -> NoiseScales:
    try:
        return NoiseScales(**cfg["noise"])
    except (TypeError, ValueError) as exc:
        raise cfg.error(("noise",), str(exc)) from None


def _direction(cfg: Config, rec, path) -> np.ndarray:
    if not isinstance(rec, dict):
        raise cfg.error(path, "expected an object with lon/lat or direction")
    try:
        if "direction" in rec:
            return np.asarray(SourceSpec(tuple(rec["direction"])).direction)
        return np.asarray(SourceSpec.from_lonlat(rec["lon"], rec["lat"]).direction)
    except (KeyError, TypeError, ValueError) as exc:
        raise cfg.error(path, f"bad direction ({exc})") from None


def _sources(cfg: Config) -> list[SourceSpec]:
    out = []
    for i, rec in enumerate(cfg["simulate"]["sources"]):
        path = ("simulate", "sources", i)
        d = _direction(cfg, rec, path)
        extra = set(rec) - {"lon", "lat", "direction", "energy", "intensity"}
        if extra:
            raise cfg.error(path, f"unknown key {sorted(extra)[0]!r}")
        try:
            out.append(SourceSpec(tuple(d), float(rec.get("energy", 0.6617)), float(rec.get("intensity", 1.0))))
        except (TypeError, ValueError) as exc:
            raise cfg.error(path, str(exc)) from None
    return out


def _truths(cfg: Config) -> np.ndarray | None:
    recs = cfg["truths"]
    key = ("truths",)
    if recs is None:
        recs, key = cfg["simulate"]["sources"], ("simulate", "sources")
    if not isinstance(recs, list):
        raise cfg.error(key, "expected a list")
    return np.array([_direction(cfg, r, key + (i,)) for i, r in enumerate(recs)]) if recs else None


def _em_config(cfg: Config) -> EmConfig:
    e = cfg["em"]
    try:
        return EmConfig(_grid(*e["e0_grid"]), _grid(*e["sigma_grid"]), int(e["max_iter"]), int(e["n_nodes"]))
    except (TypeError, ValueError) as exc:
        raise cfg.error(("em",), str(exc)) from None


def _hyper(cfg: Config, K: int) -> Hyperparams:
    h = cfg["hyper"]
    try:
        kw = dict(kappa=float(h["kappa"]), a=float(h["a"]), jacobian=bool(h["jacobian"]))
        if h["alpha"] is None:
            return Hyperparams.for_sources(K, **kw)
        hp = Hyperparams(alpha=tuple(h["alpha"]), **kw)
    except (TypeError, ValueError) as exc:
        raise cfg.error(("hyper",), str(exc)) from None
    if hp.n_sources != K:
        raise cfg.error(("hyper", "alpha"), f"needs {K + 1} entries for {K} source(s)")
    return hp


def _lut(cfg: Config, array, table, E0: float):
    c = cfg["lut"]
    energy = float(c["energy"]) if abs(E0 - float(c["energy"])) <= float(c["energy_tolerance"]) else E0
    if energy != float(c["energy"]):
        log.warning("E0 = %.4f is outside the LUT tolerance; building a LUT at that energy", E0)
    try:
        return build_direction_lut(array, energy, SphereModel(cfg["radius"]), n_nodes=int(c["n_nodes"]),
                                   n_samples=int(c["n_samples"]), table=table, seed=int(c["seed"]),
                                   grid_size=int(c["grid_size"]))
    except ValueError as exc:
        raise cfg.error(("lut",), str(exc)) from None


def _out_dir(cfg: Config) -> Path:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_events(path) -> list:
    if path is None:
        raise DataError("an event file is required (--events)")
    if not Path(path).is_file():
        raise DataError(f"event file {path} does not exist")
    try:
        return read_events(path)
    except EventFileError as exc:
        raise DataError(f"{path}: {exc}") from None


def _read_json(path, what: str):
    if not Path(path).is_file():
        raise DataError(f"{what} {path} does not exist")
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}, line {exc.lineno}: invalid JSON ({exc.msg})") from None


def _em_inputs(path, n: int):
    em = _read_json(path, "EM output")
    try:
        kinds = list(em["classifications"])
        E0 = float(em["E0"])
    except (KeyError, TypeError, ValueError):
        raise DataError(f"{path}: EM output needs E0 and classifications") from None
    if len(kinds) != n:
        raise DataError(f"{path}: {len(kinds)} classifications for {n} events")
    if any(k not in ("A", "CS") for k in kinds):
        raise DataError(f"{path}: classifications must be 'A' or 'CS'")
    return kinds, E0


def _truth_kinds(events, path):
    missing = [e.id for e in events if e.truth is None]
    if missing:
        raise DataError(f"{path}: event {missing[0]} has no truth record; pass --em instead")
    return [e.truth.second_kind for e in events]


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args, cfg: Config, manifest) -> Path:
    array, table, noise = _detector(cfg), _table(cfg), _noise(cfg)
    s = cfg["simulate"]
    seed = derive_seed(cfg["seed"], "simulate")
    try:
        sim = SimConfig(_sources(cfg), int(s["n_events"]), seed, float(s["outlier_fraction"]), noise,
                        bool(s["add_noise"]), float(cfg["radius"]))
    except ValueError as exc:
        raise cfg.error(("simulate",), str(exc)) from None
    events = generate_events(array, table, sim)
    out = _out_dir(cfg)
    ev_path = out / "events.jsonl"
    write_events(ev_path, events)
    truth_path = out / "truth.json"
    truth = {"sources": [{"direction": list(src.direction), "energy": src.energy, "intensity": src.intensity}
                         for src in sim.sources],
             "outlier_fraction": sim.outlier_fraction}
    truth_path.write_text(json.dumps(truth, indent=2) + "\n")
    labels = [e.source for e in events]
    counts = {"events": len(events), "outliers": sum(lab == "outlier" for lab in labels),
              "absorb": sum(e.truth.second_kind == "A" for e in events)}
    return write_manifest(out, "simulate", cfg, seed, {}, [ev_path, truth_path], counts)


def cmd_em(args, cfg: Config, manifest) -> Path:
    _replay_inputs(manifest, ["events"], args)
    events = _read_events(args.events)
    if not events:
        raise DataError(f"{args.events}: event file is empty")
    if len(events) < 2:
        raise DataError(f"{args.events}: EM needs at least two events")
    em_config = _em_config(cfg)
    try:
        res = run_em(events, em_config)
    except ValueError as exc:
        raise DataError(f"{args.events}: {exc}") from None
    out = _out_dir(cfg)
    path = out / "em.json"
    path.write_text(json.dumps(res.to_json()) + "\n")
    log.info("EM: E0 = %.4f MeV, sigma = %.4f MeV, p_A = %.4f after %d iteration(s)",
             res.params.E0, res.params.sigma, res.params.p_A, res.iterations)
    return write_manifest(out, "em", cfg, None, {"events": args.events}, [path])


def _write_chain(path: Path, sweeps, samples):
    with open(path, "w") as fh:
        fh.write("sweep,ux,uy,uz\n")
        for t, u in zip(sweeps, samples):
            fh.write(f"{int(t)},{_fmt(u[0])},{_fmt(u[1])},{_fmt(u[2])}\n")


def _write_trace(path: Path, header, sweeps, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for t, r in zip(sweeps, rows):
            fh.write(f"{int(t)}," + ",".join(_fmt(v) for v in r) + "\n")


def cmd_localize(args, cfg: Config, manifest) -> Path:
    _replay_inputs(manifest, ["events", "em"], args)
    events = _read_events(args.events)
    if not events:
        raise DataError(f"{args.events}: event file is empty")
    g = cfg["gibbs"]
    if args.em:
        kinds, E0 = _em_inputs(args.em, len(events))
    elif args.truth_kinds:
        kinds, E0 = _truth_kinds(events, args.events), float(g["E0"])
    else:
        raise DataError("second-interaction kinds are missing: pass --em em.json or --truth-kinds")
    K = int(g["n_sources"])
    array, table = _detector(cfg), _table(cfg)
    seed = derive_seed(cfg["seed"], "localize")
    try:
        gc = GibbsConfig(n_iter=int(g["n_iter"]), burn_in=int(g["burn_in"]), seed=seed, E0=E0, kinds=tuple(kinds),
                         n_sources=K, window=int(g["window"]), check_every=int(g["check_every"]),
                         radius=float(cfg["radius"]))
    except ValueError as exc:
        raise cfg.error(("gibbs",), str(exc)) from None
    hyper = _hyper(cfg, K)
    truths = _truths(cfg)
    if truths is not None and len(truths) != K:
        truths = None
        log.warning("truth count does not match n_sources; the summary omits truths")
    lut = _lut(cfg, array, table, E0)
    b = cfg["backproject"]
    grid = analysis.SphereGrid(int(b["n_pixels"]))
    try:
        res = run_gibbs(events, gc, array, table, lut, hyper=hyper, grid=grid,
                        progress=lambda t, n: log.info("sweep %d / %d", t, n))
    except ValueError as exc:
        raise DataError(str(exc)) from None

    chains = [res.sources[:, k] for k in range(K)]
    if K == 2:
        try:
            chains = list(analysis.deentangle(chains[0], chains[1]))
        except analysis.DegenerateSeparationError as exc:
            log.warning("de-entangling skipped: %s", exc)
    means = np.array([analysis.spherical_mean(c) for c in chains])
    bp = analysis.back_project(events, E0, SphereModel(cfg["radius"]), grid, float(b["width"]))
    modes = analysis.bp_modes(bp.image, K, grid, float(b["min_separation_deg"]))

    out = _out_dir(cfg)
    outputs = []
    for k, c in enumerate(chains, start=1):
        p = out / f"chain_{k}.csv"
        _write_chain(p, res.sweeps, c)
        outputs.append(p)
    sig_path = out / "sigma_trace.csv"
    _write_trace(sig_path, ["sweep", "sigma_xy", "sigma_z", "sigma_E"], res.sweeps, res.sigmas)
    w_path = out / "weight_trace.csv"
    _write_trace(w_path, ["sweep"] + [f"w{k}" for k in range(1, K + 1)], res.sweeps, res.weights)
    diag = res.diagnostics()
    diag.update(sigma_traces=sig_path.name, weight_traces=w_path.name,
                membership=res.membership.tolist(), kinds=list(kinds), E0=E0)
    diag_path = out / "diagnostics.json"
    diag_path.write_text(json.dumps(diag, indent=2) + "\n")
    summary = analysis.RunSummary(means, float(cfg["radius"]), truths, modes).to_json()
    summary.update(n_events=len(events), E0=E0, n_keep=len(res.sources))
    sum_path = out / "summary.json"
    sum_path.write_text(json.dumps(summary, indent=2) + "\n")
    outputs += [sig_path, w_path, diag_path, sum_path]
    inputs = {"events": args.events}
    if args.em:
        inputs["em"] = args.em
    options = {"truth_kinds": True} if not args.em else None
    return write_manifest(out, "localize", cfg, seed, inputs, outputs, options=options)


def cmd_backproject(args, cfg: Config, manifest) -> Path:
    _replay_inputs(manifest, ["events", "em"], args)
    events = _read_events(args.events)
    if not events:
        raise DataError(f"{args.events}: event file is empty")
    E0 = _em_inputs(args.em, len(events))[1] if args.em else float(cfg["gibbs"]["E0"])
    b = cfg["backproject"]
    K = int(cfg["gibbs"]["n_sources"])
    grid = analysis.SphereGrid(int(b["n_pixels"]))
    bp = analysis.back_project(events, E0, SphereModel(cfg["radius"]), grid, float(b["width"]))
    modes = analysis.bp_modes(bp.image, K, grid, float(b["min_separation_deg"]))
    out = _out_dir(cfg)
    img = out / "bp.csv"
    analysis.write_bp_csv(img, bp)
    modes_path = out / "bp_modes.json"
    modes_path.write_text(json.dumps({"E0": E0, "modes": modes.tolist(), "n_skipped": bp.n_skipped}) + "\n")
    inputs = {"events": args.events}
    if args.em:
        inputs["em"] = args.em
    return write_manifest(out, "backproject", cfg, None, inputs, [img, modes_path])


def cmd_evaluate(args, cfg: Config, manifest) -> Path:
    _replay_inputs(manifest, ["summaries"], args)
    if not args.summaries:
        raise DataError("no summaries given")
    summaries, chains = [], []
    for p in args.summaries:
        summaries.append(_read_json(p, "summary"))
        c = Path(p).with_name("chain_1.csv")
        chains.append(np.loadtxt(c, delimiter=",", skiprows=1)[:, 1:4] if c.is_file() else None)
    use_chains = chains if all(c is not None for c in chains) and len(chains) >= 10 else None
    try:
        report = analysis.evaluate(summaries, np.asarray(cfg["evaluate"]["alphas"], dtype=float), use_chains)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    out = _out_dir(cfg)
    path = out / "report.json"
    path.write_text(json.dumps(report, indent=2) + "\n")
    inputs = {f"summary_{i:04d}": p for i, p in enumerate(args.summaries)}
    return write_manifest(out, "evaluate", cfg, None, inputs, [path])


def cmd_lut_build(args, cfg: Config, manifest) -> Path:
    array, table = _detector(cfg), _table(cfg)
    lut = _lut(cfg, array, table, float(cfg["lut"]["energy"]))
    path = lut_cache_dir() / f"lut_{lut.key}.npz"
    out = _out_dir(cfg)
    info = out / "lut.json"
    info.write_text(json.dumps({"key": lut.key, "path": str(path), "E0": lut.E0,
                                "n_nodes": int(len(lut.nodes))}, indent=2) + "\n")
    print(path)
    return write_manifest(out, "lut build", cfg, None, {}, [info])


COMMANDS = {"simulate": cmd_simulate, "em": cmd_em, "localize": cmd_localize,
            "backproject": cmd_backproject, "evaluate": cmd_evaluate, "lut build": cmd_lut_build}


# ---------------------------------------------------------------------------
# entry point


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file, or a manifest to replay")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. gibbs.n_iter=2000")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, help="cap on numba worker threads")
    p.add_argument("-q", "--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="compton-imager", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate noisy events with truth records")
    _common(p)
    p.add_argument("--n-events", type=int)

    p = sub.add_parser("em", help="estimate E0, sigma_E and interaction kinds")
    _common(p)
    p.add_argument("--events")

    p = sub.add_parser("localize", help="Metropolis-within-Gibbs source localization")
    _common(p)
    p.add_argument("--events")
    p.add_argument("--em", help="EM output supplying E0 and classifications")
    p.add_argument("--truth-kinds", action="store_true", help="take kinds from the event truth records")
    p.add_argument("--n-sources", type=int)
    p.add_argument("--n-iter", type=int)
    p.add_argument("--burn-in", type=int)

    p = sub.add_parser("backproject", help="back-projection image and its modes")
    _common(p)
    p.add_argument("--events")
    p.add_argument("--em")
    p.add_argument("--n-sources", type=int)

    p = sub.add_parser("evaluate", help="errors, box statistics, coverage and BP comparison")
    _common(p)
    p.add_argument("summaries", nargs="*")

    p = sub.add_parser("lut", help="direction-prior lookup table")
    lsub = p.add_subparsers(dest="lut_command", required=True)
    q = lsub.add_parser("build", help="build (or load) the cached LUT")
    _common(q)
    return parser


def _flags(args) -> dict:
    return {
        "seed": args.seed,
        "output_dir": args.out,
        "simulate.n_events": getattr(args, "n_events", None),
        "gibbs.n_sources": getattr(args, "n_sources", None),
        "gibbs.n_iter": getattr(args, "n_iter", None),
        "gibbs.burn_in": getattr(args, "burn_in", None),
    }


def _set_threads(n):
    if n is None:
        return
    if n < 1:
        raise ConfigError("--threads must be at least 1")
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    command = "lut build" if args.command == "lut" else args.command
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    for name in ("events", "em", "truth_kinds", "summaries"):
        if not hasattr(args, name):
            setattr(args, name, None)
    try:
        _set_threads(args.threads)
        cfg, manifest = load_config(args.config, args.set, _flags(args), command)
        mpath = COMMANDS[command](args, cfg, manifest)
        _verify_replay(manifest, mpath)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    log.info("wrote %s", mpath)
    return 0


if __name__ == "__main__":
    sys.exit(main())
