"""Command-line driver for the staged pipeline.

Every stage reads its inputs from, and writes its artifacts under, one output
directory.  ``manifest.json`` in that directory records, per stage, the
SHA-256 of every input and output file together with the seeds, the config
section and the library versions used.  Nothing time-dependent is written, so
rerunning a stage with the same config reproduces its files byte for byte.

Exit codes: 0 success, 2 bad config, 3 missing prerequisite artifact,
4 numerical or stage failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__, kernels
from . import classifier as cl
from . import dmd as dm
from . import koopman_interp as ki
from . import local_rom as lr
from . import pod as pd
from . import synthetic_fom as sf
from .errors import (
    BifromError,
    ConfigError,
    MissingPrerequisiteError,
    NumericalError,
    ValidationError,
)
from .snapshot_store import (
    Trajectory,
    format_float,
    load_snapshot_set,
    load_trajectories,
    read_matrix_csv,
    save_snapshot_set,
    save_trajectories,
    write_matrix_csv,
)

log = logging.getLogger("bifrom")

EXIT_OK, EXIT_CONFIG, EXIT_PREREQ, EXIT_NUMERICAL = 0, 2, 3, 4
STRATEGIES = ("nearest", "dual", "oracle", "table")
MANIFEST = "manifest.json"

DEFAULTS = {
    "seed": 0,
    "pipelines": ["hopf", "pitchfork"],
    "hopf": {
        "D": 50, "omega": 2 * math.pi, "kappa": 5.0, "g_c": 90.0, "s": 100.0, "seed": None,
        "g_values": [100.0, 110.0, 120.0, 130.0, 140.0, 150.0],
        "heldout": [125.0],
        "start_g": 150.0,
        "dt": 1e-3, "steps": 10000, "record_every": 10, "cycle_steps": 3000,
    },
    "pod": {"energy": 0.9999, "rank": None},
    "dmd": {"rank": None, "horizon": 10000},
    "hankel": {"delay": 20, "rank": None},
    "pitchfork": {
        "D": 40, "kappa": 5.0, "alpha": 10.0, "beta": 1.0, "nu_star": 0.155, "w_star": 0.75,
        "seed": None, "n_nu": 10, "n_w": 11,
    },
    "cluster": {"k": 10, "k_range": [2, 15], "seed": None, "rank": 1, "energy": None},
    "rom": {"tol": 1e-12, "max_iter": 50},
    "classifier": {"hidden": list(cl.DEFAULT_HIDDEN), "epochs": 2000, "lr": 1e-3, "seed": None},
    "diagram": {"strategy": "dual", "n_nu": 40, "n_w": 41},
}


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def _merge(base, override, where="config"):
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            raise ConfigError(f"unknown key {where}.{key}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where}.{key} must be an object")
            out[key] = _merge(base[key], val, f"{where}.{key}")
        else:
            out[key] = val
    return out


def _check(cond, message):
    if not cond:
        raise ConfigError(message)


def _validate(cfg):
    _check(isinstance(cfg["seed"], int), "seed must be an integer")
    _check(set(cfg["pipelines"]) <= {"hopf", "pitchfork"} and cfg["pipelines"],
           "pipelines must be a non-empty subset of [hopf, pitchfork]")
    h = cfg["hopf"]
    _check(len(h["g_values"]) >= 2, "hopf.g_values needs at least two entries")
    _check(all(isinstance(g, (int, float)) for g in h["g_values"] + h["heldout"]),
           "hopf parameters must be numbers")
    _check(sorted(h["g_values"]) == list(h["g_values"]) and len(set(h["g_values"])) == len(h["g_values"]),
           "hopf.g_values must be strictly increasing")
    _check(h["steps"] % h["record_every"] == 0 and h["cycle_steps"] % h["record_every"] == 0,
           "hopf steps must be multiples of record_every")
    p = cfg["pod"]
    _check((p["energy"] is None) != (p["rank"] is None), "pod needs exactly one of energy / rank")
    c = cfg["cluster"]
    _check(c["k"] is not None or len(c["k_range"]) == 2, "cluster.k or a [lo, hi] k_range is required")
    _check((c["rank"] is None) != (c["energy"] is None), "cluster needs exactly one of rank / energy")
    _check(cfg["diagram"]["strategy"] in STRATEGIES, f"diagram.strategy must be one of {STRATEGIES}")
    _check(all(isinstance(n, int) and n > 0 for n in cfg["classifier"]["hidden"]),
           "classifier.hidden must list positive layer widths")
    # unset per-stage seeds inherit the top-level one
    for section in ("hopf", "pitchfork", "cluster", "classifier"):
        if cfg[section]["seed"] is None:
            cfg[section]["seed"] = cfg["seed"]
    return cfg


def load_config(path=None, seed_override=None) -> dict:
    user = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
    if seed_override is not None:
        user = {**user, "seed": seed_override}
        for section in ("hopf", "pitchfork", "cluster", "classifier"):
            user[section] = {**user.get(section, {}), "seed": None}
    try:
        return _validate(_merge(DEFAULTS, user))
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"malformed config value: {exc}") from None


# ---------------------------------------------------------------------------
# workspace and manifest
# ---------------------------------------------------------------------------

def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _files(paths):
    out = []
    for p in paths:
        p = Path(p)
        out.extend(sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p])
    return out


class Workspace:
    def __init__(self, root, cfg):
        self.root = Path(root)
        self.cfg = cfg
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def require(self, *parts, hint=""):
        p = self.path(*parts)
        if not p.exists():
            raise MissingPrerequisiteError(f"missing {p.relative_to(self.root)}" + (f"; run {hint} first" if hint else ""))
        return p

    def versions(self) -> dict:
        return {"bifrom": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                "python": f"{sys.version_info.major}.{sys.version_info.minor}",
                "kernels": kernels.active().name}

    def record(self, stage, inputs, outputs, sections, seeds=None):
        mpath = self.path(MANIFEST)
        manifest = json.loads(mpath.read_text()) if mpath.exists() else {"stages": {}}
        rel = lambda q: q.relative_to(self.root).as_posix()  # noqa: E731
        manifest["versions"] = self.versions()
        manifest["stages"][stage] = {
            "inputs": {rel(q): sha256_file(q) for q in _files(inputs)},
            "outputs": {rel(q): sha256_file(q) for q in _files(outputs)},
            "config": {s: self.cfg[s] for s in sections},
            "seeds": seeds or {},
        }
        mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _csv(header, rows) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(format_float(v) if isinstance(v, float) else str(v) for v in row))
    return "\n".join(lines) + "\n"


def _needs(ws, pipeline):
    if pipeline not in ws.cfg["pipelines"]:
        raise ConfigError(f"stage needs the {pipeline} pipeline, which the config disables")


# ---------------------------------------------------------------------------
# hopf stages
# ---------------------------------------------------------------------------

def _hopf_system(cfg):
    h = cfg["hopf"]
    return sf.make_hopf_system(h["D"], h["omega"], h["kappa"], h["g_c"], h["s"], h["seed"])


def _g_dir(g) -> str:
    return f"g_{format_float(float(g))}"


def _on_cycle(system, g):
    return system.lift([sf.hopf_cycle_radius(system, g), 0.0])


def _generate_hopf(ws):
    h = ws.cfg["hopf"]
    system = _hopf_system(ws.cfg)
    x0 = _on_cycle(system, h["start_g"])
    gen = {**system.describe(), "dt": h["dt"], "record_every": h["record_every"]}
    transients = [sf.simulate(system, g, x0, h["dt"], h["steps"], h["record_every"])
                  for g in h["g_values"]]
    cycles = [sf.simulate(system, g, _on_cycle(system, g), h["dt"], h["cycle_steps"], h["record_every"])
              for g in h["g_values"]]
    heldout = [sf.simulate(system, g, _on_cycle(system, g), h["dt"], h["cycle_steps"], h["record_every"])
               for g in h["heldout"]]
    for name, trajs in (("trajectories", transients), ("cycles", cycles), ("heldout", heldout)):
        save_trajectories(trajs, ws.path("hopf", name), seed=h["seed"], generator=gen)
    ws.record("generate-hopf", [], [ws.path("hopf", n) for n in ("trajectories", "cycles", "heldout")],
              ["hopf"], {"system": h["seed"]})


def _load_trajs(ws, name):
    ws.require("hopf", name, "trajectories.json", hint="generate")
    return load_trajectories(ws.path("hopf", name))[0]


def _load_pod(ws):
    ws.require("hopf", "pod", "pod.json", hint="pod")
    return pd.load_basis(ws.path("hopf", "pod"))


def _project(basis, traj):
    return Trajectory(traj.parameter, traj.times, (basis.modes.T @ traj.states.T).T)


def cmd_pod(ws, args):
    _needs(ws, "hopf")
    trajs = _load_trajs(ws, "trajectories")
    X = np.hstack([t.states.T for t in trajs])
    p = ws.cfg["pod"]
    basis = pd.compute_pod(X, rank=p["rank"], energy=p["energy"])
    pd.save_basis(basis, ws.path("hopf", "pod"))
    log.info("POD: N=%d retains %.8f of the energy", basis.N, basis.energy_fraction())
    ws.record("pod", [ws.path("hopf", "trajectories")], [ws.path("hopf", "pod")], ["pod"])


def cmd_dmd_fit(ws, args):
    _needs(ws, "hopf")
    trajs = _load_trajs(ws, "trajectories")
    basis = _load_pod(ws)
    rows = []
    for t in trajs:
        model = dm.fit_dmd(_project(basis, t), rank=ws.cfg["dmd"]["rank"])
        g = t.parameter.coords[0]
        dm.save_dmd(model, ws.path("hopf", "dmd", _g_dir(g)))
        rows.append([float(g), model.rank, float(model.residual),
                     float(np.abs(model.eigenvalues).max())])
    _write_text(ws.path("hopf", "dmd", "summary.csv"),
                _csv(["g", "rank", "residual", "max_abs_eigenvalue"], rows))
    ws.record("dmd-fit", [ws.path("hopf", "trajectories"), ws.path("hopf", "pod")],
              [ws.path("hopf", "dmd")], ["dmd"])


def cmd_dmd_stabilize(ws, args):
    _needs(ws, "hopf")
    trajs = _load_trajs(ws, "trajectories")
    basis = _load_pod(ws)
    horizon = ws.cfg["dmd"]["horizon"]
    rows = []
    for t in trajs:
        g = t.parameter.coords[0]
        ws.require("hopf", "dmd", _g_dir(g), "dmd.json", hint="dmd-fit")
        model = dm.load_dmd(ws.path("hopf", "dmd", _g_dir(g)))
        stable = dm.stabilize(model)
        dm.save_dmd(stable, ws.path("hopf", "dmd_stabilized", _g_dir(g)))
        x0 = basis.modes.T @ t.states[-1]
        period = max(1, round(2 * math.pi / ws.cfg["hopf"]["omega"] / t.dt))
        raw = _drift_or_inf(model, x0, horizon, period)
        rows.append([float(g), raw, _drift_or_inf(stable, x0, horizon, period)])
    _write_text(ws.path("hopf", "dmd_stabilized", "drift.csv"),
                _csv(["g", "unstabilized_drift", "stabilized_drift"], rows))
    ws.record("dmd-stabilize", [ws.path("hopf", "trajectories"), ws.path("hopf", "pod"),
                                ws.path("hopf", "dmd")], [ws.path("hopf", "dmd_stabilized")], ["dmd"])


def _drift_or_inf(model, x0, horizon, period):
    """Per-period amplitude drift of the first coefficient; inf if the rollout blows up."""
    try:
        return dm.amplitude_drift(dm.rollout(model, x0, horizon).states[:, 0], period)
    except NumericalError:
        return float("inf")


def cmd_hankel_fit(ws, args):
    _needs(ws, "hopf")
    trajs = _load_trajs(ws, "trajectories")
    basis = _load_pod(ws)
    hk = ws.cfg["hankel"]
    rows = []
    for t in trajs:
        model = dm.fit_hankel_dmd(_project(basis, t), hk["delay"], hk["rank"])
        g = t.parameter.coords[0]
        dm.save_hankel(model, ws.path("hopf", "hankel", _g_dir(g)))
        rows.append([float(g), model.delay, model.rank])
    _write_text(ws.path("hopf", "hankel", "summary.csv"), _csv(["g", "delay", "rank"], rows))
    ws.record("hankel-fit", [ws.path("hopf", "trajectories"), ws.path("hopf", "pod")],
              [ws.path("hopf", "hankel")], ["hankel"])


def relative_l2(pred, truth) -> float:
    return float(np.linalg.norm(pred - truth) / np.linalg.norm(truth))


def cmd_predict(ws, args):
    _needs(ws, "hopf")
    trajs = _load_trajs(ws, "trajectories")
    basis = _load_pod(ws)
    rows = []
    for t in trajs:
        g = t.parameter.coords[0]
        ws.require("hopf", "dmd", _g_dir(g), "dmd.json", hint="dmd-fit")
        ws.require("hopf", "hankel", _g_dir(g), "hankel.json", hint="hankel-fit")
        truth = basis.modes.T @ t.states.T
        std = dm.load_dmd(ws.path("hopf", "dmd", _g_dir(g)))
        hank = dm.load_hankel(ws.path("hopf", "hankel", _g_dir(g)))
        m = truth.shape[1]
        std_pred = dm.rollout(std, truth[:, 0], m - 1).states.T
        hank_pred = dm.rollout_hankel(hank, truth[:, :hank.window].T, m - hank.window).states.T
        write_matrix_csv(ws.path("hopf", "predict", f"{_g_dir(g)}_standard.csv"), std_pred)
        write_matrix_csv(ws.path("hopf", "predict", f"{_g_dir(g)}_hankel.csv"), hank_pred)
        e_std, e_hank = relative_l2(std_pred, truth), relative_l2(hank_pred, truth)
        rows.append([float(g), e_std, e_hank, e_std / e_hank if e_hank > 0 else float("inf")])
    _write_text(ws.path("hopf", "predict", "errors.csv"),
                _csv(["g", "standard_error", "hankel_error", "ratio"], rows))
    ws.record("predict", [ws.path("hopf", d) for d in ("trajectories", "pod", "dmd", "hankel")],
              [ws.path("hopf", "predict")], ["dmd", "hankel"])


def cmd_interp(ws, args):
    _needs(ws, "hopf")
    cycles = _load_trajs(ws, "cycles")
    heldout = _load_trajs(ws, "heldout")
    basis = _load_pod(ws)
    family = ki.fit_family([_project(basis, t) for t in cycles], basis.N, basis.identifier())
    ki.save_family(family, ws.path("hopf", "interp", "family"))
    rows = []
    for t in heldout:
        g = t.parameter.coords[0]
        res = ki.interpolate_koopman(family, g, expected_basis_id=family.basis_id)
        truth = basis.modes.T @ t.states.T
        model = ki.interpolated_model(family, g)
        pred = dm.rollout(model, truth[:, 0], truth.shape[1] - 1).states.T
        rows.append([float(g), int(res.fallback), relative_l2(pred, truth)])
    _write_text(ws.path("hopf", "interp", "heldout.csv"),
                _csv(["g", "fallback", "relative_error"], rows))
    ws.record("interp", [ws.path("hopf", d) for d in ("cycles", "heldout", "pod")],
              [ws.path("hopf", "interp")], ["hopf", "pod"])


# ---------------------------------------------------------------------------
# pitchfork stages
# ---------------------------------------------------------------------------

def _pitchfork_system(cfg):
    p = cfg["pitchfork"]
    return sf.make_pitchfork_system(p["D"], p["kappa"], p["alpha"], p["beta"], p["nu_star"],
                                    p["w_star"], p["seed"])


def _generate_pitchfork(ws):
    p = ws.cfg["pitchfork"]
    system = _pitchfork_system(ws.cfg)
    snaps = sf.pitchfork_snapshots(system, sf.parameter_grid(p["n_nu"], p["n_w"]))
    save_snapshot_set(snaps, ws.path("pitchfork", "snapshots"))
    ws.record("generate-pitchfork", [], [ws.path("pitchfork", "snapshots")], ["pitchfork"],
              {"system": p["seed"]})


def cmd_generate(ws, args):
    if "hopf" in ws.cfg["pipelines"]:
        _generate_hopf(ws)
    if "pitchfork" in ws.cfg["pipelines"]:
        _generate_pitchfork(ws)


def _load_snaps(ws):
    ws.require("pitchfork", "snapshots", "meta.json", hint="generate")
    return load_snapshot_set(ws.path("pitchfork", "snapshots"))


def cmd_cluster(ws, args):
    _needs(ws, "pitchfork")
    snaps = _load_snaps(ws)
    c = ws.cfg["cluster"]
    out = ws.path("pitchfork", "cluster")
    k = c["k"]
    if k is None:
        lo, hi = c["k_range"]
        sel = lr.select_k(snaps, range(lo, hi + 1), c["seed"])
        if sel.notice:
            log.warning(sel.notice)
        _write_text(out / "kselect.csv", _csv(["k", "energy", "silhouette"],
                                              [[k_, float(e), float(s)] for k_, e, s in
                                               zip(sel.ks, sel.energies, sel.silhouettes)]))
        k = sel.k
    model = lr.kmeans_cluster(snaps, k, c["seed"])
    bases = lr.build_cluster_bases(snaps, model, rank=c["rank"], energy=c["energy"])
    _write_text(out / "labels.csv", _csv(["row", "cluster"], enumerate(model.labels.tolist())))
    write_matrix_csv(out / "centroids.csv", model.centroids)
    _write_text(out / "cluster.json", json.dumps(
        {"k": model.k, "energy": format_float(model.energy), "iterations": model.iterations,
         "seed": c["seed"]}, indent=2, sort_keys=True) + "\n")
    for i, B in bases.items():
        pd.save_basis(B, out / "bases", stem=f"cluster_{i:02d}")
    ws.record("cluster", [ws.path("pitchfork", "snapshots")], [out], ["cluster"],
              {"kmeans": c["seed"]})


def _load_rom(ws, snaps, with_table=False):
    out = ws.require("pitchfork", "cluster", "cluster.json", hint="cluster").parent
    meta = json.loads((out / "cluster.json").read_text())
    labels = np.array([int(line.split(",")[1]) for line in
                       (out / "labels.csv").read_text().strip().splitlines()[1:]])
    if labels.size != len(snaps):
        raise ValidationError("cluster labels do not match the snapshot set")
    model = lr.ClusterModel(meta["k"], read_matrix_csv(out / "centroids.csv"), labels,
                            float(meta["energy"]), meta["seed"], [], meta["iterations"])
    bases = {i: pd.load_basis(out / "bases", stem=f"cluster_{i:02d}") for i in range(model.k)}
    table = None
    if with_table:
        ws.require("pitchfork", "error_table.csv", hint="error-table")
        table = lr.ErrorTable.from_csv(ws.path("pitchfork", "error_table.csv").read_text(), labels)
    scaler = lr.ParameterScaler.fit(snaps.parameters())
    r = ws.cfg["rom"]
    return lr.LocalRom(_pitchfork_system(ws.cfg), snaps, model, bases, scaler, table,
                       r["tol"], r["max_iter"])


def cmd_error_table(ws, args):
    _needs(ws, "pitchfork")
    snaps = _load_snaps(ws)
    rom = _load_rom(ws, snaps)
    r = ws.cfg["rom"]
    table = lr.build_error_table(snaps, rom.bases, rom.system, r["tol"], r["max_iter"],
                                 labels=rom.clusters.labels)
    _write_text(ws.path("pitchfork", "error_table.csv"), table.to_csv())
    ws.record("error-table", [ws.path("pitchfork", d) for d in ("snapshots", "cluster")],
              [ws.path("pitchfork", "error_table.csv")], ["rom"])


def cmd_train_ann(ws, args):
    _needs(ws, "pitchfork")
    snaps = _load_snaps(ws)
    rom = _load_rom(ws, snaps, with_table=True)
    c = ws.cfg["classifier"]
    dual = cl.train_dual(rom.table, rom.scaled_params, tuple(c["hidden"]), c["epochs"], c["lr"],
                         c["seed"])
    for name, net in (("upper", dual.upper), ("lower", dual.lower)):
        cl.save_mlp(net, ws.path("pitchfork", "classifier", name), lo=rom.scaler.lo, hi=rom.scaler.hi)
    ws.record("train-ann", [ws.path("pitchfork", d) for d in ("snapshots", "cluster", "error_table.csv")],
              [ws.path("pitchfork", "classifier")], ["classifier"], {"init": c["seed"]})


def _fine_grid(cfg):
    d = cfg["diagram"]
    return sf.parameter_grid(d["n_nu"], d["n_w"])


def diagram_svg(diagram, title="") -> str:
    """Scatter of the observable against the first parameter axis, one colour per tag."""
    colours = {"single": "#555555", "upper": "#c0392b", "lower": "#2471a3"}
    pts = [(float(p[0]), e.observable, e.tag)
           for p, row in zip(diagram.grid, diagram.entries) for e in row if e.converged]
    W, H, pad = 640, 420, 50
    xs = [p[0] for p in pts] or [0.0]
    ys = [p[1] for p in pts] or [0.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    x1, y1 = (x1 if x1 > x0 else x0 + 1.0), (y1 if y1 > y0 else y0 + 1.0)
    sx = lambda x: pad + (x - x0) / (x1 - x0) * (W - 2 * pad)  # noqa: E731
    sy = lambda y: H - pad - (y - y0) / (y1 - y0) * (H - 2 * pad)  # noqa: E731
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<line x1="{pad}" y1="{H - pad}" x2="{W - pad}" y2="{H - pad}" stroke="black"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{H - pad}" stroke="black"/>',
           f'<text x="{W / 2:.1f}" y="{H - 12}" text-anchor="middle" font-size="13">first parameter</text>',
           f'<text x="14" y="{H / 2:.1f}" text-anchor="middle" font-size="13" '
           f'transform="rotate(-90 14 {H / 2:.1f})">observable</text>',
           f'<text x="{W / 2:.1f}" y="24" text-anchor="middle" font-size="15">{title}</text>',
           f'<text x="{pad + 4}" y="{pad - 6}" font-size="11">'
           f'{format_float(y1)[:8]}</text>',
           f'<text x="{pad + 4}" y="{H - pad - 4}" font-size="11">{format_float(y0)[:8]}</text>']
    for i, (tag, colour) in enumerate(colours.items()):
        out.append(f'<text x="{W - pad - 60}" y="{pad + 14 * i}" font-size="11" fill="{colour}">{tag}</text>')
    for x, y, tag in pts:
        out.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="2" fill="{colours.get(tag, "black")}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_diagram(ws, args):
    _needs(ws, "pitchfork")
    strategy = args.strategy or ws.cfg["diagram"]["strategy"]
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}")
    snaps = _load_snaps(ws)
    rom = _load_rom(ws, snaps, with_table=strategy == "table")
    inputs = [ws.path("pitchfork", d) for d in ("snapshots", "cluster")]
    dual = None
    if strategy == "dual":
        ws.require("pitchfork", "classifier", "upper", "mlp.json", hint="train-ann")
        dual = cl.DualClassifier(*(cl.load_mlp(ws.path("pitchfork", "classifier", b))
                                   for b in ("upper", "lower")))
        inputs.append(ws.path("pitchfork", "classifier"))
    if strategy == "table":
        inputs.append(ws.path("pitchfork", "error_table.csv"))
    diagram = lr.reconstruct_diagram(rom, _fine_grid(ws.cfg), strategy, classifier=dual)
    stem = ws.path("pitchfork", f"diagram_{strategy}")
    _write_text(f"{stem}.csv", diagram.to_csv())
    states = np.array([e.state for row in diagram.entries for e in row]).T
    write_matrix_csv(Path(f"{stem}_states.csv"), states)
    _write_text(f"{stem}.svg", diagram_svg(diagram, f"{strategy} cluster selection"))
    ws.record(f"diagram-{strategy}", inputs,
              [Path(f"{stem}{suffix}") for suffix in (".csv", "_states.csv", ".svg")],
              ["diagram", "rom"])


def load_diagram(ws, strategy) -> lr.BifurcationDiagram:
    stem = ws.path("pitchfork", f"diagram_{strategy}")
    lines = Path(f"{stem}.csv").read_text().strip().splitlines()[1:]
    states = read_matrix_csv(Path(f"{stem}_states.csv")).T
    grid = _fine_grid(ws.cfg)
    if len(lines) != states.shape[0]:
        raise ValidationError(f"diagram_{strategy} files disagree on the entry count")
    rows = [[] for _ in range(len(grid))]
    for line, state in zip(lines, states):
        point, _, _, tag, obs, cluster, ok = line.split(",")
        rows[int(point)].append(lr.DiagramEntry(tag, float(obs), int(cluster), ok == "1", state))
    return lr.BifurcationDiagram(grid, rows, strategy)


def cmd_evaluate(ws, args):
    _needs(ws, "pitchfork")
    system = _pitchfork_system(ws.cfg)
    present = [s for s in STRATEGIES if ws.path("pitchfork", f"diagram_{s}.csv").exists()]
    if not present:
        raise MissingPrerequisiteError("no diagram found; run diagram first")
    rows = []
    for s in present:
        d = load_diagram(ws, s)
        hit, total = lr.branch_coverage(d, system)
        rows.append([s, lr.mean_relative_error(d, system), hit, total, d.missing()])
        log.info("%s: mean relative error %.4g, both branches at %d of %d points", s, rows[-1][1], hit, total)
    _write_text(ws.path("pitchfork", "evaluation.csv"),
                _csv(["strategy", "mean_relative_error", "covered", "two_solution_points",
                      "failed_solves"], rows))
    ws.record("evaluate", [Path(f"{ws.path('pitchfork', f'diagram_{s}')}{x}") for s in present
                           for x in (".csv", "_states.csv")],
              [ws.path("pitchfork", "evaluation.csv")], ["diagram"])


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

COMMANDS = {
    "generate": cmd_generate,
    "pod": cmd_pod,
    "dmd-fit": cmd_dmd_fit,
    "dmd-stabilize": cmd_dmd_stabilize,
    "hankel-fit": cmd_hankel_fit,
    "predict": cmd_predict,
    "interp": cmd_interp,
    "cluster": cmd_cluster,
    "error-table": cmd_error_table,
    "train-ann": cmd_train_ann,
    "diagram": cmd_diagram,
    "evaluate": cmd_evaluate,
}

HOPF_STAGES = ("pod", "dmd-fit", "dmd-stabilize", "hankel-fit", "predict", "interp")
PITCHFORK_STAGES = ("cluster", "error-table", "train-ann", "diagram", "evaluate")


def cmd_run(ws, args):
    """Every stage in order; ``diagram`` runs once per strategy named in --strategy or config."""
    cmd_generate(ws, args)
    if "hopf" in ws.cfg["pipelines"]:
        for name in HOPF_STAGES:
            COMMANDS[name](ws, args)
    if "pitchfork" in ws.cfg["pipelines"]:
        for name in PITCHFORK_STAGES:
            COMMANDS[name](ws, args)


COMMANDS["run"] = cmd_run


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bifrom", description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file (defaults apply to missing keys)")
        p.add_argument("--out", default="bifrom-out", help="output directory")
        p.add_argument("--strategy", choices=STRATEGIES, help="cluster-selection strategy for diagram")
        p.add_argument("--seed-override", type=int, help="replace every seed in the config")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed_override)
        ws = Workspace(args.out, cfg)
        COMMANDS[args.command](ws, args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except MissingPrerequisiteError as exc:
        log.error("missing prerequisite: %s", exc)
        return EXIT_PREREQ
    except (BifromError, OSError) as exc:
        log.error("%s failed: %s", args.command, exc)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
