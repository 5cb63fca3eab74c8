"""Experiment catalog, run records and plain-text reports.

A run is described by one JSON document::

    {"experiment": "linear-symmetry", "seeds": [0, 1, 2],
     "output_dir": "runs/linear", "params": {"epochs": 300}}

``params`` overrides the per-experiment defaults in ``DEFAULTS``.  Relative
``output_dir`` values are resolved against the config file's directory.
Every experiment returns, per seed, metric tables (lists of flat rows) and
text artifacts; the runner writes them, sorted by seed, under the output
directory and lists every file in the run record's manifest.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .constraints import c1_score, oa_precision, offdiag_score
from .datagen import (GeneratorHandle, Phi, ToyFactorSpec, banded_phis, is_signed_permutation,
                      make_c1c2_generator, make_entangled_control, make_reparameterized,
                      permute_axes, random_orthonormal, random_rotation, render_labels,
                      sample_linear_lvm)
from .exceptions import CorruptRun, InvalidInput, NumericalFailure, SeamVAEError
from .geometry import (ReparameterizedPrior, StandardNormalPrior, axis_pairing,
                       axis_traversal_image, max_node_distance, trace_seam)
from .identifiability import align_loadings, compare_seam_decompositions
from .linalg import svd
from .metrics import aas, mig, mutual_info_matrix
from .models import (BetaSchedule, LvmConfig, ppca_closed_form, sample_covariance,
                     train_gaussian_vae)
from .nets import NetSpec

RECORD_NAME = "runrecord.json"
SUMMARY_NAME = "summary.md"

_TOY = {"side": 16, "x_levels": 8, "y_levels": 8, "scale_levels": 4,
        "n_samples": 4000, "data_seed": 0}

DEFAULTS = {
    "linear-symmetry": {
        "m": 8, "d": 3, "n": 20000, "sigma2": 0.5, "scales": [3.0, 2.0, 1.2],
        "cov_modes": ["diagonal", "full"], "epochs": 400, "lr": 0.02, "momentum": 0.9,
        "batch_size": 2000, "n_mc": 4, "log_every": 10,
    },
    "beta-sweep": dict(_TOY, **{
        "d": 6, "hidden": [64], "activation": "tanh", "sigma2": 0.25,
        "betas": [0.25, 0.5, 1.0, 2.0, 4.0], "cov_modes": ["diagonal", "full"],
        "epochs": 400, "lr": 0.0025, "momentum": 0.9, "batch_size": 100, "n_mc": 1,
        "mi_bins": 20, "n_eval": 300,
    }),
    "seam-geometry": {
        "m": 5, "d": 3, "spacing": 2.0, "t_span": [-1.0, 1.0], "step": 0.01,
        "n_starts": 2, "start_scale": 0.5,
    },
    "beta-anneal": dict(_TOY, **{
        "d": 6, "hidden": [64], "activation": "tanh", "sigma2": 0.25,
        "beta_high": 1.0, "beta_low": 0.001, "epochs": 400, "lr": 0.0025,
        "momentum": 0.9, "batch_size": 100, "mi_bins": 20,
    }),
    "identifiability": {
        "m": 5, "d": 3, "spacing": 2.0, "n_probes": 10, "probe_scale": 0.5,
        "psi_cubic": [0.02, 0.1],
    },
}
EXPERIMENTS = tuple(DEFAULTS)


def _canonical(doc):
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def _sha(text):
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class ExperimentConfig:
    experiment: str
    seeds: list
    output_dir: str
    params: dict = field(default_factory=dict)
    workers: int = 1

    def __post_init__(self):
        if self.experiment not in DEFAULTS:
            raise InvalidInput(f"unknown experiment {self.experiment!r}; "
                               f"choose one of {', '.join(EXPERIMENTS)}")
        if not isinstance(self.seeds, (list, tuple)) or not self.seeds:
            raise InvalidInput("seeds must be a non-empty list")
        if not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in self.seeds):
            raise InvalidInput("seeds must be non-negative integers")
        if len(set(self.seeds)) != len(self.seeds):
            raise InvalidInput("seeds must be distinct")
        if not isinstance(self.params, dict):
            raise InvalidInput("params must be an object")
        unknown = set(self.params) - set(DEFAULTS[self.experiment])
        if unknown:
            raise InvalidInput(f"unknown params for {self.experiment}: {sorted(unknown)}")
        if int(self.workers) < 1:
            raise InvalidInput("workers must be >= 1")
        self.seeds = sorted(int(s) for s in self.seeds)

    @property
    def resolved_params(self):
        out = copy.deepcopy(DEFAULTS[self.experiment])
        out.update(copy.deepcopy(self.params))
        return out

    def to_dict(self):
        return {"experiment": self.experiment, "seeds": list(self.seeds),
                "output_dir": self.output_dir, "params": self.params, "workers": self.workers}

    def config_hash(self):
        # output_dir and workers do not change results
        return _sha(_canonical({"experiment": self.experiment, "seeds": self.seeds,
                                "params": self.resolved_params}))

    @classmethod
    def from_dict(cls, doc, base_dir=None):
        if not isinstance(doc, dict):
            raise InvalidInput("config must be a JSON object")
        missing = {"experiment", "seeds", "output_dir"} - set(doc)
        if missing:
            raise InvalidInput(f"config is missing {sorted(missing)}")
        extra = set(doc) - {"experiment", "seeds", "output_dir", "params", "workers"}
        if extra:
            raise InvalidInput(f"unknown config keys {sorted(extra)}")
        out = str(doc["output_dir"])
        if base_dir is not None and not os.path.isabs(out):
            out = os.path.join(base_dir, out)
        return cls(doc["experiment"], list(doc["seeds"]), out, dict(doc.get("params", {})),
                   int(doc.get("workers", 1)))


def load_config(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise InvalidInput(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise InvalidInput(f"config file {path} is not valid JSON: {exc}") from None
    return ExperimentConfig.from_dict(doc, base_dir=str(path.parent))


@dataclass
class RunRecord:
    config_hash: str
    experiment: str
    seeds: list
    params: dict
    tables: dict  # name -> list of rows, rows sorted by seed
    aggregates: dict
    manifest: list  # paths relative to the run directory

    def to_dict(self):
        return {"config_hash": self.config_hash, "experiment": self.experiment,
                "seeds": self.seeds, "params": self.params, "tables": self.tables,
                "aggregates": self.aggregates, "manifest": self.manifest}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self):
        return _sha(_canonical(self.to_dict()))

    @classmethod
    def from_dict(cls, doc):
        return cls(**{k: doc[k] for k in ("config_hash", "experiment", "seeds", "params",
                                          "tables", "aggregates", "manifest")})


# -- shared helpers -------------------------------------------------------------------

def _toy_data(p):
    spec = ToyFactorSpec(side=p["side"], x_levels=p["x_levels"], y_levels=p["y_levels"],
                         scale_levels=p["scale_levels"])
    rng = np.random.default_rng(p["data_seed"])
    labels = np.column_stack([rng.integers(0, k, p["n_samples"]) for k in spec.levels])
    return render_labels(spec, labels), labels


def _mlp_specs(m, p, seed):
    hidden = list(p["hidden"])
    acts = [p["activation"]] * len(hidden)
    return (NetSpec([m] + hidden + [p["d"]], acts, seed),
            NetSpec([p["d"]] + hidden[::-1] + [m], acts, seed + 1000))


def _csv_text(rows):
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


def _trace_text(trace):
    buf = io.StringIO()
    trace.to_csv(buf)
    return buf.getvalue()


def _derivative_diagonality(model, x_rows, n_mc=1, seed=0):
    """Normalised off-diagonals of the batch-averaged Jacobian and Hessian terms."""
    dec = GeneratorHandle.from_mlp(model.decoder)
    cfg = model.config
    beta = cfg.beta(len(model.log))
    jtj = np.zeros((cfg.d, cfg.d))
    hess = np.zeros((cfg.d, cfg.d))
    for k, x in enumerate(x_rows):
        q = model.posterior(x)
        _, j_part, h_part = oa_precision(dec, x, q, cfg.sigma2, beta, n_mc, seed + k)
        jtj += j_part
        hess += h_part
    jtj /= len(x_rows)
    hess /= len(x_rows)
    hess = np.abs(hess)
    hess_off = offdiag_score(hess) if np.all(np.diag(hess) > 0) else float("nan")
    return offdiag_score(jtj), hess_off, jtj


# -- experiments --------------------------------------------------------------------------

def _linear_symmetry(p, seed):
    m, d = p["m"], p["d"]
    rng = np.random.default_rng(seed)
    w_true = random_orthonormal(m, d, rng) * np.asarray(p["scales"], dtype=float)
    data = sample_linear_lvm(w_true, p["sigma2"], p["n"], seed)
    oracle = ppca_closed_form(sample_covariance(data), d, p["sigma2"])
    results, curves, files = [], [], {}
    for mode in p["cov_modes"]:
        config = LvmConfig(d, m, p["sigma2"], 1.0, mode)

        def track(model, row, mode=mode):
            if row["epoch"] % p["log_every"] == 0 or row["epoch"] == p["epochs"] - 1:
                dec = GeneratorHandle.linear(model.decoder.weights[0])
                curves.append({"seed": seed, "cov_mode": mode, "epoch": row["epoch"],
                               "elbo": row["elbo"], "c1": c1_score(dec, np.zeros(d))})

        model = train_gaussian_vae(config, data, NetSpec([m, d], [], seed),
                                   NetSpec([d, m], [], seed + 1000), p["epochs"], p["lr"], seed,
                                   p["momentum"], p["batch_size"], p["n_mc"], "shared",
                                   callback=track)
        w = model.decoder.weights[0]
        al = align_loadings(w, oracle.w_star)
        results.append({"seed": seed, "cov_mode": mode,
                        "c1": c1_score(GeneratorHandle.linear(w), np.zeros(d)),
                        "ppca_residual": al.residual, "elbo": model.log[-1]["elbo"],
                        "recon": model.log[-1]["recon"], "kl": model.log[-1]["kl"]})
        files[f"models/linear_{mode}_seed{seed}.json"] = model.to_json()
    return {"linear_symmetry": results, "linear_training": curves}, files


def _beta_sweep(p, seed):
    x, labels = _toy_data(p)
    m = x.shape[0]
    eval_idx = np.random.default_rng(seed + 7).choice(x.shape[1], p["n_eval"], replace=False)
    rows, files = [], {}
    for mode in p["cov_modes"]:
        for beta in p["betas"]:
            config = LvmConfig(p["d"], m, p["sigma2"], beta, mode)
            enc, dec = _mlp_specs(m, p, seed)
            model = train_gaussian_vae(config, x, enc, dec, p["epochs"], p["lr"], seed,
                                       p["momentum"], p["batch_size"], p["n_mc"])
            mi = mutual_info_matrix(model.encode(x.T), labels, p["mi_bins"])
            jtj_off, hess_off, _ = _derivative_diagonality(model, x.T[eval_idx], seed=seed)
            tag = f"{mode}_beta{beta:g}_seed{seed}"
            rows.append({"seed": seed, "cov_mode": mode, "beta": float(beta),
                         "aas": aas(mi), "mig": mig(mi), "jtj_offdiag": jtj_off,
                         "hess_offdiag": hess_off, "elbo": model.log[-1]["elbo"],
                         "recon": model.log[-1]["recon"], "kl": model.log[-1]["kl"]})
            buf = io.StringIO()
            mi.to_csv(buf)
            files[f"metrics/mi_{tag}.csv"] = buf.getvalue()
            files[f"models/vae_{tag}.json"] = model.to_json()
    return {"beta_sweep": rows}, files


def _seam_geometry(p, seed):
    rng = np.random.default_rng(seed)
    m, d = p["m"], p["d"]
    g = make_c1c2_generator(random_orthonormal(m, d, rng), banded_phis(d, p["spacing"]))
    r = random_rotation(d, rng)
    while is_signed_permutation(r):
        r = random_rotation(d, rng)
    gens = {"a_phi": g, "rotated": make_entangled_control(g, r)}
    starts = p["start_scale"] * rng.standard_normal((p["n_starts"], d))
    rows, files = [], {}
    for name, gen in gens.items():
        for k, z0 in enumerate(starts):
            pairing = axis_pairing(svd(gen.jacobian(z0)).v)
            for axis in range(d):
                seam = trace_seam(gen, z0, int(pairing[axis]), p["t_span"], p["step"])
                trav = axis_traversal_image(gen, z0, axis, p["t_span"], p["step"])
                # the seam runs along +v; flip the traversal if v points down the axis
                if seam.v_vec[seam.origin][axis] < 0:
                    trav.t = -trav.t
                dist = max_node_distance(seam, trav)
                rows.append({"seed": seed, "generator": name, "start": k, "axis": axis,
                             "singular_index": int(pairing[axis]), "max_distance": dist,
                             "seam_nodes": int(seam.n_nodes)})
                tag = f"{name}_seed{seed}_start{k}_axis{axis}"
                files[f"traces/seam_{tag}.csv"] = _trace_text(seam)
                files[f"traces/traversal_{tag}.csv"] = _trace_text(trav)
    return {"seam_geometry": rows}, files


def _beta_anneal(p, seed):
    x, labels = _toy_data(p)
    m = x.shape[0]
    epochs = p["epochs"]
    checkpoints = {"start": epochs // 4, "mid": epochs // 2, "end": epochs - 1}
    schedules = {
        "high": BetaSchedule("constant", p["beta_high"], p["beta_high"]),
        "low": BetaSchedule("constant", p["beta_low"], p["beta_low"]),
        "anneal": BetaSchedule("exponential", p["beta_high"], p["beta_low"],
                               checkpoints["start"], 3 * epochs // 4),
    }
    rows, files = [], {}
    for name, sched in schedules.items():
        config = LvmConfig(p["d"], m, p["sigma2"], sched, "diagonal")

        def probe(model, row, name=name):
            for label, ep in checkpoints.items():
                if row["epoch"] == ep:
                    mu = model.encode(x.T)
                    mse = float(np.mean((model.decode(mu) - x.T) ** 2))
                    mi = mutual_info_matrix(mu, labels, p["mi_bins"])
                    rows.append({"seed": seed, "schedule": name, "checkpoint": label,
                                 "epoch": ep, "beta": row["beta"], "recon_mse": mse,
                                 "aas": aas(mi), "mig": mig(mi)})

        enc, dec = _mlp_specs(m, p, seed)
        model = train_gaussian_vae(config, x, enc, dec, epochs, p["lr"], seed, p["momentum"],
                                   p["batch_size"], 1, callback=probe)
        files[f"models/anneal_{name}_seed{seed}.json"] = model.to_json()
    return {"beta_anneal": rows}, files


def _identifiability(p, seed):
    rng = np.random.default_rng(seed)
    m, d = p["m"], p["d"]
    g = make_c1c2_generator(random_orthonormal(m, d, rng), banded_phis(d, p["spacing"]))
    lo, hi = p["psi_cubic"]
    psis = [Phi.poly(0.0, 1.0, 0.0, float(c)) for c in rng.uniform(lo, hi, d)]
    perm = [int(i) for i in rng.permutation(d)]
    signs = [int(s) for s in rng.choice([-1, 1], d)]
    probes = p["probe_scale"] * rng.standard_normal((p["n_probes"], d))
    std = StandardNormalPrior()
    targets = {
        "reparameterized": (make_reparameterized(g, psis), ReparameterizedPrior(std, psis)),
        "permuted": (permute_axes(g, perm, signs), std),
    }
    rows = []
    for name, (h, prior_h) in targets.items():
        res = compare_seam_decompositions(g, h, std, prior_h, probes)
        rows.append({"seed": seed, "target": name,
                     "alignment_residual": res.alignment.residual,
                     "factor_deviation": res.max_factor_deviation,
                     "latent_permutation": json.dumps(res.alignment.diagnostics["latent_permutation"]),
                     "latent_signs": json.dumps(res.alignment.diagnostics["latent_signs"]),
                     "true_permutation": json.dumps(perm if name == "permuted" else list(range(d))),
                     "true_signs": json.dumps(signs if name == "permuted" else [1] * d)})
    return {"identifiability": rows}, {}


_RUNNERS = {
    "linear-symmetry": _linear_symmetry,
    "beta-sweep": _beta_sweep,
    "seam-geometry": _seam_geometry,
    "beta-anneal": _beta_anneal,
    "identifiability": _identifiability,
}


def _run_seed(experiment, params, seed):
    try:
        return _RUNNERS[experiment](params, seed)
    except NumericalFailure as exc:
        raise NumericalFailure(f"{experiment} seed {seed}: {exc}", epoch=exc.epoch) from exc
    except SeamVAEError as exc:
        raise type(exc)(f"{experiment} seed {seed}: {exc}") from exc


# -- aggregation ----------------------------------------------------------------------------

def _spearman(xs, ys):
    if len(set(xs)) < 2 or len(set(ys)) < 2:
        return float("nan")
    return float(spearmanr(xs, ys).statistic)


def _group_stats(rows, keys, values):
    groups = {}
    for row in rows:
        groups.setdefault(tuple(row[k] for k in keys), []).append(row)
    out = []
    for key in sorted(groups, key=lambda t: tuple(str(v) for v in t)):
        entry = dict(zip(keys, key))
        entry["n"] = len(groups[key])
        for v in values:
            arr = np.array([float(r[v]) for r in groups[key]])
            entry[f"{v}_mean"] = float(np.mean(arr))
            entry[f"{v}_std"] = float(np.std(arr))
        out.append(entry)
    return out


def aggregate(experiment, tables):
    """Mean/spread summaries; recomputable from the metric CSVs alone."""
    if experiment == "linear-symmetry":
        return {"by_mode": _group_stats(tables["linear_symmetry"], ["cov_mode"],
                                        ["c1", "ppca_residual", "elbo"])}
    if experiment == "beta-sweep":
        rows = tables["beta_sweep"]
        trend = {}
        for mode in sorted({r["cov_mode"] for r in rows}):
            sub = [r for r in rows if r["cov_mode"] == mode]
            betas = [float(r["beta"]) for r in sub]
            trend[mode] = {
                "spearman_aas": _spearman(betas, [float(r["aas"]) for r in sub]),
                "spearman_mig": _spearman(betas, [float(r["mig"]) for r in sub]),
                "spearman_neg_jtj_offdiag": _spearman(betas, [-float(r["jtj_offdiag"]) for r in sub]),
            }
        return {"by_beta": _group_stats(rows, ["cov_mode", "beta"],
                                        ["aas", "mig", "jtj_offdiag", "elbo"]),
                "trend": trend}
    if experiment == "seam-geometry":
        rows = tables["seam_geometry"]
        return {"max_distance": {name: float(max(float(r["max_distance"]) for r in rows
                                                 if r["generator"] == name))
                                 for name in sorted({r["generator"] for r in rows})}}
    if experiment == "beta-anneal":
        stats = _group_stats(tables["beta_anneal"], ["schedule", "checkpoint"], ["recon_mse", "aas"])
        end = {e["schedule"]: e for e in stats if e["checkpoint"] == "end"}
        ordering = {}
        if {"high", "low", "anneal"} <= set(end):
            # annealed run: reconstructs about as well as low beta, disentangles more
            ordering = {
                "recon_anneal_below_high": end["anneal"]["recon_mse_mean"] < end["high"]["recon_mse_mean"],
                "aas_anneal_above_low": end["anneal"]["aas_mean"] > end["low"]["aas_mean"],
            }
        return {"by_schedule": stats, "ordering": ordering}
    rows = tables["identifiability"]
    return {"by_target": _group_stats(rows, ["target"], ["alignment_residual", "factor_deviation"])}


_MAIN_TABLE = {"linear-symmetry": "linear_symmetry", "beta-sweep": "beta_sweep",
               "seam-geometry": "seam_geometry", "beta-anneal": "beta_anneal",
               "identifiability": "identifiability"}


# -- run / report ----------------------------------------------------------------------------

def run(config):
    """Execute a configured experiment and persist everything under its output directory."""
    if not isinstance(config, ExperimentConfig):
        config = load_config(config)
    params = config.resolved_params
    jobs = [(config.experiment, params, s) for s in config.seeds]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_run_seed, *zip(*jobs)))
    else:
        results = [_run_seed(*job) for job in jobs]

    out = Path(config.output_dir)
    tables, files = {}, {}
    for seed_tables, seed_files in results:  # already in seed order
        for name, rows in seed_tables.items():
            tables.setdefault(name, []).extend(rows)
        files.update(seed_files)
    for name, rows in tables.items():
        files[f"metrics/{name}.csv"] = _csv_text(rows)
    for rel, text in files.items():
        path = out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    record = RunRecord(config.config_hash(), config.experiment, list(config.seeds), params,
                       tables, aggregate(config.experiment, tables), sorted(files))
    (out / RECORD_NAME).write_text(record.to_json())
    return record


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _fmt(v):
    if isinstance(v, str) and any(c in v for c in ".en"):
        try:
            v = float(v)
        except ValueError:
            return v
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _md_table(rows):
    if not rows:
        return "(no rows)\n"
    cols = list(rows[0])
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    lines += ["| " + " | ".join(_fmt(r[c]) for c in cols) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def load_record(run_dir):
    run_dir = Path(run_dir)
    path = run_dir / RECORD_NAME
    if not path.is_file():
        raise CorruptRun(f"{run_dir} has no {RECORD_NAME}")
    try:
        record = RunRecord.from_dict(json.loads(path.read_text()))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorruptRun(f"{path} is unreadable: {exc}") from None
    missing = [rel for rel in record.manifest if not (run_dir / rel).is_file()]
    if missing:
        raise CorruptRun(f"manifest lists missing files: {missing[:5]}")
    if f"metrics/{_MAIN_TABLE.get(record.experiment, '')}.csv" not in record.manifest:
        raise CorruptRun("main metric table is not in the manifest")
    return record


def report(run_dir):
    """Write ``summary.md`` from the persisted CSVs and return its text."""
    run_dir = Path(run_dir)
    record = load_record(run_dir)
    tables = {}
    for rel in record.manifest:
        if rel.startswith("metrics/") and rel[8:-4] in (_MAIN_TABLE[record.experiment],):
            tables[rel[8:-4]] = _read_csv(run_dir / rel)
    main = tables[_MAIN_TABLE[record.experiment]]
    agg = aggregate(record.experiment, tables)

    parts = [f"# {record.experiment}\n", f"config hash: `{record.config_hash}`\n",
             f"seeds: {', '.join(str(s) for s in record.seeds)}\n", "## Per-seed results\n",
             _md_table(main)]
    for name, value in agg.items():
        parts.append(f"## {name.replace('_', ' ')}\n")
        if isinstance(value, list):
            parts.append(_md_table(value))
        else:
            parts.append("```\n" + json.dumps(value, indent=2, sort_keys=True) + "\n```\n")
    others = [rel for rel in record.manifest if not rel.startswith("metrics/" + _MAIN_TABLE[record.experiment])]
    parts.append(f"## Plot data\n\n{len(others)} further files; see `{RECORD_NAME}` for the list.\n")
    text = "\n".join(parts)
    (run_dir / SUMMARY_NAME).write_text(text)
    return text
