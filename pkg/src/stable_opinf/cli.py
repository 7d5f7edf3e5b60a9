"""Command-line pipeline: simulate, pod, diff, learn, certify, eval.

Exit status is 0 on success, 1 when certification or validation fails and
2 on I/O or configuration errors.
"""

import argparse
import configparser
import dataclasses
import io
import json
import logging
import math
import pathlib
import sys
import warnings

import numpy as np

from . import dataprep, learn, models, stability

log = logging.getLogger("stable_opinf")

EXPERIMENTS = ("example1", "example2", "burgers", "custom")


class ConfigError(Exception):
    pass


class ValidationFailure(Exception):
    pass


# Configuration ===============================================================
@dataclasses.dataclass
class ExperimentConfig:
    experiment: str = "example1"
    system_file: str = ""
    t_start: float = 0.0
    t_end: float = 10.0
    samples: int = 200
    train_family: str = "example2d"
    train_count: int = 2
    train_seed: int = 0
    test_signals: str = "u1,u2,w1,w2"
    test_family: str = ""
    test_count: int = 0
    test_seed: int = 1
    pod_rank: int = 0
    pod_energy: float = 0.0
    derivatives: str = "exact"
    noise_sigma: float = 0.0
    noise_seed: int = 0
    ridge: float = 0.0
    learners: str = "stable,baseline"
    substeps: int = 0
    train: learn.TrainConfig = dataclasses.field(default_factory=learn.TrainConfig)

    @classmethod
    def defaults(cls, experiment):
        if experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}")
        cfg = cls(experiment=experiment)
        if experiment == "example2":
            cfg.noise_sigma = 0.02
            cfg.derivatives = "stencil"
        elif experiment == "burgers":
            cfg.samples = 1001
            cfg.train_family = "burgers_train"
            cfg.train_count = 20
            cfg.test_signals = ""
            cfg.test_family = "burgers_test"
            cfg.test_count = 10
            cfg.pod_rank = 9
            cfg.derivatives = "stencil"
            cfg.ridge = 1e-8
        return cfg

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}")
        if self.experiment == "custom" and not self.system_file:
            raise ConfigError("custom experiments need system_file")
        if self.samples < 2 or not self.t_end > self.t_start:
            raise ConfigError("need samples >= 2 and t_end > t_start")
        if self.derivatives not in ("exact", "stencil"):
            raise ConfigError("derivatives must be 'exact' or 'stencil'")
        if self.pod_rank and self.pod_energy:
            raise ConfigError("set at most one of pod_rank and pod_energy")
        if self.train_family not in models.SIGNAL_FAMILIES:
            raise ConfigError(f"train_family must be one of {models.SIGNAL_FAMILIES}")
        if self.test_family and self.test_family not in models.SIGNAL_FAMILIES:
            raise ConfigError(f"test_family must be one of {models.SIGNAL_FAMILIES}")
        unknown = set(self.learner_list) - {"stable", "baseline", "generalized"}
        if unknown:
            raise ConfigError(f"unknown learners {sorted(unknown)}")
        fixed = models.fixed_test_signals()
        for name in self.test_signal_names:
            if name not in fixed:
                raise ConfigError(f"unknown test signal {name!r}")
        return self

    @property
    def learner_list(self):
        return [s.strip() for s in self.learners.split(",") if s.strip()]

    @property
    def test_signal_names(self):
        return [s.strip() for s in self.test_signals.split(",") if s.strip()]

    @property
    def t_grid(self):
        return np.linspace(self.t_start, self.t_end, self.samples)

    @property
    def uses_pod(self):
        return bool(self.pod_rank or self.pod_energy)

    def to_ini(self):
        parser = configparser.ConfigParser()
        exp = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)
               if f.name != "train"}
        parser["experiment"] = {k: repr(v) if isinstance(v, float) else str(v)
                                for k, v in exp.items()}
        parser["train"] = {k: repr(v) if isinstance(v, float) else str(v)
                           for k, v in dataclasses.asdict(self.train).items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_ini(cls, text):
        parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        try:
            parser.read_string(text)
        except configparser.Error as err:
            raise ConfigError(str(err)) from err
        section = parser["experiment"] if parser.has_section("experiment") else {}
        cfg = cls.defaults(section.get("experiment", "example1"))
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, value in section.items():
            if key not in types or key == "train":
                raise ConfigError(f"unknown experiment key {key!r}")
            setattr(cfg, key, _coerce(key, value, type(getattr(cfg, key))))
        if parser.has_section("train"):
            train = dataclasses.asdict(cfg.train)
            for key, value in parser["train"].items():
                if key not in train:
                    raise ConfigError(f"unknown train key {key!r}")
                train[key] = _coerce(key, value, type(train[key]))
            try:
                cfg.train = learn.TrainConfig(**train)
            except ValueError as err:
                raise ConfigError(str(err)) from err
        return cfg.validate()


def _coerce(key, value, kind):
    try:
        return kind(value)
    except ValueError as err:
        raise ConfigError(f"bad value for {key}: {value!r}") from err


def load_config(path, experiment=None, seed=None):
    if path:
        try:
            text = pathlib.Path(path).read_text()
        except OSError as err:
            raise ConfigError(f"cannot read config: {err}") from err
        cfg = ExperimentConfig.from_ini(text)
    else:
        cfg = ExperimentConfig.defaults(experiment or "example1").validate()
    if seed is not None:
        cfg.train_seed = seed
        cfg.test_seed = seed + 1
        cfg.noise_seed = seed
        cfg.train.seed = seed
    return cfg


# Helpers =====================================================================
def ground_truth(cfg):
    if cfg.experiment == "example1":
        return models.example_one()
    if cfg.experiment == "example2":
        return models.example_two()
    if cfg.experiment == "burgers":
        return models.burgers_semidiscrete()
    try:
        sys_, _, _ = learn.load_model(cfg.system_file)
    except (OSError, ValueError) as err:
        raise ConfigError(f"cannot load system_file: {err}") from err
    return sys_


def training_signals(cfg):
    return models.sample_training_signals(cfg.train_family, cfg.train_count, cfg.train_seed)


def test_signals(cfg):
    fixed = models.fixed_test_signals()
    named = [(name, fixed[name]) for name in cfg.test_signal_names]
    if cfg.test_family and cfg.test_count:
        sampled = models.sample_training_signals(cfg.test_family, cfg.test_count, cfg.test_seed)
        named += [(f"test_{i:03d}", s) for i, s in enumerate(sampled)]
    return named


def _inputs_for(sys_, signal):
    return [signal] * sys_.m if sys_.m > 1 else signal


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _setup_out(out, cfg=None):
    out = pathlib.Path(out)
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)
    logging.getLogger().setLevel(logging.INFO)
    if cfg is not None:
        (out / "config.ini").write_text(cfg.to_ini())
    return out


def _substeps(cfg):
    return cfg.substeps or None


# Commands ====================================================================
def simulate_split(cfg, out, split):
    """Simulate one split and write trajectory/input CSVs plus a manifest."""
    sys_ = ground_truth(cfg)
    t = cfg.t_grid
    if split == "train":
        named = [(f"train_{i:03d}", s) for i, s in enumerate(training_signals(cfg))]
    else:
        named = test_signals(cfg)
    folder = pathlib.Path(out) / split
    folder.mkdir(parents=True, exist_ok=True)
    entries = []
    if named:
        inputs = [_inputs_for(sys_, s) for _, s in named]
        trajs, blowups = models.simulate_batch(sys_, np.zeros(sys_.n), inputs, t,
                                               substeps=_substeps(cfg))
    for idx, (name, signal) in enumerate(named):
        entry = {"name": name, "signal": signal.to_dict(), "diverged_at": blowups[idx]}
        if blowups[idx] is None:
            dataprep.write_csv(folder / f"{name}_x.csv", t, trajs[idx], prefix="x")
            U = np.tile(signal(t), (sys_.m, 1))
            dataprep.write_csv(folder / f"{name}_u.csv", t, U, prefix="u")
            entry.update(states=f"{name}_x.csv", inputs=f"{name}_u.csv")
        else:
            log.warning("%s: trajectory %s diverged at t=%g", split, name, blowups[idx])
        entries.append(entry)
    manifest = {"experiment": cfg.experiment, "split": split, "n": sys_.n, "m": sys_.m,
                "t_start": cfg.t_start, "t_end": cfg.t_end, "samples": cfg.samples,
                "trajectories": entries}
    _write_json(folder / "manifest.json", manifest)
    return manifest


def cmd_simulate(args):
    cfg = load_config(args.config, args.experiment, args.seed)
    out = _setup_out(args.out, cfg)
    splits = ("train", "test") if args.split == "all" else (args.split,)
    for split in splits:
        manifest = simulate_split(cfg, out, split)
        print(f"{split}: {len(manifest['trajectories'])} trajectories -> {out / split}")
    return 0


def load_split(out, split):
    folder = pathlib.Path(out) / split
    path = folder / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"{path} missing; run 'simulate' first")
    manifest = json.loads(path.read_text())
    runs = []
    for entry in manifest["trajectories"]:
        if entry.get("diverged_at") is not None:
            continue
        t, X, _ = dataprep.read_csv(folder / entry["states"])
        _, U, _ = dataprep.read_csv(folder / entry["inputs"])
        runs.append((entry["name"], models.SignalSpec.from_dict(entry["signal"]), t, X, U))
    return manifest, runs


def fit_pod(cfg, runs):
    Y = np.hstack([X for _, _, _, X, _ in runs])
    if cfg.pod_rank:
        return dataprep.pod_fit(Y, rank=cfg.pod_rank)
    return dataprep.pod_fit(Y, energy=cfg.pod_energy)


def cmd_pod(args):
    cfg = load_config(args.config, args.experiment, args.seed)
    if not cfg.uses_pod:
        raise ConfigError("config sets neither pod_rank nor pod_energy")
    out = _setup_out(args.out)
    _, runs = load_split(out, "train")
    basis = fit_pod(cfg, runs)
    dataprep.write_binary(out / "pod_basis.bin", basis.V)
    curve = basis.energy_curve()
    np.savetxt(out / "pod_energy.csv", np.column_stack([np.arange(1, curve.size + 1), curve]),
               delimiter=",", header="rank,retained_energy", comments="", fmt=["%d", "%.17g"])
    print(f"POD rank {basis.rank}: retained energy {basis.retained_energy:.8f}")
    return 0


def cmd_diff(args):
    t, X, names = dataprep.read_csv(args.input)
    dt = float(t[1] - t[0])
    Xdot = dataprep.estimate_derivatives(X, dt, t=t)
    output = args.output or str(pathlib.Path(args.input).with_suffix("")) + "_dot.csv"
    dataprep.write_csv(output, t, Xdot, prefix="xdot")
    print(f"derivatives -> {output}")
    return 0


def prepare_dataset(cfg, runs, basis=None, truth=None):
    """Project, add noise and differentiate each training trajectory."""
    datasets = []
    for idx, (name, _, t, Y, U) in enumerate(runs):
        X = dataprep.pod_project(basis, Y) if basis is not None else Y
        if cfg.noise_sigma > 0:
            X = dataprep.add_noise(X, cfg.noise_sigma, seed=[cfg.noise_seed, idx])
        if cfg.derivatives == "exact":
            Ydot = dataprep.exact_derivatives(truth, Y, U)
            # noise corrupts the states only; derivatives stay exact
            Xdot = dataprep.pod_project(basis, Ydot) if basis is not None else Ydot
        else:
            Xdot = dataprep.estimate_derivatives(X, float(t[1] - t[0]), t=t)
        datasets.append(dataprep.SnapshotDataset(X, U, t, Xdot, provenance=name))
    return dataprep.stack_datasets(datasets)


def learn_models(cfg, dataset):
    """Fit every configured learner; returns {name: (system, params, history)}."""
    results = {}
    for name in cfg.learner_list:
        if name == "baseline":
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                sys_ = learn.fit_baseline(dataset, ridge=cfg.ridge)
            for w in caught:
                log.warning("baseline: %s", w.message)
            results[name] = (sys_, None, None)
        else:
            fit = learn.fit_stable if name == "stable" else learn.fit_stable_generalized
            params, history = fit(dataset, cfg=cfg.train)
            results[name] = (learn.materialize(params), params, history)
    return results


def model_certificate(sys_, params):
    Q = None
    if params is not None and params.generalized:
        Q = params.Qbar @ params.Qbar.T + params.eps * np.eye(params.n)
    return stability.certificate_report(sys_, Q=Q)


def cmd_learn(args):
    cfg = load_config(args.config, args.experiment, args.seed)
    out = _setup_out(args.out, cfg)
    _, runs = load_split(out, "train")
    if not runs:
        raise ValidationFailure("no usable training trajectories")
    truth = ground_truth(cfg) if cfg.derivatives == "exact" else None
    basis = None
    if cfg.uses_pod:
        basis = fit_pod(cfg, runs)
        dataprep.write_binary(out / "pod_basis.bin", basis.V)
        log.info("POD rank %d retains %.8f of the energy", basis.rank, basis.retained_energy)
    dataset = prepare_dataset(cfg, runs, basis, truth)
    _, cond = dataprep.assemble_regressor(dataset.X, dataset.U)
    log.info("regressor condition number %.6g", cond)
    failed = []
    for name, (sys_, params, history) in learn_models(cfg, dataset).items():
        report = model_certificate(sys_, params)
        extra = {"pod_rank": basis.rank if basis is not None else None}
        learn.save_model(out / f"model_{name}.json", sys_, name, params,
                         cfg.to_dict(), report, extra)
        _write_json(out / f"certificate_{name}.json", report)
        if history is not None:
            np.savetxt(out / f"loss_{name}.csv",
                       np.column_stack([np.arange(history.size), history]),
                       delimiter=",", header="step,loss", comments="", fmt=["%d", "%.17g"])
        status = "PASS" if report["certified"] else "not certified"
        print(f"{name}: n={sys_.n} m={sys_.m} certificate {status}")
        if name != "baseline" and not report["certified"]:
            failed.append(name)
    if failed:
        raise ValidationFailure(f"certified learners failed certification: {failed}")
    return 0


def evaluate(cfg, out, names=None):
    """Error table rows comparing learned models against the ground truth."""
    out = pathlib.Path(out)
    truth = ground_truth(cfg)
    signals = test_signals(cfg)
    t = cfg.t_grid
    basis_path = out / "pod_basis.bin"
    V = dataprep.read_binary(basis_path) if cfg.uses_pod else None
    names = names or cfg.learner_list
    inputs = [_inputs_for(truth, s) for _, s in signals]
    gt, gt_blow = models.simulate_batch(truth, np.zeros(truth.n), inputs, t,
                                        substeps=_substeps(cfg))
    rows = []
    for name in names:
        path = out / f"model_{name}.json"
        if not path.exists():
            raise FileNotFoundError(f"{path} missing; run 'learn' first")
        sys_, params, doc = learn.load_model(path)
        cert = None
        if doc.get("certificate", {}).get("certified"):
            try:
                cert = learn.certificate_of(params) if params is not None else stability.certify(sys_)
            except stability.CertificationError:
                cert = None
        pred, blow = models.simulate_batch(sys_, np.zeros(sys_.n),
                                           [_inputs_for(sys_, s) for _, s in signals], t,
                                           substeps=_substeps(cfg))
        for i, (sig_name, signal) in enumerate(signals):
            row = {"model": name, "signal": sig_name, "status": "ok", "blowup_time": "",
                   "err": math.nan, "signed_mean": math.nan, "rel_l2": math.nan,
                   "max_norm": math.nan, "state_bound": math.nan, "within_bound": ""}
            if gt_blow[i] is not None:
                row.update(status="truth_diverged", blowup_time=gt_blow[i])
            elif blow[i] is not None:
                row.update(status="diverged", blowup_time=blow[i])
            else:
                Xl = V @ pred[i] if V is not None else pred[i]
                diff = gt[i] - Xl
                row.update(err=float(np.mean(np.abs(diff))),
                           signed_mean=float(np.mean(diff)),
                           rel_l2=float(np.linalg.norm(diff) / max(np.linalg.norm(gt[i]), 1e-300)))
                norms = np.linalg.norm(pred[i], axis=0)
                row["max_norm"] = float(norms.max())
                if cert is not None:
                    u_bound = signal.sup_bound() * math.sqrt(sys_.m)
                    bound = cert.state_bound(np.zeros(sys_.n), u_bound)
                    row["state_bound"] = bound
                    row["within_bound"] = str(bool(norms.max() <= bound * (1 + 1e-6)))
            rows.append(row)
    return rows


ERR_COLUMNS = ("model", "signal", "status", "blowup_time", "err", "signed_mean", "rel_l2",
               "max_norm", "state_bound", "within_bound")


def write_err_table(path, rows):
    with open(path, "w") as fh:
        fh.write(",".join(ERR_COLUMNS) + "\n")
        for row in rows:
            cells = []
            for col in ERR_COLUMNS:
                v = row[col]
                cells.append(format(v, ".17g") if isinstance(v, float) else str(v))
            fh.write(",".join(cells) + "\n")


def cmd_eval(args):
    cfg = load_config(args.config, args.experiment, args.seed)
    out = _setup_out(args.out)
    rows = evaluate(cfg, out)
    write_err_table(out / "err_table.csv", rows)
    for row in rows:
        extra = f" (diverged at t={row['blowup_time']:.4g})" if row["status"] == "diverged" else ""
        print(f"{row['model']:>11s} {row['signal']:>9s} err={row['err']:.4e}{extra}")
    violated = [r for r in rows if r["within_bound"] == "False"]
    if violated:
        raise ValidationFailure(f"{len(violated)} certified trajectories left their bound")
    return 0


def cmd_certify(args):
    try:
        sys_, params, _ = learn.load_model(args.model)
    except (json.JSONDecodeError, KeyError) as err:
        raise ConfigError(f"malformed model file: {err}") from err
    report = model_certificate(sys_, params)
    text = json.dumps(report, indent=1, sort_keys=True)
    if args.output:
        pathlib.Path(args.output).write_text(text + "\n")
    print(text)
    print("PASS" if report["certified"] else "FAIL")
    return 0 if report["certified"] else 1


def cmd_run(args):
    """simulate + learn + eval in one go."""
    for step in (cmd_simulate, cmd_learn, cmd_eval):
        if step is cmd_simulate:
            args.split = "all"
        step(args)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="stable-opinf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="INI config file ([experiment] and [train] sections)")
        p.add_argument("--experiment", choices=EXPERIMENTS,
                       help="use the built-in defaults of an experiment (ignored with --config)")
        p.add_argument("--seed", type=int, help="override every seed in the config")
        if out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("simulate", help="simulate ground-truth trajectories")
    common(p)
    p.add_argument("--split", choices=("train", "test", "all"), default="all")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("pod", help="fit the POD basis of the training snapshots")
    common(p)
    p.set_defaults(func=cmd_pod)

    p = sub.add_parser("diff", help="estimate time derivatives of a trajectory CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--output")
    p.set_defaults(func=cmd_diff)

    p = sub.add_parser("learn", help="fit the certified and baseline models")
    common(p)
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("certify", help="stability report for a model JSON file")
    p.add_argument("model")
    p.add_argument("--output")
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("eval", help="compare learned models with the ground truth")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", help="simulate, learn and eval")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("config", help="print the default config of an experiment")
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.set_defaults(func=lambda a: print(ExperimentConfig.defaults(a.experiment).to_ini(),
                                        end="") or 0)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationFailure, stability.CertificationError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (ConfigError, OSError, ValueError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    finally:
        for handler in list(logging.getLogger().handlers):
            if isinstance(handler, logging.FileHandler):
                logging.getLogger().removeHandler(handler)
                handler.close()


if __name__ == "__main__":
    sys.exit(main())
