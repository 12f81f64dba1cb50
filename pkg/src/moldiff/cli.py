"""Command line entry points: train, sample, evaluate, inspect-schedule.

One JSON config drives a run; unknown keys are rejected and any key can be
overridden from the command line with --set section.key=value. Exit codes:
0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

import argparse
import copy
import json
import sys
from pathlib import Path

import numpy as np

from . import chem, dataio
from .autodiff import ParamStore
from .checkpoint import (
    config_hash,
    load_checkpoint,
    pack_training_state,
    restore_params,
    save_checkpoint,
)
from .diffusion import LossSettings, build_schedule, make_scaling, sample
from .dtn import DTN, DtnConfig
from .gfloss import load_bond_table
from .train import NumericFailure, Trainer

DEFAULT_CONFIG = {
    "data": {
        "kind": "toy",                # "toy" or "files"
        "toy_kind": "chains",
        "toy_n": 200,
        "path": None,
        "elements": ["H", "C", "N", "O", "F"],
        "property_csv": None,
        "conditioning": [],
        "val_fraction": 0.0,
        "split_seed": 0,
    },
    "model": {
        "n_layers": 5,
        "d_model": 256,
        "n_heads": 8,
        "d_ff": 0,
        "d_trip": 0,
        "dropout": 0.1,
        "n_rbf": 32,
        "r_max": 12.0,
        "time_dim": 32,
        "max_valency": 6,
        "param_dtype": "float32",
    },
    "schedule": {"kind": "cosine", "T": 1000},
    "loss": {
        "lam": 0.01,
        "gf_rule": "highest",
        "gf_weight_mode": "sqrt_alpha_bar",
        "gf_count_mode": "order",
    },
    "training": {
        "epochs": 10,
        "batch_size": 16,
        "lr": 1e-4,
        "seed": 0,
        "clip_norm": 1.0,
        "ema_decay": 0.999,
        "checkpoint_every": 0,       # epochs between checkpoints; 0 = final only
    },
    "sampling": {"sigma_mode": "posterior"},
    "output_dir": "runs/default",
}


class UsageError(ValueError):
    pass


def _merge(defaults, user, path=""):
    out = copy.deepcopy(defaults)
    for k, v in user.items():
        full = f"{path}{k}"
        if k not in defaults:
            raise UsageError(f"unknown config key {full!r}")
        if isinstance(defaults[k], dict) and defaults[k]:
            if not isinstance(v, dict):
                raise UsageError(f"config key {full!r} must be a section")
            out[k] = _merge(defaults[k], v, full + ".")
        else:
            out[k] = v
    return out


def _apply_override(config, assignment):
    if "=" not in assignment:
        raise UsageError(f"--set expects key.path=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = config
    parts = key.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise UsageError(f"unknown config section {p!r} in {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise UsageError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def load_config(path=None, overrides=()):
    user = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            user = json.loads(text)
        except json.JSONDecodeError as e:
            raise UsageError(f"{path}: not valid JSON ({e})")
        if not isinstance(user, dict):
            raise UsageError(f"{path}: config must be a JSON object")
    config = _merge(DEFAULT_CONFIG, user)
    for assignment in overrides or ():
        _apply_override(config, assignment)
    return config


# -- shared builders --------------------------------------------------------


def _resume_hash(config):
    """Config hash with the stopping condition and output location removed;
    everything that affects the training stream must still match."""
    view = copy.deepcopy(config)
    view.pop("output_dir", None)
    view.get("training", {}).pop("epochs", None)
    return config_hash(view)


def _build_model(config, nf, conditioning_dim, seed_seq):
    m = config["model"]
    dtype = {"float32": np.float32, "float64": np.float64}.get(m["param_dtype"])
    if dtype is None:
        raise UsageError(f"model.param_dtype must be float32 or float64, got {m['param_dtype']!r}")
    cfg = DtnConfig(
        nf=nf,
        max_valency=m["max_valency"],
        n_layers=m["n_layers"],
        d_model=m["d_model"],
        n_heads=m["n_heads"],
        d_ff=m["d_ff"],
        d_trip=m["d_trip"],
        dropout=m["dropout"],
        n_rbf=m["n_rbf"],
        r_max=m["r_max"],
        time_dim=m["time_dim"],
        conditioning_dim=conditioning_dim,
    )
    store = ParamStore(seed=seed_seq, dtype=dtype)
    model = DTN(cfg, store)
    return model, store, cfg


def _load_training_data(config):
    d = config["data"]
    if d["kind"] == "toy":
        if d["toy_kind"] not in dataio.TOY_KINDS:
            raise UsageError(f"data.toy_kind must be one of {dataio.TOY_KINDS}")
        rng = np.random.default_rng(d["split_seed"])
        ds = dataio.toy_dataset(d["toy_kind"], int(d["toy_n"]), rng)
    elif d["kind"] == "files":
        if not d["path"]:
            raise UsageError("data.kind='files' requires data.path")
        mols, failures = dataio.collect_structures(d["path"])
        if failures:
            lines = "; ".join(f"{f}: {m}" for f, m in failures)
            raise dataio.DataFormatError(f"unparseable training inputs: {lines}")
        if not mols:
            raise dataio.DataFormatError(f"no molecules found under {d['path']}")
        ds = dataio.build_dataset(mols, tuple(d["elements"]))
    else:
        raise UsageError(f"data.kind must be 'toy' or 'files', got {d['kind']!r}")
    table = load_bond_table(tuple(d["elements"]))
    dataio.ensure_valencies(ds, table)
    if d["property_csv"]:
        names, rows = dataio.parse_property_csv(Path(d["property_csv"]).read_text())
        dataio.attach_properties(ds, names, rows)
    return ds, table


# -- train -------------------------------------------------------------------


def cmd_train(args):
    config = load_config(args.config, args.set)
    out_dir = Path(args.output or config["output_dir"])
    config["output_dir"] = str(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    ds, table = _load_training_data(config)
    d, tr_cfg = config["data"], config["training"]
    conditioning = list(d["conditioning"])
    train_idx, val_idx = dataio.split_indices(len(ds), d["val_fraction"], d["split_seed"])
    if conditioning:
        missing = [c for c in conditioning if c not in ds.molecules[0].properties]
        if missing:
            raise dataio.DataFormatError(f"conditioning properties not in data: {missing}")
        dataio.standardize_properties(ds, train_idx, conditioning)

    ss = np.random.SeedSequence(int(tr_cfg["seed"]))
    param_seed, train_seed = ss.spawn(2)
    scaling = make_scaling(tuple(d["elements"]), config["model"]["max_valency"])
    model, store, cfg = _build_model(config, scaling.nf, len(conditioning), param_seed)
    sched = build_schedule(config["schedule"]["kind"], int(config["schedule"]["T"]))
    loss_settings = LossSettings(
        lam=float(config["loss"]["lam"]),
        gf_rule=config["loss"]["gf_rule"],
        gf_count_mode=config["loss"]["gf_count_mode"],
        gf_weight_mode=config["loss"]["gf_weight_mode"],
    )
    trainer = Trainer(
        model,
        store,
        sched,
        scaling,
        table,
        loss_settings=loss_settings,
        lr=float(tr_cfg["lr"]),
        clip_norm=float(tr_cfg["clip_norm"]),
        ema_decay=float(tr_cfg["ema_decay"]),
        batch_size=int(tr_cfg["batch_size"]),
        seed=train_seed,
        context_names=conditioning,
    )
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        if _resume_hash(ckpt.config) != _resume_hash(config):
            raise UsageError(
                f"resume checkpoint config hash {ckpt.hash[:12]} does not match "
                f"the requested config {config_hash(config)[:12]} (only "
                f"training.epochs and output_dir may differ on resume)"
            )
        trainer.restore(ckpt)
        print(f"resumed from {args.resume} at epoch {trainer.epoch}")

    pairs = trainer.prepare([ds.molecules[i] for i in train_idx])
    val_pairs = trainer.prepare([ds.molecules[i] for i in val_idx]) if len(val_idx) else None

    metrics_path = out_dir / "metrics.jsonl"
    mode = "a" if args.resume else "w"
    every = int(tr_cfg["checkpoint_every"])

    def snapshot(trainer):
        return pack_training_state(
            config,
            store,
            trainer.opt,
            trainer.ema,
            epoch=trainer.epoch,
            size_histogram=ds.size_histogram,
            normalization=ds.normalization,
            rng=trainer.rng,
            extra={"conditioning": conditioning},
        )

    with open(metrics_path, mode) as log:

        def callback(trainer, logs):
            log.write(json.dumps(logs) + "\n")
            log.flush()
            line = ", ".join(
                f"{k}={v:.6g}" for k, v in logs.items() if isinstance(v, float)
            )
            print(f"epoch {logs['epoch']}: {line}")
            if every and trainer.epoch % every == 0:
                save_checkpoint(out_dir / f"checkpoint_{trainer.epoch:04d}.bin", snapshot(trainer))

        trainer.fit(pairs, int(tr_cfg["epochs"]), callback=callback, val_pairs=val_pairs)

    final = out_dir / "checkpoint_final.bin"
    save_checkpoint(final, snapshot(trainer))
    print(f"saved {final}")
    return 0


# -- sample --------------------------------------------------------------------


def cmd_sample(args):
    ckpt = load_checkpoint(args.checkpoint)
    config = ckpt.config
    if args.config or args.set:
        requested = load_config(args.config, args.set)
        for section in ("model", "schedule"):
            if requested[section] != config[section]:
                raise UsageError(
                    f"config section {section!r} does not match the checkpoint "
                    f"(checkpoint hash {ckpt.hash[:12]}); sampling requires the "
                    f"training-time model"
                )
    conditioning = list(ckpt.extra.get("conditioning", []))
    if args.context is not None and not conditioning:
        raise UsageError("checkpoint is unconditional; --context is not applicable")
    context = None
    if conditioning:
        if args.context is None:
            raise UsageError(
                f"checkpoint was trained with conditioning {conditioning}; pass --context"
            )
        raw = [float(x) for x in args.context.split(",")]
        if len(raw) != len(conditioning):
            raise UsageError(
                f"--context needs {len(conditioning)} values {conditioning}, got {len(raw)}"
            )
        context = np.array(
            [
                (v - ckpt.normalization[name]["mean"]) / ckpt.normalization[name]["std"]
                for v, name in zip(raw, conditioning)
            ]
        )

    scaling = make_scaling(tuple(config["data"]["elements"]), config["model"]["max_valency"])
    model, store, cfg = _build_model(config, scaling.nf, len(conditioning), 0)
    restore_params(ckpt, store, source="param" if args.no_ema else "ema")
    sched = build_schedule(config["schedule"]["kind"], int(config["schedule"]["T"]))

    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = load_bond_table(tuple(config["data"]["elements"]))
    children = np.random.SeedSequence(args.seed).spawn(args.count)
    manifest = {
        "checkpoint": str(args.checkpoint),
        "config_hash": ckpt.hash,
        "seed": args.seed,
        "sigma_mode": args.sigma,
        "ema": not args.no_ema,
        "context": None if args.context is None else args.context,
        "molecules": [],
    }
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        n = args.n_atoms or dataio.size_sampler(ckpt.size_histogram, rng)
        state, traj = sample(
            model,
            sched,
            scaling,
            n,
            rng,
            context=context,
            sigma_mode=args.sigma,
            traj_every=args.trajectory_every,
        )
        symbols = state.symbols(scaling)
        mol = dataio.Molecule(symbols, state.P, comment=f"sample {i} seed {args.seed}")
        name = f"sample_{i:04d}.{args.format}"
        if args.format == "xyz":
            (out_dir / name).write_text(dataio.write_xyz([mol]))
        else:
            mol.bonds = chem.infer_graph(state.P, symbols, table).bonds
            (out_dir / name).write_text(dataio.write_sdf([mol], table))
        entry = {
            "index": i,
            "file": name,
            "n_atoms": int(n),
            "seed_entropy": int(child.entropy),
            "spawn_key": [int(k) for k in child.spawn_key],
            "symbols": list(symbols),
        }
        if traj is not None:
            frames = [
                dataio.Molecule(symbols, p, comment=f"frame {k}") for k, p in enumerate(traj)
            ]
            # frames live in a subdirectory, so evaluating the output
            # directory sees only final molecules
            (out_dir / "trajectories").mkdir(exist_ok=True)
            traj_name = f"trajectories/sample_{i:04d}.xyz"
            (out_dir / traj_name).write_text(dataio.write_xyz(frames))
            entry["trajectory"] = traj_name
            entry["frames"] = len(frames)
        manifest["molecules"].append(entry)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {args.count} molecules to {out_dir}")
    return 0


# -- evaluate --------------------------------------------------------------------


def cmd_evaluate(args):
    mols, failures = dataio.collect_structures(args.path)
    for f, msg in failures:
        print(f"unreadable: {f}: {msg}", file=sys.stderr)
    if not mols:
        raise dataio.DataFormatError(f"no parseable structures under {args.path}")
    symbols = sorted(
        {s for m in mols for s in m.symbols}, key=lambda s: chem.ATOMIC_NUMBERS[s]
    )
    table = load_bond_table(tuple(symbols))
    graphs = [chem.infer_graph(m.coords, m.symbols, table) for m in mols]
    report = chem.evaluate_corpus(graphs, use_largest_fragment=args.largest_fragment)
    report["files_failed"] = len(failures)
    for key in (
        "n_molecules",
        "atom_stability",
        "molecule_stability",
        "validity",
        "uniqueness",
        "uniqueness_times_validity",
        "files_failed",
    ):
        v = report[key]
        print(f"{key} {v:.6f}" if isinstance(v, float) else f"{key} {v}")
    if args.json:
        Path(args.json).write_text(json.dumps(report, indent=2) + "\n")
    return 0


# -- inspect-schedule --------------------------------------------------------------


def cmd_inspect_schedule(args):
    sched = build_schedule(args.kind, args.T)
    cols = ("t", "beta", "alpha_bar", "snr", "sigma2", "sigma2_paper", "omega")
    rows = []
    for t in range(sched.T + 1):
        rows.append(
            (
                t,
                sched.beta[t],
                sched.alpha_bar[t],
                sched.snr[t],
                sched.sigma2[t],
                sched.sigma2_paper[t],
                sched.omega[t],
            )
        )
    print(" ".join(f"{c:>13}" for c in cols))
    for r in rows:
        print(f"{r[0]:>13d} " + " ".join(f"{v:13.6g}" for v in r[1:]))
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for r in rows:
                fh.write(f"{r[0]}," + ",".join(f"{v:.17g}" for v in r[1:]) + "\n")
        print(f"wrote {args.csv}")
    return 0


# -- parser -------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    # usage problems exit 1, not argparse's default 2 (2 means data error here)
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="moldiff", description=__doc__)
    sub = p.add_subparsers(dest="command", metavar="command")

    t = sub.add_parser("train", parents=[], help="train a denoiser", add_help=True)
    t.add_argument("--config", help="JSON config file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key, e.g. training.epochs=50")
    t.add_argument("--output", help="output directory (overrides config output_dir)")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw molecules from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--count", type=int, default=10)
    s.add_argument("--n-atoms", type=int, default=0,
                   help="fixed size; default draws from the training histogram")
    s.add_argument("--context", default=None,
                   help="comma-separated raw property values for conditional models")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--format", choices=("xyz", "sdf"), default="xyz")
    s.add_argument("--output", default="samples")
    s.add_argument("--trajectory-every", type=int, default=0, metavar="K",
                   help="also write every K-th denoising frame")
    s.add_argument("--sigma", choices=("posterior", "paper"), default="posterior")
    s.add_argument("--no-ema", action="store_true",
                   help="sample with raw instead of averaged parameters")
    s.add_argument("--config", help="config file to cross-check against the checkpoint")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("evaluate", help="stability/validity metrics for structures")
    e.add_argument("path", help="structure file or directory of .xyz/.sdf files")
    e.add_argument("--largest-fragment", action="store_true",
                   help="evaluate validity on the largest connected component")
    e.add_argument("--json", help="also write the report as JSON")
    e.set_defaults(func=cmd_evaluate)

    i = sub.add_parser("inspect-schedule", help="print a noise schedule table")
    i.add_argument("--kind", choices=("cosine", "polynomial", "linear"), default="cosine")
    i.add_argument("--T", type=int, default=1000)
    i.add_argument("--csv", help="also write the table as CSV")
    i.set_defaults(func=cmd_inspect_schedule)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_help()
        return 1
    try:
        return args.func(args)
    except NumericFailure as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except dataio.DataFormatError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (ValueError, KeyError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
