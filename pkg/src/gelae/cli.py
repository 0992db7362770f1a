"""Command-line front end: featurize, split, train, evaluate, predict, export-attention.

Exit codes: 0 ok; 1 bad input, config, missing file, checkpoint mismatch or
unknown record; 2 featurization produced no systems; 3 training hit a
non-finite loss.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .config import MODEL_KEYS, TRAIN_KEYS, ConfigError, RunConfig, dump_config, load_config_file, resolve
from .dataset import Dataset
from .featurizer import featurize_all
from .model import forward, load_checkpoint, save_checkpoint
from .molecule_io import parse_charges, parse_couplings, parse_structures, write_charges, write_couplings, write_structures
from .synthetic import gen_karplus_synthetic
from .training import NaNLossError, evaluate, predict, rng_for, stratified_split, train

log = logging.getLogger("gelae")

EXIT_INPUT, EXIT_EMPTY, EXIT_NAN = 1, 2, 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


# --- helpers ----------------------------------------------------------------

def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_inputs(cfg: RunConfig, need_labels: bool = True):
    cfg.require("structures", "couplings")
    if cfg.charges is not None:
        cfg.require("charges")
    molecules = parse_structures(Path(cfg.structures).read_text())
    couplings = parse_couplings(Path(cfg.couplings).read_text())
    charges = Path(cfg.charges).read_text() if cfg.charges else None
    molecules = parse_charges(charges, molecules)
    records = list(couplings)
    if need_labels:
        unlabeled = [r.id for r in records if r.scc is None]
        if unlabeled:
            raise CliError(f"couplings without scalar_coupling_constant: ids {unlabeled[:5]}")
    return molecules, records, couplings.skipped


def _featurize(cfg: RunConfig, molecules, records, representation=None, dihedral_mode=None):
    rep = representation or cfg.representation
    systems, summary = featurize_all(records, molecules, rep, dihedral_mode or cfg.dihedral_mode)
    return Dataset.from_systems(systems, rep), summary


def _load_dataset(cfg: RunConfig) -> Dataset:
    cfg.require("dataset")
    return Dataset.load(cfg.dataset)


def _load_split(path: str, data: Dataset) -> dict[str, np.ndarray]:
    try:
        raw = json.loads(Path(path).read_text())
        parts = {k: [data.index_of(int(r)) for r in raw[k]] for k in ("train", "val", "test")}
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise CliError(f"{path}: malformed split file ({exc})") from None
    return {k: np.asarray(v, dtype=np.int64) for k, v in parts.items()}


def _make_split(data: Dataset, cfg: RunConfig) -> dict[str, np.ndarray]:
    tc = cfg.train
    tr, va, te = stratified_split(data.labels, ratio=tc.split_ratio, bin_width=tc.split_bin_width,
                                  rng=rng_for(cfg.seed, "split"))
    return {"train": tr, "val": va, "test": te}


def _write_split(parts: dict[str, np.ndarray], data: Dataset, seed: int, path: Path) -> None:
    doc = {"seed": seed, **{k: [int(data.record_ids[i]) for i in v] for k, v in parts.items()}}
    path.write_text(json.dumps(doc))


def _load_model(cfg: RunConfig):
    cfg.require("checkpoint")
    try:
        return load_checkpoint(cfg.checkpoint)
    except (ValueError, KeyError) as exc:
        raise CliError(f"checkpoint {cfg.checkpoint}: {exc}") from None


def _check_representation(meta: dict, data: Dataset) -> None:
    rep = meta.get("representation")
    if rep is not None and rep != data.representation:
        raise CliError(f"checkpoint was trained on {rep} features but the dataset holds {data.representation}")


# --- subcommands ------------------------------------------------------------

def cmd_featurize(cfg: RunConfig) -> int:
    molecules, records, skipped_rows = _read_inputs(cfg, need_labels=False)
    data, summary = _featurize(cfg, molecules, records)
    out = _out_dir(cfg)
    print(f"molecules parsed: {summary.molecules}")
    print(f"couplings read: {len(records)} (other coupling types ignored: {skipped_rows})")
    print(f"couplings featurized: {summary.featurized}")
    print(f"couplings skipped: {sum(summary.skipped.values())}")
    for reason, n in sorted(summary.skipped.items()):
        print(f"  {reason}: {n}")
    if summary.degenerate_dihedrals:
        print(f"degenerate dihedrals set to 0: {summary.degenerate_dihedrals}")
    if len(data) == 0:
        raise CliError("no coupling systems were produced", EXIT_EMPTY)
    path = out / "dataset.bin"
    data.save(path)
    dump_config(cfg, out / "config.yaml")
    print(f"wrote {path}")
    return 0


def cmd_split(cfg: RunConfig) -> int:
    data = _load_dataset(cfg)
    if not data.labeled:
        raise CliError("splitting needs a label on every sample")
    parts = _make_split(data, cfg)
    out = _out_dir(cfg)
    _write_split(parts, data, cfg.seed, out / "split.json")
    dump_config(cfg, out / "config.yaml")
    print(" ".join(f"{k}={len(v)}" for k, v in parts.items()))
    print(f"wrote {out / 'split.json'}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    data = _load_dataset(cfg)
    if not data.labeled:
        raise CliError("training needs a label on every sample")
    out = _out_dir(cfg)
    if cfg.split:
        cfg.require("split")
        parts = _load_split(cfg.split, data)
    else:
        parts = _make_split(data, cfg)
        _write_split(parts, data, cfg.seed, out / "split.json")
    if len(parts["train"]) == 0:
        raise CliError("the split leaves no training samples")
    if len(parts["val"]) == 0:
        print("warning: empty validation split (every label bin is too small); "
              "val metrics are nan and the best checkpoint is the final one", file=sys.stderr)
    dump_config(cfg, out / "config.yaml")
    log_path = out / "epoch_log.csv"
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_mae", "val_smape", "lr"])

        def on_epoch(entry, _params):
            writer.writerow([entry.epoch, repr(entry.train_loss), repr(entry.val_mae), repr(entry.val_smape),
                             repr(entry.lr)])
            fh.flush()
            print(f"epoch {entry.epoch:4d}  loss {entry.train_loss:.4f}  val_mae {entry.val_mae:.4f}  "
                  f"val_smape {entry.val_smape:.2f}  lr {entry.lr:.3g}", flush=True)

        try:
            result = train(data.subset(parts["train"]), data.subset(parts["val"]), cfg.model, cfg.train,
                           callback=on_epoch)
        except NaNLossError as exc:
            raise CliError(str(exc), EXIT_NAN) from None
    extra = {"representation": data.representation, "seed": cfg.seed}
    save_checkpoint(out / "checkpoint_best.ckpt", result.best_params, cfg.model,
                    {**extra, "epoch": result.best_epoch})
    save_checkpoint(out / "checkpoint_final.ckpt", result.params, cfg.model,
                    {**extra, "epoch": cfg.train.num_epoch})
    print(f"best epoch {result.best_epoch}; wrote checkpoints and {log_path}")
    return 0


def cmd_evaluate(cfg: RunConfig) -> int:
    params, model_cfg, meta = _load_model(cfg)
    data = _load_dataset(cfg)
    _check_representation(meta, data)
    if cfg.split and cfg.subset != "all":
        cfg.require("split")
        data = data.subset(_load_split(cfg.split, data)[cfg.subset])
    if len(data) == 0:
        raise CliError("nothing to evaluate")
    if not data.labeled:
        raise CliError("evaluation needs labeled samples")
    report = evaluate(params, data, model_cfg)
    out = _out_dir(cfg)
    doc = report.to_dict()
    (out / "metrics.json").write_text(json.dumps(doc, indent=2) + "\n")
    print(json.dumps(doc))
    return 0


def cmd_predict(cfg: RunConfig) -> int:
    params, model_cfg, meta = _load_model(cfg)
    if cfg.dataset:
        data = _load_dataset(cfg)
        _check_representation(meta, data)
    else:
        molecules, records, _ = _read_inputs(cfg, need_labels=False)
        rep = meta.get("representation", cfg.representation)
        data, summary = _featurize(cfg, molecules, records, rep, model_cfg.dihedral_mode)
        for reason, n in sorted(summary.skipped.items()):
            print(f"skipped {n} coupling(s): {reason}", file=sys.stderr)
    scc = predict(params, data, model_cfg) if len(data) else np.zeros(0)
    out = _out_dir(cfg)
    path = out / "predictions.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "scc_hz"])
        for rid, y in zip(data.record_ids, scc):
            writer.writerow([int(rid), repr(float(y))])
    print(f"wrote {len(scc)} predictions to {path}")
    return 0


def cmd_export_attention(cfg: RunConfig) -> int:
    if cfg.record_id is None:
        raise CliError("export-attention needs --record-id")
    params, model_cfg, meta = _load_model(cfg)
    data = _load_dataset(cfg)
    _check_representation(meta, data)
    try:
        i = data.index_of(cfg.record_id)
    except KeyError:
        raise CliError(f"record id {cfg.record_id} is not in {cfg.dataset}") from None
    system = data.system(i)
    att = forward(system.features, system.adjacency, system.mask, params, model_cfg,
                  return_attention=True).attention[0]
    out = _out_dir(cfg)
    for layer in range(att.shape[0]):
        for head in range(att.shape[1]):
            np.savetxt(out / f"attn_L{layer}_H{head}.csv", att[layer, head], delimiter=",", fmt="%.17g")
    print(f"record {cfg.record_id}: wrote {att.shape[0] * att.shape[1]} attention matrices to {out}")
    print("slot  role        bond")
    for k, s in enumerate(system.slot_meta):
        bond = f"{s.from_atom}->{s.to_atom}" if s.occupied else "(padding)"
        print(f"{k:4d}  {s.role:<10}  {bond}")
    return 0


def cmd_synth(cfg: RunConfig, n: int, noise_sd: float) -> int:
    if n < 1:
        raise CliError("--n must be at least 1")
    _, molecules, records, _ = gen_karplus_synthetic(n, seed=cfg.seed, noise_sd=noise_sd, return_raw=True)
    out = _out_dir(cfg)
    (out / "structures.csv").write_text(write_structures(molecules))
    (out / "couplings.csv").write_text(write_couplings(records))
    (out / "charges.csv").write_text(write_charges(molecules))
    print(f"wrote {n} synthetic ethane couplings to {out}")
    return 0


# --- argument parsing -------------------------------------------------------

COMMANDS = {
    "featurize": ("parse CSVs and write the binary coupling-system dataset", cmd_featurize),
    "split": ("stratified 8:1:1 split of a dataset", cmd_split),
    "train": ("train a model and write checkpoints and the epoch log", cmd_train),
    "evaluate": ("MAE, logMAE and SMAPE of a checkpoint on a dataset", cmd_evaluate),
    "predict": ("write id,scc_hz predictions", cmd_predict),
    "export-attention": ("write the attention matrices for one record", cmd_export_attention),
    "synth": ("write a synthetic Karplus ethane set as CSV inputs", None),
}


def _parse_set(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {item!r}")
    key, value = item.split("=", 1)
    return key.strip().replace("-", "_"), yaml.safe_load(value)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    for key in ("structures", "couplings", "charges", "dataset", "split", "checkpoint"):
        common.add_argument(f"--{key}")
    common.add_argument("--representation", choices=["E2_invariant", "E1_bond_vector"])
    common.add_argument("--preset", choices=["desk", "paper"])
    common.add_argument("--head", choices=["classification", "regression"])
    common.add_argument("--score-fn", dest="score_fn", choices=["dpa", "mpa"])
    common.add_argument("--attention-scope", dest="attention_scope", choices=["local", "global"])
    common.add_argument("--dihedral-mode", dest="dihedral_mode", choices=["per_slot", "central"])
    common.add_argument("--num-epoch", dest="num_epoch", type=int)
    common.add_argument("--batch-size", dest="batch_size", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--subset", choices=["train", "val", "test", "all"])
    common.add_argument("--set", dest="overrides", action="append", type=_parse_set, default=[],
                        metavar="KEY=VALUE", help="override any config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="gelae", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"gelae {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (text, _) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=text, description=text)
        if name == "export-attention":
            p.add_argument("--record-id", dest="record_id", type=int)
        if name == "synth":
            p.add_argument("--n", type=int, default=100)
            p.add_argument("--noise-sd", dest="noise_sd", type=float, default=0.05)
    return parser


FLAG_KEYS = ("seed", "out", "structures", "couplings", "charges", "dataset", "split", "checkpoint",
             "representation", "preset", "head", "score_fn", "attention_scope", "dihedral_mode",
             "num_epoch", "batch_size", "lr", "subset", "record_id")


def config_from_args(args: argparse.Namespace) -> RunConfig:
    file_values = load_config_file(args.config) if args.config else {}
    overrides = {k: getattr(args, k, None) for k in FLAG_KEYS}
    for key, value in args.overrides:
        if key not in MODEL_KEYS and key not in TRAIN_KEYS and key not in FLAG_KEYS:
            raise ConfigError(f"unknown config key in --set: {key}")
        overrides[key] = value
    return resolve(file_values, overrides)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = config_from_args(args)
        if args.command == "synth":
            return cmd_synth(cfg, args.n, args.noise_sd)
        return COMMANDS[args.command][1](cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, ValueError, OSError) as exc:
        # ParseError, dataset/checkpoint format errors and missing files land here
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
