"""Command-line entry point.

Every command is a pure function of its config and input files: rerunning
with the same seed produces byte-identical outputs.  The fully-resolved
config is echoed to stdout and written as a manifest next to the other
outputs.  Exit codes: 0 success, 2 configuration or argument problems,
3 data or file-format problems, 4 numeric failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_model, model_config, save_model
from .data import (LabeledEmbeddings, ModalitySpec, SyntheticSpec,
                   gen_synthetic, read_embeddings, semantic_modality,
                   write_embeddings)
from .errors import (ConfigError, DataError, DimensionError, FormatError,
                     LineageError, NumericError)
from .evaluation import (confusion_matrix, embed_all, pca_project_2d,
                         retrieval_accuracy, top_confusions)
from .extension import ExtensionConfig, extend
from .losses import contrastive_loss
from .model import (SpanerModel, TrainConfig, TrainHistory, fit, forward,
                    init_model)
from .tensor import Rng, grad_check, scale

GRAD_CHECK_TOLERANCE = 1e-4

TRAIN_KEYS = ("embed_dim", "prompt_tokens", "heads", "proj_dim", "ca_weight",
              "temperature", "symmetric", "learning_rate", "beta1", "beta2",
              "adam_eps", "epochs", "batch_size")


class RunConfig:
    """The parsed JSON config document with defaults resolved.

    Sections: data, train, extend, eval, confusion, grad_check, plus a
    top-level seed.  Unknown keys anywhere are rejected by name.
    """

    TOP_KEYS = {"seed", "data", "train", "extend", "eval", "confusion",
                "grad_check"}

    def __init__(self, raw: dict, seed_override: int | None = None):
        if not isinstance(raw, dict):
            raise ConfigError(f"config root must be an object, got {type(raw).__name__}")
        _reject_unknown(raw, self.TOP_KEYS, "")
        seed = _as_int(raw.get("seed", 0), "seed")
        self.seed = seed_override if seed_override is not None else seed
        self.data = self._data_section(raw.get("data", {}))
        self.train, self.train_pair = self._train_section(raw.get("train", {}))
        self.extension = self._extend_section(raw.get("extend"))
        self.eval = self._eval_section(raw.get("eval", {}))
        self.confusion = self._confusion_section(raw.get("confusion", {}))
        self.grad = self._grad_section(raw.get("grad_check", {}))

    def _data_section(self, section) -> SyntheticSpec:
        _require_object(section, "data")
        keys = {"classes", "latent_dim", "instances_per_class", "modalities",
                "semantic_tag", "write_semantic"}
        _reject_unknown(section, keys, "data")
        self.write_semantic = _as_bool(section.get("write_semantic", False),
                                       "data.write_semantic")
        raw_mods = section.get("modalities",
                               [{"tag": "mod_a", "dim": 32},
                                {"tag": "mod_b", "dim": 32}])
        if not isinstance(raw_mods, list):
            raise ConfigError("data.modalities must be a list")
        mods = []
        for i, entry in enumerate(raw_mods):
            _require_object(entry, f"data.modalities[{i}]")
            _reject_unknown(entry, {"tag", "dim", "noise"}, f"data.modalities[{i}]")
            mods.append(ModalitySpec(
                tag=_as_str(entry.get("tag", f"mod_{i}"), f"data.modalities[{i}].tag"),
                dim=_as_int(entry.get("dim", 32), f"data.modalities[{i}].dim"),
                noise=_as_float(entry.get("noise", 0.05),
                                f"data.modalities[{i}].noise")))
        semantic = section.get("semantic_tag")
        if semantic is not None:
            semantic = _as_str(semantic, "data.semantic_tag")
        return SyntheticSpec(
            classes=_as_int(section.get("classes", 10), "data.classes"),
            latent_dim=_as_int(section.get("latent_dim", 16), "data.latent_dim"),
            instances_per_class=_as_int(section.get("instances_per_class", 20),
                                        "data.instances_per_class"),
            modalities=tuple(mods), seed=self.seed, semantic_tag=semantic)

    def _train_block(self, section, path: str, seed: int) -> TrainConfig:
        values = {}
        for key in TRAIN_KEYS:
            if key not in section:
                continue
            value = section[key]
            if key == "symmetric":
                values[key] = _as_bool(value, f"{path}.{key}")
            elif key in ("embed_dim", "prompt_tokens", "heads", "proj_dim",
                         "epochs", "batch_size"):
                values[key] = _as_int(value, f"{path}.{key}")
            else:
                values[key] = _as_float(value, f"{path}.{key}")
        return TrainConfig(seed=seed, **values)

    def _train_section(self, section) -> tuple[TrainConfig, tuple[str, str]]:
        _require_object(section, "train")
        _reject_unknown(section, set(TRAIN_KEYS) | {"pair"}, "train")
        pair = section.get("pair",
                           [m.tag for m in self.data.modalities[:2]])
        if not (isinstance(pair, list) and len(pair) == 2
                and all(isinstance(t, str) for t in pair)):
            raise ConfigError(f"train.pair must be two modality tags, got {pair!r}")
        return self._train_block(section, "train", self.seed), (pair[0], pair[1])

    def _extend_section(self, section) -> ExtensionConfig | None:
        if section is None:
            return None
        _require_object(section, "extend")
        _reject_unknown(section, {"new_tag", "new_input_dim", "anchor_tag",
                                  "train"}, "extend")
        for key in ("new_tag", "new_input_dim", "anchor_tag"):
            if key not in section:
                raise ConfigError(f"extend.{key} is required")
        train_raw = section.get("train", {})
        _require_object(train_raw, "extend.train")
        _reject_unknown(train_raw, set(TRAIN_KEYS), "extend.train")
        return ExtensionConfig(
            new_tag=_as_str(section["new_tag"], "extend.new_tag"),
            new_input_dim=_as_int(section["new_input_dim"], "extend.new_input_dim"),
            anchor_tag=_as_str(section["anchor_tag"], "extend.anchor_tag"),
            train=self._train_block(train_raw, "extend.train", self.seed))

    def _eval_section(self, section) -> dict:
        _require_object(section, "eval")
        _reject_unknown(section, {"k", "match"}, "eval")
        match = _as_str(section.get("match", "class"), "eval.match")
        if match not in ("class", "instance"):
            raise ConfigError(f"eval.match must be 'class' or 'instance', "
                              f"got {match!r}")
        return {"k": _as_int(section.get("k", 1), "eval.k"), "match": match}

    def _confusion_section(self, section) -> dict:
        _require_object(section, "confusion")
        _reject_unknown(section, {"top_n"}, "confusion")
        return {"top_n": _as_int(section.get("top_n", 20), "confusion.top_n")}

    def _grad_section(self, section) -> dict:
        _require_object(section, "grad_check")
        keys = {"embed_dim", "prompt_tokens", "heads", "ca_weight",
                "temperature", "batch", "input_dims", "step"}
        _reject_unknown(section, keys, "grad_check")
        dims = section.get("input_dims", [12, 8])
        if not (isinstance(dims, list) and len(dims) == 2):
            raise ConfigError(f"grad_check.input_dims must be two widths, got {dims!r}")
        return {
            "embed_dim": _as_int(section.get("embed_dim", 8), "grad_check.embed_dim"),
            "prompt_tokens": _as_int(section.get("prompt_tokens", 2),
                                     "grad_check.prompt_tokens"),
            "heads": _as_int(section.get("heads", 2), "grad_check.heads"),
            "ca_weight": _as_float(section.get("ca_weight", 0.5),
                                   "grad_check.ca_weight"),
            "temperature": _as_float(section.get("temperature", 1.0),
                                     "grad_check.temperature"),
            "batch": _as_int(section.get("batch", 4), "grad_check.batch"),
            "input_dims": [_as_int(d, "grad_check.input_dims") for d in dims],
            "step": _as_float(section.get("step", 1e-4), "grad_check.step"),
        }

    def echo(self) -> dict:
        """The fully-resolved document, defaults included."""
        out = {
            "seed": self.seed,
            "data": {
                "classes": self.data.classes,
                "latent_dim": self.data.latent_dim,
                "instances_per_class": self.data.instances_per_class,
                "semantic_tag": self.data.semantic_tag,
                "write_semantic": self.write_semantic,
                "modalities": [{"tag": m.tag, "dim": m.dim, "noise": m.noise}
                               for m in self.data.modalities],
            },
            "train": dict(_train_echo(self.train), pair=list(self.train_pair)),
            "eval": dict(self.eval),
            "confusion": dict(self.confusion),
            "grad_check": dict(self.grad),
        }
        if self.extension is not None:
            out["extend"] = {
                "new_tag": self.extension.new_tag,
                "new_input_dim": self.extension.new_input_dim,
                "anchor_tag": self.extension.anchor_tag,
                "train": _train_echo(self.extension.train),
            }
        return out


def _train_echo(cfg: TrainConfig) -> dict:
    return {key: getattr(cfg, key) for key in TRAIN_KEYS + ("seed",)}


def _require_object(section, path: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"config section {path or 'root'} must be an object, "
                          f"got {type(section).__name__}")


def _reject_unknown(section: dict, allowed: set[str], path: str) -> None:
    unknown = sorted(set(section) - allowed)
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError(f"unknown config key {where!r}")


def _as_int(value, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{path} must be an integer, got {value!r}")
    return value


def _as_float(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path} must be a number, got {value!r}")
    return float(value)


def _as_bool(value, path: str) -> bool:
    if not isinstance(value, bool):
        raise ConfigError(f"{path} must be true or false, got {value!r}")
    return value


def _as_str(value, path: str) -> str:
    if not isinstance(value, str):
        raise ConfigError(f"{path} must be a string, got {value!r}")
    return value


def load_run_config(path: str | None, seed_override: int | None) -> RunConfig:
    if path is None:
        return RunConfig({}, seed_override)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: {err}")
    return RunConfig(raw, seed_override)


# ---------------------------------------------------------------------------
# output helpers


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, name: str, payload: dict) -> None:
    text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    (out / name).write_text(text, encoding="utf-8")


def _echo_config(resolved: dict) -> None:
    print("config: " + json.dumps(resolved, sort_keys=True))


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _write_history(path: Path, history: TrainHistory) -> None:
    rows = [[r.step, r.total, r.align, r.cross_attention, history.ca_weight]
            for r in history.rows]
    _write_csv(path, ["step", "loss", "loss_align", "loss_ca", "ca_weight"], rows)


def _load_aligned_pair(paths: dict[str, Path]) -> dict[str, LabeledEmbeddings]:
    """Read SPNE files and align their rows by instance id."""
    loaded: dict[str, LabeledEmbeddings] = {}
    for tag, path in paths.items():
        data = read_embeddings(path)
        if data.modality != tag:
            raise DataError(f"{path} holds modality {data.modality!r}, "
                            f"expected {tag!r}")
        loaded[tag] = data.take(np.argsort(data.instance_ids, kind="stable"))
    tags = list(loaded)
    first = loaded[tags[0]]
    for tag in tags[1:]:
        if not np.array_equal(first.instance_ids, loaded[tag].instance_ids):
            raise DataError(f"modalities {tags[0]!r} and {tag!r} do not pair: "
                            f"instance ids differ")
    return loaded


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    config = load_run_config(args.config, args.seed)
    out = _out_dir(args)
    resolved = config.echo()
    _echo_config(resolved)
    datasets = gen_synthetic(config.data)
    files = {}
    for tag, data in datasets.items():
        name = f"{tag}.spne"
        write_embeddings(data, out / name)
        files[tag] = name
    if config.write_semantic:
        prototypes = semantic_modality(config.data)
        write_embeddings(prototypes, out / "semantic.spne")
        files["semantic"] = "semantic.spne"
    _write_manifest(out, "manifest.json",
                    {"command": "gen-data", "seed": config.seed,
                     "files": files, "config": resolved})
    print(f"wrote {len(files)} embedding files to {out}")
    return 0


def cmd_train(args) -> int:
    config = load_run_config(args.config, args.seed)
    out = _out_dir(args)
    resolved = config.echo()
    _echo_config(resolved)
    data_dir = Path(args.data_dir)
    pair = config.train_pair
    datasets = _load_aligned_pair({tag: data_dir / f"{tag}.spne" for tag in pair})
    root = Rng(config.seed)
    init_rng, fit_rng = root.split(2)
    model = init_model(config.train,
                       [(tag, datasets[tag].dim) for tag in pair], init_rng)
    history = fit(model, {tag: datasets[tag].vectors for tag in pair}, pair,
                  config.train, rng=fit_rng)
    save_model(model, out / "model.spnr")
    _write_history(out / "history.csv", history)
    _write_manifest(out, "train_manifest.json",
                    {"command": "train", "seed": config.seed,
                     "pair": list(pair), "steps": len(history),
                     "files": {"checkpoint": "model.spnr",
                               "history": "history.csv"},
                     "config": resolved})
    final = history.rows[-1].total if history.rows else None
    print(f"trained {len(history)} steps, final loss "
          f"{repr(final) if final is not None else 'n/a'}")
    print(f"wrote {out / 'model.spnr'} and {out / 'history.csv'}")
    return 0


def cmd_extend(args) -> int:
    config = load_run_config(args.config, args.seed)
    if config.extension is None:
        raise ConfigError("the extend command needs an 'extend' config section")
    out = _out_dir(args)
    resolved = config.echo()
    _echo_config(resolved)
    model = load_model(args.checkpoint)
    before = len(model.parameters())
    ext = config.extension
    data_dir = Path(args.data_dir)
    datasets = _load_aligned_pair(
        {tag: data_dir / f"{tag}.spne" for tag in (ext.new_tag, ext.anchor_tag)})
    history, drifted = extend(
        model, ext, {tag: datasets[tag].vectors for tag in datasets},
        rng=Rng(config.seed))
    save_model(model, out / "extended.spnr")
    _write_history(out / "extend_history.csv", history)
    _write_csv(out / "frozen_report.csv", ["parameter"], [[n] for n in drifted])
    _write_manifest(out, "extend_manifest.json",
                    {"command": "extend", "seed": config.seed,
                     "new_tag": ext.new_tag, "anchor_tag": ext.anchor_tag,
                     "parameters_before": before,
                     "parameters_after": len(model.parameters()),
                     "files": {"checkpoint": "extended.spnr",
                               "history": "extend_history.csv",
                               "frozen_report": "frozen_report.csv"},
                     "config": resolved})
    print(f"extended with {ext.new_tag!r}: {before} -> {len(model.parameters())} "
          f"parameters, {len(history)} steps")
    if drifted:
        print(f"error: {len(drifted)} frozen parameters drifted: "
              f"{', '.join(drifted)}", file=sys.stderr)
        return 4
    print("frozen report empty")
    return 0


def cmd_eval(args) -> int:
    config = load_run_config(args.config, args.seed)
    out = _out_dir(args)
    k = args.k if args.k is not None else config.eval["k"]
    match = config.eval["match"]
    resolved = config.echo()
    resolved["eval"] = {"k": k, "match": match}
    _echo_config(resolved)
    model = load_model(args.checkpoint)
    query = read_embeddings(args.query)
    gallery = read_embeddings(args.gallery)
    report = retrieval_accuracy(model, query, gallery, k=k, match=match,
                                workers=args.workers)
    _write_csv(out / "eval.csv",
               ["k", "match", "queries", "hits", "accuracy"],
               [[report.k, report.match, report.queries, report.hits,
                 report.accuracy]])
    _write_manifest(out, "eval_manifest.json",
                    {"command": "eval", "k": k, "match": match,
                     "accuracy": report.accuracy,
                     "files": {"report": "eval.csv"}, "config": resolved})
    print(f"accuracy {repr(report.accuracy)} ({report.hits}/{report.queries}, "
          f"k={report.k}, match={report.match})")
    return 0


def cmd_confusion(args) -> int:
    config = load_run_config(args.config, args.seed)
    out = _out_dir(args)
    top_n = args.top_n if args.top_n is not None else config.confusion["top_n"]
    if top_n < 0:
        raise ConfigError(f"--top-n must be non-negative, got {top_n}")
    resolved = config.echo()
    resolved["confusion"] = {"top_n": top_n}
    _echo_config(resolved)
    model = load_model(args.checkpoint)
    query = read_embeddings(args.query)
    gallery = read_embeddings(args.gallery)
    matrix = confusion_matrix(model, query, gallery, workers=args.workers)
    rows = [[name] + matrix.counts[i].tolist()
            for i, name in enumerate(matrix.class_names)]
    _write_csv(out / "confusion.csv", ["query_class"] + matrix.class_names, rows)
    worst = top_confusions(matrix, top_n)
    _write_csv(out / "top_confusions.csv",
               ["query_class", "retrieved_class", "count"],
               [list(entry) for entry in worst])
    per_class = np.bincount(query.class_ids, minlength=len(matrix.class_names))
    sums_ok = bool(np.array_equal(matrix.row_sums(), per_class))
    _write_manifest(out, "confusion_manifest.json",
                    {"command": "confusion", "top_n": top_n,
                     "total": matrix.total,
                     "diagonal_fraction": matrix.diagonal_fraction(),
                     "row_sums_match_query_counts": sums_ok,
                     "files": {"matrix": "confusion.csv",
                               "top": "top_confusions.csv"},
                     "config": resolved})
    print(f"row sums match per-class query counts: {sums_ok}")
    print(f"total {matrix.total}, diagonal fraction "
          f"{repr(matrix.diagonal_fraction())}")
    return 0


def cmd_project(args) -> int:
    config = load_run_config(args.config, args.seed)
    out = _out_dir(args)
    resolved = config.echo()
    _echo_config(resolved)
    model = load_model(args.checkpoint)
    blocks = []
    labels = []
    for path in args.data_files:
        data = read_embeddings(path)
        blocks.append(embed_all(model, data, workers=args.workers))
        for i in range(data.count):
            labels.append((int(data.class_ids[i]),
                           data.class_names[data.class_ids[i]], data.modality))
    projection = pca_project_2d(np.vstack(blocks))
    rows = [[float(projection.coords[i, 0]), float(projection.coords[i, 1]),
             labels[i][0], labels[i][1], labels[i][2]]
            for i in range(len(labels))]
    _write_csv(out / "projection.csv",
               ["x", "y", "class_id", "class_name", "modality"], rows)
    _write_manifest(out, "project_manifest.json",
                    {"command": "project", "rows": len(rows),
                     "explained": [float(v) for v in projection.explained],
                     "files": {"coords": "projection.csv"}, "config": resolved})
    print(f"projected {len(rows)} rows from {len(args.data_files)} files")
    return 0


def cmd_grad_check(args) -> int:
    config = load_run_config(args.config, args.seed)
    resolved = config.echo()
    _echo_config(resolved)
    g = config.grad
    train_cfg = TrainConfig(embed_dim=g["embed_dim"],
                            prompt_tokens=g["prompt_tokens"], heads=g["heads"],
                            ca_weight=g["ca_weight"],
                            temperature=g["temperature"], seed=config.seed)
    init_rng, batch_rng = Rng(config.seed).split(2)
    tags = [("first", g["input_dims"][0]), ("second", g["input_dims"][1])]
    model = init_model(train_cfg, tags, init_rng)
    batch = {tag: batch_rng.normal((g["batch"], dim)) for tag, dim in tags}

    def loss_fn():
        outs = forward(model, batch)
        ca = contrastive_loss(outs["first"].pooled, outs["second"].pooled,
                              model.loss_config)
        align = contrastive_loss(outs["first"].projected,
                                 outs["second"].projected, model.loss_config)
        return align + scale(ca, model.ca_weight)

    report = grad_check(loss_fn, model.parameters(), h=g["step"])
    print(f"max relative error {repr(report.max_rel_error)} "
          f"(worst parameter {report.worst_param})")
    if report.max_rel_error > GRAD_CHECK_TOLERANCE:
        print(f"error: gradient check failed tolerance {GRAD_CHECK_TOLERANCE}",
              file=sys.stderr)
        return 4
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spaner",
        description="Shared-prompt multimodal alignment: synthetic data, "
                    "training, modality extension, retrieval evaluation.")
    commands = parser.add_subparsers(dest="command", required=True)

    def common(sub, out=True, workers=False):
        sub.add_argument("--config", help="JSON config file")
        sub.add_argument("--seed", type=int, help="override the config seed")
        if out:
            sub.add_argument("--out", default=".",
                             help="output directory (default: current)")
        if workers:
            sub.add_argument("--workers", type=int, default=1,
                             help="threads for read-only evaluation")

    sub = commands.add_parser("gen-data", help="write synthetic SPNE files")
    common(sub)
    sub.set_defaults(func=cmd_gen_data)

    sub = commands.add_parser("train", help="train a two-modality model")
    sub.add_argument("data_dir", help="directory holding <tag>.spne files")
    common(sub)
    sub.set_defaults(func=cmd_train)

    sub = commands.add_parser("extend", help="attach a new modality")
    sub.add_argument("checkpoint", help="trained SPNR checkpoint")
    sub.add_argument("data_dir", help="directory holding <tag>.spne files")
    common(sub)
    sub.set_defaults(func=cmd_extend)

    sub = commands.add_parser("eval", help="top-k retrieval accuracy")
    sub.add_argument("checkpoint")
    sub.add_argument("query", help="SPNE query file")
    sub.add_argument("gallery", help="SPNE gallery file")
    sub.add_argument("--k", type=int, help="retrieval depth (default from config)")
    common(sub, workers=True)
    sub.set_defaults(func=cmd_eval)

    sub = commands.add_parser("confusion", help="top-1 confusion matrix")
    sub.add_argument("checkpoint")
    sub.add_argument("query")
    sub.add_argument("gallery")
    sub.add_argument("--top-n", type=int, dest="top_n",
                     help="confusion pairs to keep (default from config)")
    common(sub, workers=True)
    sub.set_defaults(func=cmd_confusion)

    sub = commands.add_parser("project", help="joint 2-D projection CSV")
    sub.add_argument("checkpoint")
    sub.add_argument("data_files", nargs="+", help="SPNE files to project")
    common(sub, workers=True)
    sub.set_defaults(func=cmd_project)

    sub = commands.add_parser("grad-check",
                              help="finite-difference gradient audit")
    common(sub, out=False)
    sub.set_defaults(func=cmd_grad_check)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DimensionError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (DataError, FormatError, LineageError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except NumericError as err:
        print(f"error: {err}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
