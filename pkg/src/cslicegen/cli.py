"""Command-line entry point.

    cslicegen <command> --out DIR [--config FILE] [--seed N] [options]

Commands: phantom-gen, select-target, train, finetune, evaluate, ablate-beta,
ablate-distance, harmonize.  Configuration is an INI file with one section per
module ([phantom], [cohort], [model], [train], [evaluate], [ablation],
[harmonize]); unknown sections or keys are rejected.  Values may be overridden by
environment variables named CSLICEGEN_<SECTION>_<KEY> (e.g.
CSLICEGEN_TRAIN_MAX_STEPS=500) and command-line flags win over both.

Exit codes: 0 success, 1 validation error, 2 runtime failure.  Every run writes
``manifest.json`` into --out and nothing outside it.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import __version__, io
from .errors import (CheckpointError, ConfigError, DataError, NumericError, ShapeError,
                     StateError, TrainingDiverged)

log = logging.getLogger("cslicegen")

ENV_PREFIX = "CSLICEGEN_"
COMMANDS = ("phantom-gen", "select-target", "train", "finetune", "evaluate", "ablate-beta",
            "ablate-distance", "harmonize")
STOCHASTIC = {"phantom-gen", "train", "finetune", "evaluate", "ablate-beta", "ablate-distance",
              "harmonize"}


def _floats(text):
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _ints(text):
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _strs(text):
    return tuple(v.strip() for v in str(text).split(",") if v.strip())


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


SCHEMA = {
    "phantom": {"n_slices": int, "z_spacing_mm": float, "image_size": int, "fov_mm": float,
                "noise_std_hu": float},
    "cohort": {"visits_min": int, "visits_max": int, "jitter_min_mm": float,
               "jitter_max_mm": float, "near_zero_fraction": float, "near_zero_mm": float,
               "image_size": int},
    "model": {"preset": str, "latent_dim": int, "work_size": int, "encoder_widths": _ints,
              "decoder_widths": _ints, "discriminator_widths": _ints, "gp_lambda": float},
    "train": {"learning_rate": float, "weight_decay": float, "finetune_learning_rate": float,
              "batch_size": int, "max_steps": int, "disc_steps_per_gen_step": int,
              "beta": float, "gan_variant": str, "pairing_mode": str, "augment": _bool,
              "checkpoint_every": int, "finetune_steps": int},
    "evaluate": {"max_pairs": int, "pairing_mode": str},
    "ablation": {"betas": _floats, "distances_mm": _floats, "modes": _strs, "seeds": _ints,
                 "test_fraction": float, "max_eval_pairs": int},
    "harmonize": {"method": str, "split_mm": float, "grids": int},
}

DEFAULTS = {
    "phantom": {"n_slices": 40, "z_spacing_mm": 3.0, "image_size": 256, "fov_mm": 400.0,
                "noise_std_hu": 5.0},
    "cohort": {"visits_min": 2, "visits_max": 5, "jitter_min_mm": -30.0, "jitter_max_mm": 30.0,
               "near_zero_fraction": 0.4, "near_zero_mm": 3.0, "image_size": 512},
    "model": {"preset": "desk"},
    "train": {"finetune_steps": 200},
    "evaluate": {"max_pairs": 64, "pairing_mode": "unknown_distance"},
    "ablation": {"betas": (0.0, 0.01), "distances_mm": (3.0, 15.0, 30.0, 45.0, 60.0, 75.0),
                 "modes": ("fixed_distance", "fixed_range", "unknown_distance"), "seeds": (0,),
                 "test_fraction": 0.2, "max_eval_pairs": 64},
    "harmonize": {"method": "threshold", "split_mm": 9.0, "grids": 0},
}


class Settings(dict):
    """Resolved configuration: {section: {key: typed value}} plus its provenance."""

    def section(self, name) -> dict:
        return self.setdefault(name, {})


def _coerce(section, key, raw):
    conv = SCHEMA[section][key]
    try:
        return conv(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}.{key}", f"bad value {raw!r}: {exc}") from None


def load_settings(config_path=None, environ=None) -> Settings:
    settings = Settings({s: dict(v) for s, v in DEFAULTS.items()})
    if config_path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(config_path) as f:
                parser.read_file(f)
        except (OSError, configparser.Error) as exc:
            raise ConfigError("config", f"cannot read {config_path}: {exc}") from None
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(section, "unknown config section")
            for key, raw in parser.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"{section}.{key}", "unknown config key")
                settings.section(section)[key] = _coerce(section, key, raw)
    environ = os.environ if environ is None else environ
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        section, _, key = rest.partition("_")
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(name, "environment override names no known config key")
        settings.section(section)[key] = _coerce(section, key, raw)
    return settings


def model_config(settings):
    from .model import ModelConfig

    m = dict(settings["model"])
    preset = m.pop("preset", "desk")
    if preset not in ("desk", "full"):
        raise ConfigError("model.preset", "must be desk or full")
    t = settings["train"]
    extra = {k: t[k] for k in ("beta", "gan_variant") if k in t}
    cfg = ModelConfig.desk(**m, **extra) if preset == "desk" else ModelConfig(**m, **extra)
    return cfg.validate()


def train_config(settings, seed):
    from .trainer import TrainConfig

    t = {k: v for k, v in settings["train"].items() if k != "finetune_steps"}
    return TrainConfig(seed=seed, **t).validate()


# data helpers -------------------------------------------------------------------

def _volume_files(data_dir) -> list[Path]:
    files = sorted(Path(data_dir).glob("*.vol"))
    if not files:
        raise DataError(f"{data_dir}: no .vol files")
    return files


def _load_volumes(data_dir):
    from .phantom import load_volume

    return [load_volume(p) for p in _volume_files(data_dir)]


def _targets(volumes, targets_path):
    from .targetsel import read_manifest, select_target_bpr

    if targets_path is None:
        ref = DEFAULT_REFERENCE_SCORE
        return [select_target_bpr(v.anatomy_score, ref).slice_index for v in volumes]
    manifest = read_manifest(targets_path)
    missing = [v.subject_id for v in volumes if v.subject_id not in manifest]
    if missing:
        raise DataError(f"{targets_path}: no target for {missing[:3]}")
    return [manifest[v.subject_id].slice_index for v in volumes]


DEFAULT_REFERENCE_SCORE = 5.0


def _dataset(args, settings, mode=None):
    from .trainer import build_dataset

    vols = _load_volumes(args.data)
    mode = mode or settings["train"].get("pairing_mode", "unknown_distance")
    return build_dataset(vols, _targets(vols, args.targets), mode)


def _split(dataset, fraction):
    """Deterministic subject split: the last ``fraction`` of subjects are held out."""
    from .trainer import PairDataset

    n = dataset.volumes.shape[0]
    n_test = max(1, int(round(n * fraction)))
    if n_test >= n:
        raise DataError(f"cannot hold out {n_test} of {n} subjects")

    def part(sel):
        return PairDataset(dataset.volumes[sel], np.zeros((0, 3), dtype=np.int64),
                           [dataset.subject_ids[i] for i in sel],
                           [dataset.target_indices[i] for i in sel], dataset.z_spacing_mm)
    return part(list(range(n - n_test))), part(list(range(n - n_test, n)))


def _inputs_hash(paths) -> str:
    import hashlib

    h = hashlib.sha256()
    files = []
    for p in paths:
        if p is None:
            continue
        p = Path(p)
        files += sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
    for f in files:
        h.update(f.name.encode() + b"\0" + io.sha256_file(f).encode() + b"\n")
    return h.hexdigest()


# commands -------------------------------------------------------------------------

def cmd_phantom_gen(args, settings, out: Path):
    from .phantom import PhantomConfig, generate_cohort, generate_volume, save_cohort, save_volume

    outputs = []
    if args.kind == "volumes":
        vdir = out / "volumes"
        rows = []
        for i in range(args.subjects):
            from .phantom import cohort_subject_seed
            cfg = PhantomConfig(seed=cohort_subject_seed(args.seed, i), **settings["phantom"])
            vol = generate_volume(cfg)
            outputs.append(save_volume(vol, vdir))
            outputs.append(vdir / f"{vol.subject_id}.bpr")
            rows.append([vol.subject_id, vol.nominal_target_index(), vol.shape.target_offset_mm])
        truth = out / "targets_truth.tsv"
        io.write_tsv(truth, ["subject_id", "slice_index", "target_offset_mm"], rows)
        outputs.append(truth)
    else:
        c = settings["cohort"]
        cohort = generate_cohort(args.seed, args.subjects,
                                 visits_per_subject=(c["visits_min"], c["visits_max"]),
                                 jitter_mm=(c["jitter_min_mm"], c["jitter_max_mm"]),
                                 near_zero_fraction=c["near_zero_fraction"],
                                 near_zero_mm=c["near_zero_mm"], image_size=c["image_size"])
        index = save_cohort(cohort, out / "cohort")
        outputs = [index] + sorted((out / "cohort").glob("*.slc"))
    return outputs


def cmd_select_target(args, settings, out: Path):
    from .targetsel import (TranslationSearchSpec, refine_target_semi_bpr, select_target_bpr,
                            select_target_registration, write_manifest)
    from .preprocess import window_hu

    vols = _load_volumes(args.data)
    ref_score = args.reference_score
    selections = []
    ref_slice, ref_id = None, ""
    if args.method in ("registration", "semi_bpr"):
        if args.reference is not None:
            from .phantom import load_volume
            rv = load_volume(args.reference)
        else:
            rv = vols[0]
        idx = (args.reference_index if args.reference_index is not None
               else select_target_bpr(rv.anatomy_score, ref_score).slice_index)
        ref_slice = window_hu(rv.voxels[idx]).astype(np.float32)
        ref_id = f"{rv.subject_id}:{idx}"
    for v in vols:
        if args.method == "bpr":
            sel = select_target_bpr(v.anatomy_score, ref_score, v.subject_id, f"score={ref_score:g}")
        elif args.method == "registration":
            sel = select_target_registration(v, ref_slice,
                                             TranslationSearchSpec(args.radius, args.step),
                                             reference_id=ref_id)
        else:
            init = select_target_bpr(v.anatomy_score, ref_score).slice_index
            sel = refine_target_semi_bpr(v, init, ref_slice, args.window, reference_id=ref_id)
        selections.append(sel)
    return [write_manifest(out / "targets.tsv", selections)]


def cmd_train(args, settings, out: Path):
    from .model import save_checkpoint
    from .trainer import train, write_log

    tcfg = train_config(settings, args.seed)
    if args.steps is not None:
        tcfg = replace(tcfg, max_steps=args.steps)
    ds = _dataset(args, settings)
    state, history = train(tcfg, ds, model_config(settings), out_dir=out)
    ckpt = out / "model.ckpt"
    save_checkpoint(state, ckpt)
    return [ckpt, write_log(out / "train_log.tsv", history)]


def cmd_finetune(args, settings, out: Path):
    from .model import load_checkpoint, save_checkpoint
    from .trainer import train, write_log

    tcfg = train_config(settings, args.seed)
    steps = args.steps if args.steps is not None else settings["train"]["finetune_steps"]
    state = load_checkpoint(args.checkpoint)
    ds = _dataset(args, settings)
    state, history = train(tcfg, ds, state=state, out_dir=out,
                           learning_rate=tcfg.finetune_learning_rate, steps=steps)
    ckpt = out / "model.ckpt"
    save_checkpoint(state, ckpt)
    return [ckpt, write_log(out / "finetune_log.tsv", history)]


def cmd_evaluate(args, settings, out: Path):
    from .metrics import EvalItem, evaluate_testset
    from .model import load_checkpoint

    state = load_checkpoint(args.checkpoint)
    ev = settings["evaluate"]
    ds = _dataset(args, settings, mode=ev["pairing_mode"])
    idx = np.arange(len(ds))
    if len(idx) > ev["max_pairs"]:
        idx = np.sort(np.random.default_rng(args.seed).choice(idx, ev["max_pairs"], replace=False))
    cond, tgt = ds.images(idx)
    items = [EvalItem(ds.subject_ids[ds.pairs[i, 0]], c, t) for i, c, t in zip(idx, cond, tgt)]
    report = evaluate_testset(state, items, seed=args.seed)
    paths = report.write(out, label=args.label)
    table = out / "table.txt"
    table.write_text(report.table(args.label) + "\n")
    return paths + [table]


def cmd_ablate_beta(args, settings, out: Path):
    from .trainer import run_beta_ablation, with_pairs

    tcfg = train_config(settings, args.seed)
    if args.steps is not None:
        tcfg = replace(tcfg, max_steps=args.steps)
    a = settings["ablation"]
    ds = _dataset(args, settings)
    train_part, test_part = _split(ds, a["test_fraction"])
    train_part = with_pairs(train_part, tcfg.pairing_mode)
    test_part = with_pairs(test_part, tcfg.pairing_mode)
    seeds = tuple(args.seed + s for s in a["seeds"])
    report = run_beta_ablation(tcfg, train_part, test_part, a["betas"], model_config(settings),
                               seeds=seeds, max_eval_pairs=a["max_eval_pairs"], progress=log.info)
    return [report.write(out / "ablation_beta.tsv")]


def cmd_ablate_distance(args, settings, out: Path):
    from .trainer import run_distance_ablation

    tcfg = train_config(settings, args.seed)
    if args.steps is not None:
        tcfg = replace(tcfg, max_steps=args.steps)
    a = settings["ablation"]
    ds = _dataset(args, settings, mode="unknown_distance")
    train_part, test_part = _split(ds, a["test_fraction"])
    seeds = tuple(args.seed + s for s in a["seeds"])
    report = run_distance_ablation(tcfg, train_part, test_part, a["distances_mm"],
                                   model_config(settings), modes=a["modes"], seeds=seeds,
                                   max_eval_pairs=a["max_eval_pairs"], progress=log.info)
    return [report.write(out / "ablation_distance.tsv")]


def cmd_harmonize(args, settings, out: Path):
    from .harmonize import cv_analysis, dump_grid, harmonize_series, pairwise_nmi_analysis
    from .model import load_checkpoint
    from .phantom import load_cohort

    h = settings["harmonize"]
    state = load_checkpoint(args.checkpoint)
    cohort = sorted(load_cohort(args.cohort), key=lambda s: s.subject_id)
    results = [harmonize_series(state, s, seed=args.seed, method=h["method"]) for s in cohort]
    report = cv_analysis(results, split_mm=h["split_mm"])
    outputs = report.write(out)
    high = {r[0] for r in report.rows if r[1]}
    nmi_rows = []
    for r in sorted(results, key=lambda r: r.subject_id):
        for o, g in zip(r.pairwise_nmi_original, r.pairwise_nmi_harmonized):
            nmi_rows.append([r.subject_id, int(r.subject_id in high), o, g])
    nmi_path = out / "nmi_pairs.tsv"
    io.write_tsv(nmi_path, ["subject_id", "high_jitter", "nmi_original", "nmi_harmonized"], nmi_rows)
    areas = out / "fat_areas.tsv"
    io.write_tsv(areas, ["subject_id", "visit_index", "true_z_offset_mm", "fat_area_original",
                         "fat_area_harmonized"],
                 [[r.subject_id, v.visit_index, v.true_z_offset_mm, v.fat_area_original,
                   v.fat_area_harmonized] for r in results for v in r.visits])
    nmi_summary = out / "nmi_summary.json"
    nmi_summary.write_text(io.canonical_json({
        "full": pairwise_nmi_analysis(results).summary(),
        "high_jitter": pairwise_nmi_analysis(results, subset=high).summary()}) + "\n")
    outputs += [nmi_path, areas, nmi_summary]
    if h["grids"]:
        gdir = out / "grids"
        gdir.mkdir(exist_ok=True)
        for r in results[:h["grids"]]:
            outputs.append(dump_grid(r, gdir / f"{r.subject_id}.png"))
    return outputs


HANDLERS = {"phantom-gen": cmd_phantom_gen, "select-target": cmd_select_target,
            "train": cmd_train, "finetune": cmd_finetune, "evaluate": cmd_evaluate,
            "ablate-beta": cmd_ablate_beta, "ablate-distance": cmd_ablate_distance,
            "harmonize": cmd_harmonize}


# argument parsing -----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """argparse that reports usage errors with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cslicegen", description="Conditional slice generation pipeline.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def common(name, help_, stochastic=True):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--out", required=True, type=Path, help="output directory")
        sp.add_argument("--config", type=Path, help="INI config file")
        sp.add_argument("--seed", type=int, required=stochastic, default=None)
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    sp = common("phantom-gen", "generate phantom volumes or a longitudinal cohort")
    sp.add_argument("--subjects", type=int, required=True)
    sp.add_argument("--kind", choices=("volumes", "cohort"), default="volumes")
    sp.add_argument("--n-slices", type=int, dest="phantom_n_slices")
    sp.add_argument("--image-size", type=int, dest="phantom_image_size")

    sp = common("select-target", "pick each subject's target slice", stochastic=False)
    sp.add_argument("--data", required=True, type=Path)
    sp.add_argument("--method", choices=("bpr", "registration", "semi_bpr"), default="bpr")
    sp.add_argument("--reference-score", type=float, default=DEFAULT_REFERENCE_SCORE)
    sp.add_argument("--reference", type=Path, help="reference volume (.vol)")
    sp.add_argument("--reference-index", type=int)
    sp.add_argument("--radius", type=int, default=8, help="translation search radius (px)")
    sp.add_argument("--step", type=int, default=2, help="translation search step (px)")
    sp.add_argument("--window", type=int, default=8, help="semi_bpr slice window")

    for name, help_ in (("train", "train a model"), ("finetune", "fine-tune a checkpoint")):
        sp = common(name, help_)
        sp.add_argument("--data", required=True, type=Path)
        sp.add_argument("--targets", type=Path)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--beta", type=float, dest="train_beta")
        sp.add_argument("--pairing-mode", dest="train_pairing_mode")
        if name == "finetune":
            sp.add_argument("--checkpoint", required=True, type=Path)

    sp = common("evaluate", "score generated target slices")
    sp.add_argument("--checkpoint", required=True, type=Path)
    sp.add_argument("--data", required=True, type=Path)
    sp.add_argument("--targets", type=Path)
    sp.add_argument("--label", default="C-SliceGen")
    sp.add_argument("--max-pairs", type=int, dest="evaluate_max_pairs")

    for name, help_ in (("ablate-beta", "adversarial weight ablation"),
                        ("ablate-distance", "pairing distance ablation")):
        sp = common(name, help_)
        sp.add_argument("--data", required=True, type=Path)
        sp.add_argument("--targets", type=Path)
        sp.add_argument("--steps", type=int)

    sp = common("harmonize", "harmonize a longitudinal cohort")
    sp.add_argument("--checkpoint", required=True, type=Path)
    sp.add_argument("--cohort", required=True, type=Path)
    sp.add_argument("--method", dest="harmonize_method",
                    choices=("threshold", "fuzzy_cmeans"))
    sp.add_argument("--split-mm", type=float, dest="harmonize_split_mm")
    sp.add_argument("--grids", type=int, dest="harmonize_grids")
    return p


def _apply_flag_overrides(args, settings):
    for section in SCHEMA:
        for key in SCHEMA[section]:
            v = getattr(args, f"{section}_{key}", None)
            if v is not None:
                settings.section(section)[key] = v


def _input_paths(args):
    return [getattr(args, n, None) for n in ("config", "data", "targets", "checkpoint", "cohort",
                                             "reference")]


def _check_outputs_inside(out: Path, outputs):
    root = out.resolve()
    for p in outputs:
        if root not in Path(p).resolve().parents:
            raise RuntimeError(f"output {p} escapes {out}")


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.time()
    try:
        settings = load_settings(args.config)
        _apply_flag_overrides(args, settings)
        if args.command in ("train", "finetune", "ablate-beta", "ablate-distance"):
            model_config(settings)
            train_config(settings, args.seed or 0)
        if getattr(args, "subjects", 1) < 1:
            raise ConfigError("subjects", "must be >= 1")
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        outputs = HANDLERS[args.command](args, settings, out)
        _check_outputs_inside(out, outputs)
        manifest = {
            "command": args.command, "version": __version__,
            "config_path": None if args.config is None else str(args.config),
            "config": {s: {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}
                       for s, d in settings.items()},
            "seed": args.seed, "inputs_sha256": _inputs_hash(_input_paths(args)),
            "outputs": [{"path": str(Path(p).relative_to(out)), "sha256": io.sha256_file(p)}
                        for p in outputs],
            "duration_s": round(time.time() - t0, 3)}
        (out / "manifest.json").write_text(io.canonical_json(manifest) + "\n")
    except (ConfigError, DataError, ShapeError, CheckpointError) as exc:
        print(f"cslicegen {args.command}: {exc}", file=sys.stderr)
        return 1
    except (TrainingDiverged, StateError, NumericError) as exc:
        print(f"cslicegen {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("unexpected failure")
        print(f"cslicegen {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
