"""Command-line pipeline: seeded, restartable experiment stages.

Every stage writes into its own output directory, atomically: work happens
in ``<out>.partial`` and the directory is renamed into place only after the
stage finishes, so an interrupted run never leaves a half-written stage
where a later stage might read it. Reruns with the same config and seed
reproduce every metrics CSV byte for byte.

Exit codes: 0 success, 1 usage error, 2 bad or missing configuration,
3 non-finite numerics, 4 regression found by ``compare --tolerance``.
"""

from __future__ import annotations

import argparse
import configparser
import os
import shutil
import sys

import numpy as np

from .attacks import AttackSpec
from .autodiff import NonFiniteError, Tensor
from .data import (SceneSpec, class_frequencies, colorize_mask,
                   generate_dataset, load_dataset, merge_datasets,
                   save_dataset, save_image_png, split_dataset)
from .metrics import emit_table, parse_results_csv, results_csv_text
from .models import (ARCHITECTURES, build_model, dump_activations, frozen,
                     load_checkpoint)
from .robustify import RobustifyConfig, robustify_dataset
from .training import TrainConfig, evaluate, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_REGRESSION = 4

LINF_EPSILON = 8 / 255
LINF_ALPHA = 2 / 255
L2_EPSILON = 10.0
L2_ALPHA = 0.1


class ConfigError(ValueError):
    """Raised for missing or malformed configuration values."""


_REQUIRED = object()


def _get(cfg, section, key, default=_REQUIRED, cast=str):
    if not cfg.has_section(section) or not cfg.has_option(section, key):
        if default is _REQUIRED:
            raise ConfigError(f"missing required option [{section}] {key}")
        return default
    raw = cfg.get(section, key).strip()
    try:
        return cast(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for [{section}] {key}: {raw!r} ({exc})") from exc


def _bool(raw: str) -> bool:
    lowered = raw.lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _int_triple(raw: str):
    parts = [int(p) for p in raw.split(",")]
    if len(parts) != 3:
        raise ValueError("expected three comma-separated integers")
    return tuple(parts)


def _float_pair(raw: str):
    parts = [float(p) for p in raw.split(",")]
    if len(parts) != 2:
        raise ValueError("expected two comma-separated floats")
    return tuple(parts)


# ---------------------------------------------------------------------------
# stage output handling


class _StageDir:
    """Build stage output in ``<out>.partial``, rename into place on success."""

    def __init__(self, out: str, overwrite: bool):
        self.out = os.path.abspath(out)
        self.tmp = self.out + ".partial"
        if os.path.isdir(self.out) and os.listdir(self.out) and not overwrite:
            raise ConfigError(
                f"output directory {self.out} is not empty (pass --overwrite)")
        if os.path.exists(self.out) and not os.path.isdir(self.out):
            raise ConfigError(f"output path {self.out} is not a directory")

    def __enter__(self) -> str:
        if os.path.exists(self.tmp):
            shutil.rmtree(self.tmp)
        os.makedirs(self.tmp)
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            return False
        parent = os.path.dirname(self.out)
        if parent:
            os.makedirs(parent, exist_ok=True)
        if os.path.exists(self.out):
            shutil.rmtree(self.out)
        os.replace(self.tmp, self.out)
        return False


def _echo_config(cfg: configparser.ConfigParser, path: str, *, out: str,
                 seed: int) -> None:
    """Record the effective configuration, including resolved out/seed."""
    echo = configparser.ConfigParser()
    echo.read_dict({s: dict(cfg.items(s)) for s in cfg.sections()})
    if not echo.has_section("run"):
        echo.add_section("run")
    echo.set("run", "out", out)
    echo.set("run", "seed", str(seed))
    with open(path, "w") as fh:
        echo.write(fh)


def _write(path: str, text: str) -> None:
    with open(path, "w") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# config -> component settings


def _scene_spec(cfg, seed: int, section: str = "data") -> SceneSpec:
    return SceneSpec(
        seed=seed,
        image_size=_get(cfg, section, "image_size", 64, int),
        horizon_band=_get(cfg, section, "horizon_band", (0.20, 0.34), _float_pair),
        trail_width_range=_get(cfg, section, "trail_width_range", (0.20, 0.36),
                               _float_pair),
        puddle_probability=_get(cfg, section, "puddle_probability", 0.75, float),
    )


def _attack_spec(cfg, section: str = "attack") -> AttackSpec:
    norm = _get(cfg, section, "norm", "linf")
    if norm == "linf":
        eps, alpha = LINF_EPSILON, LINF_ALPHA
    else:
        eps, alpha = L2_EPSILON, L2_ALPHA
    spec = AttackSpec(
        norm=norm,
        epsilon=_get(cfg, section, "epsilon", eps, float),
        alpha=_get(cfg, section, "alpha", alpha, float),
        steps=_get(cfg, section, "steps", 10, int),
        init=_get(cfg, section, "init", "zero"),
    )
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(f"bad [{section}] settings: {exc}") from exc
    return spec


def _attack_specs(cfg) -> list[AttackSpec]:
    sections = ["attack"] if cfg.has_section("attack") else []
    sections += sorted(s for s in cfg.sections() if s.startswith("attack."))
    if not sections:
        return [_attack_spec(cfg)]  # built-in default
    return [_attack_spec(cfg, s) for s in sections]


def _train_config(cfg, seed: int, attack: AttackSpec | None = None) -> TrainConfig:
    tc = TrainConfig(
        epochs=_get(cfg, "train", "epochs", 20, int),
        lr=_get(cfg, "train", "lr", 1e-3, float),
        batch_size=_get(cfg, "train", "batch_size", 8, int),
        seed=seed,
        augment=_get(cfg, "train", "augment", True, _bool),
        attack=attack,
        mix_clean=_get(cfg, "train", "mix_clean", False, _bool),
    )
    try:
        tc.validate()
    except ValueError as exc:
        raise ConfigError(f"bad [train] settings: {exc}") from exc
    return tc


def _build_model_from(cfg, num_classes: int, seed: int):
    arch = _get(cfg, "model", "architecture", "unet")
    if arch not in ARCHITECTURES:
        raise ConfigError(f"unknown architecture {arch!r}; choose from {ARCHITECTURES}")
    return build_model(
        arch,
        stages=_get(cfg, "model", "stages", 3, int),
        base_channels=_get(cfg, "model", "base_channels", 16, int),
        num_classes=num_classes,
        seed=seed,
    )


def _load_data(cfg, key: str = "dir"):
    path = _get(cfg, "data", key)
    try:
        return load_dataset(path)
    except ValueError as exc:
        raise ConfigError(f"cannot load dataset from {path}: {exc}") from exc


def _load_model(cfg):
    path = _get(cfg, "model", "checkpoint")
    try:
        return load_checkpoint(path)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load checkpoint from {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# shared stage pieces


def _qualitative_grid(model, ds, indices, path: str) -> None:
    """input | truth | prediction strips for a few samples, one PNG."""
    rows = []
    for i in indices:
        image = ds.images[i]
        with frozen(model):
            logits = model.forward(Tensor(image[None]))
        pred = logits.data.argmax(axis=1)[0]
        truth_rgb = colorize_mask(ds.masks[i]).transpose(2, 0, 1) / 255.0
        pred_rgb = colorize_mask(pred.astype(np.uint8)).transpose(2, 0, 1) / 255.0
        rows.append(np.concatenate([image, truth_rgb, pred_rgb], axis=2))
    save_image_png(path, np.concatenate(rows, axis=1))


def _eval_rows(model, ds, stage: str, arch: str, attacks, seed: int):
    """Clean rows for every non-empty split, attacked rows for val/test."""
    rows = []
    for split in ("train", "val", "test"):
        if len(ds.indices(split)) == 0:
            continue
        rows.append(evaluate(model, ds, split).as_row(stage, arch, split))
        if split in ("val", "test"):
            for spec in attacks:
                report = evaluate(model, ds, split, attack=spec,
                                  rng=np.random.default_rng((seed, 0xA77)))
                rows.append(report.as_row(stage, arch, split))
    return rows


def _finish_stage(tmp: str, cfg, rows, *, out: str, seed: int) -> None:
    _echo_config(cfg, os.path.join(tmp, "config.ini"), out=out, seed=seed)
    if rows:
        _write(os.path.join(tmp, "results.csv"), results_csv_text(rows))
        _write(os.path.join(tmp, "summary.md"),
               emit_table(rows, layout="split_metrics") + "\n")


# ---------------------------------------------------------------------------
# stages


def cmd_gen_data(cfg, out: str, seed: int, overwrite: bool) -> int:
    count = _get(cfg, "data", "count", 1076, int)
    extra_count = _get(cfg, "data", "extra_count", 366, int)
    ds = generate_dataset(_scene_spec(cfg, seed), count)
    if extra_count > 0:
        narrow = _get(cfg, "data", "extra_trail_width_range", (0.16, 0.30),
                      _float_pair)
        extra_spec = SceneSpec(seed=seed + 1, image_size=ds.images.shape[-1],
                               trail_width_range=narrow)
        ds = merge_datasets(ds, generate_dataset(extra_spec, extra_count))
    counts = _get(cfg, "data", "split", (794, 360, 288), _int_triple)
    try:
        ds = split_dataset(ds, counts, seed=seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    with _StageDir(out, overwrite) as tmp:
        save_dataset(ds, tmp)
        freq = class_frequencies(ds)
        lines = ["| class | pixel share |", "|-------|-------------|"]
        lines += [f"| {name} | {f:.4f} |" for name, f in zip(ds.class_names, freq)]
        _write(os.path.join(tmp, "summary.md"),
               f"{len(ds)} images, splits {counts}\n\n" + "\n".join(lines) + "\n")
        _echo_config(cfg, os.path.join(tmp, "config.ini"), out=out, seed=seed)
    print(f"gen-data: {len(ds)} images -> {out}")
    return EXIT_OK


def _run_training(cfg, out, seed, overwrite, *, stage: str,
                  adversarial: bool) -> int:
    ds = _load_data(cfg)
    eval_ds = ds
    if stage == "robust-train":
        eval_ds = _load_data(cfg, key="eval_dir")
        if eval_ds.class_names != ds.class_names:
            raise ConfigError("train and eval datasets disagree on classes")
    attack = _attack_spec(cfg) if adversarial else None
    tconf = _train_config(cfg, seed, attack=attack)
    if cfg.has_section("model") and cfg.has_option("model", "checkpoint"):
        # warm start: fine-tune an existing checkpoint instead of fresh weights
        model = _load_model(cfg)
        if len(ds.class_names) != model.num_classes:
            raise ConfigError("checkpoint and dataset disagree on class count")
    else:
        model = _build_model_from(cfg, len(ds.class_names), seed)
    with _StageDir(out, overwrite) as tmp:
        model, record = train(model, ds, tconf,
                              checkpoint_dir=os.path.join(tmp, "checkpoints"),
                              verbose=True)
        record.write_csv(os.path.join(tmp, "record.csv"))
        specs = [attack] if adversarial else _attack_specs(cfg)
        rows = _eval_rows(model, eval_ds, stage, model.architecture, specs, seed)
        if stage == "robust-train":
            # the train split is scored on the data actually trained on
            rows = [r for r in rows if r["split"] != "train"]
            rows.insert(0, evaluate(model, ds, "train").as_row(
                stage, model.architecture, "train"))
        val_idx = eval_ds.indices("val")
        show = val_idx[:4] if len(val_idx) else eval_ds.indices("train")[:4]
        _qualitative_grid(model, eval_ds, show,
                          os.path.join(tmp, "qualitative.png"))
        _finish_stage(tmp, cfg, rows, out=out, seed=seed)
    print(f"{stage}: done -> {out}")
    return EXIT_OK


def cmd_train(cfg, out, seed, overwrite) -> int:
    return _run_training(cfg, out, seed, overwrite, stage="train",
                         adversarial=False)


def cmd_adv_train(cfg, out, seed, overwrite) -> int:
    return _run_training(cfg, out, seed, overwrite, stage="adv-train",
                         adversarial=True)


def cmd_robust_train(cfg, out, seed, overwrite) -> int:
    return _run_training(cfg, out, seed, overwrite, stage="robust-train",
                         adversarial=False)


def cmd_attack_eval(cfg, out, seed, overwrite) -> int:
    ds = _load_data(cfg)
    model = _load_model(cfg)
    if len(ds.class_names) != model.num_classes:
        raise ConfigError("checkpoint and dataset disagree on class count")
    specs = _attack_specs(cfg)
    with _StageDir(out, overwrite) as tmp:
        rows = _eval_rows(model, ds, "attack-eval", model.architecture, specs, seed)
        _finish_stage(tmp, cfg, rows, out=out, seed=seed)
    print(f"attack-eval: {len(specs)} attack(s) -> {out}")
    return EXIT_OK


def cmd_robustify(cfg, out, seed, overwrite) -> int:
    ds = _load_data(cfg)
    model = _load_model(cfg)
    rconf = RobustifyConfig(
        steps=_get(cfg, "robustify", "steps", 100, int),
        step_norm=_get(cfg, "robustify", "step_norm", 0.1, float),
        seed=seed,
        batch_size=_get(cfg, "robustify", "batch_size", 16, int),
    )
    try:
        rconf.validate()
    except ValueError as exc:
        raise ConfigError(f"bad [robustify] settings: {exc}") from exc
    with _StageDir(out, overwrite) as tmp:
        result = robustify_dataset(model, ds, rconf)
        save_dataset(result.dataset, tmp)
        lines = ["index,source,initial_distance,final_distance"]
        for i in range(len(ds)):
            lines.append(f"{i},{result.pairing[i]},"
                         f"{result.initial_distance[i]:.6f},"
                         f"{result.final_distance[i]:.6f}")
        _write(os.path.join(tmp, "distances.csv"), "\n".join(lines) + "\n")
        prov = result.provenance
        improved = float(np.mean(result.final_distance < result.initial_distance))
        _write(os.path.join(tmp, "summary.md"),
               f"robustified {len(ds)} images against model "
               f"{prov['model_hash'][:16]}\n\n"
               f"mean representation distance: "
               f"{prov['mean_initial_distance']:.4f} -> "
               f"{prov['mean_final_distance']:.4f}\n\n"
               f"samples improved: {improved:.4f}\n")
        _echo_config(cfg, os.path.join(tmp, "config.ini"), out=out, seed=seed)
    print(f"robustify: {len(ds)} images -> {out}")
    return EXIT_OK


def cmd_viz(cfg, out, seed, overwrite) -> int:
    ds = _load_data(cfg)
    model = _load_model(cfg)
    index = _get(cfg, "viz", "index", 0, int)
    if not 0 <= index < len(ds):
        raise ConfigError(f"viz index {index} outside dataset of {len(ds)}")
    layers = _get(cfg, "viz", "layers", "", str)
    names = [l.strip() for l in layers.split(",") if l.strip()] or [None]
    image = ds.images[index]
    with _StageDir(out, overwrite) as tmp:
        _qualitative_grid(model, ds, [index], os.path.join(tmp, "sample.png"))
        for name in names:
            grid = dump_activations(model, image, layer=name)
            label = name or model.penultimate_conv
            save_image_png(os.path.join(tmp, f"activations_{label}.png"), grid)
        _echo_config(cfg, os.path.join(tmp, "config.ini"), out=out, seed=seed)
    print(f"viz: sample {index} -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# compare


_JOIN_KEYS = ("stage", "model", "attack", "split")
_METRIC_KEYS = ("miou", "pixel_acc", "loss")


def cmd_compare(baseline_path: str, candidate_path: str, out: str | None,
                tolerance: float | None) -> int:
    try:
        base = {tuple(r[k] for k in _JOIN_KEYS): r
                for r in parse_results_csv(open(baseline_path).read())}
        cand = {tuple(r[k] for k in _JOIN_KEYS): r
                for r in parse_results_csv(open(candidate_path).read())}
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read results: {exc}") from exc
    shared = [k for k in base if k in cand]
    if not shared:
        raise ConfigError("the two results files share no (stage,model,attack,split) rows")
    lines = ["| stage | model | attack | split | Δ mIoU | Δ pixel acc | Δ loss |",
             "|-------|-------|--------|-------|--------|-------------|--------|"]
    regressions = []
    for key in shared:
        b, c = base[key], cand[key]
        deltas = {m: float(c[m]) - float(b[m]) for m in _METRIC_KEYS}
        lines.append("| " + " | ".join(key) +
                     f" | {deltas['miou']:+.4f} | {deltas['pixel_acc']:+.4f} "
                     f"| {deltas['loss']:+.4f} |")
        if tolerance is not None and deltas["miou"] < -tolerance:
            regressions.append((key, deltas["miou"]))
    missing = [k for k in base if k not in cand]
    report = "\n".join(lines) + "\n"
    if missing:
        report += f"\nrows missing from candidate: {len(missing)}\n"
    print(report, end="")
    if out:
        os.makedirs(os.path.dirname(os.path.abspath(out)) or ".", exist_ok=True)
        _write(out, report)
    if regressions:
        for key, delta in regressions:
            print(f"REGRESSION {'/'.join(key)}: mIoU {delta:+.4f} "
                  f"(tolerance {tolerance})")
        return EXIT_REGRESSION
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    """argparse's default usage exit code collides with our config code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="advseg",
        description="Adversarial-robustness experiments for semantic segmentation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def stage(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="INI config file")
        p.add_argument("--out", help="stage output directory "
                                     "(or ADVSEG_OUT, or [run] out)")
        p.add_argument("--seed", type=int,
                       help="run seed (or ADVSEG_SEED, or [run] seed)")
        p.add_argument("--overwrite", action="store_true",
                       help="replace a non-empty output directory")
        return p

    stage("gen-data", "generate the synthetic dataset")
    stage("train", "standard training")
    stage("adv-train", "adversarial training with the configured attack")
    stage("attack-eval", "evaluate a checkpoint clean and under attacks")
    stage("robustify", "rebuild a dataset by representation inversion")
    stage("robust-train", "train on a robustified set, evaluate on the original")
    stage("viz", "qualitative sample and activation grids")

    cmp_p = sub.add_parser("compare", help="diff two results.csv files")
    cmp_p.add_argument("baseline")
    cmp_p.add_argument("candidate")
    cmp_p.add_argument("--out", help="write the comparison table here")
    cmp_p.add_argument("--tolerance", type=float,
                       help="flag mIoU drops larger than this (exit 4)")
    return parser


_STAGES = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "adv-train": cmd_adv_train,
    "attack-eval": cmd_attack_eval,
    "robustify": cmd_robustify,
    "robust-train": cmd_robust_train,
    "viz": cmd_viz,
}


def _resolve_run_options(args, cfg):
    out = args.out or os.environ.get("ADVSEG_OUT") \
        or _get(cfg, "run", "out", None)
    if not out:
        raise ConfigError("no output directory: pass --out, set ADVSEG_OUT, "
                          "or set [run] out in the config")
    if args.seed is not None:
        seed = args.seed
    elif os.environ.get("ADVSEG_SEED"):
        try:
            seed = int(os.environ["ADVSEG_SEED"])
        except ValueError as exc:
            raise ConfigError(f"ADVSEG_SEED is not an integer: "
                              f"{os.environ['ADVSEG_SEED']!r}") from exc
    else:
        seed = _get(cfg, "run", "seed", 0, int)
    overwrite = args.overwrite or _get(cfg, "run", "overwrite", False, _bool)
    return out, seed, overwrite


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "compare":
            return cmd_compare(args.baseline, args.candidate, args.out,
                               args.tolerance)
        cfg = configparser.ConfigParser()
        if args.config:
            if not os.path.exists(args.config):
                raise ConfigError(f"config file not found: {args.config}")
            try:
                cfg.read(args.config)
            except configparser.Error as exc:
                raise ConfigError(f"cannot parse {args.config}: {exc}") from exc
        out, seed, overwrite = _resolve_run_options(args, cfg)
        return _STAGES[args.command](cfg, out, seed, overwrite)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
