"""Command-line surface: one JSON config, flag overrides, reproducible outputs.

Every artifact-writing command materializes into a temporary sibling
directory and renames it into place on success, writes a resolved-config
echo, and is byte-reproducible under a fixed seed.

Exit codes: 0 success, 1 validation/configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import shutil
import sys
import uuid
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import evaluation as ev
from . import inference
from .contrastive import (
    TrainConfig,
    build_loss_graph,
    fit,
    load_checkpoint,
    save_checkpoint,
)
from .data import (
    DataFormatError,
    GenConfig,
    load_dataset,
    load_slide,
    synth_generate,
    transform_slide,
)
from .encoders import EncoderConfig, init_params

log = logging.getLogger(__name__)

SEED_ENV_VAR = "STEXP_SEED"

DEFAULT_CONFIG = {
    "seed": 0,
    "data": {
        "slides": 4,
        "spots_per_slide": 128,
        "gene_num": 96,
        "domains": 4,
        "signal": 1.0,
        "patch": [3, 32, 32],
        "coord_max": 256,
        "library_size": 4000,
        "hvg_num": 64,
    },
    "encoder": {
        "d_embed": 256,
        "n_heads": 4,
        "n_positions": 256,
        "conv_channels": [16, 32, 64],
        "proj_hidden": 256,
        "use_positional": True,
        "use_mhsa": True,
        "attn_residual": True,
        "image_identity": False,
    },
    "train": {
        "batch_size": 64,
        "epochs": 40,
        "learning_rate": 1e-3,
        "temperature": 1.0,
        "learn_temperature": False,
        "beta1": 0.9,
        "beta2": 0.999,
        "epsilon": 1e-8,
    },
    "inference": {"k": 50},
    "eval": {"heg_size": 50, "pca_components": 20, "clusters": None},
}

ABLATION_TOGGLES = ("no_positional_encoding", "no_mhsa", "no_image_path")


class ValidationError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage text + exit 1, not argparse's default 2
        raise ValidationError(f"{message}\n{self.format_usage()}")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _merge(schema: dict, incoming: dict, path: str = "") -> None:
    for key, value in incoming.items():
        where = f"{path}.{key}" if path else key
        if key not in schema:
            raise ValidationError(f"unknown config key: {where}")
        if isinstance(schema[key], dict) and isinstance(value, dict):
            _merge(schema[key], value, where)
        else:
            schema[key] = value


def _apply_set(config: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ValidationError(f"--set expects section.key=value, got {assignment!r}")
    dotted, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = config
    parts = dotted.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ValidationError(f"unknown config key: {dotted}")
        node = node[part]
    if parts[-1] not in node:
        raise ValidationError(f"unknown config key: {dotted}")
    node[parts[-1]] = value


def resolve_config(args) -> dict:
    """defaults < STEXP_SEED < --config file < --set overrides < --seed flag."""
    config = copy.deepcopy(DEFAULT_CONFIG)
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            config["seed"] = int(env_seed)
        except ValueError as e:
            raise ValidationError(f"{SEED_ENV_VAR} must be an integer, got {env_seed!r}") from e
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ValidationError(f"config file not found: {path}")
        _merge(config, json.loads(path.read_text()))
    for assignment in getattr(args, "set", None) or []:
        _apply_set(config, assignment)
    if getattr(args, "seed", None) is not None:
        config["seed"] = args.seed
    return config


def gen_config_from(config: dict) -> GenConfig:
    d = config["data"]
    return GenConfig(
        n_slides=d["slides"],
        spots_per_slide=d["spots_per_slide"],
        gene_num=d["gene_num"],
        n_domains=d["domains"],
        signal=d["signal"],
        patch_shape=tuple(d["patch"]),
        coord_max=d["coord_max"],
        library_size=d["library_size"],
    )


def encoder_config_from(config: dict, sample_slide) -> EncoderConfig:
    e = config["encoder"]
    kwargs = dict(
        hvg_num=config["data"]["hvg_num"],
        d_embed=e["d_embed"],
        n_heads=e["n_heads"],
        n_positions=e["n_positions"],
        conv_channels=tuple(e["conv_channels"]),
        proj_hidden=e["proj_hidden"],
        use_positional=e["use_positional"],
        use_mhsa=e["use_mhsa"],
        attn_residual=e["attn_residual"],
        image_identity=e["image_identity"],
    )
    if sample_slide.patches is not None:
        kwargs["input_kind"] = "pixels"
        kwargs["patch_shape"] = tuple(sample_slide.patches.shape[1:])
    else:
        kwargs["input_kind"] = "features"
        kwargs["input_feat_dim"] = sample_slide.features.shape[1]
    return EncoderConfig(**kwargs)


def train_config_from(config: dict) -> TrainConfig:
    t = config["train"]
    return TrainConfig(
        batch_size=t["batch_size"],
        epochs=t["epochs"],
        learning_rate=t["learning_rate"],
        temperature=t["temperature"],
        learn_temperature=t["learn_temperature"],
        beta1=t["beta1"],
        beta2=t["beta2"],
        epsilon=t["epsilon"],
        seed=config["seed"],
    )


# ---------------------------------------------------------------------------
# output handling
# ---------------------------------------------------------------------------


@contextmanager
def atomic_out_dir(out: str | Path):
    """Yield a staging directory that is renamed to `out` only on success."""
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        raise ValidationError(f"output directory {out} already exists and is not empty")
    out.parent.mkdir(parents=True, exist_ok=True)
    staging = out.parent / f".tmp-{out.name}-{uuid.uuid4().hex[:8]}"
    staging.mkdir()
    try:
        yield staging
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    if out.exists():
        out.rmdir()
    os.replace(staging, out)


def _write_config_echo(directory: Path, config: dict) -> None:
    (directory / "config.resolved.json").write_text(json.dumps(config, sort_keys=True, indent=1) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    config = resolve_config(args)
    with atomic_out_dir(args.out) as staging:
        synth_generate(gen_config_from(config), config["seed"], staging)
        _write_config_echo(staging, config)
    print(f"wrote dataset to {args.out}")
    return 0


def _prepare_training(args, config):
    slides = load_dataset(args.data)
    ids = [s.slide_id for s in slides]
    holdout = getattr(args, "holdout", None)
    if holdout is not None and holdout not in ids:
        raise ValidationError(f"--holdout {holdout!r} is not a slide of {args.data}")
    train_ids = [i for i in ids if i != holdout]
    from .data import preprocess

    dataset = preprocess(slides, hvg_num=config["data"]["hvg_num"], train_ids=train_ids)
    enc_cfg = encoder_config_from(config, slides[0])
    return dataset, enc_cfg


def cmd_train(args) -> int:
    config = resolve_config(args)
    dataset, enc_cfg = _prepare_training(args, config)
    checkpoint = fit(dataset, train_config_from(config), enc_cfg)
    with atomic_out_dir(args.out) as staging:
        save_checkpoint(checkpoint, staging)
        curve = ["epoch\tmean_loss"] + [
            f"{i}\t{loss:.6f}" for i, loss in enumerate(checkpoint.history)
        ]
        (staging / "loss_curve.tsv").write_text("\n".join(curve) + "\n")
        _write_config_echo(staging, config)
    print(f"trained {checkpoint.manifest['epochs_completed']} epochs, final loss "
          f"{checkpoint.manifest['final_loss']:.6f}; checkpoint at {args.out}")
    return 0


def _transformed_slides(checkpoint, slides):
    manifest = checkpoint.manifest["preprocess"]
    return [transform_slide(s, manifest) for s in slides]


def cmd_embed(args) -> int:
    config = resolve_config(args)
    checkpoint = load_checkpoint(args.checkpoint)
    slides = load_dataset(args.data)
    train_ids = set(checkpoint.manifest["preprocess"]["train_ids"])
    train_slides = [s for s in _transformed_slides(checkpoint, slides) if s.slide_id in train_ids]
    if not train_slides:
        raise ValidationError("embed: none of the checkpoint's training slides are in --data")
    index = inference.build_index(checkpoint, train_slides)
    with atomic_out_dir(args.out) as staging:
        inference.save_index(index, staging)
        _write_config_echo(staging, config)
    print(f"indexed {index.size} spots from {len(train_slides)} slides at {args.out}")
    return 0


def cmd_predict(args) -> int:
    config = resolve_config(args)
    checkpoint = load_checkpoint(args.checkpoint)
    index = inference.load_index(args.index)
    raw = load_slide(args.slide)
    slide = transform_slide(raw, checkpoint.manifest["preprocess"])
    k = args.k if args.k is not None else config["inference"]["k"]
    pred = inference.predict_slide(checkpoint, index, slide, k)
    with atomic_out_dir(args.out) as staging:
        pred.astype("<f4").tofile(staging / "expression.f32")
        meta = {
            "slide_id": slide.slide_id,
            "spot_num": slide.spot_num,
            "gene_num": pred.shape[1],
            "gene_names": slide.gene_names,
            "coord_max": slide.coord_max,
            "predicted": True,
            "k": k,
        }
        (staging / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
        _write_config_echo(staging, config)
    print(f"predicted {slide.spot_num} spots x {pred.shape[1]} genes at {args.out}")
    return 0


def cmd_eval(args) -> int:
    config = resolve_config(args)
    checkpoint = load_checkpoint(args.checkpoint)
    meta = json.loads((Path(args.pred) / "meta.json").read_text())
    pred = np.fromfile(Path(args.pred) / "expression.f32", dtype="<f4").reshape(
        meta["spot_num"], meta["gene_num"]
    )
    raw = load_slide(args.slide)
    slide = transform_slide(raw, checkpoint.manifest["preprocess"])
    if slide.spot_num != pred.shape[0] or slide.gene_num != pred.shape[1]:
        raise ValidationError(
            f"eval: prediction {pred.shape} does not match processed slide "
            f"[{slide.spot_num}, {slide.gene_num}]"
        )
    record = ev.compute_metrics(pred, slide.expression, slide_id=slide.slide_id,
                                gene_names=slide.gene_names)
    summary = {"slide_id": slide.slide_id, "pcc_acg": record.pcc_acg, "pcc_heg": record.pcc_heg,
               "mse": record.mse, "mae": record.mae}
    with atomic_out_dir(args.out) as staging:
        ev.write_metrics_tsv([record], staging / "metrics.tsv")
        ev.write_per_gene_tsv(record, staging / "per_gene.tsv")
        if slide.labels is not None:
            e = config["eval"]
            clusters = e["clusters"] or int(np.unique(slide.labels).size)
            labels = ev.detect_domains(pred, clusters, e["pca_components"], config["seed"])
            ev.write_labels_tsv(labels, staging / "labels.tsv", truth=slide.labels)
            summary["ari"] = ev.ari(labels, slide.labels)
        (staging / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
        _write_config_echo(staging, config)
    print(f"pcc_acg={record.pcc_acg:.4f} pcc_heg={record.pcc_heg:.4f} "
          f"mse={record.mse:.4f} mae={record.mae:.4f}"
          + (f" ari={summary['ari']:.4f}" if "ari" in summary else ""))
    return 0


def _run_loocv(config: dict, data_dir) -> list[ev.MetricsRecord]:
    slides = load_dataset(data_dir)
    enc_cfg = encoder_config_from(config, slides[0])
    return ev.loocv(
        slides,
        hvg_num=config["data"]["hvg_num"],
        train_cfg=train_config_from(config),
        enc_cfg=enc_cfg,
        k=config["inference"]["k"],
    )


def cmd_loocv(args) -> int:
    config = resolve_config(args)
    records = _run_loocv(config, args.data)
    with atomic_out_dir(args.out) as staging:
        ev.write_metrics_tsv(records, staging / "metrics.tsv")
        for record in records[:-1]:
            ev.write_per_gene_tsv(record, staging / f"per_gene_{record.slide_id}.tsv")
        _write_config_echo(staging, config)
    mean = records[-1]
    print(f"loocv mean: pcc_acg={mean.pcc_acg:.4f} pcc_heg={mean.pcc_heg:.4f} "
          f"mse={mean.mse:.4f} mae={mean.mae:.4f}")
    return 0


def _variant_config(config: dict, toggle: str | None = None, k: int | None = None) -> dict:
    variant = copy.deepcopy(config)
    if toggle == "no_positional_encoding":
        variant["encoder"]["use_positional"] = False
    elif toggle == "no_mhsa":
        variant["encoder"]["use_mhsa"] = False
    elif toggle == "no_image_path":
        variant["encoder"]["image_identity"] = True
    elif toggle is not None:
        raise ValidationError(f"unknown ablation toggle {toggle!r} (choose from {ABLATION_TOGGLES})")
    if k is not None:
        variant["inference"]["k"] = k
    return variant


def cmd_ablate(args) -> int:
    config = resolve_config(args)
    toggles = [t for t in (args.toggles.split(",") if args.toggles else []) if t]
    k_values = [int(x) for x in args.k_sweep.split(",")] if args.k_sweep else []
    if not toggles and not k_values:
        raise ValidationError("ablate: empty toggle set (pass --toggles and/or --k-sweep)")
    for toggle in toggles:
        if toggle not in ABLATION_TOGGLES:
            raise ValidationError(f"unknown ablation toggle {toggle!r} (choose from {ABLATION_TOGGLES})")

    variants: list[tuple[str, dict]] = [("full", config)]
    variants += [(toggle, _variant_config(config, toggle=toggle)) for toggle in toggles]
    variants += [(f"k={k}", _variant_config(config, k=k)) for k in k_values]

    rows = []
    for name, variant in variants:
        log.info("ablation variant %s", name)
        mean = _run_loocv(variant, args.data)[-1]
        rows.append((name, mean))
    with atomic_out_dir(args.out) as staging:
        lines = ["variant\tpcc_acg\tpcc_heg\tmse\tmae"]
        for name, m in rows:
            lines.append(f"{name}\t{m.pcc_acg:.6f}\t{m.pcc_heg:.6f}\t{m.mse:.6f}\t{m.mae:.6f}")
        (staging / "ablation.tsv").write_text("\n".join(lines) + "\n")
        _write_config_echo(staging, config)
    for name, m in rows:
        print(f"{name}: pcc_acg={m.pcc_acg:.4f}")
    return 0


# grad-check runs on a reduced model: exhaustive central differences on the
# full-size default would need millions of forward passes.
GRAD_CHECK_ENCODER = EncoderConfig(
    hvg_num=8, d_embed=8, n_heads=2, n_positions=16,
    conv_channels=(4,), proj_hidden=8, patch_shape=(3, 8, 8),
)


def _primitive_check_graphs(rng):
    yield "matmul", lambda p, i: dc.mean(dc.matmul(p["a"], p["b"])), {
        "a": rng.standard_normal((3, 4)), "b": rng.standard_normal((4, 2))}
    yield "add", lambda p, i: dc.mean(dc.add(p["a"], p["b"])), {
        "a": rng.standard_normal((3, 4)), "b": rng.standard_normal(4)}
    yield "scale", lambda p, i: dc.mean(dc.scale(p["a"], dc.exp(p["s"]))), {
        "a": rng.standard_normal((2, 5)), "s": np.array(0.3)}
    yield "row_softmax", lambda p, i: dc.mean(dc.matmul(dc.row_softmax(p["x"]), p["r"])), {
        "x": rng.standard_normal((4, 6)), "r": rng.standard_normal((6, 3))}
    yield "log", lambda p, i: dc.mean(dc.log(p["x"])), {"x": rng.uniform(0.5, 2.0, (3, 3))}
    yield "exp", lambda p, i: dc.mean(dc.exp(p["x"])), {"x": rng.standard_normal((3, 3))}
    yield "l2_normalize_rows", lambda p, i: dc.mean(dc.matmul(dc.l2_normalize_rows(p["x"]), p["r"])), {
        "x": rng.standard_normal((4, 5)) + 0.5, "r": rng.standard_normal((5, 2))}
    yield "transpose", lambda p, i: dc.mean(dc.matmul(dc.transpose(p["x"]), p["y"])), {
        "x": rng.standard_normal((3, 4)), "y": rng.standard_normal((3, 2))}
    yield "concat", lambda p, i: dc.mean(dc.gelu(dc.concat([p["a"], p["b"]], axis=1))), {
        "a": rng.standard_normal((3, 2)), "b": rng.standard_normal((3, 4))}
    yield "conv2d", lambda p, i: dc.mean(dc.conv2d(p["x"], p["w"], p["b"], stride=2, padding=1)), {
        "x": rng.standard_normal((2, 3, 6, 6)), "w": rng.standard_normal((4, 3, 3, 3)) * 0.5,
        "b": rng.standard_normal(4) * 0.1}
    relu_x = rng.standard_normal((4, 4))
    relu_x[np.abs(relu_x) < 0.05] += 0.1
    yield "relu", lambda p, i: dc.mean(dc.relu(p["x"])), {"x": relu_x}
    yield "gelu", lambda p, i: dc.mean(dc.gelu(p["x"])), {"x": rng.standard_normal((4, 4))}
    yield "mean", lambda p, i: dc.mean(dc.exp(dc.mean(p["x"], axis=(2, 3)))), {
        "x": rng.standard_normal((2, 3, 4, 4))}
    yield "cross_entropy_with_index_targets", lambda p, i: dc.mean(
        dc.cross_entropy_with_index_targets(p["l"], np.arange(4))), {
        "l": rng.standard_normal((4, 4))}


def run_gradient_suite(eps: float, tol: float, seed: int = 0):
    """Check every primitive plus the full 4-pair loss graph; returns (lines, all_passed)."""
    rng = np.random.default_rng(seed)
    lines = []
    all_passed = True
    for name, graph, arrays in _primitive_check_graphs(rng):
        params = dc.ParamSet()
        for pname, arr in arrays.items():
            params.add(pname, arr)
        report = dc.grad_check(graph, params, eps=eps, tol=tol)
        all_passed &= report.passed
        lines.append(f"{name}: max_rel_err={report.worst:.3e} {'pass' if report.passed else 'FAIL'}")

    cfg = GRAD_CHECK_ENCODER
    tcfg = TrainConfig(batch_size=4, epochs=1, temperature=0.5, seed=seed)
    params = init_params(cfg, seed=seed).astype(np.float64)
    patches = rng.random((4, 3, 8, 8))
    expr = rng.uniform(0.0, 4.0, (4, 8))
    coords = rng.integers(0, cfg.n_positions, (4, 2)).astype(np.uint32)

    def graph(p, inputs):
        return build_loss_graph(p, inputs[0], inputs[1], coords, cfg, tcfg)

    report = dc.grad_check(graph, params, [patches, expr], eps=eps, tol=tol)
    all_passed &= report.passed
    lines.append(f"full_loss_graph: max_rel_err={report.worst:.3e} {'pass' if report.passed else 'FAIL'}")
    return lines, all_passed


def cmd_grad_check(args) -> int:
    lines, passed = run_gradient_suite(args.eps, args.tol, seed=getattr(args, "seed", None) or 0)
    for line in lines:
        print(line)
    if args.out:
        with atomic_out_dir(args.out) as staging:
            (staging / "grad_check.txt").write_text("\n".join(lines) + "\n")
    print("gradient suite:", "pass" if passed else "FAIL")
    return 0 if passed else 2


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stexp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config entry, e.g. train.epochs=10")
        p.add_argument("--seed", type=int, help="global seed (wins over config)")
        if out_required:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a checkpoint on a dataset")
    common(p)
    p.add_argument("--data", required=True, help="dataset root directory")
    p.add_argument("--holdout", help="slide id to exclude from training")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="build a retrieval index from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("predict", help="predict expression for one slide")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--slide", required=True, help="slide directory to predict")
    p.add_argument("--k", type=int, help="neighbors to aggregate (default from config)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score a prediction against observations")
    common(p)
    p.add_argument("--pred", required=True, help="directory written by predict")
    p.add_argument("--slide", required=True, help="observed slide directory")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("loocv", help="leave-one-out cross-validation")
    common(p)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_loocv)

    p = sub.add_parser("ablate", help="run ablation variants side by side")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--toggles", help=f"comma-separated subset of {ABLATION_TOGGLES}")
    p.add_argument("--k-sweep", dest="k_sweep", help="comma-separated k values")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="optional report directory")
    p.set_defaults(func=cmd_grad_check)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (ValidationError, DataFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failures, including training divergence
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
