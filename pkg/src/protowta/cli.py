"""Command-line entry point.

Subcommands: train, eval, convert, reject, adversarial, viz, xval-lr.
Values resolve as built-in defaults < config file (key=value lines,
'#' comments) < explicit flags, and the materialized result lands in a
manifest.json next to every run's outputs. Heavy imports are deferred
so --threads can cap the BLAS pools before numpy loads.
"""

import argparse
import json
import os
import sys
import time

from . import __version__

_THREAD_ENV = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
               "NUMEXPR_NUM_THREADS")

FAMILIES = ("ip", "ed", "pn_ip", "pn_ed")


class UsageError(Exception):
    """Bad flag combination or missing required value."""


def _read_config(path):
    values = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, val = line.split("=", 1)
            values[key.strip()] = val.strip()
    return values


def _coerce(text, typ, key):
    if typ is str:
        return text
    if typ is bool:
        low = text.lower()
        if low in ("1", "true", "yes"):
            return True
        if low in ("0", "false", "no"):
            return False
        raise UsageError(f"{key}: expected a boolean, got {text!r}")
    if typ == "beta" and text == "auto":
        return text
    try:
        return float(text) if typ == "beta" else typ(text)
    except ValueError as exc:
        raise UsageError(f"{key}: {exc}") from exc


def _resolve(args, option_spec):
    """Merge flag values, config-file values, and built-in defaults."""
    from_file = _read_config(args.config) if getattr(args, "config", None) else {}
    resolved = {}
    for key, (typ, default) in option_spec.items():
        val = getattr(args, key, None)
        if val is None and key in from_file:
            val = _coerce(from_file[key], typ, key)
        if val is None:
            val = default
        resolved[key] = val
    return resolved


def _require(resolved, *keys):
    for key in keys:
        if resolved[key] is None:
            raise UsageError(f"missing required value: --{key.replace('_', '-')}")


def _run_dir(args, command):
    out = getattr(args, "out", None)
    if out:
        os.makedirs(out, exist_ok=True)
        return out
    base = time.strftime("%Y%m%d-%H%M%S") + "-" + command
    path = base
    counter = 2
    while os.path.exists(path):
        path = f"{base}-{counter}"
        counter += 1
    os.makedirs(path)
    return path


def _write_manifest(run_dir, command, resolved, seeds, inputs, outputs, t0):
    manifest = {
        "command": command,
        "tool_version": __version__,
        "config": {k: v for k, v in sorted(resolved.items())},
        "seeds": seeds,
        "inputs": inputs,
        "outputs": sorted(outputs),
        "duration_seconds": round(time.time() - t0, 3),
    }
    path = os.path.join(run_dir, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, default=str)
        f.write("\n")
    return path


def _load_dataset(images_path, labels_path, classes, name):
    from . import data

    images = data.load_idx_images(images_path)
    labels = data.load_idx_labels(labels_path) if labels_path else None
    if classes is None:
        classes = int(labels.max()) + 1 if labels is not None and len(labels) else 1
    return data.assemble_dataset(images, labels, classes, name), images.shape[1:]


_TRAIN_SPEC = {
    "family": (str, "pn_ed"),
    "train_images": (str, None),
    "train_labels": (str, None),
    "classes": (int, None),
    "epochs": (int, 200),
    "lr0": (float, 1.0),
    "lr_decay": (float, 0.5),
    "neurons_per_class": (int, 6),
    "init": (str, "kmeans"),
    "beta0": ("beta", "auto"),
    "noise_sigma": (float, 0.01),
    "shuffle_seed": (int, 0),
    "init_seed": (int, 0),
    "init_from": (str, None),
}


def _train_config(resolved):
    from .train import TrainConfig

    return TrainConfig(
        epochs=resolved["epochs"], lr0=resolved["lr0"],
        lr_decay=resolved["lr_decay"],
        neurons_per_class=resolved["neurons_per_class"],
        init=resolved["init"], beta0=resolved["beta0"],
        noise_sigma=resolved["noise_sigma"],
        shuffle_seed=resolved["shuffle_seed"],
        init_seed=resolved["init_seed"])


def cmd_train(args):
    from . import models, train, viz

    t0 = time.time()
    resolved = _resolve(args, _TRAIN_SPEC)
    _require(resolved, "train_images", "train_labels")
    family = resolved["family"]
    if family not in FAMILIES:
        raise UsageError(f"family must be one of {FAMILIES}, got {family!r}")
    dataset, _ = _load_dataset(resolved["train_images"],
                               resolved["train_labels"],
                               resolved["classes"], "train")
    config = _train_config(resolved)

    run_dir = _run_dir(args, "train")
    if resolved["init_from"]:
        if family != "ed":
            raise UsageError("--init-from is only supported for the ed family")
        init_model = models.load_model(resolved["init_from"])
        if not isinstance(init_model, models.EdWtaModel):
            raise UsageError("--init-from must point at an ed model")
        model, stats = train.train_ed_wta(dataset, config, init_model=init_model)
    else:
        model, stats = train.TRAINERS[family](dataset, config)

    model_path = os.path.join(run_dir, "model.json")
    stats_path = os.path.join(run_dir, "stats.csv")
    fig_path = os.path.join(run_dir, "stats.png")
    models.save_model(model, model_path)
    train.write_stats_csv(stats, stats_path)
    viz.plot_train_stats(stats, fig_path)
    last = stats[-1]
    print(f"trained {family} on {dataset.n} samples: "
          f"final loss {last.loss:.6f}, train accuracy {last.train_acc:.4f}")
    print(f"model written to {model_path}")
    _write_manifest(run_dir, "train", resolved,
                    {"shuffle_seed": config.shuffle_seed,
                     "init_seed": config.init_seed},
                    {"train_images": resolved["train_images"],
                     "train_labels": resolved["train_labels"]},
                    [model_path, stats_path, fig_path], t0)
    return 0


_EVAL_SPEC = {
    "model": (str, None),
    "images": (str, None),
    "labels": (str, None),
    "classes": (int, None),
}


def cmd_eval(args):
    from . import models, train

    t0 = time.time()
    resolved = _resolve(args, _EVAL_SPEC)
    _require(resolved, "model", "images", "labels")
    model = models.load_model(resolved["model"])
    dataset, _ = _load_dataset(resolved["images"], resolved["labels"],
                               resolved["classes"] or model.assignment.K,
                               "eval")
    accuracy = train.evaluate_accuracy(model, dataset)
    confusion = train.confusion_counts(model, dataset)

    run_dir = _run_dir(args, "eval")
    report_path = os.path.join(run_dir, "eval.txt")
    confusion_path = os.path.join(run_dir, "confusion.csv")
    with open(report_path, "w") as f:
        f.write(f"samples {dataset.n}\naccuracy {accuracy:.6f}\n")
    import numpy as np

    np.savetxt(confusion_path, confusion, fmt="%d", delimiter=",",
               header="rows: true class, cols: predicted class")
    print(f"accuracy {accuracy:.4%} on {dataset.n} samples")
    _write_manifest(run_dir, "eval", resolved, {},
                    {"model": resolved["model"], "images": resolved["images"],
                     "labels": resolved["labels"]},
                    [report_path, confusion_path], t0)
    return 0


_CONVERT_SPEC = {
    "model": (str, None),
    "to": (str, None),
    "alpha": (float, 1.0),
    "gamma": (float, None),
    "images": (str, None),
    "labels": (str, None),
    "classes": (int, None),
}


def cmd_convert(args):
    from . import models

    t0 = time.time()
    resolved = _resolve(args, _CONVERT_SPEC)
    _require(resolved, "model", "to")
    source = models.load_model(resolved["model"])
    family = models.model_family(source)
    target = resolved["to"]
    extra = {}

    if target == "ip" and family == "ed":
        converted = models.ed_to_ip(source)
    elif target == "ip" and family == "pn_ed":
        converted = models.pn_ed_collapse(source)
    elif target == "ed" and family == "ip":
        converted = models.ip_to_ed(source, alpha=resolved["alpha"],
                                    gamma=resolved["gamma"])
        extra = {"alpha": resolved["alpha"], "gamma": resolved["gamma"]}
    elif target == "natural_ed" and family == "ip":
        _require(resolved, "images", "labels")
        dataset, _ = _load_dataset(resolved["images"], resolved["labels"],
                                   resolved["classes"], "fit")
        fit, converted = models.natural_ed_fit(source, dataset)
        extra = {"alpha": fit.alpha, "iterations": fit.iterations,
                 "converged": fit.converged,
                 "energy_trace": list(fit.energy_trace)}
        print(f"fixed point: alpha {fit.alpha:.6f} after {fit.iterations} "
              f"iterations (converged: {fit.converged})")
    elif target == "strip_d" and family == "ed":
        converted = models.strip_ed_biases(source)
    else:
        raise UsageError(
            f"unsupported conversion {family} -> {target}; valid: ed->ip, "
            "ip->ed, ip->natural_ed, pn_ed->ip, ed->strip_d")

    run_dir = _run_dir(args, "convert")
    model_path = os.path.join(run_dir, "model.json")
    models.save_model(converted, model_path)
    print(f"converted {family} -> {target}: {model_path}")
    resolved_out = dict(resolved)
    resolved_out.update(extra)
    _write_manifest(run_dir, "convert", resolved_out, {},
                    {"model": resolved["model"]}, [model_path], t0)
    return 0


_REJECT_SPEC = {
    "model": (str, None),
    "in_images": (str, None),
    "in_labels": (str, None),
    "out_images": (str, None),
    "out_dir": (str, None),
    "permissive": (bool, False),
}


def _load_outlier_features(resolved, cell_shape):
    """Outlier set from an IDX file or a grayscale directory, resized."""
    import numpy as np

    from . import data

    rows, cols = cell_shape
    if resolved["out_images"]:
        images = data.load_idx_images(resolved["out_images"])
        if images.shape[1:] != (rows, cols):
            images = np.stack([data.resize_bilinear(im, rows, cols)
                               for im in images])
    elif resolved["out_dir"]:
        raw = data.load_grayscale_dir(resolved["out_dir"],
                                      permissive=resolved["permissive"])
        images = np.stack([data.resize_bilinear(im, rows, cols) for im in raw])
    else:
        raise UsageError("need --out-images or --out-dir for the outlier set")
    return data.assemble_dataset(images, None, 1, "outliers")


def cmd_reject(args):
    import numpy as np

    from . import models, openset, viz

    t0 = time.time()
    resolved = _resolve(args, _REJECT_SPEC)
    _require(resolved, "model", "in_images")
    model = models.load_model(resolved["model"])
    if not isinstance(model, models.PnEdWtaModel):
        raise UsageError("reject needs a pn_ed model")
    in_set, cell_shape = _load_dataset(resolved["in_images"],
                                       resolved["in_labels"],
                                       model.assignment.K, "in-set")
    out_set = _load_outlier_features(resolved, cell_shape)

    run_dir = _run_dir(args, "reject")
    outputs = []
    for measure in openset.MEASURES:
        sweep = openset.threshold_sweep(model, in_set, out_set, measure)
        csv_path = os.path.join(run_dir, f"sweep_{measure}.csv")
        fig_path = os.path.join(run_dir, f"sweep_{measure}.png")
        sweep.to_csv(csv_path)
        viz.plot_sweep(sweep, fig_path, title=f"measure: {measure}")
        outputs += [csv_path, fig_path]
        best = openset.best_threshold(sweep)
        i = int(np.flatnonzero(sweep.thresholds == best)[0])
        print(f"{measure}: best threshold {best:.2f} -> acceptance "
              f"{sweep.acceptance_rate[i]:.4f}, rejection "
              f"{sweep.rejection_rate[i]:.4f}")
    _write_manifest(run_dir, "reject", resolved, {},
                    {"model": resolved["model"],
                     "in_images": resolved["in_images"],
                     "out_images": resolved["out_images"],
                     "out_dir": resolved["out_dir"]}, outputs, t0)
    return 0


_ADV_SPEC = {
    "model": (str, None),
    "test_images": (str, None),
    "test_labels": (str, None),
    "type1_count": (int, 10000),
    "type2_limit": (int, None),
    "step_size": (float, 0.1),
    "max_iters": (int, 500),
    "target_confidence": (float, 0.99),
    "attack_seed": (int, 0),
}


def cmd_adversarial(args):
    import numpy as np

    from . import adversarial, models, openset, viz

    t0 = time.time()
    resolved = _resolve(args, _ADV_SPEC)
    _require(resolved, "model", "test_images", "test_labels")
    model = models.load_model(resolved["model"])
    if not isinstance(model, models.PnEdWtaModel):
        raise UsageError("adversarial needs a pn_ed model")
    collapsed = models.pn_ed_collapse(model)
    test_set, cell_shape = _load_dataset(resolved["test_images"],
                                         resolved["test_labels"],
                                         model.assignment.K, "test")
    config = adversarial.AdversarialConfig(
        step_size=resolved["step_size"], max_iters=resolved["max_iters"],
        target_confidence=resolved["target_confidence"],
        seed=resolved["attack_seed"])

    type1 = adversarial.gen_type1(collapsed, resolved["type1_count"], config)
    src = test_set
    if resolved["type2_limit"] is not None:
        src = test_set.subset(np.arange(min(resolved["type2_limit"],
                                            test_set.n)))
    type2 = adversarial.gen_type2(collapsed, src, config)
    corpus = adversarial.AdversarialSet(
        np.vstack([type1.features, type2.features]),
        np.concatenate([type1.source_index, type2.source_index]),
        np.concatenate([type1.source_labels, type2.source_labels]),
        np.concatenate([type1.target_labels, type2.target_labels]),
        np.concatenate([type1.achieved_p_ip, type2.achieved_p_ip]),
        np.concatenate([type1.iterations, type2.iterations]),
        np.concatenate([type1.converged, type2.converged]))
    print(f"generated {type1.n} Type-1 + {type2.n} Type-2 samples "
          f"({int(corpus.converged.sum())} reached the target confidence)")

    run_dir = _run_dir(args, "adversarial")
    idx_path = os.path.join(run_dir, "adversarial.idx")
    manifest_csv = os.path.join(run_dir, "adversarial.csv")
    adversarial.write_adversarial_idx(corpus, idx_path, *cell_shape)
    adversarial.write_adversarial_manifest(corpus, manifest_csv)

    outputs = [idx_path, manifest_csv]
    for measure in openset.MEASURES:
        sweep = openset.threshold_sweep(model, test_set, corpus.features,
                                        measure)
        csv_path = os.path.join(run_dir, f"sweep_{measure}.csv")
        fig_path = os.path.join(run_dir, f"sweep_{measure}.png")
        sweep.to_csv(csv_path)
        viz.plot_sweep(sweep, fig_path, title=f"measure: {measure}")
        outputs += [csv_path, fig_path]
        best = openset.best_threshold(sweep)
        i = int(np.flatnonzero(sweep.thresholds == best)[0])
        print(f"{measure}: best threshold {best:.2f} -> acceptance "
              f"{sweep.acceptance_rate[i]:.4f}, rejection "
              f"{sweep.rejection_rate[i]:.4f}")
    _write_manifest(run_dir, "adversarial", resolved,
                    {"attack_seed": resolved["attack_seed"]},
                    {"model": resolved["model"],
                     "test_images": resolved["test_images"],
                     "test_labels": resolved["test_labels"]},
                    outputs, t0)
    return 0


_VIZ_SPEC = {
    "model": (str, None),
    "cell_rows": (int, None),
    "cell_cols": (int, None),
    "colormap": (str, "signed_green_red"),
}


def _grid_spec(model, resolved):
    import numpy as np

    from . import viz

    asg = model.assignment
    counts = np.bincount(asg.class_of, minlength=asg.K)
    if not (counts == counts[0]).all():
        raise ValueError("grid layout needs the same neuron count per class")
    rows, cols = resolved["cell_rows"], resolved["cell_cols"]
    if rows is None or cols is None:
        side = int(round(model.D ** 0.5))
        if side * side != model.D:
            raise UsageError(
                f"feature dimension {model.D} is not square; pass "
                "--cell-rows/--cell-cols")
        rows = cols = side
    return viz.GridSpec(asg.K, int(counts[0]), rows, cols,
                        resolved["colormap"])


def _class_major_order(assignment):
    import numpy as np

    return np.argsort(assignment.class_of, kind="stable")


def cmd_viz(args):
    from . import models, viz

    t0 = time.time()
    resolved = _resolve(args, _VIZ_SPEC)
    _require(resolved, "model")
    model = models.load_model(resolved["model"])
    spec = _grid_spec(model, resolved)
    order = _class_major_order(model.assignment)
    run_dir = _run_dir(args, "viz")
    ext = ".pgm" if resolved["colormap"] == "grayscale" else ".png"

    family = models.model_family(model)
    if family == "pn_ed":
        panels = {"pos": model.c_plus, "neg": model.c_minus,
                  "diff": model.c_plus - model.c_minus}
    elif family == "pn_ip":
        wp = model.w_plus[:, :-1]
        wm = model.w_minus[:, :-1]
        panels = {"pos": wp, "neg": wm, "diff": wp - wm}
    elif family == "ip":
        panels = {"weights": model.weights}
    else:
        panels = {"centers": model.centers}

    outputs = []
    for name, matrix in panels.items():
        image = viz.render_signed_grid(matrix[order], spec)
        path = os.path.join(run_dir, name + ext)
        viz.write_image(image, path)
        outputs.append(path)
        print(f"wrote {path}")
    _write_manifest(run_dir, "viz", resolved, {},
                    {"model": resolved["model"]}, outputs, t0)
    return 0


_XVAL_SPEC = {
    "family": (str, "pn_ed"),
    "train_images": (str, None),
    "train_labels": (str, None),
    "classes": (int, None),
    "grid": (str, "0.01,0.1,1,10,100"),
    "epochs": (int, 20),
    "lr_decay": (float, 0.5),
    "neurons_per_class": (int, 6),
    "init": (str, "kmeans"),
    "beta0": ("beta", "auto"),
    "noise_sigma": (float, 0.01),
    "shuffle_seed": (int, 0),
    "init_seed": (int, 0),
}


def cmd_xval_lr(args):
    import csv as csvmod

    from . import train

    t0 = time.time()
    resolved = _resolve(args, _XVAL_SPEC)
    _require(resolved, "train_images", "train_labels")
    family = resolved["family"]
    if family not in FAMILIES:
        raise UsageError(f"family must be one of {FAMILIES}, got {family!r}")
    grid = tuple(float(v) for v in resolved["grid"].split(",") if v.strip())
    dataset, _ = _load_dataset(resolved["train_images"],
                               resolved["train_labels"],
                               resolved["classes"], "train")
    config = train.TrainConfig(
        epochs=resolved["epochs"], lr0=1.0, lr_decay=resolved["lr_decay"],
        neurons_per_class=resolved["neurons_per_class"],
        init=resolved["init"], beta0=resolved["beta0"],
        noise_sigma=resolved["noise_sigma"],
        shuffle_seed=resolved["shuffle_seed"],
        init_seed=resolved["init_seed"])
    best_lr, results = train.cross_validate_lr(dataset, config, grid, family)

    run_dir = _run_dir(args, "xval-lr")
    table_path = os.path.join(run_dir, "xval.csv")
    with open(table_path, "w", newline="") as f:
        writer = csvmod.writer(f)
        writer.writerow(["lr0", "mean_val_accuracy"])
        for lr in sorted(results):
            writer.writerow([repr(lr), f"{results[lr]:.6f}"])
    print(f"selected lr0 = {best_lr} "
          f"(mean validation accuracy {results[best_lr]:.4f})")
    _write_manifest(run_dir, "xval-lr", resolved,
                    {"shuffle_seed": resolved["shuffle_seed"],
                     "init_seed": resolved["init_seed"]},
                    {"train_images": resolved["train_images"],
                     "train_labels": resolved["train_labels"]},
                    [table_path], t0)
    return 0


def _add_common(sub):
    sub.add_argument("--config", help="key=value config file")
    sub.add_argument("--out", help="output directory (default: timestamped)")
    sub.add_argument("--threads", type=int,
                     help="cap BLAS worker threads for this run")


def _add_options(sub, spec, skip=()):
    for key, (typ, _default) in spec.items():
        if key in skip:
            continue
        flag = "--" + key.replace("_", "-")
        if typ is bool:
            sub.add_argument(flag, action="store_const", const=True)
        elif typ == "beta":
            sub.add_argument(flag, type=lambda s: s if s == "auto"
                             else float(s))
        else:
            sub.add_argument(flag, type=typ)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="protowta",
        description="Prototype-based winner-take-all classifiers")
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True)

    for name, spec, func in (
            ("train", _TRAIN_SPEC, cmd_train),
            ("eval", _EVAL_SPEC, cmd_eval),
            ("convert", _CONVERT_SPEC, cmd_convert),
            ("reject", _REJECT_SPEC, cmd_reject),
            ("adversarial", _ADV_SPEC, cmd_adversarial),
            ("viz", _VIZ_SPEC, cmd_viz),
            ("xval-lr", _XVAL_SPEC, cmd_xval_lr)):
        sub = subs.add_parser(name)
        _add_common(sub)
        _add_options(sub, spec)
        sub.set_defaults(func=func)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads:
        for var in _THREAD_ENV:
            os.environ[var] = str(args.threads)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
