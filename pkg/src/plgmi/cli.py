"""Command-line pipeline: train-target, train-eval, select, train-gan, invert,
evaluate, analyze-loss, ablate. Every stage reads a manifest, checks its
upstream artifacts, and writes its outputs plus a frozen manifest echo."""

import argparse
import csv
import json
import os
import sys

import numpy as np
import torch

from . import manifest as mf
from .augment import AugmentationPolicy
from .classifiers import Classifier, TrainConfig, train_classifier
from .data import ImageBatch, load_split
from .gan import GanConfig, load_generator, save_gan_checkpoint, train_cgan, write_history_csv
from .losses import LossTrace, batched_inversion_loss, pointwise_loss_and_grad
from .metrics import build_report
from .plots import (save_ablation_curve, save_image_grid, save_loss_history,
                    save_trend_curves)
from .reconstruct import ReconstructConfig, batch_attack, load_attack_result
from .selection import assign_pseudo_labels, gather_training_set, selection_summary


class StageError(RuntimeError):
    """A stage cannot run; carries an exit-status category."""

    def __init__(self, message, status=2):
        super().__init__(message)
        self.status = status


class MissingDependencyError(StageError):
    def __init__(self, missing_stage, artifact):
        super().__init__(
            f"missing upstream artifact {artifact!r}: run the {missing_stage!r} stage first",
            status=3)


def _require(path, stage):
    if not os.path.exists(path):
        raise MissingDependencyError(stage, path)
    return path


def _paths(m):
    root = mf.run_dir(m)
    return {
        "root": root,
        "target": os.path.join(root, "checkpoints", "target.ckpt"),
        "eval": os.path.join(root, "checkpoints", "eval.ckpt"),
        "gan": os.path.join(root, "checkpoints", "gan_final.ckpt"),
        "selection": os.path.join(root, "selection.json"),
        "gan_history": os.path.join(root, "gan_history.csv"),
        "attacks": os.path.join(root, "attacks"),
        "report_json": os.path.join(root, "reports", "report.json"),
        "report_txt": os.path.join(root, "reports", "report.txt"),
        "traces": os.path.join(root, "traces"),
        "figures": os.path.join(root, "figures"),
    }


def _setup_determinism(m):
    seed = int(m["seed"])
    torch.manual_seed(seed)
    np.random.seed(seed)
    if m.get("deterministic"):
        torch.use_deterministic_algorithms(True, warn_only=True)


def _stage_done(artifact, m, force):
    """Stage idempotence: skip when the artifact exists under an unchanged manifest."""
    if force or not os.path.exists(artifact):
        return False
    frozen = os.path.join(os.path.dirname(artifact), "..", "manifest.frozen.json")
    frozen = os.path.normpath(frozen)
    if not os.path.exists(frozen):
        frozen = os.path.join(os.path.dirname(artifact), "manifest.frozen.json")
    if os.path.exists(frozen):
        with open(frozen) as f:
            return json.load(f).get("config_hash") == mf.config_hash(m)
    return False


def _load_dataset(m):
    d = m["dataset"]
    protocol = {"private_labels": d["private_labels"],
                "public_labels": d["public_labels"],
                "image_shape": d.get("image_shape"),
                "n_per_class": d.get("n_per_class", 64)}
    return load_split(d["name"], protocol, data_root=d.get("data_root", "data"),
                      seed=int(m["seed"]))


def _classifier_config(section, seed):
    return TrainConfig(epochs=int(section.get("epochs", 10)),
                       batch_size=int(section.get("batch_size", 128)),
                       lr=float(section.get("lr", 0.01)),
                       width=section.get("width"),
                       seed=seed)


def stage_train_target(m, force=False):
    p = _paths(m)
    if _stage_done(p["target"], m, force):
        return p["target"]
    split = _load_dataset(m)
    clf = train_classifier(split.private, m["target"]["architecture"],
                           _classifier_config(m["target"], int(m["seed"])))
    clf.save(p["target"])
    mf.freeze(m, p["root"])
    print(f"target trained: val acc {clf.meta.get('val_accuracy'):.4f} -> {p['target']}")
    return p["target"]


def stage_train_eval(m, force=False):
    p = _paths(m)
    if _stage_done(p["eval"], m, force):
        return p["eval"]
    cfg = _classifier_config(m["eval"], int(m["seed"]) + 1)
    d = m["dataset"]
    if m["eval"].get("train_on_full_data") and d["name"] in ("mnist", "cifar10"):
        # evaluator sees the original full label set, not just the private part
        protocol = {"private_labels": sorted(d["private_labels"] + d["public_labels"]),
                    "public_labels": [],
                    "image_shape": d.get("image_shape")}
        protocol["public_labels"] = []
        try:
            full = load_split(d["name"],
                              {**protocol, "public_labels": protocol["private_labels"][:0]},
                              data_root=d.get("data_root", "data"), seed=int(m["seed"]))
            train_batch = full.private
        except ValueError:
            raise
    else:
        train_batch = _load_dataset(m).private
    clf = train_classifier(train_batch, m["eval"]["architecture"], cfg)
    clf.save(p["eval"])
    mf.freeze(m, p["root"])
    print(f"evaluation model trained: val acc {clf.meta.get('val_accuracy'):.4f} -> {p['eval']}")
    return p["eval"]


def stage_select(m, force=False):
    p = _paths(m)
    if _stage_done(p["selection"], m, force):
        return p["selection"]
    _require(p["target"], "train-target")
    split = _load_dataset(m)
    target = Classifier.load(p["target"])
    dr = assign_pseudo_labels(split.public, target, int(m["selection"]["n"]),
                              K=target.K, score_kind=m["selection"]["score_kind"])
    dr.save(p["selection"])
    mf.freeze(m, p["root"])
    summary = selection_summary(dr)
    print(f"selected {dr.n} images per class for {dr.K} classes; "
          f"{summary['duplicate_count']} duplicates -> {p['selection']}")
    return p["selection"]


def _gan_config(m, checkpoint_dir):
    g = m["gan"]
    return GanConfig(latent_dim=int(g["latent_dim"]), base_ch=int(g["base_ch"]),
                     batch_size=int(g["batch_size"]), g_lr=float(g["g_lr"]),
                     d_lr=float(g["d_lr"]), betas=tuple(g["betas"]),
                     alpha=float(g["alpha"]), inv_loss=g["inv_loss"],
                     total_iters=int(g["total_iters"]), d_steps=int(g["d_steps"]),
                     policy=AugmentationPolicy.from_dict(g["aug"]),
                     seed=int(m["seed"]), checkpoint_dir=checkpoint_dir,
                     checkpoint_every=int(g["checkpoint_every"]))


def stage_train_gan(m, force=False):
    p = _paths(m)
    if _stage_done(p["gan"], m, force):
        return p["gan"]
    _require(p["target"], "train-target")
    _require(p["selection"], "select")
    from .selection import PseudoLabeledDataset
    split = _load_dataset(m)
    target = Classifier.load(p["target"])
    dr = PseudoLabeledDataset.load(p["selection"])
    images, labels = gather_training_set(split.public, dr)
    cfg = _gan_config(m, os.path.join(p["root"], "checkpoints"))
    state = train_cgan(images, labels, target, cfg, image_shape=split.image_shape)
    save_gan_checkpoint(p["gan"], state.generator, state.discriminator, cfg, state.iteration)
    write_history_csv(state.history, p["gan_history"])
    save_loss_history(state.history, os.path.join(p["figures"], "gan_history.png"))
    mf.freeze(m, p["root"])
    print(f"GAN trained for {state.iteration} iterations -> {p['gan']}")
    return p["gan"]


def _invert_config(m):
    i = m["invert"]
    return ReconstructConfig(restarts=int(i["restarts"]), iters=int(i["iters"]),
                             m=int(i["m"]), lr=float(i["lr"]), betas=tuple(i["betas"]),
                             inv_loss=i["inv_loss"],
                             policy=AugmentationPolicy.from_dict(m["gan"]["aug"]),
                             seed=int(m["seed"]))


def stage_invert(m, force=False, jobs=1):
    p = _paths(m)
    index = os.path.join(p["attacks"], "index.csv")
    if _stage_done(index, m, force):
        return p["attacks"]
    _require(p["target"], "train-target")
    _require(p["gan"], "train-gan")
    target = Classifier.load(p["target"])
    gen = load_generator(p["gan"])
    classes = m["invert"].get("classes") or list(range(1, gen.K + 1))
    cfg = _invert_config(m)
    results, errors = batch_attack(gen, target, classes, cfg,
                                   images_per_class=int(m["invert"]["images_per_class"]),
                                   out_dir=p["attacks"])
    mf.freeze(m, p["root"])
    print(f"reconstructed {len(results)} images ({len(errors)} failures) -> {p['attacks']}")
    return p["attacks"]


def _eval_class_map(m, eval_model):
    d = m["dataset"]
    if m["eval"].get("train_on_full_data") and d["name"] in ("mnist", "cifar10"):
        full = sorted(d["private_labels"] + d["public_labels"])
        priv = sorted(d["private_labels"])
        return {k + 1: full.index(orig) + 1 for k, orig in enumerate(priv)}
    return None


def stage_evaluate(m, force=False):
    p = _paths(m)
    if _stage_done(p["report_json"], m, force):
        return p["report_json"]
    _require(p["eval"], "train-eval")
    index = _require(os.path.join(p["attacks"], "index.csv"), "invert")
    eval_model = Classifier.load(p["eval"])
    split = _load_dataset(m)
    results = []
    with open(index, newline="") as f:
        for row in csv.DictReader(f):
            path = os.path.join(p["attacks"], f"class_{row['class']}",
                                f"seed_{row['seed']}.npz")
            results.append(load_attack_result(path))
    report = build_report(results, eval_model, split,
                          config={"target_architecture": m["target"]["architecture"],
                                  "run_id": m["run_id"],
                                  "config_hash": mf.config_hash(m)},
                          class_map=_eval_class_map(m, eval_model))
    report.to_json(p["report_json"])
    os.makedirs(os.path.dirname(p["report_txt"]), exist_ok=True)
    with open(p["report_txt"], "w") as f:
        f.write(report.format_table() + "\n")
    grid = torch.stack([r.x_star for r in results[:40]])
    save_image_grid(grid, os.path.join(p["figures"], "reconstructions.png"),
                    titles=[r.target_class for r in results[:40]])
    mf.freeze(m, p["root"])
    print(report.format_table())
    return p["report_json"]


def stage_analyze_loss(m, force=False):
    """Trend curves of the rescaled gradient/loss and target logit for each L_inv."""
    p = _paths(m)
    _require(p["target"], "train-target")
    _require(p["gan"], "train-gan")
    target = Classifier.load(p["target"])
    gen = load_generator(p["gan"])
    iters = int(m["analyze"]["iters"])
    c = 1
    traces = []
    for loss_id in m["analyze"]["losses"]:
        cfg = _invert_config(m)
        trace = trend_for_loss(gen, target, c, loss_id, iters, cfg)
        trace.to_csv(os.path.join(p["traces"], f"{loss_id}.csv"))
        traces.append(trace)
    save_trend_curves(traces, os.path.join(p["figures"], "trend_curves.png"))
    mf.freeze(m, p["root"])
    print(f"wrote {len(traces)} trend traces -> {p['traces']}")
    return p["traces"]


def trend_for_loss(gen, target, c, loss_id, iters, cfg):
    """Run a stage-2 optimization under ``loss_id`` and trace logits diagnostics."""
    rng = torch.Generator().manual_seed(cfg.seed)
    z = torch.randn(1, gen.latent_dim, generator=rng).requires_grad_(True)
    opt = torch.optim.Adam([z], lr=cfg.lr, betas=cfg.betas)
    labels = torch.tensor([c])
    trace = LossTrace(loss_id=loss_id, meta={"target_class": c})
    for p_ in list(gen.parameters()) + list(target.net.parameters()):
        p_.requires_grad_(False)
    for _ in range(iters):
        x = gen.generate(z, labels)
        with torch.no_grad():
            o = target.logits(x)[0]
        val, grad = pointwise_loss_and_grad(o, c, loss_id)
        trace.append(grad.abs().sum().item(), float(val), float(o[c - 1]))
        obj = batched_inversion_loss(target.logits(x), labels, loss_id)
        opt.zero_grad()
        obj.backward()
        opt.step()
    return trace


ABLATION_AXES = {"inv_loss": ("invert", "inv_loss"),
                 "n": ("selection", "n"),
                 "alpha": ("gan", "alpha"),
                 "m": ("invert", "m")}


def ablation_sweep(m, axis, values, force=False):
    """One attack+evaluation run per axis value; shares upstream artifacts where
    the axis permits. Returns rows of (value, attack_acc, fid)."""
    if axis not in ABLATION_AXES:
        raise StageError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
    if not values:
        raise StageError("ablation values must be non-empty")
    section, key = ABLATION_AXES[axis]
    rows = []
    for value in values:
        sub = json.loads(json.dumps(m))
        sub[section][key] = value
        sub["run_id"] = f"{m['run_id']}_{axis}_{value}"
        if axis in ("inv_loss", "m"):
            # stage-2-only axes reuse the base run's trained models and selection
            _link_upstream(m, sub, ["checkpoints", "selection.json"])
        elif axis == "alpha":
            _link_upstream(m, sub, ["selection.json"])
            sub_targets(m, sub)
        else:  # n: selection and GAN both depend on it; only classifiers shared
            sub_targets(m, sub)
        try:
            run_pipeline(sub, force=force, skip_existing=True)
            with open(_paths(sub)["report_json"]) as f:
                rep = json.load(f)
            rows.append({"value": value, "attack_acc": rep["attack_acc_top1"],
                         "fid": rep["fid"]})
        except (StageError, RuntimeError, FileNotFoundError) as e:
            rows.append({"value": value, "attack_acc": None, "fid": None,
                         "error": str(e)})
    p = _paths(m)
    os.makedirs(p["root"], exist_ok=True)
    out_csv = os.path.join(p["root"], f"ablation_{axis}.csv")
    with open(out_csv, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["value", "attack_acc", "fid", "error"])
        w.writeheader()
        for r in rows:
            w.writerow({**{"error": ""}, **r})
    save_ablation_curve(rows, axis, os.path.join(p["figures"], f"ablation_{axis}.png"))
    return rows, out_csv


def _link_upstream(base, sub, names):
    base_root, sub_root = mf.run_dir(base), mf.run_dir(sub)
    os.makedirs(sub_root, exist_ok=True)
    for name in names:
        src = os.path.join(base_root, name)
        dst = os.path.join(sub_root, name)
        if os.path.exists(src) and not os.path.exists(dst):
            os.symlink(os.path.abspath(src), dst)


def sub_targets(base, sub):
    sub_root = mf.run_dir(sub)
    os.makedirs(os.path.join(sub_root, "checkpoints"), exist_ok=True)
    base_ck = os.path.join(mf.run_dir(base), "checkpoints")
    for role in ("target.ckpt", "eval.ckpt"):
        src, dst = os.path.join(base_ck, role), os.path.join(sub_root, "checkpoints", role)
        if os.path.exists(src) and not os.path.exists(dst):
            os.symlink(os.path.abspath(src), dst)
            if os.path.exists(src + ".json"):
                os.symlink(os.path.abspath(src + ".json"), dst + ".json")


def run_pipeline(m, force=False, skip_existing=False):
    """Run every stage in dependency order."""
    p = _paths(m)
    if not (skip_existing and os.path.exists(p["target"])):
        stage_train_target(m, force)
    if not (skip_existing and os.path.exists(p["eval"])):
        stage_train_eval(m, force)
    if not (skip_existing and os.path.exists(p["selection"])):
        stage_select(m, force)
    if not (skip_existing and os.path.exists(p["gan"])):
        stage_train_gan(m, force)
    stage_invert(m, force)
    stage_evaluate(m, force)


STAGES = {
    "train-target": stage_train_target,
    "train-eval": stage_train_eval,
    "select": stage_select,
    "train-gan": stage_train_gan,
    "invert": stage_invert,
    "evaluate": stage_evaluate,
    "analyze-loss": stage_analyze_loss,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="plgmi",
                                     description="Pseudo label-guided model inversion attack pipeline")
    parser.add_argument("--config", help="manifest YAML path")
    parser.add_argument("--run-id", help="override manifest run_id")
    parser.add_argument("--seed", type=int, help="override manifest seed")
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--force", action="store_true",
                        help="rerun a stage even if its artifact is up to date")
    parser.add_argument("--deterministic", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        sub.add_parser(name)
    sel = sub.choices["select"]
    sel.add_argument("--n", type=int, help="override selection.n")
    run = sub.add_parser("run", help="run the full pipeline")
    ab = sub.add_parser("ablate")
    ab.add_argument("--axis", required=True, choices=sorted(ABLATION_AXES))
    ab.add_argument("--values", required=True,
                    help="comma-separated axis values, e.g. 0,0.1,0.2")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    overrides = {}
    if args.run_id:
        overrides["run_id"] = args.run_id
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.deterministic:
        overrides["deterministic"] = True
    if getattr(args, "n", None):
        overrides["selection"] = {"n": args.n}
    try:
        m = mf.load_manifest(args.config, overrides)
        _setup_determinism(m)
        if args.command == "run":
            run_pipeline(m, force=args.force)
        elif args.command == "ablate":
            values = [json.loads(v) if v.replace(".", "").replace("-", "").isdigit() else v
                      for v in args.values.split(",")]
            rows, out_csv = ablation_sweep(m, args.axis, values, force=args.force)
            print(f"ablation sweep written to {out_csv}")
        elif args.command == "invert":
            STAGES[args.command](m, force=args.force, jobs=args.jobs)
        else:
            STAGES[args.command](m, force=args.force)
    except MissingDependencyError as e:
        print(f"dependency error: {e}", file=sys.stderr)
        return e.status
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.status
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
