"""Command-line entry point: phantom generation, victim training, attack
training, evaluation, and montages, all driven by a JSON config."""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys

import numpy as np
import torch

from . import evalreport, segmenter, tensorio, trainer
from .attacker import AttackerModel, CriticModel
from .losses import LossWeights
from .segmenter import SegTrainConfig, param_hash
from .tensorio import TensorIOError
from .trainer import TrainConfig, TrainingCollapse

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_COLLAPSE = 3


class ConfigError(ValueError):
    pass


DEFAULT_CONFIG = {
    "seed": 0,
    "out_dir": "runs/default",
    "data": {
        "kind": "phantom",
        "dir": None,  # defaults to <out_dir>/data
        "n_subjects": 20,
        "shape": [64, 64],
        "n_classes": 4,
        "n_slices": 4,
        "counts": [16, 2, 2],
    },
    "segmenter": {
        "depth": 4,
        "base_channels": 16,
        "epochs": 30,
        "batch_size": 16,
        "lr": 1e-3,
        "patch_size": [64, 64],
        "patches_per_slice": 2,
    },
    "attacker": {
        "latent_dim": 64,
        "base_channels": 16,
        "d_max": 8.0,
        "v_max": 0.3,
    },
    "trainer": {
        "learning_rate": 1e-4,
        "rmsprop_decay": 0.9,
        "rmsprop_eps": 1e-10,
        "batch_size": 8,
        "total_steps": 500,
        "critic_steps_per_gen": 5,
        "clip_value": 0.01,
        "lambda_D": 0.1,
        "lambda_V": 0.01,
        "norm_mode": "mean",
    },
    "eval": {
        "xi_list": [0.5, 2.0],
        "modes": ["DV"],
        "n_montage": 2,
    },
}


def _merge_checked(defaults: dict, user: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(defaults[key], dict) and defaults[key]:
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be an object")
            out[key] = _merge_checked(defaults[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path: str) -> dict:
    try:
        with open(path) as f:
            user = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}")
    cfg = _merge_checked(DEFAULT_CONFIG, user)
    for xi in cfg["eval"]["xi_list"]:
        if xi <= 0:
            raise ConfigError("eval.xi_list values must be > 0")
    return cfg


def _data_dir(cfg) -> str:
    return cfg["data"]["dir"] or os.path.join(cfg["out_dir"], "data")


def _require(path: str, what: str):
    if not os.path.exists(path):
        raise TensorIOError(f"{what} not found: {path}")


def _split_slices(cfg, groups=("train", "val", "test")):
    """Normalized (image, labels) slice pairs per split group."""
    ddir = _data_dir(cfg)
    _require(os.path.join(ddir, "split.json"), "dataset split")
    with open(os.path.join(ddir, "split.json")) as f:
        split = json.load(f)
    out = {}
    for group in groups:
        pairs = []
        for sid in split[f"{group}_ids"]:
            vol, lab = tensorio.load_volume(os.path.join(ddir, sid))
            vol = tensorio.normalize(vol)
            for s in range(vol.voxels.shape[0]):
                pairs.append((vol.voxels[s], lab.labels[s]))
        out[group] = pairs
    return out, split


def _guard_overwrite(path: str, force: bool):
    if os.path.exists(path) and not force:
        raise ConfigError(f"{path} exists; pass --force to overwrite")


def cmd_make_phantoms(cfg, force=False) -> int:
    data = cfg["data"]
    if data["kind"] != "phantom":
        raise ConfigError("make-phantoms requires data.kind = 'phantom'")
    n = int(data["n_subjects"])
    if n <= 0:
        raise ConfigError("empty dataset requested (data.n_subjects must be > 0)")
    ddir = _data_dir(cfg)
    _guard_overwrite(os.path.join(ddir, "split.json"), force)
    seeds = np.random.SeedSequence(cfg["seed"]).generate_state(n)
    ids = []
    for i in range(n):
        sid = f"subj_{i:03d}"
        vol, lab = tensorio.make_phantom_subject(
            int(seeds[i]), shape=tuple(data["shape"]),
            n_classes=int(data["n_classes"]), n_slices=int(data["n_slices"]),
            subject_id=sid)
        tensorio.save_volume(os.path.join(ddir, sid), vol, lab)
        ids.append(sid)
    split = tensorio.split_dataset(ids, tuple(data["counts"]), cfg["seed"])
    with open(os.path.join(ddir, "split.json"), "w") as f:
        json.dump({"train_ids": split.train_ids, "val_ids": split.val_ids,
                   "test_ids": split.test_ids, "seed": split.seed},
                  f, indent=1, sort_keys=True)
    print(f"wrote {n} phantom subjects to {ddir}")
    return EXIT_OK


def cmd_train_seg(cfg, force=False) -> int:
    slices, _ = _split_slices(cfg, ("train", "val"))
    ckpt = os.path.join(cfg["out_dir"], "segmenter")
    _guard_overwrite(os.path.join(ckpt, "manifest.json"), force)
    s = cfg["segmenter"]
    model = segmenter.build_unet(int(s["depth"]), int(s["base_channels"]),
                                 int(cfg["data"]["n_classes"]), cfg["seed"])
    model, log = segmenter.train_segmenter(
        model, slices["train"], slices["val"],
        SegTrainConfig(epochs=int(s["epochs"]), batch_size=int(s["batch_size"]),
                       lr=float(s["lr"]), patch_size=tuple(s["patch_size"]),
                       patches_per_slice=int(s["patches_per_slice"]),
                       seed=cfg["seed"]))
    segmenter.save_checkpoint(ckpt, model)
    with open(os.path.join(cfg["out_dir"], "segmenter_curve.csv"), "w") as f:
        f.write("epoch,xent,val_dice\n")
        for row in log:
            f.write(f"{row['epoch']},{row['xent']:.6f},{row['val_dice']:.6f}\n")
    best = max(row["val_dice"] for row in log) if log else 0.0
    print(f"segmenter checkpoint at {ckpt} (best val dice {best:.4f})")
    return EXIT_OK


def _attack_dir(cfg, xi: float) -> str:
    return os.path.join(cfg["out_dir"], f"attack_xi{xi:g}")


def _build_attacker_pair(cfg):
    a = cfg["attacker"]
    shape = tuple(cfg["data"]["shape"])
    gen = AttackerModel(image_size=shape, latent_dim=int(a["latent_dim"]),
                        base_channels=int(a["base_channels"]),
                        d_max=float(a["d_max"]), v_max=float(a["v_max"]),
                        seed=cfg["seed"])
    critic = CriticModel(image_size=shape, base_channels=int(a["base_channels"]),
                         seed=cfg["seed"] + 1)
    return gen, critic


def _save_attacker(path, gen, critic, cfg, xi):
    tensorio.save_arrays(
        os.path.join(path, "generator"),
        {k: v.detach().numpy() for k, v in gen.state_dict().items()},
        meta={"kind": "generator", "xi": xi, "attacker": cfg["attacker"],
              "shape": list(cfg["data"]["shape"])})
    tensorio.save_arrays(
        os.path.join(path, "critic"),
        {k: v.detach().numpy() for k, v in critic.state_dict().items()},
        meta={"kind": "critic", "xi": xi})


def load_attacker(cfg, xi: float) -> AttackerModel:
    path = os.path.join(_attack_dir(cfg, xi), "generator")
    _require(os.path.join(path, "manifest.json"), f"attacker checkpoint for xi={xi:g}")
    arrays, meta = tensorio.load_arrays(path)
    a = meta.get("attacker", cfg["attacker"])
    gen = AttackerModel(image_size=tuple(meta.get("shape", cfg["data"]["shape"])),
                        latent_dim=int(a["latent_dim"]),
                        base_channels=int(a["base_channels"]),
                        d_max=float(a["d_max"]), v_max=float(a["v_max"]))
    state = gen.state_dict()
    gen.load_state_dict(
        {k: torch.as_tensor(arrays[k]).to(state[k].dtype) for k in state})
    gen.eval()
    return gen


def cmd_train_attack(cfg, xi: float, force=False) -> int:
    if xi is None:
        raise ConfigError("train-attack requires --xi")
    if xi < 0:
        raise ConfigError("xi must be non-negative")
    seg_path = os.path.join(cfg["out_dir"], "segmenter")
    _require(os.path.join(seg_path, "manifest.json"), "segmenter checkpoint")
    seg = segmenter.load_checkpoint(seg_path)
    if not seg.frozen:
        segmenter.freeze(seg)
    slices, _ = _split_slices(cfg, ("train",))
    adir = _attack_dir(cfg, xi)
    _guard_overwrite(os.path.join(adir, "generator", "manifest.json"), force)
    t = cfg["trainer"]
    config = TrainConfig(
        learning_rate=float(t["learning_rate"]),
        rmsprop_decay=float(t["rmsprop_decay"]),
        rmsprop_eps=float(t["rmsprop_eps"]),
        batch_size=int(t["batch_size"]),
        total_steps=int(t["total_steps"]),
        critic_steps_per_gen=int(t["critic_steps_per_gen"]),
        clip_value=float(t["clip_value"]),
        seed=cfg["seed"],
        weights=LossWeights(lambda_d=float(t["lambda_D"]),
                            lambda_v=float(t["lambda_V"]),
                            xi=float(xi), norm_mode=t["norm_mode"]))
    gen, critic = _build_attacker_pair(cfg)
    images = [img for img, _ in slices["train"]]
    gen, critic, log = trainer.train_attacker(
        gen, critic, seg, images, config,
        dump_dir=os.path.join(adir, "collapse_dump"))
    _save_attacker(adir, gen, critic, cfg, xi)
    log.to_csv(os.path.join(adir, "trainlog.csv"))
    print(f"attacker checkpoint at {adir} ({config.total_steps} steps)")
    return EXIT_OK


def cmd_evaluate(cfg, xi_list=None, modes=None, force=False) -> int:
    xis = xi_list if xi_list is not None else list(cfg["eval"]["xi_list"])
    modes = modes if modes is not None else list(cfg["eval"]["modes"])
    for m in modes:
        if m not in evalreport.MODES:
            raise ConfigError(f"unknown eval mode {m!r}")
    seg_path = os.path.join(cfg["out_dir"], "segmenter")
    _require(os.path.join(seg_path, "manifest.json"), "segmenter checkpoint")
    missing = [f"xi={xi:g}: {_attack_dir(cfg, xi)}" for xi in xis
               if not os.path.isfile(os.path.join(
                   _attack_dir(cfg, xi), "generator", "manifest.json"))]
    if missing:
        raise TensorIOError("missing attacker checkpoints:\n  " + "\n  ".join(missing))
    seg = segmenter.load_checkpoint(seg_path)
    slices, split = _split_slices(cfg, ("test",))
    attackers = {xi: load_attacker(cfg, xi) for xi in xis}
    reports = evalreport.sweep_xi(attackers, seg, slices["test"],
                                  modes=modes, seed=cfg["seed"])
    rdir = os.path.join(cfg["out_dir"], "reports")
    os.makedirs(rdir, exist_ok=True)
    report_path = os.path.join(rdir, "report.csv")
    _guard_overwrite(report_path, force)
    with open(report_path, "w", newline="") as f:
        f.write(evalreport.report_table(reports, seg.n_classes))
    meta = {
        "seed": cfg["seed"],
        "xi_list": xis,
        "modes": modes,
        "segmenter_hash": param_hash(seg),
        "attacker_hashes": {f"{xi:g}": param_hash(attackers[xi]) for xi in xis},
        "test_ids": split["test_ids"],
        "config": cfg,
    }
    with open(os.path.join(rdir, "metadata.json"), "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
    for xi in xis:
        cmd_montage(cfg, xi, path=os.path.join(rdir, f"montage_xi{xi:g}.png"))
    print(f"report written to {report_path}")
    return EXIT_OK


def cmd_montage(cfg, xi: float, path: str | None = None) -> int:
    if xi is None:
        raise ConfigError("montage requires --xi")
    seg_path = os.path.join(cfg["out_dir"], "segmenter")
    _require(os.path.join(seg_path, "manifest.json"), "segmenter checkpoint")
    seg = segmenter.load_checkpoint(seg_path)
    gen = load_attacker(cfg, xi)
    slices, _ = _split_slices(cfg, ("test",))
    n = min(int(cfg["eval"]["n_montage"]), len(slices["test"]))
    if n == 0:
        raise TensorIOError("no test slices available for the montage")
    rng = torch.Generator().manual_seed(cfg["seed"])
    cases = []
    with torch.no_grad():
        for img, lab in slices["test"][:n]:
            from .attacker import generate
            d, v, i_dv = generate(gen, img, rng=rng)
            cases.append({
                "i_0": img,
                "s_gt": lab,
                "s_0": segmenter.segment(seg, img).argmax(axis=-1),
                "i_dv": i_dv.numpy(),
                "v": v.numpy(),
                "s_dv": segmenter.segment(seg, i_dv.numpy()).argmax(axis=-1),
            })
    out = path or os.path.join(cfg["out_dir"], "reports", f"montage_xi{xi:g}.png")
    evalreport.render_montage(cases, out)
    print(f"montage written to {out}")
    return EXIT_OK


def _parse_xi_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad --xi-list value: {text!r}")


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="advseg",
                                description="Adversarial deformation+intensity "
                                            "attacks on 2D segmentation networks")
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out", default=None, help="override config out_dir")
    p.add_argument("--force", action="store_true", help="allow overwriting outputs")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("make-phantoms")
    sub.add_parser("train-seg")
    pa = sub.add_parser("train-attack")
    pa.add_argument("--xi", type=float, required=True)
    pe = sub.add_parser("evaluate")
    pe.add_argument("--xi-list", default=None)
    pe.add_argument("--modes", default=None)
    pm = sub.add_parser("montage")
    pm.add_argument("--xi", type=float, required=True)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    threads = os.environ.get("ADVSEG_NUM_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.out is not None:
            cfg["out_dir"] = args.out
        os.makedirs(cfg["out_dir"], exist_ok=True)
        if args.command == "make-phantoms":
            return cmd_make_phantoms(cfg, force=args.force)
        if args.command == "train-seg":
            return cmd_train_seg(cfg, force=args.force)
        if args.command == "train-attack":
            return cmd_train_attack(cfg, xi=args.xi, force=args.force)
        if args.command == "evaluate":
            xis = _parse_xi_list(args.xi_list) if args.xi_list else None
            modes = args.modes.split(",") if args.modes else None
            return cmd_evaluate(cfg, xi_list=xis, modes=modes, force=args.force)
        if args.command == "montage":
            return cmd_montage(cfg, xi=args.xi)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except TrainingCollapse as e:
        print(f"training collapse: {e}", file=sys.stderr)
        return EXIT_COLLAPSE
    except (TensorIOError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
