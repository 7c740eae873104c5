"""``antidiff`` command line: data generation, pretraining, protection, misuse simulation, evaluation.

Exit codes: 0 success, 2 usage, 3 malformed config, 4 missing file,
5 numerical divergence, 6 unreadable input (bad PNG or checkpoint).
Relative ``--out`` paths resolve under ``$ANTIDIFF_OUTPUT_ROOT`` when it is set.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data, experiments, imageio, plotting
from .adversarial import write_trace_csv
from .attacks import ddim_sample, edit_attack, finetune_attack
from .config import ConfigError, RunConfig, apply_sections, from_ini, to_ini
from .core.checkpoint import CheckpointError, load_embedding, load_model, save_embedding, save_model
from .core.train import pretrain_toy
from .errors import DivergenceError
from .metrics import MetricsReport, attention_energy_probe, efficacy_trial, linf, psnr, psnr_floor, subject_eval
from .pipeline import protect
from .prompt import init_empty_embedding
from .seeding import derive_seed

log = logging.getLogger("antidiff")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_DIVERGENCE = 5
EXIT_INPUT = 6

OUTPUT_ROOT_ENV = "ANTIDIFF_OUTPUT_ROOT"
MANIFEST_VERSION = 1


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------- helpers


def output_path(raw: str) -> Path:
    p = Path(raw)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _out_dir(raw: str) -> Path:
    p = output_path(raw)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_json(obj, path: Path) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, float) and not math.isfinite(o):
        return str(o)
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not serializable: {type(o)}")


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _prompt_words(text: str) -> list[str]:
    return text.replace(",", " ").split()


def load_run_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(path)
        cfg = from_ini(path.read_text(), cfg)
    return cfg


def _override(cfg: RunConfig, section: str, **values) -> RunConfig:
    values = {k: v for k, v in values.items() if v is not None}
    return apply_sections(cfg, {section: values}, typed=True) if values else cfg


# --------------------------------------------------------------------------- gen-data


def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = _out_dir(args.out)
    ds = data.generate_dataset(per_identity=args.per_identity, seed=args.seed)
    pre_dir = out / "pretrain"
    names = [f"{i:05d}.png" for i in range(len(ds))]
    imageio.save_batch(ds.images, pre_dir, names)
    _write_json(
        {
            "seed": args.seed,
            "images": [
                {"file": n, "identity": ident.name, "caption": " ".join(ident.caption())}
                for n, ident in zip(names, ds.identities)
            ],
        },
        pre_dir / "index.json",
    )
    subjects = []
    for i in range(args.subjects):
        s = experiments.make_subject(derive_seed(args.seed, "subject", i), args.images_per_subject, args.heldout_per_subject)
        sdir = out / "subjects" / f"{i:02d}-{s.identity.name}"
        imageio.save_batch(s.clean, sdir / "clean")
        imageio.save_batch(s.heldout, sdir / "heldout")
        imageio.save_image(s.template, sdir / "template.png")
        info = {"identity": s.identity.name, "caption": " ".join(s.identity.caption()), "dir": str(sdir.relative_to(out))}
        _write_json(info, sdir / "subject.json")
        subjects.append(info)
    _write_json({"seed": args.seed, "per_identity": args.per_identity, "pretrain_images": len(ds), "subjects": subjects},
                out / "index.json")
    print(f"wrote {len(ds)} pretraining images and {len(subjects)} subjects to {out}")
    return EXIT_OK


def _load_pretrain_dir(directory: Path) -> data.ToyDataset:
    index_path = directory / "index.json"
    if not index_path.exists():
        raise FileNotFoundError(index_path)
    index = json.loads(index_path.read_text())
    images, tokens, idents = [], [], []
    for entry in index["images"]:
        images.append(imageio.load_image(directory / entry["file"]).numpy())
        ident = data.Identity.parse(entry["identity"])
        tokens.append(data.tokenize(ident.caption()))
        idents.append(ident)
    return data.ToyDataset(np.stack(images), np.asarray(tokens, dtype=np.int64), idents)


# --------------------------------------------------------------------------- pretrain


def cmd_pretrain(args, cfg: RunConfig) -> int:
    cfg = _override(cfg, "pretrain", seed=args.seed, ae_steps=args.ae_steps, ldm_steps=args.ldm_steps)
    pcfg = cfg.pretrain_config()
    if args.data:
        ds = _load_pretrain_dir(Path(args.data) / "pretrain")
    else:
        ds = data.generate_dataset(per_identity=args.per_identity, seed=pcfg.seed)
    train, held = ds.split(0.1, seed=pcfg.seed)
    model, stats = pretrain_toy(train, pcfg, held)
    out = output_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out, meta={"pretrain": cfg.to_dict()["pretrain"], "stats": stats})
    report = {"checkpoint": str(out), "config": cfg.to_dict(), "stats": stats,
              "recon_ok": stats["recon_mse_heldout"] < 0.01,
              "ldm_ratio": stats["ldm_loss_heldout_final"] / stats["ldm_loss_heldout_initial"]}
    _write_json(report, out.with_suffix(".json"))
    print(json.dumps(stats, sort_keys=True))
    return EXIT_OK


# --------------------------------------------------------------------------- protect


def _protect_inputs(args, cfg: RunConfig):
    """Resolve (model path, image dir, seed, cfg), taking a prior manifest into account."""
    if args.manifest:
        mpath = Path(args.manifest)
        if not mpath.exists():
            raise FileNotFoundError(mpath)
        prior = json.loads(mpath.read_text())
        if prior.get("command") != "protect":
            raise ConfigError(f"{mpath} is not a protect manifest")
        cfg = RunConfig.from_dict(prior["config"])
        return Path(prior["inputs"]["model"]), Path(prior["inputs"]["images"]), int(prior["seed"]), cfg
    if args.seed is None:
        raise UsageError("protect: --seed is required (or --manifest)")
    if not args.model or not args.images:
        raise UsageError("protect: --model and --images are required (or --manifest)")
    cfg = _override(cfg, "protect", epochs=args.epochs, sdl_weight=args.sdl_weight, attention_target=args.target,
                    prompt_tuning=False if args.no_prompt_tuning else None)
    cfg = _override(cfg, "budget", eta=args.eta, alpha=args.alpha, steps=args.steps)
    return Path(args.model), Path(args.images), args.seed, cfg


def cmd_protect(args, cfg: RunConfig) -> int:
    model_path, image_dir, seed, cfg = _protect_inputs(args, cfg)
    cfg = replace(cfg, protect=replace(cfg.protect, seed=seed))
    model = load_model(model_path)
    clean, names = imageio.load_dir(image_dir)
    result = protect(clean, model, cfg.protect)
    eta = cfg.protect.budget.eta

    out = _out_dir(args.out)
    pdir = out / "protected"
    pdir.mkdir(exist_ok=True)
    per_image = []
    for name, c, p in zip(names, clean, result.images):
        u8 = imageio.quantize_within_budget(p, c, eta)
        imageio.save_u8(u8, pdir / name)
        q = imageio.dequantize(u8)
        per_image.append({"file": name, "linf": linf(c, p), "linf_quantized": linf(c, q), "psnr": psnr(c, q)})
    save_embedding(result.embedding, out / "embedding.ckpt", meta={"seed": seed})

    epochs = [e.to_dict() for e in result.epochs]
    if args.verbose:
        tdir = out / "traces"
        tdir.mkdir(exist_ok=True)
        for e in result.epochs:
            write_trace_csv(e.cost_trace, tdir / f"epoch{e.epoch:02d}.csv")
    manifest = {
        "command": "protect",
        "manifest_version": MANIFEST_VERSION,
        "seed": seed,
        "inputs": {"model": str(model_path), "model_sha256": _sha256(model_path), "images": str(image_dir), "files": names},
        "config": cfg.to_dict(),
        "images": per_image,
        "epochs": [{k: v for k, v in e.items() if k != "cost_trace"} | {"cost_first": e["cost_trace"][0][1] if e["cost_trace"] else None,
                                                                       "cost_last": e["cost_trace"][-1][1] if e["cost_trace"] else None}
                   for e in epochs],
        "summary": {
            "linf_max": max(r["linf"] for r in per_image),
            "linf_quantized_max": max(r["linf_quantized"] for r in per_image),
            "psnr_min": min(r["psnr"] for r in per_image),
            "psnr_floor": psnr_floor(eta),
        },
    }
    _write_json(manifest, out / "manifest.json")
    plotting.plot_cost_traces(epochs, out / "cost_traces.png")
    plotting.plot_perturbation(clean.numpy(), result.images.detach().numpy(), out / "perturbation.png", eta)
    print(json.dumps(manifest["summary"], sort_keys=True))
    return EXIT_OK


# --------------------------------------------------------------------------- misuse simulation


def _index_gallery(out: Path, rows: dict, entries: list[dict], meta: dict) -> None:
    _write_json({**meta, "images": entries}, out / "index.json")
    plotting.plot_gallery(rows, out / "gallery.png")


def cmd_attack_tune(args, cfg: RunConfig) -> int:
    cfg = _override(cfg, "trial", seed=args.seed, steps=args.steps, lr=args.lr, samples=args.samples,
                    subject_token=args.token)
    t = cfg.trial
    model = load_model(args.model)
    images, _ = imageio.load_dir(args.images)
    token = data.VOCAB.get(t.subject_token)
    if token is None:
        raise UsageError(f"unknown subject token {t.subject_token!r}")
    tuned = finetune_attack(model, images, token, t.steps, t.lr, t.seed, t.draws_per_step)
    out = _out_dir(args.out)
    save_model(tuned, out / "model.ckpt", meta={"trial": cfg.to_dict()["trial"]})
    caption = data.subject_caption(t.subject_token)
    f = tuned.embed(data.tokenize(caption)).detach()
    samples = ddim_sample(tuned, f, t.sample_steps, seed=t.seed, n=t.samples)
    names = imageio.save_batch(samples, out / "samples")
    entries = [{"file": str(p.relative_to(out)), "prompt": " ".join(caption), "seed": t.seed, "index": i}
               for i, p in enumerate(names)]
    meta = {"command": "attack-tune", "config": cfg.to_dict()["trial"], "model": str(args.model), "images": str(args.images)}
    if args.heldout:
        held, _ = imageio.load_dir(args.heldout)
        template = imageio.load_image(args.template) if args.template else samples.mean(0)
        loss, mse = subject_eval(tuned, held, template, t)
        meta["heldout_ldm_loss"] = loss
        if args.template:
            meta["template_mse"] = mse
    _index_gallery(out, {"training images": list(images), "samples": list(samples)}, entries, meta)
    print(f"wrote fine-tuned model and {len(entries)} samples to {out}")
    return EXIT_OK


def cmd_attack_edit(args, cfg: RunConfig) -> int:
    cfg = _override(cfg, "edit", t_edit_frac=args.t_edit, n_steps=args.n_steps, target_shape=args.shape)
    e = cfg.edit
    model = load_model(args.model)
    images, names = imageio.load_dir(args.images)
    words = _prompt_words(args.prompt) if args.prompt else ["a", "photo", "of", e.target_shape]
    f = model.embed(data.tokenize(words)).detach()
    edited = edit_attack(model, images, f, e.t_edit_frac, args.seed, e.n_steps)
    out = _out_dir(args.out)
    paths = imageio.save_batch(edited, out / "edited", names)
    entries = [{"file": str(p.relative_to(out)), "source": n, "prompt": " ".join(words)} for p, n in zip(paths, names)]
    _index_gallery(out, {"input": list(images), "edited": list(edited)}, entries,
                   {"command": "attack-edit", "seed": args.seed, "config": cfg.to_dict()["edit"], "model": str(args.model)})
    print(f"wrote {len(entries)} edited images to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------- eval


def cmd_eval(args, cfg: RunConfig) -> int:
    clean, names_c = imageio.load_dir(args.clean)
    prot, names_p = imageio.load_dir(args.protected)
    if names_c != names_p:
        raise UsageError("clean and protected directories hold different file names")
    psnrs = [psnr(c, p) for c, p in zip(clean, prot)]
    linfs = [linf(c, p) for c, p in zip(clean, prot)]
    report = MetricsReport(psnr=psnrs, linf=linfs, linf_quantized=list(linfs))
    if args.model:
        model = load_model(args.model)
        seed = args.seed if args.seed is not None else cfg.trial.seed
        f = load_embedding(args.embedding) if args.embedding else init_empty_embedding(model)
        report.attention_energy_clean = attention_energy_probe(model, clean, f, seed)
        report.attention_energy_protected = attention_energy_probe(model, prot, f, seed)
        if args.heldout:
            held, _ = imageio.load_dir(args.heldout)
            template = imageio.load_image(args.template) if args.template else held.mean(0)
            report.trials = [
                efficacy_trial(model, clean, prot, held, template, replace(cfg.trial, seed=seed + k)).to_dict()
                for k in range(args.trials)
            ]
    report.config = {"clean": str(args.clean), "protected": str(args.protected), "trial": cfg.to_dict()["trial"]}
    body = report.to_dict()
    out = output_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(body, out)
    with open(out.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["file", "psnr", "linf"])
        for n, p, l in zip(names_c, psnrs, linfs):
            w.writerow([n, p, l])
    plotting.plot_psnr_hist(psnrs, psnr_floor(max(linfs) if max(linfs) > 0 else 1.0), out.with_suffix(".psnr.png"))
    print(json.dumps(body["summary"], sort_keys=True, default=_json_default))
    return EXIT_OK


# --------------------------------------------------------------------------- ablate


def cmd_ablate(args, cfg: RunConfig) -> int:
    model = load_model(args.model)
    seeds = list(range(args.seed, args.seed + args.seeds))
    try:
        experiments.ablation_configs(args.grid, cfg.protect)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rows, per_seed = experiments.run_ablation(model, args.grid, seeds, cfg.protect, cfg.trial)
    out = _out_dir(args.out)
    keys = list(rows[0])
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
    _write_json({"grid": args.grid, "seeds": seeds, "config": cfg.to_dict(), "rows": rows,
                 "per_seed": {k: [o.to_dict() for o in v] for k, v in per_seed.items()}}, out / "ablation.json")
    plotting.plot_ablation(rows, out / "ablation.png")
    for r in rows:
        print(f"{r['label']:>10}  wins {r['wins']}/{r['seeds']}  energy {r['attention_energy_protected']:.5f}")
    return EXIT_OK


# --------------------------------------------------------------------------- demo


def cmd_demo(args, cfg: RunConfig) -> int:
    """Small end-to-end run: data, pretraining, protection, evaluation and an edit."""
    out = _out_dir(args.out)
    seed = str(args.seed)
    steps = ["--ae-steps", str(args.ae_steps), "--ldm-steps", str(args.ldm_steps)]
    common = ["--config", args.config] if args.config else []
    runs = [
        ["gen-data", "--out", str(out / "data"), "--seed", seed, "--subjects", "1", "--per-identity", str(args.per_identity)],
        ["pretrain", "--data", str(out / "data"), "--out", str(out / "model.ckpt"), "--seed", seed, *steps],
    ]
    for argv in runs:
        code = main(common + argv)
        if code:
            return code
    subject = json.loads((out / "data" / "index.json").read_text())["subjects"][0]
    sdir = out / "data" / subject["dir"]
    runs = [
        ["protect", "--model", str(out / "model.ckpt"), "--images", str(sdir / "clean"), "--out", str(out / "protect"),
         "--seed", seed, "--epochs", str(args.epochs)],
        ["eval", "--clean", str(sdir / "clean"), "--protected", str(out / "protect" / "protected"),
         "--model", str(out / "model.ckpt"), "--embedding", str(out / "protect" / "embedding.ckpt"),
         "--out", str(out / "report.json"), "--seed", seed],
        ["attack-edit", "--model", str(out / "model.ckpt"), "--images", str(out / "protect" / "protected"),
         "--out", str(out / "edit-protected"), "--seed", seed],
        ["attack-edit", "--model", str(out / "model.ckpt"), "--images", str(sdir / "clean"),
         "--out", str(out / "edit-clean"), "--seed", seed],
    ]
    for argv in runs:
        code = main(common + argv)
        if code:
            return code
    print(f"demo outputs in {out}")
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="INI file with [section] key = value overrides")
    common.add_argument("--dump-config", action="store_true", default=argparse.SUPPRESS,
                        help="print the effective configuration and exit")
    common.add_argument("--log-level", default=argparse.SUPPRESS, choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(prog="antidiff", description=__doc__.split("\n")[0])
    parser.add_argument("--config", default=None)
    parser.add_argument("--dump-config", action="store_true")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-data", parents=[common], help="render the procedural toy dataset and subjects")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-identity", type=int, default=8)
    p.add_argument("--subjects", type=int, default=3)
    p.add_argument("--images-per-subject", type=int, default=4)
    p.add_argument("--heldout-per-subject", type=int, default=4)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", parents=[common], help="train the toy latent diffusion model")
    p.add_argument("--out", required=True, help="checkpoint path (.ckpt)")
    p.add_argument("--data", help="gen-data output directory; omitted = render in memory")
    p.add_argument("--per-identity", type=int, default=8)
    p.add_argument("--seed", type=int)
    p.add_argument("--ae-steps", type=int)
    p.add_argument("--ldm-steps", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("protect", parents=[common], help="add protective perturbations to a subject's images")
    p.add_argument("--model")
    p.add_argument("--images", help="directory of 8-bit RGB PNGs")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--manifest", help="re-run the configuration recorded in a previous manifest")
    p.add_argument("--eta", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--steps", type=int, help="PGD iterations per epoch")
    p.add_argument("--epochs", type=int)
    p.add_argument("--sdl-weight", type=float)
    p.add_argument("--target", choices=["zero", "noise", "diagonal"])
    p.add_argument("--no-prompt-tuning", action="store_true")
    p.add_argument("--verbose", action="store_true", help="also write per-epoch cost traces as CSV")
    p.set_defaults(func=cmd_protect)

    p = sub.add_parser("attack-tune", parents=[common], help="personalize the model on images and sample")
    p.add_argument("--model", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--samples", type=int)
    p.add_argument("--token")
    p.add_argument("--heldout", help="held-out images of the subject for the loss probe")
    p.add_argument("--template", help="canonical subject PNG for the template probe")
    p.set_defaults(func=cmd_attack_tune)

    p = sub.add_parser("attack-edit", parents=[common], help="noise-and-denoise edit toward a prompt")
    p.add_argument("--model", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--prompt", help="space separated vocabulary words; default 'a photo of <shape>'")
    p.add_argument("--shape", choices=data.SHAPES)
    p.add_argument("--t-edit", type=float)
    p.add_argument("--n-steps", type=int)
    p.set_defaults(func=cmd_attack_edit)

    p = sub.add_parser("eval", parents=[common], help="metrics report for clean vs protected images")
    p.add_argument("--clean", required=True)
    p.add_argument("--protected", required=True)
    p.add_argument("--out", default="report.json")
    p.add_argument("--model")
    p.add_argument("--embedding", help="prompt embedding for the attention probe (default: empty prompt)")
    p.add_argument("--heldout")
    p.add_argument("--template")
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="PT/SDL grid or attention-target grid over seeds")
    p.add_argument("--model", required=True)
    p.add_argument("--grid", default="pt,sdl", help="'pt,sdl' or 'target'")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("demo", parents=[common], help="small end-to-end run")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-identity", type=int, default=4)
    p.add_argument("--ae-steps", type=int, default=400)
    p.add_argument("--ldm-steps", type=int, default=800)
    p.add_argument("--epochs", type=int, default=2)
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args)
        if args.dump_config:
            sys.stdout.write(to_ini(cfg))
            return EXIT_OK
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"antidiff: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"antidiff: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"antidiff: missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except DivergenceError as exc:
        print(f"antidiff: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (imageio.UnsupportedImageError, CheckpointError) as exc:
        print(f"antidiff: unreadable input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        print(f"antidiff: invalid argument: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
