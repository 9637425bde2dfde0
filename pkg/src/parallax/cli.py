"""Command-line entry point: ``parallax <subcommand> ...``.

Subcommands::

    train-cls        --config F [--variant V] [--recipe R] [--data PATH|synthetic] [--out DIR]
                     [--epochs N] [--until-epoch N] [--resume CKPT]
    probe-stability  --config F --seeds 3 --out DIR [--max-steps 2000] [--full] [--decisive]
    train-gan        --config F --out DIR [--steps N]
    count-params     --recipe R --variant V [--image 224] [--patch 16] [--classes 1000]
    fid              --real DIR --fake DIR --seed S [--domain NAME]
    gen-data         --kind provocation|toy-domains --n N --seed S --out DIR

``PARALLAX_THREADS`` caps BLAS worker threads (default 1, which keeps runs
bit-reproducible).  Every metric stream starts with a header line echoing the
resolved configuration.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from parallax import experiments as X
from parallax.config import ExperimentConfig, parse_config
from parallax.errors import ConfigError, FormatError, UsageError
from parallax.stability import emit_metrics, preset
from parallax.vit import RECIPES, TABLE_PARAMS, BlockVariant, count_params, get_recipe


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_train_cls(args) -> int:
    from parallax.checkpoint import save_trainer
    from parallax.report import plot_training, read_metrics

    cfg = parse_config(args.config)
    if args.variant:
        cfg.model.variant = BlockVariant.parse(args.variant).value
    if args.recipe:
        cfg.model.recipe = get_recipe(args.recipe).name
    if args.data:
        if args.data == "synthetic":
            cfg.data.source = "synthetic"
        else:
            cfg.data.path = args.data
            if cfg.data.source == "synthetic":
                cfg.data.source = "cifar10"
    if args.epochs:
        cfg.train = replace(cfg.train, epochs=args.epochs)
    out = _out_dir(args.out)
    train_set, test_set = X.load_classification_data(cfg.data.source, cfg.data.path, cfg.data.n_train,
                                                     cfg.data.n_test, cfg.data.seed, cfg.model.num_classes)
    mode = "a" if args.resume else "w"
    metrics = out / "metrics.jsonl"
    with open(metrics, mode, encoding="utf-8") as sink:
        run = X.run_classification(cfg.model.build_recipe(), cfg.model.block_variant, cfg.train, train_set,
                                   test_set, cfg.model.seed, sink, X.header_record(cfg.to_dict(), "train-cls"),
                                   resume=args.resume, until_epoch=args.until_epoch)
    save_trainer(out / "checkpoint.vtub", run.trainer, cfg.to_dict())
    plot_training(read_metrics(metrics), out / "training.png")
    res = run.result
    summary = {
        "halted": res.halted,
        "onset_step": res.onset_step,
        "steps": run.trainer.step,
        "epochs": run.trainer.epoch,
        "initial_test_accuracy": run.initial_test_accuracy,
        "final_train_accuracy": res.final_train_accuracy,
        "final_test_accuracy": res.final_test_accuracy,
    }
    _write_json(out / "summary.json", summary)
    print(json.dumps(summary))
    return 2 if res.halted else 0


def cmd_probe(args) -> int:
    from parallax.report import plot_stability, read_metrics

    if args.config:
        cfg = parse_config(args.config)
    else:
        cfg = ExperimentConfig()
        cfg.train = preset("provocation")
    out = _out_dir(args.out)
    seeds = list(range(cfg.train.seed, cfg.train.seed + args.seeds))
    verdict = X.run_stability_probe(cfg.model.build_recipe(), cfg.train, seeds, max(cfg.data.n_train, 64),
                                    cfg.data.seed, args.max_steps, full=args.full, decisive=args.decisive,
                                    out_dir=out, log=lambda m: print(m, file=sys.stderr, flush=True))
    record = {"config": cfg.to_dict(), **verdict.record()}
    _write_json(out / "verdict.json", record)
    runs = {}
    for seed in verdict.seeds:
        for name in ("raw", "stabilized"):
            path = out / f"{name}_seed{seed}.jsonl"
            if path.exists():
                runs[f"{name} s{seed}"] = read_metrics(path)
    plot_stability(runs, out / "stability.png")
    print(json.dumps(verdict.record()))
    return 0 if verdict.passed else 1


def cmd_train_gan(args) -> int:
    from parallax.report import plot_gan, plot_samples, read_metrics

    cfg = parse_config(args.config)
    g = cfg.gan
    steps = args.steps if args.steps is not None else g.steps
    out = _out_dir(args.out)
    domain_a, domain_b = X.load_gan_domains(cfg.data.domain_a, cfg.data.domain_b, cfg.data.toy_n, cfg.data.seed)
    metrics = out / "metrics.jsonl"
    with open(metrics, "w", encoding="utf-8") as sink:
        emit_metrics(sink, X.header_record(cfg.to_dict(), "train-gan"))
        run = X.train_cyclegan(cfg.vitunet(), domain_a, domain_b, steps, g.weights, g.seed, g.lr,
                               (g.beta1, g.beta2), g.pool_size, g.batch_size, g.eval_n, g.extractor_seed,
                               g.sample_every, out / "samples", sink)
    from parallax.checkpoint import checkpoint_save

    gan = run.gan
    checkpoint_save(out / "generators.vtub", {"g_ab": gan.g_ab, "g_ba": gan.g_ba, "d_a": gan.d_a, "d_b": gan.d_b},
                    {"config": cfg.to_dict()})
    plot_gan(read_metrics(metrics), out / "gan.png")
    a, b = domain_a.images[:6], domain_b.images[:6]
    plot_samples({"A": a, "A->B": gan.translate(a, "ab"), "B": b, "B->A": gan.translate(b, "ba")},
                 out / "samples.png")
    summary = {
        "steps": run.steps,
        "initial_cycle_l1": run.initial_cycle_l1,
        "final_cycle_l1": run.final_cycle_l1,
        "initial_fid_b": run.initial_fid,
        "final_fid_b": run.final_fid,
    }
    _write_json(out / "summary.json", summary)
    print(json.dumps(summary))
    return 0


def cmd_count_params(args) -> int:
    recipe = get_recipe(args.recipe)
    variant = BlockVariant.parse(args.variant)
    n = count_params(recipe, variant, args.image, args.patch, args.classes)
    column = "vit22b" if variant.parallel else "vit"
    ref = TABLE_PARAMS.get(recipe.name, {}).get(column)
    doc = {"recipe": recipe.name, "variant": variant.value, "image_size": args.image, "patch_size": args.patch,
           "num_classes": args.classes, "params": n, "reference": ref,
           "relative_error": None if ref is None else (n - ref) / ref}
    print(json.dumps(doc))
    return 0


def cmd_fid(args) -> int:
    from parallax.data import load_ppm_dir

    real = load_ppm_dir(args.real).images
    fake = load_ppm_dir(args.fake).images
    domain = args.domain or Path(args.real).name
    print(json.dumps(X.fid_record(domain, real, fake, args.seed)))
    return 0


def cmd_gen_data(args) -> int:
    from parallax.data import gen_provocation_set, gen_toy_domains, save_ppm_dir, write_cifar_binary

    out = _out_dir(args.out)
    if args.kind == "provocation":
        ds = gen_provocation_set(args.n, args.seed)
        write_cifar_binary(out / "provocation.bin", ds, "cifar10")
        files = ["provocation.bin"]
    else:
        a, b = gen_toy_domains(args.n, args.seed)
        save_ppm_dir(out / "A", a.images)
        save_ppm_dir(out / "B", b.images)
        files = ["A/", "B/"]
    print(json.dumps({"kind": args.kind, "n": args.n, "seed": args.seed, "out": str(out), "files": files}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="parallax", description="Parallel-block ViT stability lab and ViTUnet CycleGAN.")
    sub = p.add_subparsers(dest="command", required=True)
    variants = [v.value for v in BlockVariant]

    s = sub.add_parser("train-cls", help="train a ViT classifier")
    s.add_argument("--config", help="TOML config (defaults when omitted)")
    s.add_argument("--variant", choices=variants)
    s.add_argument("--recipe", choices=list(RECIPES))
    s.add_argument("--data", help="CIFAR binary directory/file, or 'synthetic'")
    s.add_argument("--out", default="runs/train-cls")
    s.add_argument("--epochs", type=int, help="override [train] epochs")
    s.add_argument("--resume", help="checkpoint written by a previous train-cls run; the metric stream is appended")
    s.add_argument("--until-epoch", type=int, help="stop after this many epochs (resumable)")
    s.set_defaults(func=cmd_train_cls)

    s = sub.add_parser("probe-stability", help="raw vs stabilized divergence A/B on the provocation set")
    s.add_argument("--config")
    s.add_argument("--seeds", type=int, default=3)
    s.add_argument("--out", default="runs/probe")
    s.add_argument("--max-steps", type=int, default=2000)
    s.add_argument("--full", action="store_true", help="run stabilized for the full budget even after raw diverges")
    s.add_argument("--decisive", action="store_true", help="stop as soon as the verdict is fixed")
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("train-gan", help="train a ViTUnet CycleGAN on toy domains or PPM folders")
    s.add_argument("--config")
    s.add_argument("--out", default="runs/gan")
    s.add_argument("--steps", type=int, help="override [gan] steps")
    s.set_defaults(func=cmd_train_gan)

    s = sub.add_parser("count-params", help="exact parameter count with the reference value")
    s.add_argument("--recipe", required=True, choices=list(RECIPES))
    s.add_argument("--variant", required=True, choices=variants)
    s.add_argument("--image", type=int, default=224)
    s.add_argument("--patch", type=int, default=16)
    s.add_argument("--classes", type=int, default=1000)
    s.set_defaults(func=cmd_count_params)

    s = sub.add_parser("fid", help="Fréchet distance between two PPM folders")
    s.add_argument("--real", required=True)
    s.add_argument("--fake", required=True)
    s.add_argument("--seed", type=int, default=0, help="feature extractor seed")
    s.add_argument("--domain", help="label for the output record (default: real folder name)")
    s.set_defaults(func=cmd_fid)

    s = sub.add_parser("gen-data", help="write a synthetic dataset")
    s.add_argument("--kind", required=True, choices=["provocation", "toy-domains"])
    s.add_argument("--n", type=int, default=2048)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    X.configure_threads()
    try:
        return args.func(args)
    except (ConfigError, FormatError, UsageError, FileNotFoundError) as exc:
        print(f"parallax {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
