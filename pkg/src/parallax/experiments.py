"""End-to-end drivers shared by the CLI and the acceptance suite."""

from __future__ import annotations

import contextlib
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from parallax.data import Dataset, gen_provocation_set, gen_toy_domains, load_cifar_binary, load_cifar_dir, load_ppm_dir, write_ppm
from parallax.metrics import default_feature_extractor, frechet_distance, gaussian_stats
from parallax.stability import TrainConfig, Trainer, emit_metrics
from parallax.vit import BlockVariant, Recipe, build_classifier
from parallax.vitunet import GanLossWeights, ViTUnetConfig, build_cyclegan


def configure_threads(env=None) -> int:
    """Cap BLAS threads from ``PARALLAX_THREADS``; unset means one deterministic worker."""
    from threadpoolctl import threadpool_limits

    env = os.environ if env is None else env
    raw = env.get("PARALLAX_THREADS", "").strip()
    n = int(raw) if raw else 1
    if n < 1:
        raise ValueError(f"PARALLAX_THREADS must be >= 1, got {raw!r}")
    threadpool_limits(n)
    return n


# ----------------------------------------------------------------------
# raw vs stabilised divergence probe
# ----------------------------------------------------------------------
@dataclass
class ProbeRun:
    variant: str
    seed: int
    onset_step: int | None
    steps_run: int
    peak_logit: float = 0.0
    peak_grad: float = 0.0
    skipped: bool = False


@dataclass
class ProbeVerdict:
    seeds: list
    raw: list
    stabilized: list
    max_steps: int
    planned: int = 0

    @property
    def raw_earlier(self) -> list[bool]:
        """Per seed: raw diverged, and strictly before the stabilised run (never = infinity)."""
        return [_raw_earlier(r, s) for r, s in zip(self.raw, self.stabilized)]

    @property
    def passed(self) -> bool:
        return sum(self.raw_earlier) >= _majority(self.planned or len(self.seeds))

    def record(self) -> dict:
        return {
            "seeds": list(self.seeds),
            "planned_seeds": self.planned or len(self.seeds),
            "max_steps": self.max_steps,
            "raw_onset": [r.onset_step for r in self.raw],
            "stabilized_onset": [s.onset_step for s in self.stabilized],
            "raw_steps_run": [r.steps_run for r in self.raw],
            "stabilized_steps_run": [s.steps_run for s in self.stabilized],
            "stabilized_skipped": [s.skipped for s in self.stabilized],
            "raw_peak_logit": [r.peak_logit for r in self.raw],
            "raw_peak_grad": [r.peak_grad for r in self.raw],
            "stabilized_peak_logit": [s.peak_logit for s in self.stabilized],
            "stabilized_peak_grad": [s.peak_grad for s in self.stabilized],
            "raw_earlier": self.raw_earlier,
            "passed": self.passed,
        }


def _raw_earlier(raw: ProbeRun, stab: ProbeRun) -> bool:
    return raw.onset_step is not None and (stab.onset_step is None or raw.onset_step < stab.onset_step)


def _majority(n: int) -> int:
    return n // 2 + 1


def _peak(values) -> float:
    vals = list(values)
    if not vals:
        return 0.0
    arr = np.asarray(vals, dtype=np.float64)
    return float("inf") if not np.all(np.isfinite(arr)) else float(arr.max())


def _probe_one(recipe: Recipe, variant: BlockVariant, dataset: Dataset, train: TrainConfig, seed: int,
               max_steps: int, stream=None) -> ProbeRun:
    epochs = max(train.epochs, -(-max_steps * train.batch_size // len(dataset)))
    cfg = replace(train, seed=seed, max_steps=max_steps, epochs=epochs)
    model = build_classifier(recipe, variant, seed=seed)
    trainer = Trainer(model, cfg, stream)
    result = trainer.fit(dataset)
    return ProbeRun(variant.value, seed, result.onset_step, trainer.step,
                    _peak(s.max_abs_logit for s in result.steps), _peak(s.grad_max for s in result.steps))


def run_stability_probe(recipe: Recipe, train: TrainConfig, seeds=(0, 1, 2), n: int = 2048, data_seed: int = 0,
                        max_steps: int = 2000, full: bool = False, decisive: bool = False,
                        out_dir=None, log=None) -> ProbeVerdict:
    """Train parallel_raw and parallel_stabilized on the provocation set for each seed.

    Unless ``full``, the stabilised run stops a patience window after the raw
    onset, which is enough to decide which diverged first.  With ``decisive``
    the stabilised run is skipped when the raw run never diverged (the seed
    cannot count in favour either way) and seeds stop once the majority
    verdict is fixed.
    """
    dataset = gen_provocation_set(n, data_seed, recipe.num_classes)
    raws, stabs = [], []
    need = _majority(len(seeds))
    for i, seed in enumerate(seeds):
        with _stream(out_dir, f"raw_seed{seed}.jsonl") as fh:
            raw = _probe_one(recipe, BlockVariant.PARALLEL_RAW, dataset, train, seed, max_steps, fh)
        if decisive and raw.onset_step is None:
            stab = ProbeRun(BlockVariant.PARALLEL_STABILIZED.value, seed, None, 0, skipped=True)
        else:
            budget = max_steps
            if not full and raw.onset_step is not None:
                budget = min(max_steps, raw.onset_step + train.patience)
            with _stream(out_dir, f"stabilized_seed{seed}.jsonl") as fh:
                stab = _probe_one(recipe, BlockVariant.PARALLEL_STABILIZED, dataset, train, seed, budget, fh)
        raws.append(raw)
        stabs.append(stab)
        if log is not None:
            log(f"seed {seed}: raw onset {raw.onset_step} (peak logit {raw.peak_logit:.3g}, "
                f"peak grad {raw.peak_grad:.3g}); stabilized onset {stab.onset_step}"
                + (" (skipped)" if stab.skipped else ""))
        if decisive:
            wins = sum(_raw_earlier(r, s) for r, s in zip(raws, stabs))
            remaining = len(seeds) - i - 1
            if wins >= need or wins + remaining < need:
                break
    done = seeds[: len(raws)]
    return ProbeVerdict(list(done), raws, stabs, max_steps, len(seeds))


@contextlib.contextmanager
def _stream(out_dir, name):
    if out_dir is None:
        yield None
        return
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    with open(Path(out_dir) / name, "w", encoding="utf-8") as fh:
        yield fh


# ----------------------------------------------------------------------
# classification data
# ----------------------------------------------------------------------
def load_classification_data(source: str, path: str = "", n_train: int = 0, n_test: int = 0, seed: int = 0,
                             num_classes: int = 10) -> tuple[Dataset, Dataset | None]:
    """``synthetic`` -> provocation sets; otherwise CIFAR binaries from a directory or a single file."""
    if source == "synthetic" or path == "synthetic":
        train = gen_provocation_set(max(n_train, 64), seed, num_classes)
        test = gen_provocation_set(max(n_test, 64), seed + 1, num_classes) if n_test else None
        if test is not None:
            test = Dataset(test.images, test.labels, "test", num_classes)
        return train, test
    variant = source if source in ("cifar10", "cifar100") else "cifar10"
    p = Path(path)
    if p.is_dir():
        train, test = load_cifar_dir(p, variant)
    else:
        train, test = load_cifar_binary(p, variant), None
    if n_train:
        train = train.subset(n_train)
    if test is not None and n_test:
        test = test.subset(n_test)
    return train, test


@dataclass
class ClassificationRun:
    result: object
    initial_test_accuracy: float | None
    trainer: object


def header_record(config: dict, command: str) -> dict:
    return {"header": command, "config": config}


def run_classification(recipe: Recipe, variant: BlockVariant, train: TrainConfig, train_set: Dataset,
                       test_set: Dataset | None = None, model_seed: int = 0, sink=None, header: dict | None = None,
                       resume=None, until_epoch: int | None = None) -> ClassificationRun:
    """Build a classifier, record the untrained test accuracy, then train.

    ``resume`` is a checkpoint path written by :func:`parallax.checkpoint.save_trainer`.
    """
    from parallax.checkpoint import load_trainer

    model = build_classifier(recipe, variant, seed=model_seed)
    trainer = Trainer(model, train, sink)
    if resume is not None:
        load_trainer(resume, trainer)
    elif header is not None and sink is not None:
        emit_metrics(sink, header)
    initial = None
    if test_set is not None and resume is None:
        from parallax.stability import evaluate

        initial = evaluate(model, test_set)
    result = trainer.fit(train_set, test_set, until_epoch)
    return ClassificationRun(result, initial, trainer)


# ----------------------------------------------------------------------
# CycleGAN training
# ----------------------------------------------------------------------
@dataclass
class GanRun:
    initial_cycle_l1: float
    final_cycle_l1: float
    initial_fid: float
    final_fid: float
    steps: int
    records: list = field(default_factory=list)


def domain_fid(real: np.ndarray, fake: np.ndarray, seed: int = 0) -> float:
    return frechet_distance(gaussian_stats(default_feature_extractor(real, seed)),
                            gaussian_stats(default_feature_extractor(fake, seed)))


def fid_record(domain: str, real: np.ndarray, fake: np.ndarray, seed: int = 0) -> dict:
    return {"domain": domain, "n_real": int(len(real)), "n_fake": int(len(fake)),
            "fid": domain_fid(real, fake, seed), "extractor_seed": int(seed)}


def train_cyclegan(config: ViTUnetConfig, domain_a: Dataset, domain_b: Dataset, steps: int = 2000,
                   weights: GanLossWeights | None = None, seed: int = 0, lr: float = 2e-4, betas=(0.5, 0.999),
                   pool_size: int = 50, batch_size: int = 1, eval_n: int = 64, extractor_seed: int = 0,
                   sample_every: int = 0, out_dir=None, sink=None) -> GanRun:
    """Train a ViTUnet CycleGAN; evaluates cycle L1 and A->B Fréchet distance before and after."""
    gan = build_cyclegan(config, weights, seed, lr, betas, pool_size)
    eval_a = domain_a.images[:eval_n]
    eval_b = domain_b.images[:eval_n]

    def evaluate(step):
        cyc = gan.cycle_l1(eval_a, eval_b)
        fid = domain_fid(eval_b, gan.translate(eval_a, "ab"), extractor_seed)
        rec = {"step": step, "cycle_l1": cyc, "fid_b": fid}
        if sink is not None:
            emit_metrics(sink, rec)
        return cyc, fid

    init_cyc, init_fid = evaluate(0)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(3)[2])
    records = []
    for step in range(steps):
        ia = rng.integers(0, len(domain_a), batch_size)
        ib = rng.integers(0, len(domain_b), batch_size)
        losses = gan.step(domain_a.images[ia], domain_b.images[ib])
        rec = {"step": step, **losses.as_dict()}
        records.append(rec)
        if sink is not None:
            emit_metrics(sink, rec)
        if sample_every and (step + 1) % sample_every == 0 and step + 1 < steps:
            evaluate(step + 1)
            if out_dir is not None:
                write_samples(gan, eval_a[:4], eval_b[:4], out_dir, step + 1)
    final_cyc, final_fid = evaluate(steps)
    if out_dir is not None:
        write_samples(gan, eval_a[:4], eval_b[:4], out_dir, steps)
    run = GanRun(init_cyc, final_cyc, init_fid, final_fid, steps, records)
    run.gan = gan
    return run


def write_samples(gan, images_a, images_b, out_dir, step: int) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for direction, imgs in (("ab", gan.translate(images_a, "ab")), ("ba", gan.translate(images_b, "ba"))):
        for i, img in enumerate(imgs):
            write_ppm(out / f"{step}_{direction}_{i}.ppm", img)


def load_gan_domains(domain_a: str = "", domain_b: str = "", toy_n: int = 256, seed: int = 0):
    if domain_a and domain_b:
        return load_ppm_dir(domain_a, "A"), load_ppm_dir(domain_b, "B")
    return gen_toy_domains(toy_n, seed)
