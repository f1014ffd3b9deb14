"""Teacher pretraining, student distillation and the experiment drivers.

Student objective per step::

    total = origin + alpha * distill (+ adversarial)

``origin`` is the mean L1 reconstruction loss against the paired target;
``adversarial`` is the weighted LSGAN generator term when enabled. The
teacher and the projection heads never change during distillation.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import FeatureMap
from .evaluation import quality_metrics, predict
from .losses import DistillConfig, ProjectionHeads, distill_loss, make_heads
from .models import Adam, Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, lsgan_loss
from .serialize import file_sha256, load_checkpoint, save_checkpoint
from .tensor import NonFiniteError, Tensor, abs_, mean, no_grad, sub

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    adversarial: bool = False
    adv_weight: float = 0.1
    eval_every: int = 1
    teacher_width: int = 32
    student_width: int = 8
    depth: int = 3
    image_size: int = 64
    distill: DistillConfig = field(default_factory=DistillConfig)

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        for name in ("batch_size", "eval_every", "teacher_width", "student_width", "depth", "image_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.adv_weight < 0:
            raise ValueError("lr must be > 0 and adv_weight >= 0")

    def teacher_spec(self) -> GeneratorSpec:
        return GeneratorSpec(base_width=self.teacher_width, depth=self.depth, image_size=self.image_size)

    def student_spec(self) -> GeneratorSpec:
        return GeneratorSpec(base_width=self.student_width, depth=self.depth, image_size=self.image_size)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        distill = d.pop("distill", {}) or {}
        if isinstance(distill, dict):
            dknown = {f.name for f in dataclasses.fields(DistillConfig)}
            bad = set(distill) - dknown
            if bad:
                raise ValueError(f"unknown distill config keys: {sorted(bad)}")
            distill = DistillConfig(**distill)
        return cls(distill=distill, **d)

    def replace(self, **changes) -> "TrainConfig":
        distill_changes = changes.pop("distill", None)
        cfg = dataclasses.replace(self, **changes)
        if distill_changes:
            cfg = dataclasses.replace(cfg, distill=dataclasses.replace(cfg.distill, **distill_changes))
        return cfg


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg) -> str:
    d = cfg.to_dict() if hasattr(cfg, "to_dict") else cfg
    return hashlib.sha256(canonical_json(d).encode()).hexdigest()


@dataclass
class RunRecord:
    """Per-epoch log of one training run; epochs are only ever appended."""

    config: dict
    kind: str
    epochs: list = field(default_factory=list)
    wall_time: float = 0.0
    checkpoints: dict = field(default_factory=dict)
    status: str = "running"

    def append(self, entry: dict):
        self.epochs.append(dict(entry))

    def series(self, key: str) -> list:
        return [e[key] for e in self.epochs if e.get(key) is not None]

    @property
    def final(self) -> dict:
        return self.epochs[-1] if self.epochs else {}

    def to_jsonl(self) -> str:
        return "".join(canonical_json(e) + "\n" for e in self.epochs)

    def write(self, out_dir) -> dict:
        """Write config + epoch log; returns {artifact: sha256}."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(canonical_json(self.config) + "\n")
        (out / "record.jsonl").write_text(self.to_jsonl())
        return {name: file_sha256(out / name) for name in ("config.json", "record.jsonl")}

    @classmethod
    def read(cls, out_dir, kind: str = "") -> "RunRecord":
        out = Path(out_dir)
        config = json.loads((out / "config.json").read_text())
        lines = (out / "record.jsonl").read_text().splitlines()
        return cls(config, kind, [json.loads(line) for line in lines if line], status="complete")


# -- data iteration -------------------------------------------------------------------


def _batches(rng: np.random.Generator, n: int, batch_size: int):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _l1(a: Tensor, b) -> Tensor:
    return mean(abs_(sub(a, b)))


def _check_finite(value: float, what: str):
    if not np.isfinite(value):
        raise NonFiniteError(f"{what} is {value}")


def _eval_entry(model, dataset, epoch: int, cfg: TrainConfig) -> dict:
    if epoch % cfg.eval_every and epoch != cfg.epochs:
        return {}
    return {k: v for k, v in quality_metrics(model, dataset.eval).items()}


# -- teacher -----------------------------------------------------------------------------


def train_teacher(cfg: TrainConfig, dataset, out_dir=None) -> tuple[Generator, RunRecord]:
    """Supervised pretraining of the wide generator on the paired task."""
    start = time.perf_counter()
    teacher = Generator(cfg.teacher_spec(), seed=_derive(cfg.seed, "teacher"))
    record = RunRecord(cfg.to_dict(), "teacher")
    disc = _make_disc(cfg) if cfg.adversarial else None
    _fit_logged(teacher, disc, cfg, dataset, record, None, out_dir)
    record.wall_time = time.perf_counter() - start
    record.status = "complete"
    if out_dir is not None:
        save_generator(Path(out_dir) / "checkpoint", teacher)
        record.checkpoints["teacher"] = str(Path(out_dir) / "checkpoint")
    return teacher, record


# -- distillation ----------------------------------------------------------------------


@dataclass
class TeacherCache:
    """Frozen-teacher bottleneck features and outputs for a training split."""

    features: np.ndarray  # (N, c, h*w)
    outputs: np.ndarray  # (N, 3, H, W)
    grid: tuple

    @classmethod
    def build(cls, teacher: Generator, inputs: np.ndarray, batch_size: int = 32) -> "TeacherCache":
        feats, outs = [], []
        with no_grad():
            for i in range(0, len(inputs), batch_size):
                out, fmap = teacher.forward_with_features(Tensor(inputs[i:i + batch_size]))
                feats.append(fmap.values.data)
                outs.append(out.data)
        g = teacher.spec.bottleneck_size
        return cls(np.concatenate(feats), np.concatenate(outs), (g, g))


def _derive(seed: int, tag: str) -> int:
    tag_id = int.from_bytes(hashlib.sha256(tag.encode()).digest()[:4], "little")
    return int(np.random.SeedSequence([seed, tag_id]).generate_state(1)[0])


def _make_disc(cfg: TrainConfig) -> Discriminator:
    return Discriminator(DiscriminatorSpec(), seed=_derive(cfg.seed, "discriminator"))


def distill_student(
    cfg: TrainConfig,
    teacher: Generator,
    dataset,
    out_dir=None,
    cache: TeacherCache | None = None,
) -> tuple[Generator, RunRecord, ProjectionHeads]:
    """Train the narrow student with ``origin + alpha * distill`` against a frozen teacher."""
    start = time.perf_counter()
    student = Generator(cfg.student_spec(), seed=_derive(cfg.seed, "student"))
    s_spec, t_spec = student.spec, teacher.spec
    if s_spec.bottleneck_size != t_spec.bottleneck_size:
        raise ValueError(
            f"teacher bottleneck {t_spec.bottleneck_size}^2 and student bottleneck "
            f"{s_spec.bottleneck_size}^2 do not align region-for-region"
        )
    dc = cfg.distill
    regions = s_spec.bottleneck_size**2
    if dc.baseline in ("reko", "l2_regions") and not 1 <= dc.k <= regions:
        raise ValueError(f"K={dc.k} outside [1, {regions}] for a {s_spec.bottleneck_size}^2 bottleneck")
    heads = make_heads(s_spec.bottleneck_channels, t_spec.bottleneck_channels, dc.embed_dim, dc.head_seed)
    if cache is None:
        cache = TeacherCache.build(teacher, dataset.train.inputs)
    teacher.set_trainable(False)
    record = RunRecord(cfg.to_dict(), "student")
    disc = _make_disc(cfg) if cfg.adversarial else None
    _fit_logged(student, disc, cfg, dataset, record, (heads, cache), out_dir)
    record.wall_time = time.perf_counter() - start
    record.status = "complete"
    if out_dir is not None:
        save_generator(Path(out_dir) / "checkpoint", student)
        save_checkpoint(
            Path(out_dir) / "heads",
            {"student": heads.student.weight.data, "teacher": heads.teacher.weight.data},
            {"embed_dim": dc.embed_dim, "head_seed": dc.head_seed},
        )
        record.checkpoints["student"] = str(Path(out_dir) / "checkpoint")
        record.checkpoints["heads"] = str(Path(out_dir) / "heads")
    return student, record, heads


def _fit_logged(model, disc, cfg, dataset, record: RunRecord, distill, out_dir):
    """``_fit``, leaving the partial record in ``out_dir`` if training diverges."""
    try:
        _fit(model, disc, cfg, dataset, record, distill)
    except NonFiniteError:
        if out_dir is not None:
            record.write(out_dir)
        raise


def _fit(model: Generator, disc, cfg: TrainConfig, dataset, record: RunRecord, distill):
    rng = np.random.default_rng(_derive(cfg.seed, "batches"))
    opt = Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    d_opt = Adam(disc.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2)) if disc is not None else None
    dc = cfg.distill
    train = dataset.train
    for epoch in range(1, cfg.epochs + 1):
        sums = {"origin": 0.0, "distill": 0.0, "adversarial": 0.0, "total": 0.0, "disc": 0.0}
        steps = 0
        for idx in _batches(rng, len(train), cfg.batch_size):
            try:
                parts = _step(model, disc, opt, d_opt, cfg, train, idx, distill)
            except NonFiniteError as e:
                record.status = "diverged"
                record.append({"epoch": epoch, "step": steps, "error": str(e)})
                raise NonFiniteError(f"epoch {epoch}, step {steps}: {e}") from e
            for k in sums:
                sums[k] += parts[k]
            steps += 1
        entry = {"epoch": epoch, "alpha": dc.alpha if distill is not None else 0.0}
        entry.update({k: v / steps for k, v in sums.items()})
        entry.update(_eval_entry(model, dataset, epoch, cfg))
        record.append(entry)
        log.info("epoch %d: %s", epoch, {k: round(v, 5) for k, v in entry.items() if isinstance(v, float)})


def _step(model, disc, opt, d_opt, cfg: TrainConfig, train, idx, distill) -> dict:
    """One generator update (and one discriminator update in adversarial mode)."""
    dc = cfg.distill
    x = Tensor(train.inputs[idx])
    y = train.targets[idx]
    out, fmap = model.forward_with_features(x)
    origin = _l1(out, y)
    total = origin
    parts = {"origin": origin.item(), "distill": 0.0, "adversarial": 0.0, "disc": 0.0}
    if distill is not None and dc.baseline != "none":
        heads, cache = distill
        ft = FeatureMap(Tensor(cache.features[idx]), *cache.grid)
        d_loss = distill_loss(dc, heads, fmap, ft, out, Tensor(cache.outputs[idx]))
        parts["distill"] = d_loss.item()
        total = total + d_loss * dc.alpha
    if disc is not None:
        disc.set_trainable(False)
        adv = lsgan_loss(disc(x, out), 1.0) * cfg.adv_weight
        parts["adversarial"] = adv.item()
        total = total + adv
    parts["total"] = total.item()
    _check_finite(parts["total"], "training loss")
    opt.zero_grad()
    total.backward()
    opt.step()
    if disc is not None:
        disc.set_trainable(True)
        fake = Tensor(out.data)
        d_loss = (lsgan_loss(disc(x, Tensor(y)), 1.0) + lsgan_loss(disc(x, fake), 0.0)) * 0.5
        parts["disc"] = d_loss.item()
        _check_finite(parts["disc"], "discriminator loss")
        d_opt.zero_grad()
        d_loss.backward()
        d_opt.step()
    return parts


# -- checkpoints ----------------------------------------------------------------------------


def save_generator(directory, model: Generator) -> Path:
    return save_checkpoint(directory, model.state_dict(), {"generator_spec": model.spec.to_dict()})


def load_generator(directory) -> Generator:
    params, meta = load_checkpoint(directory)
    if "generator_spec" not in meta:
        raise ValueError(f"{directory}: checkpoint carries no generator spec")
    model = Generator(GeneratorSpec(**meta["generator_spec"]), seed=0)
    model.load_state_dict(params)
    return model


# -- experiment drivers ----------------------------------------------------------------------

ABLATION_GRID = (
    # (crucial regions, contrastive distillation) -> objective
    ((False, False), "none"),
    ((False, True), "region_dis"),
    ((True, False), "l2_regions"),
    ((True, True), "reko"),
)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("REKO_THREADS", "1")))
    except ValueError:
        return 1


def run_many(jobs, teacher: Generator, dataset, cache: TeacherCache | None = None) -> list:
    """Run ``(name, TrainConfig)`` distillation jobs, in parallel up to ``REKO_THREADS``."""
    if cache is None:
        cache = TeacherCache.build(teacher, dataset.train.inputs)

    def one(job):
        name, cfg = job
        student, record, heads = distill_student(cfg, teacher, dataset, cache=cache)
        return name, cfg, student, record, heads

    workers = _threads()
    if workers == 1:
        return [one(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, jobs))


def run_ablation_grid(base_cfg: TrainConfig, teacher: Generator, dataset, seeds=(0,), cache=None) -> list[dict]:
    """One student per (CR, CD) cell and seed; returns rows with the final eval metrics."""
    jobs = []
    for (cr, cd), baseline in ABLATION_GRID:
        for seed in seeds:
            cfg = base_cfg.replace(seed=seed, distill={"baseline": baseline})
            jobs.append(((cr, cd, baseline, seed), cfg))
    rows = []
    for (cr, cd, baseline, seed), cfg, student, record, heads in run_many(jobs, teacher, dataset, cache):
        rows.append({
            "CR": cr, "CD": cd, "baseline": baseline, "seed": seed,
            "config_hash": config_hash(cfg), "record": record, "student": student, "heads": heads,
            **{k: record.final.get(k) for k in ("fg_mse", "bg_mse", "psnr")},
        })
    return rows


def run_sensitivity_sweep(
    base_cfg: TrainConfig, teacher: Generator, dataset, alphas, ks, seeds=(0,), cache=None
) -> list[dict]:
    """One ReKo student per (alpha, K, seed) grid point."""
    if not alphas or not ks:
        raise ValueError("sensitivity sweep needs non-empty alpha and K lists")
    jobs = []
    for a in alphas:
        for k in ks:
            for seed in seeds:
                cfg = base_cfg.replace(seed=seed, distill={"alpha": float(a), "k": int(k)})
                jobs.append(((a, k, seed), cfg))
    rows = []
    for (a, k, seed), cfg, student, record, heads in run_many(jobs, teacher, dataset, cache):
        rows.append({
            "alpha": a, "k": k, "seed": seed, "config_hash": config_hash(cfg),
            "record": record, "student": student, "heads": heads,
            **{m: record.final.get(m) for m in ("fg_mse", "bg_mse", "psnr")},
        })
    return rows


def summarize(rows: list[dict], keys: tuple[str, ...], metric: str = "fg_mse") -> list[dict]:
    """Mean/std of ``metric`` over seeds for each distinct value of ``keys``."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r[metric])
    out = []
    for key, vals in groups.items():
        v = np.asarray(vals, dtype=np.float64)
        out.append({**dict(zip(keys, key)), "n": len(v), "mean": float(v.mean()), "std": float(v.std())})
    return out


def format_table(summary: list[dict], keys: tuple[str, ...], metric: str = "fg_mse") -> str:
    head = " | ".join(list(keys) + [f"{metric} mean", "std", "n"])
    lines = [head, "-" * len(head)]
    for s in summary:
        cells = [str(s[k]) for k in keys] + [f"{s['mean']:.5f}", f"{s['std']:.5f}", str(s["n"])]
        lines.append(" | ".join(cells))
    return "\n".join(lines)
