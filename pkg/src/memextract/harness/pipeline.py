"""Staged, cached extraction runs.

Every stage has a key derived from the config sections it reads and the keys
of the stages it consumes.  The manifest records each stage's key, the
checksums of the files it wrote and its wall-clock time; a stage is skipped
when its key matches and all its files still validate.  Deleting an artifact
therefore reruns its stage and, because keys chain, nothing upstream of it.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from memextract import classifier as clf
from memextract import container, diffusion, metrics
from memextract.harness.config import ExperimentConfig, hash_json
from memextract.harness.data import synth_dataset
from memextract.nn import Mlp

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
VARIANTS = ("random", "ti", "side")
VARIANT_LABELS = {"random": "Random", "ti": "OL-TI", "side": "SIDE"}
Z95 = 1.959963984540054


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    stages: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)

    @property
    def checkpoints(self) -> list[str]:
        return sorted(f for f in self.checksums if f.endswith(".ckpt"))

    @property
    def timings(self) -> dict:
        return {name: e["seconds"] for name, e in self.stages.items() if "seconds" in e}

    @property
    def checksums(self) -> dict:
        return {f: s for e in self.stages.values() for f, s in e.get("files", {}).items()}

    def verify(self, root) -> list[str]:
        """Problems with referenced files; empty when everything validates."""
        root = Path(root)
        problems = []
        for rel, digest in {**self.checksums, **self.reports}.items():
            path = root / rel
            if not path.exists():
                problems.append(f"missing {rel}")
            elif file_sha256(path) != digest:
                problems.append(f"checksum mismatch {rel}")
        return problems

    def save(self, root) -> None:
        text = json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True)
        container.atomic_write_bytes(Path(root) / MANIFEST, text.encode())

    @classmethod
    def load(cls, root) -> "RunManifest | None":
        path = Path(root) / MANIFEST
        if not path.exists():
            return None
        return cls(**json.loads(path.read_text()))


def lam_tag(lam: float) -> str:
    return f"{lam:g}".replace(".", "p")


def _write_text(path: Path, text: str) -> None:
    container.atomic_write_bytes(path, text.encode())


def _losses_csv(losses) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss"])
    w.writerows([i + 1, repr(float(v))] for i, v in enumerate(losses))
    return buf.getvalue()


class Pipeline:
    """One experiment directory; each accessor runs or reuses its stage."""

    def __init__(self, config: ExperimentConfig, out_dir=None, threads: int | None = None):
        self.cfg = config
        self.root = Path(out_dir or config.out_dir)
        self.threads = threads or config.threads
        self.root.mkdir(parents=True, exist_ok=True)
        old = RunManifest.load(self.root)
        self.manifest = RunManifest(config.hash(), old.stages if old else {},
                                    old.reports if old else {})
        _write_text(self.root / "config.json", json.dumps(config.to_dict(), indent=1) + "\n")
        self.sched = config.diffusion.make_schedule()
        self._keys: dict[str, str] = {}
        self._objects: dict[str, object] = {}

    # -- stage plumbing -------------------------------------------------

    def _valid(self, name, key) -> bool:
        entry = self.manifest.stages.get(name)
        if not entry or entry.get("key") != key or entry.get("status") != "done":
            return False
        for rel, digest in entry["files"].items():
            path = self.root / rel
            if not path.exists() or file_sha256(path) != digest:
                return False
        return True

    def _stage(self, name: str, key: str, files: list[str], build) -> bool:
        """Run ``build`` unless a valid cached result exists; returns True if it ran."""
        self._keys[name] = key
        if self._valid(name, key):
            log.debug("stage %s: cached", name)
            return False
        log.info("stage %s: running", name)
        t0 = time.perf_counter()
        try:
            build()
        except Exception as exc:
            self.manifest.stages[name] = {"key": key, "status": "failed", "error": repr(exc)}
            self.manifest.save(self.root)
            raise StageError(name, exc) from exc
        self.manifest.stages[name] = {
            "key": key, "status": "done", "seconds": round(time.perf_counter() - t0, 3),
            "files": {rel: file_sha256(self.root / rel) for rel in files}}
        self.manifest.save(self.root)
        return True

    def _key(self, name, *upstream, **sections) -> str:
        return hash_json({"stage": name, "upstream": [self._keys[u] for u in upstream],
                          "config": {k: _plain(v) for k, v in sections.items()}})

    # -- stages ------------------------------------------------------------

    def dataset(self):
        if "synth" in self._objects:
            return self._objects["synth"]
        rel = "data/dataset.bin"

        def build():
            ds = synth_dataset(self.cfg.dataset)
            container.write_container(self.root / rel, {"x": ds.x, "labels": ds.labels,
                                                        "centers": ds.centers}, {"role": "dataset"})

        self._stage("synth", self._key("synth", dataset=self.cfg.dataset), [rel], build)
        _, arrays = container.read_container(self.root / rel)
        self._objects["synth"] = arrays
        return arrays

    def denoiser(self) -> Mlp:
        if "train-diffusion" in self._objects:
            return self._objects["train-diffusion"]
        x = self.dataset()["x"]
        rel, loss_rel = "models/denoiser.ckpt", "logs/denoiser_loss.csv"

        def build():
            model, losses = diffusion.train_denoiser(x, self.sched, self.cfg.diffusion.denoiser())
            model.save(self.root / rel, role="denoiser", final_loss=losses[-1] if losses else None)
            _write_text(self.root / loss_rel, _losses_csv(losses))

        self._stage("train-diffusion", self._key("train-diffusion", "synth",
                                                 diffusion=self.cfg.diffusion), [rel, loss_rel], build)
        model, _ = Mlp.load(self.root / rel, role="denoiser")
        self._objects["train-diffusion"] = model
        return model

    def teacher(self) -> Mlp:
        if "train-teacher" in self._objects:
            return self._objects["train-teacher"]
        data = self.dataset()
        rel, labels_rel = "models/teacher.ckpt", "data/labels.csv"

        def build():
            labels = clf.assign_labels(data["x"], self.cfg.labels, data["labels"])
            clf.write_label_table(self.root / labels_rel, labels, self.cfg.labels)
            net, tl = clf.train_teacher(data["x"], labels, self.cfg.teacher)
            net.save(self.root / rel, role="teacher", accuracy=tl.accuracy,
                     n_classes=int(labels.max()) + 1)

        self._stage("train-teacher", self._key("train-teacher", "synth", labels=self.cfg.labels,
                                               teacher=self.cfg.teacher), [rel, labels_rel], build)
        net, _ = Mlp.load(self.root / rel, role="teacher")
        self._objects["train-teacher"] = net
        return net

    def pseudo(self) -> clf.PseudoDataset:
        if "generate-pseudo" in self._objects:
            return self._objects["generate-pseudo"]
        model, teacher = self.denoiser(), self.teacher()
        d, s = self.cfg.distill, self.cfg.sampling
        n = d.synthetic_factor * self.cfg.dataset.n
        rel = "data/pseudo.bin"

        def build():
            ps = clf.generate_pseudo_dataset(model, teacher, self.sched, n, d.pseudo_seed,
                                             steps=s.steps, eta=s.eta, threads=self.threads)
            container.write_container(self.root / rel, {"samples": ps.samples,
                                                        "soft_labels": ps.soft_labels},
                                      {"role": "pseudo"})

        key = self._key("generate-pseudo", "train-diffusion", "train-teacher", n=n,
                        seed=d.pseudo_seed, steps=s.steps, eta=s.eta)
        self._stage("generate-pseudo", key, [rel], build)
        _, arrays = container.read_container(self.root / rel)
        ps = clf.PseudoDataset(arrays["samples"], arrays["soft_labels"])
        self._objects["generate-pseudo"] = ps
        return ps

    def student(self) -> Mlp:
        if "distill" in self._objects:
            return self._objects["distill"]
        teacher, ps = self.teacher(), self.pseudo()
        rel, loss_rel = "models/student.ckpt", "logs/distill_loss.csv"

        def build():
            net, tl = clf.distill(teacher, ps, self.sched, self.cfg.distill)
            net.save(self.root / rel, role="student", holdout_kl=tl.holdout_kl,
                     holdout_agreement=tl.accuracy)
            _write_text(self.root / loss_rel, _losses_csv(tl.losses))

        self._stage("distill", self._key("distill", "generate-pseudo", distill=self.cfg.distill),
                    [rel, loss_rel], build)
        net, _ = Mlp.load(self.root / rel, role="student")
        self._objects["distill"] = net
        return net

    def classifier_for(self, variant: str):
        if variant == "side":
            return self.student(), "distill"
        if variant == "ti":
            return self.teacher(), "train-teacher"
        if variant == "random":
            return None, None
        raise ValueError(f"unknown variant {variant!r}")

    def samples(self, variant: str, lam: float, sampling=None) -> diffusion.SampleBatch:
        """Generated set for one variant and guidance scale.

        Every variant and scale uses the same chain seeds, so comparisons are
        paired and lambda = 0 is shared by all variants.
        """
        s = sampling or self.cfg.sampling
        if lam == 0 or variant == "random":
            if lam != 0:
                raise ValueError("the random variant is unguided (lambda = 0)")
            variant = "random"
        model = self.denoiser()
        net, net_stage = self.classifier_for(variant)
        name = f"extract/{variant}/{lam_tag(lam)}"
        if sampling is not None:
            name += "/" + hash_json(_plain(s))[:12]
        if name in self._objects:
            return self._objects[name]
        rel = f"samples/{name[len('extract/'):].replace('/', '_')}.bin"
        spec = diffusion.GuidanceSpec(lam=lam, target_label=s.target_label, steps=s.steps, eta=s.eta)

        def build():
            batch = diffusion.guided_sample(model, self.sched, spec, net, s.n_gen, s.seed,
                                            threads=self.threads, clip=s.clip)
            batch.model_checksum = self.manifest.stages["train-diffusion"]["files"]["models/denoiser.ckpt"]
            batch.save(self.root / rel)

        upstream = ("train-diffusion",) + ((net_stage,) if net_stage else ())
        self._stage(name, self._key("extract", *upstream, lam=lam, sampling=s), [rel], build)
        batch = diffusion.SampleBatch.load(self.root / rel)
        self._objects[name] = batch
        return batch

    def evaluate(self, variant: str, lam: float, sampling=None) -> metrics.MemorizationReport:
        batch = self.samples(variant, lam, sampling)
        ev = self.cfg.evaluation
        return metrics.evaluate(batch.samples, self.dataset()["x"], lam, ev.tier_list(),
                                ev.make_scorer(), threads=self.threads)

    # -- outputs ----------------------------------------------------------

    def write_reports(self, variant: str, reports) -> str:
        rel = f"reports/{variant}.csv"
        _write_text(self.root / rel, metrics.reports_csv(reports))
        _write_text(self.root / f"reports/matches_{variant}.csv", metrics.matches_csv(reports))
        self.manifest.reports[rel] = file_sha256(self.root / rel)
        self.manifest.save(self.root)
        return rel

    def write_table(self, rel: str, header, rows) -> Path:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        _write_text(self.root / rel, buf.getvalue())
        self.manifest.reports[rel] = file_sha256(self.root / rel)
        self.manifest.save(self.root)
        return self.root / rel


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        obj = dataclasses.asdict(obj)
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _fmt(x) -> str:
    return repr(float(x))


# -- aggregate views --------------------------------------------------------

@dataclass(frozen=True)
class Aggregate:
    """Tier metrics averaged over several independent guidance scales."""

    variant: str
    tier: str
    lambdas: tuple[float, ...]
    ams: float
    ums: float
    se: float  # binomial standard error of the averaged AMS
    n_gen: int

    def row(self):
        return [self.variant, self.tier, " ".join(f"{x:g}" for x in self.lambdas), _fmt(self.ams),
                _fmt(self.ums), _fmt(self.se), _fmt(Z95 * self.se), str(self.n_gen)]


AGGREGATE_COLUMNS = ["variant", "tier", "lambdas", "ams", "ums", "se", "band95", "n_gen"]


def aggregate(variant: str, reports) -> list[Aggregate]:
    out = []
    m = len(reports)
    for i, tier in enumerate(reports[0].tiers):
        ams = [r.tiers[i].ams for r in reports]
        ums = [r.tiers[i].ums for r in reports]
        var = sum(a * (1 - a) / r.n_gen for a, r in zip(ams, reports)) / m ** 2
        out.append(Aggregate(variant, tier.tier.name, tuple(r.lam for r in reports),
                             sum(ams) / m, sum(ums) / m, math.sqrt(var),
                             sum(r.n_gen for r in reports)))
    return out


def margin(a: Aggregate, b: Aggregate) -> tuple[float, float]:
    """``a.ams - b.ams`` and the 95% band of that difference for independent estimates."""
    return a.ams - b.ams, Z95 * math.hypot(a.se, b.se)


def _averaging_lambdas(cfg: ExperimentConfig) -> tuple[float, ...]:
    return cfg.window_lambdas() or cfg.lambda_set


def run_side(cfg: ExperimentConfig, out_dir=None, threads=None) -> RunManifest:
    """Full SIDE run over ``lambda_set``: per-lambda reports plus the window-averaged summary."""
    with threadpool_limits(1):
        p = Pipeline(cfg, out_dir, threads)
        reports = [p.evaluate("side", lam) for lam in cfg.lambda_set]
        p.write_reports("side", reports)
        window = set(_averaging_lambdas(cfg))
        chosen = [r for r in reports if r.lam in window]
        base = [r for r in reports if r.lam == 0]
        rows = [a.row() for a in aggregate("side", chosen)] + [a.row() for a in aggregate("random", base)]
        p.write_table("summary.csv", AGGREGATE_COLUMNS, rows)
        return p.manifest


SWEEP_COLUMNS = ["lambda", "tier", "ams", "ums"]
ARGMAX_COLUMNS = ["tier", "metric", "lambda", "value"]


def sweep_lambda(cfg: ExperimentConfig, lambdas=None, variant: str = "side", out_dir=None,
                 threads=None) -> list[metrics.MemorizationReport]:
    """Per-lambda table for one guided variant; writes ``sweep.csv`` and ``sweep_argmax.csv``."""
    lambdas = tuple(cfg.lambda_set if lambdas is None else lambdas)
    if not lambdas:
        raise ValueError("lambda range is empty")
    with threadpool_limits(1):
        p = Pipeline(cfg, out_dir, threads)
        reports = [p.evaluate(variant, lam) for lam in lambdas]
        p.write_reports(f"sweep_{variant}", reports)
        rows = [[_fmt(r.lam), t.tier.name, _fmt(t.ams), _fmt(t.ums)] for r in reports for t in r.tiers]
        p.write_table("sweep.csv", SWEEP_COLUMNS, rows)
        p.write_table("sweep_argmax.csv", ARGMAX_COLUMNS, argmax_rows(reports))
    return reports


def argmax_rows(reports) -> list[list[str]]:
    """Best lambda per tier and metric; ties go to the smallest lambda."""
    rows = []
    for i, tier in enumerate(reports[0].tiers):
        for metric in ("ams", "ums"):
            vals = [getattr(r.tiers[i], metric) for r in reports]
            j = int(np.argmax(vals))
            rows.append([tier.tier.name, metric, _fmt(reports[j].lam), _fmt(vals[j])])
    return rows


def interior_maximum(reports, tier: str = "mid") -> dict:
    """Sweep shape check: the best lambda beats both endpoints of the range."""
    by_lam = sorted(reports, key=lambda r: r.lam)
    vals = [r.tier(tier).ams for r in by_lam]
    j = int(np.argmax(vals))
    return {"lambda_star": by_lam[j].lam, "ams_star": vals[j], "ams_first": vals[0],
            "ams_last": vals[-1], "interior": vals[j] > vals[0] and vals[j] > vals[-1]}


COMPARE_COLUMNS = AGGREGATE_COLUMNS


def compare_variants(cfg: ExperimentConfig, out_dir=None, threads=None) -> dict[str, list[Aggregate]]:
    """Random, time-independent-teacher guidance and SIDE, averaged over the lambda window."""
    window = [lam for lam in _averaging_lambdas(cfg) if lam > 0]
    if not window:
        raise ValueError("the averaging window contains no positive guidance scale")
    with threadpool_limits(1):
        p = Pipeline(cfg, out_dir, threads)
        out = {"random": aggregate("random", [p.evaluate("random", 0.0)])}
        for variant in ("ti", "side"):
            reports = [p.evaluate(variant, lam) for lam in window]
            p.write_reports(f"compare_{variant}", reports)
            out[variant] = aggregate(variant, reports)
        p.write_table("compare.csv", COMPARE_COLUMNS, [a.row() for v in VARIANTS for a in out[v]])
    return out


def ordering(table: dict[str, list[Aggregate]], tier: str = "mid") -> dict:
    """SIDE's margin over each baseline at ``tier`` with its 95% band."""
    pick = {v: next(a for a in rows if a.tier == tier) for v, rows in table.items()}
    out = {}
    for other in ("random", "ti"):
        diff, band = margin(pick["side"], pick[other])
        out[other] = {"margin": diff, "band95": band, "beats": diff > band}
    return out
