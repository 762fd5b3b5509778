"""Toy-scale experiment runners.

Every runner writes its CSVs, a ``manifest.json`` (full spec, seed and the
digests of every checkpoint used) and, where it makes sense, an SVG plot
rendered from the CSV alone into ``<out>/<experiment>/``. Trained models are
cached under ``<out>/checkpoints/<tag>-<hash>/`` keyed by model config, train
config and training data, so commands sharing a model train it once.

CSV schemas
-----------
sweep_t.csv       dataset,t,l_d,l_c,l_recon,stderr
sweep_steps.csv   step,dataset,t,l_d,l_c,l_recon,stderr
model_size.csv    size_tag,dataset,role,l_recon,stderr,ratio
length_bins.csv   model,bin_lo,bin_hi,n,l_recon,stderr
metrics.csv       id_domain,ood_domain,detector,auroc,far95,n_id,n_ood
scores.csv        sample_id,domain,detector,score
lambda.csv        lambda,ood_domain,auroc,far95
beta.csv          beta_start,beta_end,id_l_recon,ood_l_recon,auroc,far95
fewshot.csv       shots,seed,n_train,auroc,far95
fewshot_summary.csv  shots,auroc_mean,auroc_stderr,n_seeds
project.csv       sample_id,domain,pc1,pc2
distinct.csv      source,n,distinct
stats.csv         id_domain,ood_domain,id_vocab,ood_avg_len,token_overlap
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import detect
from .diffusion import sample
from .model import DenoiserModel, ModelConfig
from .rng import stream
from .text import Corpus, TokenSequence, build_vocab, corpus_stats, decode, encode_corpus, load_corpus, split, tokenize
from .toydata import make_domains
from .trainer import Checkpoint, TrainConfig, assign_params, load_checkpoint, recon_scores, train, write_curve

log = logging.getLogger(__name__)

LAMBDA_GRID = [0.99, 0.9, 0.7, 0.5, 0.3, 0.1]
BETA_RANGES = [[1e-3, 0.2], [1e-4, 2e-2], [1e-5, 2e-3]]


@dataclass
class ExperimentSpec:
    name: str = "experiment"
    id_domain: str = "questions"
    ood_domains: list[str] = field(default_factory=lambda: ["captions", "reviews", "news"])
    data_dir: str | None = None
    sentences: dict[str, int] = field(
        default_factory=lambda: {"questions": 6250, "captions": 2000, "reviews": 2000, "news": 2000})
    overlap: float = 0.4
    data_seed: int = 0
    split_fractions: list[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])
    model: dict = field(default_factory=lambda: {"emb_std": 1.0})
    train: dict = field(default_factory=lambda: {"lr": 1e-3, "steps": 5000, "checkpoint_every": 1000})
    t_values: list[int] = field(default_factory=lambda: [100, 200, 300, 400, 500, 600, 700, 800, 900])
    step_t_values: list[int] = field(default_factory=lambda: [500, 700])
    t_eval: int = 700
    K: int = 10
    lam: float = 0.99
    lambdas: list[float] = field(default_factory=lambda: list(LAMBDA_GRID))
    beta_ranges: list[list[float]] = field(default_factory=lambda: [list(b) for b in BETA_RANGES])
    beta_steps: int = 1000
    shots: list[int] = field(default_factory=lambda: [10, 100, 1000, 0])
    fewshot_seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    fewshot_steps: int = 600
    sizes: list[str] = field(default_factory=lambda: ["base-analog", "large-analog"])
    size_steps: int = 1500
    long_domain: str = "news"
    long_n: int = 128
    long_steps: int = 1500
    length_bin: int = 10
    min_bin_count: int = 5
    baseline_steps: int = 1000
    pretrain_steps: int = 0
    mlm_draws: int = 10
    eval_size: int = 300
    sample_count: int = 64
    seed: int = 7
    out: str = "runs"

    def __post_init__(self):
        for axis in ("t_values", "step_t_values", "lambdas", "beta_ranges", "shots", "fewshot_seeds", "sizes"):
            if not getattr(self, axis):
                raise ValueError(f"sweep axis {axis!r} is empty")
        if not self.ood_domains:
            raise ValueError("at least one OOD domain is required")
        if self.id_domain in self.ood_domains:
            raise ValueError("the ID domain cannot also be an OOD domain")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def domains(self) -> list[str]:
        return sorted({self.id_domain, *self.ood_domains, self.long_domain})

    def train_config(self, **over) -> TrainConfig:
        return TrainConfig(**{"seed": self.seed, **self.train, **over})

    def model_config(self, vocab_size: int, **over) -> ModelConfig:
        kw = {**self.model, **over}
        return ModelConfig.preset(kw.pop("size_tag", "base-analog"), vocab_size=vocab_size, **kw)


# ------------------------------------------------------------------ data
class Workspace:
    """Corpora, their splits, one shared vocabulary and per-length encodings."""

    def __init__(self, spec: ExperimentSpec):
        self.spec = spec
        self.corpora = self._load()
        self.vocab = build_vocab(s for name in sorted(self.corpora) for s in self.corpora[name].sentences)
        self.splits = {
            name: dict(zip(("train", "dev", "test"), split(c, spec.split_fractions, seed=spec.seed)))
            for name, c in self.corpora.items()
        }
        self._enc: dict = {}
        self._components: dict = {}

    def _load(self) -> dict[str, Corpus]:
        spec = self.spec
        if spec.data_dir is None:
            sizes = {d: spec.sentences.get(d, 2000) for d in spec.domains}
            return make_domains(sizes, spec.overlap, spec.data_seed)
        out = {}
        for name in spec.domains:
            base = Path(spec.data_dir) / name
            path = base.with_suffix(".jsonl") if base.with_suffix(".jsonl").exists() else base.with_suffix(".txt")
            if not path.exists():
                raise FileNotFoundError(f"corpus for domain {name!r} not found under {spec.data_dir}")
            out[name] = load_corpus(path, domain=name)
        return out

    def corpus(self, domain: str, part: str) -> Corpus:
        return self.splits[domain][part]

    def seqs(self, domain: str, part: str, n: int, limit: int | None = None) -> list[TokenSequence]:
        key = (domain, part, n)
        if key not in self._enc:
            self._enc[key] = encode_corpus(self.corpus(domain, part), self.vocab, n)
        out = self._enc[key]
        return out if limit is None else out[:limit]


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:12]


def _data_digest(seqs: Sequence[TokenSequence]) -> str:
    h = hashlib.sha256()
    for s in seqs:
        h.update(s.ids.tobytes())
        h.update(str(s.label).encode())
    return h.hexdigest()[:12]


def fit_model(spec: ExperimentSpec, ws: Workspace, tag: str, data: Sequence[TokenSequence],
              model_over: dict | None = None, train_over: dict | None = None,
              init: Checkpoint | None = None) -> list[Checkpoint]:
    """Train (or load from the cache) a model; returns its checkpoint series.

    ``init`` starts training from another checkpoint's parameters (same architecture).
    """
    mcfg = spec.model_config(len(ws.vocab), **(model_over or {}))
    tcfg = spec.train_config(**(train_over or {}))
    key = _digest({"model": mcfg.to_dict(), "train": asdict(tcfg), "data": _data_digest(data),
                   "init": init.digest if init is not None else None})
    root = Path(spec.out) / "checkpoints" / f"{tag}-{key}"
    if (root / "DONE").exists():
        return [load_checkpoint(p) for p in sorted(root.glob("step*"))]
    log.info("training %s (%d steps)", tag, tcfg.steps)
    model = DenoiserModel(mcfg, seed=tcfg.seed)
    if init is not None:
        assign_params(model, init.params)
    ckpts = train(tcfg, model, data, checkpoint_dir=root)
    write_curve(ckpts[-1].history, root / "curve.csv")
    (root / "DONE").write_text("\n", encoding="utf-8")
    return ckpts


def pretrained(spec: ExperimentSpec, ws: Workspace, n: int) -> Checkpoint | None:
    """Optional MLM pretraining on the mixed training splits of every domain."""
    if spec.pretrain_steps <= 0:
        return None
    mixed = [s for d in sorted(ws.splits) for s in ws.seqs(d, "train", n)]
    return fit_model(spec, ws, "pretrain", mixed, {"n": n},
                     {"objective": "mlm", "steps": spec.pretrain_steps, "checkpoint_every": 0})[-1]


def diffusion_model(spec: ExperimentSpec, ws: Workspace) -> list[Checkpoint]:
    n = spec.model.get("n", 32)
    return fit_model(spec, ws, "diffusion", ws.seqs(spec.id_domain, "train", n), init=pretrained(spec, ws, n))


def _n(ckpt: Checkpoint) -> int:
    return ckpt.model_config["n"]


def _schedule(ckpt: Checkpoint):
    tc = ckpt.train_config
    return TrainConfig(**tc).schedule()


# ------------------------------------------------------------- outputs
def _write_csv(path: Path, header: Sequence[str], rows: Sequence[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, list(header), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})
    return path


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_manifest(out_dir: Path, spec: ExperimentSpec, checkpoints: dict[str, Checkpoint], **extra) -> Path:
    manifest = {
        "experiment": out_dir.name,
        "spec": spec.to_dict(),
        "seed": spec.seed,
        "checkpoints": {tag: {"step": c.step, "digest": c.digest} for tag, c in checkpoints.items()},
        **extra,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


def plot_csv(csv_path: str | Path, svg_path: str | Path, x: str, y: str, group: str, title: str = "") -> Path:
    """Line plot of ``y`` against ``x`` with one line per ``group`` value; depends only on the CSV."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = read_csv(csv_path)
    series: dict[str, list[tuple[float, float]]] = {}
    for r in rows:
        series.setdefault(r[group], []).append((float(r[x]), float(r[y])))
    with matplotlib.rc_context({"svg.hashsalt": "diffood", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for name in sorted(series):
            pts = sorted(series[name])
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=name)
        ax.set_xlabel(x)
        ax.set_ylabel(y)
        if title:
            ax.set_title(title)
        ax.legend()
        fig.tight_layout()
        fig.savefig(svg_path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return Path(svg_path)


def _out(spec: ExperimentSpec, name: str) -> Path:
    d = Path(spec.out) / name
    d.mkdir(parents=True, exist_ok=True)
    return d


def _eval_sets(spec: ExperimentSpec, ws: Workspace, n: int) -> dict[str, list[TokenSequence]]:
    out = {spec.id_domain: ws.seqs(spec.id_domain, "test", n, spec.eval_size)}
    for d in spec.ood_domains:
        out[d] = ws.seqs(d, "test", n, spec.eval_size)
    return out


def _key(domain: str, part: str = "test") -> str:
    return f"{domain}/{part}"


def _stderr(x: np.ndarray) -> float:
    return detect.standard_error(x)


# ------------------------------------------------------------- sweeps
def run_sweep_t(spec: ExperimentSpec, ws: Workspace | None = None, ckpt: Checkpoint | None = None) -> list[dict]:
    """Mean per-word losses per (dataset, t) for the final diffusion checkpoint."""
    ws = ws or Workspace(spec)
    ckpt = ckpt or diffusion_model(spec, ws)[-1]
    model, schedule = ckpt.model(), _schedule(ckpt)
    rows = []
    for name, seqs in _eval_sets(spec, ws, _n(ckpt)).items():
        for t in spec.t_values:
            l_d, l_c = recon_scores(model, schedule, seqs, t, spec.K, spec.seed, _key(name))
            r = l_d + l_c
            rows.append(dict(dataset=name, t=t, l_d=l_d.mean(), l_c=l_c.mean(), l_recon=r.mean(), stderr=_stderr(r)))
    out = _out(spec, "sweep_t")
    path = _write_csv(out / "sweep_t.csv", ["dataset", "t", "l_d", "l_c", "l_recon", "stderr"], rows)
    plot_csv(path, out / "sweep_t.svg", "t", "l_recon", "dataset", "reconstruction loss vs diffusion step")
    write_manifest(out, spec, {"diffusion": ckpt})
    return rows


def run_sweep_steps(spec: ExperimentSpec, ws: Workspace | None = None,
                    ckpts: Sequence[Checkpoint] | None = None) -> list[dict]:
    """Losses per (checkpoint step, dataset, t) over the training checkpoint series."""
    ws = ws or Workspace(spec)
    ckpts = list(ckpts or diffusion_model(spec, ws))
    rows = []
    for ck in ckpts:
        model, schedule = ck.model(), _schedule(ck)
        for name, seqs in _eval_sets(spec, ws, _n(ck)).items():
            for t in spec.step_t_values:
                l_d, l_c = recon_scores(model, schedule, seqs, t, spec.K, spec.seed, _key(name))
                r = l_d + l_c
                rows.append(dict(step=ck.step, dataset=name, t=t, l_d=l_d.mean(), l_c=l_c.mean(),
                                 l_recon=r.mean(), stderr=_stderr(r)))
    out = _out(spec, "sweep_steps")
    path = _write_csv(out / "sweep_steps.csv", ["step", "dataset", "t", "l_d", "l_c", "l_recon", "stderr"], rows)
    t_plot = spec.step_t_values[-1]
    sub = [r for r in rows if r["t"] == t_plot]
    plot_path = _write_csv(out / f"sweep_steps_t{t_plot}.csv", ["step", "dataset", "t", "l_d", "l_c", "l_recon", "stderr"], sub)
    plot_csv(plot_path, out / "sweep_steps.svg", "step", "l_recon", "dataset", f"reconstruction loss at t={t_plot}")
    write_manifest(out, spec, {f"step{c.step}": c for c in ckpts})
    return rows


def run_model_size(spec: ExperimentSpec, ws: Workspace | None = None) -> list[dict]:
    """ID and OOD losses at t_eval for each size preset under identical data, seed and steps."""
    ws = ws or Workspace(spec)
    n = spec.model.get("n", 32)
    data = ws.seqs(spec.id_domain, "train", n)
    rows, used = [], {}
    for size in spec.sizes:
        ck = fit_model(spec, ws, f"size-{size}", data, {"size_tag": size}, {"steps": spec.size_steps})[-1]
        used[size] = ck
        model, schedule = ck.model(), _schedule(ck)
        means = {}
        for name, seqs in _eval_sets(spec, ws, n).items():
            l_d, l_c = recon_scores(model, schedule, seqs, spec.t_eval, spec.K, spec.seed, _key(name))
            r = l_d + l_c
            means[name] = (r.mean(), _stderr(r))
        base = means[spec.id_domain][0]
        for name, (m, se) in means.items():
            rows.append(dict(size_tag=size, dataset=name, role="id" if name == spec.id_domain else "ood",
                             l_recon=m, stderr=se, ratio=m / base))
    out = _out(spec, "model_size")
    _write_csv(out / "model_size.csv", ["size_tag", "dataset", "role", "l_recon", "stderr", "ratio"], rows)
    write_manifest(out, spec, used)
    return rows


def length_bin_rows(model_tag: str, lengths: np.ndarray, losses: np.ndarray, width: int,
                    min_count: int = 1) -> tuple[list[dict], list[dict]]:
    """Bucket per-sentence losses by raw length; returns (kept rows, omitted bins)."""
    bins = lengths // width
    rows, omitted = [], []
    for b in range(int(bins.min()), int(bins.max()) + 1):
        sel = losses[bins == b]
        lo, hi = b * width, (b + 1) * width
        if len(sel) < max(min_count, 1):
            omitted.append({"model": model_tag, "bin_lo": lo, "bin_hi": hi, "n": int(len(sel))})
            continue
        rows.append(dict(model=model_tag, bin_lo=lo, bin_hi=hi, n=int(len(sel)), l_recon=sel.mean(),
                         stderr=_stderr(sel)))
    return rows, omitted


def run_length_bins(spec: ExperimentSpec, ws: Workspace | None = None, short: Checkpoint | None = None,
                    long: Checkpoint | None = None) -> list[dict]:
    """Per-word loss at t_eval by raw sentence length for a short-trained and a long-trained model."""
    ws = ws or Workspace(spec)
    short = short or diffusion_model(spec, ws)[-1]
    if long is None:
        data = ws.seqs(spec.long_domain, "train", spec.long_n)
        long = fit_model(spec, ws, "long", data, {"n": spec.long_n}, {"steps": spec.long_steps})[-1]
    pool = sorted({spec.id_domain, *spec.ood_domains, spec.long_domain})
    lengths = np.concatenate([
        [len(tokenize(s)) for s in ws.corpus(d, "test").sentences[: spec.eval_size]] for d in pool
    ]).astype(np.int64)
    rows, omitted = [], []
    for tag, ck in (("short", short), ("long", long)):
        model, schedule = ck.model(), _schedule(ck)
        losses = []
        for d in pool:
            l_d, l_c = recon_scores(model, schedule, ws.seqs(d, "test", _n(ck), spec.eval_size), spec.t_eval,
                                    spec.K, spec.seed, _key(d))
            losses.append(l_d + l_c)
        r, o = length_bin_rows(tag, lengths, np.concatenate(losses), spec.length_bin, spec.min_bin_count)
        rows += r
        omitted += o
    out = _out(spec, "length_bins")
    path = _write_csv(out / "length_bins.csv", ["model", "bin_lo", "bin_hi", "n", "l_recon", "stderr"], rows)
    plot_csv(path, out / "length_bins.svg", "bin_lo", "l_recon", "model", "per-word loss by sentence length")
    write_manifest(out, spec, {"short": short, "long": long}, omitted_bins=omitted)
    return rows


# ----------------------------------------------------------- detection
def _reprs(model: DenoiserModel, seqs: Sequence[TokenSequence], batch_size: int = 512) -> np.ndarray:
    return np.concatenate([model.hidden_repr(seqs[i : i + batch_size]) for i in range(0, len(seqs), batch_size)])


def _classify(model: DenoiserModel, seqs: Sequence[TokenSequence], batch_size: int = 512):
    parts = [model.classify(seqs[i : i + batch_size]) for i in range(0, len(seqs), batch_size)]
    return np.concatenate([p for p, _ in parts]), np.concatenate([z for _, z in parts])


def control_name(spec: ExperimentSpec) -> str:
    return f"{spec.id_domain}~copy"


def diffusion_components(spec: ExperimentSpec, ws: Workspace, ckpt: Checkpoint) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per evaluation set: (L_recon at t_eval, class-free Mahalanobis on the diffusion model's h(x)).

    Besides the ID test set and each OOD test set this scores the ID dev set
    (for threshold calibration) and a copy of the ID test set under fresh
    noise draws (the identical-corpus control).
    """
    cache_key = (ckpt.digest, spec.t_eval, spec.K, spec.seed, spec.eval_size)
    if cache_key in ws._components:
        return ws._components[cache_key]
    model, schedule, n = ckpt.model(), _schedule(ckpt), _n(ckpt)
    stats = detect.maha_fit(_reprs(model, ws.seqs(spec.id_domain, "train", n)))
    sets = {**_eval_sets(spec, ws, n), f"{spec.id_domain}/dev": ws.seqs(spec.id_domain, "dev", n, spec.eval_size)}
    keys = {name: _key(name) for name in sets}
    keys[f"{spec.id_domain}/dev"] = _key(spec.id_domain, "dev")
    sets[control_name(spec)] = sets[spec.id_domain]
    keys[control_name(spec)] = _key(spec.id_domain, "copy")
    out = {}
    for name, seqs in sets.items():
        r = detect.recon_score(seqs, model, schedule, spec.t_eval, spec.K, spec.seed, keys[name])
        out[name] = (r, detect.maha_score(_reprs(model, seqs), stats))
    ws._components[cache_key] = out
    return out


def baseline_models(spec: ExperimentSpec, ws: Workspace) -> dict[str, Checkpoint]:
    n = spec.model.get("n", 32)
    data = ws.seqs(spec.id_domain, "train", n)
    n_classes = 1 + max(s.label for s in data) if data[0].label is not None else 0
    out = {"mlm": fit_model(spec, ws, "mlm", data, None,
                            {"objective": "mlm", "steps": spec.baseline_steps, "checkpoint_every": 0})[-1]}
    if n_classes:
        out["classifier"] = fit_model(spec, ws, "classifier", data, {"num_classes": n_classes},
                                      {"objective": "classifier", "steps": spec.baseline_steps,
                                       "checkpoint_every": 0})[-1]
    return out


def run_detection(spec: ExperimentSpec, ws: Workspace | None = None, ckpt: Checkpoint | None = None,
                  detectors: Sequence[str] = detect.DETECTORS) -> list[dict]:
    """AUROC / FAR95 of every requested detector for every (ID, OOD) pair plus the identical-corpus control."""
    ws = ws or Workspace(spec)
    ckpt = ckpt or diffusion_model(spec, ws)[-1]
    unknown = set(detectors) - set(detect.DETECTORS)
    if unknown:
        raise ValueError(f"unknown detectors {sorted(unknown)}")
    comps = diffusion_components(spec, ws, ckpt)
    dev_name = f"{spec.id_domain}/dev"
    targets = [spec.id_domain, *spec.ood_domains, control_name(spec)]
    report = detect.ScoreReport()
    used = {"diffusion": ckpt}
    for name in targets:
        r, m = comps[name]
        if "diffusion" in detectors:
            report.add(name, "diffusion", r)
        if "diffusion+maha" in detectors:
            report.add(name, "diffusion+maha", detect.combined_score(r, m, spec.lam))
    dev_combined = detect.combined_score(*comps[dev_name], spec.lam)
    gamma = detect.id_threshold(dev_combined, 95)
    id_accept = float(np.mean(detect.decide(report.scores[spec.id_domain].get("diffusion+maha", dev_combined), gamma) == 0))

    wanted = set(detectors) & {"cosine", "mlm", "msp", "energy", "maha"}
    if wanted:
        base = baseline_models(spec, ws)
        used.update(base)
        n = _n(ckpt)
        sets = {name: ws.seqs(spec.id_domain if name == control_name(spec) else name, "test", n, spec.eval_size)
                for name in targets}
        if "mlm" in wanted:
            mlm = base["mlm"].model()
            for name, seqs in sets.items():
                part = "copy" if name == control_name(spec) else "test"
                report.add(name, "mlm", detect.mlm_score(seqs, mlm, spec.mlm_draws, spec.seed,
                                                         _key(name.split("~")[0], part)))
        cls_wanted = wanted - {"mlm"}
        if cls_wanted:
            if "classifier" not in base:
                raise ValueError("classifier baselines need a labelled ID corpus")
            clf = base["classifier"].model()
            train_seqs = ws.seqs(spec.id_domain, "train", n)
            dev_reprs = _reprs(clf, ws.seqs(spec.id_domain, "dev", n))
            stats = detect.maha_fit(_reprs(clf, train_seqs), [s.label for s in train_seqs])
            for name, seqs in sets.items():
                h = _reprs(clf, seqs)
                probs, logits = _classify(clf, seqs)
                if "cosine" in wanted:
                    report.add(name, "cosine", detect.cosine_score(h, dev_reprs))
                if "maha" in wanted:
                    report.add(name, "maha", detect.maha_score(h, stats))
                if "msp" in wanted:
                    report.add(name, "msp", detect.msp_score(probs))
                if "energy" in wanted:
                    report.add(name, "energy", detect.energy_score(logits))

    rows = []
    id_scores = report.scores[spec.id_domain]
    for name in targets[1:]:
        for det in detectors:
            m = detect.DetectionMetrics.compute(id_scores[det], report.scores[name][det])
            rows.append(dict(id_domain=spec.id_domain, ood_domain=name, detector=det, auroc=m.auroc,
                             far95=m.far95, n_id=m.n_id, n_ood=m.n_ood))
    report.provenance = {"t_eval": spec.t_eval, "lambda": spec.lam, "K": spec.K, "gamma": gamma,
                         "id_test_accept_rate": id_accept}
    out = _out(spec, "detect")
    detect.write_metrics_csv(rows, out / "metrics.csv")
    report.write_csv(out / "scores.csv")
    write_manifest(out, spec, used, provenance=report.provenance, detectors=list(detectors))
    return rows


def run_lambda_sweep(spec: ExperimentSpec, ws: Workspace | None = None, ckpt: Checkpoint | None = None) -> list[dict]:
    """Detection quality of lam * L_recon + (1 - lam) * d(x) over the lambda grid."""
    ws = ws or Workspace(spec)
    ckpt = ckpt or diffusion_model(spec, ws)[-1]
    comps = diffusion_components(spec, ws, ckpt)
    id_r, id_m = comps[spec.id_domain]
    rows = []
    for lam in spec.lambdas:
        a = detect.combined_score(id_r, id_m, lam)
        for d in spec.ood_domains:
            b = detect.combined_score(*comps[d], lam)
            rows.append(dict(**{"lambda": lam}, ood_domain=d, auroc=detect.auroc(a, b), far95=detect.far95(a, b)))
    out = _out(spec, "sweep_lambda")
    path = _write_csv(out / "lambda.csv", ["lambda", "ood_domain", "auroc", "far95"], rows)
    plot_csv(path, out / "lambda.svg", "lambda", "auroc", "ood_domain", "AUROC vs lambda")
    write_manifest(out, spec, {"diffusion": ckpt})
    return rows


def run_beta_sweep(spec: ExperimentSpec, ws: Workspace | None = None) -> list[dict]:
    """One diffusion model per beta range; ID/OOD loss and AUROC against the first OOD domain."""
    ws = ws or Workspace(spec)
    n = spec.model.get("n", 32)
    data = ws.seqs(spec.id_domain, "train", n)
    ood = spec.ood_domains[0]
    rows, used = [], {}
    for b0, b1 in spec.beta_ranges:
        ck = fit_model(spec, ws, f"beta-{b0:g}-{b1:g}", data, None,
                       {"beta_start": b0, "beta_end": b1, "steps": spec.beta_steps, "checkpoint_every": 0})[-1]
        used[f"beta-{b0:g}-{b1:g}"] = ck
        model, schedule = ck.model(), _schedule(ck)
        a = detect.recon_score(ws.seqs(spec.id_domain, "test", n, spec.eval_size), model, schedule, spec.t_eval,
                               spec.K, spec.seed, _key(spec.id_domain))
        b = detect.recon_score(ws.seqs(ood, "test", n, spec.eval_size), model, schedule, spec.t_eval, spec.K,
                               spec.seed, _key(ood))
        rows.append(dict(beta_start=b0, beta_end=b1, id_l_recon=a.mean(), ood_l_recon=b.mean(),
                         auroc=detect.auroc(a, b), far95=detect.far95(a, b)))
    out = _out(spec, "sweep_beta")
    _write_csv(out / "beta.csv", ["beta_start", "beta_end", "id_l_recon", "ood_l_recon", "auroc", "far95"], rows)
    write_manifest(out, spec, used, ood_domain=ood)
    return rows


def fewshot_subset(data: Sequence[TokenSequence], shots: int, seed: int) -> list[TokenSequence]:
    """``shots`` training sentences drawn without replacement; 0 or >= len(data) keeps everything."""
    if shots <= 0 or shots >= len(data):
        return list(data)
    idx = np.sort(stream(seed, "fewshot", shots).choice(len(data), size=shots, replace=False))
    return [data[i] for i in idx]


def run_fewshot(spec: ExperimentSpec, ws: Workspace | None = None) -> tuple[list[dict], list[dict]]:
    """Diffusion-detector AUROC when only K ID training sentences exist, over several seeds.

    Returns (per-seed rows, per-K summary rows). Shot count 0 means the full training split.
    """
    ws = ws or Workspace(spec)
    n = spec.model.get("n", 32)
    data = ws.seqs(spec.id_domain, "train", n)
    ood = spec.ood_domains[0]
    rows, used = [], {}
    for shots in spec.shots:
        for seed in spec.fewshot_seeds:
            sub = fewshot_subset(data, shots, seed)
            tag = f"fewshot-{shots or 'full'}-s{seed}"
            ck = fit_model(spec, ws, tag, sub, None, {"steps": spec.fewshot_steps, "seed": seed, "checkpoint_every": 0})[-1]
            used[tag] = ck
            model, schedule = ck.model(), _schedule(ck)
            a = detect.recon_score(ws.seqs(spec.id_domain, "test", n, spec.eval_size), model, schedule,
                                   spec.t_eval, spec.K, seed, _key(spec.id_domain))
            b = detect.recon_score(ws.seqs(ood, "test", n, spec.eval_size), model, schedule, spec.t_eval, spec.K,
                                   seed, _key(ood))
            rows.append(dict(shots=shots or "full", seed=seed, n_train=len(sub), auroc=detect.auroc(a, b),
                             far95=detect.far95(a, b)))
    summary = []
    for shots in spec.shots:
        vals = np.array([r["auroc"] for r in rows if r["shots"] == (shots or "full")])
        summary.append(dict(shots=shots or "full", auroc_mean=vals.mean(), auroc_stderr=_stderr(vals),
                            n_seeds=len(vals)))
    by = {s["shots"]: s["auroc_mean"] for s in summary}
    flags = []
    if "full" in by and 10 in by and by["full"] < by[10] - 0.05:
        flags.append("AUROC(full) < AUROC(K=10) - 0.05")
    out = _out(spec, "fewshot")
    _write_csv(out / "fewshot.csv", ["shots", "seed", "n_train", "auroc", "far95"], rows)
    _write_csv(out / "fewshot_summary.csv", ["shots", "auroc_mean", "auroc_stderr", "n_seeds"], summary)
    write_manifest(out, spec, used, ood_domain=ood, ordering_flags=flags)
    return rows, summary


# ------------------------------------------------------ representations
def project_2d(reprs, domains: Sequence[str]) -> list[dict]:
    """Top-2 principal components of mean-centered representations."""
    x = np.asarray(reprs, dtype=np.float64)
    if x.ndim != 2 or len(x) < 3:
        raise ValueError("project_2d needs at least 3 samples of shape (N, d)")
    if len(domains) != len(x):
        raise ValueError("one domain label per sample is required")
    xc = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    rank = int(np.sum(s > s.max() * 1e-10)) if s.size and s.max() > 0 else 0
    # deterministic signs: the largest-magnitude loading of each axis is positive
    for i in range(vt.shape[0]):
        if vt[i, np.argmax(np.abs(vt[i]))] < 0:
            vt[i] = -vt[i]
    pcs = xc @ vt[:2].T
    if pcs.shape[1] < 2 or rank < 2:
        warnings.warn(f"representations have rank {rank} < 2; pc2 set to 0", RuntimeWarning, stacklevel=2)
        pc1 = pcs[:, 0] if rank >= 1 else np.zeros(len(x))
        pcs = np.stack([pc1, np.zeros(len(x))], axis=1)
    return [dict(sample_id=i, domain=d, pc1=p[0], pc2=p[1]) for i, (d, p) in enumerate(zip(domains, pcs))]


def run_project(spec: ExperimentSpec, ws: Workspace | None = None, ckpt: Checkpoint | None = None) -> list[dict]:
    ws = ws or Workspace(spec)
    ckpt = ckpt or diffusion_model(spec, ws)[-1]
    model = ckpt.model()
    sets = _eval_sets(spec, ws, _n(ckpt))
    reprs = np.concatenate([_reprs(model, s) for s in sets.values()])
    domains = [name for name, s in sets.items() for _ in s]
    rows = project_2d(reprs, domains)
    out = _out(spec, "project")
    _write_csv(out / "project.csv", ["sample_id", "domain", "pc1", "pc2"], rows)
    write_manifest(out, spec, {"diffusion": ckpt})
    return rows


def ngrams(tokens: Sequence[str], n: int) -> list[tuple[str, ...]]:
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def distinct_n(samples: Sequence[str], n: int) -> float:
    """Distinct n-grams over total n-grams across all samples."""
    if n < 1:
        raise ValueError("n must be positive")
    if not samples:
        raise ValueError("no samples")
    grams = [g for s in samples for g in ngrams(s.split(), n)]
    if not grams:
        raise ValueError(f"every sample is shorter than n={n}")
    return len(set(grams)) / len(grams)


def run_distinct(spec: ExperimentSpec, ws: Workspace | None = None, ckpt: Checkpoint | None = None) -> list[dict]:
    """Dist-1..3 of sampled sentences and of the ID reference test set."""
    ws = ws or Workspace(spec)
    ckpt = ckpt or diffusion_model(spec, ws)[-1]
    ids = sample(ckpt.model(), _schedule(ckpt), spec.sample_count, _n(ckpt), stream(spec.seed, "sample"))
    texts = [decode(row, ws.vocab) for row in ids]
    reference = ws.corpus(spec.id_domain, "test").sentences[: spec.sample_count]
    rows = []
    for source, sents in (("samples", texts), ("reference", reference)):
        for k in (1, 2, 3):
            try:
                value = distinct_n(sents, k)
            except ValueError:
                value = float("nan")
            rows.append(dict(source=source, n=k, distinct=value))
    out = _out(spec, "distinct")
    _write_csv(out / "distinct.csv", ["source", "n", "distinct"], rows)
    (out / "samples.txt").write_text("\n".join(texts) + "\n", encoding="utf-8")
    write_manifest(out, spec, {"diffusion": ckpt})
    return rows


def run_stats(spec: ExperimentSpec, ws: Workspace | None = None) -> list[dict]:
    ws = ws or Workspace(spec)
    id_sents = ws.corpora[spec.id_domain].sentences
    rows = []
    for d in spec.ood_domains:
        st = corpus_stats(id_sents, ws.corpora[d].sentences)
        rows.append(dict(id_domain=spec.id_domain, ood_domain=d, id_vocab=st.vocab_size, ood_avg_len=st.avg_len,
                         token_overlap=st.token_overlap))
    out = _out(spec, "stats")
    _write_csv(out / "stats.csv", ["id_domain", "ood_domain", "id_vocab", "ood_avg_len", "token_overlap"], rows)
    write_manifest(out, spec, {})
    return rows


def inversions(values: Sequence[float]) -> int:
    """Number of adjacent decreases in a sequence."""
    return sum(1 for a, b in zip(values, values[1:]) if b < a)
