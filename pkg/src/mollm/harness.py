"""Experiment orchestration: pretrain once per seed, unlearn with every config, tabulate."""

import csv
import io
import json
import logging
import math
import time
from importlib import resources
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import engine
from .corpus import FORGET, RETAIN, CorpusSpec, generate_corpus, save_corpus
from .engine import UnlearnConfig, conflict_probabilities, run_unlearning, save_manifest, write_records_csv
from .exceptions import DivergenceError, ValidationError
from .model import Dims, init_model, loss_and_grad, mean_target_probability, perplexity_fluency, save_checkpoint

log = logging.getLogger(__name__)

SPEC_FORMAT = "mollm-experiment"
SPEC_VERSION = 1
TABLE_COLUMNS = ("method", "forget_prob", "fluency", "PC_fgt", "PC_KL", "PC_rt", "L_fgt", "L_KL", "L_rt", "wall_time")
TABLE_FORMATS = ("csv", "json", "text")
SELECTION_FLUENCY_RATIO = 1.10
TABLE_NOTE = "forget_prob = mean target-token probability on the forget split (proxy for harmful rate); fluency = 2**(retain CE in bits)"


@dataclass
class ExperimentSpec:
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    embed_dim: int = 8
    context_window: int = 2
    pretrain_epochs: int = 500
    pretrain_lr: float = 5.0
    methods: list = field(default_factory=list)
    output_dir: str = "results"

    def __post_init__(self):
        if not self.methods:
            self.methods = [UnlearnConfig.for_method(m) for m in engine.METHODS]
        names = [c.name for c in self.methods]
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate config names: {names}")

    @property
    def dims(self):
        return Dims(self.corpus.vocab_size, self.embed_dim, self.context_window)

    def to_dict(self):
        return {
            "format": SPEC_FORMAT,
            "format_version": SPEC_VERSION,
            "corpus": asdict(self.corpus),
            "model": {"embed_dim": self.embed_dim, "context_window": self.context_window},
            "pretrain": {"epochs": self.pretrain_epochs, "lr": self.pretrain_lr},
            "methods": [c.to_dict() for c in self.methods],
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("format", SPEC_FORMAT) != SPEC_FORMAT:
            raise ValidationError("not an experiment spec document")
        if doc.get("format_version", SPEC_VERSION) != SPEC_VERSION:
            raise ValidationError(f"unsupported spec version {doc.get('format_version')}")
        try:
            corpus = CorpusSpec(**doc.get("corpus", {}))
            model = doc.get("model", {})
            pre = doc.get("pretrain", {})
            methods = [c if isinstance(c, UnlearnConfig) else UnlearnConfig.from_dict(c) for c in doc.get("methods", [])]
            return cls(
                corpus=corpus,
                embed_dim=model.get("embed_dim", 8),
                context_window=model.get("context_window", 2),
                pretrain_epochs=pre.get("epochs", 500),
                pretrain_lr=pre.get("lr", 5.0),
                methods=methods,
                output_dir=doc.get("output_dir", "results"),
            )
        except TypeError as exc:
            raise ValidationError(f"invalid experiment spec: {exc}") from exc

    def with_seed(self, seed):
        """Same spec with the corpus seed and every config seed replaced."""
        from dataclasses import replace

        return ExperimentSpec(
            corpus=replace(self.corpus, seed=seed),
            embed_dim=self.embed_dim,
            context_window=self.context_window,
            pretrain_epochs=self.pretrain_epochs,
            pretrain_lr=self.pretrain_lr,
            methods=[replace(c, seed=seed) for c in self.methods],
            output_dir=self.output_dir,
        )


def _resource(*parts):
    return resources.files("mollm").joinpath(*parts)


def load_fixture(name):
    """Shipped experiment spec ``fixtures/<name>.json`` (``default_experiment``, ``weighted_sum_conflict``)."""
    return ExperimentSpec.from_dict(json.loads(_resource("fixtures", f"{name}.json").read_text()))


def load_schema(name):
    """Shipped JSON schema ``schemas/<name>.schema.json`` (``experiment_spec`` or ``summary``)."""
    return json.loads(_resource("schemas", f"{name}.schema.json").read_text())


def load_spec(path):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    return ExperimentSpec.from_dict(doc)


@dataclass
class ResultRow:
    method: str
    forget_prob: float
    fluency: float
    PC_fgt: float
    PC_KL: float
    PC_rt: float
    L_fgt: float
    L_KL: float
    L_rt: float
    wall_time: float = 0.0
    base_method: str = None
    seed: int = None
    lr0: float = None
    rounds_run: int = None
    diverged: bool = False
    selected: bool = False

    def as_dict(self, timing=True):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        if not timing:
            del d["wall_time"]
        return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in d.items()}


def evaluate(params, ref_params, corpus, epsilon=0.01):
    """Forget-probability proxy, retain fluency and per-token objective values.

    ``L_fgt`` is the token-mean UCE on the forget split, ``L_KL`` the
    token-mean KL(reference || model) and ``L_rt`` the token-mean CE, both on
    the retain split.
    """
    W = params.dims.context_window
    fb, rb = corpus.batch(FORGET, W), corpus.batch(RETAIN, W)
    if len(fb) == 0 or len(rb) == 0:
        raise ValidationError("evaluation needs nonempty forget and retain splits")
    with np.errstate(over="ignore"):
        fluency = perplexity_fluency(params, rb)
    return {
        "forget_prob": mean_target_probability(params, fb),
        "fluency": fluency,
        "L_fgt": loss_and_grad(params, fb, "fgt-uce", eps=epsilon)[0] / fb.n_sequences,
        "L_KL": loss_and_grad(params, rb, "kl", ref_params=ref_params, kl_normalization="per_token")[0] / rb.n_sequences,
        "L_rt": loss_and_grad(params, rb, "rt-ce")[0] / rb.n_sequences,
    }


def _run_cell(theta0, corpus, config, out_dir):
    start = time.perf_counter()
    diverged = False
    try:
        params, records = run_unlearning(theta0, corpus, config)
    except DivergenceError as exc:
        log.warning("%s diverged: %s", config.name, exc)
        if exc.params is None:
            raise
        params, records, diverged = exc.params, exc.records, True
    metrics = evaluate(params, theta0, corpus, config.epsilon)
    pcs = conflict_probabilities(records)
    elapsed = time.perf_counter() - start
    if out_dir is not None:
        write_records_csv(out_dir / "records" / f"{config.name}.csv", records)
        save_manifest(out_dir / "manifests" / f"{config.name}.json", config)
        save_checkpoint(out_dir / "checkpoints" / f"{config.name}.json", params, seed=config.seed, lineage=[f"pretrained_seed{config.seed}", config.name])
    return ResultRow(
        method=config.name,
        PC_fgt=pcs[0],
        PC_KL=pcs[1],
        PC_rt=pcs[2],
        wall_time=elapsed,
        base_method=config.method,
        seed=config.seed,
        lr0=config.lr0,
        rounds_run=len(records),
        diverged=diverged,
        **metrics,
    )


def run_cells(theta0, corpus, configs, out_dir=None, threads=1):
    """Unlearn with every config; ``theta0`` is one model or a dict keyed by seed.

    Rows come back in config order regardless of ``threads``.
    """
    start = (lambda c: theta0[c.seed]) if isinstance(theta0, dict) else (lambda c: theta0)
    cells = [(start(c), corpus, c, out_dir) for c in configs]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda args: _run_cell(*args), cells))
    return [_run_cell(*args) for args in cells]


def select_best(rows, baselines):
    """Flag, per base method and seed, the row with the lowest forget_prob among
    rows whose fluency stays within 1.10x of the pre-unlearning fluency."""
    groups = {}
    for row in rows:
        groups.setdefault((row.base_method, row.seed), []).append(row)
    for (_, seed), members in groups.items():
        bar = SELECTION_FLUENCY_RATIO * baselines[seed]
        ok = [r for r in members if not r.diverged and r.fluency <= bar]
        if ok:
            min(ok, key=lambda r: r.forget_prob).selected = True


def _ensure_dirs(out_dir):
    try:
        for sub in ("records", "manifests", "checkpoints"):
            (out_dir / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc


def run_experiment(spec, out_dir=None, threads=1, write=True):
    """Pretrain once per seed, unlearn with every config, evaluate and write artifacts.

    Returns one result row per config, in spec order. Pre-unlearning metrics
    per seed go to ``baseline.json`` and the header of ``table.txt``.
    """
    out_dir = Path(out_dir or spec.output_dir) if write else None
    if out_dir is not None:
        _ensure_dirs(out_dir)
    corpus = generate_corpus(spec.corpus)
    if out_dir is not None:
        save_corpus(out_dir / "corpus.json", corpus)

    seeds = sorted({c.seed for c in spec.methods})
    theta0 = {}
    for seed in seeds:
        theta0[seed] = engine.pretrain(init_model(spec.dims, seed), corpus, spec.pretrain_epochs, spec.pretrain_lr)
        if out_dir is not None:
            save_checkpoint(out_dir / "checkpoints" / f"pretrained_seed{seed}.json", theta0[seed], seed=seed, lineage=[f"init_seed{seed}", "pretrain"])

    rows = run_cells(theta0, corpus, spec.methods, out_dir, threads)
    baselines = {seed: evaluate(theta0[seed], theta0[seed], corpus) for seed in seeds}
    select_best(rows, {seed: m["fluency"] for seed, m in baselines.items()})

    if out_dir is not None:
        ordered = sorted(rows, key=lambda r: (r.forget_prob, r.method))
        notes = [f"pre-unlearning seed {s}: forget_prob {m['forget_prob']:.4f}, fluency {m['fluency']:.4f}" for s, m in baselines.items()]
        _write(out_dir / "baseline.json", json.dumps({str(s): m for s, m in baselines.items()}, indent=2) + "\n")
        _write(out_dir / "summary.json", emit_table(rows, "json", timing=False))
        _write(out_dir / "table.csv", emit_table(ordered, "csv"))
        _write(out_dir / "table.txt", emit_table(ordered, "text", notes=notes))
    return rows


def _write(path, text):
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _fmt_csv(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _fmt_text(v):
    if v is None:
        return "-"
    if isinstance(v, float):
        if not math.isfinite(v):
            return str(v)
        return f"{v:.4e}" if abs(v) >= 1e6 else f"{v:.4f}"
    return str(v)


def emit_table(rows, fmt="text", timing=True, notes=()):
    """Render rows as ``csv``, ``json`` or right-aligned ``text``.

    Columns are always method, forget_prob, fluency, PC_fgt, PC_KL, PC_rt,
    L_fgt, L_KL, L_rt, wall_time. The JSON form is an array of full row
    objects; ``timing=False`` drops ``wall_time`` so the output is
    reproducible byte for byte. ``notes`` become extra comment lines in the
    text form.
    """
    if fmt not in TABLE_FORMATS:
        raise ValidationError(f"unknown table format {fmt!r}; expected one of {TABLE_FORMATS}")
    if not rows:
        raise ValidationError("no rows to emit")
    if fmt == "json":
        return json.dumps([r.as_dict(timing=timing) for r in rows], indent=2) + "\n"
    cols = [c for c in TABLE_COLUMNS if timing or c != "wall_time"]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        for r in rows:
            writer.writerow([_fmt_csv(getattr(r, c)) for c in cols])
        return buf.getvalue()
    cells = [cols] + [[_fmt_text(getattr(r, c)) for c in cols] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    lines = [f"# {note}" for note in (TABLE_NOTE, *notes)]
    lines += ["  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in cells]
    return "\n".join(lines) + "\n"


def parse_table_csv(text):
    """Inverse of ``emit_table(rows, "csv")`` for the tabulated columns."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) not in (TABLE_COLUMNS, TABLE_COLUMNS[:-1]):
        raise ValidationError(f"unexpected table header {header}")
    rows = []
    for values in reader:
        d = dict(zip(header, values))
        kw = {k: (None if d[k] == "" else float(d[k])) for k in header if k != "method"}
        rows.append(ResultRow(method=d["method"], **kw))
    return rows
