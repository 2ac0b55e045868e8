"""Command-line entry point: ``mollm <gen-corpus|pretrain|unlearn|evaluate|compare>``.

Exit codes: 0 success, 1 validation error, 2 divergence, 3 I/O error.
"""

import json
import logging
import sys
from pathlib import Path

import click

from . import engine, harness
from .corpus import generate_corpus, load_corpus, save_corpus
from .exceptions import DivergenceError, ValidationError
from .model import init_model, load_checkpoint, save_checkpoint

EXIT_OK, EXIT_VALIDATION, EXIT_DIVERGENCE, EXIT_IO = 0, 1, 2, 3

spec_option = click.option("--spec", "spec_path", type=click.Path(dir_okay=False), help="Experiment spec JSON (defaults apply when omitted).")
seed_option = click.option("--seed", type=int, default=None, help="Override the corpus and run seeds.")
format_option = click.option("--format", "fmt", type=click.Choice(harness.TABLE_FORMATS), default="text", show_default=True)
threads_option = click.option("--threads", type=click.IntRange(min=1), default=1, show_default=True, help="Parallel runs; never splits a single run.")


def _load_spec(spec_path, seed):
    spec = harness.load_spec(spec_path) if spec_path else harness.ExperimentSpec()
    return spec.with_seed(seed) if seed is not None else spec


def _load_json(path, loader):
    try:
        return loader(path)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    except KeyError as exc:
        raise ValidationError(f"{path}: missing field {exc}") from exc


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose):
    """Multi-objective unlearning experiments on a synthetic next-token corpus."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@cli.command("gen-corpus")
@spec_option
@seed_option
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Corpus JSON to write.")
def gen_corpus_cmd(spec_path, seed, out):
    """Generate the forget/retain corpus described by the experiment spec."""
    spec = _load_spec(spec_path, seed)
    corpus = generate_corpus(spec.corpus)
    save_corpus(out, corpus)
    click.echo(f"{out}: {len(corpus.sequences)} sequences, {int(corpus.forget_mask.sum())} forget, sha256 {corpus.checksum()}")


@cli.command("pretrain")
@spec_option
@seed_option
@click.option("--corpus", "corpus_path", type=click.Path(dir_okay=False), help="Corpus JSON (generated from the experiment spec when omitted).")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Checkpoint JSON to write.")
def pretrain_cmd(spec_path, seed, corpus_path, out):
    """Train the original model on every sequence of the corpus."""
    spec = _load_spec(spec_path, seed)
    corpus = _load_json(corpus_path, load_corpus) if corpus_path else generate_corpus(spec.corpus)
    if corpus.vocab_size != spec.corpus.vocab_size:
        raise ValidationError("corpus vocabulary does not match the experiment spec")
    s = spec.corpus.seed if seed is None else seed
    params = engine.pretrain(init_model(spec.dims, s), corpus, spec.pretrain_epochs, spec.pretrain_lr)
    save_checkpoint(out, params, seed=s, lineage=[f"init_seed{s}", "pretrain"])
    m = harness.evaluate(params, params, corpus)
    click.echo(f"{out}: forget_prob {m['forget_prob']:.4f}, fluency {m['fluency']:.4f}")


@cli.command("unlearn")
@spec_option
@seed_option
@click.option("--corpus", "corpus_path", type=click.Path(dir_okay=False))
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(dir_okay=False), help="Pretrained checkpoint.")
@click.option("--method", "methods", multiple=True, help="Config name(s) from the experiment spec, or a method name; all of its configs by default.")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory.")
@format_option
@threads_option
def unlearn_cmd(spec_path, seed, corpus_path, ckpt_path, methods, out, fmt, threads):
    """Run unlearning from a checkpoint; writes records, manifests and checkpoints."""
    spec = _load_spec(spec_path, seed)
    corpus = _load_json(corpus_path, load_corpus) if corpus_path else generate_corpus(spec.corpus)
    theta0, _ = _load_json(ckpt_path, load_checkpoint)
    configs = _select(spec, methods)
    out_dir = Path(out)
    harness._ensure_dirs(out_dir)
    rows = harness.run_cells(theta0, corpus, configs, out_dir, threads)
    click.echo(harness.emit_table(rows, fmt), nl=False)
    if any(r.diverged for r in rows):
        raise DivergenceError("diverged: " + ", ".join(r.method for r in rows if r.diverged))


def _select(spec, names):
    if not names:
        return spec.methods
    by_name = {c.name: c for c in spec.methods}
    out = []
    for n in names:
        if n in by_name:
            out.append(by_name[n])
        elif n in engine.METHODS:
            seed = spec.methods[0].seed if spec.methods else 0
            out.append(engine.UnlearnConfig.for_method(n, seed=seed))
        else:
            raise ValidationError(f"unknown method or config name {n!r}")
    return out


@cli.command("evaluate")
@spec_option
@seed_option
@click.option("--corpus", "corpus_path", type=click.Path(dir_okay=False))
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(dir_okay=False))
@click.option("--reference", "ref_path", type=click.Path(dir_okay=False), help="Original model checkpoint (defaults to --checkpoint).")
@click.option("--records", "records_path", type=click.Path(dir_okay=False), help="Records CSV to derive conflict percentages from.")
@format_option
@click.option("--out", type=click.Path(dir_okay=False), help="Also write the table here.")
def evaluate_cmd(spec_path, seed, corpus_path, ckpt_path, ref_path, records_path, fmt, out):
    """Forget probability, fluency and final losses of a checkpoint."""
    spec = _load_spec(spec_path, seed)
    corpus = _load_json(corpus_path, load_corpus) if corpus_path else generate_corpus(spec.corpus)
    params, _ = _load_json(ckpt_path, load_checkpoint)
    ref = _load_json(ref_path, load_checkpoint)[0] if ref_path else params
    if ref.dims != params.dims:
        raise ValidationError("checkpoint and reference have different dimensions")
    pcs = (None, None, None)
    if records_path:
        pcs = engine.conflict_probabilities(engine.read_records_csv(records_path))
    row = harness.ResultRow(method=Path(ckpt_path).stem, PC_fgt=pcs[0], PC_KL=pcs[1], PC_rt=pcs[2], wall_time=None, **harness.evaluate(params, ref, corpus))
    text = harness.emit_table([row], fmt, timing=False)
    if out:
        Path(out).write_text(text)
    click.echo(text, nl=False)


@cli.command("compare")
@spec_option
@seed_option
@click.option("--out", type=click.Path(file_okay=False), help="Output directory (spec output_dir by default).")
@format_option
@threads_option
def compare_cmd(spec_path, seed, out, fmt, threads):
    """Full experiment: pretrain, run every configured method, tabulate sorted by forget_prob."""
    spec = _load_spec(spec_path, seed)
    rows = harness.run_experiment(spec, out_dir=out or spec.output_dir, threads=threads)
    ordered = sorted(rows, key=lambda r: (r.forget_prob, r.method))
    click.echo(harness.emit_table(ordered, fmt), nl=False)


def main(argv=None):
    """Run the CLI and map failures to exit codes."""
    try:
        cli.main(args=argv, prog_name="mollm", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_VALIDATION
    except click.ClickException as exc:
        exc.show()
        return EXIT_VALIDATION
    except ValidationError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_VALIDATION
    except DivergenceError as exc:
        click.echo(f"diverged: {exc}", err=True)
        return EXIT_DIVERGENCE
    except OSError as exc:
        click.echo(f"I/O error: {exc}", err=True)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
