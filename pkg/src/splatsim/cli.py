"""``splatsim`` command line.

Exit codes: 0 success, 1 input data error, 2 configuration error,
3 numerical / simulation failure.
"""
from __future__ import annotations

import logging
import os
import sys

import click

from .config import load_config
from .errors import ConfigError, DataError, FormatError, SimulationError
from .pipeline import Pipeline, RunManifest, StageError, format_metrics

EXIT_DATA = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _exit_code(exc: Exception) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, SimulationError):
        return EXIT_NUMERICAL
    return EXIT_DATA


def _guard(fn):
    try:
        return fn()
    except StageError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(_exit_code(exc.error))
    except (ConfigError, SimulationError, FormatError, DataError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(_exit_code(exc))


config_arg = click.argument("config", type=click.Path(dir_okay=False))
override_opt = click.option("-o", "--override", "overrides", multiple=True, metavar="KEY=VALUE",
                            help="Override a config field, e.g. -o sim.steps=100.")
seed_opt = click.option("--seed", type=int, default=None, help="Seed for stochastic choices.")


def _pipeline(config, overrides, seed) -> Pipeline:
    overrides = list(overrides)
    if seed is not None:
        overrides.append(f"seed={seed}")
    return Pipeline(load_config(config, overrides))


@click.group()
@click.option("--threads", type=int, default=None, envvar="SPLATSIM_NUM_THREADS",
              help="Worker threads for the compiled kernels (env SPLATSIM_NUM_THREADS).")
@click.option("--log-level", default="INFO", show_default=True,
              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
def main(threads, log_level):
    """Segment a Gaussian splat scene, simulate its objects and render the result."""
    logging.basicConfig(level=log_level.upper(), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s %(message)s")
    if threads is not None:
        if threads < 1:
            raise click.BadParameter("must be >= 1", param_hint="--threads")
        os.environ["SPLATSIM_NUM_THREADS"] = str(threads)


@main.command("segment")
@config_arg
@override_opt
@seed_opt
def segment_cmd(config, overrides, seed):
    """Lift the 2D id masks onto Gaussians."""
    _guard(lambda: _pipeline(config, overrides, seed).segment())


@main.command("simulate")
@config_arg
@override_opt
@seed_opt
@click.option("--resume", is_flag=True, help="Continue from the last checkpoint.")
def simulate_cmd(config, overrides, seed, resume):
    """Run MLS-MPM on the segmented objects and dump trajectory frames."""
    _guard(lambda: _pipeline(config, overrides, seed).simulate(resume=resume))


@main.command("render")
@config_arg
@override_opt
@seed_opt
def render_cmd(config, overrides, seed):
    """Render every trajectory frame for the configured cameras."""
    _guard(lambda: _pipeline(config, overrides, seed).render())


@main.command("eval")
@config_arg
@override_opt
@seed_opt
def eval_cmd(config, overrides, seed):
    """Score rendered per-object masks against ground truth (mIoU, mBIoU)."""
    def run():
        pipe = _pipeline(config, overrides, seed)
        pipe.evaluate()
        rows = RunManifest.load(pipe.manifest_path, pipe.config.hash).metrics
        click.echo(format_metrics(rows))
    _guard(run)


@main.command("all")
@config_arg
@override_opt
@seed_opt
def all_cmd(config, overrides, seed):
    """segment, simulate, render and (with eval.gt_dir) eval."""
    def run():
        pipe = _pipeline(config, overrides, seed)
        pipe.run_all()
        if pipe.config.eval.gt_dir is not None:
            click.echo(format_metrics(RunManifest.load(pipe.manifest_path, pipe.config.hash).metrics))
    _guard(run)


@main.command("synth")
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--n-per-ball", default=2500, show_default=True)
@click.option("--views", default=8, show_default=True)
@click.option("--size", default=256, show_default=True, help="Image width and height.")
@click.option("--seed", default=0, show_default=True)
def synth_cmd(out_dir, n_per_ball, views, size, seed):
    """Write the two-ball synthetic dataset with analytic masks and a config."""
    from .synthetic import write_dataset

    path = write_dataset(out_dir, n_per_ball=n_per_ball, n_views=views, seed=seed,
                         width=size, height=size)
    click.echo(str(path))


if __name__ == "__main__":  # pragma: no cover
    main()
