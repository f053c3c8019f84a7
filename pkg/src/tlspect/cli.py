"""Command-line entry points.

Four subcommands cover the experiment loop: simulate renders a
spectrum from a config, extract inverts a spectrum into defect tracks,
fit-resonator fits the bias-averaged trace, and stats turns track
lists into distribution reports. Exit codes are stable for scripting:
0 success, 2 config error, 3 data error, 4 non-convergence.
"""

from __future__ import annotations

import functools
import json
import os
import sys

import click
import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig
from .constants import H, si_to_debye
from .io import DataError, read_manifest, read_spectrum, write_manifest, \
    write_spectrum, write_tracks, read_tracks, _atomic_write, _fmt
from .pipeline import extract_tracks
from .resfit import FitError, fit_simple, fit_with_background
from .stats import (calculated_mean_std, DipoleHistogram, loss_from_dipoles,
                    material_constant, material_mean_stderr,
                    measured_to_material, missing_tls_sensitivity,
                    mle_gamma, mle_modified_gaussian, mle_truncated_normal,
                    modified_gaussian_pdf, truncated_normal_pdf,
                    subset_summary)
from .synth import ensemble_average, generate_spectrum, sample_ensemble

# vertex-proximity tolerances for matching tracks to ground truth
MATCH_F_TOL_HZ = 5.0e6
MATCH_BIAS_TOL_VPM = 5.0e3


def _locate_config(path):
    """Resolve a config path, falling back to TLSPECT_CONFIG_DIR."""
    if os.path.exists(path):
        return path
    base = os.environ.get("TLSPECT_CONFIG_DIR")
    if base and not os.path.isabs(path):
        candidate = os.path.join(base, path)
        if os.path.exists(candidate):
            return candidate
    raise ConfigError(f"config file not found: {path}")


def _load_config(path, seed=None):
    if path is None:
        cfg = ExperimentConfig.from_dict({})
    else:
        cfg = ExperimentConfig.from_yaml(_locate_config(path))
    if seed is not None:
        raw = dict(cfg.resolved)
        raw["seed"] = int(seed)
        cfg = ExperimentConfig.from_dict(raw)
    return cfg


def _exit_codes(fn):
    """Map domain exceptions onto the documented exit codes."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(2)
        except DataError as exc:
            click.echo(f"data error: {exc}", err=True)
            sys.exit(3)
        except FitError as exc:
            click.echo(f"fit did not converge: {exc}", err=True)
            sys.exit(4)
    return wrapper


@click.group()
@click.version_option(__version__, prog_name="tlspect")
def main():
    """Simulate and invert bias-tuned defect spectroscopy."""


@main.command()
@click.argument("config_path", metavar="CONFIG")
@click.option("-o", "--outdir", default=".", show_default=True,
              type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=None,
              help="Override the config seed.")
@_exit_codes
def simulate(config_path, outdir, seed):
    """Render a synthetic bias sweep and its ground-truth manifest."""
    cfg = _load_config(config_path, seed)
    os.makedirs(outdir, exist_ok=True)
    tls = sample_ensemble(cfg.material, cfg.resonator, cfg.seed)
    spectrum = generate_spectrum(tls, cfg.resonator, cfg.window, cfg.noise,
                                 cfg.seed)
    spath = os.path.join(outdir, "spectrum.tlspec")
    write_spectrum(spath, spectrum, cfg.hash)
    write_manifest(os.path.join(outdir, "truth.csv"), tls, cfg.window,
                   cfg.hash, cfg.seed)
    _atomic_write(os.path.join(outdir, "resolved_config.yaml"),
                  cfg.to_yaml().encode("utf-8"))
    click.echo(f"wrote {spath} ({len(tls)} defects, seed {cfg.seed})")


def _match_to_truth(tracks, truth):
    """Greedy one-to-one vertex matching against observable truth rows."""
    obs = truth["observable"]
    t_fv = truth["delta0_ghz"][obs] * 1e9
    t_bv = truth["vertex_bias_vpm"][obs]
    pairs = []
    for ti, tr in enumerate(tracks):
        fv = tr.delta0 / H
        for gi in range(t_fv.size):
            df = abs(fv - t_fv[gi])
            db = abs(tr.vertex_bias - t_bv[gi])
            if df <= MATCH_F_TOL_HZ and db <= MATCH_BIAS_TOL_VPM:
                pairs.append((df / MATCH_F_TOL_HZ + db / MATCH_BIAS_TOL_VPM,
                              ti, gi))
    pairs.sort()
    used_t, used_g, matched = set(), set(), []
    for _, ti, gi in pairs:
        if ti in used_t or gi in used_g:
            continue
        used_t.add(ti)
        used_g.add(gi)
        matched.append((ti, gi))
    n_truth = int(np.count_nonzero(obs))
    recall = len(matched) / n_truth if n_truth else 1.0
    precision = len(matched) / len(tracks) if tracks else 1.0
    return matched, recall, precision, n_truth


@main.command()
@click.argument("spectrum_path", metavar="SPECTRUM")
@click.option("-c", "--config", "config_path", default=None,
              help="Config for pipeline knobs; defaults used if omitted.")
@click.option("-o", "--outdir", default=".", show_default=True,
              type=click.Path(file_okay=False))
@click.option("--truth", "truth_path", default=None,
              help="Ground-truth manifest; auto-detected next to SPECTRUM.")
@click.option("--seed", type=int, default=None,
              help="Override the config seed for fit restarts.")
@_exit_codes
def extract(spectrum_path, config_path, outdir, truth_path, seed):
    """Extract defect tracks from a spectrum file."""
    cfg = _load_config(config_path, seed)
    spectrum = read_spectrum(spectrum_path)
    os.makedirs(outdir, exist_ok=True)
    tracks, diag = extract_tracks(spectrum, cfg.pipeline, seed=cfg.seed)
    comments = [f"spectrum_sha={spectrum.meta.get('config_hash', '')}",
                f"n_minima={diag.n_minima}",
                f"n_candidates={diag.n_candidates}"]
    if truth_path is None:
        sibling = os.path.join(os.path.dirname(spectrum_path) or ".",
                               "truth.csv")
        truth_path = sibling if os.path.exists(sibling) else None
    if truth_path is not None:
        truth = read_manifest(truth_path)
        matched, recall, precision, n_truth = _match_to_truth(tracks, truth)
        comments.extend([
            f"truth_observable={n_truth}",
            f"matched={len(matched)}",
            f"recall={_fmt(recall)}",
            f"precision={_fmt(precision)}",
        ])
    tpath = os.path.join(outdir, "tracks.csv")
    write_tracks(tpath, tracks, cfg.hash, extra_comments=comments)
    click.echo(f"wrote {tpath} ({len(tracks)} tracks)")


@main.command("fit-resonator")
@click.argument("spectrum_path", metavar="SPECTRUM")
@click.option("--model", type=click.Choice(["simple", "background"]),
              default="simple", show_default=True)
@click.option("-o", "--out", "out_path", default=None,
              help="Write the fit record as JSON here instead of stdout.")
@click.option("--seed", type=int, default=None, help="Accepted for parity.")
@_exit_codes
def fit_resonator(spectrum_path, model, out_path, seed):
    """Fit the bias-averaged trace of a spectrum."""
    spectrum = read_spectrum(spectrum_path)
    trace = ensemble_average(spectrum)
    fit = (fit_simple if model == "simple" else fit_with_background)(
        spectrum.freq, trace)
    background = {}
    for key, val in fit.background.items():
        if isinstance(val, complex):
            background[key] = [val.real, val.imag]
        else:
            background[key] = float(val)
    record = {
        "model": model,
        "f0_hz": fit.f0,
        "q_total": fit.q_total,
        "q_i": fit.q_i,
        "q_e": fit.q_e,
        "phi": fit.phi,
        "residual": fit.residual,
        "background": background,
        "notes": fit.notes,
        "version": __version__,
        "config_hash": spectrum.meta.get("config_hash", ""),
    }
    blob = json.dumps(record, sort_keys=True, indent=2) + "\n"
    if out_path:
        _atomic_write(out_path, blob.encode("utf-8"))
        click.echo(f"wrote {out_path}")
    else:
        click.echo(blob, nl=False)


def _stats_report(pz, cfg, group_labels=None, sensitivity=False):
    """Assemble the report text and plot-data rows for one pooled sample."""
    lines = [f"# version={__version__}", f"# config_hash={cfg.hash}",
             f"n_tracks {pz.size}"]
    mean, std = calculated_mean_std(pz)
    stderr = material_mean_stderr(pz)
    sys_frac = cfg.stats["thickness_systematic_frac"]
    lines.append(f"material_mean_debye {_fmt(mean)}")
    lines.append(f"material_std_debye {_fmt(std)}")
    lines.append(f"material_mean_stderr_debye {_fmt(stderr)}")
    lines.append(f"material_mean_systematic_debye {_fmt(sys_frac * mean)}")
    geo = cfg.stats_geometry
    lines.append(f"p0_per_j_m3 {_fmt(material_constant(pz, geo))}")
    lines.append(
        f"loss_tangent {_fmt(loss_from_dipoles(pz, geo, cfg.stats['eps_r']))}")
    fits = {}
    for name, fn in (("truncated-normal", mle_truncated_normal),
                     ("modified-gaussian", mle_modified_gaussian),
                     ("gamma", mle_gamma)):
        try:
            fits[name] = fn(pz)
        except (ValueError, RuntimeError) as exc:
            lines.append(f"fit {name} failed: {exc}")
    for name, fit in fits.items():
        par = " ".join(f"{k}={_fmt(v)}" for k, v in fit.params.items())
        err = " ".join(f"d{k}={_fmt(v)}" for k, v in fit.stderr.items())
        lines.append(f"fit {name} {par} {err} loglik={_fmt(fit.loglik)}")
    p0_iso = float(np.max(pz))
    lines.append(f"isotropic_overlay_p0_debye {_fmt(p0_iso)}")

    if group_labels is not None and len(set(group_labels)) > 1:
        lines.append("group comparison (Welch):")
        labels = sorted(set(group_labels))
        for i in range(len(labels)):
            for j in range(i + 1, len(labels)):
                a = pz[np.asarray(group_labels) == labels[i]]
                b = pz[np.asarray(group_labels) == labels[j]]
                if a.size < 3 or b.size < 3:
                    lines.append(f"  {labels[i]} vs {labels[j]}: too few")
                    continue
                s = subset_summary(a, b)
                lines.append(
                    f"  {labels[i]} (n={s['n_a']}, mat "
                    f"{_fmt(s['material_mean_a'])}) vs {labels[j]} "
                    f"(n={s['n_b']}, mat {_fmt(s['material_mean_b'])}): "
                    f"t={_fmt(s['t'])} p={_fmt(s['p_value'])}")

    if sensitivity:
        lines.append("missing-defect sensitivity (adjusted material mean):")
        factors = list(range(1, 11))
        for pct in (10.0, 20.0):
            means = missing_tls_sensitivity(pz, factors, percentile=pct)
            row = " ".join(_fmt(m) for m in means)
            lines.append(f"  percentile={_fmt(pct)} M=1..10: {row}")

    # plot data: measured histogram, inverted density, fit overlays
    st = cfg.stats
    edges = np.linspace(st["bin_min_debye"] or 1e-3, st["bin_max_debye"],
                        st["n_bins"] + 1)
    hist = DipoleHistogram.from_samples(pz, edges, geo)
    material = measured_to_material(hist)
    centers = hist.centers
    cols = {
        "bin_center_debye": centers,
        "measured_per_debye": hist.values,
        "material_density_si": material.values,
    }
    if "truncated-normal" in fits:
        f = fits["truncated-normal"]
        cols["truncnorm_pdf"] = truncated_normal_pdf(
            centers, f.params["mu"], f.params["sigma"]) * pz.size
    if "modified-gaussian" in fits:
        f = fits["modified-gaussian"]
        cols["modgauss_pdf"] = modified_gaussian_pdf(
            centers, f.params["mu"], f.params["sigma"]) * pz.size
    if "gamma" in fits:
        from scipy import stats as sstats
        f = fits["gamma"]
        cols["gamma_pdf"] = sstats.gamma.pdf(
            centers, f.params["alpha"], scale=1.0 / f.params["beta"]) * pz.size
    # measured image of a flat projection density, scaled to the sample
    iso = np.where(centers <= p0_iso, 2.0 * centers / p0_iso ** 2, 0.0)
    cols["isotropic_overlay_pdf"] = iso * pz.size

    plot_lines = [f"# config_hash={cfg.hash}", f"# version={__version__}",
                  ",".join(cols)]
    for i in range(centers.size):
        plot_lines.append(",".join(_fmt(cols[k][i]) for k in cols))
    return "\n".join(lines) + "\n", "\n".join(plot_lines) + "\n"


@main.command()
@click.argument("track_paths", metavar="TRACKS...", nargs=-1, required=True)
@click.option("-c", "--config", "config_path", default=None,
              help="Config providing geometry and binning.")
@click.option("-o", "--outdir", default=".", show_default=True,
              type=click.Path(file_okay=False))
@click.option("--group-by", "group_by",
              type=click.Choice(["none", "file"]), default="none",
              show_default=True,
              help="Compare groups instead of pooling everything.")
@click.option("--sensitivity", is_flag=True,
              help="Append the missing-defect sensitivity table.")
@click.option("--seed", type=int, default=None, help="Accepted for parity.")
@_exit_codes
def stats(track_paths, config_path, outdir, group_by, sensitivity, seed):
    """Distribution report over one or more track lists."""
    cfg = _load_config(config_path, seed)
    pz, labels = [], []
    for path in track_paths:
        tracks, _ = read_tracks(path)
        stem = os.path.splitext(os.path.basename(path))[0]
        for t in tracks:
            pz.append(si_to_debye(t.pz))
            labels.append(stem)
    pz = np.asarray(pz, dtype=np.float64)
    if pz.size < 3:
        raise DataError("need at least 3 tracks for statistics")
    os.makedirs(outdir, exist_ok=True)
    report, plot = _stats_report(
        pz, cfg, group_labels=labels if group_by == "file" else None,
        sensitivity=sensitivity)
    rpath = os.path.join(outdir, "report.txt")
    ppath = os.path.join(outdir, "plotdata.csv")
    _atomic_write(rpath, report.encode("utf-8"))
    _atomic_write(ppath, plot.encode("utf-8"))
    click.echo(f"wrote {rpath} and {ppath} ({pz.size} tracks)")


if __name__ == "__main__":
    main()
