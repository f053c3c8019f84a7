"""Experiment configuration: schema-validated YAML with unit-bearing keys.

Every numeric key carries its unit in its name (f0_ghz, thickness_nm);
rates named *_mhz or *_khz are ordinary frequencies, i.e. the angular
rate divided by 2 pi. A loaded config is merged over the defaults, so
the resolved dictionary always spells out every knob, and its canonical
JSON serialisation is hashed to tag all derived outputs.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass

import jsonschema
import yaml

from .constants import H, debye_to_si
from .physics import ResonatorModel, SweepWindow
from .pipeline import PipelineParams
from .synth import FAMILIES, MaterialSpec, NoiseConfig, TelegraphSpec

TWO_PI = 6.283185307179586


class ConfigError(ValueError):
    """Malformed or schema-violating configuration."""


_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_POSINT = {"type": "integer", "minimum": 1}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "resonator": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "f0_ghz": _POS,
                "kappa_c_mhz": _POS,
                "gamma_c_mhz": _POS,
                "volume_m3": _POS,
                "thickness_nm": _POS,
                "eps_r": _POS,
            },
        },
        "window": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "f_center_ghz": _POS,
                "f_span_mhz": _POS,
                "bias_min_kvpm": _NUM,
                "bias_max_kvpm": _NUM,
                "n_freq": {"type": "integer", "minimum": 2},
                "n_bias": {"type": "integer", "minimum": 2},
            },
        },
        "material": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "family": {"enum": list(FAMILIES)},
                "mean_debye": _NUM,
                "sigma_debye": _POS,
                "p0_debye": _POS,
                "alpha": _POS,
                "beta_per_debye": _POS,
                "p_max_debye": _POS,
                "p0_per_j_m3": _POS,
                "count": {"type": "integer", "minimum": 0},
                "delta_max_ghz": _POS,
                "delta0_band_ghz": {
                    "type": "array",
                    "items": _POS,
                    "minItems": 2,
                    "maxItems": 2,
                },
                "gamma_tls_khz": _POS,
                "sigma_noise_khz": _NONNEG,
            },
        },
        "noise": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "meas_sigma": _NONNEG,
                "voltage_sigma_khz": {
                    "type": ["number", "null"], "minimum": 0},
                "mc_samples": _POSINT,
                "drift_sigma_khz_per_sqrt_hour": _NONNEG,
                "telegraph": {
                    "type": ["object", "null"],
                    "additionalProperties": False,
                    "properties": {
                        "switch_rate_hz": _NONNEG,
                        "jump_sigma_khz": _NONNEG,
                    },
                },
            },
        },
        "pipeline": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "use_derivative": {"type": "boolean"},
                "lowpass_cutoff_per_ghz": _POS,
                "depth_factor": _POS,
                "discovery_factor": _POS,
                "baseline_window": _POSINT,
                "mask_linewidths": _NONNEG,
                "sigma_f_cells": _POS,
                "sigma_bias_cells": _POS,
                "rel_floor": {"type": "number",
                              "exclusiveMinimum": 0, "maximum": 1},
                "min_chain": _POSINT,
                "jump_cells": _POSINT,
                "gap_cells": {"type": "integer", "minimum": 0},
                "min_rise_cells": _NONNEG,
                "corridor_cells": _POS,
                "budget": _POSINT,
                "min_points": _POSINT,
                "rms_max_cells": _POS,
                "max_rounds": _POSINT,
                "merge_pz_rel": _POS,
                "merge_vertex_mhz": _POS,
                "arc_gap_cells": {"type": "integer", "minimum": 0},
                "trust_f_cells": _POS,
                "trust_bias_cells": _POS,
                "pz_min_debye": _POS,
                "pz_max_debye": _POS,
                "hough_slopes": _POSINT,
                "hough_max_sep_cells": _POSINT,
                "hough_z_min": _POS,
                "hough_max_candidates": _POSINT,
                "support_log10p": {"type": "number", "maximum": 0},
            },
        },
        "stats": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "bin_min_debye": _NONNEG,
                "bin_max_debye": _POS,
                "n_bins": _POSINT,
                "eps_r": _POS,
                "thickness_systematic_frac": _NONNEG,
            },
        },
    },
}

DEFAULTS = {
    "seed": 1,
    "resonator": {
        "f0_ghz": 4.975,
        "kappa_c_mhz": 2.0,
        "gamma_c_mhz": 2.0,
        "volume_m3": 1.11e-17,
        "thickness_nm": 20.0,
        "eps_r": 10.0,
    },
    "window": {
        "f_center_ghz": 4.975,
        "f_span_mhz": 50.0,
        "bias_min_kvpm": -90.0,
        "bias_max_kvpm": 90.0,
        "n_freq": 500,
        "n_bias": 360,
    },
    "material": {
        "family": "gaussian",
        "mean_debye": 2.6,
        "sigma_debye": 1.6,
        "p0_per_j_m3": 1.0e44,
        # wide enough that any plausible dipole can park its vertex
        # anywhere in the default bias window without clipping
        "delta_max_ghz": 8.0,
        "delta0_band_ghz": [4.3, 5.05],
        "gamma_tls_khz": 50.0,
        "sigma_noise_khz": 0.0,
    },
    "noise": {
        "meas_sigma": 0.0015,
        "voltage_sigma_khz": None,
        "mc_samples": 256,
        "drift_sigma_khz_per_sqrt_hour": 0.0,
        "telegraph": None,
    },
    "pipeline": {
        "use_derivative": False,
        "lowpass_cutoff_per_ghz": 2500.0,
        "depth_factor": 3.0,
        "discovery_factor": 6.0,
        "baseline_window": 15,
        "mask_linewidths": 1.0,
        "sigma_f_cells": 2.0,
        "sigma_bias_cells": 2.0,
        "rel_floor": 0.25,
        "min_chain": 8,
        "jump_cells": 12,
        "gap_cells": 2,
        "min_rise_cells": 3.0,
        "corridor_cells": 2.0,
        "budget": 2000,
        "min_points": 8,
        "rms_max_cells": 1.0,
        "max_rounds": 3,
        "merge_pz_rel": 0.03,
        "merge_vertex_mhz": 1.0,
        "arc_gap_cells": 4,
        "trust_f_cells": 24.0,
        "trust_bias_cells": 8.0,
        "pz_min_debye": 0.3,
        "pz_max_debye": 12.0,
        "hough_slopes": 96,
        "hough_max_sep_cells": 40,
        "hough_z_min": 4.0,
        "hough_max_candidates": 2500,
        "support_log10p": -6.0,
    },
    "stats": {
        "bin_min_debye": 0.0,
        "bin_max_debye": 8.0,
        "n_bins": 16,
        "eps_r": 10.0,
        "thickness_systematic_frac": 0.10,
    },
}

_FAMILY_KEYS = {
    "gaussian": ("mean_debye", "sigma_debye"),
    "truncated-normal": ("mean_debye", "sigma_debye"),
    "isotropic-single-p0": ("p0_debye",),
    "gamma": ("alpha", "beta_per_debye"),
    "flat": ("p_max_debye",),
}


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def validate(raw):
    """Schema-check a raw config dict; raises ConfigError with the path."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.path))
    if errors:
        err = errors[0]
        where = ".".join(str(p) for p in err.path) or "<root>"
        raise ConfigError(f"config error at {where}: {err.message}")


def resolve(raw):
    """Merge a raw dict over the defaults and cross-validate."""
    validate(raw)
    resolved = _merge(DEFAULTS, raw)
    mat = resolved["material"]
    family = mat["family"]
    for key in _FAMILY_KEYS[family]:
        if key not in mat:
            raise ConfigError(
                f"config error at material: family {family!r} needs {key}")
    raw_mat = raw.get("material", {})
    if "count" in raw_mat and "p0_per_j_m3" in raw_mat:
        raise ConfigError(
            "config error at material: count and p0_per_j_m3 are exclusive")
    if "count" in raw_mat:
        # an explicit count displaces the default density
        mat.pop("p0_per_j_m3", None)
    lo, hi = mat["delta0_band_ghz"]
    if not lo < hi:
        raise ConfigError(
            "config error at material.delta0_band_ghz: need lo < hi")
    win = resolved["window"]
    if not win["bias_min_kvpm"] < win["bias_max_kvpm"]:
        raise ConfigError(
            "config error at window: need bias_min_kvpm < bias_max_kvpm")
    return resolved


def config_hash(resolved):
    """sha256 over the canonical JSON form of the resolved config."""
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved configuration and the domain objects it describes."""

    resolved: dict
    hash: str

    @classmethod
    def from_dict(cls, raw):
        resolved = resolve(raw)
        return cls(resolved=resolved, hash=config_hash(resolved))

    @classmethod
    def from_yaml(cls, path):
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = yaml.safe_load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except yaml.YAMLError as exc:
            raise ConfigError(f"config parse error in {path}: {exc}")
        return cls.from_dict(raw or {})

    @property
    def seed(self):
        return int(self.resolved["seed"])

    @property
    def resonator(self):
        r = self.resolved["resonator"]
        return ResonatorModel(
            f0=r["f0_ghz"] * 1e9,
            kappa_c=TWO_PI * r["kappa_c_mhz"] * 1e6,
            gamma_c=TWO_PI * r["gamma_c_mhz"] * 1e6,
            volume=r["volume_m3"],
            thickness=r["thickness_nm"] * 1e-9,
            eps_r=r["eps_r"],
        )

    @property
    def window(self):
        w = self.resolved["window"]
        return SweepWindow(
            f_center=w["f_center_ghz"] * 1e9,
            f_span=w["f_span_mhz"] * 1e6,
            bias_min=w["bias_min_kvpm"] * 1e3,
            bias_max=w["bias_max_kvpm"] * 1e3,
            n_freq=w["n_freq"],
            n_bias=w["n_bias"],
        )

    @property
    def material(self):
        m = self.resolved["material"]
        family = m["family"]
        if family in ("gaussian", "truncated-normal"):
            params = {"mu": debye_to_si(m["mean_debye"]),
                      "sigma": debye_to_si(m["sigma_debye"])}
        elif family == "isotropic-single-p0":
            params = {"p0": debye_to_si(m["p0_debye"])}
        elif family == "gamma":
            params = {"alpha": m["alpha"],
                      "beta": m["beta_per_debye"] / debye_to_si(1.0)}
        else:
            params = {"p_max": debye_to_si(m["p_max_debye"])}
        lo, hi = m["delta0_band_ghz"]
        return MaterialSpec(
            family=family,
            params=params,
            delta_max=m["delta_max_ghz"] * 1e9 * H,
            delta0_band=(lo * 1e9 * H, hi * 1e9 * H),
            p0_density=m.get("p0_per_j_m3"),
            count=m.get("count"),
            gamma_tls=TWO_PI * m["gamma_tls_khz"] * 1e3,
            sigma_noise=TWO_PI * m["sigma_noise_khz"] * 1e3,
        )

    @property
    def noise(self):
        n = self.resolved["noise"]
        tele = n.get("telegraph")
        telegraph = None
        if tele is not None:
            telegraph = TelegraphSpec(
                switch_rate=tele.get("switch_rate_hz", 0.0),
                jump_sigma=TWO_PI * tele.get("jump_sigma_khz", 0.0) * 1e3,
            )
        vs = n.get("voltage_sigma_khz")
        return NoiseConfig(
            meas_sigma=n["meas_sigma"],
            voltage_sigma=None if vs is None else TWO_PI * vs * 1e3,
            mc_samples=n["mc_samples"],
            telegraph=telegraph,
            drift_sigma=TWO_PI * n["drift_sigma_khz_per_sqrt_hour"] * 1e3,
        )

    @property
    def pipeline(self):
        p = self.resolved["pipeline"]
        return PipelineParams(
            use_derivative=p["use_derivative"],
            lowpass_cutoff=p["lowpass_cutoff_per_ghz"],
            depth_factor=p["depth_factor"],
            discovery_factor=p["discovery_factor"],
            baseline_window=p["baseline_window"],
            mask_linewidths=p["mask_linewidths"],
            sigma_f_cells=p["sigma_f_cells"],
            sigma_bias_cells=p["sigma_bias_cells"],
            rel_floor=p["rel_floor"],
            min_chain=p["min_chain"],
            jump_cells=p["jump_cells"],
            gap_cells=p["gap_cells"],
            min_rise_cells=p["min_rise_cells"],
            corridor_cells=p["corridor_cells"],
            budget=p["budget"],
            min_points=p["min_points"],
            rms_max_cells=p["rms_max_cells"],
            max_rounds=p["max_rounds"],
            merge_pz_rel=p["merge_pz_rel"],
            merge_vertex_hz=p["merge_vertex_mhz"] * 1e6,
            arc_gap_cells=p["arc_gap_cells"],
            trust_f_cells=p["trust_f_cells"],
            trust_bias_cells=p["trust_bias_cells"],
            pz_min_debye=p["pz_min_debye"],
            pz_max_debye=p["pz_max_debye"],
            hough_slopes=p["hough_slopes"],
            hough_max_sep_cells=p["hough_max_sep_cells"],
            hough_z_min=p["hough_z_min"],
            hough_max_candidates=p["hough_max_candidates"],
            support_log10p=p["support_log10p"],
        )

    @property
    def stats(self):
        return dict(self.resolved["stats"])

    @property
    def stats_geometry(self):
        """Geometry dict for the dipole estimators, derived from the run."""
        r = self.resolved["resonator"]
        w = self.resolved["window"]
        return {
            "volume": r["volume_m3"],
            "thickness": r["thickness_nm"] * 1e-9,
            "field_span": (w["bias_max_kvpm"] - w["bias_min_kvpm"]) * 1e3,
            "f0": w["f_center_ghz"] * 1e9,
            "delta_f0": w["f_span_mhz"] * 1e6,
        }

    def to_yaml(self):
        """Canonical resolved form for emission alongside outputs."""
        return yaml.safe_dump(self.resolved, sort_keys=True,
                              default_flow_style=False)
