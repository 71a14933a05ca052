"""Run configuration: sectioned key=value files with strict key checking.

Sections are [geometry] [prior] [mace] [sim] [io] [experiment].  Every key
has a typed default below; unknown sections or keys raise immediately, and
command-line overrides use the same ``section.key=value`` addressing.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field

import numpy as np

from .denoisers import DenoiserSpec
from .geometry import Geometry
from .mace import MaceConfig
from .models import PriorParams

__all__ = ["RunConfig", "parse_config", "default_config", "apply_overrides"]

MODES = ("centralized", "mace", "mace-pnp")


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _float(text: str) -> float:
    return float(text)  # accepts "inf"


def _floats(text: str) -> tuple:
    return tuple(float(t) for t in text.split(",") if t.strip()) if text.strip() else ()


def _ints(text: str) -> tuple:
    return tuple(int(t) for t in text.split(",") if t.strip()) if text.strip() else ()


def _sigma(text: str):
    t = text.strip().lower()
    if t == "auto":
        return "auto"
    value = float(t)
    if value <= 0:
        raise ValueError("sigma must be > 0 or 'auto'")
    return value


# section -> key -> (parser, default)
SCHEMA = {
    "geometry": {
        "n_side": (int, 32),
        "pixel_pitch": (_float, 1.0),
        "n_views": (int, 64),
        "n_channels": (int, 96),
        "channel_pitch": (_float, 0.5),
    },
    "prior": {
        "kind": (str, "quadratic-mrf"),
        "beta": (_float, 2.0),
        "p": (_float, 2.0),
        "q": (_float, 1.2),
        "t": (_float, 1.0),
        "sigma_x": (_float, 0.001),
        "eps_reg": (_float, 1e-8),
    },
    "mace": {
        "mode": (str, "mace"),
        "n_subsets": (int, 4),
        "rho": (_float, 0.8),
        # "auto" (0.1 x phantom dynamic range) is a conservative heuristic;
        # 0.03 is a measured fast-and-stable point for the default geometry
        "sigma": (_sigma, 0.03),
        "denoiser": (str, "identity"),
        "denoiser_lambda": (_float, 1.0),
        "denoiser_radius": (int, 1),
        "max_outer": (int, 2000),
        "tol": (_float, 1e-7),
        "equit_accounting": (_bool, True),
        "workers": (int, 0),
        "residuals": (str, "final"),
        "clamp_nonneg": (_bool, False),
    },
    "sim": {
        "phantom": (str, "shepp-logan-like"),
        "seed": (int, 1234),
        "counts_scale": (_float, 1e4),
        "weight_model": (str, "exp"),
    },
    "io": {
        "output_dir": (str, "out"),
        "matrix_cache": (str, ""),
    },
    "experiment": {
        "rho_list": (_floats, (0.5, 0.8)),
        "n_list": (_ints, (1, 2, 4, 8)),
        "sigma_list": (_floats, ()),
        "target_nrmse": (_float, 1e-4),
    },
}


@dataclass
class RunConfig:
    """Validated configuration tree with builders for the library objects."""

    sections: dict = field(default_factory=dict)

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    def get(self, section: str, key: str):
        return self.sections[section][key]

    def set(self, section: str, key: str, text_value: str) -> None:
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ValueError(f"unknown config key [{section}] {key}")
        parser, _ = SCHEMA[section][key]
        self.sections[section][key] = parser(text_value)

    # builders -------------------------------------------------------------

    def geometry(self) -> Geometry:
        g = self.sections["geometry"]
        return Geometry(
            n_side=g["n_side"],
            pixel_pitch=g["pixel_pitch"],
            n_views=g["n_views"],
            n_channels=g["n_channels"],
            channel_pitch=g["channel_pitch"],
        )

    def prior(self) -> PriorParams:
        p = self.sections["prior"]
        return PriorParams(
            kind=p["kind"],
            beta=p["beta"],
            p=p["p"],
            q=p["q"],
            T=p["t"],
            sigma_x=p["sigma_x"],
            eps_reg=p["eps_reg"],
        )

    def resolve_sigma(self, phantom: np.ndarray) -> float:
        sigma = self.sections["mace"]["sigma"]
        if sigma == "auto":
            rng = float(np.max(phantom) - np.min(phantom))
            return 0.1 * rng if rng > 0 else 0.1
        return float(sigma)

    def denoiser_spec(self) -> DenoiserSpec:
        m = self.sections["mace"]
        return DenoiserSpec(kind=m["denoiser"], lam=m["denoiser_lambda"], radius=m["denoiser_radius"])

    def mace_config(self, sigma: float, n_subsets: int | None = None,
                    rho: float | None = None) -> MaceConfig:
        m = self.sections["mace"]
        pnp = m["mode"] == "mace-pnp"
        return MaceConfig(
            n_subsets=m["n_subsets"] if n_subsets is None else n_subsets,
            rho=m["rho"] if rho is None else rho,
            sigma=sigma,
            mode="pnp" if pnp else "conventional",
            denoiser=self.denoiser_spec() if pnp else None,
            max_outer=m["max_outer"],
            tol=m["tol"],
            equit_accounting=m["equit_accounting"],
            residuals=m["residuals"],
            clamp_nonneg=m["clamp_nonneg"],
        )

    def validate(self) -> None:
        mode = self.sections["mace"]["mode"]
        if mode not in MODES:
            raise ValueError(f"mace.mode must be one of {MODES}, got {mode!r}")
        if self.sections["mace"]["residuals"] not in ("final", "none"):
            raise ValueError("mace.residuals must be 'final' or 'none'")
        if self.sections["sim"]["phantom"] not in ("shepp-logan-like", "uniform-disk", "checker"):
            raise ValueError(f"unknown phantom {self.sections['sim']['phantom']!r}")
        if self.sections["sim"]["weight_model"] not in ("exp", "identity"):
            raise ValueError("sim.weight_model must be 'exp' or 'identity'")
        self.geometry()
        self.prior()


def default_config() -> RunConfig:
    return RunConfig(
        sections={sec: {k: default for k, (_, default) in keys.items()} for sec, keys in SCHEMA.items()}
    )


def parse_config(path) -> RunConfig:
    """Read an INI file; every key must belong to the schema."""
    cp = configparser.ConfigParser(interpolation=None)
    with open(path) as fh:
        cp.read_file(fh)
    cfg = default_config()
    for section in cp.sections():
        if section not in SCHEMA:
            raise ValueError(f"unknown config section [{section}]")
        for key, text in cp.items(section):
            cfg.set(section, key, text)
    cfg.validate()
    return cfg


def apply_overrides(cfg: RunConfig, assignments) -> RunConfig:
    """Apply ``section.key=value`` strings on top of a parsed config."""
    for item in assignments or ():
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ValueError(f"override must look like section.key=value, got {item!r}")
        addr, value = item.split("=", 1)
        section, key = addr.split(".", 1)
        cfg.set(section.strip(), key.strip(), value.strip())
    cfg.validate()
    return cfg
