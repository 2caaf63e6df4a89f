"""Run-level configuration shared by the CLI and the experiment drivers."""

from __future__ import annotations

from dataclasses import dataclass, fields

from .volio import read_keyvalue, write_keyvalue


@dataclass
class RunConfig:
    seed: int = 0
    threshold: float = 0.3  # probability binarization, strict greater-than
    noise_samples: int = 50
    noise_sigma: float = 0.05
    min_volume_mm3: float = 5.0
    connectivity: int = 18
    tn_count: int = 10
    tn_volume_mm3: float = 93.0
    omega_cap: int = 512
    exclusion_lo: float = -0.1
    exclusion_hi: float = 0.1
    bootstrap_resamples: int = 1000
    context_iterations: int = 35
    dilation_connectivity: int = 26
    patch_extent: int = 32

    def __post_init__(self):
        if self.connectivity not in (6, 18, 26):
            raise ValueError(f"connectivity must be 6, 18 or 26, got {self.connectivity}")
        if self.dilation_connectivity not in (6, 26):
            raise ValueError(
                f"dilation_connectivity must be 6 or 26, got {self.dilation_connectivity}"
            )
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.noise_samples < 1:
            raise ValueError("noise_samples must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.exclusion_lo > self.exclusion_hi:
            raise ValueError("exclusion band must satisfy lo <= hi")

    def save(self, path) -> None:
        write_keyvalue({f.name: getattr(self, f.name) for f in fields(self)}, path)


def load_run_config(path) -> RunConfig:
    kv = read_keyvalue(path)
    kwargs = {f.name: _cast(f, kv[f.name]) for f in fields(RunConfig) if f.name in kv}
    unknown = set(kv) - {f.name for f in fields(RunConfig)}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**kwargs)


def _cast(f, raw: str):
    target = {"int": int, "float": float}.get(f.type, str)
    return target(raw)
