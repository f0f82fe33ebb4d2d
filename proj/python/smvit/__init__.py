"""Python bindings for the smvit gait recognition library."""

from ._smvit import (
    FactorRegistry,
    Model,
    SmvitError,
    apply_it,
    build_registry,
    compute_pfc,
    gradcheck,
    preprocess,
    run_cli,
    synth,
)

__all__ = [
    "FactorRegistry",
    "Model",
    "SmvitError",
    "apply_it",
    "build_registry",
    "compute_pfc",
    "gradcheck",
    "preprocess",
    "run_cli",
    "synth",
    "train",
]


def train(data_root, out, config=None, mode="base", seed=1, precision=32):
    """Runs `smvit train` in process. Raises SmvitError on a nonzero exit."""
    args = ["train", "--data-root", str(data_root), "--out", str(out), "--mode", mode,
            "--seed", str(seed), "--precision", str(precision), "--deterministic"]
    if config is not None:
        args += ["--config", str(config)]
    code, stdout, stderr = run_cli(args)
    if code != 0:
        raise SmvitError(stderr.strip() or f"train exited with {code}")
    return stdout
