"""Sample platform and workflow files shipped with the package."""

from pathlib import Path

SAMPLE_DIR = Path(__file__).resolve().parent


def sample_path(name: str) -> Path:
    path = SAMPLE_DIR / name
    if not path.exists():
        raise FileNotFoundError(f"no sample named {name!r}; have {sorted(p.name for p in SAMPLE_DIR.iterdir() if p.suffix)}")
    return path


def sample_platform_spec():
    """The ten-joint leg platform used by the samples and benchmarks."""
    from statebus.platforms import PlatformSpec

    return PlatformSpec.load(SAMPLE_DIR / "h1_legs.platform")
