import numpy as np
import pytest
import torch

from hdff.synthetic import make_forgery_dataset

torch.set_num_threads(1)

MILD_POLICY = """[("Color", 0.3, 3), ("Brightness", 0.3, 2)]
[("Sharpness", 0.4, 4), ("Contrast", 0.3, 2)]
[("Equalize", 0.2, 0), ("AutoContrast", 0.2, 0)]
[("Brightness", 0.3, 3), ("Color", 0.2, 2)]
"""

NOOP_POLICY = '[("Invert", 0.0, 0), ("Invert", 0.0, 0)]\n'


@pytest.fixture(scope="session")
def forgery_dataset(tmp_path_factory):
    """Small patch-blend dataset shared across the suite: (manifest, dir)."""
    root = tmp_path_factory.mktemp("forgery")
    manifest = make_forgery_dataset(root, n_train=120, n_val=48, size=48, seed=7)
    return manifest, root


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


def lattice_image(rng, size=24):
    """Random image whose values sit exactly on the 0..255/255 grid."""
    raw = rng.integers(0, 256, size=(3, size, size))
    return (raw.astype(np.float64) / 255.0).astype(np.float32)


def config_text(
    manifest,
    run_dir,
    *,
    backbones=("mock_tiny", "mock_small", "mock_narrow", "mock_wide"),
    input_size=48,
    seed=1234,
    policy_file=None,
    selective=(2, 16, "1e-3"),
    full=(2, 16, "1e-3"),
    fusion=(2, 16, "1e-2"),
    param_limit=None,
    extra="",
):
    names = ", ".join(f'"{b}"' for b in backbones)
    policy_line = f'policy_file = "{policy_file}"' if policy_file else ""
    limit_line = f"param_limit = {param_limit}" if param_limit is not None else ""
    blocks = []
    for name, (epochs, batch, lr) in (
        ("selective", selective),
        ("full", full),
        ("fusion", fusion),
    ):
        blocks.append(
            f"[stage.{name}]\nepochs = {epochs}\nbatch_size = {batch}\nlr = {lr}\n"
        )
    return f"""
[registry]
backbones = [{names}]
weights = "random"
{limit_line}

[data]
manifest = "{manifest}"
input_size = {input_size}
seed = {seed}
{policy_line}

[output]
run_dir = "{run_dir}"

{chr(10).join(blocks)}
{extra}
"""
