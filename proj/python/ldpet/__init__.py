"""Low-dose PET restoration: phantoms, priors, diffusion, transformer restoration and DCS."""

import json

from . import _core
from ._core import (
    CheckpointError,
    DcsError,
    DiffusionError,
    MetricsError,
    PhantomError,
    PipelineError,
    TensorFileError,
    denoise_step,
    diffuse_forward,
    extract_lesion_mask,
    gradient_suite,
    load_tensor,
    make_schedule,
    nrmse,
    psnr,
    psnr_conventional,
    save_tensor,
    simulate_lowdose,
    ssim,
)

__all__ = [
    "CheckpointError",
    "DcsError",
    "DiffusionError",
    "MetricsError",
    "PhantomError",
    "PipelineError",
    "TensorFileError",
    "default_run_config",
    "denoise_step",
    "diffuse_forward",
    "evaluate",
    "extract_lesion_mask",
    "generate_phantom",
    "gradient_suite",
    "load_run_config",
    "load_tensor",
    "make_schedule",
    "nema_spec",
    "nrmse",
    "psnr",
    "psnr_conventional",
    "reconstruct",
    "run_dcs",
    "save_tensor",
    "simulate_lowdose",
    "ssim",
    "train_stage1",
    "train_stage2",
    "write_dataset",
]


def _dump(obj):
    return "" if obj is None else json.dumps(obj)


def nema_spec():
    return json.loads(_core.nema_spec())


def generate_phantom(spec=None):
    return _core.generate_phantom(_dump(spec))


def evaluate(x, truth, spec=None, pixel_mm=None, dose=1.0, method=""):
    spec = spec or nema_spec()
    if pixel_mm is None:
        pixel_mm = spec["pixel_mm"]
    return json.loads(_core.evaluate(x, truth, json.dumps(spec), pixel_mm, dose, method))


def run_dcs(x0, f_hat, dose, counts_scale=20.0, config=None):
    """Returns (restored image, report dict)."""
    out, report = _core.run_dcs(x0, f_hat, dose, counts_scale, _dump(config))
    return out, json.loads(report)


def default_run_config():
    return json.loads(_core.default_run_config())


def load_run_config(path):
    return json.loads(_core.load_run_config(str(path)))


def write_dataset(config, directory):
    _core.write_dataset(json.dumps(config), str(directory))


def train_stage1(config, data_dir, out_dir):
    return _core.train_stage1(json.dumps(config), str(data_dir), str(out_dir))


def train_stage2(config, data_dir, stage1_dir, out_dir):
    return _core.train_stage2(json.dumps(config), str(data_dir), str(stage1_dir), str(out_dir))


def reconstruct(config, stage1_dir, stage2_dir, low, dose, use_dcs=True, stream=0):
    return _core.reconstruct(json.dumps(config), str(stage1_dir), str(stage2_dir), low, dose, use_dcs, stream)
