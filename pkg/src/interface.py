import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone

import torch

from . import __version__, config
from .blocks import component_variants
from .checkpoint import load_checkpoint, restore_model
from .config import ConvPlacement, GateMode, RunConfig, load_config
from .data import collate_samples, ingest_directory, phantom_dataset, split_train_val
from .dataset_store import SmartDatasetCache, load_dataset, save_dataset
from .errors import MissingDataset, ReconError
from .kspace_sim import make_equispaced_mask
from .network import ReconNetwork, count_params
from .training import evaluate, evaluate_zero_filled, fit, seeded_model
from .utils import atomic_write_text, git_revision, resolve_device, sha256_file, sha256_tree
from .visualization import ablation_table, save_reconstruction

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
SCAN_KERNELS = (3, 5, 7)
ARCH_DEPTHS = (3, 4, 6, 8)
ARCH_PATCHES = (1, 2, 4)
VOLATILE_MANIFEST_FIELDS = ("started_at", "finished_at", "argv", "output_dir")


@dataclass
class RunManifest:
    """
    Provenance record written to ``manifest.json`` in every output directory.
    The start/end timestamps make it the one file that differs between two
    identical runs; ``sha256_tree`` skips it, and ``stable_manifest_fields``
    drops the wall-clock and path fields for comparing reruns.
    """

    command: str
    argv: list
    config_path: str
    output_dir: str
    started_at: str
    finished_at: str = ""
    version: str = __version__
    git_revision: str = "unknown"
    input_hashes: dict = field(default_factory=dict)
    exit_code: int | None = None

    def write(self):
        os.makedirs(self.output_dir, exist_ok=True)
        path = os.path.join(self.output_dir, MANIFEST_FILE)
        atomic_write_text(path, json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def stable_manifest_fields(manifest):
    """A loaded manifest without its wall-clock and path fields."""
    return {k: v for k, v in manifest.items() if k not in VOLATILE_MANIFEST_FIELDS}


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# --- Config and data plumbing ---

def resolve_run_config(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    return cfg.with_overrides(seed=args.seed, af=args.af, patch=args.patch, device=args.device)


def build_mask(cfg, width):
    return make_equispaced_mask(width, cfg.train.af, cfg.train.center_fraction, cfg.data.mask_seed)


def simulate_samples(cfg, data_path=None):
    """Generates phantoms or ingests HDF5 volumes according to ``cfg.data``; returns (samples, mask)."""
    if cfg.data.source == "phantom":
        mask = build_mask(cfg, cfg.data.size)
        return phantom_dataset(cfg.data.n, cfg.data.size, cfg.data.seed, mask), mask
    root = data_path or cfg.data.path or config.DATA_DIR
    if not root:
        raise MissingDataset("no fastMRI data directory: pass --data, set data.path or HIFI_DATA_DIR")
    mask = build_mask(cfg, cfg.data.crop_size)
    return ingest_directory(root, cfg.data.slice_trim, mask, cfg.data.crop_size), mask


def dataset_for(cfg, data_dir=None):
    """A saved dataset directory when given; otherwise cached phantoms or freshly ingested volumes."""
    if data_dir:
        samples, mask, index = load_dataset(data_dir)
        return samples, mask, index.get("source", os.path.basename(os.path.normpath(data_dir)))
    if cfg.data.source == "phantom":
        mask = build_mask(cfg, cfg.data.size)
        samples = SmartDatasetCache().get_phantoms(cfg.data.n, cfg.data.size, cfg.data.seed, mask)
        return samples, mask, "phantom"
    samples, mask = simulate_samples(cfg)
    return samples, mask, "fastmri"


def _load_model(checkpoint_path, cfg=None):
    ckpt = load_checkpoint(checkpoint_path, cfg.model if cfg is not None else None)
    model = restore_model(ckpt, ReconNetwork(ckpt.model_cfg))
    model.eval()
    return model, ckpt


# --- Commands ---

def cmd_simulate(args, cfg, manifest):
    samples, mask = simulate_samples(cfg, args.data)
    save_dataset(args.out, samples, mask, cfg.data.source, cfg.data.seed)
    logger.info(f"Mask: {int(mask.lines.sum())}/{mask.width} lines (af {mask.acceleration_factor})")
    return args.out


def cmd_train(args, cfg, manifest):
    samples, mask, tag = dataset_for(cfg, args.data)
    train, val = split_train_val(samples, cfg.train.val_fraction)
    baseline = evaluate_zero_filled(val).aggregate
    logger.info(f"Zero-filled validation baseline: {baseline['psnr']:.2f} dB ({tag})")

    model = seeded_model(ReconNetwork, cfg.model, cfg.train.seed)
    logger.info(f"Model has {sum(p.numel() for p in model.parameters())} parameters")
    atomic_write_text(os.path.join(args.out, "run_config.json"), json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    result = fit(cfg, model, train, val, args.out, resume=args.resume)
    logger.info(f"Best validation PSNR {result.best_val_psnr:.2f} dB; checkpoint {result.best_path}")
    return result.best_path


def cmd_reconstruct(args, cfg, manifest):
    model, ckpt = _load_model(args.checkpoint, cfg if args.config else None)
    device = resolve_device(cfg.train.device)
    model.to(device)
    samples, _, _ = load_dataset(args.input)
    with torch.no_grad():
        for s in samples:
            batch = collate_samples([s]).to(device)
            pred = model(batch.zero_filled, batch.ksp)[0].cpu()
            save_reconstruction(args.out, s.slice_id, pred, gt=s.target, zero_filled=s.zero_filled)
    logger.info(f"Reconstructed {len(samples)} slices with checkpoint {ckpt.checkpoint_id} into {args.out}")
    return args.out


def cmd_evaluate(args, cfg, manifest):
    samples, mask, tag = dataset_for(cfg, args.data)
    meta = {"dataset": tag, "af": mask.acceleration_factor, "mask_hash": mask.digest()}
    if args.checkpoint:
        model, ckpt = _load_model(args.checkpoint)
        device = resolve_device(cfg.train.device)
        model.to(device)
        report = evaluate(model, samples, cfg.train.batch_size, device, meta={**meta, "checkpoint": ckpt.checkpoint_id})
    else:
        report = evaluate_zero_filled(samples, meta={**meta, "checkpoint": "zero_filled"})
    path, _ = report.write(os.path.join(args.out, "report.csv"))
    agg = report.aggregate
    logger.info(f"PSNR {agg['psnr']:.2f} dB | SSIM {agg['ssim']:.4f} | NMSE {agg['nmse']:.5f} over {len(samples)} slices")
    return path


def ablation_variants(model_cfg, sweep, image_size):
    """(name, ModelConfig, descriptor) triples; the first ``scan`` row is the default configuration."""
    variants = []
    if sweep == "scan":
        for gate in GateMode:
            for placement in ConvPlacement:
                for k in SCAN_KERNELS:
                    scan = replace(model_cfg.scan, gate_mode=gate, conv_placement=placement, conv_kernel=k)
                    desc = {"gate_mode": gate.value, "conv_placement": placement.value, "kernel": k}
                    variants.append((f"{gate.value}/{placement.value}/k{k}", replace(model_cfg, scan=scan), desc))
        default = f"{GateMode.GATE_BC.value}/{ConvPlacement.POST_SPLIT.value}/k7"
        variants.sort(key=lambda v: v[0] != default)
    elif sweep == "components":
        for name, variant in component_variants(model_cfg).items():
            desc = {"use_hifi_mamba": variant.use_hifi_mamba, "use_dsfa": variant.use_dsfa, "use_crm": variant.use_crm}
            variants.append((name, variant, desc))
    elif sweep == "architecture":
        for depth in ARCH_DEPTHS:
            for p in ARCH_PATCHES:
                if image_size % p or (image_size // p) % 2:
                    logger.warning(f"Skipping K={depth} P={p}: {image_size}px does not tile into even patch grids")
                    continue
                variants.append((f"K{depth}/P{p}", replace(model_cfg, groups=depth, patch_size=p), {"groups": depth, "patch": p}))
    return variants


def cmd_ablate(args, cfg, manifest):
    samples, mask, tag = dataset_for(cfg, args.data)
    train, val = split_train_val(samples, cfg.train.val_fraction)
    image_size = samples[0].target.shape[-2]
    variants = ablation_variants(cfg.model, args.sweep, image_size)
    default_name = variants[0][0] if args.sweep == "scan" else None

    rows = []
    for name, model_cfg, desc in variants:
        run_cfg = replace(cfg, model=model_cfg)
        run_dir = os.path.join(args.out, name.replace("/", "_").replace("+", "plus_"))
        # identical seed and data for every row
        model = seeded_model(ReconNetwork, model_cfg, cfg.train.seed)
        result = fit(run_cfg, model, train, val, run_dir)
        best, _ = _load_model(result.best_path)
        agg = evaluate(best, val, cfg.train.batch_size, resolve_device(cfg.train.device)).aggregate
        rows.append({"name": name, **desc, "params": count_params(model_cfg), **agg})
        logger.info(f"Ablation {name}: PSNR {agg['psnr']:.2f} dB")

    columns = ["name", *variants[0][2].keys(), "params", "psnr", "ssim", "nmse"] if variants else ["name"]
    table = ablation_table(rows, columns, default_name)
    atomic_write_text(os.path.join(args.out, f"ablation_{args.sweep}.md"), table)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    writer.writerows(rows)
    atomic_write_text(os.path.join(args.out, f"ablation_{args.sweep}.csv"), buf.getvalue())
    logger.info(f"Ablation table ({len(rows)} rows) written to {args.out}")
    return rows


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="hifi-recon", description="Frequency-decoupled state-space MRI reconstruction")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="TOML run config")
    common.add_argument("--out", default=None, help="output directory (default runs/<command>)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--af", type=int, choices=(4, 8), default=None, help="acceleration factor")
    common.add_argument("--patch", type=int, choices=(1, 2, 4), default=None)
    common.add_argument("--device", default=None)
    common.add_argument("--verbose", action="store_true")

    p = sub.add_parser("simulate", parents=[common], help="generate or ingest a dataset directory")
    p.add_argument("--data", default=None, help="HDF5 volume directory (fastmri source)")

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", default=None, help="dataset directory written by simulate")
    p.add_argument("--resume", default=None, help="last.ckpt to continue from")

    p = sub.add_parser("reconstruct", parents=[common], help="export reconstructions and error maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="dataset directory written by simulate")

    p = sub.add_parser("evaluate", parents=[common], help="per-slice PSNR/SSIM/NMSE report")
    p.add_argument("--checkpoint", default=None, help="omit to score the zero-filled baseline")
    p.add_argument("--data", default=None)

    p = sub.add_parser("ablate", parents=[common], help="train and compare configuration variants")
    p.add_argument("--sweep", choices=("scan", "components", "architecture"), default="scan")
    p.add_argument("--data", default=None)
    return parser


def _input_hashes(args):
    hashes = {}
    if args.config and os.path.isfile(args.config):
        hashes["config"] = sha256_file(args.config)
    for key in ("data", "input"):
        path = getattr(args, key, None)
        if path and os.path.isdir(path):
            hashes["dataset"] = sha256_tree(path)
    ckpt = getattr(args, "checkpoint", None)
    if ckpt and os.path.isfile(ckpt):
        hashes["checkpoint"] = sha256_file(ckpt)
    return hashes


def run(argv=None):
    """Parses argv, runs one command and returns its exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    args.out = args.out or os.path.join("runs", args.command)

    manifest = RunManifest(
        command=args.command,
        argv=argv,
        config_path=args.config or "",
        output_dir=args.out,
        started_at=_now(),
        git_revision=git_revision(),
    )
    code = 0
    try:
        manifest.input_hashes = _input_hashes(args)
        cfg = resolve_run_config(args)
        os.makedirs(args.out, exist_ok=True)
        logger.info(f"Running '{args.command}' -> {args.out}")
        COMMANDS[args.command](args, cfg, manifest)
    except ReconError as e:
        logger.error(f"{args.command} failed ({type(e).__name__}): {e}")
        code = e.exit_code
    except Exception as e:
        logger.exception(f"Unexpected error in {args.command}: {e}")
        code = 1
    finally:
        manifest.finished_at = _now()
        manifest.exit_code = code
        try:
            manifest.write()
        except OSError as e:
            logger.error(f"Could not write run manifest: {e}")
    return code
