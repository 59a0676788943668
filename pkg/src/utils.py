
import hashlib
import logging
import os
import random
import subprocess
import tempfile

import numpy as np
import torch

logger = logging.getLogger(__name__)

FILE_MODE = 0o644


def seed_everything(seed, deterministic=False):
    """Seeds python, numpy and torch RNGs; optionally forces deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")


def short_hash(text, length=10):
    """Stable short key for a string (cache directory names, split buckets)."""
    return hashlib.md5(text.encode()).hexdigest()[:length]


def sha256_bytes(data):
    return hashlib.sha256(data).hexdigest()


def sha256_file(path):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sha256_tree(root):
    """Hash of every file under root, in sorted relative-path order; the run manifest is skipped."""
    digest = hashlib.sha256()
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            path = os.path.join(dirpath, name)
            rel = os.path.relpath(path, root).replace(os.sep, "/")
            if rel == "manifest.json":
                continue
            digest.update(rel.encode())
            digest.update(sha256_file(path).encode())
    return digest.hexdigest()


def atomic_write_bytes(path, data):
    """Write-temp-then-rename so readers never observe a partial file."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        # mkstemp creates files with mode 0600
        os.chmod(tmp, FILE_MODE)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def git_revision():
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            cwd=os.path.dirname(os.path.abspath(__file__)),
            capture_output=True, text=True, timeout=5,
        )
        return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"
    except Exception as e:
        logger.debug(f"git revision unavailable: {e}")
        return "unknown"


def resolve_device(name):
    if name.startswith("cuda") and not torch.cuda.is_available():
        logger.warning(f"Device '{name}' requested but CUDA is unavailable; falling back to cpu")
        return torch.device("cpu")
    return torch.device(name)
