"""Seeding, deterministic mode and small shared helpers."""

import hashlib
import os
import platform
from typing import Any, Dict, Union

import numpy as np

DETERMINISTIC_ENV = "REGERR_DETERMINISTIC"


def is_deterministic_env() -> bool:
    """Check whether deterministic mode is forced through the environment."""
    return os.getenv(DETERMINISTIC_ENV, "").lower() in ("1", "true", "yes")


def hash64(*parts: Union[int, str]) -> int:
    """Derive a stable unsigned 64-bit integer from a sequence of ints/strings.

    Used for per-deformation seeds so that no global RNG state is involved:
    ``hash64(cohort_seed, patient_id, deformation_index)``.
    """
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        token = f"{type(part).__name__}:{part}".encode("utf-8")
        h.update(len(token).to_bytes(4, "little"))
        h.update(token)
    return int.from_bytes(h.digest(), "little")


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator (Philox) seeded from a 64-bit integer."""
    return np.random.Generator(np.random.Philox(seed))


def set_deterministic(seed: int, enabled: bool = True) -> None:
    """Seed torch and, when enabled, restrict it to deterministic kernels."""
    import torch

    torch.manual_seed(seed)
    if enabled:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.use_deterministic_algorithms(True)
        torch.backends.cudnn.benchmark = False
        torch.backends.cudnn.deterministic = True


def describe_environment(deterministic: bool) -> Dict[str, Any]:
    """Hardware/software descriptor stamped into reports."""
    import torch

    if torch.cuda.is_available():
        device = torch.cuda.get_device_name(0)
    else:
        device = platform.processor() or platform.machine() or "cpu"
    return {
        "device": device,
        "torch": torch.__version__,
        "python": platform.python_version(),
        "platform": platform.platform(),
        "threads": torch.get_num_threads(),
        "deterministic": deterministic,
    }
