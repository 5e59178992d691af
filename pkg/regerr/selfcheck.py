"""Fast embedded property checks run by ``regerr selfcheck``."""

import logging
from typing import Callable, List, Tuple

import numpy as np
import torch
from pydantic import BaseModel

from . import ffd
from .network import ModelConfig, build_model
from .trainer import loss_terms
from .volume import Modality, Volume

logger = logging.getLogger(__name__)


class CheckResult(BaseModel):
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        # passing lines carry no numbers
        if self.passed or not self.detail:
            return f"{status:4s} {self.name}"
        return f"{status:4s} {self.name}: {self.detail}"


def check_partition_of_unity(tol: float = 1e-12) -> CheckResult:
    t = np.linspace(0.0, 1.0, 257, endpoint=False)
    deviation = float(np.max(np.abs(ffd.bspline_basis(t).sum(axis=-1) - 1.0)))
    return CheckResult(
        name="partition of unity",
        passed=deviation <= tol,
        detail=f"max deviation {deviation:.3e}",
    )


def check_dense_matches_brute_force(size: int = 8, tol: float = 1e-5) -> CheckResult:
    geometry = Volume(
        data=np.zeros((size, size, size), dtype=np.float32),
        spacing=(1.0, 1.0, 1.0),
        origin=(0.0, 0.0, 0.0),
        modality=Modality.OTHER,
    )
    spec = ffd.DeformationSpec(seed=7, max_points_per_axis=4, max_displacement_mm=5.0)
    grid = ffd.sample_random_grid(spec, geometry)
    fast = ffd.dense_field(grid, geometry).field
    slow = ffd.brute_force_field(grid, geometry).field
    deviation = float(np.max(np.abs(fast.astype(np.float64) - slow)))
    return CheckResult(
        name=f"dense field == brute force ({size}^3)",
        passed=deviation <= tol,
        detail=f"max deviation {deviation:.3e} mm",
    )


def _directional_check(
    loss: Callable[[], torch.Tensor], tensors: List[torch.Tensor], eps: float = 1e-6
) -> Tuple[float, float]:
    """Autograd vs central-difference derivative of ``loss`` along a random direction."""
    generator = torch.Generator().manual_seed(11)
    directions = [torch.randn(t.shape, generator=generator, dtype=t.dtype) for t in tensors]

    value = loss()
    grads = torch.autograd.grad(value, tensors)
    analytic = float(sum((g * d).sum() for g, d in zip(grads, directions)))

    with torch.no_grad():
        for t, d in zip(tensors, directions):
            t.add_(eps * d)
        plus = float(loss())
        for t, d in zip(tensors, directions):
            t.sub_(2 * eps * d)
        minus = float(loss())
        for t, d in zip(tensors, directions):
            t.add_(eps * d)
    return analytic, (plus - minus) / (2 * eps)


def _relative_gap(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def check_loss_gradient(lambda_smooth: float = 0.01, tol: float = 1e-6, network_tol: float = 1e-4) -> CheckResult:
    """The composite loss and the toy network both differentiate correctly."""
    cfg = ModelConfig.toy()
    p = cfg.patch_size
    generator = torch.Generator().manual_seed(3)

    phi = torch.rand((1, 1, p, p, p), generator=generator, dtype=torch.float64, requires_grad=True)
    truth = torch.rand((1, 1, p, p, p), generator=generator, dtype=torch.float64)
    analytic, numeric = _directional_check(lambda: loss_terms(phi, truth, lambda_smooth)[0], [phi])
    loss_gap = _relative_gap(analytic, numeric)

    model = build_model(cfg, init_seed=0).double()
    model.eval()
    mri = torch.rand((1, 1, p, p, p), generator=generator, dtype=torch.float64)
    ius = torch.rand((1, 1, p, p, p), generator=generator, dtype=torch.float64)
    params = [q for q in model.parameters() if q.requires_grad]
    analytic, numeric = _directional_check(
        lambda: loss_terms(model(mri, ius), truth, lambda_smooth)[0], params
    )
    model_gap = _relative_gap(analytic, numeric)

    return CheckResult(
        name="loss gradient (toy config)",
        passed=loss_gap <= tol and model_gap <= network_tol,
        detail=f"relative gap loss {loss_gap:.1e}, network {model_gap:.1e}",
    )


CHECKS: List[Callable[[], CheckResult]] = [
    check_partition_of_unity,
    check_dense_matches_brute_force,
    check_loss_gradient,
]


def run_selfcheck() -> List[CheckResult]:
    """Run every check; an exception inside a check counts as a failure."""
    results: List[CheckResult] = []
    for check in CHECKS:
        try:
            results.append(check())
        except Exception as e:  # noqa: BLE001
            logger.debug("check %s raised", check.__name__, exc_info=True)
            results.append(CheckResult(name=check.__name__, passed=False, detail=f"{type(e).__name__}: {e}"))
    return results
