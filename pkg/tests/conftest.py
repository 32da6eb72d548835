import numpy as np
import torch


def finite_difference_check(model, loss_fn, n_params=24, h=1e-4, seed=0):
    """Compare autograd and central-difference gradients on sampled parameter entries.

    Returns the list of relative errors.
    """
    model.double()
    params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    model.zero_grad()
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    # bias the draw toward tensors whose gradient is non-zero
    live = [(n, p) for n, p in params if p.grad is not None and p.grad.abs().max() > 1e-8]
    errors = []
    for k in range(n_params):
        name, p = live[k % len(live)] if k < len(live) else live[int(rng.integers(len(live)))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        analytic = float(p.grad[idx])
        with torch.no_grad():
            orig = float(p[idx])
            p[idx] = orig + h
            up = float(loss_fn())
            p[idx] = orig - h
            down = float(loss_fn())
            p[idx] = orig
        numeric = (up - down) / (2 * h)
        errors.append(abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-6))
    return errors


def stratified_normal(n, seed=0):
    """n standard-normal draws, one per equal-probability stratum, in random order."""
    g = torch.Generator().manual_seed(seed)
    u = (torch.arange(n, dtype=torch.float64) + torch.rand(n, generator=g, dtype=torch.float64)) / n
    return torch.special.ndtri(u)[torch.randperm(n, generator=g)]


# acceptance outcomes, one (criterion, passed, detail) per check, echoed after the run
ACCEPTANCE: list[tuple[int, bool, str]] = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE.append((number, bool(passed), detail))
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
