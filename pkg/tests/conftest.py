import numpy as np
import pytest

from dectseg.phantom import PhantomSpec, generate_phantom


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def phantom32():
    """One small dual-energy phantom shared by the cheap tests."""
    return generate_phantom(PhantomSpec(seed=3, dims=(32, 32, 32)))


def brute_components(mask):
    """6-connected labelling by explicit BFS; returns a list of voxel-index sets."""
    mask = np.asarray(mask, bool)
    seen = np.zeros_like(mask)
    comps = []
    steps = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
    for start in zip(*np.nonzero(mask)):
        if seen[start]:
            continue
        comp, queue = set(), [start]
        seen[start] = True
        while queue:
            v = queue.pop()
            comp.add(v)
            for d in steps:
                n = tuple(a + b for a, b in zip(v, d))
                if all(0 <= n[i] < mask.shape[i] for i in range(3)) and mask[n] and not seen[n]:
                    seen[n] = True
                    queue.append(n)
        comps.append(comp)
    return comps


def brute_exterior(body):
    """Voxels of ``~body`` reachable from the grid border by 6-steps."""
    free = ~np.asarray(body, bool)
    out = np.zeros_like(free)
    queue = []
    for idx in zip(*np.nonzero(free)):
        if any(i == 0 or i == s - 1 for i, s in zip(idx, free.shape)):
            out[idx] = True
            queue.append(idx)
    steps = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
    while queue:
        v = queue.pop()
        for d in steps:
            n = tuple(a + b for a, b in zip(v, d))
            if all(0 <= n[i] < free.shape[i] for i in range(3)) and free[n] and not out[n]:
                out[n] = True
                queue.append(n)
    return out


# -- acceptance summary -------------------------------------------------------------

_ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = {}


@pytest.fixture
def criterion(request):
    """``criterion(n, passed, detail)`` records one acceptance line and prints it."""
    results = request.config.stash[_ACCEPTANCE]

    def record(number, passed, detail):
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        results[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
