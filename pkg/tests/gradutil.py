"""Central finite-difference gradient checking shared by the net tests."""

import numpy as np

from uridet.nets.layers import zero_grads


def finite_difference_check(params, run, h=1e-6, rel_tol=1e-3, abs_tol=1e-8):
    """Compare accumulated analytic grads against central differences.

    ``run()`` must compute the scalar loss AND backpropagate it into
    ``params``; it is re-invoked with perturbed parameters for the numeric
    side. Checks every element of every parameter.
    """
    zero_grads(params)
    run()
    analytic = {k: p.grad.copy() for k, p in params.items()}
    worst = 0.0
    for name, p in params.items():
        it = np.nditer(p.value, flags=["multi_index"])
        while not it.finished:
            i = it.multi_index
            orig = p.value[i]
            p.value[i] = orig + h
            zero_grads(params)
            up = run()
            p.value[i] = orig - h
            zero_grads(params)
            dn = run()
            p.value[i] = orig
            num = (up - dn) / (2 * h)
            a = analytic[name][i]
            err = abs(num - a)
            denom = max(abs(num), abs(a))
            rel = err / denom if denom > 0 else 0.0
            if err > abs_tol and rel > rel_tol:
                raise AssertionError(
                    f"gradient mismatch at {name}{list(i)}: analytic {a:.6e}, "
                    f"numeric {num:.6e}, rel err {rel:.2e}"
                )
            worst = max(worst, min(rel, err))
            it.iternext()
    return worst
