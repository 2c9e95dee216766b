"""Central finite-difference helpers shared by the gradient tests."""

import numpy as np


def central_diff(eval_loss, array, h=1e-5):
    """Finite-difference gradient of a scalar function w.r.t. one array.

    ``eval_loss`` is called with no arguments and must read ``array`` in
    place; entries are perturbed one at a time and restored.
    """
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = array[idx]
        array[idx] = orig + h
        plus = eval_loss()
        array[idx] = orig - h
        minus = eval_loss()
        array[idx] = orig
        grad[idx] = (plus - minus) / (2.0 * h)
    return grad


def assert_grad_close(analytic, numeric, rel=1e-5, abs_tol=1e-8):
    """Per-entry |a - n| <= max(abs_tol, rel * max(|a|, |n|))."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    assert analytic.shape == numeric.shape
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    bound = np.maximum(abs_tol, rel * scale)
    worst = float((diff - bound).max())
    assert np.all(diff <= bound), (
        f"gradient mismatch: worst excess {worst:.3e}, "
        f"max abs diff {diff.max():.3e}"
    )
