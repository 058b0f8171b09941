"""Independent reference computations used by the tests."""

import torch
import torch.nn as nn

from mlsm.encoder import gap
from mlsm.localizer import BaseClassifier


def central_differences(fn, tensor: torch.Tensor, eps: float = 1e-3) -> torch.Tensor:
    """d fn() / d tensor by perturbing each entry of ``tensor`` in place."""
    grad = torch.zeros_like(tensor)
    flat = tensor.data.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = float(fn())
            flat[i] = orig - eps
            down = float(fn())
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
    return grad


def max_relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """max |a - n| scaled by the largest gradient magnitude of the pair."""
    scale = max(analytic.abs().max().item(), numeric.abs().max().item(), 1e-12)
    return (analytic - numeric).abs().max().item() / scale


def _entry_difference(fn, tensor, i, eps):
    flat = tensor.data.view(-1)
    orig = flat[i].item()
    with torch.no_grad():
        flat[i] = orig + eps
        up = float(fn())
        flat[i] = orig - eps
        down = float(fn())
        flat[i] = orig
    return (up - down) / (2 * eps)


def check_module_gradients(module, loss_fn, eps=1e-3, tol=1e-2, kink_eps=1e-6):
    """Worst relative error over every parameter tensor of ``module``.

    ReLU and max-pool are piecewise linear, so a step of ``eps`` can straddle a
    kink. Entries that disagree at ``eps`` are re-differenced at ``kink_eps``;
    if that agrees the disagreement is attributed to the kink and dropped.
    """
    module.zero_grad()
    loss_fn().backward()
    worst = {}
    for name, p in module.named_parameters():
        analytic = p.grad.detach().clone()
        numeric = central_differences(loss_fn, p, eps)
        scale = max(analytic.abs().max().item(), numeric.abs().max().item(), 1e-12)
        bad = ((analytic - numeric).abs() / scale > tol).view(-1).nonzero().view(-1)
        for i in bad.tolist():
            fine = _entry_difference(loss_fn, p, i, kink_eps)
            if abs(fine - analytic.view(-1)[i].item()) / scale <= tol:
                numeric.view(-1)[i] = fine
        worst[name] = max_relative_error(analytic, numeric)
    return worst


def naive_gradcam(maps, alpha):
    """ReLU(sum_k alpha_k A^k) one pixel at a time; maps K×H×W, alpha K."""
    k, h, w = maps.shape
    out = torch.zeros(h, w, dtype=torch.float64)
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for c in range(k):
                acc += float(alpha[c]) * float(maps[c, i, j])
            out[i, j] = max(acc, 0.0)
    return out


def fd_cam_weights(classify, maps, class_index, eps=1e-3):
    """alpha_k by central differences of y^c w.r.t. every entry of A^k, averaged over positions."""
    maps = maps.detach().clone()
    grad = central_differences(lambda: classify(maps[None])[0, class_index], maps, eps)
    return grad.mean(dim=(-2, -1))


class CurvedClassifier(BaseClassifier):
    """Test classifier whose scores depend nonlinearly and position-wise on the maps."""

    def __init__(self, num_classes, width=8):
        super().__init__(num_classes, image_size=32, width=width)
        self.spatial = nn.Parameter(torch.randn(8, 8) * 0.5)

    def classify(self, feature_maps):
        return self.fc(gap(torch.tanh(feature_maps * self.spatial)))


def small_classifier(seed, curved=False, num_classes=4):
    """Randomly initialized float64 classifier over 32 px inputs (8×8 maps)."""
    torch.manual_seed(seed)
    if curved:
        model = CurvedClassifier(num_classes)
    else:
        model = BaseClassifier(num_classes, image_size=32, width=8)
    return model.double().eval()
