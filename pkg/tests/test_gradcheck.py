import torch

from gradcheck import rel_errors


def test_kinks_are_resampled_and_counted():
    # relu(x) has a kink at 0; a probe of width 1e-6 around 5e-7 straddles it
    x = torch.linspace(0.1, 2.0, 30, dtype=torch.float64)
    x[:5] = 5e-7
    f = lambda t: (torch.relu(t) * torch.arange(1, 31, dtype=t.dtype)).sum()
    stats = {}
    errs = rel_errors(f, f, x, n=25, floor=0.0, stats=stats)
    assert len(errs) == 25 and errs.max() < 1e-6
    assert stats["kinks"] == 5


def test_wrong_gradient_is_caught():
    x = torch.linspace(0.1, 2.0, 30)
    wrong = lambda t: (torch.where(t > 1.0, t, t.detach() * 2 - t)).pow(2).sum()
    right = lambda t: t.pow(2).sum()
    assert rel_errors(wrong, right, x, n=20).max() > 0.5
