"""Small shared helper for whole-network target averaging."""

from offmbrl.autodiff import ema_update


def ema_update_pairs(pairs, momentum: float):
    """EMA every parameter of (target_mlp, online_mlp) pairs."""
    for target, online in pairs:
        for (_, tp), (_, op) in zip(target.named_params("t"), online.named_params("o")):
            ema_update([tp], [op], momentum)
