import numpy as np
import torch


def to_tensor(img, dtype=torch.float32) -> torch.Tensor:
    """(H, W, C) or (N, H, W, C) array -> (C, H, W) or (N, C, H, W) tensor."""
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    t = torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)
    return t.permute(2, 0, 1) if t.ndim == 3 else t.permute(0, 3, 1, 2)


def to_image(t: torch.Tensor) -> np.ndarray:
    """Inverse of :func:`to_tensor`, clamped to [0, 1]."""
    t = t.detach().clamp(0.0, 1.0).cpu()
    t = t.permute(1, 2, 0) if t.ndim == 3 else t.permute(0, 2, 3, 1)
    return t.numpy()
