import json
import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch as T
import torch.nn as nn
import torch.nn.functional as F
import torch.optim as optim

from cachenoma.base import InvalidParameterError

LOSSES = ("mae", "mae_sinr")
SINR_CLAMP = 1e-12
CHECKPOINT_VERSION = 1


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def predictor_dims(k: int) -> List[int]:
    """
    Layer widths of the 5-layer predictor for K users. K = 3 and K = 4 use the published widths; other sizes scale
    with K^2.
    """

    if k == 3:
        return [9, 20, 30, 20, 10, 3]
    if k == 4:
        return [16, 35, 50, 35, 12, 4]
    if k < 1:
        raise InvalidParameterError(f"K must be >= 1, got {k}")
    return [k * k, 2 * k * k, 3 * k * k, 2 * k * k, k * k, k]


class Mlp(nn.Module):
    """
    Dense network with relu hidden layers and a softmax over the non-masked outputs. Runs in double precision on
    the CPU.
    """

    def __init__(self, dims: Sequence[int], seed: int = 0):
        super(Mlp, self).__init__()
        if len(dims) < 2 or any(int(d) < 1 for d in dims):
            raise InvalidParameterError(f"Layer dims must be at least two positive widths, got {dims}")
        self.dims = [int(d) for d in dims]
        self.seed = seed
        self.layers = nn.ModuleList(
            [nn.Linear(d_in, d_out, dtype=T.float64) for d_in, d_out in zip(self.dims, self.dims[1:])])

        gen = T.Generator().manual_seed(seed)
        with T.no_grad():
            for layer in self.layers:
                bound = 1.0 / np.sqrt(layer.in_features)
                layer.weight.copy_(T.rand(layer.weight.shape, generator=gen, dtype=T.float64) * 2 * bound - bound)
                layer.bias.copy_(T.rand(layer.bias.shape, generator=gen, dtype=T.float64) * 2 * bound - bound)

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    @property
    def output_dim(self) -> int:
        return self.dims[-1]

    def forward(self, state, mask=None):
        if state.shape[-1] != self.input_dim:
            raise InvalidParameterError(f"Input has {state.shape[-1]} entries, network expects {self.input_dim}")

        x = state
        for layer in self.layers[:-1]:
            x = F.relu(layer(x))
        logits = self.layers[-1](x)

        if mask is None:
            return F.softmax(logits, dim=-1)
        if mask.shape[-1] != self.output_dim:
            raise InvalidParameterError(f"Mask has {mask.shape[-1]} entries, network outputs {self.output_dim}")

        # rows without any active output come out as all zeros
        any_active = mask.any(dim=-1, keepdim=True)
        logits = logits.masked_fill(~mask & any_active, float("-inf"))
        return F.softmax(logits, dim=-1) * mask


class AdamState:
    """ADAM moments and step counter of one network."""

    def __init__(self, net: Mlp, config: Optional[AdamConfig] = None):
        self.config = config or AdamConfig()
        self.optimizer = optim.Adam(net.parameters(), lr=self.config.lr, betas=(self.config.beta1, self.config.beta2),
                                    eps=self.config.eps)
        self.steps = 0


def as_tensor(x) -> T.Tensor:
    return T.as_tensor(np.asarray(x, dtype=np.float64))


def as_mask(mask, dim: int) -> T.Tensor:
    if mask is None:
        return T.ones(dim, dtype=T.bool)
    return T.as_tensor(np.asarray(mask, dtype=bool))


def forward(net: Mlp, state, mask=None) -> np.ndarray:
    """Inference on one state or a batch of states."""

    with T.no_grad():
        return net(as_tensor(state), as_mask(mask, net.output_dim)).numpy()


def loss_mae(pred: T.Tensor, target: T.Tensor) -> T.Tensor:
    return (pred - target).abs().mean()


def sinr_terms(alpha: T.Tensor, order: T.Tensor, gains: T.Tensor, betas: T.Tensor, p_max: float = 1.0) -> T.Tensor:
    """
    Average SINR of every decode step of a full-bandwidth SIC under a fixed decode order, shape (B, K(K+1)/2).

    `order` holds the users strongest first. The user at rank r decodes the signals of ranks 0..r, each against the
    signals weaker than it. Expectations are the mean over the rows of `gains`.
    """

    alpha = alpha.reshape(-1, alpha.shape[-1])
    order = order.reshape(alpha.shape)
    k = alpha.shape[-1]

    power = T.gather(alpha, 1, order) * p_max
    weaker = T.flip(T.cumsum(T.flip(power, [1]), 1), [1]) - power
    h = gains[:, order]
    beta = betas[order]

    # sinr[n, b, r, s]: user at rank r decoding the signal at rank s
    sinr = h[..., :, None] * power[None, :, None, :] / T.clamp(
        h[..., :, None] * weaker[None, :, None, :] + beta[None, :, :, None], min=SINR_CLAMP)
    rows, cols = T.tril_indices(k, k)
    return sinr.mean(dim=0)[:, rows, cols]


def loss_mae_plus_sinr(pred: T.Tensor, target: T.Tensor, gains: T.Tensor, betas: T.Tensor,
                       p_max: float = 1.0) -> T.Tensor:
    """
    MAE plus the MAE between the average SINR terms induced by the prediction and by the target. The decode order
    of both is the descending order of the target, frozen for the gradient.
    """

    order = T.argsort(target.reshape(-1, target.shape[-1]).detach(), dim=1, descending=True, stable=True)
    return loss_mae(pred, target) + loss_mae(sinr_terms(pred, order, gains, betas, p_max),
                                             sinr_terms(target, order, gains, betas, p_max))


def compute_loss(net: Mlp, state, mask, target, loss: str = "mae", aux: Optional[dict] = None) -> T.Tensor:
    if loss not in LOSSES:
        raise InvalidParameterError(f"Unknown loss {loss}, expected one of {LOSSES}")
    pred = net(as_tensor(state), as_mask(mask, net.output_dim))
    target = as_tensor(target)
    if loss == "mae":
        return loss_mae(pred, target)
    aux = aux or {}
    return loss_mae_plus_sinr(pred, target, as_tensor(aux["gains"]), as_tensor(aux["betas"]), aux.get("p_max", 1.0))


def backprop(net: Mlp, state, mask, target, loss: str = "mae", aux: Optional[dict] = None) -> Dict[str, np.ndarray]:
    """
    Exact gradients of the chosen loss for every weight and bias, keyed by parameter name.
    """

    net.zero_grad()
    value = compute_loss(net, state, mask, target, loss, aux)
    value.backward()
    return {name: p.grad.detach().numpy().copy() if p.grad is not None else np.zeros(tuple(p.shape))
            for name, p in net.named_parameters()}


def adam_step(net: Mlp, grads: Dict[str, np.ndarray], state: AdamState) -> Tuple[Mlp, AdamState]:
    params = dict(net.named_parameters())
    for name, grad in grads.items():
        if params[name].shape != grad.shape:
            raise InvalidParameterError(f"Gradient of {name} has shape {grad.shape}, expected {params[name].shape}")
        params[name].grad = as_tensor(grad)
    state.optimizer.step()
    state.steps += 1
    return net, state


def gradient_check(net: Mlp, state, mask, target, loss: str = "mae", aux: Optional[dict] = None,
                   step: float = 1e-5) -> float:
    """
    Largest relative error between backprop and central finite differences over every parameter entry.
    """

    analytic = backprop(net, state, mask, target, loss, aux)
    worst = 0.0
    with T.no_grad():
        for name, p in net.named_parameters():
            flat = p.view(-1)
            numeric = np.empty(flat.numel())
            for idx in range(flat.numel()):
                original = flat[idx].item()
                flat[idx] = original + step
                up = compute_loss(net, state, mask, target, loss, aux).item()
                flat[idx] = original - step
                down = compute_loss(net, state, mask, target, loss, aux).item()
                flat[idx] = original
                numeric[idx] = (up - down) / (2 * step)

            a = analytic[name].reshape(-1)
            err = np.abs(a - numeric) / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-6)
            worst = max(worst, float(err.max()))

    logging.debug(f"Gradient check: worst relative error {worst:.3g}")
    return worst


def save_checkpoint(path: str, net: Mlp, state: Optional[AdamState] = None, meta: Optional[dict] = None):
    """
    Write an .npz archive: dims, W{l} (out x in) and b{l} as float64, the ADAM moments m_W{l}, v_W{l}, m_b{l},
    v_b{l} with the step counter when a state is given, and a JSON metadata string.
    """

    arrays = {"version": np.array(CHECKPOINT_VERSION), "dims": np.array(net.dims, dtype=np.int64)}
    for l, layer in enumerate(net.layers):
        arrays[f"W{l}"] = layer.weight.detach().numpy().astype(np.float64)
        arrays[f"b{l}"] = layer.bias.detach().numpy().astype(np.float64)
        if state is not None:
            for key, p in ((f"W{l}", layer.weight), (f"b{l}", layer.bias)):
                moments = state.optimizer.state.get(p, {})
                arrays[f"m_{key}"] = moments["exp_avg"].numpy() if moments else np.zeros(tuple(p.shape))
                arrays[f"v_{key}"] = moments["exp_avg_sq"].numpy() if moments else np.zeros(tuple(p.shape))
    if state is not None:
        arrays["step"] = np.array(state.steps, dtype=np.int64)
        arrays["adam"] = np.array([state.config.lr, state.config.beta1, state.config.beta2, state.config.eps])
    arrays["meta"] = np.array(json.dumps({"seed": net.seed, **(meta or {})}, sort_keys=True))

    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "wb") as f:
            np.savez(f, **arrays)
    except OSError as e:
        raise OSError(f"Could not write checkpoint {path}: {e}") from e


def load_checkpoint(path: str) -> Tuple[Mlp, Optional[AdamState], dict]:
    try:
        archive = np.load(path, allow_pickle=False)
    except OSError as e:
        raise OSError(f"Could not read checkpoint {path}: {e}") from e

    with archive:
        meta = json.loads(str(archive["meta"]))
        net = Mlp(archive["dims"].tolist(), seed=meta.get("seed", 0))
        with T.no_grad():
            for l, layer in enumerate(net.layers):
                layer.weight.copy_(T.as_tensor(archive[f"W{l}"]))
                layer.bias.copy_(T.as_tensor(archive[f"b{l}"]))

        state = None
        if "step" in archive.files:
            lr, beta1, beta2, eps = archive["adam"].tolist()
            state = AdamState(net, AdamConfig(lr, beta1, beta2, eps))
            state.steps = int(archive["step"])
            if state.steps > 0:
                for l, layer in enumerate(net.layers):
                    for key, p in ((f"W{l}", layer.weight), (f"b{l}", layer.bias)):
                        state.optimizer.state[p] = {
                            "step": T.tensor(float(state.steps)),
                            "exp_avg": T.as_tensor(archive[f"m_{key}"]).clone(),
                            "exp_avg_sq": T.as_tensor(archive[f"v_{key}"]).clone(),
                        }

    return net, state, meta
